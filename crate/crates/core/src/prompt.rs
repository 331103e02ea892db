//! Conditioning inputs for the generator.
//!
//! Each triplet is produced in three stages. The encoder sees the sentence,
//! the components generated so far in the current triplet and the history of
//! triplets produced earlier for the same sentence; the decoder is prefixed
//! with the marker of the component to generate:
//!
//! ```text
//! stage 1: <sentence> _history : <history>                                 -> _cause :
//! stage 2: <sentence> _cause : <cause> _history : <history>                -> _effect :
//! stage 3: <sentence> _cause : <cause> _effect : <effect> _history : <history> -> _signal :
//! ```
//!
//! With [`GenerationOrder::EffectCauseSignal`] cause and effect swap places.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::dataset::{AnnotatedExample, MAX_TRIPLETS};
use crate::text::{Component, GenerationOrder};

pub const CAUSE_MARKER: &str = "_cause :";
pub const EFFECT_MARKER: &str = "_effect :";
pub const SIGNAL_MARKER: &str = "_signal :";
pub const HISTORY_MARKER: &str = "_history :";
/// Target text for a triplet without a signal.
pub const EMPTY_TOKEN: &str = "_empty";

pub const ALL_MARKERS: [&str; 5] = [
    CAUSE_MARKER,
    EFFECT_MARKER,
    SIGNAL_MARKER,
    HISTORY_MARKER,
    EMPTY_TOKEN,
];

pub fn marker(component: Component) -> &'static str {
    match component {
        Component::Cause => CAUSE_MARKER,
        Component::Effect => EFFECT_MARKER,
        Component::Signal => SIGNAL_MARKER,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptStage {
    First,
    Second,
    Third,
}

impl PromptStage {
    pub const ALL: [PromptStage; 3] = [PromptStage::First, PromptStage::Second, PromptStage::Third];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Component generated at this stage.
    pub fn component(self, order: GenerationOrder) -> Component {
        order.components()[self.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("stage {stage:?} needs {expected} prior components, got {got}")]
    Arity {
        stage: PromptStage,
        expected: usize,
        got: usize,
    },
    #[error("permutation length {0} is outside 1..=4")]
    PermutationLength(usize),
}

/// Surface texts of one previously produced triplet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub cause: String,
    pub effect: String,
    pub signal: Option<String>,
}

impl HistoryEntry {
    pub fn new(
        cause: impl Into<String>,
        effect: impl Into<String>,
        signal: Option<String>,
    ) -> Self {
        HistoryEntry {
            cause: cause.into(),
            effect: effect.into(),
            signal,
        }
    }

    fn text(&self, c: Component) -> &str {
        match c {
            Component::Cause => &self.cause,
            Component::Effect => &self.effect,
            Component::Signal => self.signal.as_deref().unwrap_or(EMPTY_TOKEN),
        }
    }
}

/// Serializes prior triplets, each as `marker text` pairs in generation
/// order. An absent signal becomes `_signal : _empty`.
pub fn serialize_history(prior: &[HistoryEntry], order: GenerationOrder) -> String {
    let mut parts = Vec::with_capacity(prior.len() * 6);
    for entry in prior {
        for c in order.components() {
            parts.push(marker(c));
            parts.push(entry.text(c));
        }
    }
    parts.join(" ")
}

/// Inverse of [`serialize_history`].
pub fn parse_history(history: &str, order: GenerationOrder) -> Option<Vec<HistoryEntry>> {
    if history.trim().is_empty() {
        return Some(Vec::new());
    }
    let comps = order.components();
    let mut rest = history.trim();
    let mut out = Vec::new();
    loop {
        let mut texts: [Option<String>; 3] = Default::default();
        for (k, c) in comps.iter().enumerate() {
            rest = rest.strip_prefix(marker(*c))?.trim_start();
            let next = comps
                .get(k + 1)
                .copied()
                .map(marker)
                .unwrap_or(marker(comps[0]));
            let end = find_marker(rest, next).unwrap_or(rest.len());
            texts[*c as usize] = Some(rest[..end].trim_end().to_owned());
            rest = rest[end..].trim_start();
        }
        let [cause, effect, signal] = texts;
        let signal = signal.filter(|s| s != EMPTY_TOKEN);
        out.push(HistoryEntry::new(cause?, effect?, signal));
        if rest.is_empty() {
            return Some(out);
        }
    }
}

fn find_marker(s: &str, m: &str) -> Option<usize> {
    let mut from = 0;
    while let Some(i) = s[from..].find(m) {
        let at = from + i;
        if at == 0 || s[..at].ends_with(' ') {
            return Some(at);
        }
        from = at + m.len();
    }
    None
}

/// Builds the encoder input for `stage`. `partial` holds the texts of the
/// components already generated in this triplet, in generation order.
pub fn build_encoder_input(
    sentence: &str,
    stage: PromptStage,
    partial: &[&str],
    history: &str,
    order: GenerationOrder,
) -> Result<String, PromptError> {
    let expected = stage.index();
    if partial.len() != expected {
        return Err(PromptError::Arity {
            stage,
            expected,
            got: partial.len(),
        });
    }
    let mut out = String::with_capacity(sentence.len() + history.len() + 64);
    out.push_str(sentence);
    for (c, text) in order.components().iter().zip(partial) {
        out.push(' ');
        out.push_str(marker(*c));
        out.push(' ');
        out.push_str(text);
    }
    out.push(' ');
    out.push_str(HISTORY_MARKER);
    if !history.is_empty() {
        out.push(' ');
        out.push_str(history);
    }
    Ok(out)
}

pub fn build_decoder_prefix(stage: PromptStage, order: GenerationOrder) -> &'static str {
    marker(stage.component(order))
}

/// Uniformly random ordering of `0..n`, for `n` in `1..=4`.
pub fn sample_permutation<R: Rng + ?Sized>(
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>, PromptError> {
    if !(1..=MAX_TRIPLETS).contains(&n) {
        return Err(PromptError::PermutationLength(n));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    Ok(perm)
}

/// One conditioning triple for the generator, as written to the training
/// export file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub example_id: String,
    pub round_index: usize,
    pub stage: PromptStage,
    pub encoder_input: String,
    pub decoder_prefix: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum ExportWarning {
    /// The sentence text itself contains one of the marker literals.
    MarkerCollision { example_id: String, marker: String },
}

#[derive(Debug, Clone, Default)]
pub struct TrainingExport {
    pub instances: Vec<PromptInstance>,
    pub warnings: Vec<ExportWarning>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExportConfig {
    pub order: GenerationOrder,
    pub epochs: usize,
    pub seed: u64,
    pub include_history: bool,
}

/// Returns the marker literals that occur inside `text`.
pub fn marker_collisions(text: &str) -> Vec<&'static str> {
    ALL_MARKERS
        .iter()
        .copied()
        .filter(|m| text.contains(m))
        .collect()
}

/// Emits three instances per gold triplet. For every epoch and example a
/// fresh triplet ordering is drawn, and each triplet is conditioned on the
/// ones that precede it in that ordering.
pub fn export_training_instances(
    examples: &[AnnotatedExample],
    config: ExportConfig,
) -> TrainingExport {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut export = TrainingExport::default();

    for ex in examples {
        for m in marker_collisions(ex.sentence.text()) {
            warn!(
                example = ex.sentence.id(),
                marker = m,
                "marker literal inside sentence text"
            );
            export.warnings.push(ExportWarning::MarkerCollision {
                example_id: ex.sentence.id().to_owned(),
                marker: m.to_owned(),
            });
        }
    }

    for _ in 0..config.epochs {
        for ex in examples {
            let sentence = &ex.sentence;
            // validated by AnnotatedExample
            let perm = sample_permutation(ex.triplets.len(), &mut rng).expect("1..=4 triplets");
            let mut history: Vec<HistoryEntry> = Vec::with_capacity(perm.len());
            for (round, &ti) in perm.iter().enumerate() {
                let t = &ex.triplets[ti];
                let text_of = |c: Component| {
                    t.get(c)
                        .map(|s| sentence.span_text(s).expect("validated span").to_owned())
                };
                let entry = HistoryEntry::new(
                    text_of(Component::Cause).unwrap(),
                    text_of(Component::Effect).unwrap(),
                    text_of(Component::Signal),
                );
                let history_str = if config.include_history {
                    serialize_history(&history, config.order)
                } else {
                    String::new()
                };
                let comps = config.order.components();
                for stage in PromptStage::ALL {
                    let partial: Vec<&str> = comps[..stage.index()]
                        .iter()
                        .map(|&c| entry.text(c))
                        .collect();
                    let encoder_input = build_encoder_input(
                        sentence.text(),
                        stage,
                        &partial,
                        &history_str,
                        config.order,
                    )
                    .expect("arity follows the stage");
                    export.instances.push(PromptInstance {
                        example_id: sentence.id().to_owned(),
                        round_index: round,
                        stage,
                        encoder_input,
                        decoder_prefix: build_decoder_prefix(stage, config.order).to_owned(),
                        target: entry.text(stage.component(config.order)).to_owned(),
                    });
                }
                history.push(entry);
            }
        }
    }
    export
}

/// Longest target in word tokens, for checking against the generation
/// budget.
pub fn longest_target_tokens(instances: &[PromptInstance]) -> usize {
    instances
        .iter()
        .map(|i| crate::text::tokenize(&i.target).len())
        .max()
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{CesTriplet, Sentence};

    const BOMBING: &str = "The bombing created panic among villagers.";
    const CES: GenerationOrder = GenerationOrder::CauseEffectSignal;
    const ECS: GenerationOrder = GenerationOrder::EffectCauseSignal;

    fn bombing_entry(signal: bool) -> HistoryEntry {
        HistoryEntry::new(
            "The bombing",
            "panic among villagers",
            signal.then(|| "created".into()),
        )
    }

    #[test]
    fn history_serialization() {
        assert_eq!(serialize_history(&[], CES), "");
        assert_eq!(
            serialize_history(&[bombing_entry(true)], CES),
            "_cause : The bombing _effect : panic among villagers _signal : created"
        );
        let no_sig = serialize_history(&[bombing_entry(false)], CES);
        assert_eq!(
            no_sig,
            "_cause : The bombing _effect : panic among villagers _signal : _empty"
        );
        assert_eq!(
            parse_history(&no_sig, CES).unwrap(),
            vec![bombing_entry(false)]
        );
        assert_eq!(
            serialize_history(&[bombing_entry(true)], ECS),
            "_effect : panic among villagers _cause : The bombing _signal : created"
        );
        let two = [
            bombing_entry(true),
            HistoryEntry::new("rain", "floods", None),
        ];
        for order in [CES, ECS] {
            assert_eq!(
                parse_history(&serialize_history(&two, order), order).unwrap(),
                two
            );
        }
    }

    #[test]
    fn encoder_inputs() {
        assert_eq!(
            build_encoder_input(BOMBING, PromptStage::First, &[], "", CES).unwrap(),
            "The bombing created panic among villagers. _history :"
        );
        assert_eq!(
            build_encoder_input(
                BOMBING,
                PromptStage::Third,
                &["The bombing", "panic among villagers"],
                "",
                CES
            )
            .unwrap(),
            "The bombing created panic among villagers. _cause : The bombing _effect : panic among villagers _history :"
        );
        assert_eq!(
            build_encoder_input(
                BOMBING,
                PromptStage::Second,
                &["panic among villagers"],
                "",
                ECS
            )
            .unwrap(),
            format!("{BOMBING} _effect : panic among villagers _history :")
        );
        let hist = serialize_history(&[bombing_entry(true)], CES);
        assert_eq!(
            build_encoder_input(BOMBING, PromptStage::First, &[], &hist, CES).unwrap(),
            format!("{BOMBING} _history : {hist}")
        );
        assert_eq!(
            build_encoder_input(BOMBING, PromptStage::Second, &[], "", CES),
            Err(PromptError::Arity {
                stage: PromptStage::Second,
                expected: 1,
                got: 0
            })
        );
    }

    #[test]
    fn decoder_prefixes() {
        assert_eq!(build_decoder_prefix(PromptStage::First, CES), "_cause :");
        assert_eq!(build_decoder_prefix(PromptStage::Second, CES), "_effect :");
        assert_eq!(build_decoder_prefix(PromptStage::First, ECS), "_effect :");
        assert_eq!(build_decoder_prefix(PromptStage::Second, ECS), "_cause :");
        for order in [CES, ECS] {
            assert_eq!(build_decoder_prefix(PromptStage::Third, order), "_signal :");
        }
    }

    #[test]
    fn permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(sample_permutation(1, &mut rng).unwrap(), vec![0]);
        assert!(sample_permutation(0, &mut rng).is_err());
        assert!(sample_permutation(5, &mut rng).is_err());
        let a = sample_permutation(4, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = sample_permutation(4, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }

    #[test]
    fn permutation_frequencies_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2022);
        let mut counts = std::collections::HashMap::new();
        let draws = 10_000;
        for _ in 0..draws {
            *counts
                .entry(sample_permutation(3, &mut rng).unwrap())
                .or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        for (p, c) in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 1.0 / 6.0).abs() <= 0.02, "{p:?}: {freq}");
        }
    }

    fn two_triplet_example() -> AnnotatedExample {
        let s = Sentence::new("ex1", "Rain fell, so floods came and roads closed.");
        let t1 = CesTriplet::new(
            s.span_from_tokens(0..2).unwrap(),
            s.span_from_tokens(4..6).unwrap(),
            Some(s.span_from_tokens(3..4).unwrap()),
        );
        let t2 = CesTriplet::new(
            s.span_from_tokens(4..6).unwrap(),
            s.span_from_tokens(7..9).unwrap(),
            None,
        );
        AnnotatedExample::new(s, vec![t1, t2]).unwrap()
    }

    #[test]
    fn export_two_triplets() {
        let ex = two_triplet_example();
        let cfg = ExportConfig {
            order: CES,
            epochs: 1,
            seed: 3,
            include_history: true,
        };
        let out = export_training_instances(std::slice::from_ref(&ex), cfg);
        assert_eq!(out.instances.len(), 6);
        assert!(out.warnings.is_empty());
        for (i, inst) in out.instances.iter().enumerate() {
            assert_eq!(inst.round_index, i / 3);
            assert!(inst.encoder_input.starts_with(ex.sentence.text()));
            assert_eq!(inst.encoder_input.matches(HISTORY_MARKER).count(), 1);
            assert!(!inst.target.is_empty());
            let hist = inst.encoder_input.split(HISTORY_MARKER).nth(1).unwrap();
            let entries = parse_history(hist, CES).unwrap();
            assert_eq!(entries.len(), i / 3);
        }
        // the second round's history is the first round's triplet
        let first: Vec<&str> = out.instances[..3]
            .iter()
            .map(|i| i.target.as_str())
            .collect();
        let hist = out.instances[3]
            .encoder_input
            .split(HISTORY_MARKER)
            .nth(1)
            .unwrap();
        let entry = &parse_history(hist, CES).unwrap()[0];
        assert_eq!(entry.cause, first[0]);
        assert_eq!(entry.effect, first[1]);
        assert_eq!(entry.signal.as_deref().unwrap_or(EMPTY_TOKEN), first[2]);
        let targets: Vec<&str> = out.instances.iter().map(|i| i.target.as_str()).collect();
        assert!(targets.contains(&EMPTY_TOKEN));
        assert!(targets.contains(&"so"));
    }

    #[test]
    fn export_without_history_and_determinism() {
        let ex = two_triplet_example();
        let cfg = ExportConfig {
            order: ECS,
            epochs: 3,
            seed: 11,
            include_history: false,
        };
        let out = export_training_instances(std::slice::from_ref(&ex), cfg);
        assert_eq!(out.instances.len(), 18);
        for inst in &out.instances {
            assert!(inst.encoder_input.ends_with(HISTORY_MARKER));
        }
        let again = export_training_instances(std::slice::from_ref(&ex), cfg);
        assert_eq!(out.instances, again.instances);
        assert_eq!(out.instances[0].decoder_prefix, EFFECT_MARKER);
    }

    #[test]
    fn marker_collision_is_reported() {
        let s = Sentence::new("odd", "The file _history : was lost after the crash.");
        let t = CesTriplet::new(
            s.span_from_tokens(8..10).unwrap(),
            s.span_from_tokens(0..7).unwrap(),
            None,
        );
        let ex = AnnotatedExample::new(s, vec![t]).unwrap();
        let cfg = ExportConfig {
            order: CES,
            epochs: 1,
            seed: 0,
            include_history: true,
        };
        let out = export_training_instances(&[ex], cfg);
        assert_eq!(out.instances.len(), 3);
        assert_eq!(
            out.warnings,
            vec![ExportWarning::MarkerCollision {
                example_id: "odd".into(),
                marker: HISTORY_MARKER.into()
            }]
        );
    }
}
