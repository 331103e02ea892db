//! BIO tagging and the shared-task scores.
//!
//! Every gold triplet of every example contributes one item per component.
//! Predictions are paired with gold triplets one-to-one so that the summed
//! per-pair score is maximal; a gold triplet left unpaired is scored against
//! an empty prediction. Component F1 is the mean over its items and overall
//! F1 is the item-weighted mean of the three components.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;
use thiserror::Error;

use crate::dataset::{AnnotatedExample, ParsedRow};
use crate::text::{AlignmentError, CesTriplet, Component, Sentence, Span};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Bio {
    B,
    I,
    O,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error("sequence lengths differ: {pred} vs {gold}")]
    LengthMismatch { pred: usize, gold: usize },
    #[error("I tag at position {0} does not continue a chunk")]
    IllFormed(usize),
    #[error("cross-entropy group {0} is empty")]
    EmptyGroup(String),
    #[error("no items to average")]
    Undefined,
}

/// Tags over the tokens of one sentence for a single component type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BioSequence(Vec<Bio>);

impl BioSequence {
    pub fn new(tags: Vec<Bio>) -> Result<Self, EvalError> {
        let mut prev = Bio::O;
        for (i, &t) in tags.iter().enumerate() {
            if t == Bio::I && prev == Bio::O {
                return Err(EvalError::IllFormed(i));
            }
            prev = t;
        }
        Ok(BioSequence(tags))
    }

    pub fn tags(&self) -> &[Bio] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Maximal chunks as token index ranges `[start, end)`.
    pub fn chunks(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut open: Option<usize> = None;
        for (i, &t) in self.0.iter().enumerate() {
            match t {
                Bio::B => {
                    if let Some(s) = open.replace(i) {
                        out.push((s, i));
                    }
                }
                Bio::I => {}
                Bio::O => {
                    if let Some(s) = open.take() {
                        out.push((s, i));
                    }
                }
            }
        }
        if let Some(s) = open {
            out.push((s, self.0.len()));
        }
        out
    }
}

pub fn to_bio(sentence: &Sentence, span: Option<Span>) -> Result<BioSequence, EvalError> {
    let mut tags = vec![Bio::O; sentence.len_tokens()];
    if let Some(span) = span {
        let range = sentence.token_range(span)?;
        tags[range.start] = Bio::B;
        for t in &mut tags[range.start + 1..range.end] {
            *t = Bio::I;
        }
    }
    Ok(BioSequence(tags))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum F1Mode {
    /// Exact chunk matches.
    #[default]
    Entity,
    /// Exact (position, tag) matches over non-O positions.
    Token,
}

impl std::str::FromStr for F1Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "entity" => Ok(F1Mode::Entity),
            "token" => Ok(F1Mode::Token),
            other => Err(format!(
                "unknown F1 mode `{other}` (expected entity or token)"
            )),
        }
    }
}

fn prf(matched: usize, predicted: usize, gold: usize) -> f64 {
    if predicted == 0 && gold == 0 {
        return 1.0;
    }
    if matched == 0 {
        return 0.0;
    }
    let p = matched as f64 / predicted as f64;
    let r = matched as f64 / gold as f64;
    2.0 * p * r / (p + r)
}

/// F1 of `pred` against `gold`. Both all-O scores 1.
pub fn sequence_f1(pred: &BioSequence, gold: &BioSequence, mode: F1Mode) -> Result<f64, EvalError> {
    if pred.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    Ok(match mode {
        F1Mode::Entity => {
            let p: BTreeSet<_> = pred.chunks().into_iter().collect();
            let g: BTreeSet<_> = gold.chunks().into_iter().collect();
            prf(p.intersection(&g).count(), p.len(), g.len())
        }
        F1Mode::Token => {
            let non_o = |s: &BioSequence| s.0.iter().filter(|&&t| t != Bio::O).count();
            let matched = pred
                .0
                .iter()
                .zip(&gold.0)
                .filter(|(p, g)| **p != Bio::O && p == g)
                .count();
            prf(matched, non_o(pred), non_o(gold))
        }
    })
}

/// What to do with a signal item when neither side has a signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum SignalAbsence {
    /// Count it as a correct item scoring 1.
    #[default]
    CountCorrect,
    /// Leave it out of the signal average.
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ScoreConfig {
    pub mode: F1Mode,
    pub signal_absence: SignalAbsence,
}

/// Per-component scores of one (prediction, gold) pair. `None` marks a
/// signal item that does not contribute.
pub fn pair_scores(
    sentence: &Sentence,
    pred: Option<&CesTriplet>,
    gold: &CesTriplet,
    config: ScoreConfig,
) -> Result<[Option<f64>; 3], EvalError> {
    let mut out = [None; 3];
    for c in Component::ALL {
        let p = pred.and_then(|t| t.get(c));
        let g = gold.get(c);
        if c == Component::Signal
            && p.is_none()
            && g.is_none()
            && config.signal_absence == SignalAbsence::Drop
        {
            continue;
        }
        let score = sequence_f1(&to_bio(sentence, p)?, &to_bio(sentence, g)?, config.mode)?;
        out[c as usize] = Some(score);
    }
    Ok(out)
}

fn mean_item_score(scores: &[Option<f64>; 3]) -> f64 {
    let vals: Vec<f64> = scores.iter().flatten().copied().collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// One-to-one partial pairing of predictions with gold triplets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Pairing {
    /// For each gold triplet, the index of its prediction.
    pub gold_to_pred: Vec<Option<usize>>,
    pub unmatched_predictions: Vec<usize>,
    /// Per gold triplet, the component scores under this pairing.
    pub scores: Vec<[Option<f64>; 3]>,
    pub total: f64,
}

/// Exhaustively pairs predictions with gold triplets, maximizing the summed
/// mean component score over pairings of size `min(pred, gold)`. A gold
/// triplet is left unpaired only when the predictions have run out.
/// Enumeration tries lower prediction indices first and keeps the first
/// maximum, so ties resolve towards file order.
pub fn align_triplets(
    sentence: &Sentence,
    pred: &[CesTriplet],
    gold: &[CesTriplet],
    config: ScoreConfig,
) -> Result<Pairing, EvalError> {
    // scores[g][p] for p < pred.len(); scores[g][pred.len()] = unpaired
    let mut table = Vec::with_capacity(gold.len());
    for g in gold {
        let mut row = Vec::with_capacity(pred.len() + 1);
        for p in pred {
            row.push(pair_scores(sentence, Some(p), g, config)?);
        }
        row.push(pair_scores(sentence, None, g, config)?);
        table.push(row);
    }
    let means: Vec<Vec<f64>> = table
        .iter()
        .map(|row| row.iter().map(mean_item_score).collect())
        .collect();

    struct Search<'a> {
        means: &'a [Vec<f64>],
        n_pred: usize,
        used: Vec<bool>,
        /// gold triplets that may still go unpaired
        skips_left: usize,
        current: Vec<Option<usize>>,
        best: Option<(f64, Vec<Option<usize>>)>,
    }

    impl Search<'_> {
        fn run(&mut self, g: usize, acc: f64) {
            if g == self.means.len() {
                if self.best.as_ref().is_none_or(|(b, _)| acc > *b + 1e-12) {
                    self.best = Some((acc, self.current.clone()));
                }
                return;
            }
            for p in 0..self.n_pred {
                if self.used[p] {
                    continue;
                }
                self.used[p] = true;
                self.current.push(Some(p));
                self.run(g + 1, acc + self.means[g][p]);
                self.current.pop();
                self.used[p] = false;
            }
            if self.skips_left > 0 {
                self.skips_left -= 1;
                self.current.push(None);
                self.run(g + 1, acc + self.means[g][self.n_pred]);
                self.current.pop();
                self.skips_left += 1;
            }
        }
    }

    let mut search = Search {
        means: &means,
        n_pred: pred.len(),
        used: vec![false; pred.len()],
        skips_left: gold.len().saturating_sub(pred.len()),
        current: Vec::with_capacity(gold.len()),
        best: None,
    };
    search.run(0, 0.0);
    let (total, gold_to_pred) = search.best.expect("the search always visits a leaf");
    let scores = gold_to_pred
        .iter()
        .enumerate()
        .map(|(g, p)| table[g][p.unwrap_or(pred.len())])
        .collect();
    let used: BTreeSet<usize> = gold_to_pred.iter().flatten().copied().collect();
    Ok(Pairing {
        unmatched_predictions: (0..pred.len()).filter(|p| !used.contains(p)).collect(),
        gold_to_pred,
        scores,
        total,
    })
}

/// Gold and predicted triplets of one sentence.
#[derive(Debug, Clone, Copy)]
pub struct ExampleScoring<'a> {
    pub sentence: &'a Sentence,
    pub gold: &'a [CesTriplet],
    pub pred: &'a [CesTriplet],
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ComponentScore {
    /// Percentage in [0, 100]; 0 when there are no items.
    pub f1: f64,
    pub items: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MetricsReport {
    pub cause: ComponentScore,
    pub effect: ComponentScore,
    pub signal: ComponentScore,
    pub overall_f1: f64,
    pub es_accuracy: Option<f64>,
    pub ce: Option<f64>,
    pub hallucinations: usize,
    /// Overall F1 of the examples with a given number of gold triplets.
    pub per_bucket: BTreeMap<usize, f64>,
    pub unmatched_predictions: usize,
    pub n_examples: usize,
}

impl MetricsReport {
    pub fn component(&self, c: Component) -> &ComponentScore {
        match c {
            Component::Cause => &self.cause,
            Component::Effect => &self.effect,
            Component::Signal => &self.signal,
        }
    }

    /// Fixed-order `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for c in Component::ALL {
            let s = self.component(c);
            out.push_str(&format!("{c}_f1={:.4}\n{c}_items={}\n", s.f1, s.items));
        }
        out.push_str(&format!("overall_f1={:.4}\n", self.overall_f1));
        match self.es_accuracy {
            Some(v) => out.push_str(&format!("es_accuracy={v:.4}\n")),
            None => out.push_str("es_accuracy=undefined\n"),
        }
        match self.ce {
            Some(v) => out.push_str(&format!("ce={v:.6}\n")),
            None => out.push_str("ce=undefined\n"),
        }
        out.push_str(&format!("hallucinations={}\n", self.hallucinations));
        out.push_str(&format!(
            "unmatched_predictions={}\n",
            self.unmatched_predictions
        ));
        out.push_str(&format!("n_examples={}\n", self.n_examples));
        for (k, v) in &self.per_bucket {
            out.push_str(&format!("bucket_{k}_f1={v:.4}\n"));
        }
        out
    }
}

#[derive(Default)]
struct Acc {
    sums: [f64; 3],
    counts: [usize; 3],
}

impl Acc {
    fn add(&mut self, scores: &[Option<f64>; 3]) {
        for (k, s) in scores.iter().enumerate() {
            if let Some(s) = s {
                self.sums[k] += s;
                self.counts[k] += 1;
            }
        }
    }

    fn overall(&self) -> f64 {
        let n: usize = self.counts.iter().sum();
        if n == 0 {
            0.0
        } else {
            100.0 * self.sums.iter().sum::<f64>() / n as f64
        }
    }

    fn component(&self, k: usize) -> ComponentScore {
        ComponentScore {
            f1: if self.counts[k] == 0 {
                0.0
            } else {
                100.0 * self.sums[k] / self.counts[k] as f64
            },
            items: self.counts[k],
        }
    }
}

/// Corpus-level component and overall F1. Examples are reduced in the
/// given order.
pub fn corpus_f1(
    examples: &[ExampleScoring<'_>],
    config: ScoreConfig,
) -> Result<MetricsReport, EvalError> {
    let mut all = Acc::default();
    let mut buckets: BTreeMap<usize, Acc> = BTreeMap::new();
    let mut unmatched = 0;
    for ex in examples {
        let pairing = align_triplets(ex.sentence, ex.pred, ex.gold, config)?;
        unmatched += pairing.unmatched_predictions.len();
        let bucket = buckets.entry(ex.gold.len()).or_default();
        for s in &pairing.scores {
            all.add(s);
            bucket.add(s);
        }
    }
    Ok(MetricsReport {
        cause: all.component(0),
        effect: all.component(1),
        signal: all.component(2),
        overall_f1: all.overall(),
        per_bucket: buckets.into_iter().map(|(k, a)| (k, a.overall())).collect(),
        unmatched_predictions: unmatched,
        n_examples: examples.len(),
        ..Default::default()
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MatchUpError {
    #[error("prediction id `{0}` appears more than once")]
    DuplicateId(String),
    #[error("prediction `{id}` has a different sentence text than the gold example")]
    TextDiffers { id: String },
}

/// Pairs prediction rows with gold examples by id. Gold examples without a
/// prediction row get an empty prediction; the ids of prediction rows
/// without a gold example are returned alongside.
pub fn match_predictions<'a>(
    gold: &'a [AnnotatedExample],
    pred: &'a [ParsedRow],
) -> Result<(Vec<ExampleScoring<'a>>, Vec<String>), MatchUpError> {
    let mut by_id: HashMap<&str, &ParsedRow> = HashMap::with_capacity(pred.len());
    for row in pred {
        if by_id.insert(row.sentence.id(), row).is_some() {
            return Err(MatchUpError::DuplicateId(row.sentence.id().to_owned()));
        }
    }
    let mut scored = Vec::with_capacity(gold.len());
    for ex in gold {
        let p: &[CesTriplet] = match by_id.remove(ex.sentence.id()) {
            Some(row) if row.sentence.text() != ex.sentence.text() => {
                return Err(MatchUpError::TextDiffers {
                    id: row.sentence.id().to_owned(),
                })
            }
            Some(row) => &row.triplets,
            None => &[],
        };
        scored.push(ExampleScoring {
            sentence: &ex.sentence,
            gold: &ex.triplets,
            pred: p,
        });
    }
    let mut extra: Vec<String> = pred
        .iter()
        .map(|r| r.sentence.id())
        .filter(|id| by_id.contains_key(id))
        .map(str::to_owned)
        .collect();
    extra.dedup();
    Ok((scored, extra))
}

/// Accuracy (percent) of predicting "no signal" over the items whose gold
/// triplet has no signal. Each item is `(predicted_is_empty,
/// gold_has_signal)`; items with a gold signal are ignored.
pub fn es_accuracy(items: &[(bool, bool)]) -> Result<f64, EvalError> {
    let relevant: Vec<bool> = items
        .iter()
        .filter(|(_, gold_has_signal)| !gold_has_signal)
        .map(|(pred_empty, _)| *pred_empty)
        .collect();
    if relevant.is_empty() {
        return Err(EvalError::Undefined);
    }
    Ok(100.0 * relevant.iter().filter(|&&c| c).count() as f64 / relevant.len() as f64)
}

/// Mean token cross-entropy: over tokens within an input, then over inputs
/// within an example, then over examples.
pub fn aggregate_ce(per_example: &[Vec<Vec<f64>>]) -> Result<f64, EvalError> {
    if per_example.is_empty() {
        return Err(EvalError::EmptyGroup("corpus".into()));
    }
    let mut total = 0.0;
    for (e, inputs) in per_example.iter().enumerate() {
        if inputs.is_empty() {
            return Err(EvalError::EmptyGroup(format!("example {e}")));
        }
        let mut ex_sum = 0.0;
        for (i, toks) in inputs.iter().enumerate() {
            if toks.is_empty() {
                return Err(EvalError::EmptyGroup(format!("example {e} input {i}")));
            }
            ex_sum += toks.iter().sum::<f64>() / toks.len() as f64;
        }
        total += ex_sum / inputs.len() as f64;
    }
    Ok(total / per_example.len() as f64)
}
