//! Iterative extraction against a generator backend.
//!
//! Every sentence goes through four rounds of three stages. Each generation
//! is mapped back onto the sentence with [`best_f1_substring`]; a round
//! yields a triplet only when both cause and effect land on a span. Matched
//! triplets feed the history of later rounds and exact duplicates are
//! dropped from the output.
//!
//! [`best_f1_substring`]: crate::matcher::best_f1_substring

mod backend;
mod baseline;
mod http;
mod replay;

use std::time::{Duration, Instant};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

pub use backend::{BackendError, GeneratorBackend, RetryPolicy};
pub use baseline::{random_baseline, BaselineError};
pub use http::{
    GenerateRequest, GenerateResponse, HealthResponse, HttpBackend, ScoreRequest, ScoreResponse,
    BACKEND_URL_ENV,
};
pub use replay::{
    read_replay_records, replay_key, write_replay_records, GoldOracle, RecordingBackend,
    ReplayBackend, ReplayRecord,
};

use crate::dataset::{AnnotatedExample, MAX_TRIPLETS};
use crate::eval::{aggregate_ce, EvalError};
use crate::matcher::{match_generation, MatchResult};
use crate::prompt::{
    build_decoder_prefix, build_encoder_input, serialize_history, HistoryEntry, PromptStage,
    EMPTY_TOKEN,
};
use crate::text::{CesTriplet, Component, GenerationOrder, Sentence, Span};

/// Where history and in-round conditioning texts come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum HistorySource {
    /// The sentence text of the matched span.
    #[default]
    Matched,
    /// The raw generation.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractionConfig {
    pub order: GenerationOrder,
    pub include_history: bool,
    pub history_source: HistorySource,
    pub max_new_tokens: usize,
    pub rounds: usize,
    pub retry: RetryPolicy,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            order: GenerationOrder::CauseEffectSignal,
            include_history: true,
            history_source: HistorySource::Matched,
            max_new_tokens: 64,
            rounds: MAX_TRIPLETS,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RoundStatus {
    Accepted,
    Duplicate,
    Dropped,
    /// The backend failed during this round.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundTrace {
    pub round: usize,
    pub encoder_inputs: Vec<String>,
    pub decoder_prefixes: Vec<String>,
    pub generations: Vec<String>,
    pub matches: Vec<MatchResult>,
    pub status: RoundStatus,
    pub hallucinations: Vec<Component>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtractionTrace {
    pub sentence_id: String,
    pub rounds: Vec<RoundTrace>,
    pub generation_seconds: f64,
    pub postprocess_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ExtractionTrace {
    fn new(sentence: &Sentence) -> Self {
        ExtractionTrace {
            sentence_id: sentence.id().to_owned(),
            rounds: Vec::new(),
            generation_seconds: 0.0,
            postprocess_seconds: 0.0,
            error: None,
        }
    }

    pub fn hallucinations(&self) -> usize {
        self.rounds.iter().map(|r| r.hallucinations.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceExtraction {
    pub triplets: Vec<CesTriplet>,
    pub trace: ExtractionTrace,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("sentence {sentence_id}: {source}")]
pub struct PipelineError {
    pub sentence_id: String,
    #[source]
    pub source: BackendError,
    /// Rounds completed before the failure.
    pub trace: Box<ExtractionTrace>,
}

/// Runs the four-round, three-stage extraction for one sentence.
pub fn extract_sentence(
    sentence: &Sentence,
    backend: &dyn GeneratorBackend,
    config: &ExtractionConfig,
) -> Result<SentenceExtraction, PipelineError> {
    let mut trace = ExtractionTrace::new(sentence);
    let mut gen_time = Duration::ZERO;
    let mut post_time = Duration::ZERO;
    let mut history: Vec<HistoryEntry> = Vec::new();
    let mut triplets: Vec<CesTriplet> = Vec::new();
    let order = config.order;

    for round in 0..config.rounds {
        let history_str = if config.include_history {
            serialize_history(&history, order)
        } else {
            String::new()
        };
        let mut rt = RoundTrace {
            round,
            encoder_inputs: Vec::with_capacity(3),
            decoder_prefixes: Vec::with_capacity(3),
            generations: Vec::with_capacity(3),
            matches: Vec::with_capacity(3),
            status: RoundStatus::Dropped,
            hallucinations: Vec::new(),
        };
        // conditioning texts in generation order, and spans per component
        let mut partial: Vec<String> = Vec::with_capacity(3);
        let mut spans: [Option<Span>; 3] = [None; 3];
        let mut texts: [Option<String>; 3] = Default::default();

        for stage in PromptStage::ALL {
            let refs: Vec<&str> = partial.iter().map(String::as_str).collect();
            let encoder_input =
                build_encoder_input(sentence.text(), stage, &refs, &history_str, order)
                    .expect("partial holds one text per earlier stage");
            let prefix = build_decoder_prefix(stage, order);

            let started = Instant::now();
            let generated = config
                .retry
                .run(|| backend.generate(&encoder_input, prefix, config.max_new_tokens));
            gen_time += started.elapsed();
            rt.encoder_inputs.push(encoder_input);
            rt.decoder_prefixes.push(prefix.to_owned());
            let generated = match generated {
                Ok(g) => g,
                Err(source) => {
                    rt.status = RoundStatus::Failed;
                    trace.rounds.push(rt);
                    trace.generation_seconds = gen_time.as_secs_f64();
                    trace.postprocess_seconds = post_time.as_secs_f64();
                    trace.error = Some(source.to_string());
                    return Err(PipelineError {
                        sentence_id: sentence.id().to_owned(),
                        source,
                        trace: Box::new(trace),
                    });
                }
            };

            let started = Instant::now();
            let component = stage.component(order);
            let raw = generated.trim();
            let m = match_generation(raw, sentence);
            let is_empty_signal = component == Component::Signal && raw == EMPTY_TOKEN;
            if m.span.is_none() && !is_empty_signal {
                rt.hallucinations.push(component);
            }
            let matched_text = m.span.map(|s| {
                sentence
                    .span_text(s)
                    .expect("matcher spans are aligned")
                    .to_owned()
            });
            let conditioning = match (config.history_source, &matched_text) {
                (HistorySource::Matched, Some(t)) => t.clone(),
                _ => raw.to_owned(),
            };
            spans[component as usize] = m.span;
            texts[component as usize] = if component == Component::Signal {
                // absent signals serialize as the empty token
                m.span.map(|_| conditioning.clone())
            } else {
                Some(conditioning.clone())
            };
            partial.push(conditioning);
            rt.generations.push(generated);
            rt.matches.push(m);
            post_time += started.elapsed();
        }

        let started = Instant::now();
        if let (Some(cause), Some(effect)) = (spans[0], spans[1]) {
            let triplet = CesTriplet::new(cause, effect, spans[2]);
            if triplets.contains(&triplet) {
                rt.status = RoundStatus::Duplicate;
            } else {
                rt.status = RoundStatus::Accepted;
                triplets.push(triplet);
            }
            let [c, e, s] = texts;
            history.push(HistoryEntry::new(c.unwrap(), e.unwrap(), s));
        }
        post_time += started.elapsed();
        trace.rounds.push(rt);
    }

    trace.generation_seconds = gen_time.as_secs_f64();
    trace.postprocess_seconds = post_time.as_secs_f64();
    Ok(SentenceExtraction { triplets, trace })
}

/// Source of predictions for a corpus run.
#[derive(Clone, Copy)]
pub enum Extractor<'a> {
    Model(&'a dyn GeneratorBackend),
    /// The random span baseline; sentence `i` uses stream `i` of the seed.
    Baseline {
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SentenceOutcome {
    pub sentence_id: String,
    pub triplets: Vec<CesTriplet>,
    pub trace: ExtractionTrace,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutput {
    /// One outcome per input sentence, in input order.
    pub outcomes: Vec<SentenceOutcome>,
}

impl RunOutput {
    pub fn failures(&self) -> impl Iterator<Item = &SentenceOutcome> {
        self.outcomes.iter().filter(|o| o.error.is_some())
    }

    pub fn hallucinations(&self) -> usize {
        self.outcomes.iter().map(|o| o.trace.hallucinations()).sum()
    }

    pub fn mean_generation_seconds(&self) -> f64 {
        mean(self.outcomes.iter().map(|o| o.trace.generation_seconds))
    }

    pub fn mean_postprocess_seconds(&self) -> f64 {
        mean(self.outcomes.iter().map(|o| o.trace.postprocess_seconds))
    }
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = it.len();
    if n == 0 {
        0.0
    } else {
        it.sum::<f64>() / n as f64
    }
}

fn run_one(
    index: usize,
    sentence: &Sentence,
    extractor: Extractor<'_>,
    config: &ExtractionConfig,
) -> SentenceOutcome {
    match extractor {
        Extractor::Model(backend) => match extract_sentence(sentence, backend, config) {
            Ok(ex) => SentenceOutcome {
                sentence_id: sentence.id().to_owned(),
                triplets: ex.triplets,
                trace: ex.trace,
                error: None,
            },
            Err(e) => SentenceOutcome {
                sentence_id: sentence.id().to_owned(),
                triplets: Vec::new(),
                error: Some(e.to_string()),
                trace: *e.trace,
            },
        },
        Extractor::Baseline { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index as u64);
            let started = Instant::now();
            let result = random_baseline(sentence, &mut rng);
            let mut trace = ExtractionTrace::new(sentence);
            trace.postprocess_seconds = started.elapsed().as_secs_f64();
            match result {
                Ok(t) => SentenceOutcome {
                    sentence_id: sentence.id().to_owned(),
                    triplets: vec![t],
                    trace,
                    error: None,
                },
                Err(e) => {
                    trace.error = Some(e.to_string());
                    SentenceOutcome {
                        sentence_id: sentence.id().to_owned(),
                        triplets: Vec::new(),
                        error: Some(e.to_string()),
                        trace,
                    }
                }
            }
        }
    }
}

/// Extracts triplets for every sentence, up to `parallelism` sentences at a
/// time. Output order follows input order regardless of parallelism.
pub fn run_extraction(
    sentences: &[Sentence],
    extractor: Extractor<'_>,
    config: &ExtractionConfig,
    parallelism: usize,
) -> RunOutput {
    let outcomes = if parallelism <= 1 {
        sentences
            .iter()
            .enumerate()
            .map(|(i, s)| run_one(i, s, extractor, config))
            .collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .expect("thread pool");
        pool.install(|| {
            sentences
                .par_iter()
                .enumerate()
                .map(|(i, s)| run_one(i, s, extractor, config))
                .collect()
        })
    };
    RunOutput { outcomes }
}

/// Builds a replay table holding the gold answer for every prompt the
/// pipeline will issue on `examples`.
pub fn gold_replay_records(
    examples: &[AnnotatedExample],
    config: &ExtractionConfig,
) -> Result<Vec<ReplayRecord>, PipelineError> {
    let recorder = RecordingBackend::new(GoldOracle::new(examples, config.order));
    for ex in examples {
        extract_sentence(&ex.sentence, &recorder, config)?;
    }
    Ok(recorder.into_records())
}

fn gold_entries(ex: &AnnotatedExample) -> Vec<HistoryEntry> {
    let text = |s: Span| ex.sentence.span_text(s).expect("validated span").to_owned();
    ex.triplets
        .iter()
        .map(|t| HistoryEntry::new(text(t.cause), text(t.effect), t.signal.map(text)))
        .collect()
}

/// One stage-3 decision made with gold cause and effect.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignalDecision {
    pub example_id: String,
    pub triplet_index: usize,
    pub generation: String,
    pub predicted_is_empty: bool,
    pub gold_has_signal: bool,
}

/// Asks the backend for the signal of every gold triplet given its gold
/// cause and effect. With history enabled, triplet `k` is conditioned on
/// gold triplets `0..k`.
pub fn signal_pass(
    examples: &[AnnotatedExample],
    backend: &dyn GeneratorBackend,
    config: &ExtractionConfig,
) -> Result<Vec<SignalDecision>, PipelineError> {
    let mut out = Vec::new();
    for ex in examples {
        let entries = gold_entries(ex);
        for (k, entry) in entries.iter().enumerate() {
            let history = if config.include_history {
                serialize_history(&entries[..k], config.order)
            } else {
                String::new()
            };
            let partial: Vec<&str> = config.order.components()[..2]
                .iter()
                .map(|c| match c {
                    Component::Cause => entry.cause.as_str(),
                    _ => entry.effect.as_str(),
                })
                .collect();
            let input = build_encoder_input(
                ex.sentence.text(),
                PromptStage::Third,
                &partial,
                &history,
                config.order,
            )
            .expect("two components for the third stage");
            let prefix = build_decoder_prefix(PromptStage::Third, config.order);
            let generation = config
                .retry
                .run(|| backend.generate(&input, prefix, config.max_new_tokens))
                .map_err(|source| PipelineError {
                    sentence_id: ex.sentence.id().to_owned(),
                    source,
                    trace: Box::new(ExtractionTrace::new(&ex.sentence)),
                })?;
            let predicted_is_empty = match_generation(&generation, &ex.sentence).span.is_none();
            out.push(SignalDecision {
                example_id: ex.sentence.id().to_owned(),
                triplet_index: k,
                generation,
                predicted_is_empty,
                gold_has_signal: entry.signal.is_some(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Error)]
pub enum CeError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("example {id}: backend returned {got} token scores")]
    EmptyScores { id: String, got: usize },
}

/// Mean token cross-entropy of the gold targets, conditioned exactly as in
/// training (gold triplets in file order).
pub fn gold_cross_entropy(
    examples: &[AnnotatedExample],
    backend: &dyn GeneratorBackend,
    config: &ExtractionConfig,
) -> Result<f64, CeError> {
    let mut groups = Vec::with_capacity(examples.len());
    for ex in examples {
        let entries = gold_entries(ex);
        let mut inputs = Vec::with_capacity(entries.len() * 3);
        for (k, entry) in entries.iter().enumerate() {
            let history = if config.include_history {
                serialize_history(&entries[..k], config.order)
            } else {
                String::new()
            };
            let comps = config.order.components();
            let text_of = |c: Component| -> &str {
                match c {
                    Component::Cause => &entry.cause,
                    Component::Effect => &entry.effect,
                    Component::Signal => entry.signal.as_deref().unwrap_or(EMPTY_TOKEN),
                }
            };
            for stage in PromptStage::ALL {
                let partial: Vec<&str> =
                    comps[..stage.index()].iter().map(|&c| text_of(c)).collect();
                let input = build_encoder_input(
                    ex.sentence.text(),
                    stage,
                    &partial,
                    &history,
                    config.order,
                )
                .expect("arity follows the stage");
                let prefix = build_decoder_prefix(stage, config.order);
                let target = text_of(stage.component(config.order));
                let ces = config
                    .retry
                    .run(|| backend.score(&input, prefix, target))
                    .map_err(|source| PipelineError {
                        sentence_id: ex.sentence.id().to_owned(),
                        source,
                        trace: Box::new(ExtractionTrace::new(&ex.sentence)),
                    })?;
                if ces.is_empty() {
                    return Err(CeError::EmptyScores {
                        id: ex.sentence.id().to_owned(),
                        got: 0,
                    });
                }
                inputs.push(ces);
            }
        }
        groups.push(inputs);
    }
    Ok(aggregate_ce(&groups)?)
}
