//! Exit criteria. Every test prints one `PASS`/`FAIL` line; run with
//! `cargo test -p ces-cli --test acceptance -- --nocapture --test-threads 1`
//! to see them in order.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ces_core::dataset::{load_corpus, CorpusFormat};
use ces_core::eval::aggregate_ce;
use ces_core::matcher::{best_f1_substring, brute_force_best};
use ces_core::pipeline::{run_extraction, BackendError, ExtractionConfig, Extractor, GeneratorBackend, GoldOracle};
use ces_core::{AnnotatedExample, Sentence};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MATCHER_CASES: usize = 10_000;
const MATCHER_SECONDS: f64 = 30.0;
const PRUNED_FRACTION: f64 = 0.5;
const POSTPROCESS_SECONDS: f64 = 0.05;
const BASELINE_CEILING: f64 = 15.0;
const TRAIN_STATS: (usize, usize, usize) = (160, 183, 118);
const DEV_STATS: (usize, usize, usize) = (15, 18, 10);

fn verdict(name: &str, ok: bool, detail: impl std::fmt::Display) {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {detail}");
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn ces(args: &[&str]) -> (bool, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ces")).args(args).output().unwrap();
    (
        out.status.success(),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

fn key_values(stdout: &str) -> BTreeMap<String, String> {
    stdout
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .collect()
}

fn dev_examples() -> Vec<AnnotatedExample> {
    load_corpus(fixture("dev_sample.csv"), &CorpusFormat::default()).unwrap().examples
}

const VOCAB: &[&str] = &[
    "the", "protest", "police", "strike", "workers", "city", "after", "because", "of", "and", "a", "in", "to", "riots",
    "fuel", "prices", "rose", ",", ".", "led", "The", "Police", "AND",
];

/// A sentence of 1 to 40 tokens and a generation that is either a noisy copy
/// of one of its spans or a bag of vocabulary and unseen words.
fn random_case(rng: &mut ChaCha8Rng) -> (Sentence, Vec<String>) {
    let n = rng.random_range(1..=40);
    let words: Vec<&str> = (0..n).map(|_| *VOCAB.choose(rng).unwrap()).collect();
    let sentence = Sentence::new("r", words.join(" "));
    let generated: Vec<String> = if rng.random_bool(0.7) {
        let start = rng.random_range(0..n);
        let len = rng.random_range(1..=(n - start).min(12));
        let mut g: Vec<String> = Vec::new();
        for w in &words[start..start + len] {
            match rng.random_range(0..10) {
                0 => {}
                1 => g.push("unseen".into()),
                2 => g.push(VOCAB.choose(rng).unwrap().to_string()),
                _ => g.push(w.to_string()),
            }
        }
        g
    } else {
        let g = rng.random_range(1..=8);
        (0..g)
            .map(|_| if rng.random_bool(0.2) { "zzz".to_owned() } else { VOCAB.choose(rng).unwrap().to_string() })
            .collect()
    };
    let generated = generated.iter().map(|t| t.to_lowercase()).collect();
    (sentence, generated)
}

fn random_suite() -> Vec<(Sentence, Vec<String>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(20_221_208);
    (0..MATCHER_CASES).map(|_| random_case(&mut rng)).collect()
}

#[test]
fn matcher_agrees_with_brute_force() {
    let suite = random_suite();
    let started = Instant::now();
    let mut mismatches = 0;
    for (s, g) in &suite {
        let fast = best_f1_substring(g, s);
        let slow = brute_force_best(g, s);
        if fast.span != slow.span || fast.f1.to_bits() != slow.f1.to_bits() {
            mismatches += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        "matcher-oracle equivalence",
        mismatches == 0 && secs < MATCHER_SECONDS,
        format!("{mismatches} mismatches in {} cases, {secs:.2}s (limit {MATCHER_SECONDS}s)", suite.len()),
    );
}

#[test]
fn pruning_halves_the_search() {
    let suite = random_suite();
    let (mut pruned, mut brute) = (0usize, 0usize);
    for (s, g) in &suite {
        pruned += best_f1_substring(g, s).candidates_evaluated;
        brute += brute_force_best(g, s).candidates_evaluated;
    }
    let ratio = pruned as f64 / brute as f64;
    verdict(
        "pruning efficacy",
        ratio <= PRUNED_FRACTION,
        format!(
            "mean candidates {:.1} pruned vs {:.1} brute force, ratio {ratio:.3} (limit {PRUNED_FRACTION})",
            pruned as f64 / suite.len() as f64,
            brute as f64 / suite.len() as f64
        ),
    );
}

#[test]
fn gold_replay_scores_100() {
    let dir = tempfile::tempdir().unwrap();
    let dev = fixture("dev_sample.csv");
    let dev = dev.to_str().unwrap();
    let replay = dir.path().join("gold.jsonl");
    let pred = dir.path().join("pred.csv");
    let (ok, _, err) = ces(&["replay-gold", "--gold", dev, "--out", replay.to_str().unwrap()]);
    assert!(ok, "{err}");
    let backend = format!("replay:{}", replay.display());
    let (ok, _, err) = ces(&["extract", "--backend", &backend, "--in", dev, "--out", pred.to_str().unwrap()]);
    assert!(ok, "{err}");
    let mut scores = Vec::new();
    for mode in ["entity", "token"] {
        let (ok, out, err) = ces(&["evaluate", "--pred", pred.to_str().unwrap(), "--gold", dev, "--mode", mode]);
        assert!(ok, "{err}");
        scores.push((mode, key_values(&out)["overall_f1"].clone()));
    }
    verdict(
        "oracle closure",
        scores.iter().all(|(_, f)| f == "100.0000"),
        format!("overall F1 {scores:?}"),
    );
}

fn official(var: &str, default: &str) -> PathBuf {
    std::env::var_os(var)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(default))
}

fn stats_of(path: &Path) -> Result<(usize, usize, usize), String> {
    if !path.exists() {
        return Err(format!("{} not found", path.display()));
    }
    let (ok, out, err) = ces(&["stats", path.to_str().unwrap()]);
    if !ok {
        return Err(err);
    }
    let get = |key: &str| -> usize {
        out.lines()
            .find_map(|l| l.strip_prefix(key))
            .and_then(|v| v.trim().parse().ok())
            .unwrap_or(usize::MAX)
    };
    Ok((get("sentences"), get("relations"), get("signals")))
}

#[test]
fn corpus_statistics_of_the_official_release() {
    // set CNC_TRAIN / CNC_DEV or place the files under data/
    let train = stats_of(&official("CNC_TRAIN", "train_subtask2_grouped.csv"));
    let dev = stats_of(&official("CNC_DEV", "dev_subtask2_grouped.csv"));
    verdict(
        "corpus statistics",
        train == Ok(TRAIN_STATS) && dev == Ok(DEV_STATS),
        format!("train {train:?} (want {TRAIN_STATS:?}), dev {dev:?} (want {DEV_STATS:?})"),
    );
}

/// Deterministic stand-in for a greedy decoder.
struct HashBackend;

impl GeneratorBackend for HashBackend {
    fn generate(&self, input: &str, prefix: &str, _: usize) -> Result<String, BackendError> {
        let mut h = DefaultHasher::new();
        (input, prefix).hash(&mut h);
        let x = h.finish();
        let words: Vec<&str> = input.split(" _").next().unwrap().split_whitespace().collect();
        let start = x as usize % words.len();
        let len = 1 + (x >> 32) as usize % 5;
        Ok(words[start..(start + len).min(words.len())].join(" "))
    }
}

#[test]
fn no_history_degenerates_to_one_triplet() {
    let examples = dev_examples();
    let sentences: Vec<Sentence> = examples.iter().map(|e| e.sentence.clone()).collect();
    let config = ExtractionConfig { include_history: false, ..Default::default() };
    let oracle = GoldOracle::new(&examples, config.order);
    let mut worst = 0;
    for backend in [&HashBackend as &dyn GeneratorBackend, &oracle] {
        let run = run_extraction(&sentences, Extractor::Model(backend), &config, 1);
        assert_eq!(run.failures().count(), 0);
        worst = worst.max(run.outcomes.iter().map(|o| o.triplets.len()).max().unwrap());
    }
    verdict(
        "no-history degeneracy",
        worst <= 1,
        format!("at most {worst} triplet(s) per sentence over {} sentences", sentences.len()),
    );
}

#[test]
fn postprocessing_is_fast() {
    let examples = dev_examples();
    let sentences: Vec<Sentence> = examples.iter().map(|e| e.sentence.clone()).collect();
    let config = ExtractionConfig::default();
    let oracle = GoldOracle::new(&examples, config.order);
    let mut worst: f64 = 0.0;
    for backend in [&HashBackend as &dyn GeneratorBackend, &oracle] {
        let run = run_extraction(&sentences, Extractor::Model(backend), &config, 1);
        worst = worst.max(run.mean_postprocess_seconds());
    }
    verdict(
        "postprocessing speed",
        worst <= POSTPROCESS_SECONDS,
        format!("mean {worst:.6}s per sentence (limit {POSTPROCESS_SECONDS}s)"),
    );
}

#[test]
fn toy_metrics_match_golden_files() {
    let golden: BTreeMap<String, String> = std::fs::read_to_string(fixture("toy_golden.txt"))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .collect();
    let (gold, pred) = (fixture("toy_gold.csv"), fixture("toy_pred.csv"));
    let mut wrong = Vec::new();
    for mode in ["entity", "token"] {
        for absence in ["count", "drop"] {
            let mut args = vec!["evaluate", "--pred", pred.to_str().unwrap(), "--gold", gold.to_str().unwrap()];
            args.extend(["--mode", mode]);
            if absence == "drop" {
                args.push("--drop-empty-signals");
            }
            let (ok, out, err) = ces(&args);
            assert!(ok, "{err}");
            let kv = key_values(&out);
            for (k, v) in golden.iter().filter(|(k, _)| k.starts_with(&format!("{mode}.{absence}."))) {
                let key = k.rsplit('.').next().unwrap();
                if kv.get(key) != Some(v) {
                    wrong.push(format!("{k}: got {:?}, want {v}", kv.get(key)));
                }
            }
        }
    }
    // (mean(2, 4) + 10) / 2
    let ce = aggregate_ce(&[vec![vec![1.0, 2.0, 3.0], vec![4.0]], vec![vec![10.0]]]).unwrap();
    if ce != 6.5 {
        wrong.push(format!("nested ce {ce}, want 6.5"));
    }
    verdict(
        "metric golden files",
        wrong.is_empty(),
        if wrong.is_empty() { format!("{} golden values and ce nesting agree", golden.len()) } else { wrong.join("; ") },
    );
}

#[test]
fn random_baseline_scores_low() {
    // the official dev file when present, else the dev-format sample
    let official_dev = official("CNC_DEV", "dev_subtask2_grouped.csv");
    let dev = if official_dev.exists() { official_dev } else { fixture("dev_sample.csv") };
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.csv");
    let dev_s = dev.to_str().unwrap();
    let (ok, out, err) = ces(&[
        "extract", "--backend", "baseline", "--seed", "0", "--in", dev_s, "--out", pred.to_str().unwrap(), "--gold",
        dev_s,
    ]);
    assert!(ok, "{err}");
    let f1: f64 = key_values(&out)["overall_f1"].parse().unwrap();
    verdict(
        "baseline sanity",
        f1 < BASELINE_CEILING,
        format!("overall F1 {f1:.2} on {} (limit {BASELINE_CEILING})", dev.file_name().unwrap().to_string_lossy()),
    );
}
