use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tracing::warn;

use ces_core::dataset::{self, CorpusFormat, IngestWarning, TagVocabulary};
use ces_core::eval::{
    corpus_f1, es_accuracy, match_predictions, F1Mode, MetricsReport, ScoreConfig, SignalAbsence,
};
use ces_core::pipeline::{
    gold_cross_entropy, gold_replay_records, run_extraction, signal_pass, write_replay_records,
    ExtractionConfig, Extractor, GeneratorBackend, HistorySource, HttpBackend, ReplayBackend,
    BACKEND_URL_ENV,
};
use ces_core::prompt::{export_training_instances, longest_target_tokens, ExportConfig};
use ces_core::text::{CesTriplet, GenerationOrder, Sentence};
use ces_core::AnnotatedExample;

#[derive(Parser)]
#[command(
    name = "ces",
    version,
    about = "Cause-effect-signal triplet extraction"
)]
struct Cli {
    #[command(flatten)]
    format: FormatArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct FormatArgs {
    /// Field delimiter of corpus and prediction tables.
    #[arg(long, global = true, default_value = ",")]
    delimiter: char,
    #[arg(long, global = true, default_value = "index")]
    id_column: String,
    #[arg(long, global = true, default_value = "text")]
    text_column: String,
    #[arg(long, global = true, default_value = "causal_text_w_pairs")]
    relations_column: String,
    /// Tag names as CAUSE,EFFECT,SIGNAL, e.g. ARG0,ARG1,SIG0.
    #[arg(long, global = true, default_value = "ARG0,ARG1,SIG0")]
    tags: String,
}

impl FormatArgs {
    fn to_format(&self) -> Result<CorpusFormat> {
        if !self.delimiter.is_ascii() {
            bail!("delimiter must be a single ASCII character");
        }
        let tags: Vec<&str> = self.tags.split(',').map(str::trim).collect();
        let [c, e, s] = tags[..] else {
            bail!("--tags needs three comma-separated names");
        };
        let pair = |t: &str| (format!("<{t}>"), format!("</{t}>"));
        let (c, e, s) = (pair(c), pair(e), pair(s));
        let vocab = TagVocabulary::new((&c.0, &c.1), (&e.0, &e.1), (&s.0, &s.1))
            .map_err(anyhow::Error::msg)?;
        Ok(CorpusFormat {
            delimiter: self.delimiter as u8,
            id_column: self.id_column.clone(),
            text_column: self.text_column.clone(),
            relations_column: self.relations_column.clone(),
            vocab,
        })
    }
}

#[derive(Args)]
struct OrderArgs {
    #[arg(long, default_value = "ces")]
    order: GenerationOrder,
    /// Leave the history out of every prompt.
    #[arg(long)]
    no_history: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Print sentence, relation and signal counts of an annotated corpus.
    Stats { file: PathBuf },
    /// Write training prompt instances as JSON lines.
    PrepareData {
        #[command(flatten)]
        order: OrderArgs,
        #[arg(long, default_value_t = 1)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Generation budget the longest target must fit in.
        #[arg(long, default_value_t = 64)]
        max_new_tokens: usize,
    },
    /// Extract triplets for every sentence of a table.
    Extract {
        #[command(flatten)]
        backend: BackendArgs,
        #[command(flatten)]
        order: OrderArgs,
        /// Condition on raw generations instead of matched span text.
        #[arg(long)]
        raw_history: bool,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Seed of the random baseline.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Score the predictions against this annotated corpus.
        #[arg(long)]
        gold: Option<PathBuf>,
        /// Write one JSON trace record per sentence.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        scoring: ScoringArgs,
    },
    /// Score a prediction table against an annotated corpus.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[command(flatten)]
        scoring: ScoringArgs,
    },
    /// Signal-absence accuracy with gold cause and effect.
    EsEval {
        #[command(flatten)]
        backend: BackendArgs,
        #[command(flatten)]
        order: OrderArgs,
        #[arg(long)]
        gold: PathBuf,
    },
    /// Mean token cross-entropy of the gold targets.
    ScoreCe {
        #[command(flatten)]
        backend: BackendArgs,
        #[command(flatten)]
        order: OrderArgs,
        #[arg(long)]
        gold: PathBuf,
    },
    /// Write a replay file answering every pipeline prompt with gold text.
    ReplayGold {
        #[command(flatten)]
        order: OrderArgs,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct BackendArgs {
    /// `http:<url>`, `replay:<file>` or `baseline`. For http the URL in
    /// CES_BACKEND_URL takes precedence.
    #[arg(long)]
    backend: String,
    /// Per-request timeout in seconds for the http backend.
    #[arg(long, default_value_t = 120)]
    timeout: u64,
    #[arg(long, default_value_t = 64)]
    max_new_tokens: usize,
}

#[derive(Args)]
struct ScoringArgs {
    #[arg(long, default_value = "entity")]
    mode: F1Mode,
    /// Leave signal items out when neither side has a signal.
    #[arg(long)]
    drop_empty_signals: bool,
}

impl ScoringArgs {
    fn config(&self) -> ScoreConfig {
        ScoreConfig {
            mode: self.mode,
            signal_absence: if self.drop_empty_signals {
                SignalAbsence::Drop
            } else {
                SignalAbsence::CountCorrect
            },
        }
    }
}

enum BackendChoice {
    Model(Box<dyn GeneratorBackend>),
    Baseline,
}

impl BackendArgs {
    fn open(&self) -> Result<BackendChoice> {
        let arg = self.backend.as_str();
        if arg == "baseline" {
            return Ok(BackendChoice::Baseline);
        }
        if let Some(rest) = arg.strip_prefix("http:") {
            // both `http:<url>` and a bare `http://host` are accepted
            let url = if rest.starts_with("//") { arg } else { rest };
            let url = std::env::var(BACKEND_URL_ENV).unwrap_or_else(|_| url.to_owned());
            let backend = HttpBackend::new(url, Duration::from_secs(self.timeout));
            return Ok(BackendChoice::Model(Box::new(backend)));
        }
        if let Some(path) = arg.strip_prefix("replay:") {
            let backend =
                ReplayBackend::load(path).with_context(|| format!("loading replay file {path}"))?;
            return Ok(BackendChoice::Model(Box::new(backend)));
        }
        bail!("unknown backend `{arg}`; expected http:<url>, replay:<file> or baseline")
    }

    fn open_model(&self) -> Result<Box<dyn GeneratorBackend>> {
        match self.open()? {
            BackendChoice::Model(b) => Ok(b),
            BackendChoice::Baseline => bail!("the baseline cannot answer prompts"),
        }
    }

    fn config(&self, order: &OrderArgs) -> ExtractionConfig {
        ExtractionConfig {
            order: order.order,
            include_history: !order.no_history,
            max_new_tokens: self.max_new_tokens,
            ..Default::default()
        }
    }
}

fn report_warnings(warnings: &[IngestWarning]) {
    for w in warnings {
        match w {
            IngestWarning::NoRelations { row, id } => {
                warn!(row, id = %id, "row has no relations; skipped")
            }
            IngestWarning::Truncated { row, id, count } => {
                warn!(row, id = %id, count, "more than 4 relations; extra ones dropped")
            }
            IngestWarning::Snapped { row, id, warning } => {
                warn!(row, id = %id, ?warning, "tag boundary inside a token; span widened")
            }
            IngestWarning::TextMismatch { row, id } => {
                warn!(row, id = %id, "text column differs from the relation text; using the relation text")
            }
        }
    }
}

fn load_gold(path: &Path, format: &CorpusFormat) -> Result<Vec<AnnotatedExample>> {
    let corpus = dataset::load_corpus(path, format)
        .with_context(|| format!("reading {}", path.display()))?;
    report_warnings(&corpus.warnings);
    Ok(corpus.examples)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn print_report(report: &MetricsReport, mode: F1Mode) {
    println!(
        "mode      {}",
        match mode {
            F1Mode::Entity => "entity",
            F1Mode::Token => "token",
        }
    );
    println!("{:<9} {:>8} {:>7}", "component", "f1", "items");
    for c in ces_core::Component::ALL {
        let s = report.component(c);
        println!("{:<9} {:>8.2} {:>7}", c.name(), s.f1, s.items);
    }
    println!("{:<9} {:>8.2}", "overall", report.overall_f1);
    for (k, v) in &report.per_bucket {
        println!("  {k} gold triplet(s): {v:.2}");
    }
    println!();
    print!("{}", report.to_key_values());
}

fn stats(path: &Path, format: &CorpusFormat) -> Result<()> {
    let examples = load_gold(path, format)?;
    let s = dataset::corpus_stats(&examples);
    println!("sentences        {}", s.n_sentences);
    println!("relations        {}", s.n_relations);
    println!("signals          {}", s.n_signals);
    if s.fraction_defined {
        println!("signal_fraction  {:.4}", s.signal_fraction);
    } else {
        println!("signal_fraction  undefined");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let format = cli.format.to_format()?;
    match cli.command {
        Command::Stats { file } => stats(&file, &format)?,
        Command::PrepareData {
            order,
            epochs,
            seed,
            input,
            out,
            max_new_tokens,
        } => {
            let examples = load_gold(&input, &format)?;
            let export = export_training_instances(
                &examples,
                ExportConfig {
                    order: order.order,
                    epochs,
                    seed,
                    include_history: !order.no_history,
                },
            );
            let longest = longest_target_tokens(&export.instances);
            if longest > max_new_tokens {
                bail!("longest target has {longest} words, more than --max-new-tokens {max_new_tokens}");
            }
            let mut w = create(&out)?;
            for inst in &export.instances {
                serde_json::to_writer(&mut w, inst)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
            eprintln!(
                "wrote {} instances for {} examples ({} warning(s))",
                export.instances.len(),
                examples.len(),
                export.warnings.len()
            );
        }
        Command::Extract {
            backend,
            order,
            raw_history,
            parallel,
            seed,
            input,
            out,
            gold,
            trace,
            scoring,
        } => {
            let (rows, warnings) = dataset::load_rows(&input, &format)
                .with_context(|| format!("reading {}", input.display()))?;
            report_warnings(&warnings);
            let sentences: Vec<Sentence> = rows.into_iter().map(|r| r.sentence).collect();
            let mut config = backend.config(&order);
            if raw_history {
                config.history_source = HistorySource::Raw;
            }
            let choice = backend.open()?;
            let extractor = match &choice {
                BackendChoice::Model(b) => Extractor::Model(b.as_ref()),
                BackendChoice::Baseline => Extractor::Baseline { seed },
            };
            let output = run_extraction(&sentences, extractor, &config, parallel);

            let rows: Vec<(&Sentence, &[CesTriplet])> = sentences
                .iter()
                .zip(&output.outcomes)
                .map(|(s, o)| (s, o.triplets.as_slice()))
                .collect();
            dataset::write_predictions(create(&out)?, &format, &rows)?;
            if let Some(path) = trace {
                let mut w = create(&path)?;
                for o in &output.outcomes {
                    serde_json::to_writer(&mut w, &o.trace)?;
                    w.write_all(b"\n")?;
                }
                w.flush()?;
            }
            eprintln!(
                "{} sentences, {} hallucinations, mean generation {:.3}s, mean postprocessing {:.4}s",
                sentences.len(),
                output.hallucinations(),
                output.mean_generation_seconds(),
                output.mean_postprocess_seconds()
            );

            if let Some(gold) = gold {
                let examples = load_gold(&gold, &format)?;
                let (pred_rows, _) = dataset::load_rows(&out, &format)?;
                let (scored, extra) = match_predictions(&examples, &pred_rows)?;
                if !extra.is_empty() {
                    warn!(
                        count = extra.len(),
                        "predicted sentences without gold annotation are not scored"
                    );
                }
                let mut report = corpus_f1(&scored, scoring.config())?;
                report.hallucinations = output.hallucinations();
                print_report(&report, scoring.mode);
            }

            let failures: Vec<_> = output.failures().collect();
            if !failures.is_empty() {
                for f in &failures {
                    eprintln!("error: {}", f.error.as_deref().unwrap_or_default());
                }
                eprintln!("{} of {} sentences failed", failures.len(), sentences.len());
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Evaluate {
            pred,
            gold,
            scoring,
        } => {
            let examples = load_gold(&gold, &format)?;
            let (pred_rows, _) = dataset::load_rows(&pred, &format)
                .with_context(|| format!("reading {}", pred.display()))?;
            let (scored, extra) = match_predictions(&examples, &pred_rows)?;
            if !extra.is_empty() {
                warn!(
                    count = extra.len(),
                    "predicted sentences without gold annotation are not scored"
                );
            }
            let report = corpus_f1(&scored, scoring.config())?;
            print_report(&report, scoring.mode);
        }
        Command::EsEval {
            backend,
            order,
            gold,
        } => {
            let examples = load_gold(&gold, &format)?;
            let model = backend.open_model()?;
            let decisions = signal_pass(&examples, model.as_ref(), &backend.config(&order))?;
            let items: Vec<(bool, bool)> = decisions
                .iter()
                .map(|d| (d.predicted_is_empty, d.gold_has_signal))
                .collect();
            let relevant = items.iter().filter(|(_, g)| !g).count();
            match es_accuracy(&items) {
                Ok(acc) => println!("es_accuracy={acc:.4}"),
                Err(_) => println!("es_accuracy=undefined"),
            }
            println!("es_items={relevant}");
        }
        Command::ScoreCe {
            backend,
            order,
            gold,
        } => {
            let examples = load_gold(&gold, &format)?;
            let model = backend.open_model()?;
            let ce = gold_cross_entropy(&examples, model.as_ref(), &backend.config(&order))?;
            println!("ce={ce:.6}");
        }
        Command::ReplayGold { order, gold, out } => {
            let examples = load_gold(&gold, &format)?;
            let config = ExtractionConfig {
                order: order.order,
                include_history: !order.no_history,
                ..Default::default()
            };
            let records = gold_replay_records(&examples, &config)?;
            write_replay_records(create(&out)?, &records)?;
            eprintln!("wrote {} replay records", records.len());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
