//! Command-line entry points: `train`, `predict`, `evaluate`, `ablate-suite`.
//!
//! Every run writes exactly one `manifest.json` next to its outputs,
//! recording the command line, the effective config, seeds, inputs,
//! outputs, and wall-clock time. Given identical inputs and seed, outputs
//! are byte-identical except for the timestamps inside the manifest.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use protrace::checkpoint;
use protrace::data::{
    load_location_vocab, load_npn_cooking, load_propara, parse_cooking_predictions,
    parse_predictions, write_cooking_predictions, write_predictions, CookingAnswerRows,
    ProcessDocument, RecipeDocument, Split,
};
use protrace::eval::{
    eval_cooking, eval_document_level, eval_sentence_level, ProcessAnswer, RecipeAnswer,
};
use protrace::infer::{track_process, track_recipe, TrackMode};
use protrace::model::Ablation;
use protrace::train::{fit, fit_cooking, EncoderBackend, EpochMetrics, TrainConfig};

#[derive(Parser)]
#[command(
    name = "protrace",
    about = "Track entity locations through procedural text",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus per-epoch metrics.
    Train(TrainArgs),
    /// Run a checkpoint over a split and dump predictions.
    Predict(PredictArgs),
    /// Score a prediction dump against gold annotations.
    Evaluate(EvaluateArgs),
    /// Train every ablation variant and tabulate dev F1.
    AblateSuite(AblateArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// YAML training config; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Dataset directory (TSV splits for propara, JSONL + vocab for
    /// npn-cooking).
    #[arg(long)]
    data_dir: PathBuf,

    /// Output directory for checkpoint, metrics, and manifest.
    #[arg(long)]
    out_dir: PathBuf,

    /// Which corpus and task family to train on.
    #[arg(long, default_value = "propara")]
    dataset: Dataset,

    /// Override the config's RNG seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Override the config's encoder backend.
    #[arg(long)]
    encoder: Option<EncoderChoice>,

    /// Train a single-switch ablation variant (see `ablate-suite` for all).
    #[arg(long)]
    ablate: Option<String>,

    /// Number of training recipes to sample (npn-cooking only; the paper
    /// does not fix one, so it must be chosen). Use `all` for no sampling.
    #[arg(long)]
    sample_size: Option<String>,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint archive written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,

    /// Dataset directory in the same layout used for training.
    #[arg(long)]
    data_dir: PathBuf,

    /// Split to run over.
    #[arg(long, default_value = "dev")]
    split: Split,

    /// Output directory for the prediction dump and manifest.
    #[arg(long)]
    out_dir: PathBuf,

    /// Which corpus the checkpoint targets.
    #[arg(long, default_value = "propara")]
    dataset: Dataset,

    /// Decoding mode: document-level reconciles transitions with
    /// attributes, sentence-level uses attribute predictions alone.
    #[arg(long, default_value = "document-level")]
    task: Task,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Prediction dump written by `predict`.
    #[arg(long)]
    pred: PathBuf,

    /// Gold annotations: a TSV split file, or a JSONL file next to
    /// `location_vocab.txt` for the cooking task.
    #[arg(long)]
    gold: PathBuf,

    /// Which benchmark to score.
    #[arg(long)]
    task: Task,

    /// Output directory for the report, metrics, and manifest.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// YAML training config shared by every variant.
    #[arg(long)]
    config: Option<PathBuf>,

    /// ProPara-format dataset directory.
    #[arg(long)]
    data_dir: PathBuf,

    /// Output directory for the table and manifest.
    #[arg(long)]
    out_dir: PathBuf,

    /// Override the config's RNG seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Override the config's encoder backend.
    #[arg(long)]
    encoder: Option<EncoderChoice>,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Dataset {
    Propara,
    NpnCooking,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Task {
    DocumentLevel,
    SentenceLevel,
    CookingLocation,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum EncoderChoice {
    Pretrained,
    Tiny,
}

impl From<EncoderChoice> for EncoderBackend {
    fn from(c: EncoderChoice) -> Self {
        match c {
            EncoderChoice::Pretrained => EncoderBackend::Pretrained,
            EncoderChoice::Tiny => EncoderBackend::Tiny,
        }
    }
}

/// Provenance record written next to every command's outputs.
#[derive(Serialize)]
struct RunManifest {
    command: Vec<String>,
    config: serde_json::Value,
    seed: Option<u64>,
    code_version: String,
    inputs: Vec<String>,
    outputs: Vec<String>,
    started_unix_secs: u64,
    wall_secs: f64,
}

struct ManifestBuilder {
    command: Vec<String>,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    started: Instant,
    started_unix_secs: u64,
}

impl ManifestBuilder {
    fn new() -> Self {
        Self {
            command: std::env::args().collect(),
            config: serde_json::Value::Null,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
            started_unix_secs: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    fn config<T: Serialize>(&mut self, config: &T) -> Result<()> {
        self.config = serde_json::to_value(config)?;
        Ok(())
    }

    fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    fn write(self, dir: &Path) -> Result<()> {
        let manifest = RunManifest {
            command: self.command,
            config: self.config,
            seed: self.seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: self.inputs,
            outputs: self.outputs,
            started_unix_secs: self.started_unix_secs,
            wall_secs: self.started.elapsed().as_secs_f64(),
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(())
    }
}

/// One line of the machine-readable metrics log.
#[derive(Serialize)]
struct MetricRecord<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    epoch: Option<usize>,
    split: &'a str,
    metric: &'a str,
    value: f64,
}

struct MetricsLog {
    lines: Vec<String>,
}

impl MetricsLog {
    fn new() -> Self {
        Self { lines: Vec::new() }
    }

    fn push(&mut self, epoch: Option<usize>, split: &str, metric: &str, value: f64) {
        let record = MetricRecord {
            epoch,
            split,
            metric,
            value,
        };
        self.lines
            .push(serde_json::to_string(&record).expect("metric records serialize"));
    }

    fn push_epoch(&mut self, m: &EpochMetrics) {
        self.push(Some(m.epoch), "train", "loss", m.train_loss);
        if let Some(acc) = m.transition_accuracy {
            self.push(Some(m.epoch), "train", "transition_accuracy", acc);
        }
        self.push(
            Some(m.epoch),
            "train",
            "skipped_spans",
            m.skipped_spans as f64,
        );
        if let Some(f1) = m.dev_f1 {
            self.push(Some(m.epoch), "dev", "f1", f1);
        }
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.lines.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(())
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            TrainConfig::load(p).with_context(|| format!("config {} is invalid", p.display()))
        }
        None => Ok(TrainConfig::default()),
    }
}

fn apply_overrides(
    config: &mut TrainConfig,
    seed: Option<u64>,
    encoder: Option<EncoderChoice>,
) {
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(encoder) = encoder {
        config.encoder = encoder.into();
    }
}

fn parse_sample_size(raw: &str) -> Result<Option<usize>> {
    if raw == "all" {
        return Ok(None);
    }
    let n: usize = raw
        .parse()
        .with_context(|| format!("--sample-size must be a count or `all`, got `{raw}`"))?;
    Ok(Some(n))
}

fn ensure_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn gold_answers(docs: &[ProcessDocument], source: &str) -> Result<Vec<ProcessAnswer>> {
    docs.iter()
        .map(|doc| {
            ProcessAnswer::from_gold(doc).with_context(|| {
                format!(
                    "process `{}` in {source} carries no gold locations",
                    doc.process_id
                )
            })
        })
        .collect()
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new();
    let mut config = load_config(args.config.as_deref())?;
    apply_overrides(&mut config, args.seed, args.encoder);
    if let Some(name) = args.ablate.as_deref() {
        config.model.ablation = Ablation::by_name(name).with_context(|| {
            format!(
                "unknown ablation `{name}`; valid flags: none, {}",
                Ablation::NAMES.join(", ")
            )
        })?;
    }
    manifest.config(&config)?;
    manifest.seed = Some(config.seed);
    if let Some(p) = &args.config {
        manifest.input(p);
    }
    manifest.input(&args.data_dir);

    ensure_out_dir(&args.out_dir)?;
    let checkpoint_path = args.out_dir.join("model.ckpt");
    let metrics_path = args.out_dir.join("metrics.jsonl");
    let mut log = MetricsLog::new();

    match args.dataset {
        Dataset::Propara => {
            if args.sample_size.is_some() {
                bail!("--sample-size applies to npn-cooking only");
            }
            let train = load_propara(&args.data_dir, Split::Train)?;
            let dev = load_propara(&args.data_dir, Split::Dev)?;
            eprintln!(
                "training on {} processes, validating on {}",
                train.len(),
                dev.len()
            );
            let trained = fit(&config, &train, &dev, Some(&checkpoint_path), |m| {
                log.push_epoch(m);
                report_epoch(m);
            })?;
            eprintln!(
                "best epoch {} (dev F1 {})",
                trained.report.best_epoch,
                trained
                    .report
                    .best_dev_f1
                    .map(|f| format!("{f:.4}"))
                    .unwrap_or_else(|| "n/a".into())
            );
        }
        Dataset::NpnCooking => {
            let sample = args
                .sample_size
                .as_deref()
                .context("--sample-size is required for npn-cooking (a count or `all`)")?;
            let sample = parse_sample_size(sample)?;
            let vocab = load_location_vocab(&args.data_dir)?;
            let train = load_npn_cooking(&args.data_dir, Split::Train, sample, config.seed)?;
            let dev = load_npn_cooking(&args.data_dir, Split::Dev, None, config.seed)?;
            eprintln!(
                "training on {} recipes, validating on {}",
                train.len(),
                dev.len()
            );
            let trained = fit_cooking(
                &config,
                &train,
                &dev,
                vocab.len(),
                Some(&checkpoint_path),
                |m| {
                    log.push_epoch(m);
                    report_epoch(m);
                },
            )?;
            eprintln!(
                "best epoch {} (dev F1 {})",
                trained.report.best_epoch,
                trained
                    .report
                    .best_dev_f1
                    .map(|f| format!("{f:.4}"))
                    .unwrap_or_else(|| "n/a".into())
            );
        }
    }

    log.write(&metrics_path)?;
    manifest.output(&checkpoint_path);
    manifest.output(&metrics_path);
    manifest.write(&args.out_dir)?;
    Ok(())
}

fn report_epoch(m: &EpochMetrics) {
    let acc = m
        .transition_accuracy
        .map(|a| format!(" trans_acc {a:.3}"))
        .unwrap_or_default();
    let dev = m
        .dev_f1
        .map(|f| format!(" dev_f1 {f:.4}"))
        .unwrap_or_default();
    eprintln!("epoch {:>3}: loss {:.4}{acc}{dev}", m.epoch, m.train_loss);
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new();
    manifest.input(&args.checkpoint);
    manifest.input(&args.data_dir);
    ensure_out_dir(&args.out_dir)?;
    let dump_path = args.out_dir.join("predictions.tsv");

    match args.dataset {
        Dataset::Propara => {
            if args.task == Task::CookingLocation {
                bail!("task cooking-location requires --dataset npn-cooking");
            }
            let loaded = checkpoint::load_span(&args.checkpoint)?;
            manifest.config(&loaded.config)?;
            manifest.seed = Some(loaded.config.seed);
            let docs = load_propara(&args.data_dir, args.split)?;
            let mode = match args.task {
                Task::SentenceLevel => TrackMode::AttributesOnly,
                _ => TrackMode::Reconciled,
            };
            let mut rows = Vec::new();
            for doc in &docs {
                let trace = track_process(&loaded.model, &loaded.store, doc, mode)?;
                rows.extend(trace.dump_rows());
            }
            std::fs::write(&dump_path, write_predictions(&rows)?)
                .with_context(|| format!("cannot write {}", dump_path.display()))?;
            eprintln!(
                "dumped {} rows over {} processes to {}",
                rows.len(),
                docs.len(),
                dump_path.display()
            );
        }
        Dataset::NpnCooking => {
            if args.task != Task::CookingLocation {
                bail!("--dataset npn-cooking requires --task cooking-location");
            }
            let loaded = checkpoint::load_cooking(&args.checkpoint)?;
            manifest.config(&loaded.config)?;
            manifest.seed = Some(loaded.config.seed);
            let recipes = load_npn_cooking(&args.data_dir, args.split, None, loaded.config.seed)?;
            let mut answers: Vec<CookingAnswerRows> = Vec::with_capacity(recipes.len());
            for recipe in &recipes {
                let locations = track_recipe(&loaded.model, &loaded.store, recipe)?;
                let names = recipe
                    .ingredients
                    .iter()
                    .map(|i| i.name.clone())
                    .collect();
                answers.push((recipe.recipe_id.clone(), names, locations));
            }
            std::fs::write(&dump_path, write_cooking_predictions(&answers)?)
                .with_context(|| format!("cannot write {}", dump_path.display()))?;
            eprintln!(
                "dumped {} recipes to {}",
                answers.len(),
                dump_path.display()
            );
        }
    }

    manifest.output(&dump_path);
    manifest.write(&args.out_dir)?;
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new();
    manifest.config(&serde_json::json!({
        "task": match args.task {
            Task::DocumentLevel => "document-level",
            Task::SentenceLevel => "sentence-level",
            Task::CookingLocation => "cooking-location",
        }
    }))?;
    manifest.input(&args.pred);
    manifest.input(&args.gold);
    ensure_out_dir(&args.out_dir)?;
    let report_path = args.out_dir.join("report.txt");
    let metrics_path = args.out_dir.join("metrics.jsonl");
    let mut log = MetricsLog::new();

    let pred_text = std::fs::read_to_string(&args.pred)
        .with_context(|| format!("cannot read {}", args.pred.display()))?;
    let pred_name = args.pred.display().to_string();
    let report: String = match args.task {
        Task::DocumentLevel | Task::SentenceLevel => {
            let rows = parse_predictions(&pred_text, &pred_name)?;
            let pred = ProcessAnswer::from_rows(&rows, &pred_name)?;
            let gold_text = std::fs::read_to_string(&args.gold)
                .with_context(|| format!("cannot read {}", args.gold.display()))?;
            let gold_name = args.gold.display().to_string();
            let docs = protrace::data::parse_propara(&gold_text, &gold_name)?;
            let gold = gold_answers(&docs, &gold_name)?;
            if args.task == Task::DocumentLevel {
                let r = eval_document_level(&pred, &gold)?;
                log.push(None, "eval", "inputs_f1", r.inputs.f1);
                log.push(None, "eval", "outputs_f1", r.outputs.f1);
                log.push(None, "eval", "moves_f1", r.moves.f1);
                log.push(None, "eval", "conversions_f1", r.conversions.f1);
                log.push(None, "eval", "precision", r.overall.precision);
                log.push(None, "eval", "recall", r.overall.recall);
                log.push(None, "eval", "f1", r.overall.f1);
                r.to_string()
            } else {
                let r = eval_sentence_level(&pred, &gold)?;
                log.push(None, "eval", "cat1", r.cat1);
                log.push(None, "eval", "cat2", r.cat2);
                log.push(None, "eval", "cat3", r.cat3);
                log.push(None, "eval", "macro", r.macro_avg);
                log.push(None, "eval", "micro", r.micro_avg);
                r.to_string()
            }
        }
        Task::CookingLocation => {
            let vocab_dir = args.gold.parent().unwrap_or_else(|| Path::new("."));
            let vocab = load_location_vocab(vocab_dir)?;
            let parsed = parse_cooking_predictions(&pred_text, &pred_name)?;
            let pred: Vec<RecipeAnswer> = parsed
                .into_iter()
                .map(|(recipe_id, _, locations)| RecipeAnswer {
                    recipe_id,
                    locations,
                })
                .collect();
            let gold = gold_recipes(&args.gold)?;
            let r = eval_cooking(&pred, &gold, vocab.len())?;
            log.push(None, "eval", "precision", r.precision);
            log.push(None, "eval", "recall", r.recall);
            log.push(None, "eval", "f1", r.f1);
            log.push(None, "eval", "accuracy", r.accuracy);
            r.to_string()
        }
    };

    print!("{report}");
    std::fs::write(&report_path, &report)
        .with_context(|| format!("cannot write {}", report_path.display()))?;
    log.write(&metrics_path)?;
    manifest.output(&report_path);
    manifest.output(&metrics_path);
    manifest.write(&args.out_dir)?;
    Ok(())
}

/// Load gold recipe answers from a JSONL split file.
fn gold_recipes(path: &Path) -> Result<Vec<RecipeAnswer>> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .with_context(|| format!("{} has no usable file stem", path.display()))?;
    let split: Split = stem
        .parse()
        .map_err(|e: String| anyhow::anyhow!("{e} (gold file must be a split file)"))?;
    let recipes = load_npn_cooking(dir, split, None, 0)?;
    Ok(recipes
        .iter()
        .map(|r: &RecipeDocument| RecipeAnswer {
            recipe_id: r.recipe_id.clone(),
            locations: r.gold_locations.clone(),
        })
        .collect())
}

fn cmd_ablate_suite(args: AblateArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new();
    let mut base = load_config(args.config.as_deref())?;
    apply_overrides(&mut base, args.seed, args.encoder);
    manifest.config(&base)?;
    manifest.seed = Some(base.seed);
    if let Some(p) = &args.config {
        manifest.input(p);
    }
    manifest.input(&args.data_dir);
    ensure_out_dir(&args.out_dir)?;

    let train = load_propara(&args.data_dir, Split::Train)?;
    let dev = load_propara(&args.data_dir, Split::Dev)?;

    let mut table = String::from("variant\tdev_f1\tbest_epoch\n");
    let mut names = vec!["none"];
    names.extend(Ablation::NAMES);
    for name in names {
        let mut config = base.clone();
        config.model.ablation = Ablation::by_name(name).expect("known flag");
        eprintln!("== variant {name} ==");
        let trained = fit(&config, &train, &dev, None, |m| report_epoch(m))?;
        let f1 = trained.report.best_dev_f1.unwrap_or(f64::NAN);
        table.push_str(&format!(
            "{name}\t{f1:.4}\t{}\n",
            trained.report.best_epoch
        ));
    }

    let table_path = args.out_dir.join("ablations.tsv");
    std::fs::write(&table_path, &table)
        .with_context(|| format!("cannot write {}", table_path.display()))?;
    print!("{table}");
    manifest.output(&table_path);
    manifest.write(&args.out_dir)?;
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::AblateSuite(args) => cmd_ablate_suite(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
