//! End-to-end optimization: run configuration, the joint loss over
//! attribute and transition heads, and the training loop.
//!
//! Loss normalization: each (process, entity) instance contributes the mean
//! over its steps of the per-step term sum (two class terms, two start/end
//! term pairs, one transition term); a batch contributes the mean over its
//! instances. Terms whose head is ablated, whose weight is zero, or whose
//! span target cannot be grounded are not built at all, so they contribute
//! exactly zero.

use std::path::{Path, PathBuf};

use protrace_autodiff::optim::{AdamW, AdamWConfig, LinearSchedule};
use protrace_autodiff::{ParamStore, Tape, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ground_gold_span, ProcessDocument, RecipeDocument};
use crate::encoding::{BertEncoder, Encoder, TinyEncoder, TinyVocab};
use crate::eval::{eval_cooking, eval_document_level, ProcessAnswer, RecipeAnswer};
use crate::formalism::{transition_between, Action, AttributeValue, EntityRef};
use crate::infer::{track_process, track_recipe, TrackMode};
use crate::model::cooking::{CookingConfig, CookingForward, CookingModel};
use crate::model::heads::{AttrVars, CLASS_NOWHERE, CLASS_SPAN, CLASS_UNKNOWN};
use crate::model::{Model, ProcessForward};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub class: f64,
    pub span: f64,
    pub transition: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class: 1.0,
            span: 1.0,
            transition: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderBackend {
    /// Transformer initialized from a pretrained checkpoint directory.
    Pretrained,
    /// Small randomly initialized transformer with a word-level vocabulary.
    #[default]
    Tiny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TinyEncoderConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
}

impl Default for TinyEncoderConfig {
    fn default() -> Self {
        Self {
            width: 32,
            layers: 2,
            heads: 4,
            max_len: 160,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Batch unit: one (process, entity) pair, whole step sequence.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of total optimizer steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub max_grad_norm: Option<f64>,
    pub encoder: EncoderBackend,
    pub tiny: TinyEncoderConfig,
    /// Checkpoint directory for the pretrained backend; falls back to the
    /// environment variable when absent.
    pub pretrained_dir: Option<PathBuf>,
    pub loss_weights: LossWeights,
    pub model: crate::model::ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            batch_size: 8,
            epochs: 15,
            seed: 13,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            max_grad_norm: Some(1.0),
            encoder: EncoderBackend::Tiny,
            tiny: TinyEncoderConfig::default(),
            pretrained_dir: None,
            loss_weights: LossWeights::default(),
            model: crate::model::ModelConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("learning_rate must be positive, got {0}")]
    BadLearningRate(f64),
    #[error("batch_size must be at least 1")]
    ZeroBatch,
    #[error("epochs must be at least 1")]
    ZeroEpochs,
    #[error("warmup_fraction must lie in [0, 1], got {0}")]
    BadWarmup(f64),
    #[error("loss weights must be non-negative")]
    NegativeWeight,
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config does not parse: {0}")]
    Parse(#[from] serde_yaml::Error),
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.learning_rate > 0.0) {
            return Err(ConfigError::BadLearningRate(self.learning_rate));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::ZeroBatch);
        }
        if self.epochs == 0 {
            return Err(ConfigError::ZeroEpochs);
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(ConfigError::BadWarmup(self.warmup_fraction));
        }
        let w = &self.loss_weights;
        if w.class < 0.0 || w.span < 0.0 || w.transition < 0.0 {
            return Err(ConfigError::NegativeWeight);
        }
        Ok(())
    }

    pub fn from_yaml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_yaml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_yaml(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Error)]
pub enum LossError {
    #[error("process `{0}` has no gold grid")]
    MissingGold(String),
    #[error(
        "gold span `{text}` for `{entity}` step {step} ({tag}) grounded outside the \
         encoder context"
    )]
    TargetMismatch {
        entity: String,
        step: usize,
        tag: &'static str,
        text: String,
    },
    #[error("forward output covers {got} steps, gold covers {want}")]
    StepMismatch { got: usize, want: usize },
}

/// Loss node plus bookkeeping for one (process, entity) instance.
pub struct InstanceLoss {
    /// `[1, 1]`: mean over steps of the per-step term sum.
    pub loss: Var,
    /// CE terms actually built.
    pub terms: usize,
    /// SPAN targets whose text never grounds in the visible sentences.
    pub skipped_spans: usize,
    /// Transition argmax agreement with derived gold, for monitoring.
    pub transition_hits: usize,
    pub transition_total: usize,
}

fn class_id(v: &AttributeValue) -> usize {
    match v {
        AttributeValue::Nowhere => CLASS_NOWHERE,
        AttributeValue::Unknown => CLASS_UNKNOWN,
        AttributeValue::Span { .. } => CLASS_SPAN,
    }
}

/// Start/end target positions in encoder coordinates for one gold value,
/// `None` when the span text cannot be grounded (span terms are skipped).
fn span_target(
    doc: &ProcessDocument,
    entity: &EntityRef,
    column: usize,
    value: &AttributeValue,
    ctx: &crate::encoding::ProceduralContext,
    tag: &'static str,
) -> Result<Option<(usize, usize)>, LossError> {
    match value {
        AttributeValue::Nowhere => Ok(Some((ctx.nowhere_pos, ctx.nowhere_pos))),
        AttributeValue::Unknown => Ok(Some((ctx.unknown_pos, ctx.unknown_pos))),
        AttributeValue::Span { text, .. } => {
            let grounded = match ground_gold_span(doc, entity.index, column, value) {
                Ok(g) => g,
                Err(_) => return Ok(None),
            };
            let loc = match &grounded {
                AttributeValue::Span { loc: Some(loc), .. } => loc.clone(),
                _ => return Ok(None),
            };
            match ctx.encoder_span(&loc) {
                Some(range) => Ok(Some((range.start, range.end - 1))),
                None => Err(LossError::TargetMismatch {
                    entity: entity.name.clone(),
                    step: ctx.step,
                    tag,
                    text: text.clone(),
                }),
            }
        }
    }
}

struct TermAccumulator<'t> {
    tape: &'t mut Tape,
    sum: Option<Var>,
    count: usize,
}

impl<'t> TermAccumulator<'t> {
    fn push(&mut self, logits: Var, target: usize, weight: f64) {
        if weight == 0.0 {
            return;
        }
        let mut term = self.tape.nll(logits, 0, target);
        if weight != 1.0 {
            term = self.tape.scale(term, weight);
        }
        self.sum = Some(match self.sum {
            Some(s) => self.tape.add(s, term),
            None => term,
        });
        self.count += 1;
    }
}

/// Joint loss for one (process, entity) instance over a recorded forward
/// pass. Gold transitions are derived from consecutive gold grid columns.
pub fn instance_loss(
    tape: &mut Tape,
    fwd: &ProcessForward,
    doc: &ProcessDocument,
    entity: &EntityRef,
    weights: &LossWeights,
) -> Result<InstanceLoss, LossError> {
    let gold = doc
        .gold
        .as_ref()
        .ok_or_else(|| LossError::MissingGold(doc.process_id.clone()))?;
    let num_steps = doc.num_steps();
    if fwd.steps.len() != num_steps {
        return Err(LossError::StepMismatch {
            got: fwd.steps.len(),
            want: num_steps,
        });
    }
    let row = gold.row(entity.index);

    let mut acc = TermAccumulator {
        tape,
        sum: None,
        count: 0,
    };
    let mut skipped_spans = 0;
    let mut transition_hits = 0;
    let mut transition_total = 0;

    for (i, step) in fwd.steps.iter().enumerate() {
        let k = i + 1;
        let sides: [(&AttrVars, usize, &'static str); 2] = [
            (&step.prev, k - 1, step.prev.tag.name()),
            (&step.curr, k, step.curr.tag.name()),
        ];
        for (vars, column, tag) in sides {
            let value = &row[column];
            if let Some(class_logits) = vars.class_logits {
                acc.push(class_logits, class_id(value), weights.class);
            }
            match span_target(doc, entity, column, value, &step.ctx, tag)? {
                Some((s, e)) => {
                    acc.push(vars.start_logits, s, weights.span);
                    acc.push(vars.end_logits, e, weights.span);
                }
                None => skipped_spans += 1,
            }
        }
        if !fwd.transition_logits.is_empty() {
            let target = transition_between(&row[k - 1], &row[k]).action.index();
            let logits = fwd.transition_logits[i];
            acc.push(logits, target, weights.transition);
            let vals = acc.tape.value(logits);
            let argmax = (0..vals.ncols())
                .max_by(|&a, &b| vals[[0, a]].total_cmp(&vals[[0, b]]))
                .unwrap();
            transition_total += 1;
            if argmax == target {
                transition_hits += 1;
            }
        }
    }

    let total = acc
        .sum
        .unwrap_or_else(|| acc.tape.constant(ndarray::Array2::zeros((1, 1))));
    let count = acc.count;
    let loss = tape.scale(total, 1.0 / num_steps as f64);
    Ok(InstanceLoss {
        loss,
        terms: count,
        skipped_spans,
        transition_hits,
        transition_total,
    })
}

/// Mean of instance losses, `[1, 1]`.
pub fn batch_loss(tape: &mut Tape, instances: &[Var]) -> Var {
    assert!(!instances.is_empty(), "empty batch");
    let mut sum = instances[0];
    for &v in &instances[1..] {
        sum = tape.add(sum, v);
    }
    tape.scale(sum, 1.0 / instances.len() as f64)
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Cooking(#[from] crate::model::cooking::CookingModelError),
    #[error(transparent)]
    Param(#[from] protrace_autodiff::ParamError),
    #[error(transparent)]
    Encoder(#[from] crate::encoding::EncoderFailure),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error("loss became non-finite at epoch {epoch}, batch {batch}; aborted keeping the last good checkpoint")]
    Diverged { epoch: usize, batch: usize },
    #[error("no training instances with gold annotations")]
    NoInstances,
    #[error("dev document {0} has no gold grid")]
    MissingDevGold(String),
    #[error(
        "no pretrained weights directory: set `pretrained_dir` in the config or the {} variable",
        crate::encoding::WEIGHTS_ENV_VAR
    )]
    NoPretrainedDir,
    #[error("the tiny backend needs a vocabulary (archive without tiny_vocab?)")]
    MissingTinyVocab,
}

/// Build the configured encoder backend. For the tiny backend the
/// vocabulary must be given as `tiny_tokens` (checkpoint restore); training
/// entry points derive it from the corpus first. Returns the tokens actually
/// used so callers can archive them.
pub(crate) fn encoder_from_parts(
    config: &TrainConfig,
    tiny_tokens: Option<Vec<String>>,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<(Box<dyn Encoder>, Option<Vec<String>>), TrainError> {
    match config.encoder {
        EncoderBackend::Tiny => {
            let tokens = tiny_tokens.ok_or(TrainError::MissingTinyVocab)?;
            let vocab = TinyVocab::from_tokens(tokens.clone());
            let enc = TinyEncoder::new(
                store,
                vocab,
                config.tiny.width,
                config.tiny.layers,
                config.tiny.heads,
                config.tiny.max_len,
                rng,
            )?;
            Ok((Box::new(enc), Some(tokens)))
        }
        EncoderBackend::Pretrained => {
            let dir = config
                .pretrained_dir
                .clone()
                .or_else(|| std::env::var(crate::encoding::WEIGHTS_ENV_VAR).ok().map(PathBuf::from))
                .ok_or(TrainError::NoPretrainedDir)?;
            let enc = BertEncoder::load(store, &dir)?;
            Ok((Box::new(enc), None))
        }
    }
}

/// Register a fresh grid model: encoder backend plus heads. For the tiny
/// backend the vocabulary is built from `vocab_docs`.
pub fn build_model(
    config: &TrainConfig,
    vocab_docs: &[ProcessDocument],
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<(Model, Option<Vec<String>>), TrainError> {
    let tokens = match config.encoder {
        EncoderBackend::Tiny => Some(TinyVocab::build(vocab_docs).tokens().to_vec()),
        EncoderBackend::Pretrained => None,
    };
    let (encoder, tokens) = encoder_from_parts(config, tokens, store, rng)?;
    let model = Model::new(store, encoder, config.model.clone(), rng)?;
    Ok((model, tokens))
}

/// One epoch's training and dev numbers. `transition_accuracy` is absent
/// when the transition head is ablated; `dev_f1` when there is no dev split.
#[derive(Debug, Clone, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub transition_accuracy: Option<f64>,
    pub skipped_spans: usize,
    pub dev_f1: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct FitReport {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_dev_f1: Option<f64>,
}

/// A trained grid model: best-dev weights plus the per-epoch trajectory.
pub struct Trained {
    pub model: Model,
    pub store: ParamStore,
    pub tiny_vocab: Option<Vec<String>>,
    pub report: FitReport,
}

/// Document-level overall F1 of reconciled predictions against gold grids.
pub fn dev_document_f1(
    model: &Model,
    store: &ParamStore,
    docs: &[ProcessDocument],
) -> Result<f64, TrainError> {
    let mut preds = Vec::with_capacity(docs.len());
    let mut golds = Vec::with_capacity(docs.len());
    for doc in docs {
        let gold = ProcessAnswer::from_gold(doc)
            .ok_or_else(|| TrainError::MissingDevGold(doc.process_id.clone()))?;
        let trace = track_process(model, store, doc, TrackMode::Reconciled)?;
        preds.push(ProcessAnswer::from_trace(&trace));
        golds.push(gold);
    }
    Ok(eval_document_level(&preds, &golds)?.overall.f1)
}

struct EpochAccum {
    loss_sum: f64,
    batches: usize,
    hits: usize,
    totals: usize,
    skipped: usize,
}

impl EpochAccum {
    fn new() -> Self {
        EpochAccum {
            loss_sum: 0.0,
            batches: 0,
            hits: 0,
            totals: 0,
            skipped: 0,
        }
    }

    fn metrics(&self, epoch: usize, dev_f1: Option<f64>) -> EpochMetrics {
        EpochMetrics {
            epoch,
            train_loss: self.loss_sum / self.batches.max(1) as f64,
            transition_accuracy: (self.totals > 0).then(|| self.hits as f64 / self.totals as f64),
            skipped_spans: self.skipped,
            dev_f1,
        }
    }
}

fn make_optimizer(config: &TrainConfig, store: &ParamStore, steps: u64) -> (AdamW, LinearSchedule) {
    let optim = AdamW::new(
        store,
        AdamWConfig {
            lr: config.learning_rate,
            weight_decay: config.weight_decay,
            max_grad_norm: config.max_grad_norm,
            ..AdamWConfig::default()
        },
    );
    let schedule = LinearSchedule {
        warmup_steps: (config.warmup_fraction * steps as f64).round() as u64,
        total_steps: steps,
    };
    (optim, schedule)
}

/// Parameter snapshot for best-dev retention.
fn snapshot(store: &ParamStore) -> Vec<(protrace_autodiff::ParamId, ndarray::Array2<f64>)> {
    store.iter().map(|(id, _, v)| (id, v.to_owned())).collect()
}

/// Train the grid model. Batches are (process, entity) instances; every
/// epoch shuffles them with the run's seeded generator, so a fixed seed
/// reproduces the loss trajectory exactly on the tiny backend. After each
/// epoch the dev split is scored with the document-level metric; the best
/// epoch's weights are kept (and written to `checkpoint_path` when given, so
/// a later divergence still leaves the last good archive on disk). Without a
/// dev split the latest weights are kept instead.
pub fn fit(
    config: &TrainConfig,
    train_docs: &[ProcessDocument],
    dev_docs: &[ProcessDocument],
    checkpoint_path: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Trained, TrainError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let (model, tiny_vocab) = build_model(config, train_docs, &mut store, &mut rng)?;

    let mut instances: Vec<(usize, usize)> = Vec::new();
    for (d, doc) in train_docs.iter().enumerate() {
        if doc.gold.is_none() {
            continue;
        }
        for e in 0..doc.entities.len() {
            instances.push((d, e));
        }
    }
    if instances.is_empty() {
        return Err(TrainError::NoInstances);
    }

    let batches_per_epoch = instances.len().div_ceil(config.batch_size);
    let (mut optim, schedule) =
        make_optimizer(config, &store, (batches_per_epoch * config.epochs) as u64);

    let track_best = !dev_docs.is_empty();
    let mut best: Option<(f64, Vec<(protrace_autodiff::ParamId, ndarray::Array2<f64>)>)> = None;
    let mut report = FitReport::default();

    for epoch in 0..config.epochs {
        instances.shuffle(&mut rng);
        let mut accum = EpochAccum::new();
        for (b, chunk) in instances.chunks(config.batch_size).enumerate() {
            let mut tape = Tape::new();
            let mut losses = Vec::with_capacity(chunk.len());
            for &(d, e) in chunk {
                let doc = &train_docs[d];
                let fwd = model.forward_process(&mut tape, &store, doc, &doc.entities[e])?;
                let il = instance_loss(&mut tape, &fwd, doc, &doc.entities[e], &config.loss_weights)?;
                losses.push(il.loss);
                accum.hits += il.transition_hits;
                accum.totals += il.transition_total;
                accum.skipped += il.skipped_spans;
            }
            let batch = batch_loss(&mut tape, &losses);
            let value = tape.value(batch)[[0, 0]];
            if !value.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: b });
            }
            accum.loss_sum += value;
            accum.batches += 1;
            let mut grads = tape.backward(batch);
            let scale = schedule.scale(optim.steps_taken());
            optim.step(&mut store, &mut grads, scale);
        }

        let dev_f1 = if track_best {
            Some(dev_document_f1(&model, &store, dev_docs)?)
        } else {
            None
        };
        let metrics = accum.metrics(epoch, dev_f1);
        on_epoch(&metrics);
        report.epochs.push(metrics);

        let improved = match (&best, dev_f1) {
            (None, _) => true,
            (Some((best_f1, _)), Some(f1)) => f1 > *best_f1,
            (Some(_), None) => true,
        };
        if improved {
            report.best_epoch = epoch;
            report.best_dev_f1 = dev_f1;
            if track_best {
                best = Some((dev_f1.unwrap_or(f64::NEG_INFINITY), snapshot(&store)));
            }
            if let Some(path) = checkpoint_path {
                crate::checkpoint::save_span(path, config, tiny_vocab.as_deref(), &store)?;
            }
        }
    }

    if let Some((_, values)) = best {
        for (id, value) in values {
            store.set(id, value).expect("snapshot shapes match");
        }
    }
    Ok(Trained {
        model,
        store,
        tiny_vocab,
        report,
    })
}

/// Per-instance loss for the cooking variant: two class terms per step over
/// the location vocabulary plus the transition term, mean over steps. The
/// gold transition is MOVE when the location id changes, otherwise NONE.
pub fn cooking_instance_loss(
    tape: &mut Tape,
    fwd: &CookingForward,
    gold_row: &[u16],
    weights: &LossWeights,
) -> Result<InstanceLoss, LossError> {
    let num_steps = fwd.steps.len();
    if gold_row.len() != num_steps + 1 {
        return Err(LossError::StepMismatch {
            got: gold_row.len().saturating_sub(1),
            want: num_steps,
        });
    }
    let mut acc = TermAccumulator {
        tape,
        sum: None,
        count: 0,
    };
    let mut transition_hits = 0;
    let mut transition_total = 0;
    for (i, step) in fwd.steps.iter().enumerate() {
        let k = i + 1;
        acc.push(step.prev_logits, usize::from(gold_row[k - 1]), weights.class);
        acc.push(step.curr_logits, usize::from(gold_row[k]), weights.class);
        let target = if gold_row[k] == gold_row[k - 1] {
            Action::None.index()
        } else {
            Action::Move.index()
        };
        let logits = fwd.transition_logits[i];
        acc.push(logits, target, weights.transition);
        let vals = acc.tape.value(logits);
        let argmax = (0..vals.ncols())
            .max_by(|&a, &b| vals[[0, a]].total_cmp(&vals[[0, b]]))
            .unwrap();
        transition_total += 1;
        if argmax == target {
            transition_hits += 1;
        }
    }
    let total = acc
        .sum
        .unwrap_or_else(|| acc.tape.constant(ndarray::Array2::zeros((1, 1))));
    let terms = acc.count;
    let loss = tape.scale(total, 1.0 / num_steps.max(1) as f64);
    Ok(InstanceLoss {
        loss,
        terms,
        skipped_spans: 0,
        transition_hits,
        transition_total,
    })
}

/// A trained cooking model.
pub struct TrainedCooking {
    pub model: CookingModel,
    pub store: ParamStore,
    pub tiny_vocab: Option<Vec<String>>,
    pub num_classes: usize,
    pub report: FitReport,
}

/// Change-event F1 of tracked recipes against gold locations.
pub fn dev_cooking_f1(
    model: &CookingModel,
    store: &ParamStore,
    docs: &[RecipeDocument],
    num_classes: usize,
) -> Result<f64, TrainError> {
    let mut preds = Vec::with_capacity(docs.len());
    let mut golds = Vec::with_capacity(docs.len());
    for doc in docs {
        preds.push(RecipeAnswer {
            recipe_id: doc.recipe_id.clone(),
            locations: track_recipe(model, store, doc)?,
        });
        golds.push(RecipeAnswer {
            recipe_id: doc.recipe_id.clone(),
            locations: doc.gold_locations.clone(),
        });
    }
    Ok(eval_cooking(&preds, &golds, num_classes)?.f1)
}

/// Train the cooking variant. Batch unit is a (recipe, ingredient) pair;
/// dev selection uses the change-event F1.
pub fn fit_cooking(
    config: &TrainConfig,
    train_docs: &[RecipeDocument],
    dev_docs: &[RecipeDocument],
    num_classes: usize,
    checkpoint_path: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainedCooking, TrainError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let vocab_docs: Vec<ProcessDocument> = match config.encoder {
        EncoderBackend::Tiny => train_docs
            .iter()
            .map(CookingModel::as_process_document)
            .collect(),
        EncoderBackend::Pretrained => Vec::new(),
    };
    let tokens = match config.encoder {
        EncoderBackend::Tiny => Some(TinyVocab::build(&vocab_docs).tokens().to_vec()),
        EncoderBackend::Pretrained => None,
    };
    let (encoder, tiny_vocab) = encoder_from_parts(config, tokens, &mut store, &mut rng)?;
    let cooking_cfg = CookingConfig {
        num_classes,
        class_seq_hidden: config.model.class_seq_hidden,
        trans_hidden: config.model.trans_hidden,
        seq_class: !config.model.ablation.no_seq_class,
    };
    let model = CookingModel::new(&mut store, encoder, cooking_cfg, &mut rng)?;

    let mut instances: Vec<(usize, usize)> = Vec::new();
    for (d, doc) in train_docs.iter().enumerate() {
        for i in 0..doc.ingredients.len() {
            instances.push((d, i));
        }
    }
    if instances.is_empty() {
        return Err(TrainError::NoInstances);
    }

    let batches_per_epoch = instances.len().div_ceil(config.batch_size);
    let (mut optim, schedule) =
        make_optimizer(config, &store, (batches_per_epoch * config.epochs) as u64);

    let track_best = !dev_docs.is_empty();
    let mut best: Option<(f64, Vec<(protrace_autodiff::ParamId, ndarray::Array2<f64>)>)> = None;
    let mut report = FitReport::default();

    for epoch in 0..config.epochs {
        instances.shuffle(&mut rng);
        let mut accum = EpochAccum::new();
        for (b, chunk) in instances.chunks(config.batch_size).enumerate() {
            let mut tape = Tape::new();
            let mut losses = Vec::with_capacity(chunk.len());
            for &(d, i) in chunk {
                let doc = &train_docs[d];
                let fwd = model.forward_recipe(&mut tape, &store, doc, i)?;
                let il =
                    cooking_instance_loss(&mut tape, &fwd, &doc.gold_locations[i], &config.loss_weights)?;
                losses.push(il.loss);
                accum.hits += il.transition_hits;
                accum.totals += il.transition_total;
            }
            let batch = batch_loss(&mut tape, &losses);
            let value = tape.value(batch)[[0, 0]];
            if !value.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: b });
            }
            accum.loss_sum += value;
            accum.batches += 1;
            let mut grads = tape.backward(batch);
            let scale = schedule.scale(optim.steps_taken());
            optim.step(&mut store, &mut grads, scale);
        }

        let dev_f1 = if track_best {
            Some(dev_cooking_f1(&model, &store, dev_docs, num_classes)?)
        } else {
            None
        };
        let metrics = accum.metrics(epoch, dev_f1);
        on_epoch(&metrics);
        report.epochs.push(metrics);

        let improved = match (&best, dev_f1) {
            (None, _) => true,
            (Some((best_f1, _)), Some(f1)) => f1 > *best_f1,
            (Some(_), None) => true,
        };
        if improved {
            report.best_epoch = epoch;
            report.best_dev_f1 = dev_f1;
            if track_best {
                best = Some((dev_f1.unwrap_or(f64::NEG_INFINITY), snapshot(&store)));
            }
            if let Some(path) = checkpoint_path {
                crate::checkpoint::save_cooking(
                    path,
                    config,
                    tiny_vocab.as_deref(),
                    num_classes,
                    &store,
                )?;
            }
        }
    }

    if let Some((_, values)) = best {
        for (id, value) in values {
            store.set(id, value).expect("snapshot shapes match");
        }
    }
    Ok(TrainedCooking {
        model,
        store,
        tiny_vocab,
        num_classes,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::parse_propara;
    use crate::encoding::{build_context, Tokenizer};
    use crate::model::heads::StepTag;
    use crate::model::StepForward;
    use ndarray::Array2;

    struct Identity;
    impl Tokenizer for Identity {
        fn subtokens(&self, word: &str) -> Vec<String> {
            vec![word.to_lowercase()]
        }
    }

    /// One sentence, two entities with distinct gold rows; both queries are
    /// one word, so both contexts are 13 tokens with class tokens at 6/7
    /// and the sentence at 8..12.
    const TEXT: &str = "1\tsentence\t1\tWater falls down.\n\
        1\tentity\twater\t-\tfalls\n\
        1\tentity\tvapor\t?\twater falls down .\n";

    fn doc() -> ProcessDocument {
        parse_propara(TEXT, "t").unwrap().remove(0)
    }

    fn sparse(len: usize, pairs: &[(usize, f64)]) -> Array2<f64> {
        let mut a = Array2::zeros((1, len));
        for &(i, x) in pairs {
            a[[0, i]] = x;
        }
        a
    }

    fn attr(tape: &mut Tape, tag: StepTag, class: [f64; 3], start: Array2<f64>, end: Array2<f64>) -> AttrVars {
        let class_logits = tape.constant(Array2::from_shape_vec((1, 3), class.to_vec()).unwrap());
        let start_logits = tape.constant(start);
        let end_logits = tape.constant(end);
        let p_class = tape.softmax_rows(class_logits);
        let p_start = tape.softmax_rows(start_logits);
        let p_end = tape.softmax_rows(end_logits);
        let raw = tape.mul(p_start, p_end);
        let p_span = tape.normalize_row(raw);
        AttrVars {
            tag,
            class_logits: Some(class_logits),
            p_class,
            start_logits,
            end_logits,
            p_start,
            p_end,
            p_span,
        }
    }

    fn forward_for(
        tape: &mut Tape,
        d: &ProcessDocument,
        entity: usize,
        prev: AttrVars,
        curr: AttrVars,
        transition: Array2<f64>,
    ) -> ProcessForward {
        let ctx = build_context(d, &d.entities[entity], 1, &Identity, 64).unwrap();
        let len = ctx.len();
        let r_tokens = tape.constant(Array2::zeros((len, 4)));
        let pooled = tape.row(r_tokens, 0);
        let t = tape.constant(transition);
        ProcessForward {
            steps: vec![StepForward {
                ctx,
                r_tokens,
                pooled,
                prev,
                curr,
            }],
            transition_logits: vec![t],
        }
    }

    /// Hand-computed cross-entropy sums (frozen before implementation).
    const LOSS_A: f64 = 7.741599103097637;
    const LOSS_B: f64 = 8.95922206007811;
    const BATCH_MEAN: f64 = 8.350410581587873;
    const LOSS_A_WEIGHTED: f64 = 13.415531780053994;
    const UNIFORM_L13: f64 = 13.843316368302258;

    fn instance_a(tape: &mut Tape, d: &ProcessDocument) -> ProcessForward {
        // Gold: water  - -> "falls" (token 9), transition CREATE.
        let prev = attr(tape, StepTag::Prev, [0.5, 0.0, -0.5], sparse(13, &[(6, 2.0)]), sparse(13, &[(6, 1.0)]));
        let curr = attr(tape, StepTag::Curr, [0.0, 0.0, 1.0], sparse(13, &[(9, 1.5)]), sparse(13, &[(9, 0.5)]));
        forward_for(tape, d, 0, prev, curr, sparse(4, &[(0, 2.0), (1, 1.0), (3, -1.0)]))
    }

    fn instance_b(tape: &mut Tape, d: &ProcessDocument) -> ProcessForward {
        // Gold: vapor  ? -> "water falls down ." (tokens 8..=11), MOVE.
        let prev = attr(tape, StepTag::Prev, [0.0, 0.0, 0.0], sparse(13, &[]), sparse(13, &[]));
        let curr = attr(tape, StepTag::Curr, [1.0, 2.0, 3.0], sparse(13, &[(8, 3.0)]), sparse(13, &[(11, 3.0)]));
        forward_for(tape, d, 1, prev, curr, sparse(4, &[]))
    }

    #[test]
    fn hand_computed_two_instance_batch() {
        let d = doc();
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let fa = instance_a(&mut tape, &d);
        let la = instance_loss(&mut tape, &fa, &d, &d.entities[0], &w).unwrap();
        let fb = instance_b(&mut tape, &d);
        let lb = instance_loss(&mut tape, &fb, &d, &d.entities[1], &w).unwrap();
        assert!((tape.value(la.loss)[[0, 0]] - LOSS_A).abs() < 1e-12);
        assert!((tape.value(lb.loss)[[0, 0]] - LOSS_B).abs() < 1e-12);
        assert_eq!(la.terms, 7);
        assert_eq!(la.skipped_spans, 0);
        let mean = batch_loss(&mut tape, &[la.loss, lb.loss]);
        assert!((tape.value(mean)[[0, 0]] - BATCH_MEAN).abs() < 1e-12);
    }

    #[test]
    fn weights_scale_their_own_terms() {
        let d = doc();
        let w = LossWeights {
            class: 0.5,
            span: 2.0,
            transition: 1.5,
        };
        let mut tape = Tape::new();
        let fa = instance_a(&mut tape, &d);
        let la = instance_loss(&mut tape, &fa, &d, &d.entities[0], &w).unwrap();
        assert!((tape.value(la.loss)[[0, 0]] - LOSS_A_WEIGHTED).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_hit_the_analytic_value() {
        let d = doc();
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let prev = attr(&mut tape, StepTag::Prev, [0.0; 3], sparse(13, &[]), sparse(13, &[]));
        let curr = attr(&mut tape, StepTag::Curr, [0.0; 3], sparse(13, &[]), sparse(13, &[]));
        let f = forward_for(&mut tape, &d, 0, prev, curr, sparse(4, &[]));
        let l = instance_loss(&mut tape, &f, &d, &d.entities[0], &w).unwrap();
        assert!((tape.value(l.loss)[[0, 0]] - UNIFORM_L13).abs() < 1e-12);
    }

    #[test]
    fn near_one_hot_correct_predictions_reach_the_floor() {
        let d = doc();
        let w = LossWeights::default();
        let mut tape = Tape::new();
        const BIG: f64 = 200.0;
        let prev = attr(&mut tape, StepTag::Prev, [BIG, 0.0, 0.0], sparse(13, &[(6, BIG)]), sparse(13, &[(6, BIG)]));
        let curr = attr(&mut tape, StepTag::Curr, [0.0, 0.0, BIG], sparse(13, &[(9, BIG)]), sparse(13, &[(9, BIG)]));
        let f = forward_for(&mut tape, &d, 0, prev, curr, sparse(4, &[(0, BIG)]));
        let l = instance_loss(&mut tape, &f, &d, &d.entities[0], &w).unwrap();
        assert!(tape.value(l.loss)[[0, 0]].abs() < 1e-9);
        assert_eq!(l.transition_hits, 1);
        assert_eq!(l.transition_total, 1);
    }

    #[test]
    fn missing_gold_is_an_error() {
        let mut d = doc();
        d.gold = None;
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let f = instance_a(&mut tape, &d);
        assert!(matches!(
            instance_loss(&mut tape, &f, &d, &d.entities[0], &w),
            Err(LossError::MissingGold(_))
        ));
    }

    #[test]
    fn ungroundable_span_skips_span_terms_only() {
        // Gold location text that appears nowhere in the sentence.
        let text = "9\tsentence\t1\tWater falls down.\n9\tentity\twater\t-\tmoon\n";
        let d = parse_propara(text, "t").unwrap().remove(0);
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let prev = attr(&mut tape, StepTag::Prev, [0.0; 3], sparse(13, &[]), sparse(13, &[]));
        let curr = attr(&mut tape, StepTag::Curr, [0.0; 3], sparse(13, &[]), sparse(13, &[]));
        let f = forward_for(&mut tape, &d, 0, prev, curr, sparse(4, &[]));
        let l = instance_loss(&mut tape, &f, &d, &d.entities[0], &w).unwrap();
        // prev: class + start + end; curr: class only; transition.
        assert_eq!(l.terms, 5);
        assert_eq!(l.skipped_spans, 1);
    }

    #[test]
    fn zero_transition_weight_leaves_no_transition_gradient() {
        use crate::encoding::{TinyEncoder, TinyVocab};
        use crate::model::{Model, ModelConfig};
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;

        let d = doc();
        let mut store = protrace_autodiff::ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vocab = TinyVocab::build(std::slice::from_ref(&d));
        let enc = TinyEncoder::new(&mut store, vocab, 12, 1, 2, 64, &mut rng).unwrap();
        let cfg = ModelConfig {
            class_seq_hidden: 6,
            trans_hidden: 4,
            ..ModelConfig::default()
        };
        let model = Model::new(&mut store, Box::new(enc), cfg, &mut rng).unwrap();

        let grads_for = |w: &LossWeights| {
            let mut tape = Tape::new();
            let f = model
                .forward_process(&mut tape, &store, &d, &d.entities[0])
                .unwrap();
            let l = instance_loss(&mut tape, &f, &d, &d.entities[0], w).unwrap();
            tape.backward(l.loss)
        };

        let with = grads_for(&LossWeights::default());
        let without = grads_for(&LossWeights {
            transition: 0.0,
            ..LossWeights::default()
        });
        let transition_params: Vec<_> = store
            .iter()
            .filter(|(_, name, _)| name.starts_with("heads.transition."))
            .map(|(id, _, _)| id)
            .collect();
        assert!(!transition_params.is_empty());
        for id in transition_params {
            assert!(with.get(id).is_some());
            assert!(without.get(id).is_none());
        }
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = TrainConfig::default();
        assert!((cfg.learning_rate - 3e-5).abs() < 1e-18);
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.model.class_seq_hidden, 1000);
        assert_eq!(cfg.model.trans_hidden, 200);
        cfg.validate().unwrap();

        let parsed = TrainConfig::from_yaml("learning_rate: 1.0e-4\nepochs: 3\n").unwrap();
        assert!((parsed.learning_rate - 1e-4).abs() < 1e-18);
        assert_eq!(parsed.epochs, 3);
        assert_eq!(parsed.batch_size, 8);

        assert!(matches!(
            TrainConfig::from_yaml("learning_rate: 0.0\n"),
            Err(ConfigError::BadLearningRate(_))
        ));
        assert!(matches!(
            TrainConfig::from_yaml("bogus_key: 1\n"),
            Err(ConfigError::Parse(_))
        ));
        assert!(matches!(
            TrainConfig::from_yaml("epochs: 0\n"),
            Err(ConfigError::ZeroEpochs)
        ));
    }

    #[test]
    fn ablation_flags_parse_inside_config() {
        let cfg = TrainConfig::from_yaml(
            "model:\n  ablation:\n    no_transition_head: true\n",
        )
        .unwrap();
        assert!(cfg.model.ablation.no_transition_head);
        assert!(TrainConfig::from_yaml("model:\n  ablation:\n    no_such_flag: true\n").is_err());
    }

    /// Two short processes for trainer tests, with groundable locations.
    const TRAIN_TEXT: &str = "1\tsentence\t1\tWater falls on rocks.\n\
        1\tsentence\t2\tWater seeps into soil.\n\
        1\tentity\twater\trocks\trocks\tsoil\n\
        \n\
        2\tsentence\t1\tRoots absorb water.\n\
        2\tsentence\t2\tLeaves release vapor.\n\
        2\tentity\tvapor\t-\t-\tleaves\n";

    fn trainer_config(epochs: usize) -> TrainConfig {
        let mut config = TrainConfig::default();
        config.epochs = epochs;
        config.seed = 11;
        config.batch_size = 2;
        config.learning_rate = 5e-3;
        config.tiny.width = 16;
        config.tiny.layers = 1;
        config.tiny.heads = 2;
        config.model.class_seq_hidden = 8;
        config.model.trans_hidden = 6;
        config
    }

    #[test]
    fn fixed_seed_reproduces_epoch_zero_loss() {
        let docs = parse_propara(TRAIN_TEXT, "t").unwrap();
        let config = trainer_config(1);
        let run = |docs: &[ProcessDocument]| {
            fit(&config, docs, &[], None, |_| {})
                .unwrap()
                .report
                .epochs[0]
                .train_loss
        };
        let a = run(&docs);
        let b = run(&docs);
        assert_eq!(a.to_bits(), b.to_bits(), "{a} vs {b}");
    }

    #[test]
    fn training_reduces_loss_and_tracks_dev() {
        let docs = parse_propara(TRAIN_TEXT, "t").unwrap();
        let config = trainer_config(8);
        let mut seen = Vec::new();
        let trained = fit(&config, &docs, &docs, None, |m| seen.push(m.epoch)).unwrap();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
        let first = trained.report.epochs.first().unwrap();
        let last = trained.report.epochs.last().unwrap();
        assert!(
            last.train_loss < first.train_loss,
            "loss should drop: {} -> {}",
            first.train_loss,
            last.train_loss
        );
        assert!(first.transition_accuracy.is_some());
        let best = trained.report.best_dev_f1.unwrap();
        let max = trained
            .report
            .epochs
            .iter()
            .filter_map(|m| m.dev_f1)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best, max);
    }

    #[test]
    fn ablated_transition_head_reports_no_accuracy() {
        let docs = parse_propara(TRAIN_TEXT, "t").unwrap();
        let mut config = trainer_config(1);
        config.model.ablation.no_transition_head = true;
        let trained = fit(&config, &docs, &[], None, |_| {}).unwrap();
        assert!(trained.report.epochs[0].transition_accuracy.is_none());
        assert!(trained.report.epochs[0].dev_f1.is_none());
    }

    #[test]
    fn exploding_updates_abort_with_last_good_checkpoint() {
        let docs = parse_propara(TRAIN_TEXT, "t").unwrap();
        let mut config = trainer_config(200);
        config.learning_rate = 1e3;
        config.weight_decay = 1e3;
        config.max_grad_norm = None;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        let err = fit(&config, &docs, &[], Some(&path), |_| {}).err().unwrap();
        assert!(matches!(err, TrainError::Diverged { .. }), "{err}");
        let loaded = crate::checkpoint::load_span(&path).unwrap();
        for (_, name, value) in loaded.store.iter() {
            assert!(
                value.iter().all(|x| x.is_finite()),
                "archived tensor {name} is non-finite"
            );
        }
    }

    #[test]
    fn cooking_loss_matches_analytic_uniform_value() {
        let mut tape = Tape::new();
        let n = 9;
        let zeros_n = tape.constant(Array2::zeros((1, n)));
        let zeros_t = tape.constant(Array2::zeros((1, 4)));
        let pooled = tape.constant(Array2::zeros((1, 4)));
        let fwd = CookingForward {
            steps: vec![
                crate::model::cooking::CookingStepForward {
                    pooled,
                    prev_logits: zeros_n,
                    curr_logits: zeros_n,
                },
                crate::model::cooking::CookingStepForward {
                    pooled,
                    prev_logits: zeros_n,
                    curr_logits: zeros_n,
                },
            ],
            transition_logits: vec![zeros_t, zeros_t],
        };
        let il =
            cooking_instance_loss(&mut tape, &fwd, &[0, 3, 3], &LossWeights::default()).unwrap();
        let got = tape.value(il.loss)[[0, 0]];
        let want = 2.0 * (n as f64).ln() + 4f64.ln();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert_eq!(il.terms, 6);
        assert!(cooking_instance_loss(&mut tape, &fwd, &[0, 3], &LossWeights::default()).is_err());
    }

    #[test]
    fn cooking_training_runs_and_improves() {
        use crate::data::load_location_vocab;
        let vocab_text = "bowl\npan\noven\ncounter\n";
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("location_vocab.txt"), vocab_text).unwrap();
        let vocab = load_location_vocab(dir.path()).unwrap();

        let recipes = vec![RecipeDocument {
            recipe_id: "r1".into(),
            sentences: crate::data::parse_propara(
                "9\tsentence\t1\tPut the dough in the pan.\n\
                 9\tsentence\t2\tBake the dough in the oven.\n\
                 9\tentity\tdough\t-\t-\t-\n",
                "t",
            )
            .unwrap()[0]
                .sentences
            .clone(),
            ingredients: vec![EntityRef::new("r1", "dough", 0)],
            gold_locations: vec![vec![0, 1, 2]],
        }];
        let mut config = trainer_config(6);
        config.learning_rate = 1e-2;
        let trained = fit_cooking(&config, &recipes, &recipes, vocab.len(), None, |_| {}).unwrap();
        let first = trained.report.epochs.first().unwrap();
        let last = trained.report.epochs.last().unwrap();
        assert!(last.train_loss < first.train_loss);
        assert!(trained.report.best_dev_f1.is_some());
        assert_eq!(trained.num_classes, vocab.len());
    }
}
