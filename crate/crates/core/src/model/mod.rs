//! Joint model: encoder plus attribute and transition heads over a process.

pub mod cooking;
pub mod heads;

use protrace_autodiff::{ParamError, ParamStore, Tape, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ProcessDocument;
use crate::encoding::{
    build_context_through, ContextError, Encoder, EncoderFailure, ProceduralContext,
};
use crate::formalism::EntityRef;
use heads::{AttrVars, HeadConfig, HeadError, Heads, StepTag};

/// Structural switches, each removing or substituting one model part.
/// All off reproduces the full model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Transition head sees only pooled step vectors.
    pub no_attr_aware_repr: bool,
    /// Drop the transition head; transitions are derived from attributes.
    pub no_transition_head: bool,
    /// Transition head without its recurrent layer.
    pub no_seq_transition: bool,
    /// Class prediction without the step-sequential layer.
    pub no_seq_class: bool,
    /// Spans only: no class logits, uniform class weights in the
    /// attribute-aware sum, attribute decoded from the span position.
    pub no_class_prediction: bool,
    /// Feed the pooled vector where the attribute-aware pair would go.
    pub cls_instead_of_attr_aware: bool,
    /// Every step reads the whole procedure, not the prefix through `k`.
    pub full_context_input: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 7] = [
        "no_attr_aware_repr",
        "no_transition_head",
        "no_seq_transition",
        "no_seq_class",
        "no_class_prediction",
        "cls_instead_of_attr_aware",
        "full_context_input",
    ];

    /// Single-switch construction from a flag name; `none` is the full model.
    pub fn by_name(name: &str) -> Option<Self> {
        let mut a = Self::default();
        match name {
            "none" => {}
            "no_attr_aware_repr" => a.no_attr_aware_repr = true,
            "no_transition_head" => a.no_transition_head = true,
            "no_seq_transition" => a.no_seq_transition = true,
            "no_seq_class" => a.no_seq_class = true,
            "no_class_prediction" => a.no_class_prediction = true,
            "cls_instead_of_attr_aware" => a.cls_instead_of_attr_aware = true,
            "full_context_input" => a.full_context_input = true,
            _ => return None,
        }
        Some(a)
    }

    pub fn active(&self) -> Vec<&'static str> {
        let flags = [
            self.no_attr_aware_repr,
            self.no_transition_head,
            self.no_seq_transition,
            self.no_seq_class,
            self.no_class_prediction,
            self.cls_instead_of_attr_aware,
            self.full_context_input,
        ];
        Self::NAMES
            .iter()
            .zip(flags)
            .filter_map(|(n, on)| on.then_some(*n))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Width of the sequential layer feeding class prediction.
    pub class_seq_hidden: usize,
    /// Per-direction width of the transition recurrent layer.
    pub trans_hidden: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            class_seq_hidden: 1000,
            trans_hidden: 200,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    fn head_config(&self) -> HeadConfig {
        HeadConfig {
            class_seq_hidden: self.class_seq_hidden,
            trans_hidden: self.trans_hidden,
            attr_aware: !self.ablation.no_attr_aware_repr,
            seq_transition: !self.ablation.no_seq_transition,
            seq_class: !self.ablation.no_seq_class,
            class_prediction: !self.ablation.no_class_prediction,
            transition_prediction: !self.ablation.no_transition_head,
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Encoder(#[from] EncoderFailure),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error("process `{0}` has no sentences")]
    EmptyProcess(String),
}

/// Tape nodes for one step of one entity.
pub struct StepForward {
    pub ctx: ProceduralContext,
    /// `[L, H]` token vectors.
    pub r_tokens: Var,
    /// `[1, H]` [CLS] vector.
    pub pooled: Var,
    pub prev: AttrVars,
    pub curr: AttrVars,
}

/// Forward pass over all steps of one (process, entity) pair.
pub struct ProcessForward {
    pub steps: Vec<StepForward>,
    /// `[1, 4]` per step; empty when the transition head is off.
    pub transition_logits: Vec<Var>,
}

pub struct Model {
    pub encoder: Box<dyn Encoder>,
    pub heads: Heads,
    pub config: ModelConfig,
}

impl Model {
    pub fn new(
        store: &mut ParamStore,
        encoder: Box<dyn Encoder>,
        config: ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ParamError> {
        let heads = Heads::register(store, encoder.hidden_width(), config.head_config(), rng)?;
        Ok(Self {
            encoder,
            heads,
            config,
        })
    }

    /// Encode every step, read both attribute heads per step, then (unless
    /// ablated) classify transitions over the whole sequence.
    pub fn forward_process(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        doc: &ProcessDocument,
        entity: &EntityRef,
    ) -> Result<ProcessForward, ModelError> {
        let num_steps = doc.num_steps();
        if num_steps == 0 {
            return Err(ModelError::EmptyProcess(doc.process_id.clone()));
        }
        let through = |k: usize| {
            if self.config.ablation.full_context_input {
                num_steps
            } else {
                k
            }
        };

        let mut ctxs = Vec::with_capacity(num_steps);
        let mut encoded = Vec::with_capacity(num_steps);
        let mut pooled = Vec::with_capacity(num_steps);
        for k in 1..=num_steps {
            let ctx = build_context_through(
                doc,
                entity,
                k,
                through(k),
                self.encoder.tokenizer(),
                self.encoder.max_len(),
            )?;
            let r = self.encoder.encode_on_tape(tape, store, &ctx)?;
            pooled.push(tape.row(r, 0));
            encoded.push(r);
            ctxs.push(ctx);
        }

        let class_inputs = self.heads.class_inputs(tape, store, &pooled);

        let mut steps = Vec::with_capacity(num_steps);
        for (i, ctx) in ctxs.into_iter().enumerate() {
            let prev =
                self.heads
                    .predict_attribute(tape, store, encoded[i], class_inputs[i], StepTag::Prev);
            let curr =
                self.heads
                    .predict_attribute(tape, store, encoded[i], class_inputs[i], StepTag::Curr);
            steps.push(StepForward {
                ctx,
                r_tokens: encoded[i],
                pooled: pooled[i],
                prev,
                curr,
            });
        }

        let transition_logits = if self.heads.has_transition_head() {
            let pairs: Option<Vec<Var>> = if self.config.ablation.no_attr_aware_repr {
                None
            } else if self.config.ablation.cls_instead_of_attr_aware {
                Some(
                    steps
                        .iter()
                        .map(|s| tape.concat_cols(s.pooled, s.pooled))
                        .collect(),
                )
            } else {
                let mut pairs = Vec::with_capacity(num_steps);
                for s in &steps {
                    pairs.push(self.heads.attribute_aware_pair(
                        tape,
                        s.r_tokens,
                        &s.curr,
                        &s.prev,
                        &s.ctx,
                    )?);
                }
                Some(pairs)
            };
            self.heads
                .predict_transitions(tape, store, &pooled, pairs.as_deref())?
        } else {
            Vec::new()
        };

        Ok(ProcessForward {
            steps,
            transition_logits,
        })
    }
}
