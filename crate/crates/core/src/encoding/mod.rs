//! Per-step procedural contexts and the encoder abstraction.
//!
//! For entity `e` at step `k` the model reads one token sequence laid out as
//!
//! ```text
//! [CLS] where is e ? [SEP] [C_NOW] [C_UNK] S_1 … S_k [SEP]
//! ```
//!
//! `[C_NOW]` and `[C_UNK]` are reserved tokens addressing the two non-span
//! attribute classes, so span pointers have somewhere to point when an
//! entity is nowhere or somewhere unknown. Two interchangeable encoders
//! produce per-token vectors for this sequence: a small trainable
//! transformer ([`tiny`]) and a pretrained-weight transformer ([`bert`]).

mod bert;
mod safetensors;
mod tiny;
mod transformer;
mod wordpiece;

pub use bert::{BertEncoder, WEIGHTS_ENV_VAR};
pub use safetensors::read_safetensors;
pub use tiny::{TinyEncoder, TinyVocab};
pub use transformer::TransformerConfig;
pub use wordpiece::WordPieceVocab;

use std::ops::Range;

use ndarray::{Array1, Array2};
use protrace_autodiff::{ParamStore, Tape, Var};
use thiserror::Error;

use crate::data::ProcessDocument;
use crate::formalism::{EntityRef, SpanLoc};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
/// Reserved token addressing the "does not exist" class.
pub const C_NOW: &str = "[C_NOW]";
/// Reserved token addressing the "exists, place unknown" class.
pub const C_UNK: &str = "[C_UNK]";

/// Splits one data-layer word into encoder tokens (at least one).
pub trait Tokenizer {
    fn subtokens(&self, word: &str) -> Vec<String>;
}

/// The encoder input for one (entity, step) pair, with every bookkeeping
/// range needed to map predictions back to data-layer tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ProceduralContext {
    pub entity: EntityRef,
    /// Step `k`, 1-based.
    pub step: usize,
    pub tokens: Vec<String>,
    /// Query word tokens (inside `[CLS] … [SEP]`).
    pub query_range: Range<usize>,
    pub nowhere_pos: usize,
    pub unknown_pos: usize,
    /// Included sentences in order: (data sentence index, token range).
    pub sentence_ranges: Vec<(usize, Range<usize>)>,
    /// Per included sentence, the encoder token range of each word.
    word_ranges: Vec<Vec<Range<usize>>>,
    /// Earliest sentences dropped to fit the length limit.
    pub dropped_sentences: usize,
}

impl ProceduralContext {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token range covering every included sentence.
    pub fn sentence_region(&self) -> Range<usize> {
        let start = self
            .sentence_ranges
            .first()
            .map(|(_, r)| r.start)
            .unwrap_or(0);
        let end = self
            .sentence_ranges
            .last()
            .map(|(_, r)| r.end)
            .unwrap_or(start);
        start..end
    }

    /// Encoder token range of a data-layer span, if its sentence is still
    /// in the context.
    pub fn encoder_span(&self, loc: &SpanLoc) -> Option<Range<usize>> {
        let slot = self
            .sentence_ranges
            .iter()
            .position(|(idx, _)| *idx == loc.sentence)?;
        let words = &self.word_ranges[slot];
        let start = words.get(loc.start)?.start;
        let end = words.get(loc.end)?.end;
        Some(start..end)
    }

    /// Data-layer (sentence, word) owning an encoder token position, if the
    /// position is inside a sentence.
    pub fn data_token_at(&self, pos: usize) -> Option<(usize, usize)> {
        let slot = self
            .sentence_ranges
            .iter()
            .position(|(_, r)| r.contains(&pos))?;
        let (sentence, _) = self.sentence_ranges[slot];
        let word = self.word_ranges[slot]
            .iter()
            .position(|r| r.contains(&pos))?;
        Some((sentence, word))
    }

    /// 0/1 indicator over tokens: 1 inside sentences, 0 elsewhere.
    pub fn sentence_indicator(&self) -> Array1<f64> {
        let mut ind = Array1::zeros(self.len());
        for (_, r) in &self.sentence_ranges {
            for i in r.clone() {
                ind[i] = 1.0;
            }
        }
        ind
    }
}

#[derive(Debug, Error)]
pub enum ContextError {
    #[error(
        "context for entity `{entity}` step {step} needs {required} tokens, limit {max} \
         (sentence {step} alone does not fit)"
    )]
    ContextOverflow {
        entity: String,
        step: usize,
        required: usize,
        max: usize,
    },
    #[error("step {step} out of range 1..={num_steps}")]
    BadStep { step: usize, num_steps: usize },
}

/// Assemble the context for `(entity, k)`: query, reserved class tokens,
/// and sentences `1..=k`. When the result exceeds `max_len`, the earliest
/// sentences are dropped (never the query, the class tokens, or sentence
/// `k` itself).
pub fn build_context(
    doc: &ProcessDocument,
    entity: &EntityRef,
    k: usize,
    tokenizer: &dyn Tokenizer,
    max_len: usize,
) -> Result<ProceduralContext, ContextError> {
    build_context_through(doc, entity, k, k, tokenizer, max_len)
}

/// Like [`build_context`] but with sentences `1..=through`, `through >= k`.
/// Lets the model read the whole procedure at every step while the step
/// marker and class-token layout stay put.
pub fn build_context_through(
    doc: &ProcessDocument,
    entity: &EntityRef,
    k: usize,
    through: usize,
    tokenizer: &dyn Tokenizer,
    max_len: usize,
) -> Result<ProceduralContext, ContextError> {
    if k == 0 || k > through || through > doc.sentences.len() {
        return Err(ContextError::BadStep {
            step: k,
            num_steps: doc.sentences.len(),
        });
    }

    let query_words: Vec<String> = {
        let mut w = vec!["where".to_string(), "is".to_string()];
        w.extend(crate::data::tokenize(&entity.name));
        w.push("?".to_string());
        w
    };
    let query_tokens: Vec<String> = query_words
        .iter()
        .flat_map(|w| tokenizer.subtokens(w))
        .collect();

    // Tokenized sentences 1..=through (data indices 0..through).
    let sentence_tokens: Vec<Vec<Vec<String>>> = doc.sentences[..through]
        .iter()
        .map(|s| s.tokens.iter().map(|w| tokenizer.subtokens(w)).collect())
        .collect();
    let sentence_lens: Vec<usize> = sentence_tokens
        .iter()
        .map(|words| words.iter().map(Vec::len).sum())
        .collect();

    // [CLS] + query + [SEP] + [C_NOW] [C_UNK] + sentences + [SEP]
    let fixed = 1 + query_tokens.len() + 1 + 2 + 1;
    let mut first_sentence = 0;
    let mut total = fixed + sentence_lens.iter().sum::<usize>();
    while total > max_len && first_sentence + 1 < k {
        total -= sentence_lens[first_sentence];
        first_sentence += 1;
    }
    if total > max_len {
        return Err(ContextError::ContextOverflow {
            entity: entity.name.clone(),
            step: k,
            required: total,
            max: max_len,
        });
    }

    let mut tokens = Vec::with_capacity(total);
    tokens.push(CLS.to_string());
    let query_range = 1..1 + query_tokens.len();
    tokens.extend(query_tokens);
    tokens.push(SEP.to_string());
    let nowhere_pos = tokens.len();
    tokens.push(C_NOW.to_string());
    let unknown_pos = tokens.len();
    tokens.push(C_UNK.to_string());

    let mut sentence_ranges = Vec::with_capacity(through - first_sentence);
    let mut word_ranges = Vec::with_capacity(through - first_sentence);
    for (idx, words) in sentence_tokens.iter().enumerate().skip(first_sentence) {
        let start = tokens.len();
        let mut ranges = Vec::with_capacity(words.len());
        for sub in words {
            let ws = tokens.len();
            tokens.extend(sub.iter().cloned());
            ranges.push(ws..tokens.len());
        }
        sentence_ranges.push((idx, start..tokens.len()));
        word_ranges.push(ranges);
    }
    tokens.push(SEP.to_string());
    debug_assert_eq!(tokens.len(), total);

    Ok(ProceduralContext {
        entity: entity.clone(),
        step: k,
        tokens,
        query_range,
        nowhere_pos,
        unknown_pos,
        sentence_ranges,
        word_ranges,
        dropped_sentences: first_sentence,
    })
}

/// Per-token vectors for one context.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[L, H]`, row per context token.
    pub vectors: Array2<f64>,
}

impl EncoderOutput {
    /// The `[CLS]` position vector.
    pub fn pooled(&self) -> ndarray::ArrayView1<'_, f64> {
        self.vectors.row(0)
    }
}

#[derive(Debug, Error)]
pub enum EncoderFailure {
    #[error("encoder weights not found at {0}")]
    WeightsMissing(String),
    #[error("weight file malformed: {0}")]
    BadWeights(String),
    #[error("context length {len} exceeds encoder limit {max}")]
    OverLength { len: usize, max: usize },
    #[error("encoder produced non-finite values at step {step} for `{entity}`")]
    NonFinite { entity: String, step: usize },
}

/// A contextual token encoder. Both backends run the same math for
/// training (on a tape) and inference (tape discarded after the forward
/// pass), so eval always matches the trained function.
pub trait Encoder {
    fn hidden_width(&self) -> usize;
    fn max_len(&self) -> usize;
    fn tokenizer(&self) -> &dyn Tokenizer;

    /// Record the forward pass; returns the `[L, H]` token-vector node.
    fn encode_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ctx: &ProceduralContext,
    ) -> Result<Var, EncoderFailure>;

    /// Inference-mode encoding with finiteness checking.
    fn encode(
        &self,
        store: &ParamStore,
        ctx: &ProceduralContext,
    ) -> Result<EncoderOutput, EncoderFailure> {
        let mut tape = Tape::new();
        let var = self.encode_on_tape(&mut tape, store, ctx)?;
        let vectors = tape.value(var).to_owned();
        if !vectors.iter().all(|v| v.is_finite()) {
            return Err(EncoderFailure::NonFinite {
                entity: ctx.entity.name.clone(),
                step: ctx.step,
            });
        }
        Ok(EncoderOutput { vectors })
    }
}
