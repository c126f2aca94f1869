//! Pretrained transformer backend: loads config, subword vocabulary, and
//! safetensors weights from a local directory and runs the shared
//! transformer forward pass. Query tokens get segment id 0, everything
//! after the first separator segment id 1.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use protrace_autodiff::{ParamStore, Tape, Var};
use serde::Deserialize;

use crate::encoding::safetensors::{read_safetensors, RawTensor};
use crate::encoding::transformer::{LayerParams, TransformerConfig, TransformerParams};
use crate::encoding::wordpiece::WordPieceVocab;
use crate::encoding::{Encoder, EncoderFailure, ProceduralContext, Tokenizer};

/// Weight directory fallback when no path is configured.
pub const WEIGHTS_ENV_VAR: &str = "PROTRACE_PRETRAINED_DIR";

#[derive(Debug, Deserialize)]
struct ConfigFile {
    vocab_size: usize,
    hidden_size: usize,
    num_hidden_layers: usize,
    num_attention_heads: usize,
    intermediate_size: usize,
    max_position_embeddings: usize,
    #[serde(default = "default_eps")]
    layer_norm_eps: f64,
}

fn default_eps() -> f64 {
    1e-12
}

#[derive(Debug)]
pub struct BertEncoder {
    cfg: TransformerConfig,
    params: TransformerParams,
    vocab: WordPieceVocab,
}

impl BertEncoder {
    pub const PREFIX: &'static str = "encoder";

    /// Resolve the weight directory: explicit path first, then the
    /// `PROTRACE_PRETRAINED_DIR` environment variable.
    pub fn resolve_dir(configured: Option<&Path>) -> Result<PathBuf, EncoderFailure> {
        if let Some(p) = configured {
            return Ok(p.to_path_buf());
        }
        match std::env::var_os(WEIGHTS_ENV_VAR) {
            Some(v) => Ok(PathBuf::from(v)),
            None => Err(EncoderFailure::WeightsMissing(format!(
                "no directory configured and {WEIGHTS_ENV_VAR} is unset"
            ))),
        }
    }

    /// Load `config.json`, `vocab.txt`, and `model.safetensors` from `dir`,
    /// registering every tensor in `store`.
    pub fn load(store: &mut ParamStore, dir: &Path) -> Result<Self, EncoderFailure> {
        if !dir.is_dir() {
            return Err(EncoderFailure::WeightsMissing(dir.display().to_string()));
        }
        let config_text = std::fs::read_to_string(dir.join("config.json"))
            .map_err(|e| EncoderFailure::WeightsMissing(format!("config.json: {e}")))?;
        let file: ConfigFile = serde_json::from_str(&config_text)
            .map_err(|e| EncoderFailure::BadWeights(format!("config.json: {e}")))?;
        let vocab = WordPieceVocab::load(&dir.join("vocab.txt"))
            .map_err(EncoderFailure::BadWeights)?;
        if vocab.len() != file.vocab_size {
            return Err(EncoderFailure::BadWeights(format!(
                "vocab.txt has {} entries, config says {}",
                vocab.len(),
                file.vocab_size
            )));
        }
        let cfg = TransformerConfig {
            vocab_size: file.vocab_size,
            width: file.hidden_size,
            layers: file.num_hidden_layers,
            heads: file.num_attention_heads,
            ff_width: file.intermediate_size,
            max_len: file.max_position_embeddings,
            ln_eps: file.layer_norm_eps,
            token_types: true,
        };
        let mut tensors = read_safetensors(&dir.join("model.safetensors"))
            .map_err(EncoderFailure::BadWeights)?;
        let params = register_pretrained(store, &cfg, &mut tensors)?;
        Ok(Self { cfg, params, vocab })
    }

    pub fn vocab(&self) -> &WordPieceVocab {
        &self.vocab
    }
}

/// Take one tensor by its source name (with or without the `bert.` prefix),
/// check its shape, and hand back a matrix. 1-D tensors become `[1, n]`;
/// `transpose` flips stored `[out, in]` linear weights into `[in, out]`.
fn take(
    tensors: &mut HashMap<String, RawTensor>,
    name: &str,
    want: (usize, usize),
    transpose: bool,
) -> Result<Array2<f64>, EncoderFailure> {
    let raw = tensors
        .remove(name)
        .or_else(|| tensors.remove(&format!("bert.{name}")))
        .ok_or_else(|| EncoderFailure::BadWeights(format!("missing tensor {name}")))?;
    let dims = match raw.shape.len() {
        1 => (1, raw.shape[0]),
        2 => (raw.shape[0], raw.shape[1]),
        n => {
            return Err(EncoderFailure::BadWeights(format!(
                "tensor {name} has rank {n}, expected 1 or 2"
            )));
        }
    };
    let stored = Array2::from_shape_vec(dims, raw.values)
        .map_err(|e| EncoderFailure::BadWeights(format!("tensor {name}: {e}")))?;
    let value = if transpose { stored.t().to_owned() } else { stored };
    if value.dim() != want {
        return Err(EncoderFailure::BadWeights(format!(
            "tensor {name}: shape {:?} after layout fixes, expected {:?}",
            value.dim(),
            want
        )));
    }
    Ok(value)
}

fn register_pretrained(
    store: &mut ParamStore,
    cfg: &TransformerConfig,
    tensors: &mut HashMap<String, RawTensor>,
) -> Result<TransformerParams, EncoderFailure> {
    let h = cfg.width;
    let bad = |e: protrace_autodiff::ParamError| EncoderFailure::BadWeights(e.to_string());
    let p = BertEncoder::PREFIX;

    let add = |store: &mut ParamStore,
                   ours: String,
                   theirs: &str,
                   want: (usize, usize),
                   transpose: bool,
                   tensors: &mut HashMap<String, RawTensor>| {
        let v = take(tensors, theirs, want, transpose)?;
        store.add(ours, v).map_err(bad)
    };

    let token_emb = add(
        store,
        format!("{p}.token_emb.weight"),
        "embeddings.word_embeddings.weight",
        (cfg.vocab_size, h),
        false,
        tensors,
    )?;
    let pos_emb = add(
        store,
        format!("{p}.pos_emb.weight"),
        "embeddings.position_embeddings.weight",
        (cfg.max_len, h),
        false,
        tensors,
    )?;
    let type_emb = add(
        store,
        format!("{p}.type_emb.weight"),
        "embeddings.token_type_embeddings.weight",
        (2, h),
        false,
        tensors,
    )?;
    let emb_gamma = add(
        store,
        format!("{p}.emb_ln.gamma"),
        "embeddings.LayerNorm.weight",
        (1, h),
        false,
        tensors,
    )?;
    let emb_beta = add(
        store,
        format!("{p}.emb_ln.beta"),
        "embeddings.LayerNorm.bias",
        (1, h),
        false,
        tensors,
    )?;

    let mut layers = Vec::with_capacity(cfg.layers);
    for i in 0..cfg.layers {
        let ours = format!("{p}.layer{i}");
        let theirs = format!("encoder.layer.{i}");
        let lin = |store: &mut ParamStore,
                       ours_name: &str,
                       theirs_name: &str,
                       rows: usize,
                       cols: usize,
                       tensors: &mut HashMap<String, RawTensor>|
         -> Result<(protrace_autodiff::ParamId, protrace_autodiff::ParamId), EncoderFailure> {
            let w = take(tensors, &format!("{theirs}.{theirs_name}.weight"), (rows, cols), true)?;
            let b = take(tensors, &format!("{theirs}.{theirs_name}.bias"), (1, cols), false)?;
            Ok((
                store.add(format!("{ours}.{ours_name}.weight"), w).map_err(bad)?,
                store.add(format!("{ours}.{ours_name}.bias"), b).map_err(bad)?,
            ))
        };
        let (q_w, q_b) = lin(store, "attn.q", "attention.self.query", h, h, tensors)?;
        let (k_w, k_b) = lin(store, "attn.k", "attention.self.key", h, h, tensors)?;
        let (v_w, v_b) = lin(store, "attn.v", "attention.self.value", h, h, tensors)?;
        let (o_w, o_b) = lin(store, "attn.o", "attention.output.dense", h, h, tensors)?;
        let (ff1_w, ff1_b) = lin(store, "ff1", "intermediate.dense", h, cfg.ff_width, tensors)?;
        let (ff2_w, ff2_b) = lin(store, "ff2", "output.dense", cfg.ff_width, h, tensors)?;
        let attn_gamma = add(
            store,
            format!("{ours}.attn_ln.gamma"),
            &format!("{theirs}.attention.output.LayerNorm.weight"),
            (1, h),
            false,
            tensors,
        )?;
        let attn_beta = add(
            store,
            format!("{ours}.attn_ln.beta"),
            &format!("{theirs}.attention.output.LayerNorm.bias"),
            (1, h),
            false,
            tensors,
        )?;
        let out_gamma = add(
            store,
            format!("{ours}.out_ln.gamma"),
            &format!("{theirs}.output.LayerNorm.weight"),
            (1, h),
            false,
            tensors,
        )?;
        let out_beta = add(
            store,
            format!("{ours}.out_ln.beta"),
            &format!("{theirs}.output.LayerNorm.bias"),
            (1, h),
            false,
            tensors,
        )?;
        layers.push(LayerParams {
            q_w,
            q_b,
            k_w,
            k_b,
            v_w,
            v_b,
            o_w,
            o_b,
            attn_gamma,
            attn_beta,
            ff1_w,
            ff1_b,
            ff2_w,
            ff2_b,
            out_gamma,
            out_beta,
        });
    }
    Ok(TransformerParams {
        token_emb,
        pos_emb,
        type_emb: Some(type_emb),
        emb_gamma,
        emb_beta,
        layers,
    })
}

impl Encoder for BertEncoder {
    fn hidden_width(&self) -> usize {
        self.cfg.width
    }

    fn max_len(&self) -> usize {
        self.cfg.max_len
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.vocab
    }

    fn encode_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ctx: &ProceduralContext,
    ) -> Result<Var, EncoderFailure> {
        if ctx.len() > self.cfg.max_len {
            return Err(EncoderFailure::OverLength {
                len: ctx.len(),
                max: self.cfg.max_len,
            });
        }
        let ids: Vec<usize> = ctx.tokens.iter().map(|t| self.vocab.id(t)).collect();
        // Segment 0 through the first [SEP], segment 1 after it.
        let boundary = ctx.query_range.end + 1;
        let type_ids: Vec<usize> = (0..ids.len()).map(|i| usize::from(i >= boundary)).collect();
        Ok(self
            .params
            .forward(tape, store, &self.cfg, &ids, Some(&type_ids)))
    }
}
