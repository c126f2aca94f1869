//! Transformer encoder forward pass shared by both backends.
//!
//! Post-layer-norm residual blocks (norm after each residual add), GELU
//! feed-forward, learned absolute position embeddings, optional token-type
//! embeddings. The pretrained backend loads its tensors into this exact
//! parameter layout; the tiny backend initializes the same layout randomly.

use protrace_autodiff::params::{normal, ones, xavier_uniform, zeros};
use protrace_autodiff::{ParamError, ParamId, ParamStore, Tape, Var};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub max_len: usize,
    pub ln_eps: f64,
    /// Register a 2-row token-type table (query vs. context segment).
    pub token_types: bool,
}

impl TransformerConfig {
    pub fn head_dim(&self) -> usize {
        assert!(
            self.width % self.heads == 0,
            "width {} not divisible by {} heads",
            self.width,
            self.heads
        );
        self.width / self.heads
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerParams {
    pub q_w: ParamId,
    pub q_b: ParamId,
    pub k_w: ParamId,
    pub k_b: ParamId,
    pub v_w: ParamId,
    pub v_b: ParamId,
    pub o_w: ParamId,
    pub o_b: ParamId,
    pub attn_gamma: ParamId,
    pub attn_beta: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
    pub out_gamma: ParamId,
    pub out_beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct TransformerParams {
    pub token_emb: ParamId,
    pub pos_emb: ParamId,
    pub type_emb: Option<ParamId>,
    pub emb_gamma: ParamId,
    pub emb_beta: ParamId,
    pub layers: Vec<LayerParams>,
}

impl TransformerParams {
    /// Register freshly initialized parameters under `prefix`.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &TransformerConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ParamError> {
        let h = cfg.width;
        let token_emb = store.add(
            format!("{prefix}.token_emb.weight"),
            normal(cfg.vocab_size, h, 0.02, rng),
        )?;
        let pos_emb = store.add(
            format!("{prefix}.pos_emb.weight"),
            normal(cfg.max_len, h, 0.02, rng),
        )?;
        let type_emb = if cfg.token_types {
            Some(store.add(format!("{prefix}.type_emb.weight"), normal(2, h, 0.02, rng))?)
        } else {
            None
        };
        let emb_gamma = store.add(format!("{prefix}.emb_ln.gamma"), ones(1, h))?;
        let emb_beta = store.add(format!("{prefix}.emb_ln.beta"), zeros(1, h))?;

        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let p = format!("{prefix}.layer{i}");
            let lin = |name: &str, rows: usize, cols: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng| {
                Ok::<(ParamId, ParamId), ParamError>((
                    store.add(format!("{p}.{name}.weight"), xavier_uniform(rows, cols, rng))?,
                    store.add(format!("{p}.{name}.bias"), zeros(1, cols))?,
                ))
            };
            let (q_w, q_b) = lin("attn.q", h, h, store, rng)?;
            let (k_w, k_b) = lin("attn.k", h, h, store, rng)?;
            let (v_w, v_b) = lin("attn.v", h, h, store, rng)?;
            let (o_w, o_b) = lin("attn.o", h, h, store, rng)?;
            let (ff1_w, ff1_b) = lin("ff1", h, cfg.ff_width, store, rng)?;
            let (ff2_w, ff2_b) = lin("ff2", cfg.ff_width, h, store, rng)?;
            layers.push(LayerParams {
                q_w,
                q_b,
                k_w,
                k_b,
                v_w,
                v_b,
                o_w,
                o_b,
                attn_gamma: store.add(format!("{p}.attn_ln.gamma"), ones(1, h))?,
                attn_beta: store.add(format!("{p}.attn_ln.beta"), zeros(1, h))?,
                ff1_w,
                ff1_b,
                ff2_w,
                ff2_b,
                out_gamma: store.add(format!("{p}.out_ln.gamma"), ones(1, h))?,
                out_beta: store.add(format!("{p}.out_ln.beta"), zeros(1, h))?,
            });
        }
        Ok(Self {
            token_emb,
            pos_emb,
            type_emb,
            emb_gamma,
            emb_beta,
            layers,
        })
    }

    /// Record the forward pass for one token sequence; returns `[L, width]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cfg: &TransformerConfig,
        ids: &[usize],
        type_ids: Option<&[usize]>,
    ) -> Var {
        let len = ids.len();
        assert!(len > 0 && len <= cfg.max_len, "sequence length {len}");
        let tok_table = tape.param(store, self.token_emb);
        let pos_table = tape.param(store, self.pos_emb);
        let mut x = tape.gather_rows(tok_table, ids);
        let positions: Vec<usize> = (0..len).collect();
        let pos = tape.gather_rows(pos_table, &positions);
        x = tape.add(x, pos);
        if let (Some(table), Some(types)) = (self.type_emb, type_ids) {
            assert_eq!(types.len(), len, "type ids per token");
            let type_table = tape.param(store, table);
            let ty = tape.gather_rows(type_table, types);
            x = tape.add(x, ty);
        }
        let eg = tape.param(store, self.emb_gamma);
        let eb = tape.param(store, self.emb_beta);
        x = tape.layer_norm(x, eg, eb, cfg.ln_eps);

        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        for layer in &self.layers {
            let affine = |tape: &mut Tape, input: Var, w: ParamId, b: ParamId| {
                let wv = tape.param(store, w);
                let bv = tape.param(store, b);
                let xw = tape.matmul(input, wv);
                tape.add_row(xw, bv)
            };
            let q = affine(tape, x, layer.q_w, layer.q_b);
            let k = affine(tape, x, layer.k_w, layer.k_b);
            let v = affine(tape, x, layer.v_w, layer.v_b);

            let mut heads = Vec::with_capacity(cfg.heads);
            for hi in 0..cfg.heads {
                let (a, b) = (hi * dh, (hi + 1) * dh);
                let qh = tape.slice_cols(q, a, b);
                let kh = tape.slice_cols(k, a, b);
                let vh = tape.slice_cols(v, a, b);
                let kt = tape.transpose(kh);
                let scores = tape.matmul(qh, kt);
                let scaled = tape.scale(scores, scale);
                let attn = tape.softmax_rows(scaled);
                heads.push(tape.matmul(attn, vh));
            }
            let mut ctx = heads[0];
            for &h in &heads[1..] {
                ctx = tape.concat_cols(ctx, h);
            }
            let att_out = affine(tape, ctx, layer.o_w, layer.o_b);
            let res = tape.add(x, att_out);
            let ag = tape.param(store, layer.attn_gamma);
            let ab = tape.param(store, layer.attn_beta);
            x = tape.layer_norm(res, ag, ab, cfg.ln_eps);

            let ff_in = affine(tape, x, layer.ff1_w, layer.ff1_b);
            let ff_act = tape.gelu(ff_in);
            let ff_out = affine(tape, ff_act, layer.ff2_w, layer.ff2_b);
            let res2 = tape.add(x, ff_out);
            let og = tape.param(store, layer.out_gamma);
            let ob = tape.param(store, layer.out_beta);
            x = tape.layer_norm(res2, og, ob, cfg.ln_eps);
        }
        x
    }
}
