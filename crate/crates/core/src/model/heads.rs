//! Prediction heads over encoder outputs.
//!
//! Each step-`k` context yields two attribute readings from the same
//! encoding: where the entity is after sentence `k` (CURR) and where it was
//! before (PREV). Every head shares one nonlinearity `g` per input width (a
//! same-width linear map plus tanh); the per-head linear readouts are
//! untied between PREV and CURR. Transition classification consumes the
//! whole step sequence at once through an optional bidirectional recurrent
//! layer.

use ndarray::{Array1, Array2};
use protrace_autodiff::nn::{BiLstm, Linear, Lstm};
use protrace_autodiff::{ParamError, ParamStore, Tape, Var};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::encoding::ProceduralContext;

/// Attribute class ids, fixed everywhere: 0 = does not exist, 1 = exists
/// at an unknown place, 2 = exists at a text span.
pub const CLASS_NOWHERE: usize = 0;
pub const CLASS_UNKNOWN: usize = 1;
pub const CLASS_SPAN: usize = 2;
pub const NUM_CLASSES: usize = 3;

/// Transition class ids follow [`crate::formalism::Action::ALL`] order:
/// CREATE, MOVE, DESTROY, NONE.
pub const NUM_ACTIONS: usize = 4;

/// Which time step a head answers for, given the step-`k` context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepTag {
    /// State after sentence `k-1`.
    Prev,
    /// State after sentence `k`.
    Curr,
}

impl StepTag {
    pub const BOTH: [StepTag; 2] = [StepTag::Prev, StepTag::Curr];

    fn idx(self) -> usize {
        match self {
            StepTag::Prev => 0,
            StepTag::Curr => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StepTag::Prev => "prev",
            StepTag::Curr => "curr",
        }
    }
}

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("context class-token positions exceed sequence length {len}")]
    MaskMismatch { len: usize },
    #[error("transition head needs at least one step")]
    EmptySequence,
    #[error("non-finite values in {what}")]
    ModelNumericsError { what: &'static str },
}

/// Tape nodes for one attribute reading.
#[derive(Debug, Clone, Copy)]
pub struct AttrVars {
    pub tag: StepTag,
    /// `[1, 3]` logits; absent when class prediction is ablated.
    pub class_logits: Option<Var>,
    /// `[1, 3]` probabilities (uniform constant under the ablation).
    pub p_class: Var,
    /// `[1, L]` each.
    pub start_logits: Var,
    pub end_logits: Var,
    pub p_start: Var,
    pub p_end: Var,
    /// Per-token span weight: normalized `p_start * p_end`.
    pub p_span: Var,
}

/// Plain-array view of [`AttrVars`] for inference and reporting.
#[derive(Debug, Clone)]
pub struct AttributeDistribution {
    pub tag: StepTag,
    pub p_class: [f64; NUM_CLASSES],
    pub p_start: Array1<f64>,
    pub p_end: Array1<f64>,
    pub p_span: Array1<f64>,
}

impl AttributeDistribution {
    pub fn from_vars(tape: &Tape, vars: &AttrVars) -> Result<Self, HeadError> {
        let p_class_row = tape.value(vars.p_class);
        let p_class = [
            p_class_row[[0, CLASS_NOWHERE]],
            p_class_row[[0, CLASS_UNKNOWN]],
            p_class_row[[0, CLASS_SPAN]],
        ];
        let row = |v: Var| tape.value(v).row(0).to_owned();
        let out = Self {
            tag: vars.tag,
            p_class,
            p_start: row(vars.p_start),
            p_end: row(vars.p_end),
            p_span: row(vars.p_span),
        };
        let finite = out.p_class.iter().all(|v| v.is_finite())
            && out.p_start.iter().all(|v| v.is_finite())
            && out.p_end.iter().all(|v| v.is_finite());
        if !finite {
            return Err(HeadError::ModelNumericsError {
                what: "attribute distribution",
            });
        }
        Ok(out)
    }
}

/// Head hyperparameters; widths follow the encoder at construction.
#[derive(Debug, Clone)]
pub struct HeadConfig {
    /// Recurrent width of the class-path sequential layer.
    pub class_seq_hidden: usize,
    /// Recurrent width per direction of the transition layer.
    pub trans_hidden: usize,
    /// Feed attribute-aware vectors to the transition head.
    pub attr_aware: bool,
    /// Run the recurrent layer in the transition head.
    pub seq_transition: bool,
    /// Run the sequential layer feeding class prediction.
    pub seq_class: bool,
    /// Predict attribute classes at all (off: spans only, uniform class
    /// weights inside the attribute-aware sum).
    pub class_prediction: bool,
    /// Include the transition head.
    pub transition_prediction: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            class_seq_hidden: 1000,
            trans_hidden: 200,
            attr_aware: true,
            seq_transition: true,
            seq_class: true,
            class_prediction: true,
            transition_prediction: true,
        }
    }
}

struct ClassPath {
    /// Sequential layer over per-step pooled vectors, shared by both tags.
    lstm: Option<Lstm>,
    g: Linear,
    readout: [Linear; 2],
}

/// Transition classifier over the step axis: optional bidirectional
/// recurrence, then per-step 4-way logits. Reused by every model variant.
pub struct TransitionHead {
    bilstm: Option<BiLstm>,
    g: Linear,
    readout: Linear,
    /// Width of the per-step attribute pair, if the head consumes one.
    pair_width: Option<usize>,
}

impl TransitionHead {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        pair_width: Option<usize>,
        hidden: usize,
        sequential: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ParamError> {
        let step_in = width + pair_width.unwrap_or(0);
        let (bilstm, logits_in) = if sequential {
            (
                Some(BiLstm::register(
                    store,
                    &format!("{prefix}.seq"),
                    step_in,
                    hidden,
                    rng,
                )?),
                width + 2 * hidden,
            )
        } else {
            (None, step_in)
        };
        let g = Linear::register(store, &format!("{prefix}.g"), logits_in, logits_in, rng)?;
        let readout = Linear::register(store, &format!("{prefix}.out"), logits_in, NUM_ACTIONS, rng)?;
        Ok(Self {
            bilstm,
            g,
            readout,
            pair_width,
        })
    }

    /// Per-step transition logits `[1, 4]` over the whole process.
    ///
    /// `pooled[k]` is the step-`k` [CLS] vector; `attr_pairs[k]` the paired
    /// attribute vector (required iff the head was registered with one).
    pub fn predict(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pooled: &[Var],
        attr_pairs: Option<&[Var]>,
    ) -> Result<Vec<Var>, HeadError> {
        if pooled.is_empty() {
            return Err(HeadError::EmptySequence);
        }
        let step_inputs: Vec<Var> = match (self.pair_width, attr_pairs) {
            (Some(_), Some(pairs)) => {
                assert_eq!(pairs.len(), pooled.len(), "one attribute pair per step");
                pooled
                    .iter()
                    .zip(pairs)
                    .map(|(&p, &a)| tape.concat_cols(p, a))
                    .collect()
            }
            (None, _) => pooled.to_vec(),
            (Some(_), None) => panic!("attribute-aware head needs attribute pairs"),
        };

        let logit_inputs: Vec<Var> = match &self.bilstm {
            Some(bilstm) => {
                let seq = bilstm.run(tape, store, &step_inputs);
                pooled
                    .iter()
                    .zip(seq)
                    .map(|(&p, s)| tape.concat_cols(p, s))
                    .collect()
            }
            None => step_inputs,
        };

        Ok(logit_inputs
            .into_iter()
            .map(|x| {
                let gx = Heads::g(&self.g, tape, store, x);
                self.readout.apply(tape, store, gx)
            })
            .collect())
    }
}

/// All head parameters, registered once in a shared store.
pub struct Heads {
    width: usize,
    cfg: HeadConfig,
    /// Shared `g` at encoder width: token start/end paths, and the class
    /// path when the sequential layer is off.
    g_tok: Linear,
    start: [Linear; 2],
    end: [Linear; 2],
    class: Option<ClassPath>,
    transition: Option<TransitionHead>,
}

impl Heads {
    pub fn register(
        store: &mut ParamStore,
        width: usize,
        cfg: HeadConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ParamError> {
        let g_tok = Linear::register(store, "heads.g_tok", width, width, rng)?;
        let per_tag = |what: &str, input: usize, output: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng| {
            Ok::<[Linear; 2], ParamError>([
                Linear::register(store, &format!("heads.{what}.prev"), input, output, rng)?,
                Linear::register(store, &format!("heads.{what}.curr"), input, output, rng)?,
            ])
        };
        let start = per_tag("start", width, 1, store, rng)?;
        let end = per_tag("end", width, 1, store, rng)?;

        let class = if cfg.class_prediction {
            let (lstm, class_in) = if cfg.seq_class {
                (
                    Some(Lstm::register(
                        store,
                        "heads.class_seq",
                        width,
                        cfg.class_seq_hidden,
                        rng,
                    )?),
                    cfg.class_seq_hidden,
                )
            } else {
                (None, width)
            };
            let g = if cfg.seq_class {
                Linear::register(store, "heads.g_class", class_in, class_in, rng)?
            } else {
                g_tok
            };
            let readout = per_tag("class", class_in, NUM_CLASSES, store, rng)?;
            Some(ClassPath { lstm, g, readout })
        } else {
            None
        };

        let transition = if cfg.transition_prediction {
            let pair_width = cfg.attr_aware.then_some(2 * width);
            Some(TransitionHead::register(
                store,
                "heads.transition",
                width,
                pair_width,
                cfg.trans_hidden,
                cfg.seq_transition,
                rng,
            )?)
        } else {
            None
        };

        Ok(Self {
            width,
            cfg,
            g_tok,
            start,
            end,
            class,
            transition,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.cfg
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn g(lin: &Linear, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let a = lin.apply(tape, store, x);
        tape.tanh(a)
    }

    /// Class-path inputs for every step: with the sequential layer, the
    /// recurrent states over pooled step vectors; without it, the pooled
    /// vectors themselves.
    pub fn class_inputs(&self, tape: &mut Tape, store: &ParamStore, pooled: &[Var]) -> Vec<Var> {
        match self.class.as_ref().and_then(|c| c.lstm.as_ref()) {
            Some(lstm) => lstm.run(tape, store, pooled),
            None => pooled.to_vec(),
        }
    }

    /// One attribute reading: class logits from the step's class input,
    /// start/end logits per token, all softmaxed on the tape.
    pub fn predict_attribute(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        r_tokens: Var,
        class_input: Var,
        tag: StepTag,
    ) -> AttrVars {
        let i = tag.idx();
        let g_tokens = Self::g(&self.g_tok, tape, store, r_tokens);
        let start_col = self.start[i].apply(tape, store, g_tokens);
        let start_logits = tape.transpose(start_col);
        let end_col = self.end[i].apply(tape, store, g_tokens);
        let end_logits = tape.transpose(end_col);
        let p_start = tape.softmax_rows(start_logits);
        let p_end = tape.softmax_rows(end_logits);
        let raw_span = tape.mul(p_start, p_end);
        let p_span = tape.normalize_row(raw_span);

        let (class_logits, p_class) = match &self.class {
            Some(path) => {
                let g_in = Self::g(&path.g, tape, store, class_input);
                let logits = path.readout[i].apply(tape, store, g_in);
                let p = tape.softmax_rows(logits);
                (Some(logits), p)
            }
            None => {
                let uniform = Array2::from_elem((1, NUM_CLASSES), 1.0 / NUM_CLASSES as f64);
                (None, tape.constant(uniform))
            }
        };

        AttrVars {
            tag,
            class_logits,
            p_class,
            start_logits,
            end_logits,
            p_start,
            p_end,
            p_span,
        }
    }

    /// Attribute-aware vector: every token's encoding weighted by its span
    /// probability and by how much its role (reserved class token vs.
    /// sentence token) matters under `p_class`.
    pub fn attribute_aware_repr(
        &self,
        tape: &mut Tape,
        r_tokens: Var,
        dist: &AttrVars,
        ctx: &ProceduralContext,
    ) -> Result<Var, HeadError> {
        let (len, _) = tape.shape(r_tokens);
        if ctx.nowhere_pos >= len || ctx.unknown_pos >= len {
            return Err(HeadError::MaskMismatch { len });
        }
        let mut mask = Array2::zeros((NUM_CLASSES, len));
        mask[[CLASS_NOWHERE, ctx.nowhere_pos]] = 1.0;
        mask[[CLASS_UNKNOWN, ctx.unknown_pos]] = 1.0;
        for (_, range) in &ctx.sentence_ranges {
            for t in range.clone() {
                mask[[CLASS_SPAN, t]] = 1.0;
            }
        }
        let mask = tape.constant(mask);
        let class_weight = tape.matmul(dist.p_class, mask);
        let token_weight = tape.mul(dist.p_span, class_weight);
        Ok(tape.matmul(token_weight, r_tokens))
    }

    /// Paired attribute-aware vector `[R_a(curr) ++ R_a(prev)]`, `[1, 2H]`.
    pub fn attribute_aware_pair(
        &self,
        tape: &mut Tape,
        r_tokens: Var,
        curr: &AttrVars,
        prev: &AttrVars,
        ctx: &ProceduralContext,
    ) -> Result<Var, HeadError> {
        let ra_curr = self.attribute_aware_repr(tape, r_tokens, curr, ctx)?;
        let ra_prev = self.attribute_aware_repr(tape, r_tokens, prev, ctx)?;
        Ok(tape.concat_cols(ra_curr, ra_prev))
    }

    /// Per-step transition logits via the registered [`TransitionHead`].
    pub fn predict_transitions(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pooled: &[Var],
        attr_pairs: Option<&[Var]>,
    ) -> Result<Vec<Var>, HeadError> {
        let path = self
            .transition
            .as_ref()
            .expect("transition head disabled by configuration");
        path.predict(tape, store, pooled, attr_pairs)
    }

    pub fn has_transition_head(&self) -> bool {
        self.transition.is_some()
    }

    pub fn has_class_head(&self) -> bool {
        self.class.is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::parse_propara;
    use crate::encoding::{build_context, Tokenizer};
    use ndarray::array;
    use protrace_autodiff::params::xavier_uniform;
    use rand::SeedableRng;

    struct Identity;
    impl Tokenizer for Identity {
        fn subtokens(&self, word: &str) -> Vec<String> {
            vec![word.to_lowercase()]
        }
    }

    fn toy_ctx() -> ProceduralContext {
        let text = "1\tsentence\t1\tWater falls down.\n1\tentity\twater\t?\t?\n";
        let doc = parse_propara(text, "t").unwrap().remove(0);
        build_context(&doc, &doc.entities[0], 1, &Identity, 64).unwrap()
    }

    fn heads(width: usize, cfg: HeadConfig) -> (ParamStore, Heads) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = Heads::register(&mut store, width, cfg, &mut rng).unwrap();
        (store, h)
    }

    fn small_cfg() -> HeadConfig {
        HeadConfig {
            class_seq_hidden: 6,
            trans_hidden: 5,
            ..HeadConfig::default()
        }
    }

    #[test]
    fn zero_weights_give_uniform_distributions() {
        let ctx = toy_ctx();
        let (mut store, h) = heads(4, small_cfg());
        // Zero every head parameter; leave nothing to chance.
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            store.value_mut(id).fill(0.0);
        }
        let mut tape = Tape::new();
        let r = tape.constant(xavier_uniform(
            ctx.len(),
            4,
            &mut ChaCha8Rng::seed_from_u64(2),
        ));
        let pooled = tape.row(r, 0);
        let class_in = h.class_inputs(&mut tape, &store, &[pooled]);
        let dist = h.predict_attribute(&mut tape, &store, r, class_in[0], StepTag::Curr);
        let d = AttributeDistribution::from_vars(&tape, &dist).unwrap();
        for p in d.p_class {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        for p in d.p_start.iter() {
            assert!((p - 1.0 / ctx.len() as f64).abs() < 1e-12);
        }

        let pair = h
            .attribute_aware_pair(&mut tape, r, &dist, &dist, &ctx)
            .unwrap();
        let logits = h
            .predict_transitions(&mut tape, &store, &[pooled], Some(&[pair]))
            .unwrap();
        let p = tape.softmax_rows(logits[0]);
        for j in 0..NUM_ACTIONS {
            assert!((tape.value(p)[[0, j]] - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn distributions_are_normalized() {
        let ctx = toy_ctx();
        let (store, h) = heads(8, small_cfg());
        let mut tape = Tape::new();
        let r = tape.constant(xavier_uniform(
            ctx.len(),
            8,
            &mut ChaCha8Rng::seed_from_u64(3),
        ));
        let pooled = tape.row(r, 0);
        let class_in = h.class_inputs(&mut tape, &store, &[pooled]);
        for tag in StepTag::BOTH {
            let dist = h.predict_attribute(&mut tape, &store, r, class_in[0], tag);
            let d = AttributeDistribution::from_vars(&tape, &dist).unwrap();
            assert!((d.p_class.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            assert!((d.p_start.sum() - 1.0).abs() < 1e-5);
            assert!((d.p_end.sum() - 1.0).abs() < 1e-5);
            assert!((d.p_span.sum() - 1.0).abs() < 1e-5);
            assert!(d.p_start.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn softmax_of_hand_set_logits() {
        // start logits [2, 0], end logits [0, 2] over a 2-token axis.
        let mut tape = Tape::new();
        let start = tape.constant(array![[2.0, 0.0]]);
        let end = tape.constant(array![[0.0, 2.0]]);
        let ps = tape.softmax_rows(start);
        let pe = tape.softmax_rows(end);
        assert!((tape.value(ps)[[0, 0]] - 0.8807970779778823).abs() < 1e-12);
        assert!((tape.value(ps)[[0, 1]] - 0.1192029220221177).abs() < 1e-12);
        assert!((tape.value(pe)[[0, 0]] - 0.1192029220221177).abs() < 1e-12);
        assert!((tape.value(pe)[[0, 1]] - 0.8807970779778823).abs() < 1e-12);
    }

    /// Brute-force evaluation of the attribute-aware sum, written
    /// independently of the tape implementation.
    fn brute_force_attr_aware(
        r: &Array2<f64>,
        p_class: &[f64; 3],
        p_span: &[f64],
        ctx: &ProceduralContext,
    ) -> Vec<f64> {
        let h = r.ncols();
        let mut out = vec![0.0; h];
        for w in 0..r.nrows() {
            let mut class_weight = 0.0;
            if w == ctx.nowhere_pos {
                class_weight += p_class[CLASS_NOWHERE];
            }
            if w == ctx.unknown_pos {
                class_weight += p_class[CLASS_UNKNOWN];
            }
            if ctx.sentence_region().contains(&w) {
                class_weight += p_class[CLASS_SPAN];
            }
            for j in 0..h {
                out[j] += p_span[w] * class_weight * r[[w, j]];
            }
        }
        out
    }

    #[test]
    fn attribute_aware_matches_brute_force() {
        let ctx = toy_ctx();
        let (store, h) = heads(8, small_cfg());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r_arr = xavier_uniform(ctx.len(), 8, &mut rng);
        let mut tape = Tape::new();
        let r = tape.constant(r_arr.clone());
        let pooled = tape.row(r, 0);
        let class_in = h.class_inputs(&mut tape, &store, &[pooled]);
        let dist = h.predict_attribute(&mut tape, &store, r, class_in[0], StepTag::Prev);
        let ra = h.attribute_aware_repr(&mut tape, r, &dist, &ctx).unwrap();

        let d = AttributeDistribution::from_vars(&tape, &dist).unwrap();
        let expect = brute_force_attr_aware(
            &r_arr,
            &d.p_class,
            d.p_span.as_slice().unwrap(),
            &ctx,
        );
        let got = tape.value(ra);
        for j in 0..8 {
            assert!(
                (got[[0, j]] - expect[j]).abs() < 1e-12,
                "component {j}: {} vs {}",
                got[[0, j]],
                expect[j]
            );
        }
    }

    #[test]
    fn one_hot_class_isolates_reserved_token() {
        let ctx = toy_ctx();
        let (store, h) = heads(4, small_cfg());
        let mut tape = Tape::new();
        let r_arr = xavier_uniform(ctx.len(), 4, &mut ChaCha8Rng::seed_from_u64(4));
        let r = tape.constant(r_arr.clone());
        let pooled = tape.row(r, 0);
        let class_in = h.class_inputs(&mut tape, &store, &[pooled]);
        let mut dist = h.predict_attribute(&mut tape, &store, r, class_in[0], StepTag::Curr);
        // Pure NOWHERE class.
        dist.p_class = tape.constant(array![[1.0, 0.0, 0.0]]);
        let ra = h.attribute_aware_repr(&mut tape, r, &dist, &ctx).unwrap();
        let d = AttributeDistribution::from_vars(&tape, &dist).unwrap();
        let want: Vec<f64> = r_arr
            .row(ctx.nowhere_pos)
            .iter()
            .map(|v| v * d.p_span[ctx.nowhere_pos])
            .collect();
        for j in 0..4 {
            assert!((tape.value(ra)[[0, j]] - want[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_span_on_span_class_returns_token_vector() {
        let ctx = toy_ctx();
        let (store, h) = heads(4, small_cfg());
        let mut tape = Tape::new();
        let r_arr = xavier_uniform(ctx.len(), 4, &mut ChaCha8Rng::seed_from_u64(6));
        let r = tape.constant(r_arr.clone());
        let pooled = tape.row(r, 0);
        let class_in = h.class_inputs(&mut tape, &store, &[pooled]);
        let mut dist = h.predict_attribute(&mut tape, &store, r, class_in[0], StepTag::Curr);
        dist.p_class = tape.constant(array![[0.0, 0.0, 1.0]]);
        let j = ctx.sentence_region().start + 1;
        let mut delta = Array2::zeros((1, ctx.len()));
        delta[[0, j]] = 1.0;
        dist.p_span = tape.constant(delta);
        let ra = h.attribute_aware_repr(&mut tape, r, &dist, &ctx).unwrap();
        for c in 0..4 {
            assert!((tape.value(ra)[[0, c]] - r_arr[[j, c]]).abs() < 1e-12);
        }
    }

    #[test]
    fn transition_head_is_order_aware() {
        let (store, h) = heads(6, small_cfg());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let pooled: Vec<Var> = (0..3)
            .map(|_| tape.constant(xavier_uniform(1, 6, &mut rng)))
            .collect();
        let pairs: Vec<Var> = (0..3)
            .map(|_| tape.constant(xavier_uniform(1, 12, &mut rng)))
            .collect();
        let fwd = h
            .predict_transitions(&mut tape, &store, &pooled, Some(&pairs))
            .unwrap();
        let rev_pooled: Vec<Var> = pooled.iter().rev().copied().collect();
        let rev_pairs: Vec<Var> = pairs.iter().rev().copied().collect();
        let bwd = h
            .predict_transitions(&mut tape, &store, &rev_pooled, Some(&rev_pairs))
            .unwrap();
        // Step 0 forward vs. step T-1 backward see the same inputs in
        // reversed order; a recurrent layer must distinguish them.
        let a = tape.value(fwd[0]).to_owned();
        let b = tape.value(bwd[2]).to_owned();
        assert_ne!(a, b);
    }

    #[test]
    fn single_step_sequence_is_valid() {
        let (store, h) = heads(6, small_cfg());
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut tape = Tape::new();
        let pooled = vec![tape.constant(xavier_uniform(1, 6, &mut rng))];
        let pairs = vec![tape.constant(xavier_uniform(1, 12, &mut rng))];
        let logits = h
            .predict_transitions(&mut tape, &store, &pooled, Some(&pairs))
            .unwrap();
        assert_eq!(logits.len(), 1);
        let p = tape.softmax_rows(logits[0]);
        assert!((tape.value(p).sum() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let (store, h) = heads(6, small_cfg());
        let mut tape = Tape::new();
        assert!(matches!(
            h.predict_transitions(&mut tape, &store, &[], Some(&[])),
            Err(HeadError::EmptySequence)
        ));
    }

    #[test]
    fn prev_and_curr_heads_are_independent() {
        let ctx = toy_ctx();
        let cfg = small_cfg();
        let (mut store, h) = heads(8, cfg);
        let r_arr = xavier_uniform(ctx.len(), 8, &mut ChaCha8Rng::seed_from_u64(14));

        let run_curr = |store: &ParamStore| {
            let mut tape = Tape::new();
            let r = tape.constant(r_arr.clone());
            let pooled = tape.row(r, 0);
            let class_in = h.class_inputs(&mut tape, store, &[pooled]);
            let dist = h.predict_attribute(&mut tape, store, r, class_in[0], StepTag::Curr);
            let d = AttributeDistribution::from_vars(&tape, &dist).unwrap();
            (d.p_class, d.p_start)
        };
        let before = run_curr(&store);
        // Zero every PREV readout.
        for name in ["heads.class.prev", "heads.start.prev", "heads.end.prev"] {
            for suffix in [".weight", ".bias"] {
                let id = store.id(&format!("{name}{suffix}")).unwrap();
                store.value_mut(id).fill(0.0);
            }
        }
        let after = run_curr(&store);
        assert_eq!(before.0, after.0);
        assert_eq!(before.1, after.1);
    }

    #[test]
    fn mask_mismatch_is_detected() {
        let ctx = toy_ctx();
        let (store, h) = heads(4, small_cfg());
        let mut tape = Tape::new();
        // Too few token vectors for the context's class positions.
        let r = tape.constant(xavier_uniform(2, 4, &mut ChaCha8Rng::seed_from_u64(1)));
        let pooled = tape.row(r, 0);
        let class_in = h.class_inputs(&mut tape, &store, &[pooled]);
        let dist = h.predict_attribute(&mut tape, &store, r, class_in[0], StepTag::Curr);
        assert!(matches!(
            h.attribute_aware_repr(&mut tape, r, &dist, &ctx),
            Err(HeadError::MaskMismatch { .. })
        ));
    }

    #[test]
    fn ablated_class_head_gives_uniform_weights() {
        let ctx = toy_ctx();
        let cfg = HeadConfig {
            class_prediction: false,
            ..small_cfg()
        };
        let (store, h) = heads(4, cfg);
        assert!(!h.has_class_head());
        let mut tape = Tape::new();
        let r = tape.constant(xavier_uniform(
            ctx.len(),
            4,
            &mut ChaCha8Rng::seed_from_u64(8),
        ));
        let pooled = tape.row(r, 0);
        let class_in = h.class_inputs(&mut tape, &store, &[pooled]);
        let dist = h.predict_attribute(&mut tape, &store, r, class_in[0], StepTag::Curr);
        assert!(dist.class_logits.is_none());
        let d = AttributeDistribution::from_vars(&tape, &dist).unwrap();
        for p in d.p_class {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn transition_without_recurrence_still_classifies() {
        let cfg = HeadConfig {
            seq_transition: false,
            ..small_cfg()
        };
        let (store, h) = heads(6, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut tape = Tape::new();
        let pooled: Vec<Var> = (0..2)
            .map(|_| tape.constant(xavier_uniform(1, 6, &mut rng)))
            .collect();
        let pairs: Vec<Var> = (0..2)
            .map(|_| tape.constant(xavier_uniform(1, 12, &mut rng)))
            .collect();
        let logits = h
            .predict_transitions(&mut tape, &store, &pooled, Some(&pairs))
            .unwrap();
        assert_eq!(logits.len(), 2);
        assert_eq!(tape.shape(logits[0]), (1, NUM_ACTIONS));
    }
}
