//! Small layer builders: linear maps and LSTM sequence drivers.
//!
//! Each builder registers its parameters once in a [`ParamStore`] and then
//! records the layer's math onto a [`Tape`] per forward pass.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::params::{xavier_uniform, zeros, ParamError, ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Affine map `x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ParamError> {
        let weight = store.add(format!("{prefix}.weight"), xavier_uniform(input, output, rng))?;
        let bias = store.add(format!("{prefix}.bias"), zeros(1, output))?;
        Ok(Self {
            weight,
            bias,
            input,
            output,
        })
    }

    /// Apply to `[n, input]`, yielding `[n, output]`.
    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }
}

/// Single-direction LSTM. Gate blocks are laid out `[i, f, g, o]` along the
/// columns of the packed weight matrices; the forget-gate bias starts at 1.
#[derive(Debug, Clone, Copy)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ParamError> {
        let w_ih = store.add(
            format!("{prefix}.w_ih"),
            xavier_uniform(input, 4 * hidden, rng),
        )?;
        let w_hh = store.add(
            format!("{prefix}.w_hh"),
            xavier_uniform(hidden, 4 * hidden, rng),
        )?;
        let mut b = zeros(1, 4 * hidden);
        b.slice_mut(ndarray::s![0, hidden..2 * hidden]).fill(1.0);
        let bias = store.add(format!("{prefix}.bias"), b)?;
        Ok(Self {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        })
    }

    /// Run over `[1, input]` step vectors, returning one `[1, hidden]` state
    /// per step.
    pub fn run(&self, tape: &mut Tape, store: &ParamStore, xs: &[Var]) -> Vec<Var> {
        let w_ih = tape.param(store, self.w_ih);
        let w_hh = tape.param(store, self.w_hh);
        let bias = tape.param(store, self.bias);
        let h = self.hidden;
        let mut state_h = tape.constant(Array2::zeros((1, h)));
        let mut state_c = tape.constant(Array2::zeros((1, h)));
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            let zx = tape.matmul(x, w_ih);
            let zh = tape.matmul(state_h, w_hh);
            let z = tape.add(zx, zh);
            let z = tape.add_row(z, bias);
            let gi = tape.slice_cols(z, 0, h);
            let gf = tape.slice_cols(z, h, 2 * h);
            let gg = tape.slice_cols(z, 2 * h, 3 * h);
            let go = tape.slice_cols(z, 3 * h, 4 * h);
            let i = tape.sigmoid(gi);
            let f = tape.sigmoid(gf);
            let g = tape.tanh(gg);
            let o = tape.sigmoid(go);
            let fc = tape.mul(f, state_c);
            let ig = tape.mul(i, g);
            state_c = tape.add(fc, ig);
            let tc = tape.tanh(state_c);
            state_h = tape.mul(o, tc);
            out.push(state_h);
        }
        out
    }
}

/// Bidirectional LSTM; step outputs are `[1, 2*hidden]` (forward ++ backward).
#[derive(Debug, Clone, Copy)]
pub struct BiLstm {
    pub forward: Lstm,
    pub backward: Lstm,
}

impl BiLstm {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ParamError> {
        Ok(Self {
            forward: Lstm::register(store, &format!("{prefix}.fwd"), input, hidden, rng)?,
            backward: Lstm::register(store, &format!("{prefix}.bwd"), input, hidden, rng)?,
        })
    }

    pub fn run(&self, tape: &mut Tape, store: &ParamStore, xs: &[Var]) -> Vec<Var> {
        let fwd = self.forward.run(tape, store, xs);
        let rev_in: Vec<Var> = xs.iter().rev().copied().collect();
        let mut bwd = self.backward.run(tape, store, &rev_in);
        bwd.reverse();
        fwd.into_iter()
            .zip(bwd)
            .map(|(f, b)| tape.concat_cols(f, b))
            .collect()
    }
}
