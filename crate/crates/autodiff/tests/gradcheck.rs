//! Central-difference verification of every tape op's backward pass.

use ndarray::{array, Array2};
use protrace_autodiff::fd::check_params;
use protrace_autodiff::nn::{BiLstm, Linear, Lstm};
use protrace_autodiff::params::xavier_uniform;
use protrace_autodiff::{ParamId, ParamStore, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-6;

/// Fixed pseudo-random probe so the scalar loss is sensitive to every
/// output element, not just their sum.
fn probe(tape: &mut Tape, rows: usize, cols: usize) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    tape.constant(xavier_uniform(rows, cols, &mut rng) + 0.5)
}

fn scalarize(tape: &mut Tape, out: Var) -> Var {
    let (r, c) = tape.shape(out);
    let p = probe(tape, r, c);
    let weighted = tape.mul(out, p);
    tape.sum_all(weighted)
}

/// Register params with the given shapes, build the loss with `f`, and
/// compare analytic gradients against central differences.
fn check(shapes: &[(usize, usize)], f: impl Fn(&mut Tape, &ParamStore, &[ParamId]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| {
            store
                .add(format!("p{i}"), xavier_uniform(r, c, &mut rng))
                .unwrap()
        })
        .collect();

    let mut tape = Tape::new();
    let loss = f(&mut tape, &store, &ids);
    assert_eq!(tape.shape(loss), (1, 1), "loss must be scalar");
    let grads = tape.backward(loss);

    let reports = check_params(&mut store, &ids, &grads, EPS, 0, |s| {
        let mut t = Tape::new();
        let l = f(&mut t, s, &ids);
        t.value(l)[[0, 0]]
    });
    for r in &reports {
        assert!(
            r.max_rel_err < TOL,
            "{}: rel err {} at {:?} (abs {})",
            r.name,
            r.max_rel_err,
            r.worst,
            r.max_abs_err
        );
    }
}

#[test]
fn matmul_grads() {
    check(&[(3, 4), (4, 5)], |t, s, ids| {
        let a = t.param(s, ids[0]);
        let b = t.param(s, ids[1]);
        let c = t.matmul(a, b);
        scalarize(t, c)
    });
}

#[test]
fn add_and_mul_grads() {
    check(&[(3, 4), (3, 4)], |t, s, ids| {
        let a = t.param(s, ids[0]);
        let b = t.param(s, ids[1]);
        let sum = t.add(a, b);
        let prod = t.mul(sum, b);
        scalarize(t, prod)
    });
}

#[test]
fn add_row_grads() {
    check(&[(4, 3), (1, 3)], |t, s, ids| {
        let a = t.param(s, ids[0]);
        let b = t.param(s, ids[1]);
        let out = t.add_row(a, b);
        scalarize(t, out)
    });
}

#[test]
fn mul_scalar_grads() {
    check(&[(3, 4), (1, 1)], |t, s, ids| {
        let a = t.param(s, ids[0]);
        let c = t.param(s, ids[1]);
        let out = t.mul_scalar(a, c);
        scalarize(t, out)
    });
}

#[test]
fn scale_sub_grads() {
    check(&[(2, 5), (2, 5)], |t, s, ids| {
        let a = t.param(s, ids[0]);
        let b = t.param(s, ids[1]);
        let half = t.scale(a, 0.5);
        let out = t.sub(half, b);
        scalarize(t, out)
    });
}

#[test]
fn recip_grads() {
    check(&[(2, 3)], |t, s, ids| {
        let a = t.param(s, ids[0]);
        // Shift away from zero so 1/x stays well-conditioned.
        let shifted = t.scale(a, 0.1);
        let two = t.constant(Array2::from_elem((2, 3), 2.0));
        let safe = t.add(shifted, two);
        let out = t.recip(safe);
        scalarize(t, out)
    });
}

#[test]
fn activation_grads() {
    check(&[(3, 4)], |t, s, ids| {
        let a = t.param(s, ids[0]);
        let th = t.tanh(a);
        let sg = t.sigmoid(th);
        let ge = t.gelu(sg);
        scalarize(t, ge)
    });
}

#[test]
fn softmax_rows_grads() {
    check(&[(3, 5)], |t, s, ids| {
        let a = t.param(s, ids[0]);
        let scaled = t.scale(a, 3.0);
        let sm = t.softmax_rows(scaled);
        scalarize(t, sm)
    });
}

#[test]
fn log_softmax_rows_grads() {
    check(&[(3, 5)], |t, s, ids| {
        let a = t.param(s, ids[0]);
        let scaled = t.scale(a, 3.0);
        let ls = t.log_softmax_rows(scaled);
        scalarize(t, ls)
    });
}

#[test]
fn nll_grads() {
    check(&[(2, 6)], |t, s, ids| {
        let a = t.param(s, ids[0]);
        let l0 = t.nll(a, 0, 2);
        let l1 = t.nll(a, 1, 5);
        t.add(l0, l1)
    });
}

#[test]
fn pick_and_mean_grads() {
    check(&[(3, 3)], |t, s, ids| {
        let a = t.param(s, ids[0]);
        let p = t.pick(a, 1, 2);
        let m = t.mean_all(a);
        let pm = t.mul(p, m);
        t.sum_all(pm)
    });
}

#[test]
fn concat_grads() {
    check(&[(2, 3), (2, 4), (1, 7)], |t, s, ids| {
        let a = t.param(s, ids[0]);
        let b = t.param(s, ids[1]);
        let c = t.param(s, ids[2]);
        let wide = t.concat_cols(a, b);
        let tall = t.concat_rows(&[wide, c]);
        scalarize(t, tall)
    });
}

#[test]
fn slice_grads() {
    check(&[(5, 6)], |t, s, ids| {
        let a = t.param(s, ids[0]);
        let rows = t.slice_rows(a, 1, 4);
        let cols = t.slice_cols(rows, 2, 5);
        scalarize(t, cols)
    });
}

#[test]
fn transpose_grads() {
    check(&[(3, 5), (3, 5)], |t, s, ids| {
        let a = t.param(s, ids[0]);
        let b = t.param(s, ids[1]);
        let at = t.transpose(a);
        let prod = t.matmul(at, b);
        scalarize(t, prod)
    });
}

#[test]
fn gather_rows_grads_with_repeats() {
    // Repeated indices exercise scatter-add accumulation.
    check(&[(4, 3)], |t, s, ids| {
        let table = t.param(s, ids[0]);
        let picked = t.gather_rows(table, &[2, 0, 2, 2, 1]);
        scalarize(t, picked)
    });
}

#[test]
fn layer_norm_grads() {
    check(&[(3, 6), (1, 6), (1, 6)], |t, s, ids| {
        let x = t.param(s, ids[0]);
        let gamma = t.param(s, ids[1]);
        let beta = t.param(s, ids[2]);
        let out = t.layer_norm(x, gamma, beta, 1e-5);
        scalarize(t, out)
    });
}

#[test]
fn normalize_row_grads() {
    check(&[(1, 5)], |t, s, ids| {
        let a = t.param(s, ids[0]);
        // Softmax first keeps the weights positive for normalization.
        let pos = t.softmax_rows(a);
        let sq = t.mul(pos, pos);
        let norm = t.normalize_row(sq);
        scalarize(t, norm)
    });
}

#[test]
fn shared_param_accumulates_uses() {
    // x used three times: x*x + x. Gradients must sum across uses.
    check(&[(2, 2)], |t, s, ids| {
        let x = t.param(s, ids[0]);
        let xx = t.mul(x, x);
        let out = t.add(xx, x);
        scalarize(t, out)
    });
}

#[test]
fn linear_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let lin = Linear::register(&mut store, "lin", 4, 3, &mut rng).unwrap();
    let x = xavier_uniform(2, 4, &mut rng);
    let ids = [lin.weight, lin.bias];

    let run = |t: &mut Tape, s: &ParamStore| {
        let xv = t.constant(x.clone());
        let out = lin.apply(t, s, xv);
        let act = t.tanh(out);
        scalarize(t, act)
    };
    let mut tape = Tape::new();
    let loss = run(&mut tape, &store);
    let grads = tape.backward(loss);
    let reports = check_params(&mut store, &ids, &grads, EPS, 0, |s| {
        let mut t = Tape::new();
        let l = run(&mut t, s);
        t.value(l)[[0, 0]]
    });
    for r in &reports {
        assert!(r.max_rel_err < TOL, "{}: {}", r.name, r.max_rel_err);
    }
}

#[test]
fn lstm_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let lstm = Lstm::register(&mut store, "lstm", 3, 4, &mut rng).unwrap();
    let xs: Vec<Array2<f64>> = (0..4).map(|_| xavier_uniform(1, 3, &mut rng)).collect();
    let ids = [lstm.w_ih, lstm.w_hh, lstm.bias];

    let run = |t: &mut Tape, s: &ParamStore| {
        let xv: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let hs = lstm.run(t, s, &xv);
        let all = t.concat_rows(&hs);
        scalarize(t, all)
    };
    let mut tape = Tape::new();
    let loss = run(&mut tape, &store);
    let grads = tape.backward(loss);
    let reports = check_params(&mut store, &ids, &grads, EPS, 0, |s| {
        let mut t = Tape::new();
        let l = run(&mut t, s);
        t.value(l)[[0, 0]]
    });
    for r in &reports {
        assert!(r.max_rel_err < TOL, "{}: {}", r.name, r.max_rel_err);
    }
}

#[test]
fn bilstm_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut store = ParamStore::new();
    let bi = BiLstm::register(&mut store, "bi", 3, 2, &mut rng).unwrap();
    let xs: Vec<Array2<f64>> = (0..3).map(|_| xavier_uniform(1, 3, &mut rng)).collect();
    let ids = [
        bi.forward.w_ih,
        bi.forward.w_hh,
        bi.forward.bias,
        bi.backward.w_ih,
        bi.backward.w_hh,
        bi.backward.bias,
    ];

    let run = |t: &mut Tape, s: &ParamStore| {
        let xv: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let hs = bi.run(t, s, &xv);
        let all = t.concat_rows(&hs);
        scalarize(t, all)
    };
    let mut tape = Tape::new();
    let loss = run(&mut tape, &store);
    let grads = tape.backward(loss);
    let reports = check_params(&mut store, &ids, &grads, EPS, 0, |s| {
        let mut t = Tape::new();
        let l = run(&mut t, s);
        t.value(l)[[0, 0]]
    });
    for r in &reports {
        assert!(r.max_rel_err < TOL, "{}: {}", r.name, r.max_rel_err);
    }
}

#[test]
fn softmax_matches_fixed_values() {
    let mut tape = Tape::new();
    let x = tape.constant(array![[2.0, 0.0]]);
    let sm = tape.softmax_rows(x);
    let v = tape.value(sm);
    assert!((v[[0, 0]] - 0.880_797_077_977_882_3).abs() < 1e-15);
    assert!((v[[0, 1]] - 0.119_202_922_022_117_7).abs() < 1e-15);
}

#[test]
fn log_softmax_agrees_with_softmax() {
    let mut tape = Tape::new();
    let x = tape.constant(array![[0.3, -1.2, 2.0, 0.0]]);
    let sm = tape.softmax_rows(x);
    let ls = tape.log_softmax_rows(x);
    let sv = tape.value(sm).to_owned();
    let lv = tape.value(ls).to_owned();
    for (s, l) in sv.iter().zip(lv.iter()) {
        assert!((s.ln() - l).abs() < 1e-12);
    }
}

#[test]
fn constant_leaves_get_no_grad() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let id = store.add("w", xavier_uniform(2, 2, &mut rng)).unwrap();
    let mut tape = Tape::new();
    let w = tape.param(&store, id);
    let c = tape.constant(Array2::ones((2, 2)));
    let prod = tape.mul(w, c);
    let loss = tape.sum_all(prod);
    let grads = tape.backward(loss);
    assert_eq!(grads.iter().count(), 1);
    assert_eq!(grads.get(id).unwrap(), &Array2::ones((2, 2)));
}
