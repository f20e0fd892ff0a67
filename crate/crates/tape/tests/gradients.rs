//! Every differentiable op against central finite differences.

use partcoord_tape::{Conv1dGeom, Graph, Matrix, ParamStore, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Reduces `out` to a scalar with fixed random weights so every output entry matters.
fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Var {
    let (r, c) = g.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random(&mut rng, r, c));
    let prod = g.mul(out, w);
    g.sum(prod)
}

fn check(name: &str, inputs: Vec<Matrix>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let store = ParamStore::new();
    let eval = |vals: &[Matrix]| -> f64 {
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = vals.iter().map(|m| g.input(m.clone())).collect();
        let out = build(&mut g, &vars);
        let loss = weighted_sum(&mut g, out, 99);
        g.value(loss).item()
    };
    let mut g = Graph::new(&store);
    let vars: Vec<Var> = inputs.iter().map(|m| g.input(m.clone())).collect();
    let out = build(&mut g, &vars);
    let loss = weighted_sum(&mut g, out, 99);
    let back = g.backward(loss);
    let h = 1e-6;
    for (k, (&v, m)) in vars.iter().zip(&inputs).enumerate() {
        let analytic = back.wrt(v).cloned().unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()));
        for e in 0..m.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[e] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[e] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[e];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "{name}: input {k} entry {e}: analytic {a} numeric {numeric}");
        }
    }
}

#[test]
fn elementwise_and_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, 3, 4);
    let b = random(&mut rng, 4, 2);
    let c = random(&mut rng, 3, 4);
    check("matmul", vec![a.clone(), b.clone()], |g, v| g.matmul(v[0], v[1]));
    check("matmul_tt", vec![a.transpose(), b.transpose()], |g, v| g.matmul_t(v[0], true, v[1], true));
    check("matmul_tn", vec![a.transpose(), b.clone()], |g, v| g.matmul_t(v[0], true, v[1], false));
    check("matmul_nt", vec![a.clone(), b.transpose()], |g, v| g.matmul_t(v[0], false, v[1], true));
    check("add_sub_mul", vec![a.clone(), c.clone()], |g, v| {
        let s = g.add(v[0], v[1]);
        let d = g.sub(v[0], v[1]);
        g.mul(s, d)
    });
    let row = random(&mut rng, 1, 4);
    check("row broadcast", vec![a.clone(), row], |g, v| {
        let x = g.mul_row(v[0], v[1]);
        g.add_row(x, v[1])
    });
    check("scale/add_scalar/gelu", vec![a.clone()], |g, v| {
        let x = g.scale(v[0], 1.7);
        let x = g.add_scalar(x, 0.3);
        g.gelu(x)
    });
    check("relu", vec![a.map(|x| if x.abs() < 0.05 { 0.5 } else { x })], |g, v| g.relu(v[0]));
    check("sqrt/row_sum", vec![a.map(|x| x.abs() + 0.5)], |g, v| {
        let s = g.row_sum(v[0]);
        g.sqrt(s)
    });
    check("mean", vec![a.clone()], |g, v| {
        let sq = g.square(v[0]);
        let m = g.mean(sq);
        g.scale(m, 3.0)
    });
}

#[test]
fn normalization_and_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, 4, 5);
    let gain = random(&mut rng, 1, 5);
    let bias = random(&mut rng, 1, 5);
    check("layer_norm", vec![x.clone(), gain, bias], |g, v| g.layer_norm_affine(v[0], v[1], v[2], 1e-5));
    check("cross_entropy", vec![x.scale_by(3.0)], |g, v| g.cross_entropy_sum(v[0], &[Some(1), None, Some(4), Some(0)]));
}

#[test]
fn indexing_and_reshaping() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let table = random(&mut rng, 5, 3);
    check("gather", vec![table], |g, v| g.gather(v[0], &[4, 0, 4, 2]));
    let a = random(&mut rng, 3, 2);
    let b = random(&mut rng, 3, 4);
    check("concat/slice cols", vec![a.clone(), b.clone()], |g, v| {
        let c = g.concat_cols(&[v[0], v[1], v[0]]);
        g.slice_cols(c, 1, 5)
    });
    check("concat/slice rows", vec![a.clone(), a.map(|x| x * 2.0)], |g, v| {
        let c = g.concat_rows(&[v[0], v[1]]);
        g.slice_rows(c, 2, 3)
    });
}

#[test]
fn temporal_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, 2 * 6, 3);
    for (kernel, stride, pad) in [(3, 1, 1), (4, 2, 1), (1, 1, 0)] {
        let geom = Conv1dGeom { seqs: 2, t_in: 6, kernel, stride, pad };
        check("im2col", vec![x.clone()], move |g, v| g.im2col(v[0], geom));
    }
    check("repeat_rows", vec![x.clone()], |g, v| g.repeat_rows(v[0], 2));
    check("time_diff", vec![x.clone()], |g, v| g.time_diff(v[0], 2));
}

#[test]
fn causal_attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (seqs, t, d) = (2, 4, 6);
    let q = random(&mut rng, seqs * t, d);
    let k = random(&mut rng, seqs * t, d);
    let v = random(&mut rng, seqs * t, d);
    check("attention", vec![q, k, v], |g, x| g.causal_attention(x[0], x[1], x[2], seqs, t, 2));
}

#[test]
fn attention_is_causal_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (t, d) = (5, 4);
    let q = random(&mut rng, t, d);
    let k = random(&mut rng, t, d);
    let v = random(&mut rng, t, d);
    let store = ParamStore::new();
    let run = |k: &Matrix, v: &Matrix| {
        let mut g = Graph::new(&store);
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let o = g.causal_attention(qv, kv, vv, 1, t, 2);
        g.value(o).clone()
    };
    let base = run(&k, &v);
    let mut k2 = k.clone();
    let mut v2 = v.clone();
    for c in 0..d {
        k2.set(3, c, 100.0);
        v2.set(4, c, -7.0);
    }
    let edited = run(&k2, &v2);
    for r in 0..3 {
        assert_eq!(base.row(r), edited.row(r));
    }
}

#[test]
fn frozen_stops_replace_values() {
    let store = ParamStore::new();
    let mut g = Graph::with_frozen_stops(&store, vec![Matrix::scalar(5.0)]);
    let x = g.input(Matrix::scalar(2.0));
    let s = g.stop_grad(x);
    let y = g.add(x, s);
    assert_eq!(g.value(y).item(), 7.0);
    assert_eq!(g.backward(y).wrt(x).unwrap().item(), 1.0);
}

trait ScaleBy {
    fn scale_by(&self, s: f64) -> Matrix;
}

impl ScaleBy for Matrix {
    fn scale_by(&self, s: f64) -> Matrix {
        self.map(|x| x * s)
    }
}

#[test]
fn straight_through_value_is_exact_and_gradient_passes() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let e = g.input(Matrix::scalar(0.2));
    let q = g.input(Matrix::scalar(0.7));
    let st = g.straight_through(e, q);
    assert_eq!(g.value(st).item(), 0.7);
    let sq = g.square(st);
    let loss = g.scale(sq, 0.5);
    let back = g.backward(loss);
    assert!((back.wrt(e).unwrap().item() - 0.7).abs() < 1e-15);
    assert!(back.wrt(q).is_none());
}
