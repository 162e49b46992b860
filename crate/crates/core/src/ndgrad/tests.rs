use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn c(m: Matrix) -> DiffArray {
    DiffArray::constant(m)
}

fn random_matrix(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(shape, |_, _| rng.random_range(lo..hi))
}

/// Central differences of a scalar function of one matrix.
fn finite_diff(f: &dyn Fn(&Matrix) -> f64, x: &Matrix, h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.to_vec();
        let mut minus = x.to_vec();
        plus[i] += h;
        minus[i] -= h;
        let fp = f(&Matrix::new(x.shape(), plus).unwrap());
        let fm = f(&Matrix::new(x.shape(), minus).unwrap());
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Norm-wise relative error, with the scale floored at 1e-3 so that
/// vanishing gradients are compared absolutely.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-3)
}

#[test]
fn elementwise_add() {
    let a = c(Matrix::row(vec![1.0, 2.0]));
    let b = c(Matrix::row(vec![3.0, 4.0]));
    assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
}

#[test]
fn identity_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_matrix(&mut rng, [3, 4], -1.0, 1.0);
    let out = c(Matrix::identity(3)).matmul(&c(a.clone())).unwrap();
    assert_eq!(out.value(), &a);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let s = c(Matrix::row(vec![0.0, 0.0])).softmax().unwrap();
    assert_eq!(s.data(), &[0.5, 0.5]);
}

#[test]
fn closed_forms() {
    let sp = c(Matrix::scalar(0.0)).softplus().unwrap().item();
    assert!((sp - std::f64::consts::LN_2).abs() < 1e-15);
    let n = c(Matrix::row(vec![3.0, 4.0])).row_norm().unwrap();
    assert_eq!(n.item(), 5.0);
    // overflow-safe for large magnitudes
    let big = c(Matrix::row(vec![800.0, -800.0])).softplus().unwrap();
    assert_eq!(big.data(), &[800.0, 0.0]);
}

#[test]
fn square_gradient() {
    let tape = Tape::new();
    let x = tape.var(&Matrix::scalar(3.0));
    let g = x.square().unwrap().backward().unwrap();
    assert_eq!(g.get(&x).item(), 6.0);
}

#[test]
fn product_gradient() {
    let tape = Tape::new();
    let x = tape.var(&Matrix::scalar(2.0));
    let y = tape.var(&Matrix::scalar(5.0));
    let g = x.mul(&y).unwrap().backward().unwrap();
    assert_eq!(g.get(&x).item(), 5.0);
    assert_eq!(g.get(&y).item(), 2.0);
}

#[test]
fn softplus_layer_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = random_matrix(&mut rng, [3, 3], -1.0, 1.0);
    let x = random_matrix(&mut rng, [3, 1], -1.0, 1.0);
    let f = |w: &Matrix| {
        c(w.clone())
            .matmul(&c(x.clone()))
            .unwrap()
            .softplus()
            .unwrap()
            .sum()
            .unwrap()
            .item()
    };
    let tape = Tape::new();
    let wv = tape.var(&w);
    let out = wv.matmul(&c(x.clone())).unwrap().softplus().unwrap().sum().unwrap();
    let analytic = out.backward().unwrap().get(&wv).to_vec();
    let numeric = finite_diff(&f, &w, 1e-5);
    assert!(rel_err(&analytic, &numeric) < 1e-6);
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_matrix(&mut rng, [1, 4], -2.0, 2.0);
    let w = random_matrix(&mut rng, [1, 4], -1.0, 1.0);
    let f = |x: &Matrix| c(x.clone()).softmax().unwrap().mul(&c(w.clone())).unwrap().sum().unwrap().item();
    let tape = Tape::new();
    let xv = tape.var(&x);
    let out = xv.softmax().unwrap().mul(&c(w.clone())).unwrap().sum().unwrap();
    let analytic = out.backward().unwrap().get(&xv).to_vec();
    let numeric = finite_diff(&f, &x, 1e-5);
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!((a - n).abs() < 1e-7, "{a} vs {n}");
    }
}

#[test]
fn nested_square() {
    // g(x) = (f'(x))² = 4x², g'(3) = 24
    let tape = Tape::new();
    let x = tape.var(&Matrix::scalar(3.0));
    let f = x.square().unwrap();
    let (outer, grads) = grad_nested(&f, &x, |d| d.square()).unwrap();
    assert_eq!(outer.item(), 36.0);
    assert_eq!(grads.get(&x).item(), 24.0);
}

#[test]
fn nested_sine() {
    let tape = Tape::new();
    let x = tape.var(&Matrix::scalar(1.0));
    let f = x.sin().unwrap();
    let (_, grads) = grad_nested(&f, &x, |d| d.square()).unwrap();
    let want = -2.0 * 1f64.cos() * 1f64.sin();
    assert!((grads.get(&x).item() - want).abs() < 1e-15);
    assert!((want + 0.9093).abs() < 1e-4);
}

/// Two-layer leaky-relu critic and the unit-gradient penalty on its input
/// gradient, differentiated with respect to every critic parameter.
#[test]
fn gradient_penalty_second_order_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, d, h) = (5, 3, 6);
    let z = random_matrix(&mut rng, [n, d], -1.0, 1.0);
    let params = vec![
        random_matrix(&mut rng, [d, h], -1.0, 1.0),
        random_matrix(&mut rng, [1, h], -0.5, 0.5),
        random_matrix(&mut rng, [h, 1], -1.0, 1.0),
        random_matrix(&mut rng, [1, 1], -0.5, 0.5),
    ];
    let slope = 0.2;

    // Hand-derived input gradient: ∇_z C = W1 · (mask ⊙ w2) per row.
    let penalty = |p: &[Matrix]| -> f64 {
        let pre = z.matmul(&p[0]).unwrap();
        let mut total = 0.0;
        for i in 0..n {
            let mut g = vec![0.0; d];
            for j in 0..h {
                let a = pre.get(i, j) + p[1].get(0, j);
                let m = if a > 0.0 { 1.0 } else { slope };
                for (k, gk) in g.iter_mut().enumerate() {
                    *gk += p[0].get(k, j) * m * p[2].get(j, 0);
                }
            }
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            total += (norm - 1.0).powi(2);
        }
        total / n as f64
    };

    let tape = Tape::new();
    let vars: Vec<DiffArray> = params.iter().map(|p| tape.var(p)).collect();
    let zv = tape.var(&z);
    let score = zv
        .matmul(&vars[0])
        .unwrap()
        .add(&vars[1])
        .unwrap()
        .leaky_relu(slope)
        .unwrap()
        .matmul(&vars[2])
        .unwrap()
        .add(&vars[3])
        .unwrap();
    let inner = score.sum().unwrap();
    let (outer, grads) = grad_nested(&inner, &zv, |g| g.row_norm()?.add_scalar(-1.0)?.square()?.mean()).unwrap();
    assert!((outer.item() - penalty(&params)).abs() < 1e-12);

    for (k, v) in vars.iter().enumerate() {
        let f = |m: &Matrix| {
            let mut p = params.clone();
            p[k] = m.clone();
            penalty(&p)
        };
        let numeric = finite_diff(&f, &params[k], 1e-5);
        let analytic = grads.get(v).to_vec();
        let err = rel_err(&analytic, &numeric);
        // the output bias never reaches the input gradient
        if k == 3 {
            assert_eq!(analytic, vec![0.0]);
        } else {
            assert!(err < 1e-4, "param {k}: rel err {err}");
        }
    }
}

#[test]
fn backward_rejects_multi_element_output() {
    let tape = Tape::new();
    let x = tape.var(&Matrix::row(vec![1.0, 2.0]));
    assert_eq!(x.backward().unwrap_err(), GradError::NotScalar([1, 2]));
}

#[test]
fn constant_graph_has_zero_gradients() {
    let tape = Tape::new();
    let x = tape.var(&Matrix::row(vec![1.0, 2.0]));
    let out = c(Matrix::row(vec![3.0, 4.0])).sum().unwrap();
    let g = out.backward().unwrap();
    assert_eq!(g.get(&x).data(), &[0.0, 0.0]);
    // reachable-but-unused leaf
    let y = tape.var(&Matrix::scalar(2.0));
    let out = x.sum().unwrap();
    assert_eq!(out.backward().unwrap().get(&y).item(), 0.0);
}

#[test]
fn domain_errors() {
    let neg = c(Matrix::row(vec![1.0, -1.0]));
    assert_eq!(neg.log().unwrap_err(), GradError::NegativeInput { op: "log" });
    assert_eq!(neg.sqrt().unwrap_err(), GradError::NegativeInput { op: "sqrt" });
    let zero = c(Matrix::row(vec![1.0, 0.0]));
    assert_eq!(neg.div(&zero).unwrap_err(), GradError::DivisionByZero);
    let a = c(Matrix::zeros([2, 3]));
    let b = c(Matrix::zeros([3, 2]));
    assert!(matches!(a.add(&b), Err(GradError::ShapeMismatch { .. })));
    assert!(matches!(a.matmul(&a), Err(GradError::ShapeMismatch { .. })));
}

#[test]
fn mixing_tapes_is_rejected() {
    let (t1, t2) = (Tape::new(), Tape::new());
    let x = t1.var(&Matrix::scalar(1.0));
    let y = t2.var(&Matrix::scalar(1.0));
    assert_eq!(x.add(&y).unwrap_err(), GradError::TapeMismatch);
}

#[test]
fn third_order_is_rejected() {
    let tape = Tape::new();
    let x = tape.var(&Matrix::scalar(2.0));
    let f = x.square().unwrap().mul(&x).unwrap();
    let g = grad(&f, &[&x], true).unwrap().remove(0);
    assert_eq!(g.order(), 1);
    assert_eq!(grad(&g, &[&x], true).unwrap_err(), GradError::NestingTooDeep);
    // a plain second backward is fine: f'' = 6x = 12
    assert_eq!(g.backward().unwrap().get(&x).item(), 12.0);
}

#[test]
fn lgamma_has_no_second_derivative() {
    let tape = Tape::new();
    let x = tape.var(&Matrix::scalar(2.5));
    let f = x.lgamma().unwrap();
    let g = grad(&f, &[&x], false).unwrap().remove(0);
    assert!((g.item() - crate::special::digamma(2.5)).abs() < 1e-15);
    assert_eq!(grad(&f, &[&x], true).unwrap_err(), GradError::NoSecondDerivative("lgamma"));
}

#[test]
fn row_norm_gradient_at_origin_is_zero() {
    let tape = Tape::new();
    let x = tape.var(&Matrix::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap());
    let g = x.row_norm().unwrap().sum().unwrap().backward().unwrap().get(&x);
    assert_eq!(&g.data()[..2], &[0.0, 0.0]);
    assert!((g.data()[2] - 0.6).abs() < 1e-15 && (g.data()[3] - 0.8).abs() < 1e-15);
}

#[test]
fn tape_records_each_operation_once() {
    let tape = Tape::new();
    let x = tape.var(&Matrix::row(vec![1.0, 2.0]));
    let before = tape.len();
    let _ = x.exp().unwrap();
    assert_eq!(tape.len(), before + 1);
    // constant-only arithmetic never touches the tape
    let _ = c(Matrix::scalar(1.0)).exp().unwrap();
    assert_eq!(tape.len(), before + 1);
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let w = random_matrix(&mut rng, [4, 3], -1.0, 1.0);
        let x = random_matrix(&mut rng, [5, 4], -1.0, 1.0);
        let tape = Tape::new();
        let wv = tape.var(&w);
        let out = c(x).matmul(&wv).unwrap().log_softmax().unwrap().sum().unwrap();
        (out.item().to_bits(), out.backward().unwrap().get(&wv).to_vec())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn broadcasting_gradients_reduce_back() {
    let tape = Tape::new();
    let m = tape.var(&Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
    let row = tape.var(&Matrix::row(vec![10.0, 20.0]));
    let col = tape.var(&Matrix::column(vec![1.0, 2.0, 3.0]));
    let out = m.add(&row).unwrap().mul(&col).unwrap().sum().unwrap();
    let g = out.backward().unwrap();
    assert_eq!(g.get(&row).data(), &[6.0, 6.0]);
    assert_eq!(g.get(&col).data(), &[33.0, 37.0, 41.0]);
}

type UnaryFn = fn(&DiffArray) -> Result<DiffArray, GradError>;

fn unary_ops() -> Vec<(&'static str, UnaryFn, f64)> {
    // (name, op, input shift) — shifted ops need strictly positive inputs
    vec![
        ("exp", |x| x.exp(), 0.0),
        ("log", |x| x.log(), 2.5),
        ("sqrt", |x| x.sqrt(), 2.5),
        ("square", |x| x.square(), 0.0),
        ("sin", |x| x.sin(), 0.0),
        ("cos", |x| x.cos(), 0.0),
        ("softplus", |x| x.softplus(), 0.0),
        ("sigmoid", |x| x.sigmoid(), 0.0),
        ("leaky_relu", |x| x.leaky_relu(0.2), 0.0),
        ("softmax", |x| x.softmax(), 0.0),
        ("log_softmax", |x| x.log_softmax(), 0.0),
        ("row_norm", |x| x.row_norm(), 0.0),
        ("recip_or_zero", |x| x.recip_or_zero(), 2.5),
        ("lgamma", |x| x.lgamma(), 2.5),
        ("neg", |x| x.neg(), 0.0),
        ("transpose", |x| x.transpose(), 0.0),
        ("sum_rows", |x| x.sum_rows(), 0.0),
        ("sum_cols", |x| x.sum_cols(), 0.0),
        ("mean", |x| x.mean(), 0.0),
        ("slice_cols", |x| x.slice_cols(1, 3), 0.0),
        ("pad_cols", |x| x.pad_cols(2, 6), 0.0),
        ("broadcast_to", |x| x.sum_rows()?.broadcast_to([4, 3]), 0.0),
    ]
}

type BinaryFn = fn(&DiffArray, &DiffArray) -> Result<DiffArray, GradError>;

fn binary_ops() -> Vec<(&'static str, BinaryFn)> {
    vec![
        ("add", |a, b| a.add(b)),
        ("sub", |a, b| a.sub(b)),
        ("mul", |a, b| a.mul(b)),
        ("div", |a, b| a.div(&b.add_scalar(3.0)?)),
        ("matmul", |a, b| a.matmul(&b.transpose()?)),
        ("add_row", |a, b| a.add(&b.slice_cols(0, 3)?.sum_rows()?)),
    ]
}

/// Weighted sum, so every output entry contributes with a distinct weight.
fn project(out: &DiffArray, weights: &Matrix) -> f64 {
    let w = Matrix::from_fn(out.shape(), |r, c| weights.data()[(r * 7 + c) % weights.len()]);
    out.mul(&DiffArray::constant(w)).unwrap().sum().unwrap().item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn unary_primitives_match_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = random_matrix(&mut rng, [1, 16], -1.0, 1.0);
        for (name, op, shift) in unary_ops() {
            let x = Matrix::from_fn([4, 3], |_, _| {
                // keep away from the leaky-relu kink
                let v: f64 = rng.random_range(-2.0..2.0);
                if v.abs() < 1e-2 { v + 0.05 } else { v }
            })
            .map(|v| v + shift);
            let f = |m: &Matrix| project(&op(&DiffArray::constant(m.clone())).unwrap(), &weights);
            let tape = Tape::new();
            let xv = tape.var(&x);
            let out = op(&xv).unwrap();
            let w = Matrix::from_fn(out.shape(), |r, c| weights.data()[(r * 7 + c) % weights.len()]);
            let s = out.mul(&DiffArray::constant(w)).unwrap().sum().unwrap();
            let analytic = s.backward().unwrap().get(&xv).to_vec();
            let numeric = finite_diff(&f, &x, 1e-5);
            let err = rel_err(&analytic, &numeric);
            prop_assert!(err < 1e-5, "{} rel err {}", name, err);
        }
    }

    #[test]
    fn binary_primitives_match_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = random_matrix(&mut rng, [1, 16], -1.0, 1.0);
        for (name, op) in binary_ops() {
            let a = random_matrix(&mut rng, [4, 3], -2.0, 2.0);
            let b = random_matrix(&mut rng, [4, 3], -2.0, 2.0).map(|v| if name == "div" { v.abs() } else { v });
            let tape = Tape::new();
            let (av, bv) = (tape.var(&a), tape.var(&b));
            let out = op(&av, &bv).unwrap();
            let w = Matrix::from_fn(out.shape(), |r, c| weights.data()[(r * 7 + c) % weights.len()]);
            let grads = out.mul(&DiffArray::constant(w)).unwrap().sum().unwrap().backward().unwrap();
            let fa = |m: &Matrix| project(&op(&DiffArray::constant(m.clone()), &DiffArray::constant(b.clone())).unwrap(), &weights);
            let fb = |m: &Matrix| project(&op(&DiffArray::constant(a.clone()), &DiffArray::constant(m.clone())).unwrap(), &weights);
            let ea = rel_err(&grads.get(&av).to_vec(), &finite_diff(&fa, &a, 1e-5));
            let eb = rel_err(&grads.get(&bv).to_vec(), &finite_diff(&fb, &b, 1e-5));
            prop_assert!(ea < 1e-5 && eb < 1e-5, "{} rel errs {} {}", name, ea, eb);
        }
    }

    /// Second-order rules: differentiate a gradient-norm penalty built from
    /// each twice-differentiable primitive.
    #[test]
    fn second_order_rules_match_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = random_matrix(&mut rng, [1, 16], -1.0, 1.0);
        for (name, op, shift) in unary_ops() {
            if name == "lgamma" || name == "leaky_relu" {
                continue;
            }
            let x = random_matrix(&mut rng, [4, 3], -1.5, 1.5).map(|v| v + shift);
            let penalty = |m: &Matrix| -> f64 {
                let tape = Tape::new();
                let xv = tape.var(m);
                let out = op(&xv).unwrap();
                let w = Matrix::from_fn(out.shape(), |r, c| weights.data()[(r * 7 + c) % weights.len()]);
                let s = out.mul(&DiffArray::constant(w)).unwrap().sum().unwrap();
                let g = grad(&s, &[&xv], false).unwrap().remove(0);
                g.data().iter().map(|v| v * v).sum()
            };
            let tape = Tape::new();
            let xv = tape.var(&x);
            let out = op(&xv).unwrap();
            let w = Matrix::from_fn(out.shape(), |r, c| weights.data()[(r * 7 + c) % weights.len()]);
            let s = out.mul(&DiffArray::constant(w)).unwrap().sum().unwrap();
            let (_, grads) = grad_nested(&s, &xv, |g| g.square()?.sum()).unwrap();
            let analytic = grads.get(&xv).to_vec();
            let numeric = finite_diff(&penalty, &x, 1e-5);
            let err = rel_err(&analytic, &numeric);
            prop_assert!(err < 1e-5, "{} second-order rel err {}", name, err);
        }
    }
}
