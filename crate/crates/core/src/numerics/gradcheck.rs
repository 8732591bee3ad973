//! Central finite-difference checks of every differentiable op (f64).

use std::sync::Arc;

use super::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Builds `loss = build(g, inputs)` and compares analytic input gradients
/// with central differences. Relative error is measured per input as
/// `max|analytic - numeric| / max(max|numeric|, 1e-8)`.
fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    for (idx, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[idx].numel()]);
        let mut numeric = vec![0.0; inputs[idx].numel()];
        for e in 0..inputs[idx].numel() {
            let mut plus = inputs.clone();
            plus[idx].data_mut()[e] += H;
            let mut minus = inputs.clone();
            minus[idx].data_mut()[e] -= H;
            numeric[e] = (eval(&plus) - eval(&minus)) / (2.0 * H);
        }
        let scale = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-8);
        let err = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max) / scale;
        assert!(err <= TOL, "input {idx}: relative error {err:.3e}\nanalytic {analytic:?}\nnumeric {numeric:?}");
    }
}

/// Reduces any tensor to a scalar through fixed random weights.
fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let mut rng = Rng::new(seed);
    let w = random(g.value(x).shape(), &mut rng);
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

#[test]
fn matmul_gradient() {
    let mut rng = Rng::new(1);
    check(vec![random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)], |g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        weighted_sum(g, y, 9)
    });
}

#[test]
fn sum_of_product_gradient_is_column_sum_of_b() {
    let mut rng = Rng::new(2);
    let b = random(&[3, 5], &mut rng);
    let mut g = Graph::new();
    let a = g.leaf(random(&[2, 3], &mut rng), true);
    let bv = g.constant(b.clone());
    let y = g.matmul(a, bv).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    let grad = g.grad(a).unwrap();
    for r in 0..2 {
        for k in 0..3 {
            let expected: f64 = b.row(k).iter().sum();
            assert!((grad[r * 3 + k] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn elementwise_gradients() {
    let mut rng = Rng::new(3);
    check(vec![random(&[2, 3], &mut rng), random(&[2, 3], &mut rng)], |g, v| {
        let a = g.add(v[0], v[1]).unwrap();
        let m = g.mul(a, v[1]).unwrap();
        let s = g.silu(m);
        let s = g.scale(s, 0.7);
        weighted_sum(g, s, 4)
    });
    check(vec![random(&[3, 4], &mut rng), random(&[4], &mut rng)], |g, v| {
        let y = g.add_row(v[0], v[1]).unwrap();
        weighted_sum(g, y, 5)
    });
}

#[test]
fn rms_norm_gradient() {
    let mut rng = Rng::new(4);
    check(vec![random(&[3, 6], &mut rng), random(&[6], &mut rng)], |g, v| {
        let y = g.rms_norm(v[0], v[1], 1e-5).unwrap();
        weighted_sum(g, y, 6)
    });
}

#[test]
fn concat_embedding_gather_gradients() {
    let mut rng = Rng::new(5);
    check(vec![random(&[3, 2], &mut rng), random(&[3, 4], &mut rng)], |g, v| {
        let y = g.concat_cols(v[0], v[1]).unwrap();
        weighted_sum(g, y, 7)
    });
    check(vec![random(&[5, 3], &mut rng)], |g, v| {
        let y = g.embedding(v[0], &[4, 0, 4, 2]).unwrap();
        weighted_sum(g, y, 8)
    });
    check(vec![random(&[4, 3], &mut rng)], |g, v| {
        let y = g.gather_rows(v[0], &[None, Some(0), Some(3), Some(0)]).unwrap();
        weighted_sum(g, y, 9)
    });
}

#[test]
fn rope_gradient_and_inverse() {
    let mut rng = Rng::new(6);
    check(vec![random(&[3, 8], &mut rng)], |g, v| {
        let y = g.rope(v[0], &[0, 5, 17], 2).unwrap();
        weighted_sum(g, y, 10)
    });
    // Rotation preserves the norm of each pair.
    let x = random(&[1, 4], &mut rng);
    let mut g = Graph::<f64>::no_grad();
    let xv = g.constant(x.clone());
    let y = g.rope(xv, &[11], 1).unwrap();
    let n0: f64 = x.data().iter().map(|v| v * v).sum();
    let n1: f64 = g.value(y).data().iter().map(|v| v * v).sum();
    assert!((n0 - n1).abs() < 1e-12);
}

#[test]
fn attention_gradient_with_blocks_and_batch() {
    let mut rng = Rng::new(7);
    // Two key blocks (3 + 2 keys), batch of 2, two heads of width 2.
    let mask = BoolMatrix::from_fn(3, 5, |i, c| c <= i || c == 3 + (i % 2));
    let mask = Arc::new(AttnMask::from_matrix(&mask).unwrap());
    let inputs = vec![
        random(&[6, 4], &mut rng),
        random(&[6, 4], &mut rng),
        random(&[4, 4], &mut rng),
        random(&[6, 4], &mut rng),
        random(&[4, 4], &mut rng),
    ];
    check(inputs, |g, v| {
        let y = g.attention(v[0], &[v[1], v[2]], &[v[3], v[4]], Arc::clone(&mask), 2, 2).unwrap();
        weighted_sum(g, y, 11)
    });
}

#[test]
fn softmax_and_cross_entropy_gradients() {
    let mut rng = Rng::new(8);
    check(vec![random(&[2, 5], &mut rng)], |g, v| {
        let y = g.softmax(v[0], 0.7).unwrap();
        weighted_sum(g, y, 12)
    });
    let w = Tensor::from_fn(&[3, 4], |i| ((i * 7) % 5) as f64 / 5.0);
    check(vec![random(&[3, 4], &mut rng)], |g, v| g.soft_cross_entropy(v[0], &w, 0.0).unwrap());
    check(vec![random(&[3, 4], &mut rng)], |g, v| g.soft_cross_entropy(v[0], &w, 1e-9).unwrap());
}

#[test]
fn smooth_l1_gradient_both_regimes() {
    let mut rng = Rng::new(9);
    let a = random(&[3, 4], &mut rng).map(|x| 2.0 * x);
    let b = random(&[3, 4], &mut rng);
    check(vec![a, b], |g, v| g.smooth_l1(v[0], v[1], 1.0, &[0.5, 0.0, 2.0]).unwrap());
}

#[test]
fn smooth_l1_below_beta_is_half_square() {
    let mut g = Graph::<f64>::no_grad();
    let a = g.constant(Tensor::full(&[1, 4], 0.5));
    let b = g.constant(Tensor::zeros(&[1, 4]));
    let l = g.smooth_l1(a, b, 1.0, &[1.0]).unwrap();
    assert!((g.value(l).item() - 0.125).abs() < 1e-15);
}

#[test]
fn backward_contracts() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::full(&[2, 2], 3.0), true);
    let y = g.leaf(Tensor::full(&[2, 2], 1.0), true);
    let s = g.sum(x);
    // Non-scalar loss.
    assert!(matches!(g.backward(x), Err(crate::HassError::Shape(_))));
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
    // `y` is not on the path from the loss.
    assert!(g.grad(y).is_none());
    // Second call without reset.
    assert!(matches!(g.backward(s), Err(crate::HassError::Graph(_))));
    g.reset_grads();
    g.backward(s).unwrap();

    // Detached input receives no gradient.
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::full(&[3], 1.0), true);
    let d = g.detach(x);
    let s = g.sum(d);
    g.backward(s).unwrap();
    assert!(g.grad(x).is_none());
}

#[test]
fn forbidden_keys_get_zero_weight() {
    // The value at a forbidden key must not influence the output at all.
    let mask = Arc::new(AttnMask::from_matrix(&BoolMatrix::causal(3)).unwrap());
    let mut rng = Rng::new(10);
    let q = random(&[3, 4], &mut rng);
    let k = random(&[3, 4], &mut rng);
    let mut v = random(&[3, 4], &mut rng);
    let run = |v: &Tensor<f64>| {
        let mut g = Graph::<f64>::no_grad();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let y = g.attention(qv, &[kv], &[vv], Arc::clone(&mask), 1, 1).unwrap();
        g.value(y).clone()
    };
    let before = run(&v);
    v.row_mut(2).iter_mut().for_each(|x| *x = 1e6);
    let after = run(&v);
    assert_eq!(before.row(0), after.row(0));
    assert_eq!(before.row(1), after.row(1));
    // Position 0 attends only to key 0: output equals v row 0.
    assert_eq!(before.row(0), v.row(0));
}
