use crate::error::{bail, Result};
use crate::numerics::{Float, Graph, Tensor, Var};

/// Lower clamp applied to draft probabilities inside the Top-K loss.
pub const TOP_K_LOG_CLAMP: f64 = 1e-9;
/// Transition point of the SmoothL1 feature regression.
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Indices of the `k` largest entries of `q` in descending order; ties go
/// to the lower index.
pub fn top_k_indices<T: PartialOrd + Copy>(q: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..q.len()).collect();
    idx.sort_by(|&a, &b| q[b].partial_cmp(&q[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `-sum_{x in top-K(q)} q(x) * ln(max(p(x), 1e-9))`. `q` is not
/// renormalized over the selected set.
pub fn top_k_loss(q: &[f64], p: &[f64], k: usize) -> Result<f64> {
    if q.len() != p.len() {
        bail!(Shape, "q has {} entries, p has {}", q.len(), p.len());
    }
    if k == 0 || k > q.len() {
        bail!(Parameter, "top-k size {k} must lie in 1..={}", q.len());
    }
    Ok(-top_k_indices(q, k).into_iter().map(|x| q[x] * p[x].max(TOP_K_LOG_CLAMP).ln()).sum::<f64>())
}

/// Soft-label cross-entropy `-sum_x q(x) ln p(x)`, skipping `q(x) = 0`.
pub fn soft_cross_entropy(q: &[f64], p: &[f64]) -> f64 {
    -q.iter().zip(p).filter(|(&qx, _)| qx > 0.0).map(|(qx, px)| qx * px.ln()).sum::<f64>()
}

/// Mean over elements of the SmoothL1 (Huber, `beta`) distance.
pub fn smooth_l1(a: &[f64], b: &[f64], beta: f64) -> f64 {
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (x - y).abs();
            if d < beta {
                0.5 * d * d / beta
            } else {
                d - 0.5 * beta
            }
        })
        .sum();
    total / a.len() as f64
}

/// `w_reg * SmoothL1(f_s, f_l) + w_cls * CE(q, p)` averaged over the
/// eligible rows.
#[allow(clippy::too_many_arguments)]
pub fn eagle_base_loss<T: Float>(
    f_s: &Tensor<T>,
    f_l: &Tensor<T>,
    p: &Tensor<T>,
    q: &Tensor<T>,
    eligible: &[bool],
    reg_weight: f64,
    cls_weight: f64,
) -> Result<f64> {
    if f_s.shape() != f_l.shape() || p.shape() != q.shape() || f_s.rows() != p.rows() || eligible.len() != p.rows() {
        bail!(
            Shape,
            "base loss inputs disagree: f_s {:?}, f_l {:?}, p {:?}, q {:?}, {} eligibility flags",
            f_s.shape(),
            f_l.shape(),
            p.shape(),
            q.shape(),
            eligible.len()
        );
    }
    let rows: Vec<usize> = (0..p.rows()).filter(|&r| eligible[r]).collect();
    if rows.is_empty() {
        return Ok(0.0);
    }
    let f64row = |t: &Tensor<T>, r: usize| t.row(r).iter().map(|x| x.f64()).collect::<Vec<_>>();
    let total: f64 = rows
        .iter()
        .map(|&r| {
            reg_weight * smooth_l1(&f64row(f_s, r), &f64row(f_l, r), SMOOTH_L1_BETA)
                + cls_weight * soft_cross_entropy(&f64row(q, r), &f64row(p, r))
        })
        .sum();
    Ok(total / rows.len() as f64)
}

/// Loss weights of one aligned forward.
pub struct LossWeights {
    pub reg: f64,
    pub cls: f64,
    pub top_k: f64,
    pub k: usize,
}

/// Per-term values of one forward's loss (already averaged).
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms<T> {
    pub reg: Option<T>,
    pub cls: Option<T>,
    pub top_k: Option<T>,
}

/// Graph form of the per-forward loss over `logits` and predicted
/// features, with target features `f_l` and target distributions `q`
/// (rows aligned with the logits). `row_scale[r]` is the averaging weight
/// of row `r`, zero for ineligible rows. Returns the total and its terms.
pub(crate) fn forward_loss<T: Float>(
    g: &mut Graph<T>,
    features: Var,
    logits: Var,
    f_l: Var,
    q: &Tensor<T>,
    row_scale: &[T],
    w: &LossWeights,
) -> Result<(Option<Var>, LossTerms<Var>)> {
    let mut terms = LossTerms { reg: None, cls: None, top_k: None };
    if w.reg > 0.0 {
        let rw: Vec<T> = row_scale.iter().map(|&s| s * T::of(w.reg)).collect();
        terms.reg = Some(g.smooth_l1(features, f_l, SMOOTH_L1_BETA, &rw)?);
    }
    if w.cls > 0.0 {
        let mut weights = q.clone();
        let cls = T::of(w.cls);
        for (r, &s) in row_scale.iter().enumerate() {
            weights.row_mut(r).iter_mut().for_each(|x| *x *= s * cls);
        }
        terms.cls = Some(g.soft_cross_entropy(logits, &weights, 0.0)?);
    }
    if w.top_k > 0.0 {
        let (rows, v) = q.dims2()?;
        if w.k == 0 || w.k > v {
            bail!(Parameter, "top-k size {} must lie in 1..={v}", w.k);
        }
        let mut weights = Tensor::zeros(&[rows, v]);
        let tk = T::of(w.top_k);
        for (r, &s) in row_scale.iter().enumerate() {
            if s == T::zero() {
                continue;
            }
            let qr = q.row(r);
            let out = weights.row_mut(r);
            for x in top_k_indices(qr, w.k) {
                out[x] = qr[x] * s * tk;
            }
        }
        terms.top_k = Some(g.soft_cross_entropy(logits, &weights, TOP_K_LOG_CLAMP)?);
    }
    let mut total: Option<Var> = None;
    for t in [terms.reg, terms.cls, terms.top_k].into_iter().flatten() {
        total = Some(match total {
            None => t,
            Some(acc) => g.add(acc, t)?,
        });
    }
    Ok((total, terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_loss(&[0.1, 0.9], &[0.0, 1.0], 1).unwrap(), 0.0);
        let u = [0.25; 4];
        assert!((top_k_loss(&u, &u, 4).unwrap() - 4f64.ln()).abs() < 1e-12);
        let l = top_k_loss(&[0.7, 0.2, 0.1], &[0.5, 0.3, 0.2], 2).unwrap();
        let direct = -(0.7 * 0.5f64.ln() + 0.2 * 0.3f64.ln());
        assert!((l - direct).abs() < 1e-15);
        assert!((l - 0.7260).abs() < 5e-5);
    }

    #[test]
    fn top_k_rejects_bad_k() {
        assert!(matches!(top_k_loss(&[0.5, 0.5], &[0.5, 0.5], 3), Err(crate::HassError::Parameter(_))));
        assert!(matches!(top_k_loss(&[0.5, 0.5], &[0.5, 0.5], 0), Err(crate::HassError::Parameter(_))));
    }

    #[test]
    fn ties_go_to_the_lower_id() {
        assert_eq!(top_k_indices(&[0.2, 0.4, 0.2, 0.2], 2), vec![1, 0]);
        assert_eq!(top_k_indices(&[0.25; 4], 3), vec![0, 1, 2]);
    }

    #[test]
    fn zero_draft_probability_is_clamped() {
        let l = top_k_loss(&[1.0, 0.0], &[0.0, 1.0], 1).unwrap();
        assert!((l + TOP_K_LOG_CLAMP.ln()).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_regimes() {
        assert!((smooth_l1(&[0.5; 4], &[0.0; 4], 1.0) - 0.125).abs() < 1e-15);
        assert!((smooth_l1(&[3.0], &[0.0], 1.0) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn base_loss_with_perfect_prediction_is_entropy() {
        let f = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64);
        let q = Tensor::<f64>::from_rows(&[vec![0.5, 0.25, 0.25], vec![1.0, 0.0, 0.0]]).unwrap();
        let l = eagle_base_loss(&f, &f, &q, &q, &[true, true], 1.0, 0.1).unwrap();
        let h = -(0.5 * 0.5f64.ln() + 0.5 * 0.25f64.ln());
        assert!((l - 0.1 * h / 2.0).abs() < 1e-12);
    }

    fn dist(v: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.01f64..1.0, v).prop_map(|w| {
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn full_k_is_cross_entropy((q, p) in (2usize..12).prop_flat_map(|v| (dist(v), dist(v)))) {
            let l = top_k_loss(&q, &p, q.len()).unwrap();
            prop_assert!((l - soft_cross_entropy(&q, &p)).abs() < 1e-12);
        }

        #[test]
        fn non_increasing_in_selected_probabilities(
            (q, p, k, x, bump) in (3usize..10).prop_flat_map(|v| (dist(v), dist(v), 1..=v, 0..v, 0.0f64..1.0))
        ) {
            let before = top_k_loss(&q, &p, k).unwrap();
            let mut p2 = p.clone();
            p2[x] += bump;
            let after = top_k_loss(&q, &p2, k).unwrap();
            prop_assert!(after <= before + 1e-12);
        }
    }

    #[test]
    fn graph_loss_matches_direct_evaluation() {
        let mut rng = crate::Rng::new(5);
        let logits = Tensor::<f64>::from_fn(&[3, 5], |_| rng.normal());
        let fs = Tensor::<f64>::from_fn(&[3, 4], |_| rng.normal());
        let fl = Tensor::<f64>::from_fn(&[3, 4], |_| rng.normal());
        let q = crate::numerics::softmax(&Tensor::from_fn(&[3, 5], |_| rng.normal()), 1.0).unwrap();
        let p = crate::numerics::softmax(&logits, 1.0).unwrap();
        let eligible = [false, true, true];
        let w = LossWeights { reg: 1.0, cls: 0.1, top_k: 0.7, k: 2 };
        let mut g = Graph::no_grad();
        let (lv, fsv, flv) = (g.constant(logits), g.constant(fs.clone()), g.constant(fl.clone()));
        let (total, _) = forward_loss(&mut g, fsv, lv, flv, &q, &[0.0, 0.5, 0.5], &w).unwrap();
        let got = g.value(total.unwrap()).item();
        let base = eagle_base_loss(&fs, &fl, &p, &q, &eligible, 1.0, 0.1).unwrap();
        let tk: f64 = (1..3).map(|r| top_k_loss(q.row(r), p.row(r), 2).unwrap()).sum::<f64>() / 2.0;
        assert!((got - (base + 0.7 * tk)).abs() < 1e-12, "{got} vs {}", base + 0.7 * tk);
    }
}
