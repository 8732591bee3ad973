use std::collections::BTreeMap;

use num_rational::Ratio;
use num_traits::{One, Zero};

use super::*;
use crate::numerics::Rng;

type Q = Ratio<i128>;

fn r(n: i128, d: i128) -> Q {
    Q::new(n, d)
}

/// Coin that walks a fixed script of choices and records every decision
/// point, so repeated runs enumerate all outcomes depth first.
struct ScriptCoin {
    script: Vec<usize>,
    trace: Vec<(usize, usize)>,
    weight: Q,
}

impl ScriptCoin {
    fn new(script: Vec<usize>) -> Self {
        Self { script, trace: Vec::new(), weight: Q::one() }
    }

    /// Branches only over outcomes of positive probability.
    fn choose(&mut self, probs: Vec<Q>) -> usize {
        let live: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > Q::zero()).collect();
        let i = self.trace.len();
        let c = self.script.get(i).copied().unwrap_or(0);
        self.weight *= probs[live[c]];
        self.trace.push((c, live.len()));
        live[c]
    }

    /// Script of the next unexplored branch, if any.
    fn next_script(&self) -> Option<Vec<usize>> {
        let pos = self.trace.iter().rposition(|&(c, n)| c + 1 < n)?;
        let mut s: Vec<usize> = self.trace[..pos].iter().map(|&(c, _)| c).collect();
        s.push(self.trace[pos].0 + 1);
        Some(s)
    }
}

impl Coin<Q> for ScriptCoin {
    fn bernoulli(&mut self, prob: &Q) -> bool {
        self.choose(vec![*prob, Q::one() - prob]) == 0
    }

    fn categorical(&mut self, weights: &[Q]) -> usize {
        let total = weights.iter().fold(Q::zero(), |s, w| s + w);
        self.choose(weights.iter().map(|w| w / total).collect())
    }
}

/// Exact distribution of `run`'s output over every coin outcome.
fn enumerate<K: Ord>(mut run: impl FnMut(&mut ScriptCoin) -> K) -> BTreeMap<K, Q> {
    let mut out = BTreeMap::new();
    let mut script = Some(Vec::new());
    while let Some(s) = script {
        let mut coin = ScriptCoin::new(s);
        let k = run(&mut coin);
        *out.entry(k).or_insert_with(Q::zero) += coin.weight;
        script = coin.next_script();
    }
    out.retain(|_, v| !v.is_zero());
    out
}

/// Small prefix-dependent tables with some zero entries.
fn table(prefix: &[u32], v: usize, salt: u64) -> Vec<Q> {
    let mut h = salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for &t in prefix {
        h = (h ^ t as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    }
    let w: Vec<i128> = (0..v).map(|x| ((h >> (8 * x + 3)) % 4) as i128).collect();
    let w: Vec<i128> = if w.iter().all(|&x| x == 0) { vec![1; v] } else { w };
    let s: i128 = w.iter().sum();
    w.into_iter().map(|x| r(x, s)).collect()
}

#[test]
fn chain_decoding_is_exactly_lossless() {
    const HORIZON: usize = 3;
    for v in 2..=4 {
        for l in 1..=2 {
            for salt in 0..3u64 {
                let q = |prefix: &[u32]| table(prefix, v, 2 * salt);
                let p = |prefix: &[u32]| {
                    // Draft support must cover only its own samples; give it
                    // different zeros from the target.
                    table(prefix, v, 2 * salt + 1)
                };
                let dist = enumerate(|coin| {
                    let mut seq: Vec<u32> = Vec::new();
                    while seq.len() < HORIZON {
                        let mut drafted = Vec::new();
                        let mut ps = Vec::new();
                        let mut qs = Vec::new();
                        let mut ctx = seq.clone();
                        for _ in 0..l {
                            let pd = p(&ctx);
                            let x = coin.categorical(&pd) as u32;
                            qs.push(q(&ctx));
                            ps.push(pd);
                            drafted.push(x);
                            ctx.push(x);
                        }
                        qs.push(q(&ctx));
                        let res = verify_chain_with(&drafted, &ps, &qs, false, coin).unwrap();
                        assert_eq!(res.accepted_count, res.accepted.len());
                        seq.extend(res.emitted());
                    }
                    seq.truncate(HORIZON);
                    seq
                });
                let total = dist.values().fold(Q::zero(), |s, x| s + x);
                assert_eq!(total, Q::one());
                for (seq, prob) in &dist {
                    let mut want = Q::one();
                    for t in 0..seq.len() {
                        want *= q(&seq[..t])[seq[t] as usize];
                    }
                    assert_eq!(*prob, want, "V={v} L={l} salt={salt} seq={seq:?}");
                }
            }
        }
    }
}

#[test]
fn two_token_example_accepts_with_one_minus_tv() {
    let p = vec![r(1, 2), r(1, 2)];
    let q = vec![r(4, 5), r(1, 5)];
    let dist = enumerate(|coin| {
        let x = coin.categorical(&p) as u32;
        let res = verify_chain_with(&[x], std::slice::from_ref(&p), &[q.clone(), q.clone()], false, coin).unwrap();
        (res.accepted_count, res.emitted()[0])
    });
    let accept = dist.iter().filter(|((a, _), _)| *a == 1).fold(Q::zero(), |s, (_, w)| s + w);
    assert_eq!(accept, r(7, 10));
    for x in 0..2u32 {
        let m = dist.iter().filter(|((_, t), _)| *t == x).fold(Q::zero(), |s, (_, w)| s + w);
        assert_eq!(m, q[x as usize]);
    }
}

#[test]
fn star_tree_with_sampled_children_is_lossless() {
    let q = vec![r(1, 2), r(1, 3), r(1, 6)];
    let p = vec![r(1, 5), r(0, 1), r(4, 5)];
    let dist = enumerate(|coin| {
        let a = coin.categorical(&p) as u32;
        let b = coin.categorical(&p) as u32;
        let res = verify_tree_with(
            &[9, a, b],
            &[None, Some(0), Some(0)],
            &[p.clone(), vec![], vec![]],
            &[q.clone(), q.clone(), q.clone()],
            false,
            coin,
        )
        .unwrap();
        res.emitted()[0]
    });
    for (x, prob) in dist {
        assert_eq!(prob, q[x as usize]);
    }
}

#[test]
fn identical_distributions_accept_everything() {
    let q = vec![vec![0.2, 0.5, 0.3]; 4];
    let mut rng = Rng::new(1);
    for _ in 0..200 {
        let res = verify_chain(&[1, 0, 2], &q[..3], &q, &SamplingParams::default(), &mut rng).unwrap();
        assert_eq!(res.accepted_count, 3);
        assert_eq!(res.tokens_generated(), 4);
        assert_eq!(res.depth_accepted, vec![1, 1, 1]);
    }
}

#[test]
fn greedy_mismatch_yields_the_target_argmax() {
    let p = vec![vec![0.9, 0.1, 0.0]];
    let q = vec![vec![0.2, 0.7, 0.1], vec![1.0, 0.0, 0.0]];
    let res = verify_chain(&[0], &p, &q, &SamplingParams::greedy(), &mut Rng::new(0)).unwrap();
    assert_eq!(res.accepted_count, 0);
    assert_eq!(res.bonus, 1);
    assert_eq!(res.depth_reached, vec![1]);
    assert_eq!(res.depth_accepted, vec![0]);
}

#[test]
fn chain_tree_matches_chain_verification() {
    let mut gen = Rng::new(5);
    let mut rand_dist = |v: usize| {
        let w: Vec<f64> = (0..v).map(|_| gen.uniform() + 0.05).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect::<Vec<f64>>()
    };
    for seed in 0..300u64 {
        let l = 1 + seed as usize % 4;
        let p: Vec<Vec<f64>> = (0..l).map(|_| rand_dist(5)).collect();
        let q: Vec<Vec<f64>> = (0..=l).map(|_| rand_dist(5)).collect();
        let tokens: Vec<u32> = (0..l).map(|i| ((seed as usize + 3 * i) % 5) as u32).collect();
        let chain = verify_chain_with(&tokens, &p, &q, false, &mut Rng::new(seed)).unwrap();

        let mut all = vec![7u32];
        all.extend(&tokens);
        let parents: Vec<Option<usize>> = (0..=l).map(|i| i.checked_sub(1)).collect();
        let mut draft = p.clone();
        draft.push(Vec::new());
        let tree = verify_tree_with(&all, &parents, &draft, &q, false, &mut Rng::new(seed)).unwrap();
        assert_eq!(chain, tree, "seed {seed}");
    }
}

#[test]
fn all_children_rejected_gives_bonus_only() {
    // The target puts no mass on either child.
    let q = vec![vec![0.0, 0.0, 1.0]; 3];
    let p = vec![vec![0.5, 0.5, 0.0], vec![], vec![]];
    let res = verify_tree_with(&[0, 0, 1], &[None, Some(0), Some(0)], &p, &q, false, &mut Rng::new(3)).unwrap();
    assert_eq!(res.accepted_count, 0);
    assert!(res.accepted.is_empty());
    assert_eq!(res.bonus, 2);
    assert_eq!(res.depth_reached, vec![1]);
}

#[test]
fn greedy_tree_descends_the_argmax_child() {
    let q = vec![vec![0.1, 0.9], vec![0.8, 0.2], vec![0.3, 0.7], vec![0.5, 0.5]];
    let res = verify_tree_with(
        &[0, 0, 1, 0],
        &[None, Some(0), Some(0), Some(2)],
        &[vec![0.5, 0.5], vec![], vec![1.0, 0.0], vec![]],
        &q,
        true,
        &mut Rng::new(0),
    )
    .unwrap();
    assert_eq!(res.accepted_nodes, vec![2]);
    assert_eq!(res.bonus, 1);
}

#[test]
fn zero_draft_probability_is_an_invariant_violation() {
    let p = vec![vec![1.0, 0.0]];
    let q = vec![vec![0.5, 0.5]; 2];
    let err = verify_chain(&[1], &p, &q, &SamplingParams::default(), &mut Rng::new(0)).unwrap_err();
    assert!(matches!(err, crate::HassError::Invariant(_)));
}

#[test]
fn shape_errors() {
    let p = vec![vec![0.5, 0.5]];
    assert!(verify_chain(&[0], &p, &p, &SamplingParams::default(), &mut Rng::new(0)).is_err());
    assert!(verify_tree_with(&[0, 1], &[None, Some(1)], &[p[0].clone(), vec![]], &[p[0].clone(), p[0].clone()], false, &mut Rng::new(0)).is_err());
}

#[test]
fn residual_falls_back_when_nothing_is_left() {
    assert_eq!(residual(&[0.5, 0.5], &[0.5, 0.5]), vec![0.5, 0.5]);
    let res: Vec<f64> = residual(&[0.8, 0.2], &[0.5, 0.5]);
    assert!((res[0] - 1.0).abs() < 1e-15 && res[1] == 0.0);
}
