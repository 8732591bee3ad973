use std::sync::Arc;

use crate::error::{bail, Result};
use crate::numerics::{AttnMask, BoolMatrix};

/// Attention mask of forward `j` (1-based) over the key blocks of forwards
/// `1..=j`, each `seq_len` long.
///
/// Query `i` may see key `(d, m)` iff `d == 1 && m <= i + 1 - j` or
/// `2 <= d <= j && m == i - j + d`: target-feature keys up to where the
/// simulated draft round starts, then one drafter-feature key from each
/// later forward. Rows `i < j - 1` have too little history for such a
/// round and are left empty. `j == 1` is the causal mask.
pub fn build_alignment_mask(j: usize, seq_len: usize) -> Result<BoolMatrix> {
    if j == 0 || seq_len < j {
        bail!(Parameter, "alignment mask needs 1 <= j <= seq_len, got j={j}, seq_len={seq_len}");
    }
    Ok(BoolMatrix::from_fn(seq_len, j * seq_len, |i, c| {
        let (d, m) = (c / seq_len + 1, c % seq_len);
        if i + 1 < j {
            false
        } else if d == 1 {
            m + j <= i + 1
        } else {
            m + j == i + d
        }
    }))
}

/// Masks and loss eligibility for every forward of an aligned training
/// step.
#[derive(Clone, Debug)]
pub struct AlignmentPlan {
    steps: usize,
    seq_len: usize,
    masks: Vec<BoolMatrix>,
    attn: Vec<Arc<AttnMask>>,
}

impl AlignmentPlan {
    pub fn new(steps: usize, seq_len: usize) -> Result<Self> {
        if steps == 0 {
            bail!(Parameter, "alignment needs at least one step");
        }
        let mut masks = Vec::with_capacity(steps);
        let mut attn = Vec::with_capacity(steps);
        for j in 1..=steps {
            let m = build_alignment_mask(j, seq_len)?;
            // Ineligible rows still run through the block; they attend to
            // their own key only and never feed an eligible row or a loss.
            let rows = (0..seq_len)
                .map(|i| {
                    let keys: Vec<u32> = (0..m.cols()).filter(|&c| m.get(i, c)).map(|c| c as u32).collect();
                    if keys.is_empty() {
                        vec![((j - 1) * seq_len + i) as u32]
                    } else {
                        keys
                    }
                })
                .collect();
            attn.push(Arc::new(AttnMask::from_rows(m.cols(), rows)?));
            masks.push(m);
        }
        Ok(Self { steps, seq_len, masks, attn })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Mask of forward `j` (1-based).
    pub fn mask(&self, j: usize) -> &BoolMatrix {
        &self.masks[j - 1]
    }

    pub(crate) fn attention_mask(&self, j: usize) -> &Arc<AttnMask> {
        &self.attn[j - 1]
    }

    pub fn is_eligible(&self, j: usize, i: usize) -> bool {
        i + 1 >= j
    }

    pub fn eligible_per_sequence(&self, j: usize) -> usize {
        self.seq_len + 1 - j
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(m: &BoolMatrix, i: usize) -> Vec<bool> {
        m.row(i).to_vec()
    }

    #[test]
    fn single_step_is_causal() {
        for s in 1..=64 {
            assert_eq!(build_alignment_mask(1, s).unwrap(), BoolMatrix::causal(s));
        }
    }

    #[test]
    fn two_step_example() {
        let m = build_alignment_mask(2, 4).unwrap();
        let (t, f) = (true, false);
        assert_eq!(row(&m, 3), vec![t, t, t, f, f, f, f, t]);
        assert!(row(&m, 0).iter().all(|&b| !b));
    }

    #[test]
    fn three_step_example() {
        let m = build_alignment_mask(3, 5).unwrap();
        let mut want = vec![false; 15];
        for k in [0, 1, 2, 5 + 3, 10 + 4] {
            want[k] = true;
        }
        assert_eq!(row(&m, 4), want);
    }

    #[test]
    fn too_short_sequence_is_rejected() {
        assert!(matches!(build_alignment_mask(3, 2), Err(crate::HassError::Parameter(_))));
        assert!(build_alignment_mask(0, 2).is_err());
    }

    /// The predicate evaluated literally over signed integers.
    fn predicate(j: i64, i: i64, d: i64, m: i64) -> bool {
        (d == 1 && m <= i - j + 1) || (2 <= d && d <= j && m == i - j + d)
    }

    proptest! {
        #[test]
        fn matches_predicate_and_cardinality(j in 1usize..6, extra in 0usize..10) {
            let s = j + extra;
            let m = build_alignment_mask(j, s).unwrap();
            for i in 0..s {
                let empty = (0..m.cols()).all(|c| !m.get(i, c));
                prop_assert_eq!(empty, i + 1 < j);
                if i + 1 >= j {
                    prop_assert_eq!(m.row_count(i), i + 1);
                    for c in 0..m.cols() {
                        let (d, k) = ((c / s + 1) as i64, (c % s) as i64);
                        prop_assert_eq!(m.get(i, c), predicate(j as i64, i as i64, d, k));
                    }
                }
            }
        }
    }

    #[test]
    fn plan_patches_only_ineligible_rows() {
        let p = AlignmentPlan::new(3, 6).unwrap();
        for j in 1..=3 {
            let a = p.attention_mask(j).to_matrix();
            for i in 0..6 {
                if p.is_eligible(j, i) {
                    assert_eq!(a.row(i), p.mask(j).row(i));
                } else {
                    assert_eq!(a.row_count(i), 1);
                    assert!(a.get(i, (j - 1) * 6 + i));
                }
            }
            assert_eq!(p.eligible_per_sequence(j), 7 - j);
        }
    }
}
