use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// One drafting-verification cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleMetrics {
    pub cycle: usize,
    /// Drafted tokens sent to verification (the root excluded).
    pub drafted: usize,
    /// Accepted draft tokens plus the bonus token.
    pub tokens_generated: usize,
    pub accepted: Vec<u32>,
    pub bonus: u32,
    /// `depth_reached[d]` is 1 when a draft token at depth `d + 1` was
    /// tested, `depth_accepted[d]` when one was accepted.
    pub depth_reached: Vec<u32>,
    pub depth_accepted: Vec<u32>,
    pub draft_secs: f64,
    pub verify_secs: f64,
}

/// Mean tokens generated per cycle.
pub fn compute_tau(cycles: &[CycleMetrics]) -> Result<f64> {
    if cycles.is_empty() {
        bail!(Parameter, "acceptance length of zero cycles");
    }
    Ok(cycles.iter().map(|c| c.tokens_generated).sum::<usize>() as f64 / cycles.len() as f64)
}

/// Acceptance rate at each speculation step `1..=max_step`: accepts at
/// that depth over the number of times it was reached. `None` where the
/// depth was never reached.
pub fn compute_alpha(cycles: &[CycleMetrics], max_step: usize) -> Vec<Option<f64>> {
    (0..max_step)
        .map(|d| {
            let reached: u64 = cycles.iter().map(|c| c.depth_reached.get(d).copied().unwrap_or(0) as u64).sum();
            let accepted: u64 = cycles.iter().map(|c| c.depth_accepted.get(d).copied().unwrap_or(0) as u64).sum();
            (reached > 0).then(|| accepted as f64 / reached as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cycle(tokens: usize, reached: Vec<u32>, accepted: Vec<u32>) -> CycleMetrics {
        CycleMetrics {
            cycle: 0,
            drafted: reached.len(),
            tokens_generated: tokens,
            accepted: Vec::new(),
            bonus: 0,
            depth_reached: reached,
            depth_accepted: accepted,
            draft_secs: 0.0,
            verify_secs: 0.0,
        }
    }

    #[test]
    fn tau_is_the_mean() {
        let cs: Vec<_> = [3, 5, 4].iter().map(|&t| cycle(t, vec![], vec![])).collect();
        assert_eq!(compute_tau(&cs).unwrap(), 4.0);
        let full: Vec<_> = (0..7).map(|_| cycle(6, vec![1; 5], vec![1; 5])).collect();
        assert_eq!(compute_tau(&full).unwrap(), 6.0);
        assert!(matches!(compute_tau(&[]), Err(crate::HassError::Parameter(_))));
    }

    #[test]
    fn alpha_hand_tally() {
        let cs = vec![cycle(2, vec![1, 1], vec![1, 0]), cycle(3, vec![1, 1], vec![1, 1])];
        assert_eq!(compute_alpha(&cs, 2), vec![Some(1.0), Some(0.5)]);
        let all = vec![cycle(4, vec![1; 3], vec![1; 3]); 5];
        assert_eq!(compute_alpha(&all, 3), vec![Some(1.0); 3]);
        // Depth 2 is never reached after a first-step rejection.
        let cs = vec![cycle(1, vec![1, 0], vec![0, 0])];
        assert_eq!(compute_alpha(&cs, 3), vec![Some(0.0), None, None]);
    }
}
