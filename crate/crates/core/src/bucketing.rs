//! Relative-progress buckets.
//!
//! A token at 0-based position `t` of a rollout of length `n` sits at relative
//! progress `tau = (t + 1) / n` and lands in bucket `min(floor(tau * K), K - 1)`.
//! Progress signals are z-scored within each (group, bucket) cell, pooling
//! tokens of all rollouts of the group, so a token is only compared with peers
//! at the same stage of their responses.

use crate::rollout::PromptGroup;
use crate::stats::mean_and_std;

/// Bucket of token `t` (0-based) in a rollout of `len` tokens.
pub fn bucket_index(t: usize, len: usize, buckets: usize) -> usize {
    debug_assert!(t < len && buckets >= 1);
    let tau = (t + 1) as f64 / len as f64;
    ((tau * buckets as f64).floor() as usize).min(buckets - 1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Per-token bucket indices of a group plus the moments of each cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BucketAssignment {
    pub buckets: usize,
    /// `index[i][t]`: bucket of token `t` of rollout `i`.
    pub index: Vec<Vec<usize>>,
    /// Moments of the progress signal per bucket; `None` for empty buckets.
    pub cells: Vec<Option<CellStats>>,
}

/// Assigns buckets by position and length, then computes the moments of
/// `progress` (one vector per rollout) over the active tokens of each cell.
pub fn assign_buckets(group: &PromptGroup, progress: &[Vec<f64>], buckets: usize) -> BucketAssignment {
    let index: Vec<Vec<usize>> = group
        .rollouts
        .iter()
        .map(|r| (0..r.len()).map(|t| bucket_index(t, r.len(), buckets)).collect())
        .collect();
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); buckets];
    for (i, r) in group.rollouts.iter().enumerate() {
        for t in 0..r.len() {
            if r.active_mask[t] {
                members[index[i][t]].push(progress[i][t]);
            }
        }
    }
    let cells = members
        .iter()
        .map(|m| {
            (!m.is_empty()).then(|| {
                let (mean, std) = mean_and_std(m);
                CellStats { mean, std, count: m.len() }
            })
        })
        .collect();
    BucketAssignment { buckets, index, cells }
}

/// `(s - mean_k) / (std_k + delta)` at every active token; inactive tokens get 0.
pub fn bucket_normalize(
    group: &PromptGroup,
    progress: &[Vec<f64>],
    assignment: &BucketAssignment,
    delta: f64,
) -> Vec<Vec<f64>> {
    group
        .rollouts
        .iter()
        .enumerate()
        .map(|(i, r)| {
            (0..r.len())
                .map(|t| {
                    if !r.active_mask[t] {
                        return 0.0;
                    }
                    let cell = assignment.cells[assignment.index[i][t]]
                        .expect("active token in an unpopulated bucket");
                    (progress[i][t] - cell.mean) / (cell.std + delta)
                })
                .collect()
        })
        .collect()
}
