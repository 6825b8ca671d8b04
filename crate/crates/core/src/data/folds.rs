use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Contiguous-block assignment of windows to folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    /// Fold id of each window, non-decreasing in window index.
    pub assignments: Vec<usize>,
}

/// Window indices for one train/test cycle.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Training windows removed because they overlap the test block.
    pub dropped: Vec<usize>,
}

/// Splits `n_windows` into `n_folds` contiguous blocks whose sizes differ by
/// at most one. Blocks follow time order, so `seed` does not change the plan.
pub fn plan_folds(n_windows: usize, n_folds: usize, seed: u64) -> Result<FoldPlan> {
    let _ = seed;
    if n_folds < 2 {
        return Err(Error::Contract(format!(
            "cross-validation needs at least 2 folds, got {n_folds}"
        )));
    }
    if n_folds > n_windows {
        return Err(Error::Contract(format!("{n_folds} folds for {n_windows} windows")));
    }
    let base = n_windows / n_folds;
    let extra = n_windows % n_folds;
    let mut assignments = Vec::with_capacity(n_windows);
    for f in 0..n_folds {
        let size = base + usize::from(f < extra);
        assignments.extend(std::iter::repeat_n(f, size));
    }
    Ok(FoldPlan { n_folds, assignments })
}

/// Overlap-aware split: windows are `[start, start + window_len)` on the raw
/// sample axis, and training windows that share any sample with the test
/// block are dropped.
fn split_by_mask(starts: &[usize], window_len: usize, is_test: impl Fn(usize) -> bool) -> Result<Split> {
    let test: Vec<usize> = (0..starts.len()).filter(|&i| is_test(i)).collect();
    if test.is_empty() {
        return Err(Error::Contract("empty test block".into()));
    }
    let lo = test.iter().map(|&i| starts[i]).min().unwrap_or(0);
    let hi = test.iter().map(|&i| starts[i] + window_len).max().unwrap_or(0);
    let mut split = Split {
        test,
        ..Split::default()
    };
    for i in (0..starts.len()).filter(|&i| !is_test(i)) {
        let (s, e) = (starts[i], starts[i] + window_len);
        if s < hi && e > lo {
            split.dropped.push(i);
        } else {
            split.train.push(i);
        }
    }
    if split.train.is_empty() {
        return Err(Error::Contract(
            "no training windows left after removing overlaps".into(),
        ));
    }
    Ok(split)
}

impl FoldPlan {
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds];
        for &f in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }

    /// Fold `fold` is the test block; every other window trains unless it
    /// straddles the cut.
    pub fn split(&self, starts: &[usize], window_len: usize, fold: usize) -> Result<Split> {
        if starts.len() != self.assignments.len() {
            return Err(Error::Contract(format!(
                "plan covers {} windows, got {}",
                self.assignments.len(),
                starts.len()
            )));
        }
        if fold >= self.n_folds {
            return Err(Error::Contract(format!("fold {fold} out of {}", self.n_folds)));
        }
        split_by_mask(starts, window_len, |i| self.assignments[i] == fold)
    }
}

/// First `round(fraction * n)` windows train, the final block tests.
pub fn holdout_split(starts: &[usize], window_len: usize, fraction: f64, seed: u64) -> Result<Split> {
    let _ = seed;
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Contract(format!("holdout fraction {fraction} outside (0, 1)")));
    }
    let n = starts.len();
    let n_train = (fraction * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::Contract(format!(
            "holdout {fraction} of {n} windows leaves an empty side"
        )));
    }
    split_by_mask(starts, window_len, |i| i >= n_train)
}
