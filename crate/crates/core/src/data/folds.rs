use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A partition of row indices into `k` folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Vec<usize>>,
    pub seed: u64,
    pub stratified: bool,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn test(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    /// All rows outside `fold`, ascending.
    pub fn train(&self, fold: usize) -> Vec<usize> {
        let mut rows: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        rows.sort_unstable();
        rows
    }
}

/// Stratified `k`-fold partition of `0..labels.len()`.
///
/// Each class is shuffled and dealt round-robin over the folds. The dealing
/// position carries over from one class to the next, so every
/// (fold, class) count is the floor or ceiling of `class_total / k` and fold
/// sizes differ by at most one.
pub fn make_folds(labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::config(format!("need at least 2 folds, got {k}")));
    }
    if k > labels.len() {
        return Err(Error::config(format!(
            "{k} folds requested for {} rows",
            labels.len()
        )));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for mut members in by_class {
        members.shuffle(&mut rng);
        for row in members {
            folds[next].push(row);
            next = (next + 1) % k;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldPlan {
        folds,
        seed,
        stratified: true,
    })
}

/// Stratified folds over a subset of rows; the plan holds original row ids.
pub fn make_folds_over(labels: &[usize], rows: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    let sub: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
    let mut plan = make_folds(&sub, k, seed)?;
    for fold in &mut plan.folds {
        for i in fold.iter_mut() {
            *i = rows[*i];
        }
        fold.sort_unstable();
    }
    Ok(plan)
}
