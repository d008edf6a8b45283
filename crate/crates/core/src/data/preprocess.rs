use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// Lower clamp for a fitted standard deviation.
pub const MIN_STD: f64 = 1e-8;

/// Statistics fitted on training rows only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessorState {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub medians: Vec<f64>,
    /// Per categorical column: dataset category index -> model index.
    /// Categories unseen at fit time (and missing cells) map to 0.
    pub category_maps: Vec<Vec<usize>>,
}

impl PreprocessorState {
    /// Number of categories seen at fit time per column (excluding the
    /// reserved unknown index).
    pub fn cardinalities(&self) -> Vec<usize> {
        self.category_maps
            .iter()
            .map(|m| m.iter().copied().max().unwrap_or(0))
            .collect()
    }
}

/// Model-ready feature matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub rows: usize,
    pub n_num: usize,
    pub n_cat: usize,
    /// Row-major `rows × n_num`, standardized.
    pub numeric: Vec<f64>,
    /// Row-major `rows × n_cat`, embedding indices.
    pub categorical: Vec<usize>,
}

impl Features {
    pub fn select(&self, idx: &[usize]) -> Features {
        let mut numeric = Vec::with_capacity(idx.len() * self.n_num);
        let mut categorical = Vec::with_capacity(idx.len() * self.n_cat);
        for &i in idx {
            numeric.extend_from_slice(&self.numeric[i * self.n_num..(i + 1) * self.n_num]);
            categorical.extend_from_slice(&self.categorical[i * self.n_cat..(i + 1) * self.n_cat]);
        }
        Features {
            rows: idx.len(),
            n_num: self.n_num,
            n_cat: self.n_cat,
            numeric,
            categorical,
        }
    }
}

/// Features plus their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub features: Features,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Split {
        Split {
            features: self.features.select(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn from_rows(state: &PreprocessorState, ds: &Dataset, rows: &[usize]) -> Split {
        Split {
            features: apply_preprocessor(state, ds, rows),
            labels: ds.labels_of(rows),
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Fits standardization, median imputation and category maps on `train_rows`.
pub fn fit_preprocessor(ds: &Dataset, train_rows: &[usize]) -> Result<PreprocessorState> {
    if train_rows.is_empty() {
        return Err(Error::config("preprocessor fitted on zero rows"));
    }
    let n_num = ds.n_num();
    let mut means = Vec::with_capacity(n_num);
    let mut stds = Vec::with_capacity(n_num);
    let mut medians = Vec::with_capacity(n_num);
    for col in 0..n_num {
        let mut observed: Vec<f64> = train_rows
            .iter()
            .map(|&r| ds.numeric_value(r, col))
            .filter(|v| !v.is_nan())
            .collect();
        let (mean, std) = if observed.is_empty() {
            (0.0, 1.0)
        } else {
            let n = observed.len() as f64;
            let mean = observed.iter().sum::<f64>() / n;
            let var = observed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (mean, var.sqrt().max(MIN_STD))
        };
        means.push(mean);
        stds.push(std);
        medians.push(median(&mut observed));
    }
    let category_maps = (0..ds.n_cat())
        .map(|col| {
            let card = ds.category_labels[col].len();
            let mut seen = vec![false; card + 1];
            for &r in train_rows {
                seen[ds.categorical_value(r, col)] = true;
            }
            let mut next = 0;
            (0..=card)
                .map(|c| {
                    if c > 0 && seen[c] {
                        next += 1;
                        next
                    } else {
                        0
                    }
                })
                .collect()
        })
        .collect();
    Ok(PreprocessorState {
        means,
        stds,
        medians,
        category_maps,
    })
}

/// Standardizes (after median imputation) and re-indexes categories of `rows`.
pub fn apply_preprocessor(state: &PreprocessorState, ds: &Dataset, rows: &[usize]) -> Features {
    let n_num = ds.n_num();
    let n_cat = ds.n_cat();
    let mut numeric = Vec::with_capacity(rows.len() * n_num);
    let mut categorical = Vec::with_capacity(rows.len() * n_cat);
    for &r in rows {
        for col in 0..n_num {
            let mut v = ds.numeric_value(r, col);
            if v.is_nan() {
                v = state.medians[col];
            }
            numeric.push((v - state.means[col]) / state.stds[col]);
        }
        for col in 0..n_cat {
            categorical.push(state.category_maps[col][ds.categorical_value(r, col)]);
        }
    }
    Features {
        rows: rows.len(),
        n_num,
        n_cat,
        numeric,
        categorical,
    }
}
