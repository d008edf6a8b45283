//! Rank statistics over a datasets × methods result matrix: average ranks,
//! the Friedman test, Nemenyi critical differences, win counts and summary
//! statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

/// Mean test AUC per dataset (rows) and method (columns); `None` marks a
/// failed or missing cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultMatrix {
    pub datasets: Vec<String>,
    pub methods: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl ResultMatrix {
    pub fn new(datasets: Vec<String>, methods: Vec<String>, values: Vec<Vec<Option<f64>>>) -> Result<Self> {
        if values.len() != datasets.len() || values.iter().any(|r| r.len() != methods.len()) {
            return Err(Error::shape("result matrix does not match its labels"));
        }
        if let Some(v) = values.iter().flatten().flatten().find(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite result value {v}")));
        }
        Ok(Self {
            datasets,
            methods,
            values,
        })
    }

    pub fn get(&self, dataset: usize, method: usize) -> Option<f64> {
        self.values[dataset][method]
    }

    pub fn column(&self, method: usize) -> Vec<f64> {
        self.values.iter().filter_map(|r| r[method]).collect()
    }

    /// Rows without missing cells, and how many rows were dropped.
    pub fn complete_rows(&self) -> (Vec<Vec<f64>>, usize) {
        let rows: Vec<Vec<f64>> = self
            .values
            .iter()
            .filter(|r| r.iter().all(Option::is_some))
            .map(|r| r.iter().map(|v| v.expect("checked")).collect())
            .collect();
        let dropped = self.values.len() - rows.len();
        (rows, dropped)
    }
}

/// Ranks of one row: 1 for the largest value, ties share the mean of the
/// ranks they span.
pub fn rank_row(row: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    let mut ranks = vec![0.0; row.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && row[order[j]] == row[order[i]] {
            j += 1;
        }
        // positions i..j hold ranks i+1..=j
        let shared = (i + 1 + j) as f64 / 2.0;
        for &o in &order[i..j] {
            ranks[o] = shared;
        }
        i = j;
    }
    ranks
}

/// Average rank per method over the complete rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AverageRanks {
    pub ranks: Vec<f64>,
    /// Complete rows used.
    pub n_datasets: usize,
    /// Rows dropped for having a missing cell.
    pub n_dropped: usize,
}

pub fn average_ranks(m: &ResultMatrix) -> Result<AverageRanks> {
    let (rows, n_dropped) = m.complete_rows();
    if rows.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} complete dataset rows, need at least 2",
            rows.len()
        )));
    }
    let k = m.methods.len();
    let mut sums = vec![0.0; k];
    for row in &rows {
        for (s, r) in sums.iter_mut().zip(rank_row(row)) {
            *s += r;
        }
    }
    let n = rows.len() as f64;
    Ok(AverageRanks {
        ranks: sums.into_iter().map(|s| s / n).collect(),
        n_datasets: rows.len(),
        n_dropped,
    })
}

/// Friedman χ² statistic and its upper-tail p-value with `k − 1` degrees of
/// freedom.
pub fn friedman(m: &ResultMatrix) -> Result<(f64, f64)> {
    let k = m.methods.len();
    if k < 3 {
        return Err(Error::InsufficientData(format!("Friedman test needs k >= 3 methods, got {k}")));
    }
    let avg = average_ranks(m)?;
    let n = avg.n_datasets as f64;
    let kf = k as f64;
    let sum_sq: f64 = avg.ranks.iter().map(|r| (r * n).powi(2)).sum();
    let chi2 = (12.0 / (n * kf * (kf + 1.0)) * sum_sq - 3.0 * n * (kf + 1.0)).max(0.0);
    Ok((chi2, chi2_sf(chi2, kf - 1.0)))
}

/// Upper tail of the chi-square distribution.
pub fn chi2_sf(x: f64, dof: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    ChiSquared::new(dof).expect("positive degrees of freedom").sf(x)
}

// q_alpha / sqrt(2) of the studentized range with infinite degrees of
// freedom, k = 2..=20; computed as
// scipy.stats.studentized_range.ppf(1 - alpha, k, inf) / sqrt(2).
const Q_05: [f64; 19] = [
    1.959964, 2.343701, 2.569032, 2.727774, 2.849705, 2.948320, 3.030878, 3.101730, 3.163684,
    3.218654, 3.268004, 3.312739, 3.353618, 3.391230, 3.426041, 3.458425, 3.488685, 3.517073,
    3.543799,
];
const Q_10: [f64; 19] = [
    1.644854, 2.052293, 2.291341, 2.459516, 2.588521, 2.692732, 2.779884, 2.854606, 2.919889,
    2.977768, 3.029694, 3.076733, 3.119693, 3.159199, 3.195743, 3.229723, 3.261461, 3.291224,
    3.319233,
];

/// Nemenyi critical difference `q_α · sqrt(k(k+1) / (6N))` for `k` methods
/// over `n` datasets. Supported: `alpha ∈ {0.05, 0.10}`, `2 ≤ k ≤ 20`.
pub fn nemenyi_cd(k: usize, n: usize, alpha: f64) -> Result<f64> {
    let table = if (alpha - 0.05).abs() < 1e-12 {
        &Q_05
    } else if (alpha - 0.10).abs() < 1e-12 {
        &Q_10
    } else {
        return Err(Error::UnsupportedK { k, alpha });
    };
    if !(2..=20).contains(&k) {
        return Err(Error::UnsupportedK { k, alpha });
    }
    if n < 2 {
        return Err(Error::InsufficientData(format!("critical difference needs N >= 2, got {n}")));
    }
    let q = table[k - 2];
    Ok(q * ((k * (k + 1)) as f64 / (6.0 * n as f64)).sqrt())
}

/// Maximal runs of rank-sorted methods whose extreme ranks differ by at
/// most `cd`. Each group lists method indices in rank order; every method
/// appears in at least one group.
pub fn significance_groups(ranks: &[f64], cd: f64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..ranks.len()).collect();
    order.sort_by(|&a, &b| ranks[a].total_cmp(&ranks[b]).then(a.cmp(&b)));
    let mut groups = Vec::new();
    let mut last_end: Option<usize> = None;
    for i in 0..order.len() {
        let mut j = i;
        while j + 1 < order.len() && ranks[order[j + 1]] - ranks[order[i]] <= cd {
            j += 1;
        }
        if last_end.map_or(true, |e| j > e) {
            groups.push(order[i..=j].to_vec());
            last_end = Some(j);
        }
    }
    groups
}

/// Per method, the number of datasets on which it attains the row maximum.
/// Tied maxima each score; missing cells never do.
pub fn wins(m: &ResultMatrix) -> Vec<usize> {
    let mut counts = vec![0; m.methods.len()];
    for row in &m.values {
        let best = row.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        for (c, v) in counts.iter_mut().zip(row) {
            if *v == Some(best) {
                *c += 1;
            }
        }
    }
    counts
}

fn median_of_sorted(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    median_of_sorted(&s)
}

/// Median absolute deviation from the median (unscaled).
pub fn mad(xs: &[f64]) -> f64 {
    let m = median(xs);
    median(&xs.iter().map(|x| (x - m).abs()).collect::<Vec<_>>())
}

/// Linear-interpolation percentile of sorted data, `q ∈ [0, 1]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile-bootstrap 95% interval of the median.
pub fn bootstrap_median_ci(xs: &[f64], resamples: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut medians: Vec<f64> = (0..resamples)
        .map(|_| {
            let mut sample: Vec<f64> = (0..xs.len()).map(|_| xs[rng.gen_range(0..xs.len())]).collect();
            sample.sort_by(f64::total_cmp);
            median_of_sorted(&sample)
        })
        .collect();
    medians.sort_by(f64::total_cmp);
    (percentile(&medians, 0.025), percentile(&medians, 0.975))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    /// Absent when fewer than two complete rows exist.
    pub mean_rank: Option<f64>,
    pub n_datasets: usize,
    pub mean_auc: f64,
    pub median_auc: f64,
    pub mad: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean_wall_time_s: Option<f64>,
    pub median_wall_time_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub methods: Vec<MethodSummary>,
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Per-method summary of `m`. `wall_times` holds seconds per cell in the
/// same layout when available.
pub fn summary_stats(m: &ResultMatrix, wall_times: Option<&ResultMatrix>, seed: u64) -> Result<SummaryStats> {
    let ranks = average_ranks(m).ok();
    let mut out = Vec::with_capacity(m.methods.len());
    for (j, name) in m.methods.iter().enumerate() {
        let col = m.column(j);
        if col.is_empty() {
            return Err(Error::InsufficientData(format!("no results for method {name}")));
        }
        let (ci_low, ci_high) = bootstrap_median_ci(&col, BOOTSTRAP_RESAMPLES, seed.wrapping_add(j as u64));
        let times = wall_times.map(|w| w.column(j)).filter(|t| !t.is_empty());
        out.push(MethodSummary {
            method: name.clone(),
            mean_rank: ranks.as_ref().map(|r| r.ranks[j]),
            n_datasets: col.len(),
            mean_auc: col.iter().sum::<f64>() / col.len() as f64,
            median_auc: median(&col),
            mad: mad(&col),
            ci_low,
            ci_high,
            mean_wall_time_s: times.as_ref().map(|t| t.iter().sum::<f64>() / t.len() as f64),
            median_wall_time_s: times.as_ref().map(|t| median(t)),
        });
    }
    Ok(SummaryStats { methods: out })
}

/// Everything a critical-difference report needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub methods: Vec<String>,
    pub ranks: Vec<f64>,
    /// Friedman statistic; absent for fewer than three methods.
    pub chi2: Option<f64>,
    pub p: Option<f64>,
    pub k: usize,
    pub n: usize,
    pub n_dropped: usize,
    pub alpha: f64,
    pub cd: f64,
    /// Groups of mutually indistinguishable methods, by name.
    pub groups: Vec<Vec<String>>,
    pub wins: Vec<usize>,
}

pub fn rank_summary(m: &ResultMatrix, alpha: f64) -> Result<RankSummary> {
    let k = m.methods.len();
    if k < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 methods, got {k}")));
    }
    let avg = average_ranks(m)?;
    let (chi2, p) = if k >= 3 {
        let (c, p) = friedman(m)?;
        (Some(c), Some(p))
    } else {
        (None, None)
    };
    let cd = nemenyi_cd(k, avg.n_datasets, alpha)?;
    let groups = significance_groups(&avg.ranks, cd)
        .into_iter()
        .map(|g| g.into_iter().map(|i| m.methods[i].clone()).collect())
        .collect();
    Ok(RankSummary {
        methods: m.methods.clone(),
        ranks: avg.ranks,
        chi2,
        p,
        k,
        n: avg.n_datasets,
        n_dropped: avg.n_dropped,
        alpha,
        cd,
        groups,
        wins: wins(m),
    })
}

impl RankSummary {
    /// CD-diagram rows `(method, rank, group_id)`, one per group membership.
    pub fn cd_rows(&self) -> Vec<(String, f64, usize)> {
        let mut rows = Vec::new();
        for (g, members) in self.groups.iter().enumerate() {
            for name in members {
                let j = self.methods.iter().position(|m| m == name).expect("group member");
                rows.push((name.clone(), self.ranks[j], g));
            }
        }
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(rows: Vec<Vec<f64>>) -> ResultMatrix {
        let k = rows[0].len();
        ResultMatrix::new(
            (0..rows.len()).map(|i| format!("d{i}")).collect(),
            (0..k).map(|j| format!("m{j}")).collect(),
            rows.into_iter().map(|r| r.into_iter().map(Some).collect()).collect(),
        )
        .unwrap()
    }

    /// Rank by counting: 1 + (number strictly greater) + (ties - 1) / 2.
    fn naive_ranks(row: &[f64]) -> Vec<f64> {
        row.iter()
            .map(|&x| {
                let greater = row.iter().filter(|&&y| y > x).count() as f64;
                let equal = row.iter().filter(|&&y| y == x).count() as f64;
                1.0 + greater + (equal - 1.0) / 2.0
            })
            .collect()
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_row(&[0.9, 0.8, 0.7]), vec![1.0, 2.0, 3.0]);
        assert_eq!(rank_row(&[0.9, 0.9, 0.7]), vec![1.5, 1.5, 3.0]);
        let m = matrix(vec![vec![0.9, 0.8], vec![0.7, 0.95]]);
        assert_eq!(average_ranks(&m).unwrap().ranks, vec![1.5, 1.5]);
    }

    #[test]
    fn too_few_rows() {
        let m = matrix(vec![vec![0.9, 0.8, 0.7]]);
        assert!(matches!(average_ranks(&m), Err(Error::InsufficientData(_))));
        let m = ResultMatrix::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["x".into(), "y".into()],
            vec![vec![Some(0.9), None], vec![Some(0.8), Some(0.7)], vec![Some(0.6), Some(0.7)]],
        )
        .unwrap();
        let r = average_ranks(&m).unwrap();
        assert_eq!((r.n_datasets, r.n_dropped), (2, 1));
    }

    #[test]
    fn friedman_examples() {
        let ordered = matrix(vec![vec![0.9, 0.8, 0.7]; 4]);
        let (chi2, p) = friedman(&ordered).unwrap();
        assert!((chi2 - 8.0).abs() < 1e-12);
        assert!((p - (-4.0f64).exp()).abs() < 1e-12);
        assert!((p - 0.0183).abs() < 1e-4);

        let flat = matrix(vec![vec![0.5, 0.5, 0.5]; 3]);
        assert_eq!(friedman(&flat).unwrap(), (0.0, 1.0));
        assert!(friedman(&matrix(vec![vec![0.1, 0.2]; 3])).is_err());
    }

    #[test]
    fn critical_differences() {
        assert!((nemenyi_cd(2, 10, 0.05).unwrap() - 0.6198).abs() < 1e-4);
        assert!((nemenyi_cd(7, 68, 0.05).unwrap() - 1.0926).abs() < 1e-3);
        let mut prev = f64::INFINITY;
        for n in 2..50 {
            let cd = nemenyi_cd(5, n, 0.05).unwrap();
            assert!(cd < prev);
            prev = cd;
        }
        assert!(matches!(nemenyi_cd(21, 10, 0.05), Err(Error::UnsupportedK { .. })));
        assert!(matches!(nemenyi_cd(1, 10, 0.05), Err(Error::UnsupportedK { .. })));
        assert!(nemenyi_cd(3, 10, 0.10).unwrap() < nemenyi_cd(3, 10, 0.05).unwrap());
    }

    #[test]
    fn group_examples() {
        assert_eq!(significance_groups(&[1.0, 1.2, 1.9], 1.0), vec![vec![0, 1, 2]]);
        assert_eq!(significance_groups(&[1.0, 5.0], 1.0), vec![vec![0], vec![1]]);
        assert_eq!(significance_groups(&[1.0, 1.5, 3.0], 1.0), vec![vec![0, 1], vec![2]]);
        assert_eq!(significance_groups(&[3.0, 1.0, 2.0], 1.0), vec![vec![1, 2], vec![2, 0]]);
    }

    #[test]
    fn win_examples() {
        let m = ResultMatrix::new(
            vec!["a".into(), "b".into()],
            vec!["x".into(), "y".into(), "z".into()],
            vec![vec![Some(0.9), Some(0.9), None], vec![Some(0.7), Some(0.8), None]],
        )
        .unwrap();
        assert_eq!(wins(&m), vec![1, 2, 0]);
    }

    #[test]
    fn summary_examples() {
        assert_eq!((median(&[0.9, 0.9, 0.9]), mad(&[0.9, 0.9, 0.9])), (0.9, 0.0));
        assert!((mad(&[0.8, 0.9, 1.0]) - 0.1).abs() < 1e-12);
        assert_eq!(median(&[0.8, 1.0, 0.9]), 0.9);
        let m = matrix(vec![vec![0.9, 0.8], vec![0.85, 0.7], vec![0.95, 0.6]]);
        let s = summary_stats(&m, None, 0).unwrap();
        assert_eq!(s.methods[0].mean_rank, Some(1.0));
        assert!((s.methods[1].mean_auc - 0.7).abs() < 1e-12);
        assert_eq!(s, summary_stats(&m, None, 0).unwrap());
    }

    #[test]
    fn rank_summary_two_methods() {
        let m = matrix(vec![vec![0.9, 0.8], vec![0.8, 0.8], vec![0.7, 0.75]]);
        let r = rank_summary(&m, 0.05).unwrap();
        assert_eq!(r.k, 2);
        assert!(r.chi2.is_none());
        assert!((r.cd - 1.959964 * (6.0f64 / 18.0).sqrt()).abs() < 1e-12);
        assert_eq!(r.groups, vec![vec!["m0".to_string(), "m1".to_string()]]);
        assert_eq!(r.cd_rows().len(), 2);
    }

    fn random_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2usize..=10, 3usize..=8).prop_flat_map(|(n, k)| {
            prop::collection::vec(prop::collection::vec((0u8..6).prop_map(|v| 0.5 + v as f64 / 10.0), k), n)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn ranks_and_friedman_match_oracle(rows in random_matrix()) {
            let m = matrix(rows.clone());
            let (n, k) = (rows.len() as f64, rows[0].len() as f64);
            let mut sums = vec![0.0; rows[0].len()];
            for row in &rows {
                let r = naive_ranks(row);
                prop_assert!((r.iter().sum::<f64>() - k * (k + 1.0) / 2.0).abs() < 1e-12);
                for (s, x) in sums.iter_mut().zip(r) { *s += x; }
            }
            let got = average_ranks(&m).unwrap().ranks;
            for (g, s) in got.iter().zip(&sums) {
                prop_assert!((g - s / n).abs() < 1e-9);
            }
            let chi2 = 12.0 / (n * k * (k + 1.0)) * sums.iter().map(|s| s * s).sum::<f64>() - 3.0 * n * (k + 1.0);
            prop_assert!((friedman(&m).unwrap().0 - chi2.max(0.0)).abs() < 1e-9);

            let shifted = matrix(rows.iter().map(|r| r.iter().map(|v| v + 0.25).collect()).collect());
            prop_assert_eq!(average_ranks(&shifted).unwrap(), average_ranks(&m).unwrap());
            prop_assert_eq!(friedman(&shifted).unwrap(), friedman(&m).unwrap());
            prop_assert_eq!(wins(&shifted), wins(&m));
        }

        #[test]
        fn groups_cover_and_respect_cd(ranks in prop::collection::vec(1.0f64..8.0, 2..9), cd in 0.1f64..3.0) {
            let groups = significance_groups(&ranks, cd);
            for j in 0..ranks.len() {
                prop_assert!(groups.iter().any(|g| g.contains(&j)));
            }
            for g in &groups {
                let lo = g.iter().map(|&i| ranks[i]).fold(f64::INFINITY, f64::min);
                let hi = g.iter().map(|&i| ranks[i]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(hi - lo <= cd);
            }
        }

        #[test]
        fn bootstrap_interval_contains_median(xs in prop::collection::vec(0.5f64..1.0, 1..40), seed in 0u64..100) {
            let (lo, hi) = bootstrap_median_ci(&xs, BOOTSTRAP_RESAMPLES, seed);
            let m = median(&xs);
            prop_assert!(lo <= m && m <= hi, "{} {} {}", lo, m, hi);
        }
    }
}
