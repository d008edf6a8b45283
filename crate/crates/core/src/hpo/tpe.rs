//! Tree-structured Parzen Estimator over independent parameters.
//!
//! Complete trials are split at the `ceil(gamma · n)` best objectives. For
//! each parameter a density `l` is fitted to the good observations and `g`
//! to the rest; candidates drawn from `l` are ranked by `Σ log l − log g`.
//! Numeric parameters are modelled in their sampling domain (log space for
//! log-scaled ones, integers widened by half a step on each side) with
//! truncated Gaussian kernels plus one uniform prior component. Categorical
//! parameters use choice frequencies with one pseudo-count per choice.

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::space::{Config, ParamKind, ParamSpec, ParamValue, SearchSpace};
use super::{Trial, TrialStatus};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpeSettings {
    pub n_startup: usize,
    pub gamma_fraction: f64,
    pub n_candidates: usize,
}

impl Default for TpeSettings {
    fn default() -> Self {
        Self {
            n_startup: 10,
            gamma_fraction: 0.25,
            n_candidates: 24,
        }
    }
}

/// Continuous sampling domain of a numeric parameter.
fn domain(spec: &ParamSpec) -> (f64, f64) {
    let (lo, hi) = match spec.kind {
        ParamKind::Int => (spec.low - 0.5, spec.high + 0.5),
        _ => (spec.low, spec.high),
    };
    if spec.log_scale {
        (lo.ln(), hi.ln())
    } else {
        (lo, hi)
    }
}

fn to_internal(spec: &ParamSpec, v: ParamValue) -> f64 {
    let x = v.as_f64();
    if spec.log_scale {
        x.ln()
    } else {
        x
    }
}

fn from_internal(spec: &ParamSpec, u: f64) -> ParamValue {
    let x = if spec.log_scale { u.exp() } else { u };
    match spec.kind {
        ParamKind::Int => ParamValue::Int(x.round().clamp(spec.low, spec.high) as i64),
        _ => ParamValue::Float(x.clamp(spec.low, spec.high)),
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Mixture of a uniform prior and equally weighted truncated Gaussians.
struct Parzen {
    lo: f64,
    hi: f64,
    mus: Vec<f64>,
    sigma: f64,
}

impl Parzen {
    fn fit(lo: f64, hi: f64, mus: Vec<f64>) -> Self {
        let range = hi - lo;
        let n = mus.len();
        let sigma = if n == 0 {
            range
        } else {
            let mean = mus.iter().sum::<f64>() / n as f64;
            let sd = (mus.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            // Silverman's rule, kept within [range / min(100, n + 1), range]
            let floor = range / (n as f64 + 1.0).min(100.0);
            (1.06 * sd * (n as f64).powf(-0.2)).clamp(floor, range)
        };
        Self { lo, hi, mus, sigma }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let k = rng.gen_range(0..=self.mus.len());
        if k == self.mus.len() {
            return rng.gen_range(self.lo..self.hi);
        }
        let mu = self.mus[k];
        for _ in 0..100 {
            let z: f64 = StandardNormal.sample(rng);
            let x = mu + self.sigma * z;
            if (self.lo..=self.hi).contains(&x) {
                return x;
            }
        }
        mu.clamp(self.lo, self.hi)
    }

    fn log_pdf(&self, x: f64) -> f64 {
        let mut total = 1.0 / (self.hi - self.lo);
        for &mu in &self.mus {
            let mass = normal_cdf((self.hi - mu) / self.sigma) - normal_cdf((self.lo - mu) / self.sigma);
            let z = (x - mu) / self.sigma;
            let pdf = (-0.5 * z * z).exp() / (self.sigma * (2.0 * std::f64::consts::PI).sqrt());
            total += pdf / mass.max(1e-300);
        }
        (total / (self.mus.len() + 1) as f64).ln()
    }
}

fn categorical_weights(spec: &ParamSpec, obs: &[ParamValue]) -> Vec<f64> {
    spec.choices
        .iter()
        .map(|c| 1.0 + obs.iter().filter(|o| *o == c).count() as f64)
        .collect()
}

fn sample_uniform<R: Rng + ?Sized>(spec: &ParamSpec, rng: &mut R) -> ParamValue {
    match spec.kind {
        ParamKind::Categorical => spec.choices[rng.gen_range(0..spec.choices.len())],
        _ => {
            let (lo, hi) = domain(spec);
            from_internal(spec, rng.gen_range(lo..hi))
        }
    }
}

pub(super) fn suggest<R: Rng + ?Sized>(
    history: &[Trial],
    settings: &TpeSettings,
    space: &SearchSpace,
    rng: &mut R,
) -> Config {
    let mut complete: Vec<&Trial> = history
        .iter()
        .filter(|t| t.status == TrialStatus::Complete && t.objective.is_some())
        .collect();
    if complete.len() < settings.n_startup.max(1) {
        return space
            .params
            .iter()
            .map(|p| (p.name.clone(), sample_uniform(p, rng)))
            .collect();
    }
    // stable sort keeps earlier trials first among equal objectives
    complete.sort_by(|a, b| b.objective.unwrap().total_cmp(&a.objective.unwrap()));
    let n = complete.len();
    let n_good = ((settings.gamma_fraction * n as f64).ceil() as usize).clamp(1, n);
    let (good, bad) = complete.split_at(n_good);

    let n_candidates = settings.n_candidates.max(1);
    let mut scores = vec![0.0; n_candidates];
    let mut columns: Vec<Vec<ParamValue>> = Vec::with_capacity(space.params.len());
    for spec in &space.params {
        let observed = |set: &[&Trial]| -> Vec<ParamValue> {
            set.iter().filter_map(|t| t.config.get(&spec.name).copied()).collect()
        };
        let (good_obs, bad_obs) = (observed(good), observed(bad));
        let mut column = Vec::with_capacity(n_candidates);
        match spec.kind {
            ParamKind::Categorical => {
                let wl = categorical_weights(spec, &good_obs);
                let wg = categorical_weights(spec, &bad_obs);
                let (sl, sg): (f64, f64) = (wl.iter().sum(), wg.iter().sum());
                let pick = WeightedIndex::new(&wl).expect("positive weights");
                for score in scores.iter_mut() {
                    let k = pick.sample(rng);
                    *score += (wl[k] / sl).ln() - (wg[k] / sg).ln();
                    column.push(spec.choices[k]);
                }
            }
            ParamKind::Int | ParamKind::Float => {
                let (lo, hi) = domain(spec);
                let internal = |obs: &[ParamValue]| -> Vec<f64> {
                    obs.iter().map(|&v| to_internal(spec, v)).collect()
                };
                let l = Parzen::fit(lo, hi, internal(&good_obs));
                let g = Parzen::fit(lo, hi, internal(&bad_obs));
                for score in scores.iter_mut() {
                    let x = l.sample(rng);
                    *score += l.log_pdf(x) - g.log_pdf(x);
                    column.push(from_internal(spec, x));
                }
            }
        }
        columns.push(column);
    }
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    space
        .params
        .iter()
        .zip(&columns)
        .map(|(p, col)| (p.name.clone(), col[best]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hpo::StudyState;
    use crate::models::Architecture;

    #[test]
    fn startup_learning_rate_is_log_uniform() {
        let space = SearchSpace::for_architecture(Architecture::ResNeXt);
        let mut st = StudyState::new(0);
        let mut logs: Vec<f64> = (0..10_000)
            .map(|_| st.suggest(&space)["learning_rate"].as_f64())
            .inspect(|lr| assert!((1e-5..=1e-2).contains(lr)))
            .map(f64::log10)
            .collect();
        logs.sort_by(f64::total_cmp);
        let median = logs[logs.len() / 2];
        assert!((-3.8..=-3.2).contains(&median), "median 10^{median}");
        // Kolmogorov-Smirnov against uniform on [-5, -2]
        let n = logs.len() as f64;
        let d = logs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let f = (x + 5.0) / 3.0;
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < 1.628 / n.sqrt(), "KS statistic {d}");
    }

    #[test]
    fn favours_choices_of_good_trials() {
        let space = SearchSpace::for_architecture(Architecture::ResNeXt);
        let mut st = StudyState::new(3);
        for i in 0..40 {
            let mut cfg = st.suggest(&space);
            let top = i % 4 == 0;
            if top {
                cfg.insert("cardinality".into(), ParamValue::Int(8));
            } else if cfg["cardinality"] == ParamValue::Int(8) {
                cfg.insert("cardinality".into(), ParamValue::Int(2));
            }
            let objective = if top { 0.9 } else { 0.6 };
            st.record(&space, Trial::complete(i, cfg, objective)).unwrap();
        }
        let hits = (0..1000)
            .filter(|_| st.suggest(&space)["cardinality"] == ParamValue::Int(8))
            .count();
        assert!(hits as f64 / 1000.0 > 0.2, "rate {}", hits as f64 / 1000.0);
    }

    #[test]
    fn constant_objectives_stay_in_range() {
        for arch in [Architecture::ResNeXt, Architecture::ResNet, Architecture::FtTransformer] {
            let space = SearchSpace::for_architecture(arch);
            let mut st = StudyState::new(5);
            for i in 0..30 {
                let cfg = st.suggest(&space);
                space.check(&cfg).unwrap();
                st.record(&space, Trial::complete(i, cfg, 0.5)).unwrap();
            }
        }
    }

    #[test]
    fn replay_is_deterministic() {
        let space = SearchSpace::for_architecture(Architecture::FtTransformer);
        let run = || {
            let mut st = StudyState::new(11);
            let mut seq = Vec::new();
            for i in 0..20 {
                let cfg = st.suggest(&space);
                let obj = cfg["learning_rate"].as_f64().log10().abs() / 10.0;
                seq.push(cfg.clone());
                st.record(&space, Trial::complete(i, cfg, obj)).unwrap();
            }
            seq
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn failed_trials_do_not_count_towards_startup() {
        let space = SearchSpace::for_architecture(Architecture::ResNet);
        let mut st = StudyState::new(1);
        for i in 0..15 {
            let cfg = st.suggest(&space);
            st.record(&space, Trial::failed(i, cfg, "x")).unwrap();
        }
        assert_eq!(st.n_complete(), 0);
        space.check(&st.suggest(&space)).unwrap();
    }
}
