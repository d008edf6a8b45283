//! Search spaces, the TPE sampler and trial budgets.

mod space;
mod tpe;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use space::{space_for, Config, ParamKind, ParamOverride, ParamSpec, ParamValue, SearchSpace};
pub use tpe::TpeSettings;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Complete,
    Failed,
}

/// One evaluated configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial_index: usize,
    pub config: Config,
    /// Mean inner-CV validation AUC; absent for failed trials.
    pub objective: Option<f64>,
    pub status: TrialStatus,
    pub duration_s: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inner_aucs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inner_best_epochs: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl Trial {
    pub fn complete(trial_index: usize, config: Config, objective: f64) -> Self {
        Self {
            trial_index,
            config,
            objective: Some(objective),
            status: TrialStatus::Complete,
            duration_s: 0.0,
            inner_aucs: Vec::new(),
            inner_best_epochs: Vec::new(),
            failure: None,
        }
    }

    pub fn failed(trial_index: usize, config: Config, reason: impl Into<String>) -> Self {
        Self {
            trial_index,
            config,
            objective: None,
            status: TrialStatus::Failed,
            duration_s: 0.0,
            inner_aucs: Vec::new(),
            inner_best_epochs: Vec::new(),
            failure: Some(reason.into()),
        }
    }
}

/// Trial-count and wall-clock limits, whichever is hit first.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub max_trials: usize,
    pub max_hours: f64,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            max_trials: 100,
            max_hours: 23.0,
        }
    }
}

impl Budget {
    pub fn validate(&self) -> Result<()> {
        if self.max_trials == 0 || !(self.max_hours > 0.0) {
            return Err(Error::config("budget limits must be positive"));
        }
        Ok(())
    }

    pub fn max_wall_clock_s(&self) -> f64 {
        self.max_hours * 3600.0
    }
}

/// Optimizer history of one study. The history is append-only and the RNG
/// only advances inside [`StudyState::suggest`].
#[derive(Clone, Debug)]
pub struct StudyState {
    pub history: Vec<Trial>,
    pub settings: TpeSettings,
    rng: ChaCha8Rng,
}

impl StudyState {
    pub fn new(seed: u64) -> Self {
        Self::with_settings(seed, TpeSettings::default())
    }

    pub fn with_settings(seed: u64, settings: TpeSettings) -> Self {
        Self {
            history: Vec::new(),
            settings,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn n_complete(&self) -> usize {
        self.history
            .iter()
            .filter(|t| t.status == TrialStatus::Complete)
            .count()
    }

    /// Next configuration to evaluate: uniform (log-uniform on log scales)
    /// during startup, TPE afterwards.
    pub fn suggest(&mut self, space: &SearchSpace) -> Config {
        tpe::suggest(&self.history, &self.settings, space, &mut self.rng)
    }

    /// Appends a trial after checking it against `space`. Failed trials may
    /// not carry an objective; complete ones must.
    pub fn record(&mut self, space: &SearchSpace, trial: Trial) -> Result<()> {
        space.check(&trial.config)?;
        match (trial.status, trial.objective) {
            (TrialStatus::Complete, Some(v)) if v.is_finite() => {}
            (TrialStatus::Failed, None) => {}
            _ => {
                return Err(Error::Validation(
                    "objective must be present exactly for complete trials".into(),
                ))
            }
        }
        self.history.push(trial);
        Ok(())
    }

    /// Best complete trial; ties go to the earliest.
    pub fn best(&self) -> Option<&Trial> {
        let mut best: Option<&Trial> = None;
        for t in &self.history {
            if let Some(v) = t.objective {
                if best.map_or(true, |b| v > b.objective.unwrap_or(f64::NEG_INFINITY)) {
                    best = Some(t);
                }
            }
        }
        best
    }
}

/// True once the trial count or the elapsed wall clock reaches its limit.
pub fn budget_exhausted(state: &StudyState, budget: &Budget, elapsed_s: f64) -> bool {
    state.history.len() >= budget.max_trials || elapsed_s >= budget.max_wall_clock_s()
}
