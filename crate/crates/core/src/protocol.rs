//! Nested cross-validation: per outer fold, a budgeted TPE search scored by
//! inner k-fold CV, a retrain on the whole outer-train part and a single
//! evaluation on the held-out outer fold.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    fit_preprocessor, load_csv, make_folds, make_folds_over, read_schema, write_atomic, ColumnSchema, Dataset,
    FoldPlan, Split,
};
use crate::error::{Error, Result};
use crate::hpo::{budget_exhausted, Budget, Config, ParamOverride, SearchSpace, StudyState, Trial};
use crate::metrics::{adtm_curve, error_rate, roc_auc_multiclass, AdtmInput, PredictionSet};
use crate::models::{Architecture, InputSchema, ModelConfig, ModelInstance};
use crate::stats::ResultMatrix;
use crate::train::{predict_proba, train_epochs, train_model, Regime, TrainConfig};

pub const OUTER_FOLDS: usize = 10;
pub const INNER_FOLDS: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodMode {
    Tuned,
    Default,
}

impl MethodMode {
    pub fn tag(self) -> &'static str {
        match self {
            MethodMode::Tuned => "tuned",
            MethodMode::Default => "default",
        }
    }
}

impl std::str::FromStr for MethodMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tuned" => Ok(MethodMode::Tuned),
            "default" => Ok(MethodMode::Default),
            other => Err(Error::config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Column label of a method in result matrices: the model tag, suffixed
/// with `_default` for untuned runs.
pub fn method_label(method: Architecture, mode: MethodMode) -> String {
    match mode {
        MethodMode::Tuned => method.tag().to_string(),
        MethodMode::Default => format!("{}_default", method.tag()),
    }
}

/// Everything that determines the result of one (dataset, method) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTask {
    pub dataset: String,
    pub method: Architecture,
    pub mode: MethodMode,
    /// Ignored in default mode.
    pub budget: Budget,
    pub master_seed: u64,
    pub regime: Regime,
    pub space_overrides: BTreeMap<String, ParamOverride>,
    pub outer_folds: usize,
    pub inner_folds: usize,
}

impl BenchmarkTask {
    pub fn new(dataset: impl Into<String>, method: Architecture, mode: MethodMode) -> Self {
        Self {
            dataset: dataset.into(),
            method,
            mode,
            budget: Budget::default(),
            master_seed: 0,
            regime: Regime::default(),
            space_overrides: BTreeMap::new(),
            outer_folds: OUTER_FOLDS,
            inner_folds: INNER_FOLDS,
        }
    }

    pub fn space(&self) -> Result<SearchSpace> {
        SearchSpace::for_architecture(self.method).with_overrides(&self.space_overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == MethodMode::Tuned {
            self.budget.validate()?;
        }
        if self.outer_folds < 2 || self.inner_folds < 2 {
            return Err(Error::config("need at least 2 outer and 2 inner folds"));
        }
        TrainConfig::new(1e-3, 0.0, self.regime, 0).validate()?;
        self.space()?;
        Ok(())
    }
}

/// Stable 64-bit seed from a master seed and a list of labels.
pub fn derive_seed(master: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Outer partition of a dataset; shared by every method.
pub fn outer_plan(task: &BenchmarkTask, ds: &Dataset) -> Result<FoldPlan> {
    make_folds(&ds.labels, task.outer_folds, derive_seed(task.master_seed, &[&task.dataset]))
}

/// Inner partition of the outer-train rows of `fold`, in original row ids.
pub fn inner_plan(task: &BenchmarkTask, ds: &Dataset, outer: &FoldPlan, fold: usize) -> Result<FoldPlan> {
    let seed = derive_seed(task.master_seed, &[&task.dataset, &fold.to_string()]);
    make_folds_over(&ds.labels, &outer.train(fold), task.inner_folds, seed)
}

pub fn cell_seed(task: &BenchmarkTask, fold: usize) -> u64 {
    derive_seed(
        task.master_seed,
        &[&task.dataset, task.method.tag(), &fold.to_string()],
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldStatus {
    Complete,
    Failed,
}

/// Outcome of one (dataset, method, mode, outer fold) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterFoldResult {
    pub dataset: String,
    pub method: Architecture,
    pub mode: MethodMode,
    pub fold_index: usize,
    pub status: FoldStatus,
    pub seed: u64,
    pub best_config: Option<Config>,
    pub best_trial: Option<usize>,
    pub best_objective: Option<f64>,
    pub retrain_epochs: Option<usize>,
    pub test_auc: Option<f64>,
    pub test_error_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    pub wall_time: f64,
    pub trials: Vec<Trial>,
}

impl OuterFoldResult {
    fn failed(task: &BenchmarkTask, fold: usize, reason: String, trials: Vec<Trial>, wall_time: f64) -> Self {
        Self {
            dataset: task.dataset.clone(),
            method: task.method,
            mode: task.mode,
            fold_index: fold,
            status: FoldStatus::Failed,
            seed: cell_seed(task, fold),
            best_config: None,
            best_trial: None,
            best_objective: None,
            retrain_epochs: None,
            test_auc: None,
            test_error_rate: None,
            failure: Some(reason),
            warnings: Vec::new(),
            wall_time,
            trials,
        }
    }

    /// Complete-trial objectives in trial order.
    pub fn objective_trajectory(&self) -> Vec<f64> {
        self.trials.iter().filter_map(|t| t.objective).collect()
    }
}

/// Preprocessed train/valid pair with the schema seen by the model.
struct Prepared {
    train: Split,
    valid: Split,
    schema: InputSchema,
}

fn prepare(ds: &Dataset, train_rows: &[usize], valid_rows: &[usize]) -> Result<Prepared> {
    let state = fit_preprocessor(ds, train_rows)?;
    Ok(Prepared {
        train: Split::from_rows(&state, ds, train_rows),
        valid: Split::from_rows(&state, ds, valid_rows),
        schema: InputSchema {
            n_num: ds.n_num(),
            cat_cardinalities: state.cardinalities(),
        },
    })
}

fn median_epochs(epochs: &[usize]) -> usize {
    let mut e = epochs.to_vec();
    e.sort_unstable();
    let n = e.len();
    if n % 2 == 1 {
        e[n / 2]
    } else {
        (e[n / 2 - 1] + e[n / 2]).div_ceil(2)
    }
}

/// Builds `config` with a seed-derived init and trains it with early
/// stopping on `p.valid`.
fn fit_one(
    config: &ModelConfig,
    p: &Prepared,
    n_classes: usize,
    regime: Regime,
    seed: u64,
) -> Result<(ModelInstance, crate::train::TrainReport)> {
    let mut init = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["init"]));
    let mut model = ModelInstance::build(config, &p.schema, n_classes, &mut init)?;
    let tc = TrainConfig::new(config.learning_rate(), config.weight_decay(), regime, derive_seed(seed, &["train"]));
    let report = train_model(&mut model, &p.train, &p.valid, &tc)?;
    Ok((model, report))
}

fn score(model: &mut ModelInstance, test: &Split) -> Result<(f64, f64)> {
    let probs = predict_proba(model, &test.features)?;
    let pred = PredictionSet::new(probs.into_data(), model.n_classes, test.labels.clone())?;
    Ok((roc_auc_multiclass(&pred)?, error_rate(&pred)?))
}

fn evaluate_trial(
    config: &Config,
    task: &BenchmarkTask,
    inner: &[Prepared],
    n_classes: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let model_cfg = ModelConfig::from_params(task.method, config)?;
    let mut aucs = Vec::with_capacity(inner.len());
    let mut epochs = Vec::with_capacity(inner.len());
    for (s, p) in inner.iter().enumerate() {
        let (_, report) = fit_one(&model_cfg, p, n_classes, task.regime, derive_seed(seed, &[&s.to_string()]))?;
        aucs.push(report.best_val_auc);
        epochs.push(report.best_epoch);
    }
    Ok((aucs, epochs))
}

/// Tuned cell: budgeted TPE over inner CV, retrain on the outer-train rows
/// for the median inner best epoch, score the outer test fold.
pub fn run_outer_fold(task: &BenchmarkTask, ds: &Dataset, fold: usize) -> Result<OuterFoldResult> {
    task.validate()?;
    let start = Instant::now();
    let space = task.space()?;
    let outer = outer_plan(task, ds)?;
    let inner = inner_plan(task, ds, &outer, fold)?;
    let prepared: Vec<Prepared> = (0..inner.k())
        .map(|s| prepare(ds, &inner.train(s), inner.test(s)))
        .collect::<Result<_>>()?;
    let seed = cell_seed(task, fold);
    let n_classes = ds.n_classes();

    let mut study = StudyState::new(seed);
    while !budget_exhausted(&study, &task.budget, start.elapsed().as_secs_f64()) {
        let index = study.history.len();
        let config = study.suggest(&space);
        let t0 = Instant::now();
        let trial_seed = derive_seed(seed, &["trial", &index.to_string()]);
        let mut trial = match evaluate_trial(&config, task, &prepared, n_classes, trial_seed) {
            Ok((aucs, epochs)) => {
                let objective = aucs.iter().sum::<f64>() / aucs.len() as f64;
                let mut t = Trial::complete(index, config, objective);
                t.inner_aucs = aucs;
                t.inner_best_epochs = epochs;
                t
            }
            Err(e) => Trial::failed(index, config, e.to_string()),
        };
        trial.duration_s = t0.elapsed().as_secs_f64();
        study.record(&space, trial)?;
    }

    let Some(best) = study.best().cloned() else {
        let reason = "all trials failed".to_string();
        return Ok(OuterFoldResult::failed(task, fold, reason, study.history, start.elapsed().as_secs_f64()));
    };
    let epochs = median_epochs(&best.inner_best_epochs);
    let retrain = || -> Result<(f64, f64, Vec<String>)> {
        let p = prepare(ds, &outer.train(fold), outer.test(fold))?;
        let cfg = ModelConfig::from_params(task.method, &best.config)?;
        let retrain_seed = derive_seed(seed, &["retrain"]);
        let mut init = ChaCha8Rng::seed_from_u64(derive_seed(retrain_seed, &["init"]));
        let mut model = ModelInstance::build(&cfg, &p.schema, n_classes, &mut init)?;
        let tc = TrainConfig::new(cfg.learning_rate(), cfg.weight_decay(), task.regime, derive_seed(retrain_seed, &["train"]));
        train_epochs(&mut model, &p.train, epochs, &tc)?;
        let (auc, err) = score(&mut model, &p.valid)?;
        Ok((auc, err, model.warnings))
    };
    match retrain() {
        Ok((auc, err, warnings)) => Ok(OuterFoldResult {
            dataset: task.dataset.clone(),
            method: task.method,
            mode: task.mode,
            fold_index: fold,
            status: FoldStatus::Complete,
            seed,
            best_config: Some(best.config),
            best_trial: Some(best.trial_index),
            best_objective: best.objective,
            retrain_epochs: Some(epochs),
            test_auc: Some(auc),
            test_error_rate: Some(err),
            failure: None,
            warnings,
            wall_time: start.elapsed().as_secs_f64(),
            trials: study.history,
        }),
        Err(e) => Ok(OuterFoldResult::failed(
            task,
            fold,
            format!("retrain failed: {e}"),
            study.history,
            start.elapsed().as_secs_f64(),
        )),
    }
}

/// Default-configuration cell: no search; early stopping on inner fold 0
/// of the outer-train rows, training on the other inner folds.
pub fn run_default_fold(task: &BenchmarkTask, ds: &Dataset, fold: usize) -> Result<OuterFoldResult> {
    task.validate()?;
    let start = Instant::now();
    let space = task.space()?;
    let outer = outer_plan(task, ds)?;
    let inner = inner_plan(task, ds, &outer, fold)?;
    let seed = cell_seed(task, fold);
    let cfg = ModelConfig::default_for(&space)?;
    let run = || -> Result<(f64, f64, usize, Vec<String>)> {
        let state = fit_preprocessor(ds, &inner.train(0))?;
        let p = Prepared {
            train: Split::from_rows(&state, ds, &inner.train(0)),
            valid: Split::from_rows(&state, ds, inner.test(0)),
            schema: InputSchema {
                n_num: ds.n_num(),
                cat_cardinalities: state.cardinalities(),
            },
        };
        let (mut model, report) = fit_one(&cfg, &p, ds.n_classes(), task.regime, seed)?;
        let test = Split::from_rows(&state, ds, outer.test(fold));
        let (auc, err) = score(&mut model, &test)?;
        Ok((auc, err, report.best_epoch, model.warnings))
    };
    match run() {
        Ok((auc, err, epochs, warnings)) => Ok(OuterFoldResult {
            dataset: task.dataset.clone(),
            method: task.method,
            mode: task.mode,
            fold_index: fold,
            status: FoldStatus::Complete,
            seed,
            best_config: Some(cfg.to_params()),
            best_trial: None,
            best_objective: None,
            retrain_epochs: Some(epochs),
            test_auc: Some(auc),
            test_error_rate: Some(err),
            failure: None,
            warnings,
            wall_time: start.elapsed().as_secs_f64(),
            trials: Vec::new(),
        }),
        Err(e) => Ok(OuterFoldResult::failed(task, fold, e.to_string(), Vec::new(), start.elapsed().as_secs_f64())),
    }
}

pub fn run_fold(task: &BenchmarkTask, ds: &Dataset, fold: usize) -> Result<OuterFoldResult> {
    match task.mode {
        MethodMode::Tuned => run_outer_fold(task, ds, fold),
        MethodMode::Default => run_default_fold(task, ds, fold),
    }
}

/// Per-dataset aggregate of one method's outer folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetResult {
    pub dataset: String,
    pub method: Architecture,
    pub mode: MethodMode,
    /// Sorted by fold index.
    pub folds: Vec<OuterFoldResult>,
    /// Mean over successful folds; absent when every fold failed.
    pub mean_test_auc: Option<f64>,
    pub mean_test_error_rate: Option<f64>,
    pub n_failed: usize,
    pub wall_time: f64,
}

impl DatasetResult {
    pub fn label(&self) -> String {
        method_label(self.method, self.mode)
    }
}

pub fn aggregate(task: &BenchmarkTask, folds: Vec<OuterFoldResult>) -> Result<DatasetResult> {
    aggregate_cells(&task.dataset, task.method, task.mode, folds)
}

fn aggregate_cells(
    dataset: &str,
    method: Architecture,
    mode: MethodMode,
    mut folds: Vec<OuterFoldResult>,
) -> Result<DatasetResult> {
    if let Some(f) = folds.iter().find(|f| f.dataset != dataset || f.method != method || f.mode != mode) {
        return Err(Error::Validation(format!(
            "fold {} belongs to {}/{}/{}",
            f.fold_index,
            f.dataset,
            f.method,
            f.mode.tag()
        )));
    }
    folds.sort_by_key(|f| f.fold_index);
    let mean = |values: Vec<f64>| (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64);
    let ok: Vec<&OuterFoldResult> = folds.iter().filter(|f| f.status == FoldStatus::Complete).collect();
    Ok(DatasetResult {
        dataset: dataset.to_string(),
        method,
        mode,
        mean_test_auc: mean(ok.iter().filter_map(|f| f.test_auc).collect()),
        mean_test_error_rate: mean(ok.iter().filter_map(|f| f.test_error_rate).collect()),
        n_failed: folds.len() - ok.len(),
        wall_time: folds.iter().map(|f| f.wall_time).sum(),
        folds,
    })
}

/// How the schema of a manifest dataset is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SchemaSource {
    Path(PathBuf),
    Inline(Vec<ColumnSchema>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub name: String,
    pub csv: PathBuf,
    pub schema: SchemaSource,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("results")
}

fn default_outer() -> usize {
    OUTER_FOLDS
}

fn default_inner() -> usize {
    INNER_FOLDS
}

/// A benchmark run description. Relative paths resolve against the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub datasets: Vec<DatasetEntry>,
    pub methods: Vec<Architecture>,
    pub mode: MethodMode,
    #[serde(default)]
    pub budget: Budget,
    #[serde(default)]
    pub master_seed: u64,
    /// Concurrent cells; absent means one per hardware thread.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallelism: Option<usize>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub training: Regime,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub space_overrides: BTreeMap<Architecture, BTreeMap<String, ParamOverride>>,
    #[serde(default = "default_outer")]
    pub outer_folds: usize,
    #[serde(default = "default_inner")]
    pub inner_folds: usize,
}

impl RunManifest {
    /// Parses a manifest file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let mut m: RunManifest =
            serde_json::from_slice(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        m.resolve_paths(base);
        Ok(m)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for d in &mut self.datasets {
            d.csv = base.join(&d.csv);
            if let SchemaSource::Path(p) = &mut d.schema {
                *p = base.join(&*p);
            }
        }
        self.out_dir = base.join(&self.out_dir);
    }

    pub fn task(&self, dataset: &str, method: Architecture) -> BenchmarkTask {
        BenchmarkTask {
            dataset: dataset.to_string(),
            method,
            mode: self.mode,
            budget: self.budget,
            master_seed: self.master_seed,
            regime: self.training,
            space_overrides: self.space_overrides.get(&method).cloned().unwrap_or_default(),
            outer_folds: self.outer_folds,
            inner_folds: self.inner_folds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() || self.methods.is_empty() {
            return Err(Error::Manifest("need at least one dataset and one method".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for d in &self.datasets {
            let safe = !d.name.is_empty()
                && d.name != "."
                && d.name != ".."
                && d.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
            if !safe {
                return Err(Error::Manifest(format!("dataset name {:?} is not a plain file name", d.name)));
            }
            if !names.insert(&d.name) {
                return Err(Error::Manifest(format!("duplicate dataset {}", d.name)));
            }
        }
        let mut methods = self.methods.clone();
        methods.sort();
        methods.dedup();
        if methods.len() != self.methods.len() {
            return Err(Error::Manifest("duplicate method".into()));
        }
        if self.parallelism == Some(0) {
            return Err(Error::Manifest("parallelism must be positive".into()));
        }
        for &m in &self.methods {
            self.task(&self.datasets[0].name, m)
                .validate()
                .map_err(|e| Error::Manifest(e.to_string()))?;
        }
        Ok(())
    }

    /// Loads every dataset; any failure is a manifest error.
    pub fn load_datasets(&self) -> Result<Vec<Dataset>> {
        self.datasets
            .iter()
            .map(|d| {
                let schema = match &d.schema {
                    SchemaSource::Path(p) => read_schema(p),
                    SchemaSource::Inline(s) => Ok(s.clone()),
                }
                .map_err(|e| Error::Manifest(format!("dataset {}: {e}", d.name)))?;
                let mut ds = load_csv(&d.csv, &schema).map_err(|e| Error::Manifest(format!("dataset {}: {e}", d.name)))?;
                ds.name = d.name.clone();
                if ds.n_rows < self.outer_folds {
                    return Err(Error::Manifest(format!(
                        "dataset {} has {} rows for {} outer folds",
                        d.name, ds.n_rows, self.outer_folds
                    )));
                }
                Ok(ds)
            })
            .collect()
    }
}

pub fn cell_path(out_dir: &Path, dataset: &str, method: Architecture, mode: MethodMode, fold: usize) -> PathBuf {
    out_dir
        .join(dataset)
        .join(method.tag())
        .join(mode.tag())
        .join(format!("fold{fold}.json"))
}

/// Writes the cell JSON and its trial history as JSON lines.
pub fn persist_cell(out_dir: &Path, r: &OuterFoldResult) -> Result<()> {
    let path = cell_path(out_dir, &r.dataset, r.method, r.mode, r.fold_index);
    fs::create_dir_all(path.parent().expect("cell path has a parent"))?;
    let mut lines = String::new();
    for t in &r.trials {
        lines.push_str(&serde_json::to_string(t)?);
        lines.push('\n');
    }
    write_atomic(&path.with_extension("trials.jsonl"), lines.as_bytes())?;
    let mut json = serde_json::to_vec_pretty(r)?;
    json.push(b'\n');
    write_atomic(&path, &json)
}

pub fn load_cell(path: &Path) -> Result<OuterFoldResult> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Reported once per cell, in completion order.
#[derive(Clone, Debug, PartialEq)]
pub struct CellEvent {
    pub dataset: String,
    pub method: Architecture,
    pub mode: MethodMode,
    pub fold: usize,
    pub test_auc: Option<f64>,
    pub elapsed_s: f64,
    /// Loaded from an earlier run instead of computed.
    pub resumed: bool,
}

/// Result of [`execute`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub matrix: ResultMatrix,
    /// Summed cell wall time in seconds, same layout as `matrix`.
    pub wall_times: ResultMatrix,
    pub results: Vec<DatasetResult>,
    pub failed_cells: usize,
}

/// Runs every missing (dataset, method, fold) cell of `manifest`, persists
/// each on completion and assembles the result matrix.
pub fn execute(manifest: &RunManifest, progress: &(dyn Fn(&CellEvent) + Sync)) -> Result<RunOutcome> {
    manifest.validate()?;
    let datasets = manifest.load_datasets()?;
    let cells: Vec<(usize, Architecture, usize)> = (0..datasets.len())
        .flat_map(|d| {
            manifest
                .methods
                .iter()
                .flat_map(move |&m| (0..manifest.outer_folds).map(move |f| (d, m, f)))
        })
        .collect();
    let threads = manifest
        .parallelism
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(e.to_string()))?;
    let out = &manifest.out_dir;
    let results: Vec<OuterFoldResult> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(d, method, fold)| {
                let ds = &datasets[d];
                let path = cell_path(out, &ds.name, method, manifest.mode, fold);
                let start = Instant::now();
                let (r, resumed) = match load_cell(&path) {
                    Ok(r) => (r, true),
                    Err(_) => {
                        let r = run_fold(&manifest.task(&ds.name, method), ds, fold)?;
                        persist_cell(out, &r)?;
                        (r, false)
                    }
                };
                progress(&CellEvent {
                    dataset: ds.name.clone(),
                    method,
                    mode: manifest.mode,
                    fold,
                    test_auc: r.test_auc,
                    elapsed_s: start.elapsed().as_secs_f64(),
                    resumed,
                });
                Ok(r)
            })
            .collect::<Result<_>>()
    })?;

    let mut grouped: BTreeMap<(usize, Architecture), Vec<OuterFoldResult>> = BTreeMap::new();
    for (&(d, m, _), r) in cells.iter().zip(results) {
        grouped.entry((d, m)).or_default().push(r);
    }
    let failed_cells = grouped.values().flatten().filter(|r| r.status == FoldStatus::Failed).count();
    let mut aggregated = Vec::new();
    for d in 0..datasets.len() {
        for &m in &manifest.methods {
            let folds = grouped.remove(&(d, m)).unwrap_or_default();
            aggregated.push(aggregate_cells(&datasets[d].name, m, manifest.mode, folds)?);
        }
    }
    let (matrix, wall_times) = result_matrices(&aggregated)?;
    fs::create_dir_all(out)?;
    write_atomic(&out.join(format!("matrix_{}.csv", manifest.mode.tag())), matrix_csv(&matrix).as_bytes())?;
    Ok(RunOutcome {
        matrix,
        wall_times,
        results: aggregated,
        failed_cells,
    })
}

/// AUC and wall-time matrices over the datasets and method labels present
/// in `results`, both sorted by name.
pub fn result_matrices(results: &[DatasetResult]) -> Result<(ResultMatrix, ResultMatrix)> {
    let mut datasets: Vec<String> = results.iter().map(|r| r.dataset.clone()).collect();
    datasets.sort();
    datasets.dedup();
    let mut methods: Vec<String> = results.iter().map(DatasetResult::label).collect();
    methods.sort();
    methods.dedup();
    let mut auc = vec![vec![None; methods.len()]; datasets.len()];
    let mut wall = vec![vec![None; methods.len()]; datasets.len()];
    for r in results {
        let i = datasets.binary_search(&r.dataset).expect("collected");
        let j = methods.binary_search(&r.label()).expect("collected");
        auc[i][j] = r.mean_test_auc;
        wall[i][j] = Some(r.wall_time);
    }
    Ok((
        ResultMatrix::new(datasets.clone(), methods.clone(), auc)?,
        ResultMatrix::new(datasets, methods, wall)?,
    ))
}

/// Rows are datasets, columns methods; failed cells are left empty.
pub fn matrix_csv(m: &ResultMatrix) -> String {
    let mut out = String::from("dataset");
    for name in &m.methods {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (i, d) in m.datasets.iter().enumerate() {
        out.push_str(d);
        for j in 0..m.methods.len() {
            out.push(',');
            if let Some(v) = m.get(i, j) {
                out.push_str(&v.to_string());
            }
        }
        out.push('\n');
    }
    out
}

/// Every persisted cell below `dir`, aggregated per (dataset, method, mode).
/// Cells are read in sorted path order, so the result does not depend on
/// directory listing order.
pub fn load_results(dir: &Path) -> Result<Vec<DatasetResult>> {
    let mut paths = Vec::new();
    collect_cells(dir, &mut paths)?;
    paths.sort();
    let mut grouped: BTreeMap<(String, Architecture, MethodMode), Vec<OuterFoldResult>> = BTreeMap::new();
    for p in paths {
        let r = load_cell(&p)?;
        grouped.entry((r.dataset.clone(), r.method, r.mode)).or_default().push(r);
    }
    grouped
        .into_iter()
        .map(|((d, m, mode), folds)| aggregate_cells(&d, m, mode, folds))
        .collect()
}

fn collect_cells(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_cells(&path, out)?;
        } else if path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("fold") && n.ends_with(".json"))
        {
            out.push(path);
        }
    }
    Ok(())
}

/// Mean ADTM curve per tuned method label. Each (dataset, fold) group is
/// normalized by the smallest and largest objective any method reached in
/// it; methods without trials are skipped.
pub fn adtm_curves(results: &[DatasetResult], n_trials: usize) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut groups: BTreeMap<(String, usize), Vec<(String, Vec<f64>)>> = BTreeMap::new();
    for r in results.iter().filter(|r| r.mode == MethodMode::Tuned) {
        for f in &r.folds {
            let trajectory = f.objective_trajectory();
            if !trajectory.is_empty() {
                groups
                    .entry((r.dataset.clone(), f.fold_index))
                    .or_default()
                    .push((r.label(), trajectory));
            }
        }
    }
    let mut inputs: BTreeMap<String, Vec<AdtmInput>> = BTreeMap::new();
    for members in groups.into_values() {
        let all = members.iter().flat_map(|(_, t)| t.iter().copied());
        let lo = all.clone().fold(f64::INFINITY, f64::min);
        let hi = all.fold(f64::NEG_INFINITY, f64::max);
        for (label, trajectory) in members {
            inputs.entry(label).or_default().push(AdtmInput {
                trajectory,
                dataset_min: lo,
                dataset_max: hi,
            });
        }
    }
    inputs
        .into_iter()
        .map(|(label, group)| Ok((label, adtm_curve(&group, n_trials)?)))
        .collect()
}

/// `trial,method,mean_normalized_distance` rows, trials counted from 1.
pub fn adtm_csv(curves: &BTreeMap<String, Vec<f64>>) -> String {
    let mut out = String::from("trial,method,mean_normalized_distance\n");
    for (label, curve) in curves {
        for (t, v) in curve.iter().enumerate() {
            out.push_str(&format!("{},{label},{v}\n", t + 1));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{two_gaussians, TwoGaussians};
    use crate::hpo::ParamValue;

    fn small_ds(name: &str, rows: usize, seed: u64) -> Dataset {
        two_gaussians(
            name,
            &TwoGaussians {
                rows,
                n_num: 3,
                n_cat: 1,
                shift: 1.0,
                seed,
                ..Default::default()
            },
        )
        .unwrap()
    }

    fn tiny_overrides(method: Architecture) -> BTreeMap<String, ParamOverride> {
        let range = |low: f64, high: f64| ParamOverride {
            low: Some(low),
            high: Some(high),
            choices: None,
        };
        let mut o = BTreeMap::new();
        o.insert("n_layers".to_string(), range(1.0, 2.0));
        match method {
            Architecture::FtTransformer => {
                o.insert("d_token".to_string(), range(8.0, 16.0));
            }
            _ => {
                o.insert("layer_size".to_string(), range(8.0, 16.0));
                o.insert("d_embedding".to_string(), range(2.0, 4.0));
            }
        }
        if method == Architecture::ResNeXt {
            o.insert(
                "cardinality".to_string(),
                ParamOverride {
                    choices: Some(vec![ParamValue::Int(2)]),
                    ..Default::default()
                },
            );
        }
        o
    }

    fn tiny_task(method: Architecture, mode: MethodMode, trials: usize) -> BenchmarkTask {
        let mut t = BenchmarkTask::new("toy", method, mode);
        t.budget.max_trials = trials;
        t.regime = Regime {
            batch_size: 64,
            max_epochs: 3,
            patience: 2,
        };
        t.space_overrides = tiny_overrides(method);
        t.outer_folds = 4;
        t.inner_folds = 3;
        t
    }

    #[test]
    fn seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(0, &["a", "b"]), derive_seed(0, &["a", "b"]));
        assert_ne!(derive_seed(0, &["ab", ""]), derive_seed(0, &["a", "b"]));
        assert_ne!(derive_seed(0, &["a"]), derive_seed(1, &["a"]));
        let task = BenchmarkTask::new("d", Architecture::ResNet, MethodMode::Tuned);
        let mut seen = std::collections::BTreeSet::new();
        for m in Architecture::ALL {
            for f in 0..10 {
                let t = BenchmarkTask { method: m, ..task.clone() };
                assert!(seen.insert(cell_seed(&t, f)));
            }
        }
    }

    #[test]
    fn inner_folds_stay_inside_outer_train() {
        let ds = small_ds("toy", 200, 0);
        let task = BenchmarkTask::new("toy", Architecture::ResNet, MethodMode::Tuned);
        let outer = outer_plan(&task, &ds).unwrap();
        for f in 0..task.outer_folds {
            let inner = inner_plan(&task, &ds, &outer, f).unwrap();
            assert_eq!(inner.k(), 9);
            let mut all: Vec<usize> = inner.folds.concat();
            all.sort_unstable();
            assert_eq!(all, outer.train(f));
            assert!(outer.test(f).iter().all(|r| all.binary_search(r).is_err()));
        }
    }

    #[test]
    fn median_of_epochs() {
        assert_eq!(median_epochs(&[3, 1, 2]), 2);
        assert_eq!(median_epochs(&[1, 2, 3, 4]), 3);
        assert_eq!(median_epochs(&[5]), 5);
    }

    #[test]
    fn one_trial_budget_retrains_that_trial() {
        let ds = small_ds("toy", 120, 1);
        let task = tiny_task(Architecture::ResNet, MethodMode::Tuned, 1);
        let r = run_outer_fold(&task, &ds, 0).unwrap();
        assert_eq!(r.status, FoldStatus::Complete);
        assert_eq!(r.trials.len(), 1);
        assert_eq!(r.best_trial, Some(0));
        assert_eq!(r.best_config.as_ref(), Some(&r.trials[0].config));
        let t = &r.trials[0];
        let mean = t.inner_aucs.iter().sum::<f64>() / t.inner_aucs.len() as f64;
        assert!((t.objective.unwrap() - mean).abs() < 1e-12);
        assert_eq!(r.retrain_epochs, Some(median_epochs(&t.inner_best_epochs)));
        assert!((0.0..=1.0).contains(&r.test_auc.unwrap()));
    }

    #[test]
    fn default_fold_has_no_trials_and_replays() {
        let ds = small_ds("toy", 120, 2);
        let task = tiny_task(Architecture::FtTransformer, MethodMode::Default, 5);
        let a = run_default_fold(&task, &ds, 1).unwrap();
        let b = run_default_fold(&task, &ds, 1).unwrap();
        assert!(a.trials.is_empty());
        assert_eq!(a.status, FoldStatus::Complete);
        assert_eq!(a.test_auc, b.test_auc);
        assert_eq!(a.best_config, b.best_config);
    }

    #[test]
    fn single_class_data_fails_every_trial() {
        let mut ds = small_ds("toy", 60, 3);
        ds.labels.iter_mut().for_each(|y| *y = 0);
        let task = tiny_task(Architecture::ResNet, MethodMode::Tuned, 2);
        let r = run_outer_fold(&task, &ds, 0).unwrap();
        assert_eq!(r.status, FoldStatus::Failed);
        assert_eq!(r.trials.len(), 2);
        assert!(r.failure.as_deref().unwrap().contains("all trials failed"));
    }

    fn fake(fold: usize, auc: Option<f64>) -> OuterFoldResult {
        let task = BenchmarkTask::new("d", Architecture::ResNet, MethodMode::Tuned);
        let mut r = OuterFoldResult::failed(&task, fold, "x".into(), Vec::new(), 1.0);
        if let Some(a) = auc {
            r.status = FoldStatus::Complete;
            r.test_auc = Some(a);
            r.failure = None;
        }
        r
    }

    #[test]
    fn aggregate_examples() {
        let task = BenchmarkTask::new("d", Architecture::ResNet, MethodMode::Tuned);
        let all: Vec<_> = (0..10).map(|f| fake(f, Some(0.9))).collect();
        assert!((aggregate(&task, all).unwrap().mean_test_auc.unwrap() - 0.9).abs() < 1e-12);

        let mut mixed: Vec<_> = (0..10).map(|f| fake(f, None)).collect();
        mixed[3] = fake(3, Some(1.0));
        mixed[7] = fake(7, Some(0.8));
        let a = aggregate(&task, mixed.clone()).unwrap();
        assert!((a.mean_test_auc.unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(a.n_failed, 8);
        mixed.reverse();
        assert_eq!(aggregate(&task, mixed).unwrap(), a);

        let none = aggregate(&task, (0..10).map(|f| fake(f, None)).collect()).unwrap();
        assert_eq!(none.mean_test_auc, None);

        let mut other = fake(0, Some(0.5));
        other.dataset = "e".into();
        assert!(aggregate(&task, vec![other]).is_err());
    }

    #[test]
    fn manifest_parsing_and_validation() {
        let text = r#"{
            "datasets": [{"name": "toy", "csv": "toy.csv", "schema": "toy.schema.json"}],
            "methods": ["resnet", "ft"],
            "mode": "tuned",
            "budget": {"max_trials": 3, "max_hours": 1.0}
        }"#;
        let mut m: RunManifest = serde_json::from_str(text).unwrap();
        assert_eq!(m.master_seed, 0);
        assert_eq!((m.outer_folds, m.inner_folds), (10, 9));
        m.resolve_paths(Path::new("/base"));
        assert_eq!(m.datasets[0].csv, Path::new("/base/toy.csv"));
        assert_eq!(m.out_dir, Path::new("/base/results"));
        m.validate().unwrap();
        assert_eq!(m.task("toy", Architecture::ResNet).budget.max_trials, 3);

        let mut bad = m.clone();
        bad.datasets[0].name = "../x".into();
        assert!(matches!(bad.validate(), Err(Error::Manifest(_))));
        let mut bad = m.clone();
        bad.budget.max_trials = 0;
        assert!(matches!(bad.validate(), Err(Error::Manifest(_))));
        let mut bad = m;
        bad.methods.push(Architecture::ResNet);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn missing_dataset_is_a_manifest_error_before_any_output() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest {
            datasets: vec![DatasetEntry {
                name: "gone".into(),
                csv: dir.path().join("gone.csv"),
                schema: SchemaSource::Inline(vec![ColumnSchema::numeric("x"), ColumnSchema::target("y", None)]),
            }],
            methods: vec![Architecture::ResNet],
            mode: MethodMode::Default,
            budget: Budget::default(),
            master_seed: 0,
            parallelism: Some(1),
            out_dir: dir.path().join("out"),
            training: Regime::default(),
            space_overrides: BTreeMap::new(),
            outer_folds: 10,
            inner_folds: 9,
        };
        assert!(matches!(execute(&m, &|_| {}), Err(Error::Manifest(_))));
        assert!(!dir.path().join("out").exists());
    }

    #[test]
    fn execute_persists_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_ds("toy", 80, 4);
        let csv = dir.path().join("toy.csv");
        let schema = dir.path().join("toy.schema.json");
        crate::data::synthetic::write_dataset(&ds, &csv, &schema).unwrap();
        let t = tiny_task(Architecture::ResNet, MethodMode::Tuned, 2);
        let m = RunManifest {
            datasets: vec![DatasetEntry {
                name: "toy".into(),
                csv,
                schema: SchemaSource::Path(schema),
            }],
            methods: vec![Architecture::ResNet],
            mode: MethodMode::Tuned,
            budget: t.budget,
            master_seed: 0,
            parallelism: Some(2),
            out_dir: dir.path().join("out"),
            training: t.regime,
            space_overrides: [(Architecture::ResNet, t.space_overrides.clone())].into_iter().collect(),
            outer_folds: 4,
            inner_folds: 3,
        };
        let events = std::sync::Mutex::new(Vec::new());
        let first = execute(&m, &|e| events.lock().unwrap().push(e.clone())).unwrap();
        assert_eq!((first.matrix.datasets.len(), first.matrix.methods.len()), (1, 1));
        assert_eq!(events.lock().unwrap().len(), 4);
        assert!(events.lock().unwrap().iter().all(|e| !e.resumed));
        let cell = cell_path(&m.out_dir, "toy", Architecture::ResNet, MethodMode::Tuned, 2);
        let before = fs::read(&cell).unwrap();
        assert!(cell.with_extension("trials.jsonl").exists());
        assert!(m.out_dir.join("matrix_tuned.csv").exists());

        events.lock().unwrap().clear();
        let second = execute(&m, &|e| events.lock().unwrap().push(e.clone())).unwrap();
        assert!(events.lock().unwrap().iter().all(|e| e.resumed));
        assert_eq!(fs::read(&cell).unwrap(), before);
        assert_eq!(second.matrix, first.matrix);

        let loaded = load_results(&m.out_dir).unwrap();
        assert_eq!(loaded, first.results);
    }

    #[test]
    fn adtm_groups_share_bounds_across_methods() {
        let mut a = fake(0, Some(0.9));
        a.trials = [0.5, 0.4, 0.9].iter().enumerate().map(|(i, &v)| Trial::complete(i, Config::new(), v)).collect();
        let mut b = fake(0, Some(0.9));
        b.method = Architecture::FtTransformer;
        b.trials = vec![Trial::complete(0, Config::new(), 0.4)];
        let task = BenchmarkTask::new("d", Architecture::ResNet, MethodMode::Tuned);
        let ra = aggregate(&task, vec![a]).unwrap();
        let rb = aggregate_cells("d", Architecture::FtTransformer, MethodMode::Tuned, vec![b]).unwrap();
        let curves = adtm_curves(&[ra, rb], 4).unwrap();
        let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-12);
        assert!(close(&curves["resnet"], &[0.8, 0.8, 0.0, 0.0]));
        assert!(close(&curves["ft"], &[1.0; 4]));
        assert!(adtm_csv(&curves).starts_with("trial,method,mean_normalized_distance\n1,ft,1\n"));
    }
}
