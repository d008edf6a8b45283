//! Mini-batch AdamW training with early stopping on validation ROC-AUC.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Mode, ParameterSet, Tape, Tensor};
use crate::data::{Features, Split};
use crate::error::{Error, Result};
use crate::metrics::{roc_auc_multiclass, PredictionSet};
use crate::models::ModelInstance;

/// Epoch budget shared by every training run of a benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Regime {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for Regime {
    fn default() -> Self {
        Self {
            batch_size: 128,
            max_epochs: 200,
            patience: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(learning_rate: f64, weight_decay: f64, regime: Regime, seed: u64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            batch_size: regime.batch_size,
            max_epochs: regime.max_epochs,
            patience: regime.patience,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        if self.max_epochs == 0 || self.patience == 0 || self.patience > self.max_epochs {
            return Err(Error::config("need 0 < patience <= max_epochs"));
        }
        Ok(())
    }
}

/// AdamW moment buffers.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &ParameterSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One decoupled-weight-decay Adam update followed by zeroing the gradients.
/// Decay skips decay-exempt tensors.
pub fn adamw_step(params: &mut ParameterSet, opt: &mut OptimizerState, lr: f64, wd: f64) -> Result<()> {
    if !params.has_grads() {
        return Err(Error::State("optimizer step without gradients".into()));
    }
    if opt.m.len() != params.len() {
        return Err(Error::State("optimizer state does not match parameters".into()));
    }
    opt.step += 1;
    let t = opt.step as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    for (k, p) in params.iter_mut().enumerate() {
        let decay = if p.role.decay_exempt() { 0.0 } else { wd };
        let (m, v) = (&mut opt.m[k], &mut opt.v[k]);
        for (i, theta) in p.value.data_mut().iter_mut().enumerate() {
            let g = p.grad[i];
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g;
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *theta -= lr * (m_hat / (v_hat.sqrt() + opt.eps) + decay * *theta);
        }
    }
    params.zero_grads();
    Ok(())
}

/// Outcome of one early-stopped training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Validation ROC-AUC after each completed epoch (epoch 1 first).
    pub val_auc_curve: Vec<f64>,
    /// 1-based epoch of the first maximum of the curve.
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub wall_time: f64,
}

/// Shuffled mini-batches; a trailing batch of one row joins its predecessor
/// so batch normalization always sees at least two rows.
fn batches(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

fn run_epoch(
    model: &mut ModelInstance,
    opt: &mut OptimizerState,
    train: &Split,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for idx in batches(train.len(), cfg.batch_size, rng) {
        let x = train.features.select(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &x, Mode::Train, rng)?;
        let loss = tape.softmax_cross_entropy(out.logits, &y)?;
        if !tape.value(loss).item()?.is_finite() {
            return Err(Error::State("training loss diverged".into()));
        }
        tape.backward(loss)?;
        model.params.pull_grads(&tape, &out.bound);
        adamw_step(&mut model.params, opt, cfg.learning_rate, cfg.weight_decay)?;
    }
    Ok(())
}

fn check_split(model: &ModelInstance, split: &Split, what: &str) -> Result<()> {
    if split.is_empty() {
        return Err(Error::config(format!("{what} split is empty")));
    }
    if let Some(&y) = split.labels.iter().find(|&&y| y >= model.n_classes) {
        return Err(Error::Bounds {
            index: y,
            len: model.n_classes,
        });
    }
    if split.len() < 2 {
        return Err(Error::DegenerateBatch);
    }
    Ok(())
}

/// Trains with early stopping on validation ROC-AUC. On return `model`
/// holds the parameters (and normalization statistics) of the best epoch.
pub fn train_model(
    model: &mut ModelInstance,
    train: &Split,
    valid: &Split,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_split(model, train, "training")?;
    if valid.is_empty() {
        return Err(Error::config("early stopping needs a non-empty validation split"));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(&model.params);
    let mut curve = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor>, Vec<crate::autodiff::BatchNormState>)> = None;
    for epoch in 1..=cfg.max_epochs {
        match run_epoch(model, &mut opt, train, cfg, &mut rng) {
            Ok(()) => {}
            Err(Error::State(_)) if best.is_some() => break,
            Err(e) => return Err(e),
        }
        let probs = predict_proba(model, &valid.features)?;
        if probs.data().iter().any(|p| !p.is_finite()) {
            if best.is_some() {
                break;
            }
            return Err(Error::State("validation predictions are not finite".into()));
        }
        let auc = roc_auc_multiclass(&PredictionSet::new(
            probs.into_data(),
            model.n_classes,
            valid.labels.clone(),
        )?)?;
        curve.push(auc);
        let improved = best.as_ref().map_or(true, |b| auc > b.0);
        if improved {
            best = Some((auc, epoch, model.params.values(), model.norm_states.clone()));
        } else if epoch - best.as_ref().expect("set").1 >= cfg.patience {
            break;
        }
    }
    let (best_val_auc, best_epoch, values, norms) = best.ok_or_else(|| Error::State("no epoch completed".into()))?;
    model.params.restore(values)?;
    model.norm_states = norms;
    Ok(TrainReport {
        val_auc_curve: curve,
        best_epoch,
        best_val_auc,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Trains for exactly `epochs` epochs without validation.
pub fn train_epochs(model: &mut ModelInstance, train: &Split, epochs: usize, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    check_split(model, train, "training")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(&model.params);
    for _ in 0..epochs {
        run_epoch(model, &mut opt, train, cfg, &mut rng)?;
    }
    Ok(())
}

/// Row-wise softmax of eval-mode logits, `rows × n_classes`.
pub fn predict_proba(model: &mut ModelInstance, x: &Features) -> Result<Tensor> {
    const CHUNK: usize = 1024;
    if x.rows == 0 {
        return Err(Error::shape("prediction on an empty batch"));
    }
    let mut data = Vec::with_capacity(x.rows * model.n_classes);
    let mut start = 0;
    while start < x.rows {
        let end = (start + CHUNK).min(x.rows);
        let idx: Vec<usize> = (start..end).collect();
        let logits = model.logits(&x.select(&idx))?;
        data.extend(softmax_rows(logits.data(), model.n_classes));
        start = end;
    }
    Tensor::matrix(x.rows, model.n_classes, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamRole;
    use crate::data::synthetic::{two_gaussians, TwoGaussians};
    use crate::data::{fit_preprocessor, make_folds};
    use crate::models::{InputSchema, ModelConfig, ResNetConfig};

    fn scalar_params(theta: f64, grad: f64, role: ParamRole) -> ParameterSet {
        let mut ps = ParameterSet::new();
        let id = ps.add("theta", Tensor::scalar(theta), role).unwrap();
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape, true);
        let c = tape.constant(Tensor::scalar(grad));
        let y = tape.mul(bound[id], c).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        ps.pull_grads(&tape, &bound);
        ps
    }

    #[test]
    fn first_step_closed_form() {
        let mut ps = scalar_params(0.0, 1.0, ParamRole::Weight);
        let mut opt = OptimizerState::new(&ps);
        adamw_step(&mut ps, &mut opt, 0.1, 0.0).unwrap();
        let theta = ps.iter().next().unwrap().value.data()[0];
        assert!((theta + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        assert!(!ps.has_grads());
    }

    #[test]
    fn zero_gradient_and_decay() {
        let mut ps = scalar_params(2.0, 0.0, ParamRole::Weight);
        let mut opt = OptimizerState::new(&ps);
        adamw_step(&mut ps, &mut opt, 0.1, 0.0).unwrap();
        assert_eq!(ps.iter().next().unwrap().value.data()[0], 2.0);

        let mut ps = scalar_params(2.0, 0.0, ParamRole::Weight);
        let mut opt = OptimizerState::new(&ps);
        adamw_step(&mut ps, &mut opt, 0.1, 0.5).unwrap();
        assert!((ps.iter().next().unwrap().value.data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);

        for role in [ParamRole::Bias, ParamRole::Norm, ParamRole::Embedding] {
            let mut ps = scalar_params(2.0, 0.0, role);
            let mut opt = OptimizerState::new(&ps);
            adamw_step(&mut ps, &mut opt, 0.1, 0.5).unwrap();
            assert_eq!(ps.iter().next().unwrap().value.data()[0], 2.0);
        }
    }

    #[test]
    fn step_without_gradients_is_a_state_error() {
        let mut ps = ParameterSet::new();
        ps.add("w", Tensor::zeros(1, 1), ParamRole::Weight).unwrap();
        let mut opt = OptimizerState::new(&ps);
        assert!(matches!(adamw_step(&mut ps, &mut opt, 0.1, 0.0), Err(Error::State(_))));
    }

    #[test]
    fn converges_on_a_quadratic() {
        // f(a, b) = 3(a - 1)^2 + (b + 2)^2
        let mut ps = ParameterSet::new();
        let id = ps.add("ab", Tensor::matrix(1, 2, vec![4.0, 3.0]).unwrap(), ParamRole::Weight).unwrap();
        let mut opt = OptimizerState::new(&ps);
        let loss_of = |ps: &ParameterSet| {
            let v = ps.get(id).value.data();
            3.0 * (v[0] - 1.0).powi(2) + (v[1] + 2.0).powi(2)
        };
        let initial = loss_of(&ps);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let bound = ps.bind(&mut tape, true);
            let target = tape.constant(Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap());
            let scale = tape.constant(Tensor::matrix(1, 2, vec![3.0f64.sqrt(), 1.0]).unwrap());
            let neg = tape.constant(Tensor::matrix(1, 2, vec![-1.0, -1.0]).unwrap());
            let t = tape.mul(target, neg).unwrap();
            let d = tape.add(bound[id], t).unwrap();
            let d = tape.mul(d, scale).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let loss = tape.sum(sq);
            tape.backward(loss).unwrap();
            ps.pull_grads(&tape, &bound);
            adamw_step(&mut ps, &mut opt, 0.05, 0.0).unwrap();
        }
        assert!(loss_of(&ps) < initial / 10.0);
    }

    fn toy_splits(seed: u64) -> (Split, Split, InputSchema) {
        let ds = two_gaussians(
            "toy",
            &TwoGaussians {
                rows: 400,
                n_num: 4,
                n_cat: 1,
                shift: 1.0,
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        let plan = make_folds(&ds.labels, 4, seed).unwrap();
        let train_rows = plan.train(0);
        let state = fit_preprocessor(&ds, &train_rows).unwrap();
        let schema = InputSchema {
            n_num: ds.n_num(),
            cat_cardinalities: state.cardinalities(),
        };
        (
            Split::from_rows(&state, &ds, &train_rows),
            Split::from_rows(&state, &ds, plan.test(0)),
            schema,
        )
    }

    fn small_resnet() -> ModelConfig {
        ModelConfig::ResNet(ResNetConfig {
            n_layers: 1,
            layer_size: 16,
            learning_rate: 3e-3,
            weight_decay: 1e-5,
            residual_dropout: 0.0,
            hidden_dropout: 0.1,
            d_embedding: 4,
            d_hidden_factor: 2.0,
        })
    }

    fn fit(seed: u64, regime: Regime) -> (TrainReport, ModelInstance) {
        let (train, valid, schema) = toy_splits(0);
        let cfg = small_resnet();
        let mut model = ModelInstance::build(&cfg, &schema, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let tc = TrainConfig::new(cfg.learning_rate(), cfg.weight_decay(), regime, seed);
        let report = train_model(&mut model, &train, &valid, &tc).unwrap();
        (report, model)
    }

    #[test]
    fn separable_data_reaches_high_auc() {
        let (report, _) = fit(1, Regime { max_epochs: 30, patience: 8, ..Default::default() });
        assert!(report.best_val_auc >= 0.95, "{}", report.best_val_auc);
        let max = report.val_auc_curve.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(report.best_val_auc, max);
        let first = report.val_auc_curve.iter().position(|&a| a == max).unwrap();
        assert_eq!(report.best_epoch, first + 1);
    }

    #[test]
    fn same_seed_same_report() {
        let regime = Regime { max_epochs: 5, patience: 5, batch_size: 64 };
        let (a, ma) = fit(4, regime);
        let (b, mb) = fit(4, regime);
        assert_eq!(a.val_auc_curve, b.val_auc_curve);
        assert_eq!(ma.params.values(), mb.params.values());
    }

    #[test]
    fn restored_snapshot_matches_best_epoch() {
        let (train, valid, schema) = toy_splits(2);
        let cfg = small_resnet();
        let mut model = ModelInstance::build(&cfg, &schema, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let tc = TrainConfig::new(0.05, 0.0, Regime { max_epochs: 12, patience: 3, batch_size: 32 }, 3);
        let report = train_model(&mut model, &train, &valid, &tc).unwrap();
        let probs = predict_proba(&mut model, &valid.features).unwrap();
        let auc = roc_auc_multiclass(&PredictionSet::new(probs.into_data(), 2, valid.labels.clone()).unwrap()).unwrap();
        assert_eq!(auc, report.best_val_auc);
        assert!(report.val_auc_curve.len() - report.best_epoch <= 3);
    }

    #[test]
    fn patience_one_stops_after_a_flat_epoch() {
        // no batch statistics and an lr too small to move any weight, so the
        // validation AUC is flat from epoch 1 on
        let (train, valid, schema) = toy_splits(5);
        let cfg = ModelConfig::FtTransformer(crate::models::FtConfig {
            n_layers: 1,
            d_token: 8,
            residual_dropout: 0.0,
            attn_dropout: 0.1,
            ffn_dropout: 0.1,
            d_ffn_factor: 1.0,
            learning_rate: 1e-300,
            weight_decay: 0.0,
        });
        let mut model = ModelInstance::build(&cfg, &schema, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let tc = TrainConfig::new(1e-300, 0.0, Regime { max_epochs: 50, patience: 1, batch_size: 64 }, 0);
        let report = train_model(&mut model, &train, &valid, &tc).unwrap();
        assert_eq!(report.val_auc_curve.len(), 2);
        assert_eq!(report.best_epoch, 1);
    }

    #[test]
    fn empty_validation_is_a_config_error() {
        let (train, valid, schema) = toy_splits(0);
        let cfg = small_resnet();
        let mut model = ModelInstance::build(&cfg, &schema, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let tc = TrainConfig::new(1e-3, 0.0, Regime::default(), 0);
        let empty = valid.select(&[]);
        assert!(matches!(train_model(&mut model, &train, &empty, &tc), Err(Error::Config(_))));
    }

    #[test]
    fn trailing_single_row_joins_previous_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = batches(129, 128, &mut rng);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].len(), 129);
        let b = batches(130, 128, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![128, 2]);
    }

    #[test]
    fn probabilities_are_normalized() {
        let (_, valid, schema) = toy_splits(1);
        let mut model = ModelInstance::build(&small_resnet(), &schema, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let p = predict_proba(&mut model, &valid.features).unwrap();
        for row in p.data().chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(softmax_rows(&[0.0, 0.0], 2), vec![0.5, 0.5]);
        let lo = softmax_rows(&[0.0, 1.0, 0.5], 3);
        let hi = softmax_rows(&[0.0, 2.0, 0.5], 3);
        assert!(hi[1] > lo[1]);
    }
}
