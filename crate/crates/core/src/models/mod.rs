//! Tabular architectures: the multi-path ResNeXt, the residual MLP and a
//! minimal FT-Transformer.

mod config;
mod ft;
mod residual;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormState, Bound, Mode, ParamId, ParamRole, ParameterSet, Tape, Tensor, Var};
use crate::data::Features;
use crate::error::{Error, Result};

pub use config::{FtConfig, ModelConfig, ResNeXtConfig, ResNetConfig, N_HEADS};

/// Architecture tag used in manifests, result paths and search spaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "resnext")]
    ResNeXt,
    #[serde(rename = "resnet")]
    ResNet,
    #[serde(rename = "ft")]
    FtTransformer,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [
        Architecture::ResNeXt,
        Architecture::ResNet,
        Architecture::FtTransformer,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Architecture::ResNeXt => "resnext",
            Architecture::ResNet => "resnet",
            Architecture::FtTransformer => "ft",
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "resnext" => Ok(Architecture::ResNeXt),
            "resnet" => Ok(Architecture::ResNet),
            "ft" | "ft_transformer" | "ft-transformer" => Ok(Architecture::FtTransformer),
            other => Err(Error::config(format!("unknown model tag {other:?}"))),
        }
    }
}

/// Input columns a model was built for.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSchema {
    pub n_num: usize,
    /// Seen categories per categorical column; index 0 is reserved for
    /// unknown or missing values, so tables have `cardinality + 1` rows.
    pub cat_cardinalities: Vec<usize>,
}

impl InputSchema {
    pub fn n_cat(&self) -> usize {
        self.cat_cardinalities.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_num + self.n_cat()
    }

    fn validate(&self) -> Result<()> {
        if self.n_features() == 0 {
            return Err(Error::config("input schema has no features"));
        }
        Ok(())
    }

    fn check(&self, x: &Features) -> Result<()> {
        if x.n_num != self.n_num || x.n_cat != self.n_cat() {
            return Err(Error::shape(format!(
                "batch has {} numeric and {} categorical columns, model expects {} and {}",
                x.n_num,
                x.n_cat,
                self.n_num,
                self.n_cat()
            )));
        }
        if x.numeric.len() != x.rows * x.n_num || x.categorical.len() != x.rows * x.n_cat {
            return Err(Error::shape("feature buffers do not match the row count"));
        }
        if x.rows == 0 {
            return Err(Error::shape("empty batch"));
        }
        for (i, &c) in x.categorical.iter().enumerate() {
            let card = self.cat_cardinalities[i % x.n_cat];
            if c > card {
                return Err(Error::shape(format!(
                    "category index {c} exceeds cardinality {card} of column {}",
                    i % x.n_cat
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Layout {
    Residual(residual::ResidualLayout),
    Ft(ft::FtLayout),
}

/// A built model: parameters, normalization state and the schema it accepts.
#[derive(Clone, Debug)]
pub struct ModelInstance {
    pub architecture: Architecture,
    pub config: ModelConfig,
    pub params: ParameterSet,
    pub norm_states: Vec<BatchNormState>,
    pub schema: InputSchema,
    pub n_classes: usize,
    /// Non-fatal adjustments made while building (e.g. clamped widths).
    pub warnings: Vec<String>,
    layout: Layout,
}

/// Result of one forward pass.
pub struct Forward {
    pub logits: Var,
    pub bound: Bound,
}

impl ModelInstance {
    pub fn build<R: Rng + ?Sized>(
        config: &ModelConfig,
        schema: &InputSchema,
        n_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        match config {
            ModelConfig::ResNeXt(c) => build_resnext(c, schema, n_classes, rng),
            ModelConfig::ResNet(c) => build_resnet(c, schema, n_classes, rng),
            ModelConfig::FtTransformer(c) => build_ft_transformer(c, schema, n_classes, rng),
        }
    }

    /// Records a forward pass on `tape`. Parameters are bound as leaves that
    /// require gradients in train mode only.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        x: &Features,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Forward> {
        self.forward_traced(tape, x, mode, rng, &mut Vec::new())
    }

    fn forward_traced<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        x: &Features,
        mode: Mode,
        rng: &mut R,
        trace: &mut Vec<Var>,
    ) -> Result<Forward> {
        self.schema.check(x)?;
        let bound = self.params.bind(tape, mode == Mode::Train);
        let logits = match &self.layout {
            Layout::Residual(l) => l.forward(tape, &bound, &mut self.norm_states, x, mode, rng, trace)?,
            Layout::Ft(l) => l.forward(tape, &bound, x, mode, rng, trace)?,
        };
        Ok(Forward { logits, bound })
    }

    /// Eval-mode hidden state entering each block, followed by the output
    /// of the last block. FT states are token matrices.
    pub fn block_states(&mut self, x: &Features) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let mut unused = rand::rngs::mock::StepRng::new(0, 0);
        let mut trace = Vec::new();
        self.forward_traced(&mut tape, x, Mode::Eval, &mut unused, &mut trace)?;
        Ok(trace.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Eval-mode logits as a plain tensor.
    pub fn logits(&mut self, x: &Features) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut unused = rand::rngs::mock::StepRng::new(0, 0);
        let out = self.forward(&mut tape, x, Mode::Eval, &mut unused)?;
        Ok(tape.value(out.logits).clone())
    }

    /// `(weights, total)` parameter counts; weights exclude biases and
    /// normalization affine parameters.
    pub fn param_count(&self) -> (usize, usize) {
        self.params.counts()
    }

    /// Zeroes the last linear map of every residual branch, turning each
    /// block into the identity.
    pub fn zero_block_outputs(&mut self) {
        let ids = match &self.layout {
            Layout::Residual(l) => l.branch_outputs(),
            Layout::Ft(l) => l.branch_outputs(),
        };
        for id in ids {
            self.params.get_mut(id).value.data_mut().fill(0.0);
        }
    }

    /// Order of operations inside one residual block.
    pub fn block_layout(&self) -> &'static str {
        match self.layout {
            Layout::Residual(_) => residual::BLOCK_LAYOUT,
            Layout::Ft(_) => ft::BLOCK_LAYOUT,
        }
    }
}

pub fn build_resnext<R: Rng + ?Sized>(
    cfg: &ResNeXtConfig,
    schema: &InputSchema,
    n_classes: usize,
    rng: &mut R,
) -> Result<ModelInstance> {
    cfg.validate()?;
    residual::build(
        ModelConfig::ResNeXt(cfg.clone()),
        &cfg.shape(),
        schema,
        n_classes,
        rng,
    )
}

pub fn build_resnet<R: Rng + ?Sized>(
    cfg: &ResNetConfig,
    schema: &InputSchema,
    n_classes: usize,
    rng: &mut R,
) -> Result<ModelInstance> {
    cfg.validate()?;
    residual::build(
        ModelConfig::ResNet(cfg.clone()),
        &cfg.as_resnext().shape(),
        schema,
        n_classes,
        rng,
    )
}

pub fn build_ft_transformer<R: Rng + ?Sized>(
    cfg: &FtConfig,
    schema: &InputSchema,
    n_classes: usize,
    rng: &mut R,
) -> Result<ModelInstance> {
    cfg.validate()?;
    ft::build(cfg, schema, n_classes, rng)
}

fn check_classes(n_classes: usize) -> Result<()> {
    if n_classes < 2 {
        return Err(Error::config(format!("need at least 2 classes, got {n_classes}")));
    }
    Ok(())
}

fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::matrix(rows, cols, data).expect("consistent shape")
}

/// Parameter-building helper that applies the initialization rules.
struct Builder<'a, R: ?Sized> {
    params: ParameterSet,
    rng: &'a mut R,
}

impl<'a, R: Rng + ?Sized> Builder<'a, R> {
    fn new(rng: &'a mut R) -> Self {
        Self {
            params: ParameterSet::new(),
            rng,
        }
    }

    /// Linear weight; `feeds_relu` selects Kaiming-uniform over the plain
    /// `1/sqrt(fan_in)` bound.
    fn weight(&mut self, name: String, fan_in: usize, fan_out: usize, feeds_relu: bool) -> Result<ParamId> {
        let bound = if feeds_relu {
            (6.0 / fan_in as f64).sqrt()
        } else {
            1.0 / (fan_in as f64).sqrt()
        };
        let t = uniform(fan_in, fan_out, bound, self.rng);
        self.params.add(name, t, ParamRole::Weight)
    }

    fn bias(&mut self, name: String, width: usize) -> Result<ParamId> {
        self.params.add(name, Tensor::zeros(1, width), ParamRole::Bias)
    }

    fn embedding(&mut self, name: String, rows: usize, d: usize, role: ParamRole) -> Result<ParamId> {
        let t = uniform(rows, d, 1.0 / (d as f64).sqrt(), self.rng);
        self.params.add(name, t, role)
    }

    fn norm(&mut self, prefix: &str, width: usize) -> Result<(ParamId, ParamId)> {
        let g = self
            .params
            .add(format!("{prefix}.weight"), Tensor::filled(1, width, 1.0), ParamRole::Norm)?;
        let b = self
            .params
            .add(format!("{prefix}.bias"), Tensor::zeros(1, width), ParamRole::Norm)?;
        Ok((g, b))
    }
}

#[cfg(test)]
mod tests;
