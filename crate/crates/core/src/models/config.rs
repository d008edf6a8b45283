use serde::{Deserialize, Serialize};

use super::residual::Shape;
use super::Architecture;
use crate::error::{Error, Result};
use crate::hpo::{Config, ParamValue, SearchSpace};

/// Attention heads of every FT-Transformer layer.
pub const N_HEADS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResNeXtConfig {
    pub n_layers: usize,
    pub layer_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub residual_dropout: f64,
    pub hidden_dropout: f64,
    pub d_embedding: usize,
    pub d_hidden_factor: f64,
    pub cardinality: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResNetConfig {
    pub n_layers: usize,
    pub layer_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub residual_dropout: f64,
    pub hidden_dropout: f64,
    pub d_embedding: usize,
    pub d_hidden_factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FtConfig {
    pub n_layers: usize,
    /// Requested token width; rounded down to a multiple of [`N_HEADS`].
    pub d_token: usize,
    pub residual_dropout: f64,
    pub attn_dropout: f64,
    pub ffn_dropout: f64,
    pub d_ffn_factor: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

/// Hyperparameters of one model, tagged by architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelConfig {
    #[serde(rename = "resnext")]
    ResNeXt(ResNeXtConfig),
    #[serde(rename = "resnet")]
    ResNet(ResNetConfig),
    #[serde(rename = "ft")]
    FtTransformer(FtConfig),
}

fn check_dropout(name: &str, p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("{name} = {p} outside [0, 1)")));
    }
    Ok(())
}

fn check_optim(lr: f64, wd: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::config(format!("learning_rate = {lr} must be positive")));
    }
    if !(wd >= 0.0 && wd.is_finite()) {
        return Err(Error::config(format!("weight_decay = {wd} must be non-negative")));
    }
    Ok(())
}

fn check_positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::config(format!("{name} must be positive")));
    }
    Ok(())
}

impl ResNeXtConfig {
    pub fn validate(&self) -> Result<()> {
        check_positive("n_layers", self.n_layers)?;
        check_positive("layer_size", self.layer_size)?;
        check_positive("d_embedding", self.d_embedding)?;
        check_positive("cardinality", self.cardinality)?;
        check_optim(self.learning_rate, self.weight_decay)?;
        check_dropout("residual_dropout", self.residual_dropout)?;
        check_dropout("hidden_dropout", self.hidden_dropout)?;
        if !(self.d_hidden_factor > 0.0) {
            return Err(Error::config("d_hidden_factor must be positive"));
        }
        Ok(())
    }

    pub(super) fn shape(&self) -> Shape {
        Shape {
            n_layers: self.n_layers,
            d: self.layer_size,
            d_embedding: self.d_embedding,
            d_hidden_factor: self.d_hidden_factor,
            cardinality: self.cardinality,
            hidden_dropout: self.hidden_dropout,
            residual_dropout: self.residual_dropout,
        }
    }
}

impl ResNetConfig {
    pub fn validate(&self) -> Result<()> {
        self.as_resnext().validate()
    }

    /// The equivalent single-path ResNeXt configuration.
    pub fn as_resnext(&self) -> ResNeXtConfig {
        ResNeXtConfig {
            n_layers: self.n_layers,
            layer_size: self.layer_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            residual_dropout: self.residual_dropout,
            hidden_dropout: self.hidden_dropout,
            d_embedding: self.d_embedding,
            d_hidden_factor: self.d_hidden_factor,
            cardinality: 1,
        }
    }
}

impl FtConfig {
    pub fn validate(&self) -> Result<()> {
        check_positive("n_layers", self.n_layers)?;
        if self.d_token < N_HEADS {
            return Err(Error::config(format!(
                "d_token = {} is below the {N_HEADS} attention heads",
                self.d_token
            )));
        }
        check_optim(self.learning_rate, self.weight_decay)?;
        check_dropout("residual_dropout", self.residual_dropout)?;
        check_dropout("attn_dropout", self.attn_dropout)?;
        check_dropout("ffn_dropout", self.ffn_dropout)?;
        if self.ffn_width() == 0 {
            return Err(Error::config("d_ffn_factor yields an empty feed-forward layer"));
        }
        Ok(())
    }

    /// Token width actually used: `d_token` rounded down to a multiple of
    /// the head count.
    pub fn effective_d_token(&self) -> usize {
        self.d_token / N_HEADS * N_HEADS
    }

    pub fn ffn_width(&self) -> usize {
        (self.effective_d_token() as f64 * self.d_ffn_factor).floor() as usize
    }
}

fn int(cfg: &Config, name: &str) -> Result<usize> {
    match cfg.get(name) {
        Some(ParamValue::Int(v)) if *v >= 0 => Ok(*v as usize),
        Some(ParamValue::Float(v)) if v.fract() == 0.0 && *v >= 0.0 => Ok(*v as usize),
        Some(v) => Err(Error::config(format!("{name} = {v} is not a non-negative integer"))),
        None => Err(Error::config(format!("missing hyperparameter {name}"))),
    }
}

fn float(cfg: &Config, name: &str) -> Result<f64> {
    cfg.get(name)
        .map(|v| v.as_f64())
        .ok_or_else(|| Error::config(format!("missing hyperparameter {name}")))
}

impl ModelConfig {
    pub fn architecture(&self) -> Architecture {
        match self {
            ModelConfig::ResNeXt(_) => Architecture::ResNeXt,
            ModelConfig::ResNet(_) => Architecture::ResNet,
            ModelConfig::FtTransformer(_) => Architecture::FtTransformer,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match self {
            ModelConfig::ResNeXt(c) => c.learning_rate,
            ModelConfig::ResNet(c) => c.learning_rate,
            ModelConfig::FtTransformer(c) => c.learning_rate,
        }
    }

    pub fn weight_decay(&self) -> f64 {
        match self {
            ModelConfig::ResNeXt(c) => c.weight_decay,
            ModelConfig::ResNet(c) => c.weight_decay,
            ModelConfig::FtTransformer(c) => c.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::ResNeXt(c) => c.validate(),
            ModelConfig::ResNet(c) => c.validate(),
            ModelConfig::FtTransformer(c) => c.validate(),
        }
    }

    /// Reads a flat hyperparameter map keyed by search-space names.
    pub fn from_params(arch: Architecture, p: &Config) -> Result<Self> {
        let cfg = match arch {
            Architecture::ResNeXt => ModelConfig::ResNeXt(ResNeXtConfig {
                n_layers: int(p, "n_layers")?,
                layer_size: int(p, "layer_size")?,
                learning_rate: float(p, "learning_rate")?,
                weight_decay: float(p, "weight_decay")?,
                residual_dropout: float(p, "residual_dropout")?,
                hidden_dropout: float(p, "hidden_dropout")?,
                d_embedding: int(p, "d_embedding")?,
                d_hidden_factor: float(p, "d_hidden_factor")?,
                cardinality: int(p, "cardinality")?,
            }),
            Architecture::ResNet => ModelConfig::ResNet(ResNetConfig {
                n_layers: int(p, "n_layers")?,
                layer_size: int(p, "layer_size")?,
                learning_rate: float(p, "learning_rate")?,
                weight_decay: float(p, "weight_decay")?,
                residual_dropout: float(p, "residual_dropout")?,
                hidden_dropout: float(p, "hidden_dropout")?,
                d_embedding: int(p, "d_embedding")?,
                d_hidden_factor: float(p, "d_hidden_factor")?,
            }),
            Architecture::FtTransformer => ModelConfig::FtTransformer(FtConfig {
                n_layers: int(p, "n_layers")?,
                d_token: int(p, "d_token")?,
                residual_dropout: float(p, "residual_dropout")?,
                attn_dropout: float(p, "attn_dropout")?,
                ffn_dropout: float(p, "ffn_dropout")?,
                d_ffn_factor: float(p, "d_ffn_factor")?,
                learning_rate: float(p, "learning_rate")?,
                weight_decay: float(p, "weight_decay")?,
            }),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Flat hyperparameter map; the inverse of [`ModelConfig::from_params`].
    pub fn to_params(&self) -> Config {
        let i = |v: usize| ParamValue::Int(v as i64);
        let f = ParamValue::Float;
        let pairs: Vec<(&str, ParamValue)> = match self {
            ModelConfig::ResNeXt(c) => vec![
                ("n_layers", i(c.n_layers)),
                ("layer_size", i(c.layer_size)),
                ("learning_rate", f(c.learning_rate)),
                ("weight_decay", f(c.weight_decay)),
                ("residual_dropout", f(c.residual_dropout)),
                ("hidden_dropout", f(c.hidden_dropout)),
                ("d_embedding", i(c.d_embedding)),
                ("d_hidden_factor", f(c.d_hidden_factor)),
                ("cardinality", i(c.cardinality)),
            ],
            ModelConfig::ResNet(c) => vec![
                ("n_layers", i(c.n_layers)),
                ("layer_size", i(c.layer_size)),
                ("learning_rate", f(c.learning_rate)),
                ("weight_decay", f(c.weight_decay)),
                ("residual_dropout", f(c.residual_dropout)),
                ("hidden_dropout", f(c.hidden_dropout)),
                ("d_embedding", i(c.d_embedding)),
                ("d_hidden_factor", f(c.d_hidden_factor)),
            ],
            ModelConfig::FtTransformer(c) => vec![
                ("n_layers", i(c.n_layers)),
                ("d_token", i(c.d_token)),
                ("residual_dropout", f(c.residual_dropout)),
                ("attn_dropout", f(c.attn_dropout)),
                ("ffn_dropout", f(c.ffn_dropout)),
                ("d_ffn_factor", f(c.d_ffn_factor)),
                ("learning_rate", f(c.learning_rate)),
                ("weight_decay", f(c.weight_decay)),
            ],
        };
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Untuned configuration inside `space`. Residual nets take the middle
    /// of every range; the FT-Transformer takes its customary defaults
    /// clamped into the space.
    pub fn default_for(space: &SearchSpace) -> Result<Self> {
        let params = match space.model {
            Architecture::ResNeXt | Architecture::ResNet => space.midpoint(),
            Architecture::FtTransformer => {
                let preferred = [
                    ("n_layers", ParamValue::Int(3)),
                    ("d_token", ParamValue::Int(192)),
                    ("residual_dropout", ParamValue::Float(0.0)),
                    ("attn_dropout", ParamValue::Float(0.2)),
                    ("ffn_dropout", ParamValue::Float(0.1)),
                    ("d_ffn_factor", ParamValue::Float(4.0 / 3.0)),
                    ("learning_rate", ParamValue::Float(1e-4)),
                    ("weight_decay", ParamValue::Float(1e-5)),
                ];
                let mut cfg = space.midpoint();
                for (name, value) in preferred {
                    if let Some(spec) = space.get(name) {
                        cfg.insert(name.to_string(), spec.clamp(value));
                    }
                }
                cfg
            }
        };
        Self::from_params(space.model, &params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_round_trip() {
        for arch in Architecture::ALL {
            let space = SearchSpace::for_architecture(arch);
            let cfg = ModelConfig::default_for(&space).unwrap();
            assert_eq!(cfg.architecture(), arch);
            let flat = cfg.to_params();
            space.check(&flat).unwrap();
            assert_eq!(ModelConfig::from_params(arch, &flat).unwrap(), cfg);
        }
    }

    #[test]
    fn residual_defaults_are_midpoints() {
        let cfg = ModelConfig::default_for(&SearchSpace::for_architecture(Architecture::ResNeXt)).unwrap();
        let ModelConfig::ResNeXt(c) = cfg else { unreachable!() };
        assert_eq!((c.n_layers, c.layer_size, c.d_embedding, c.cardinality), (4, 544, 288, 8));
        assert!((c.learning_rate - 10f64.powf(-3.5)).abs() < 1e-15);
        assert_eq!(c.d_hidden_factor, 2.5);
    }

    #[test]
    fn ft_defaults() {
        let cfg = ModelConfig::default_for(&SearchSpace::for_architecture(Architecture::FtTransformer)).unwrap();
        let ModelConfig::FtTransformer(c) = cfg else { unreachable!() };
        assert_eq!((c.n_layers, c.d_token), (3, 192));
        assert_eq!(c.ffn_width(), 256);
    }

    #[test]
    fn d_token_rounding_and_floor() {
        let mut c = FtConfig {
            n_layers: 1,
            d_token: 100,
            residual_dropout: 0.0,
            attn_dropout: 0.0,
            ffn_dropout: 0.0,
            d_ffn_factor: 1.0,
            learning_rate: 1e-3,
            weight_decay: 0.0,
        };
        assert_eq!(c.effective_d_token(), 96);
        c.d_token = 7;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn missing_parameter() {
        let mut p = ModelConfig::default_for(&SearchSpace::for_architecture(Architecture::ResNet))
            .unwrap()
            .to_params();
        p.remove("n_layers");
        assert!(ModelConfig::from_params(Architecture::ResNet, &p).is_err());
    }
}
