use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Architecture;

/// A single hyperparameter value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
}

impl ParamValue {
    pub fn as_f64(self) -> f64 {
        match self {
            ParamValue::Int(v) => v as f64,
            ParamValue::Float(v) => v,
        }
    }

    pub fn as_i64(self) -> Option<i64> {
        match self {
            ParamValue::Int(v) => Some(v),
            ParamValue::Float(_) => None,
        }
    }
}

impl std::fmt::Display for ParamValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamValue::Int(v) => write!(f, "{v}"),
            ParamValue::Float(v) => write!(f, "{v}"),
        }
    }
}

/// A full assignment of hyperparameters, keyed by parameter name.
pub type Config = BTreeMap<String, ParamValue>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Int,
    Float,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    #[serde(default)]
    pub low: f64,
    #[serde(default)]
    pub high: f64,
    #[serde(default)]
    pub log_scale: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub choices: Vec<ParamValue>,
}

impl ParamSpec {
    pub fn int(name: &str, low: i64, high: i64) -> Self {
        Self {
            name: name.into(),
            kind: ParamKind::Int,
            low: low as f64,
            high: high as f64,
            log_scale: false,
            choices: Vec::new(),
        }
    }

    pub fn float(name: &str, low: f64, high: f64, log_scale: bool) -> Self {
        Self {
            name: name.into(),
            kind: ParamKind::Float,
            low,
            high,
            log_scale,
            choices: Vec::new(),
        }
    }

    pub fn categorical(name: &str, choices: Vec<ParamValue>) -> Self {
        Self {
            name: name.into(),
            kind: ParamKind::Categorical,
            low: 0.0,
            high: 0.0,
            log_scale: false,
            choices,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ParamKind::Int | ParamKind::Float => {
                if !(self.low < self.high) {
                    return Err(Error::config(format!(
                        "{}: low {} must be below high {}",
                        self.name, self.low, self.high
                    )));
                }
                if self.log_scale && self.low <= 0.0 {
                    return Err(Error::config(format!(
                        "{}: log scale needs a positive lower bound",
                        self.name
                    )));
                }
                if self.kind == ParamKind::Int
                    && (self.low.fract() != 0.0 || self.high.fract() != 0.0)
                {
                    return Err(Error::config(format!(
                        "{}: integer bounds must be whole numbers",
                        self.name
                    )));
                }
            }
            ParamKind::Categorical => {
                if self.choices.is_empty() {
                    return Err(Error::config(format!("{}: no choices", self.name)));
                }
                for (i, a) in self.choices.iter().enumerate() {
                    if self.choices[..i].contains(a) {
                        return Err(Error::config(format!(
                            "{}: duplicate choice {a}",
                            self.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, value: ParamValue) -> bool {
        match (self.kind, value) {
            (ParamKind::Int, ParamValue::Int(v)) => {
                (self.low..=self.high).contains(&(v as f64))
            }
            (ParamKind::Float, ParamValue::Float(v)) => (self.low..=self.high).contains(&v),
            (ParamKind::Categorical, v) => self.choices.contains(&v),
            _ => false,
        }
    }

    /// Mid-range value: geometric mean on log scale, lower middle for
    /// integers, middle choice for categoricals.
    pub fn midpoint(&self) -> ParamValue {
        match self.kind {
            ParamKind::Int => {
                let mid = if self.log_scale {
                    (self.low * self.high).sqrt().floor()
                } else {
                    ((self.low + self.high) / 2.0).floor()
                };
                ParamValue::Int(mid as i64)
            }
            ParamKind::Float => ParamValue::Float(if self.log_scale {
                (self.low * self.high).sqrt()
            } else {
                (self.low + self.high) / 2.0
            }),
            ParamKind::Categorical => self.choices[self.choices.len() / 2],
        }
    }

    /// Nearest in-range value to `v`.
    pub fn clamp(&self, v: ParamValue) -> ParamValue {
        match self.kind {
            ParamKind::Int => ParamValue::Int(v.as_f64().round().clamp(self.low, self.high) as i64),
            ParamKind::Float => ParamValue::Float(v.as_f64().clamp(self.low, self.high)),
            ParamKind::Categorical => {
                let x = v.as_f64();
                *self
                    .choices
                    .iter()
                    .min_by(|a, b| (a.as_f64() - x).abs().total_cmp(&(b.as_f64() - x).abs()))
                    .expect("validated spec has choices")
            }
        }
    }
}

/// Narrowed bounds or choices for one parameter of a built-in space.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub low: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub high: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<ParamValue>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub model: Architecture,
    pub params: Vec<ParamSpec>,
}

impl SearchSpace {
    /// The built-in search space of `model`.
    pub fn for_architecture(model: Architecture) -> Self {
        let params = match model {
            Architecture::ResNeXt => vec![
                ParamSpec::int("n_layers", 1, 8),
                ParamSpec::int("layer_size", 64, 1024),
                ParamSpec::float("learning_rate", 1e-5, 1e-2, true),
                ParamSpec::float("weight_decay", 1e-6, 1e-3, true),
                ParamSpec::float("residual_dropout", 0.0, 0.5, false),
                ParamSpec::float("hidden_dropout", 0.0, 0.5, false),
                ParamSpec::int("d_embedding", 64, 512),
                ParamSpec::float("d_hidden_factor", 1.0, 4.0, false),
                ParamSpec::categorical(
                    "cardinality",
                    [2, 4, 8, 16, 32].into_iter().map(ParamValue::Int).collect(),
                ),
            ],
            Architecture::FtTransformer => vec![
                ParamSpec::int("n_layers", 1, 6),
                ParamSpec::int("d_token", 64, 512),
                ParamSpec::float("residual_dropout", 0.0, 0.2, false),
                ParamSpec::float("attn_dropout", 0.0, 0.5, false),
                ParamSpec::float("ffn_dropout", 0.0, 0.5, false),
                ParamSpec::float("d_ffn_factor", 2.0 / 3.0, 8.0 / 3.0, false),
                ParamSpec::float("learning_rate", 1e-5, 1e-3, true),
                ParamSpec::float("weight_decay", 1e-6, 1e-3, true),
            ],
            Architecture::ResNet => vec![
                ParamSpec::int("layer_size", 64, 1024),
                ParamSpec::float("learning_rate", 1e-5, 1e-2, true),
                ParamSpec::float("weight_decay", 1e-6, 1e-3, true),
                ParamSpec::float("residual_dropout", 0.0, 0.5, false),
                ParamSpec::float("hidden_dropout", 0.0, 0.5, false),
                ParamSpec::int("n_layers", 1, 8),
                ParamSpec::int("d_embedding", 64, 512),
                ParamSpec::float("d_hidden_factor", 1.0, 4.0, false),
            ],
        };
        Self { model, params }
    }

    pub fn get(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Applies `overrides` on top of this space. Names must exist and kinds
    /// must fit (bounds for numeric, choices for categorical parameters).
    pub fn with_overrides(mut self, overrides: &BTreeMap<String, ParamOverride>) -> Result<Self> {
        for (name, ov) in overrides {
            let spec = self
                .params
                .iter_mut()
                .find(|p| &p.name == name)
                .ok_or_else(|| Error::config(format!("unknown parameter {name} for {}", self.model)))?;
            match spec.kind {
                ParamKind::Categorical => {
                    if ov.low.is_some() || ov.high.is_some() {
                        return Err(Error::config(format!("{name} is categorical")));
                    }
                    if let Some(choices) = &ov.choices {
                        spec.choices = choices.clone();
                    }
                }
                ParamKind::Int | ParamKind::Float => {
                    if ov.choices.is_some() {
                        return Err(Error::config(format!("{name} is numeric")));
                    }
                    if let Some(low) = ov.low {
                        spec.low = low;
                    }
                    if let Some(high) = ov.high {
                        spec.high = high;
                    }
                }
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.params.iter().enumerate() {
            p.validate()?;
            if self.params[..i].iter().any(|q| q.name == p.name) {
                return Err(Error::config(format!("duplicate parameter {}", p.name)));
            }
        }
        Ok(())
    }

    /// Checks that `config` assigns every parameter an in-range value and
    /// nothing else.
    pub fn check(&self, config: &Config) -> Result<()> {
        for p in &self.params {
            let v = config
                .get(&p.name)
                .ok_or_else(|| Error::Validation(format!("missing {}", p.name)))?;
            if !p.contains(*v) {
                return Err(Error::Validation(format!(
                    "{} = {v} outside its range",
                    p.name
                )));
            }
        }
        if let Some(extra) = config.keys().find(|k| self.get(k).is_none()) {
            return Err(Error::Validation(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    pub fn midpoint(&self) -> Config {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.midpoint()))
            .collect()
    }
}

/// Built-in space for a model tag (`resnext`, `resnet` or `ft`).
pub fn space_for(tag: &str) -> Result<SearchSpace> {
    Ok(SearchSpace::for_architecture(tag.parse()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resnext_table() {
        let s = space_for("resnext").unwrap();
        let lr = s.get("learning_rate").unwrap();
        assert_eq!((lr.kind, lr.low, lr.high, lr.log_scale), (ParamKind::Float, 1e-5, 1e-2, true));
        let c = s.get("cardinality").unwrap();
        assert_eq!(c.kind, ParamKind::Categorical);
        assert_eq!(
            c.choices,
            vec![ParamValue::Int(2), ParamValue::Int(4), ParamValue::Int(8), ParamValue::Int(16), ParamValue::Int(32)]
        );
        assert_eq!(s.params.len(), 9);
    }

    #[test]
    fn ft_table() {
        let s = space_for("ft").unwrap();
        let n = s.get("n_layers").unwrap();
        assert_eq!((n.kind, n.low, n.high), (ParamKind::Int, 1.0, 6.0));
        let f = s.get("d_ffn_factor").unwrap();
        assert_eq!((f.low, f.high), (2.0 / 3.0, 8.0 / 3.0));
        assert_eq!(s.get("learning_rate").unwrap().high, 1e-3);
        assert_eq!(s.get("residual_dropout").unwrap().high, 0.2);
    }

    #[test]
    fn resnet_table() {
        let s = space_for("resnet").unwrap();
        assert_eq!(s.params.len(), 8);
        assert!(s.get("cardinality").is_none());
        assert!(s.get("weight_decay").unwrap().log_scale);
    }

    #[test]
    fn unknown_tag() {
        assert!(matches!(space_for("tabnet"), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_and_checks() {
        let mut ov = BTreeMap::new();
        ov.insert(
            "layer_size".to_string(),
            ParamOverride {
                low: Some(16.0),
                high: Some(32.0),
                choices: None,
            },
        );
        let s = space_for("resnet").unwrap().with_overrides(&ov).unwrap();
        assert_eq!(s.get("layer_size").unwrap().high, 32.0);
        let mid = s.midpoint();
        assert_eq!(mid["layer_size"], ParamValue::Int(24));
        assert!(s.check(&mid).is_ok());
        let mut bad = mid.clone();
        bad.insert("layer_size".into(), ParamValue::Int(64));
        assert!(matches!(s.check(&bad), Err(Error::Validation(_))));
        ov.insert("nope".into(), ParamOverride::default());
        assert!(space_for("resnet").unwrap().with_overrides(&ov).is_err());
    }

    #[test]
    fn param_value_json() {
        let cfg: Config = serde_json::from_str(r#"{"a": 3, "b": 0.5, "c": 1.0}"#).unwrap();
        assert_eq!(cfg["a"], ParamValue::Int(3));
        assert_eq!(cfg["c"], ParamValue::Float(1.0));
        assert_eq!(serde_json::to_string(&cfg).unwrap(), r#"{"a":3,"b":0.5,"c":1.0}"#);
    }
}
