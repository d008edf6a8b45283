//! Synthetic datasets for smoke tests and desk-scale benchmark runs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ColumnSchema, Dataset};
use crate::error::Result;

/// Parameters of [`two_gaussians`].
#[derive(Clone, Debug)]
pub struct TwoGaussians {
    pub rows: usize,
    pub n_num: usize,
    pub n_cat: usize,
    pub cat_cardinality: usize,
    /// Per-dimension offset of each class mean from the origin.
    pub shift: f64,
    /// Probability that a categorical cell agrees with the label-driven
    /// category instead of being uniform noise.
    pub cat_signal: f64,
    pub seed: u64,
}

impl Default for TwoGaussians {
    fn default() -> Self {
        Self {
            rows: 1000,
            n_num: 8,
            n_cat: 2,
            cat_cardinality: 4,
            shift: 0.75,
            cat_signal: 0.3,
            seed: 0,
        }
    }
}

/// Balanced binary data: class `y` draws numerics from `N(±shift, I)` and
/// categoricals that lean towards a class-specific category.
pub fn two_gaussians(name: &str, p: &TwoGaussians) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut numeric = Vec::with_capacity(p.rows * p.n_num);
    let mut categorical = Vec::with_capacity(p.rows * p.n_cat);
    let mut labels = Vec::with_capacity(p.rows);
    for i in 0..p.rows {
        let y = i % 2;
        let sign = if y == 1 { 1.0 } else { -1.0 };
        for _ in 0..p.n_num {
            let z: f64 = StandardNormal.sample(&mut rng);
            numeric.push(z + sign * p.shift);
        }
        for j in 0..p.n_cat {
            let c = if rng.gen::<f64>() < p.cat_signal {
                (y + j) % p.cat_cardinality
            } else {
                rng.gen_range(0..p.cat_cardinality)
            };
            categorical.push(c + 1);
        }
        labels.push(y);
    }
    Dataset::new(
        name,
        (0..p.n_num).map(|j| format!("x{j}")).collect(),
        numeric,
        (0..p.n_cat).map(|j| format!("c{j}")).collect(),
        categorical,
        (0..p.n_cat)
            .map(|_| (0..p.cat_cardinality).map(|c| format!("k{c}")).collect())
            .collect(),
        labels,
        vec!["neg".into(), "pos".into()],
    )
}

/// Schema describing `ds` column for column, target last.
pub fn schema_of(ds: &Dataset) -> Vec<ColumnSchema> {
    let mut schema: Vec<ColumnSchema> = ds
        .numeric_names
        .iter()
        .map(|n| ColumnSchema::numeric(n.clone()))
        .collect();
    for (name, cats) in ds.categorical_names.iter().zip(&ds.category_labels) {
        schema.push(ColumnSchema::categorical(name.clone(), Some(cats.clone())));
    }
    schema.push(ColumnSchema::target("target", Some(ds.class_labels.clone())));
    schema
}

/// Writes `ds` as CSV plus a sidecar schema JSON.
pub fn write_dataset(ds: &Dataset, csv_path: &Path, schema_path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(csv_path).map_err(std::io::Error::from)?;
    let mut header: Vec<String> = ds.numeric_names.clone();
    header.extend(ds.categorical_names.iter().cloned());
    header.push("target".into());
    w.write_record(&header).map_err(std::io::Error::from)?;
    for r in 0..ds.n_rows {
        let mut rec: Vec<String> = (0..ds.n_num())
            .map(|c| {
                let v = ds.numeric_value(r, c);
                if v.is_nan() {
                    String::new()
                } else {
                    format!("{v}")
                }
            })
            .collect();
        for c in 0..ds.n_cat() {
            let idx = ds.categorical_value(r, c);
            rec.push(if idx == 0 {
                String::new()
            } else {
                ds.category_labels[c][idx - 1].clone()
            });
        }
        rec.push(ds.class_labels[ds.labels[r]].clone());
        w.write_record(&rec).map_err(std::io::Error::from)?;
    }
    w.flush()?;
    std::fs::write(schema_path, serde_json::to_vec_pretty(&schema_of(ds))?)?;
    Ok(())
}
