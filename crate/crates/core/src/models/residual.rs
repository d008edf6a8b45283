//! Residual MLP with multi-path (ResNeXt) blocks. A single path gives the
//! plain residual MLP.

use rand::Rng;

use super::{check_classes, Builder, InputSchema, Layout, ModelConfig, ModelInstance};
use crate::autodiff::{BatchNormState, Bound, Mode, ParamId, ParamRole, Tape, Tensor, Var};
use crate::data::Features;
use crate::error::Result;

pub(super) const BLOCK_LAYOUT: &str = "x + residual_dropout(bias + sum_p linear2_p(hidden_dropout(relu(linear1_p(batch_norm(x))))))";

/// Architecture-level dimensions shared by both residual variants.
#[derive(Clone, Debug)]
pub(super) struct Shape {
    pub n_layers: usize,
    pub d: usize,
    pub d_embedding: usize,
    pub d_hidden_factor: f64,
    pub cardinality: usize,
    pub hidden_dropout: f64,
    pub residual_dropout: f64,
}

#[derive(Clone, Debug)]
struct Path {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
}

#[derive(Clone, Debug)]
struct Block {
    bn: usize,
    bn_gamma: ParamId,
    bn_beta: ParamId,
    paths: Vec<Path>,
    out_bias: ParamId,
}

#[derive(Clone, Debug)]
pub(super) struct ResidualLayout {
    embeddings: Vec<ParamId>,
    pub(super) stem_w: ParamId,
    pub(super) stem_b: ParamId,
    blocks: Vec<Block>,
    final_bn: usize,
    pub(super) final_gamma: ParamId,
    pub(super) final_beta: ParamId,
    pub(super) head_w: ParamId,
    pub(super) head_b: ParamId,
    hidden_dropout: f64,
    residual_dropout: f64,
}

pub(super) fn build<R: Rng + ?Sized>(
    config: ModelConfig,
    shape: &Shape,
    schema: &InputSchema,
    n_classes: usize,
    rng: &mut R,
) -> Result<ModelInstance> {
    schema.validate()?;
    check_classes(n_classes)?;
    let mut warnings = Vec::new();
    let d = shape.d;
    let c = shape.cardinality;
    let raw = (d as f64 * shape.d_hidden_factor / c as f64).floor() as usize;
    let h_p = if raw == 0 {
        warnings.push(format!(
            "path width floor({d} * {} / {c}) is 0; clamped to 1",
            shape.d_hidden_factor
        ));
        1
    } else {
        raw
    };

    let mut b = Builder::new(rng);
    let mut embeddings = Vec::with_capacity(schema.n_cat());
    for (j, &card) in schema.cat_cardinalities.iter().enumerate() {
        embeddings.push(b.embedding(
            format!("embeddings.{j}"),
            card + 1,
            shape.d_embedding,
            ParamRole::Embedding,
        )?);
    }
    let d_in = schema.n_num + schema.n_cat() * shape.d_embedding;
    let stem_w = b.weight("stem.weight".into(), d_in, d, false)?;
    let stem_b = b.bias("stem.bias".into(), d)?;
    let mut norm_states = Vec::with_capacity(shape.n_layers + 1);
    let mut blocks = Vec::with_capacity(shape.n_layers);
    for l in 0..shape.n_layers {
        let (bn_gamma, bn_beta) = b.norm(&format!("blocks.{l}.norm"), d)?;
        norm_states.push(BatchNormState::new(d));
        let mut paths = Vec::with_capacity(c);
        for p in 0..c {
            let prefix = format!("blocks.{l}.paths.{p}");
            paths.push(Path {
                w1: b.weight(format!("{prefix}.linear1.weight"), d, h_p, true)?,
                b1: b.bias(format!("{prefix}.linear1.bias"), h_p)?,
                w2: b.weight(format!("{prefix}.linear2.weight"), h_p, d, false)?,
            });
        }
        let out_bias = b.bias(format!("blocks.{l}.output.bias"), d)?;
        blocks.push(Block {
            bn: norm_states.len() - 1,
            bn_gamma,
            bn_beta,
            paths,
            out_bias,
        });
    }
    let (final_gamma, final_beta) = b.norm("head.norm", d)?;
    norm_states.push(BatchNormState::new(d));
    let head_w = b.weight("head.weight".into(), d, n_classes, false)?;
    let head_b = b.bias("head.bias".into(), n_classes)?;

    let layout = ResidualLayout {
        embeddings,
        stem_w,
        stem_b,
        blocks,
        final_bn: norm_states.len() - 1,
        final_gamma,
        final_beta,
        head_w,
        head_b,
        hidden_dropout: shape.hidden_dropout,
        residual_dropout: shape.residual_dropout,
    };
    Ok(ModelInstance {
        architecture: config.architecture(),
        config,
        params: b.params,
        norm_states,
        schema: schema.clone(),
        n_classes,
        warnings,
        layout: Layout::Residual(layout),
    })
}

impl ResidualLayout {
    pub(super) fn branch_outputs(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| b.paths.iter().map(|p| p.w2).chain([b.out_bias]))
            .collect()
    }

    /// Concatenation of the numeric columns and one embedding per
    /// categorical column.
    pub(super) fn input(&self, tape: &mut Tape, bound: &Bound, x: &Features) -> Result<Var> {
        let mut parts = Vec::with_capacity(1 + x.n_cat);
        if x.n_num > 0 {
            parts.push(tape.constant(Tensor::matrix(x.rows, x.n_num, x.numeric.clone())?));
        }
        for (j, &table) in self.embeddings.iter().enumerate() {
            let idx: Vec<usize> = (0..x.rows).map(|i| x.categorical[i * x.n_cat + j]).collect();
            parts.push(tape.embedding_lookup(bound[table], &idx)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat_cols(&parts)
        }
    }

    pub(super) fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        norms: &mut [BatchNormState],
        x: &Features,
        mode: Mode,
        rng: &mut R,
        trace: &mut Vec<Var>,
    ) -> Result<Var> {
        let input = self.input(tape, bound, x)?;
        let mut h = tape.linear(input, bound[self.stem_w], Some(bound[self.stem_b]))?;
        for block in &self.blocks {
            trace.push(h);
            let z = tape.batch_norm(h, bound[block.bn_gamma], bound[block.bn_beta], &mut norms[block.bn], mode)?;
            let mut sum: Option<Var> = None;
            for p in &block.paths {
                let a = tape.linear(z, bound[p.w1], Some(bound[p.b1]))?;
                let a = tape.relu(a);
                let a = tape.dropout(a, self.hidden_dropout, mode, rng)?;
                let o = tape.matmul(a, bound[p.w2])?;
                sum = Some(match sum {
                    Some(s) => tape.add(s, o)?,
                    None => o,
                });
            }
            let branch = tape.add_broadcast(sum.expect("at least one path"), bound[block.out_bias])?;
            let branch = tape.dropout(branch, self.residual_dropout, mode, rng)?;
            h = tape.add(h, branch)?;
        }
        trace.push(h);
        let z = tape.batch_norm(
            h,
            bound[self.final_gamma],
            bound[self.final_beta],
            &mut norms[self.final_bn],
            mode,
        )?;
        tape.linear(z, bound[self.head_w], Some(bound[self.head_b]))
    }
}
