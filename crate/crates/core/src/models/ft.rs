//! Feature-tokenizer transformer with pre-norm layers and ReGLU feed-forward
//! blocks.

use rand::Rng;

use super::config::{FtConfig, N_HEADS};
use super::{check_classes, Builder, InputSchema, Layout, ModelConfig, ModelInstance};
use crate::autodiff::{Bound, Mode, ParamId, ParamRole, Tape, Tensor, Var};
use crate::data::Features;
use crate::error::Result;

pub(super) const BLOCK_LAYOUT: &str = "x + residual_dropout(out(attention(layer_norm(x)))); x + residual_dropout(linear2(ffn_dropout(value(ln(x)) * relu(gate(ln(x))))))";

#[derive(Clone, Debug)]
pub(super) struct Linear {
    pub(super) w: ParamId,
    pub(super) b: ParamId,
}

#[derive(Clone, Debug)]
struct Layer {
    ln1: (ParamId, ParamId),
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: (ParamId, ParamId),
    value: Linear,
    gate: Linear,
    down: Linear,
}

#[derive(Clone, Debug)]
pub(super) struct FtLayout {
    num_weight: Option<ParamId>,
    num_bias: Option<ParamId>,
    cat_table: Option<ParamId>,
    cat_bias: Option<ParamId>,
    /// Row offset of each categorical column inside `cat_table`.
    cat_offsets: Vec<usize>,
    cls: ParamId,
    layers: Vec<Layer>,
    pub(super) head_norm: (ParamId, ParamId),
    pub(super) head: Linear,
    residual_dropout: f64,
    attn_dropout: f64,
    ffn_dropout: f64,
}

fn linear<R: Rng + ?Sized>(
    b: &mut Builder<'_, R>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    feeds_relu: bool,
) -> Result<Linear> {
    Ok(Linear {
        w: b.weight(format!("{name}.weight"), fan_in, fan_out, feeds_relu)?,
        b: b.bias(format!("{name}.bias"), fan_out)?,
    })
}

pub(super) fn build<R: Rng + ?Sized>(
    cfg: &FtConfig,
    schema: &InputSchema,
    n_classes: usize,
    rng: &mut R,
) -> Result<ModelInstance> {
    schema.validate()?;
    check_classes(n_classes)?;
    let d = cfg.effective_d_token();
    let f = cfg.ffn_width();
    let mut warnings = Vec::new();
    if d != cfg.d_token {
        warnings.push(format!("d_token {} rounded down to {d}", cfg.d_token));
    }

    let mut b = Builder::new(rng);
    let (num_weight, num_bias) = if schema.n_num > 0 {
        (
            Some(b.embedding("tokenizer.num_weight".into(), schema.n_num, d, ParamRole::Embedding)?),
            Some(b.embedding("tokenizer.num_bias".into(), schema.n_num, d, ParamRole::Bias)?),
        )
    } else {
        (None, None)
    };
    let mut cat_offsets = Vec::with_capacity(schema.n_cat());
    let mut rows = 0;
    for &card in &schema.cat_cardinalities {
        cat_offsets.push(rows);
        rows += card + 1;
    }
    let (cat_table, cat_bias) = if schema.n_cat() > 0 {
        (
            Some(b.embedding("tokenizer.cat_embeddings".into(), rows, d, ParamRole::Embedding)?),
            Some(b.embedding("tokenizer.cat_bias".into(), schema.n_cat(), d, ParamRole::Bias)?),
        )
    } else {
        (None, None)
    };
    let cls = b.embedding("tokenizer.cls".into(), 1, d, ParamRole::Embedding)?;

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = format!("layers.{l}");
        layers.push(Layer {
            ln1: b.norm(&format!("{p}.attention_norm"), d)?,
            q: linear(&mut b, &format!("{p}.attention.q"), d, d, false)?,
            k: linear(&mut b, &format!("{p}.attention.k"), d, d, false)?,
            v: linear(&mut b, &format!("{p}.attention.v"), d, d, false)?,
            out: linear(&mut b, &format!("{p}.attention.out"), d, d, false)?,
            ln2: b.norm(&format!("{p}.ffn_norm"), d)?,
            value: linear(&mut b, &format!("{p}.ffn.value"), d, f, false)?,
            gate: linear(&mut b, &format!("{p}.ffn.gate"), d, f, true)?,
            down: linear(&mut b, &format!("{p}.ffn.linear2"), f, d, false)?,
        });
    }
    let head_norm = b.norm("head.norm", d)?;
    let head = linear(&mut b, "head", d, n_classes, false)?;

    let layout = FtLayout {
        num_weight,
        num_bias,
        cat_table,
        cat_bias,
        cat_offsets,
        cls,
        layers,
        head_norm,
        head,
        residual_dropout: cfg.residual_dropout,
        attn_dropout: cfg.attn_dropout,
        ffn_dropout: cfg.ffn_dropout,
    };
    Ok(ModelInstance {
        architecture: super::Architecture::FtTransformer,
        config: ModelConfig::FtTransformer(cfg.clone()),
        params: b.params,
        norm_states: Vec::new(),
        schema: schema.clone(),
        n_classes,
        warnings,
        layout: Layout::Ft(layout),
    })
}

impl FtLayout {
    pub(super) fn branch_outputs(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| [l.out.w, l.out.b, l.down.w, l.down.b])
            .collect()
    }

    /// Token matrix of shape `(m·T)×d`, sample-major, CLS first.
    pub(super) fn tokens(&self, tape: &mut Tape, bound: &Bound, x: &Features) -> Result<(Var, usize)> {
        let m = x.rows;
        let t = 1 + x.n_num + x.n_cat;
        let mut parts = vec![tape.gather_rows(bound[self.cls], &vec![0; m])?];
        if let (Some(w), Some(b)) = (self.num_weight, self.num_bias) {
            let xs = tape.constant(Tensor::matrix(m, x.n_num, x.numeric.clone())?);
            let scaled = tape.feature_scale(xs, bound[w])?;
            parts.push(tape.add_tiled(scaled, bound[b])?);
        }
        if let (Some(table), Some(b)) = (self.cat_table, self.cat_bias) {
            let idx: Vec<usize> = x
                .categorical
                .iter()
                .enumerate()
                .map(|(i, &c)| self.cat_offsets[i % x.n_cat] + c)
                .collect();
            let emb = tape.embedding_lookup(bound[table], &idx)?;
            parts.push(tape.add_tiled(emb, bound[b])?);
        }
        let stacked = tape.concat_rows(&parts)?;
        // stacked is grouped by token kind; reorder to one sequence per sample
        let num_base = m;
        let cat_base = m + m * x.n_num;
        let mut order = Vec::with_capacity(m * t);
        for i in 0..m {
            order.push(i);
            order.extend((0..x.n_num).map(|j| num_base + i * x.n_num + j));
            order.extend((0..x.n_cat).map(|j| cat_base + i * x.n_cat + j));
        }
        Ok((tape.gather_rows(stacked, &order)?, t))
    }

    pub(super) fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: &Features,
        mode: Mode,
        rng: &mut R,
        trace: &mut Vec<Var>,
    ) -> Result<Var> {
        let lin = |tape: &mut Tape, v: Var, l: &Linear| tape.linear(v, bound[l.w], Some(bound[l.b]));
        let (mut h, t) = self.tokens(tape, bound, x)?;
        for layer in &self.layers {
            trace.push(h);
            let z = tape.layer_norm(h, bound[layer.ln1.0], bound[layer.ln1.1])?;
            let q = lin(tape, z, &layer.q)?;
            let k = lin(tape, z, &layer.k)?;
            let v = lin(tape, z, &layer.v)?;
            let a = tape.attention(q, k, v, t, N_HEADS, self.attn_dropout, mode, rng)?;
            let a = lin(tape, a, &layer.out)?;
            let a = tape.dropout(a, self.residual_dropout, mode, rng)?;
            h = tape.add(h, a)?;

            let z = tape.layer_norm(h, bound[layer.ln2.0], bound[layer.ln2.1])?;
            let value = lin(tape, z, &layer.value)?;
            let gate = lin(tape, z, &layer.gate)?;
            let gate = tape.relu(gate);
            let g = tape.mul(value, gate)?;
            let g = tape.dropout(g, self.ffn_dropout, mode, rng)?;
            let g = lin(tape, g, &layer.down)?;
            let g = tape.dropout(g, self.residual_dropout, mode, rng)?;
            h = tape.add(h, g)?;
        }
        trace.push(h);
        let cls_rows: Vec<usize> = (0..x.rows).map(|i| i * t).collect();
        let c = tape.gather_rows(h, &cls_rows)?;
        let c = tape.layer_norm(c, bound[self.head_norm.0], bound[self.head_norm.1])?;
        let c = tape.relu(c);
        lin(tape, c, &self.head)
    }
}
