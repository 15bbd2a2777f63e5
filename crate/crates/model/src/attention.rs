//! Multi-head attention built from tape primitives.
//!
//! One parameter set serves both self-attention (queries == keys/values,
//! with an output projection) and decoder cross-attention (projection-only,
//! as the decoder equations write it). An optional additive bias of shape
//! `[Tq, Tk]` carries 0 / -inf part restrictions; the same bias applies to
//! every head.

use crate::error::{ModelError, Result};
use crate::init::{trunc_normal, zeros};
use rand::Rng;
use tsd_core::{Bindings, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub out_proj: Option<(ParamId, ParamId)>,
}

impl AttentionParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        with_out_proj: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let mut w = |store: &mut ParamStore, name: &str| {
            store.add(format!("{prefix}.{name}.weight"), trunc_normal(rng, vec![dim, dim], 0.02))
        };
        let wq = w(store, "q");
        let wk = w(store, "k");
        let wv = w(store, "v");
        let bq = store.add(format!("{prefix}.q.bias"), zeros(vec![dim]));
        let bk = store.add(format!("{prefix}.k.bias"), zeros(vec![dim]));
        let bv = store.add(format!("{prefix}.v.bias"), zeros(vec![dim]));
        let out_proj = with_out_proj.then(|| {
            let wo = store
                .add(format!("{prefix}.out.weight"), trunc_normal(rng, vec![dim, dim], 0.02));
            let bo = store.add(format!("{prefix}.out.bias"), zeros(vec![dim]));
            (wo, bo)
        });
        Self { wq, bq, wk, bk, wv, bv, out_proj }
    }
}

/// Attention output plus per-head weights (each `[Tq, Tk]` row-major) copied
/// off the tape for inspection and export.
pub struct AttentionOutput {
    pub out: Var,
    pub head_weights: Vec<Vec<f64>>,
    pub tq: usize,
    pub tk: usize,
}

impl AttentionOutput {
    /// Head-mean attention map, `[Tq, Tk]` row-major.
    pub fn mean_weights(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.tq * self.tk];
        for head in &self.head_weights {
            for (m, &w) in mean.iter_mut().zip(head) {
                *m += w;
            }
        }
        let h = self.head_weights.len() as f64;
        mean.iter_mut().for_each(|m| *m /= h);
        mean
    }
}

/// Multi-head attention: per head `softmax(bias + Q K^T * scale) V`, heads
/// concatenated along channels. `scale` defaults to `1/sqrt(d_head)`; pass
/// `unscaled_logits` to evaluate the literal unscaled form.
pub struct AttentionConfig {
    pub heads: usize,
    pub unscaled_logits: bool,
}

pub fn multi_head_attention(
    tape: &mut Tape,
    binds: &Bindings,
    params: &AttentionParams,
    q_input: Var,
    kv_input: Var,
    cfg: &AttentionConfig,
    bias: Option<&[f64]>,
) -> Result<AttentionOutput> {
    let dim = *tape.shape(q_input).last().unwrap();
    if cfg.heads == 0 || dim % cfg.heads != 0 {
        return Err(ModelError::Config(format!("heads {} must divide dim {}", cfg.heads, dim)));
    }
    let d_head = dim / cfg.heads;
    let tq = tape.shape(q_input)[0];
    let tk = tape.shape(kv_input)[0];

    let q = project(tape, binds, q_input, params.wq, params.bq)?;
    let k = project(tape, binds, kv_input, params.wk, params.bk)?;
    let v = project(tape, binds, kv_input, params.wv, params.bv)?;

    let bias_var = match bias {
        Some(b) => {
            if b.len() != tq * tk {
                return Err(ModelError::Contract(format!(
                    "attention bias has {} entries, expected {}x{}",
                    b.len(),
                    tq,
                    tk
                )));
            }
            Some(tape.constant(vec![tq, tk], b.to_vec())?)
        }
        None => None,
    };

    let scale = if cfg.unscaled_logits { 1.0 } else { 1.0 / (d_head as f64).sqrt() };
    let mut head_outputs = Vec::with_capacity(cfg.heads);
    let mut head_weights = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (c0, c1) = (h * d_head, (h + 1) * d_head);
        let qh = tape.slice_cols(q, c0, c1)?;
        let kh = tape.slice_cols(k, c0, c1)?;
        let vh = tape.slice_cols(v, c0, c1)?;
        let kht = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kht)?;
        let logits = tape.scale(logits, scale)?;
        let logits = match bias_var {
            Some(b) => tape.add(logits, b)?,
            None => logits,
        };
        let weights = tape.softmax_rows(logits)?;
        head_weights.push(tape.value(weights).to_vec());
        head_outputs.push(tape.matmul(weights, vh)?);
    }
    let mut out = concat_cols(tape, &head_outputs)?;
    if let Some((wo, bo)) = params.out_proj {
        out = project(tape, binds, out, wo, bo)?;
    }
    Ok(AttentionOutput { out, head_weights, tq, tk })
}

fn project(tape: &mut Tape, binds: &Bindings, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let prod = tape.matmul(x, binds.var(w))?;
    Ok(tape.add_row(prod, binds.var(b))?)
}

/// Concatenation along columns via transposed row concatenation.
fn concat_cols(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    let mut transposed = Vec::with_capacity(parts.len());
    for &p in parts {
        transposed.push(tape.transpose(p)?);
    }
    let stacked = tape.concat_rows(&transposed)?;
    Ok(tape.transpose(stacked)?)
}
