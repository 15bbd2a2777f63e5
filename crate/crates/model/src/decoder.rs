//! Teacher-student decoder.
//!
//! Learnable semantic part queries are refined jointly with the encoder's
//! class token by one self-attention pass, then two cross-attention branches
//! read patch features with identical shared parameters. The teacher branch
//! adds a 0/-inf part-mask bias to its attention logits so each query can
//! only see its own part; the student attends freely and is pulled towards
//! the teacher by the distillation loss.

use crate::attention::{multi_head_attention, AttentionConfig, AttentionParams};
use crate::error::Result;
use crate::init::{ones, trunc_normal, zeros};
use crate::parts::PartMask;
use rand::Rng;
use tsd_core::{Bindings, ParamId, ParamStore, Tape, Var};

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct DecoderConfig {
    /// Number of semantic part queries P.
    pub parts: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    /// Evaluate the teacher's masked logits without the 1/sqrt(d_head)
    /// factor (the literal unscaled form); default keeps both branches
    /// scaled so an all-ones mask reproduces the student exactly.
    pub teacher_unscaled_logits: bool,
    /// Replace an empty part row by attend-everywhere instead of failing.
    pub empty_part_fallback: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            parts: 8,
            dim: 64,
            heads: 4,
            ffn_dim: 256,
            layers: 1,
            teacher_unscaled_logits: false,
            empty_part_fallback: true,
        }
    }
}

#[derive(Debug, Clone)]
struct CrossLayerParams {
    ln_q_gain: ParamId,
    ln_q_bias: ParamId,
    cross: AttentionParams,
    ln_ffn_gain: ParamId,
    ln_ffn_bias: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
}

/// One decoder branch's result: part features `[P, D]`, their channel
/// concatenation `[P*D]`, and head-mean attention maps `[P, N]` row-major.
pub struct DecoderOutput {
    pub parts: Var,
    pub concat: Var,
    pub attention: Vec<f64>,
    pub num_patches: usize,
}

pub struct TsdDecoder {
    pub cfg: DecoderConfig,
    queries: ParamId,
    self_ln_gain: ParamId,
    self_ln_bias: ParamId,
    self_attn: AttentionParams,
    layers: Vec<CrossLayerParams>,
}

impl TsdDecoder {
    pub fn init(cfg: DecoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.dim;
        let queries = store.add("decoder.queries", trunc_normal(rng, vec![cfg.parts, d], 0.02));
        let self_ln_gain = store.add("decoder.self.ln.gain", ones(vec![d]));
        let self_ln_bias = store.add("decoder.self.ln.bias", zeros(vec![d]));
        let self_attn = AttentionParams::init(store, "decoder.self.attn", d, true, rng);
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = format!("decoder.layer{i}");
                CrossLayerParams {
                    ln_q_gain: store.add(format!("{p}.ln_q.gain"), ones(vec![d])),
                    ln_q_bias: store.add(format!("{p}.ln_q.bias"), zeros(vec![d])),
                    cross: AttentionParams::init(store, &format!("{p}.cross"), d, false, rng),
                    ln_ffn_gain: store.add(format!("{p}.ln_ffn.gain"), ones(vec![d])),
                    ln_ffn_bias: store.add(format!("{p}.ln_ffn.bias"), zeros(vec![d])),
                    ffn_w1: store
                        .add(format!("{p}.ffn.w1"), trunc_normal(rng, vec![d, cfg.ffn_dim], 0.02)),
                    ffn_b1: store.add(format!("{p}.ffn.b1"), zeros(vec![cfg.ffn_dim])),
                    ffn_w2: store
                        .add(format!("{p}.ffn.w2"), trunc_normal(rng, vec![cfg.ffn_dim, d], 0.02)),
                    ffn_b2: store.add(format!("{p}.ffn.b2"), zeros(vec![d])),
                }
            })
            .collect();
        Ok(Self { cfg, queries, self_ln_gain, self_ln_bias, self_attn, layers })
    }

    /// Joint self-attention over `[F_g, Q_em]`; returns the refined query
    /// rows `[P, D]` (the refined class token is not consumed downstream).
    pub fn refine_queries(&self, tape: &mut Tape, binds: &Bindings, global: Var) -> Result<Var> {
        let d = self.cfg.dim;
        let g_row = tape.reshape(global, vec![1, d])?;
        let seq = tape.concat_rows(&[g_row, binds.var(self.queries)])?;
        let normed = tape.layer_norm_rows(
            seq,
            binds.var(self.self_ln_gain),
            binds.var(self.self_ln_bias),
            LN_EPS,
        )?;
        let attn_cfg = AttentionConfig { heads: self.cfg.heads, unscaled_logits: false };
        let attn = multi_head_attention(tape, binds, &self.self_attn, normed, normed, &attn_cfg, None)?;
        let seq = tape.add(seq, attn.out)?;
        tape.slice_rows(seq, 1, self.cfg.parts + 1)
    }

    /// One branch: cross-attention from refined queries into patch features,
    /// optionally restricted by an additive 0/-inf bias, then a pre-norm FFN.
    fn branch(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        refined: Var,
        patches: Var,
        bias: Option<&[f64]>,
        unscaled: bool,
    ) -> Result<DecoderOutput> {
        let num_patches = tape.shape(patches)[0];
        let mut x = refined;
        let mut attention = vec![0.0; self.cfg.parts * num_patches];
        for layer in &self.layers {
            let normed = tape.layer_norm_rows(
                x,
                binds.var(layer.ln_q_gain),
                binds.var(layer.ln_q_bias),
                LN_EPS,
            )?;
            let attn_cfg = AttentionConfig { heads: self.cfg.heads, unscaled_logits: unscaled };
            let attn =
                multi_head_attention(tape, binds, &layer.cross, normed, patches, &attn_cfg, bias)?;
            attention = attn.mean_weights();
            x = tape.add(x, attn.out)?;

            let normed = tape.layer_norm_rows(
                x,
                binds.var(layer.ln_ffn_gain),
                binds.var(layer.ln_ffn_bias),
                LN_EPS,
            )?;
            let hidden = tape.matmul(normed, binds.var(layer.ffn_w1))?;
            let hidden = tape.add_row(hidden, binds.var(layer.ffn_b1))?;
            let hidden = tape.gelu(hidden)?;
            let ffn_out = tape.matmul(hidden, binds.var(layer.ffn_w2))?;
            let ffn_out = tape.add_row(ffn_out, binds.var(layer.ffn_b2))?;
            x = tape.add(x, ffn_out)?;
        }
        let concat = tape.reshape(x, vec![self.cfg.parts * self.cfg.dim])?;
        Ok(DecoderOutput { parts: x, concat, attention, num_patches })
    }

    /// Student branch only (inference path: no mask required).
    pub fn student_forward(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        global: Var,
        patches: Var,
    ) -> Result<DecoderOutput> {
        let refined = self.refine_queries(tape, binds, global)?;
        self.branch(tape, binds, refined, patches, None, false)
    }

    /// Teacher branch only, restricted by the part mask.
    pub fn teacher_forward(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        global: Var,
        patches: Var,
        mask: &PartMask,
    ) -> Result<DecoderOutput> {
        let refined = self.refine_queries(tape, binds, global)?;
        let bias = mask.to_attention_bias(self.cfg.empty_part_fallback)?;
        self.branch(tape, binds, refined, patches, Some(&bias), self.cfg.teacher_unscaled_logits)
    }

    /// Both branches off one shared query refinement. The parameters are the
    /// same ids, so the two branches are identical up to the mask bias.
    pub fn tsd_forward(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        global: Var,
        patches: Var,
        mask: &PartMask,
    ) -> Result<(DecoderOutput, DecoderOutput)> {
        let refined = self.refine_queries(tape, binds, global)?;
        let student = self.branch(tape, binds, refined, patches, None, false)?;
        let bias = mask.to_attention_bias(self.cfg.empty_part_fallback)?;
        let teacher = self.branch(
            tape,
            binds,
            refined,
            patches,
            Some(&bias),
            self.cfg.teacher_unscaled_logits,
        )?;
        Ok((student, teacher))
    }
}
