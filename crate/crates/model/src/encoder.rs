//! ViT-style encoder: strided patch projection, learned position embeddings,
//! a class token and pre-norm transformer blocks. Produces the global
//! class-token feature and per-patch features.

use crate::attention::{multi_head_attention, AttentionConfig, AttentionParams};
use crate::error::{ModelError, Result};
use crate::init::{ones, trunc_normal, zeros};
use rand::Rng;
use tsd_core::{Bindings, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_h: 256,
            image_w: 128,
            channels: 3,
            patch_size: 16,
            stride: 16,
            depth: 4,
            heads: 4,
            dim: 64,
            ffn_dim: 256,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.stride == 0 || self.dim == 0 || self.depth == 0 {
            return Err(ModelError::Config("encoder sizes must be positive".into()));
        }
        if self.image_h < self.patch_size || self.image_w < self.patch_size {
            return Err(ModelError::Config("image smaller than one patch".into()));
        }
        if (self.image_h - self.patch_size) % self.stride != 0
            || (self.image_w - self.patch_size) % self.stride != 0
        {
            return Err(ModelError::Config(format!(
                "image {}x{} does not tile with patch {} stride {}",
                self.image_h, self.image_w, self.patch_size, self.stride
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "heads {} must divide dim {}",
                self.heads, self.dim
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            (self.image_h - self.patch_size) / self.stride + 1,
            (self.image_w - self.patch_size) / self.stride + 1,
        )
    }

    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }
}

#[derive(Debug, Clone)]
struct BlockParams {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    attn: AttentionParams,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
}

/// Encoder output: class-token feature `[D]`, patch features `[N, D]` and the
/// patch grid they came from.
pub struct EncoderOutput {
    pub global: Var,
    pub patches: Var,
    pub grid: (usize, usize),
}

pub struct Encoder {
    pub cfg: EncoderConfig,
    patch_w: ParamId,
    patch_b: ParamId,
    cls_token: ParamId,
    pos_embed: ParamId,
    blocks: Vec<BlockParams>,
    final_gain: ParamId,
    final_bias: ParamId,
}

const LN_EPS: f64 = 1e-6;

impl Encoder {
    pub fn init(cfg: EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let patch_dim = cfg.channels * cfg.patch_size * cfg.patch_size;
        let n = cfg.num_patches();
        let patch_w =
            store.add("encoder.patch.weight", trunc_normal(rng, vec![patch_dim, cfg.dim], 0.02));
        let patch_b = store.add("encoder.patch.bias", zeros(vec![cfg.dim]));
        let cls_token = store.add("encoder.cls", trunc_normal(rng, vec![1, cfg.dim], 0.02));
        let pos_embed =
            store.add("encoder.pos", trunc_normal(rng, vec![n + 1, cfg.dim], 0.02));
        let blocks = (0..cfg.depth)
            .map(|i| {
                let p = format!("encoder.block{i}");
                BlockParams {
                    ln1_gain: store.add(format!("{p}.ln1.gain"), ones(vec![cfg.dim])),
                    ln1_bias: store.add(format!("{p}.ln1.bias"), zeros(vec![cfg.dim])),
                    attn: AttentionParams::init(store, &format!("{p}.attn"), cfg.dim, true, rng),
                    ln2_gain: store.add(format!("{p}.ln2.gain"), ones(vec![cfg.dim])),
                    ln2_bias: store.add(format!("{p}.ln2.bias"), zeros(vec![cfg.dim])),
                    ffn_w1: store.add(
                        format!("{p}.ffn.w1"),
                        trunc_normal(rng, vec![cfg.dim, cfg.ffn_dim], 0.02),
                    ),
                    ffn_b1: store.add(format!("{p}.ffn.b1"), zeros(vec![cfg.ffn_dim])),
                    ffn_w2: store.add(
                        format!("{p}.ffn.w2"),
                        trunc_normal(rng, vec![cfg.ffn_dim, cfg.dim], 0.02),
                    ),
                    ffn_b2: store.add(format!("{p}.ffn.b2"), zeros(vec![cfg.dim])),
                }
            })
            .collect();
        let final_gain = store.add("encoder.ln_final.gain", ones(vec![cfg.dim]));
        let final_bias = store.add("encoder.ln_final.bias", zeros(vec![cfg.dim]));
        Ok(Self { cfg, patch_w, patch_b, cls_token, pos_embed, blocks, final_gain, final_bias })
    }

    /// Flattens strided patches of a `[C, H, W]` image into an `[N, C*ps*ps]`
    /// row-major matrix (grid row-major, channel-major within a patch).
    pub fn extract_patches(&self, image: &Tensor) -> Result<Vec<f64>> {
        let cfg = &self.cfg;
        let expected = [cfg.channels, cfg.image_h, cfg.image_w];
        if image.shape() != expected {
            return Err(ModelError::Contract(format!(
                "image shape {:?}, expected {:?}",
                image.shape(),
                expected
            )));
        }
        let (gh, gw) = cfg.grid();
        let ps = cfg.patch_size;
        let (h, w) = (cfg.image_h, cfg.image_w);
        let data = image.data();
        let mut out = Vec::with_capacity(gh * gw * cfg.channels * ps * ps);
        for gy in 0..gh {
            for gx in 0..gw {
                let (y0, x0) = (gy * cfg.stride, gx * cfg.stride);
                for c in 0..cfg.channels {
                    for py in 0..ps {
                        for px in 0..ps {
                            out.push(data[c * h * w + (y0 + py) * w + (x0 + px)]);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn encode(&self, tape: &mut Tape, binds: &Bindings, image: &Tensor) -> Result<EncoderOutput> {
        let patch_matrix = self.extract_patches(image)?;
        self.encode_patches(tape, binds, patch_matrix)
    }

    /// Encode from an already-flattened `[N, C*ps*ps]` patch matrix.
    pub fn encode_patches(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        patch_matrix: Vec<f64>,
    ) -> Result<EncoderOutput> {
        let cfg = &self.cfg;
        let n = cfg.num_patches();
        let patch_dim = cfg.channels * cfg.patch_size * cfg.patch_size;
        let patches_in = tape.constant(vec![n, patch_dim], patch_matrix)?;
        let projected = tape.matmul(patches_in, binds.var(self.patch_w))?;
        let projected = tape.add_row(projected, binds.var(self.patch_b))?;

        let cls = binds.var(self.cls_token);
        let mut x = tape.concat_rows(&[cls, projected])?;
        x = tape.add(x, binds.var(self.pos_embed))?;

        let attn_cfg = AttentionConfig { heads: cfg.heads, unscaled_logits: false };
        for blk in &self.blocks {
            let normed =
                tape.layer_norm_rows(x, binds.var(blk.ln1_gain), binds.var(blk.ln1_bias), LN_EPS)?;
            let attn = multi_head_attention(tape, binds, &blk.attn, normed, normed, &attn_cfg, None)?;
            x = tape.add(x, attn.out)?;

            let normed =
                tape.layer_norm_rows(x, binds.var(blk.ln2_gain), binds.var(blk.ln2_bias), LN_EPS)?;
            let hidden = tape.matmul(normed, binds.var(blk.ffn_w1))?;
            let hidden = tape.add_row(hidden, binds.var(blk.ffn_b1))?;
            let hidden = tape.gelu(hidden)?;
            let ffn_out = tape.matmul(hidden, binds.var(blk.ffn_w2))?;
            let ffn_out = tape.add_row(ffn_out, binds.var(blk.ffn_b2))?;
            x = tape.add(x, ffn_out)?;
        }
        let x = tape.layer_norm_rows(x, binds.var(self.final_gain), binds.var(self.final_bias), LN_EPS)?;

        let global = tape.row(x, 0)?;
        let patches = tape.slice_rows(x, 1, n + 1)?;
        Ok(EncoderOutput { global, patches, grid: cfg.grid() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg() -> EncoderConfig {
        EncoderConfig {
            image_h: 8,
            image_w: 8,
            channels: 1,
            patch_size: 4,
            stride: 4,
            depth: 1,
            heads: 2,
            dim: 8,
            ffn_dim: 16,
        }
    }

    #[test]
    fn default_grid_matches_non_overlapping_arithmetic() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.grid(), (16, 8));
        assert_eq!(cfg.num_patches(), 128);
    }

    #[test]
    fn overlapping_stride_grid() {
        // floor((256-16)/12)+1 = 21, floor((128-16)/12)+1 = 10
        let cfg = EncoderConfig { stride: 12, ..Default::default() };
        assert_eq!(cfg.grid(), (21, 10));
        assert_eq!(cfg.num_patches(), 210);
    }

    #[test]
    fn invalid_tiling_is_rejected() {
        let cfg = EncoderConfig { stride: 15, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn output_shapes_match_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = Encoder::init(toy_cfg(), &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let binds = store.bind(&mut tape);
        let image = Tensor::from_fn(vec![1, 8, 8], |i| (i as f64) / 64.0).unwrap();
        let out = enc.encode(&mut tape, &binds, &image).unwrap();
        assert_eq!(tape.shape(out.global), &[8]);
        assert_eq!(tape.shape(out.patches), &[4, 8]);
        assert_eq!(out.grid, (2, 2));
    }

    #[test]
    fn zero_image_with_zero_projection_propagates_positions_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = Encoder::init(toy_cfg(), &mut store, &mut rng).unwrap();
        // zero the patch projection; outputs must then depend on pos/cls only
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id) == "encoder.patch.weight" || store.name(id) == "encoder.patch.bias" {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let binds = store.bind(&mut tape);
        let zero_image = Tensor::zeros(vec![1, 8, 8]);
        let out_zero = enc.encode(&mut tape, &binds, &zero_image).unwrap();
        let other_image = Tensor::from_fn(vec![1, 8, 8], |i| i as f64).unwrap();
        let out_other = enc.encode(&mut tape, &binds, &other_image).unwrap();
        assert_eq!(tape.value(out_zero.patches), tape.value(out_other.patches));
        assert_eq!(tape.shape(out_zero.patches), &[4, 8]);
    }

    #[test]
    fn permuting_patches_and_positions_permutes_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = Encoder::init(toy_cfg(), &mut store, &mut rng).unwrap();
        let image = Tensor::from_fn(vec![1, 8, 8], |i| ((i * 37) % 11) as f64 / 11.0).unwrap();

        let mut tape = Tape::new();
        let binds = store.bind(&mut tape);
        let base = enc.encode(&mut tape, &binds, &image).unwrap();
        let base_patches = tape.value(base.patches).to_vec();
        let base_global = tape.value(base.global).to_vec();

        // swap patch rows 1 and 3 of the flattened patch matrix, and swap the
        // matching position-embedding rows (offset by one for the class token)
        let mut pm = enc.extract_patches(&image).unwrap();
        let pd = 16;
        for k in 0..pd {
            pm.swap(pd + k, 3 * pd + k);
        }
        let pos_id = store.ids().find(|&id| store.name(id) == "encoder.pos").unwrap();
        let dim = 8;
        {
            let pos = store.get_mut(pos_id).data_mut();
            for k in 0..dim {
                pos.swap((1 + 1) * dim + k, (1 + 3) * dim + k);
            }
        }
        let mut tape2 = Tape::new();
        let binds2 = store.bind(&mut tape2);
        let permuted = enc.encode_patches(&mut tape2, &binds2, pm).unwrap();
        let perm_patches = tape2.value(permuted.patches).to_vec();
        let perm_global = tape2.value(permuted.global).to_vec();

        for k in 0..dim {
            assert!((base_patches[dim + k] - perm_patches[3 * dim + k]).abs() < 1e-12);
            assert!((base_patches[3 * dim + k] - perm_patches[dim + k]).abs() < 1e-12);
            assert!((base_patches[k] - perm_patches[k]).abs() < 1e-12);
            assert!((base_global[k] - perm_global[k]).abs() < 1e-12);
        }
    }
}
