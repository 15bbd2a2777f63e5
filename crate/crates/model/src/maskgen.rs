//! Learnable part classifier over patch features.
//!
//! A single fully-connected layer scores every patch against P parts plus a
//! background class; row-wise softmax yields soft heatmaps, per-patch argmax
//! yields the hard mask fed to the teacher. The hard mask is
//! non-differentiable by design: gradients reach the classifier only through
//! the mask loss on the soft heatmaps.

use crate::error::Result;
use crate::init::trunc_normal;
use crate::parts::{PartLabelMap, PartMask};
use rand::Rng;
use tsd_core::{Bindings, ParamId, ParamStore, Tape, Var};

pub struct MaskGenerator {
    pub parts: usize,
    pub dim: usize,
    classifier: ParamId,
}

impl MaskGenerator {
    pub fn init(parts: usize, dim: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let classifier =
            store.add("maskgen.classifier", trunc_normal(rng, vec![parts + 1, dim], 0.02));
        Self { parts, dim, classifier }
    }

    /// Soft heatmaps `[N, P+1]`: row-wise softmax of patch-vs-class scores.
    /// Class 0 is background.
    pub fn heatmaps(&self, tape: &mut Tape, binds: &Bindings, patches: Var) -> Result<Var> {
        let g_t = tape.transpose(binds.var(self.classifier))?;
        let logits = tape.matmul(patches, g_t)?;
        Ok(tape.softmax_rows(logits)?)
    }

    /// Hard per-patch assignment by row argmax, ties broken towards the
    /// lowest class index. The part mask carries only the P foreground rows.
    pub fn binarize(&self, heatmaps: &[f64], num_patches: usize) -> Result<(PartMask, PartLabelMap)> {
        let classes = self.parts + 1;
        debug_assert_eq!(heatmaps.len(), num_patches * classes);
        let mut labels = Vec::with_capacity(num_patches);
        for i in 0..num_patches {
            let row = &heatmaps[i * classes..(i + 1) * classes];
            let mut best = 0usize;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            labels.push(best);
        }
        let mask = mask_from_labels(&labels, self.parts)?;
        Ok((mask, PartLabelMap::new(labels, self.parts)?))
    }

    /// Soft-weighted part pooling: each foreground part's feature is the
    /// heatmap-weighted average of patch features, with a 1e-12 stabilizer
    /// on the weight sums. Returns `([P, D], [P*D])`.
    pub fn part_pool(&self, tape: &mut Tape, patches: Var, heatmaps: Var) -> Result<(Var, Var)> {
        let w_all = tape.transpose(heatmaps)?; // [(P+1), N]
        let w = tape.slice_rows(w_all, 1, self.parts + 1)?; // foreground rows
        let numer = tape.matmul(w, patches)?; // [P, D]
        let sums = tape.row_sums(w)?; // [P]
        let sums = tape.add_scalar(sums, 1e-12)?;
        let pooled = tape.div_col(numer, sums)?;
        let concat = tape.reshape(pooled, vec![self.parts * self.dim])?;
        Ok((pooled, concat))
    }
}

/// Hard mask from per-patch labels (0 = background excluded from all rows).
pub fn mask_from_labels(labels: &[usize], parts: usize) -> Result<PartMask> {
    let n = labels.len();
    let mut bits = vec![false; parts * n];
    for (i, &l) in labels.iter().enumerate() {
        if l > 0 {
            bits[(l - 1) * n + i] = true;
        }
    }
    PartMask::new(parts, n, bits)
}

/// Ground-truth part visibility: part p is visible when at least
/// `max(1, ceil(min_fraction * N))` patches carry label p.
pub fn visibility_labels(gt: &PartLabelMap, parts: usize, min_fraction: f64) -> Vec<u8> {
    let n = gt.len();
    let needed = ((min_fraction * n as f64).ceil() as usize).max(1);
    let mut counts = vec![0usize; parts + 1];
    for &l in &gt.labels {
        counts[l] += 1;
    }
    (1..=parts).map(|p| u8::from(counts[p] >= needed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tsd_core::Tensor;

    fn setup(parts: usize, dim: usize) -> (ParamStore, MaskGenerator) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let gen = MaskGenerator::init(parts, dim, &mut store, &mut rng);
        (store, gen)
    }

    #[test]
    fn zero_classifier_gives_uniform_heatmaps() {
        let (mut store, gen) = setup(3, 4);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let binds = store.bind(&mut tape);
        let patches = tape.leaf(&Tensor::from_fn(vec![5, 4], |i| i as f64 * 0.1).unwrap());
        let h = gen.heatmaps(&mut tape, &binds, patches).unwrap();
        for &v in tape.value(h) {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn heatmap_rows_sum_to_one() {
        let (store, gen) = setup(4, 6);
        let mut tape = Tape::new();
        let binds = store.bind(&mut tape);
        let patches = tape.leaf(&Tensor::from_fn(vec![7, 6], |i| ((i * 13) % 7) as f64).unwrap());
        let h = gen.heatmaps(&mut tape, &binds, patches).unwrap();
        let v = tape.value(h);
        for i in 0..7 {
            let s: f64 = v[i * 5..(i + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(v[i * 5..(i + 1) * 5].iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn binarize_uniform_row_tie_breaks_to_background() {
        let (_, gen) = setup(2, 4);
        let heat = vec![1.0 / 3.0; 3];
        let (mask, labels) = gen.binarize(&heat, 1).unwrap();
        assert_eq!(labels.labels, vec![0]);
        assert!(mask.row_is_empty(0) && mask.row_is_empty(1));
    }

    #[test]
    fn binarize_one_hot_row_selects_part() {
        let (_, gen) = setup(2, 4);
        let heat = vec![0.0, 0.0, 1.0]; // class 2 => part index 1
        let (mask, labels) = gen.binarize(&heat, 1).unwrap();
        assert_eq!(labels.labels, vec![2]);
        assert!(mask.get(1, 0));
        assert!(!mask.get(0, 0));
    }

    #[test]
    fn binarize_matches_loop_oracle() {
        let (_, gen) = setup(2, 4);
        // N=3 rows over 3 classes with known argmaxes 1, 0, 2
        let heat = vec![0.2, 0.7, 0.1, 0.5, 0.3, 0.2, 0.1, 0.2, 0.7];
        let (mask, labels) = gen.binarize(&heat, 3).unwrap();
        let oracle: Vec<usize> = (0..3)
            .map(|i| {
                let row = &heat[i * 3..(i + 1) * 3];
                let mut best = 0;
                for k in 1..3 {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect();
        assert_eq!(labels.labels, oracle);
        // disjoint rows: each patch in at most one part
        for i in 0..3 {
            let members = (0..2).filter(|&p| mask.get(p, i)).count();
            assert!(members <= 1);
        }
    }

    #[test]
    fn part_pool_uniform_weights_is_global_mean() {
        let (store, gen) = setup(1, 2);
        let mut tape = Tape::new();
        let patches = tape.leaf(&Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        // uniform foreground weight for the single part
        let heat = tape
            .leaf(&Tensor::new(vec![3, 2], vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap());
        let (pooled, concat) = gen.part_pool(&mut tape, patches, heat).unwrap();
        let v = tape.value(pooled);
        assert!((v[0] - 3.0).abs() < 1e-9);
        assert!((v[1] - 4.0).abs() < 1e-9);
        assert_eq!(tape.shape(concat), &[2]);
    }

    #[test]
    fn part_pool_one_hot_weight_selects_patch() {
        let (store, gen) = setup(1, 2);
        let mut tape = Tape::new();
        let patches = tape.leaf(&Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let heat = tape
            .leaf(&Tensor::new(vec![3, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap());
        let (pooled, _) = gen.part_pool(&mut tape, patches, heat).unwrap();
        let v = tape.value(pooled);
        assert!((v[0] - 5.0).abs() < 1e-9);
        assert!((v[1] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn part_pool_matches_weighted_average_loop_oracle() {
        let (store, gen) = setup(3, 4);
        let mut tape = Tape::new();
        let pdata: Vec<f64> = (0..5 * 4).map(|i| ((i * 7) % 9) as f64 * 0.31).collect();
        let hdata: Vec<f64> = {
            // random positive rows normalized to sum 1 over 4 classes
            let raw: Vec<f64> = (0..5 * 4).map(|i| 0.1 + ((i * 11) % 5) as f64).collect();
            raw.chunks(4)
                .flat_map(|r| {
                    let s: f64 = r.iter().sum();
                    r.iter().map(|x| x / s).collect::<Vec<_>>()
                })
                .collect()
        };
        let patches = tape.leaf(&Tensor::new(vec![5, 4], pdata.clone()).unwrap());
        let heat = tape.leaf(&Tensor::new(vec![5, 4], hdata.clone()).unwrap());
        let (pooled, _) = gen.part_pool(&mut tape, patches, heat).unwrap();
        let got = tape.value(pooled);
        for part in 0..3 {
            let class = part + 1;
            let mut wsum = 0.0;
            let mut acc = vec![0.0; 4];
            for l in 0..5 {
                let w = hdata[l * 4 + class];
                wsum += w;
                for d in 0..4 {
                    acc[d] += w * pdata[l * 4 + d];
                }
            }
            for d in 0..4 {
                let expect = acc[d] / (wsum + 1e-12);
                assert!((got[part * 4 + d] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn part_pool_empty_part_stays_finite() {
        let (store, gen) = setup(2, 2);
        let mut tape = Tape::new();
        let patches = tape.leaf(&Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        // all weight on background and part 2; part 1 gets zero weight
        let heat = tape
            .leaf(&Tensor::new(vec![2, 3], vec![0.5, 0.0, 0.5, 0.2, 0.0, 0.8]).unwrap());
        let (pooled, _) = gen.part_pool(&mut tape, patches, heat).unwrap();
        assert!(tape.value(pooled).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn visibility_labels_from_ground_truth() {
        let all_bg = PartLabelMap::new(vec![0, 0, 0], 4).unwrap();
        assert_eq!(visibility_labels(&all_bg, 4, 0.0), vec![0, 0, 0, 0]);

        let all_present = PartLabelMap::new(vec![1, 2, 3, 4], 4).unwrap();
        assert_eq!(visibility_labels(&all_present, 4, 0.0), vec![1, 1, 1, 1]);

        let some = PartLabelMap::new(vec![1, 0, 3, 0], 4).unwrap();
        assert_eq!(visibility_labels(&some, 4, 0.0), vec![1, 0, 1, 0]);
    }

    #[test]
    fn visibility_min_fraction_threshold() {
        // part 1 covers 1/4 patches; a 0.5 fraction demands 2
        let gt = PartLabelMap::new(vec![1, 0, 0, 0], 2).unwrap();
        assert_eq!(visibility_labels(&gt, 2, 0.0), vec![1, 0]);
        assert_eq!(visibility_labels(&gt, 2, 0.5), vec![0, 0]);
    }
}
