//! Classification heads.
//!
//! `BnNeckHead` implements the BNNeck arrangement: triplet losses consume the
//! pre-norm feature, the identity classifier consumes the batch-normalized
//! one. Running statistics live in non-trainable store buffers so they
//! persist through checkpoints.

use crate::error::{ModelError, Result};
use crate::init::{ones, trunc_normal, zeros};
use rand::Rng;
use tsd_core::{BatchStats, Bindings, ParamId, ParamStore, Tape, Var};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

pub struct BnNeckHead {
    pub feature_dim: usize,
    pub num_classes: usize,
    gamma: ParamId,
    beta: ParamId,
    classifier: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

/// Train-time head outputs: the normalized feature, classifier logits, and
/// the batch statistics to fold into the running estimates after the step.
pub struct BnNeckTrainOutput {
    pub post_norm: Var,
    pub logits: Var,
    pub stats: BatchStats,
}

impl BnNeckHead {
    pub fn init(
        prefix: &str,
        feature_dim: usize,
        num_classes: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        let gamma = store.add(format!("{prefix}.bn.gamma"), ones(vec![feature_dim]));
        let beta = store.add(format!("{prefix}.bn.beta"), zeros(vec![feature_dim]));
        let classifier = store.add(
            format!("{prefix}.classifier"),
            trunc_normal(rng, vec![num_classes, feature_dim], 0.02),
        );
        let running_mean = store.add_buffer(format!("{prefix}.bn.running_mean"), zeros(vec![feature_dim]));
        let running_var = store.add_buffer(format!("{prefix}.bn.running_var"), ones(vec![feature_dim]));
        Self { feature_dim, num_classes, gamma, beta, classifier, running_mean, running_var }
    }

    /// Batch-normalize with batch statistics and classify. `features` is
    /// `[B, F]` with B >= 2.
    pub fn forward_train(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        features: Var,
    ) -> Result<BnNeckTrainOutput> {
        let shape = tape.shape(features);
        if shape.len() != 2 || shape[1] != self.feature_dim {
            return Err(ModelError::Contract(format!(
                "bnneck expects [B, {}], got {:?}",
                self.feature_dim, shape
            )));
        }
        if shape[0] < 2 {
            return Err(ModelError::Contract("batch norm needs at least 2 samples".into()));
        }
        let (post_norm, stats) =
            tape.batch_norm_cols(features, binds.var(self.gamma), binds.var(self.beta), BN_EPS)?;
        let w_t = tape.transpose(binds.var(self.classifier))?;
        let logits = tape.matmul(post_norm, w_t)?;
        Ok(BnNeckTrainOutput { post_norm, logits, stats })
    }

    /// Normalize with the stored running statistics (inference path).
    pub fn normalize_eval(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        store: &ParamStore,
        features: Var,
    ) -> Result<Var> {
        let rm = store.get(self.running_mean).data().to_vec();
        let rv = store.get(self.running_var).data();
        let istd: Vec<f64> = rv.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let neg_mean: Vec<f64> = rm.iter().map(|&m| -m).collect();
        let f = self.feature_dim;
        let neg_mean = tape.constant(vec![f], neg_mean)?;
        let istd = tape.constant(vec![f], istd)?;
        let centered = tape.add_row(features, neg_mean)?;
        let scaled = tape.mul_row(centered, istd)?;
        let gained = tape.mul_row(scaled, binds.var(self.gamma))?;
        Ok(tape.add_row(gained, binds.var(self.beta))?)
    }

    /// Exponential-moving-average update of the running statistics.
    pub fn update_running_stats(&self, store: &mut ParamStore, stats: &BatchStats) {
        let mean = store.get_mut(self.running_mean).data_mut();
        for (m, &b) in mean.iter_mut().zip(&stats.mean) {
            *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * b;
        }
        let var = store.get_mut(self.running_var).data_mut();
        for (v, &b) in var.iter_mut().zip(&stats.var) {
            *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * b;
        }
    }
}

/// Shared binary classifier predicting per-part visibility from student part
/// features.
pub struct VisibilityHead {
    pub dim: usize,
    weight: ParamId,
    bias: ParamId,
}

impl VisibilityHead {
    pub fn init(dim: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let weight = store.add("visibility.weight", trunc_normal(rng, vec![dim, 1], 0.02));
        let bias = store.add("visibility.bias", zeros(vec![1]));
        Self { dim, weight, bias }
    }

    /// Per-part visibility probabilities `[P]` from part features `[P, D]`.
    pub fn forward(&self, tape: &mut Tape, binds: &Bindings, parts: Var) -> Result<Var> {
        let logits = tape.matmul(parts, binds.var(self.weight))?; // [P, 1]
        let logits = tape.add_row(logits, binds.var(self.bias))?;
        let p = tape.shape(logits)[0];
        let flat = tape.reshape(logits, vec![p])?;
        Ok(tape.sigmoid(flat)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tsd_core::Tensor;

    #[test]
    fn train_forward_shapes_and_running_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let head = BnNeckHead::init("head", 3, 5, &mut store, &mut rng);
        let mut tape = Tape::new();
        let binds = store.bind(&mut tape);
        let feats = tape.leaf(&Tensor::from_fn(vec![4, 3], |i| i as f64 * 0.5).unwrap());
        let out = head.forward_train(&mut tape, &binds, feats).unwrap();
        assert_eq!(tape.shape(out.logits), &[4, 5]);
        head.update_running_stats(&mut store, &out.stats);
        let rm_id = store.ids().find(|&id| store.name(id) == "head.bn.running_mean").unwrap();
        assert!(store.get(rm_id).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn eval_normalization_uses_running_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let head = BnNeckHead::init("head", 2, 3, &mut store, &mut rng);
        // running mean [1, -1], var [4, 1]; gamma=1 beta=0 by init
        let rm = store.ids().find(|&id| store.name(id) == "head.bn.running_mean").unwrap();
        store.get_mut(rm).data_mut().copy_from_slice(&[1.0, -1.0]);
        let rv = store.ids().find(|&id| store.name(id) == "head.bn.running_var").unwrap();
        store.get_mut(rv).data_mut().copy_from_slice(&[4.0, 1.0]);
        let mut tape = Tape::new();
        let binds = store.bind(&mut tape);
        let feats = tape.leaf(&Tensor::new(vec![1, 2], vec![3.0, 0.0]).unwrap());
        let out = head.normalize_eval(&mut tape, &binds, &store, feats).unwrap();
        let v = tape.value(out);
        assert!((v[0] - (3.0 - 1.0) / (4.0f64 + BN_EPS).sqrt()).abs() < 1e-12);
        assert!((v[1] - 1.0 / (1.0f64 + BN_EPS).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn visibility_probabilities_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let head = VisibilityHead::init(4, &mut store, &mut rng);
        let mut tape = Tape::new();
        let binds = store.bind(&mut tape);
        let parts = tape.leaf(&Tensor::from_fn(vec![3, 4], |i| (i as f64) - 6.0).unwrap());
        let v = head.forward(&mut tape, &binds, parts).unwrap();
        assert_eq!(tape.shape(v), &[3]);
        assert!(tape.value(v).iter().all(|&p| p > 0.0 && p < 1.0));
    }
}
