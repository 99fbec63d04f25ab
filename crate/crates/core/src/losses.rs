//! Adaptation and rehearsal losses.
//!
//! Each loss returns its batch-mean value and the gradient with respect to
//! every online feature. Gradients are projected onto the tangent space of
//! the unit sphere at that feature, which is what the encoder's
//! normalization Jacobian keeps anyway. Momentum features, frozen features
//! and prototypes are constants.

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterAssignment;
use crate::error::{Error, Result};
use crate::numeric::{
    axpy, cosine_logits, kl_raw, log_softmax_logits, project_tangent, softmax_logits,
    FeatureVector, TemperatureConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_ia: f64,
    pub lambda_ps: f64,
    pub lambda_is: f64,
    /// Camera loss weight; zero disables it.
    pub lambda_cam: f64,
    /// Nearest negative proxies per camera-loss term.
    pub n_neg: usize,
    /// Number of hardest positives averaged into the instance-loss positive key.
    pub hard_positive_topk: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ia: 1.0,
            lambda_ps: 10.0,
            lambda_is: 20.0,
            lambda_cam: 0.0,
            n_neg: 50,
            hard_positive_topk: 1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("lambda_ia", self.lambda_ia),
            ("lambda_ps", self.lambda_ps),
            ("lambda_is", self.lambda_is),
            ("lambda_cam", self.lambda_cam),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {w}")));
            }
        }
        if self.n_neg == 0 || self.hard_positive_topk == 0 {
            return Err(Error::InvalidConfig("n_neg and hard_positive_topk must be positive".into()));
        }
        Ok(())
    }
}

/// Features of one mini-batch as seen by the losses.
///
/// `online_feats` carry gradients; everything else is constant.
/// `frozen_feats_weak` may be empty for current-domain batches.
#[derive(Debug, Clone, Default)]
pub struct BatchView {
    pub online_feats: Vec<FeatureVector>,
    pub momentum_feats: Vec<FeatureVector>,
    pub frozen_feats_weak: Vec<FeatureVector>,
    pub pseudo_labels: Vec<i64>,
    pub camera_ids: Vec<usize>,
}

impl BatchView {
    pub fn len(&self) -> usize {
        self.online_feats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.online_feats.is_empty()
    }

    fn dim(&self) -> usize {
        self.online_feats.first().map_or(0, FeatureVector::dim)
    }

    fn check_aligned(&self, other: usize) -> Result<()> {
        if other != self.len() {
            return Err(Error::LengthMismatch {
                left: self.len(),
                right: other,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// One gradient per online feature, tangent to the sphere.
    pub grads: Vec<Vec<f64>>,
}

impl LossOutput {
    fn zeros(n: usize, dim: usize) -> Self {
        LossOutput {
            loss: 0.0,
            grads: vec![vec![0.0; dim]; n],
        }
    }

    /// Turns per-anchor sums into batch means and projects onto the sphere.
    fn finish(mut self, online: &[FeatureVector]) -> Self {
        let n = online.len();
        if n == 0 {
            return self;
        }
        let inv = 1.0 / n as f64;
        self.loss *= inv;
        for (g, q) in self.grads.iter_mut().zip(online) {
            g.iter_mut().for_each(|v| *v *= inv);
            project_tangent(g, q.as_slice());
        }
        self
    }
}

/// `−ln S(q, keys, τ)` with the positive at `keys[0]`, plus `∂/∂q` added
/// into `grad` scaled by `weight`.
fn neg_log_softmax_first(q: &[f64], keys: &[&[f64]], tau: f64, weight: f64, grad: &mut [f64]) -> f64 {
    let logits = cosine_logits(q, keys, tau);
    let log_p = log_softmax_logits(&logits);
    for (j, (lp, k)) in log_p.iter().zip(keys).enumerate() {
        let coeff = lp.exp() - if j == 0 { 1.0 } else { 0.0 };
        axpy(grad, weight * coeff / tau, k);
    }
    -log_p[0]
}

/// `KL(softmax(q·K/τ) ‖ softmax(ref_logits))` plus `∂/∂q` into `grad`.
fn kl_to_reference<K: AsRef<[f64]>>(q: &[f64], keys: &[K], reference_logits: &[f64], tau: f64, grad: &mut [f64]) -> Result<f64> {
    let logits = cosine_logits(q, keys, tau);
    let p = softmax_logits(&logits);
    let log_p = log_softmax_logits(&logits);
    let log_r = log_softmax_logits(reference_logits);
    let r = softmax_logits(reference_logits);
    let kl = kl_raw(&p, &r)?;
    // ∂KL/∂z_j = p_j (ln p_j − ln r_j − KL)
    for (j, k) in keys.iter().enumerate() {
        let coeff = p[j] * (log_p[j] - log_r[j] - kl);
        axpy(grad, coeff / tau, k.as_ref());
    }
    Ok(kl)
}

/// Prototype-level contrastive adaptation loss.
pub fn l_pa(batch: &BatchView, prototypes: &[FeatureVector], tau_pa: f64) -> Result<LossOutput> {
    batch.check_aligned(batch.pseudo_labels.len())?;
    let mut out = LossOutput::zeros(batch.len(), batch.dim());
    for (i, q) in batch.online_feats.iter().enumerate() {
        let label = batch.pseudo_labels[i];
        if label < 0 || label as usize >= prototypes.len() {
            return Err(Error::NoisyLabelInBatch(i));
        }
        let pos = label as usize;
        let keys: Vec<&[f64]> = std::iter::once(prototypes[pos].as_slice())
            .chain(prototypes.iter().enumerate().filter(|(j, _)| *j != pos).map(|(_, p)| p.as_slice()))
            .collect();
        out.loss += neg_log_softmax_first(q.as_slice(), &keys, tau_pa, 1.0, &mut out.grads[i]);
    }
    Ok(out.finish(&batch.online_feats))
}

/// Same-label momentum features other than the anchor's own, hardest first
/// (lowest cosine similarity to the online anchor; ties by batch index).
pub fn hardest_positives(batch: &BatchView, anchor: usize) -> Vec<usize> {
    let label = batch.pseudo_labels[anchor];
    let q = &batch.online_feats[anchor];
    let mut pos: Vec<(f64, usize)> = (0..batch.len())
        .filter(|&j| j != anchor && batch.pseudo_labels[j] == label)
        .map(|j| (q.dot(&batch.momentum_feats[j]), j))
        .collect();
    pos.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    pos.into_iter().map(|(_, j)| j).collect()
}

/// Instance-level contrastive adaptation loss with hardest-positive mining.
///
/// With `topk > 1` the positive key is the mean of the `topk` hardest
/// positives.
pub fn l_ia(batch: &BatchView, tau_ia: f64, topk: usize) -> Result<LossOutput> {
    batch.check_aligned(batch.momentum_feats.len())?;
    batch.check_aligned(batch.pseudo_labels.len())?;
    let dim = batch.dim();
    let mut out = LossOutput::zeros(batch.len(), dim);
    for i in 0..batch.len() {
        let ranked = hardest_positives(batch, i);
        if ranked.is_empty() {
            return Err(Error::IdentityWithSingleInstance {
                item: i,
                label: batch.pseudo_labels[i],
            });
        }
        let chosen = &ranked[..topk.clamp(1, ranked.len())];
        let mut positive = vec![0.0; dim];
        for &j in chosen {
            axpy(&mut positive, 1.0, batch.momentum_feats[j].as_slice());
        }
        let inv = 1.0 / chosen.len() as f64;
        positive.iter_mut().for_each(|v| *v *= inv);

        let label = batch.pseudo_labels[i];
        let keys: Vec<&[f64]> = std::iter::once(positive.as_slice())
            .chain(
                (0..batch.len())
                    .filter(|&j| batch.pseudo_labels[j] != label)
                    .map(|j| batch.momentum_feats[j].as_slice()),
            )
            .collect();
        out.loss += neg_log_softmax_first(batch.online_feats[i].as_slice(), &keys, tau_ia, 1.0, &mut out.grads[i]);
    }
    Ok(out.finish(&batch.online_feats))
}

/// Indices into `assignment.camera_proxies` of the `n_neg` proxies of other
/// clusters most similar to `q` (ties by proxy order).
pub fn nearest_negative_proxies(assignment: &ClusterAssignment, cluster: usize, q: &FeatureVector, n_neg: usize) -> Vec<usize> {
    let mut negs: Vec<(f64, usize)> = assignment
        .camera_proxies
        .iter()
        .enumerate()
        .filter(|(_, p)| p.cluster != cluster)
        .map(|(idx, p)| (q.dot(&p.feature), idx))
        .collect();
    negs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    negs.truncate(n_neg);
    negs.into_iter().map(|(_, idx)| idx).collect()
}

/// Cross-camera proxy contrastive loss.
pub fn l_cam(batch: &BatchView, assignment: &ClusterAssignment, tau_c: f64, n_neg: usize) -> Result<LossOutput> {
    batch.check_aligned(batch.pseudo_labels.len())?;
    batch.check_aligned(batch.camera_ids.len())?;
    let mut out = LossOutput::zeros(batch.len(), batch.dim());
    for (i, q) in batch.online_feats.iter().enumerate() {
        let label = batch.pseudo_labels[i];
        if label < 0 {
            continue;
        }
        let cluster = label as usize;
        let camera = batch.camera_ids[i];
        let positives: Vec<&FeatureVector> = assignment
            .proxies_of(cluster)
            .filter(|p| p.camera != camera)
            .map(|p| &p.feature)
            .collect();
        if positives.is_empty() {
            continue;
        }
        let negatives: Vec<&[f64]> = nearest_negative_proxies(assignment, cluster, q, n_neg)
            .into_iter()
            .map(|idx| assignment.camera_proxies[idx].feature.as_slice())
            .collect();
        let share = 1.0 / positives.len() as f64;
        for pos in positives {
            let keys: Vec<&[f64]> = std::iter::once(pos.as_slice()).chain(negatives.iter().copied()).collect();
            out.loss += share * neg_log_softmax_first(q.as_slice(), &keys, tau_c, share, &mut out.grads[i]);
        }
    }
    Ok(out.finish(&batch.online_feats))
}

/// Image-to-prototype similarity consistency against the frozen encoder.
pub fn l_ps(buffer_batch: &BatchView, stored_prototypes: &[FeatureVector], tau_ps: f64) -> Result<LossOutput> {
    if stored_prototypes.is_empty() {
        return Err(Error::EmptyPrototypeStore);
    }
    buffer_batch.check_aligned(buffer_batch.frozen_feats_weak.len())?;
    let mut out = LossOutput::zeros(buffer_batch.len(), buffer_batch.dim());
    for (i, q) in buffer_batch.online_feats.iter().enumerate() {
        let reference = cosine_logits(buffer_batch.frozen_feats_weak[i].as_slice(), stored_prototypes, tau_ps);
        out.loss += kl_to_reference(q.as_slice(), stored_prototypes, &reference, tau_ps, &mut out.grads[i])?;
    }
    Ok(out.finish(&buffer_batch.online_feats))
}

/// Image-to-image similarity consistency against the frozen encoder.
///
/// The prediction compares the online anchor with every momentum feature in
/// the batch, the anchor's own included.
pub fn l_is(buffer_batch: &BatchView, tau_is: f64) -> Result<LossOutput> {
    let n = buffer_batch.len();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    buffer_batch.check_aligned(buffer_batch.momentum_feats.len())?;
    buffer_batch.check_aligned(buffer_batch.frozen_feats_weak.len())?;
    let frozen = &buffer_batch.frozen_feats_weak;
    let mut out = LossOutput::zeros(n, buffer_batch.dim());
    for (i, q) in buffer_batch.online_feats.iter().enumerate() {
        let reference = cosine_logits(frozen[i].as_slice(), frozen, tau_is);
        out.loss += kl_to_reference(q.as_slice(), &buffer_batch.momentum_feats, &reference, tau_is, &mut out.grads[i])?;
    }
    Ok(out.finish(&buffer_batch.online_feats))
}

/// Per-component loss values (unweighted).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pa: f64,
    pub ia: f64,
    pub cam: f64,
    pub ps: f64,
    pub is: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverallLoss {
    pub total: f64,
    pub parts: LossBreakdown,
    pub current_grads: Vec<Vec<f64>>,
    pub buffer_grads: Vec<Vec<f64>>,
}

/// Inputs of the combined objective for one iteration.
#[derive(Debug, Clone, Copy)]
pub struct OverallInputs<'a> {
    /// Current-domain batch; `None` when the epoch has no clusters.
    pub current: Option<&'a BatchView>,
    pub assignment: Option<&'a ClusterAssignment>,
    /// Rehearsal batch; `None` while the buffer is empty.
    pub buffer: Option<&'a BatchView>,
    pub stored_prototypes: &'a [FeatureVector],
}

fn accumulate(into: &mut [Vec<f64>], from: &[Vec<f64>], weight: f64) {
    for (a, b) in into.iter_mut().zip(from) {
        axpy(a, weight, b);
    }
}

/// `L_pa + λ_ia·L_ia + λ_cam·L_cam + λ_ps·L_ps + λ_is·L_is`.
///
/// Terms with zero weight are not evaluated.
pub fn l_overall(inputs: OverallInputs<'_>, weights: &LossWeights, temps: &TemperatureConfig) -> Result<OverallLoss> {
    let mut parts = LossBreakdown::default();
    let mut total = 0.0;
    let mut current_grads = Vec::new();
    let mut buffer_grads = Vec::new();

    if let (Some(batch), Some(assignment)) = (inputs.current, inputs.assignment) {
        let pa = l_pa(batch, &assignment.prototypes, temps.tau_pa)?;
        parts.pa = pa.loss;
        total += pa.loss;
        current_grads = pa.grads;
        if weights.lambda_ia > 0.0 {
            let ia = l_ia(batch, temps.tau_ia, weights.hard_positive_topk)?;
            parts.ia = ia.loss;
            total += weights.lambda_ia * ia.loss;
            accumulate(&mut current_grads, &ia.grads, weights.lambda_ia);
        }
        if weights.lambda_cam > 0.0 {
            let cam = l_cam(batch, assignment, temps.tau_c, weights.n_neg)?;
            parts.cam = cam.loss;
            total += weights.lambda_cam * cam.loss;
            accumulate(&mut current_grads, &cam.grads, weights.lambda_cam);
        }
    }

    if let Some(batch) = inputs.buffer {
        buffer_grads = vec![vec![0.0; batch.dim()]; batch.len()];
        if weights.lambda_ps > 0.0 {
            let ps = l_ps(batch, inputs.stored_prototypes, temps.tau_ps)?;
            parts.ps = ps.loss;
            total += weights.lambda_ps * ps.loss;
            accumulate(&mut buffer_grads, &ps.grads, weights.lambda_ps);
        }
        if weights.lambda_is > 0.0 {
            let is = l_is(batch, temps.tau_is)?;
            parts.is = is.loss;
            total += weights.lambda_is * is.loss;
            accumulate(&mut buffer_grads, &is.grads, weights.lambda_is);
        }
    }

    Ok(OverallLoss {
        total,
        parts,
        current_grads,
        buffer_grads,
    })
}
