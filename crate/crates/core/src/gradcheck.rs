//! Finite-difference verification of every loss, end to end through the encoder.
//!
//! Each trial draws a random two-hidden-layer encoder, a random current-domain
//! batch with its cluster assignment, and a random rehearsal batch. The
//! analytic parameter gradient is compared against central differences of
//! the scalar loss using the norm-wise relative error
//! `‖a − n‖ / max(‖a‖, ‖n‖)`.

use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::clustering::{assign_and_summarize, ClusterAssignment};
use crate::encoder::{EncoderParams, ForwardCache, Layout};
use crate::error::Result;
use crate::losses::{l_cam, l_ia, l_is, l_overall, l_pa, l_ps, BatchView, LossWeights, OverallInputs};
use crate::numeric::{normalize, FeatureVector, TemperatureConfig};
use crate::rng::{derive_seed, seeded, Rng};

pub const DEFAULT_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    Pa,
    Ia,
    Cam,
    Ps,
    Is,
    Overall,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [LossKind::Pa, LossKind::Ia, LossKind::Cam, LossKind::Ps, LossKind::Is, LossKind::Overall];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Pa => "L_pa",
            LossKind::Ia => "L_ia",
            LossKind::Cam => "L_cam",
            LossKind::Ps => "L_ps",
            LossKind::Is => "L_is",
            LossKind::Overall => "L_overall",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub trials: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Scales analytic gradients by `1 + corrupt`; a negative control.
    pub corrupt: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            trials: 100,
            seed: 0,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            corrupt: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossCheck {
    pub loss: LossKind,
    pub trials: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub rows: Vec<LossCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.max_rel_error <= self.tolerance)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>7} {:>14}  status", "loss", "trials", "max_rel_err")?;
        for r in &self.rows {
            let status = if r.max_rel_error <= self.tolerance { "ok" } else { "FAIL" };
            writeln!(f, "{:<10} {:>7} {:>14.3e}  {}", r.loss.name(), r.trials, r.max_rel_error, status)?;
        }
        Ok(())
    }
}

/// One random problem instance.
struct Problem {
    encoder: EncoderParams,
    current_inputs: Vec<Vec<f64>>,
    current_template: BatchView,
    assignment: ClusterAssignment,
    buffer_inputs: Vec<Vec<f64>>,
    buffer_template: BatchView,
    stored_prototypes: Vec<FeatureVector>,
    weights: LossWeights,
    temps: TemperatureConfig,
}

fn random_unit(dim: usize, rng: &mut Rng) -> FeatureVector {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if let Ok(f) = normalize(&v) {
            return f;
        }
    }
}

fn random_input(dim: usize, rng: &mut Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect()
}

impl Problem {
    fn random(rng: &mut Rng) -> Result<Self> {
        let d_in = rng.random_range(4..8);
        let d_out = rng.random_range(3..6);
        let layout = Layout::new(vec![d_in, rng.random_range(5..9), rng.random_range(4..8), d_out])?;
        let mut encoder = EncoderParams::init(layout, rng);
        for v in encoder.values_mut() {
            *v += rng.random_range(-0.3..0.3);
        }

        // A pool of 4 clusters × 3 members over 2 cameras; the batch takes
        // two members of each of 3 clusters.
        let n_clusters = 4;
        let labels: Vec<i64> = (0..12).map(|i| (i / 3) as i64).collect();
        let cams: Vec<usize> = (0..12).map(|i| i % 2).collect();
        let pool_momentum: Vec<FeatureVector> = (0..12).map(|_| random_unit(d_out, rng)).collect();
        let assignment = assign_and_summarize(&pool_momentum, &cams, &labels)?;
        let batch_items: Vec<usize> = (0..n_clusters - 1).flat_map(|c| [3 * c, 3 * c + 1]).collect();
        let current_inputs: Vec<Vec<f64>> = batch_items.iter().map(|_| random_input(d_in, rng)).collect();
        let current_template = BatchView {
            online_feats: Vec::new(),
            momentum_feats: batch_items.iter().map(|&i| pool_momentum[i].clone()).collect(),
            frozen_feats_weak: Vec::new(),
            pseudo_labels: batch_items.iter().map(|&i| labels[i]).collect(),
            camera_ids: batch_items.iter().map(|&i| cams[i]).collect(),
        };

        let n_buf = 5;
        let buffer_inputs: Vec<Vec<f64>> = (0..n_buf).map(|_| random_input(d_in, rng)).collect();
        let buffer_template = BatchView {
            online_feats: Vec::new(),
            momentum_feats: (0..n_buf).map(|_| random_unit(d_out, rng)).collect(),
            frozen_feats_weak: (0..n_buf).map(|_| random_unit(d_out, rng)).collect(),
            pseudo_labels: (0..n_buf as i64).collect(),
            camera_ids: vec![0; n_buf],
        };
        let stored_prototypes = (0..4).map(|_| random_unit(d_out, rng)).collect();

        Ok(Problem {
            encoder,
            current_inputs,
            current_template,
            assignment,
            buffer_inputs,
            buffer_template,
            stored_prototypes,
            weights: LossWeights {
                lambda_cam: 1.0,
                n_neg: 4,
                ..LossWeights::default()
            },
            temps: TemperatureConfig::default(),
        })
    }

    fn encode(encoder: &EncoderParams, inputs: &[Vec<f64>], template: &BatchView) -> Result<(BatchView, Vec<ForwardCache>)> {
        let caches = inputs.iter().map(|x| encoder.forward_cached(x)).collect::<Result<Vec<_>>>()?;
        let mut view = template.clone();
        view.online_feats = caches.iter().map(|c| c.output().clone()).collect();
        Ok((view, caches))
    }

    /// Loss value and, when requested, its parameter gradient.
    fn evaluate(&self, encoder: &EncoderParams, kind: LossKind, with_grad: bool) -> Result<(f64, Vec<f64>)> {
        let (current, current_caches) = Self::encode(encoder, &self.current_inputs, &self.current_template)?;
        let (buffer, buffer_caches) = Self::encode(encoder, &self.buffer_inputs, &self.buffer_template)?;
        let t = &self.temps;
        let (loss, current_grads, buffer_grads) = match kind {
            LossKind::Pa => {
                let o = l_pa(&current, &self.assignment.prototypes, t.tau_pa)?;
                (o.loss, o.grads, Vec::new())
            }
            LossKind::Ia => {
                let o = l_ia(&current, t.tau_ia, self.weights.hard_positive_topk)?;
                (o.loss, o.grads, Vec::new())
            }
            LossKind::Cam => {
                let o = l_cam(&current, &self.assignment, t.tau_c, self.weights.n_neg)?;
                (o.loss, o.grads, Vec::new())
            }
            LossKind::Ps => {
                let o = l_ps(&buffer, &self.stored_prototypes, t.tau_ps)?;
                (o.loss, Vec::new(), o.grads)
            }
            LossKind::Is => {
                let o = l_is(&buffer, t.tau_is)?;
                (o.loss, Vec::new(), o.grads)
            }
            LossKind::Overall => {
                let o = l_overall(
                    OverallInputs {
                        current: Some(&current),
                        assignment: Some(&self.assignment),
                        buffer: Some(&buffer),
                        stored_prototypes: &self.stored_prototypes,
                    },
                    &self.weights,
                    t,
                )?;
                (o.total, o.current_grads, o.buffer_grads)
            }
        };
        let mut grad = vec![0.0; encoder.layout().num_params()];
        if with_grad {
            for (cache, g) in current_caches.iter().zip(&current_grads) {
                encoder.backward(cache, g, &mut grad)?;
            }
            for (cache, g) in buffer_caches.iter().zip(&buffer_grads) {
                encoder.backward(cache, g, &mut grad)?;
            }
        }
        Ok((loss, grad))
    }
}

/// Norm-wise relative error; zero when both vectors vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central-difference gradient of `f` at `params`.
pub fn numeric_gradient(params: &EncoderParams, h: f64, mut f: impl FnMut(&EncoderParams) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.values().len());
    for k in 0..params.values().len() {
        let orig = probe.values()[k];
        probe.values_mut()[k] = orig + h;
        let plus = f(&probe)?;
        probe.values_mut()[k] = orig - h;
        let minus = f(&probe)?;
        probe.values_mut()[k] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Runs `options.trials` random instances per loss.
pub fn run_grad_check(options: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rows: Vec<LossCheck> = LossKind::ALL
        .iter()
        .map(|&loss| LossCheck {
            loss,
            trials: 0,
            max_rel_error: 0.0,
        })
        .collect();
    for trial in 0..options.trials {
        let mut rng = seeded(derive_seed(options.seed, trial as u64));
        let problem = Problem::random(&mut rng)?;
        for row in rows.iter_mut() {
            let (_, mut analytic) = problem.evaluate(&problem.encoder, row.loss, true)?;
            analytic.iter_mut().for_each(|g| *g *= 1.0 + options.corrupt);
            let numeric = numeric_gradient(&problem.encoder, options.step, |p| Ok(problem.evaluate(p, row.loss, false)?.0))?;
            row.max_rel_error = row.max_rel_error.max(relative_error(&analytic, &numeric));
            row.trials += 1;
        }
    }
    Ok(GradCheckReport {
        tolerance: options.tolerance,
        rows,
    })
}
