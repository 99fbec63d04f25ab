//! Sequential per-domain adaptation with rehearsal.
//!
//! Each step freezes the momentum encoder, restarts the online encoder and
//! optimizer from it, alternates clustering epochs with mini-batch updates,
//! and finally refreshes the memory buffer.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{cluster_features, ClusterAssignment, RerankParams};
use crate::encoder::{ema_update, AdamConfig, EmaConfig, EncoderParams, ForwardCache, FrozenEncoder, Layout, OptimizerState};
use crate::error::{Error, Result};
use crate::evaluation::{cross_test, evaluate_domain, extract_gallery, DomainKind, GallerySnapshot, MetricRow, TestMode};
use crate::losses::{l_overall, BatchView, LossBreakdown, LossWeights, OverallInputs};
use crate::memory::{MemoryBuffer, Provenance};
use crate::numeric::{FeatureVector, TemperatureConfig};
use crate::rng::{derive_seed, seeded, streams, Rng};
use crate::synth::{augment, AugmentConfig, AugmentMode, DomainData};

/// Which loss terms are active; mirrors the ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Pa,
    PaIa,
    PaIaPs,
    PaIaIs,
    #[default]
    All,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::Pa, Ablation::PaIa, Ablation::PaIaPs, Ablation::PaIaIs, Ablation::All];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Pa => "pa",
            Ablation::PaIa => "pa_ia",
            Ablation::PaIaPs => "pa_ia_ps",
            Ablation::PaIaIs => "pa_ia_is",
            Ablation::All => "all",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown ablation `{s}` (expected pa, pa_ia, pa_ia_ps, pa_ia_is or all)")))
    }

    /// Zeroes the weights of disabled terms. The camera weight is left alone.
    pub fn apply(self, weights: &LossWeights) -> LossWeights {
        let mut w = *weights;
        let (ia, ps, is) = match self {
            Ablation::Pa => (false, false, false),
            Ablation::PaIa => (true, false, false),
            Ablation::PaIaPs => (true, true, false),
            Ablation::PaIaIs => (true, false, true),
            Ablation::All => (true, true, true),
        };
        if !ia {
            w.lambda_ia = 0.0;
        }
        if !ps {
            w.lambda_ps = 0.0;
        }
        if !is {
            w.lambda_is = 0.0;
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub epochs_per_step: usize,
    pub iterations_per_epoch: usize,
    pub n_p: usize,
    pub n_k: usize,
    pub rehearsal_batch_size: usize,
    pub n_mem: usize,
    /// Encoder widths from input to output.
    pub encoder_dims: Vec<usize>,
    pub ema_alpha: f64,
    pub adam: AdamConfig,
    pub temperatures: TemperatureConfig,
    pub weights: LossWeights,
    pub rerank: RerankParams,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            epochs_per_step: 5,
            iterations_per_epoch: 50,
            n_p: 8,
            n_k: 4,
            rehearsal_batch_size: 32,
            n_mem: 512,
            encoder_dims: vec![64, 128, 32],
            ema_alpha: 0.999,
            adam: AdamConfig::default(),
            temperatures: TemperatureConfig::default(),
            weights: LossWeights::default(),
            rerank: RerankParams::default(),
            augment: AugmentConfig::default(),
            seed: 2024,
        }
    }
}

impl PipelineConfig {
    /// Desk-scale benchmark settings: a faster optimizer and momentum so that
    /// a 5 × 50 iteration step moves the encoder noticeably.
    pub fn benchmark() -> Self {
        PipelineConfig {
            ema_alpha: 0.99,
            adam: AdamConfig {
                base_lr: 3e-3,
                warmup_epochs: 1,
                ..AdamConfig::default()
            },
            ..PipelineConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.n_p == 0 {
            return bad("n_p must be at least 1");
        }
        if self.n_k < 2 {
            return bad("n_k must be at least 2");
        }
        if self.rehearsal_batch_size < 2 {
            return bad("rehearsal_batch_size must be at least 2");
        }
        if self.encoder_dims.len() < 2 || self.encoder_dims.contains(&0) {
            return bad("encoder_dims needs at least two positive widths");
        }
        EmaConfig::new(self.ema_alpha)?;
        if !(self.adam.base_lr >= 0.0 && self.adam.weight_decay >= 0.0) {
            return bad("adam.base_lr and adam.weight_decay must be non-negative");
        }
        self.temperatures.validate()?;
        self.weights.validate()?;
        self.rerank.validate()?;
        if !(0.0..=1.0).contains(&self.augment.p_mask) || !(self.augment.sigma_aug >= 0.0) {
            return bad("augment.p_mask must lie in [0, 1] and augment.sigma_aug must be non-negative");
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<Layout> {
        Layout::new(self.encoder_dims.clone())
    }

    fn rehearsal_active(&self) -> bool {
        self.weights.lambda_ps > 0.0 || self.weights.lambda_is > 0.0
    }
}

/// Rehearsal starts once the buffer can fill a batch of two.
pub const MIN_REHEARSAL_ENTRIES: usize = 2;

/// `n_p` distinct clusters, `n_k` members each (with replacement only for
/// clusters smaller than `n_k`). Noise is never drawn.
pub fn identity_batch(pseudo_labels: &[i64], n_p: usize, n_k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let mut clusters: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in pseudo_labels.iter().enumerate() {
        if l >= 0 {
            clusters.entry(l).or_default().push(i);
        }
    }
    if clusters.is_empty() {
        return Err(Error::NoClusters);
    }
    let clusters: Vec<Vec<usize>> = clusters.into_values().collect();
    let n_p = n_p.min(clusters.len());
    let mut out = Vec::with_capacity(n_p * n_k);
    for c in index::sample(rng, clusters.len(), n_p) {
        let members = &clusters[c];
        if members.len() < n_k {
            out.extend((0..n_k).map(|_| members[rng.random_range(0..members.len())]));
        } else {
            out.extend(index::sample(rng, members.len(), n_k).into_iter().map(|j| members[j]));
        }
    }
    Ok(out)
}

/// All mutable training state.
#[derive(Debug, Clone)]
pub struct PipelineState {
    pub online: EncoderParams,
    pub momentum: EncoderParams,
    pub frozen: FrozenEncoder,
    pub optimizer: OptimizerState,
    pub buffer: MemoryBuffer,
    /// Number of completed steps.
    pub step: usize,
    pub rng: Rng,
}

impl PipelineState {
    pub fn new(config: &PipelineConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout()?;
        let online = EncoderParams::init(layout.clone(), &mut seeded(derive_seed(config.seed, streams::ENCODER_INIT)));
        Ok(PipelineState {
            momentum: online.clone(),
            frozen: online.freeze_snapshot(),
            optimizer: OptimizerState::new(config.adam, &layout),
            buffer: MemoryBuffer::new(config.n_mem),
            online,
            step: 0,
            rng: seeded(derive_seed(config.seed, streams::TRAINING)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub num_clusters: usize,
    pub num_noise: usize,
    /// True when no parameter update happened this epoch.
    pub skipped: bool,
    pub mean_total: f64,
    pub mean_parts: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub domain_id: usize,
    pub epochs: Vec<EpochLog>,
    pub buffer_new: usize,
    pub buffer_old: usize,
    pub buffer_len: usize,
}

/// State right after one optimizer + EMA update.
pub struct IterationEvent<'a> {
    pub step: usize,
    pub epoch: usize,
    pub iteration: usize,
    pub online: &'a EncoderParams,
    pub momentum_before: &'a EncoderParams,
    pub momentum: &'a EncoderParams,
    pub frozen: &'a FrozenEncoder,
}

/// Features and caches of one batch under the three encoders.
///
/// Online and momentum encoders see the same strong view; the frozen
/// encoder sees the weak (clean) view.
struct EncodedBatch {
    view: BatchView,
    caches: Vec<ForwardCache>,
}

fn encode_batch(
    state: &PipelineState,
    inputs: &[&[f64]],
    labels: Vec<i64>,
    cams: Vec<usize>,
    with_frozen: bool,
    aug: &AugmentConfig,
    rng: &mut Rng,
) -> Result<EncodedBatch> {
    let strong: Vec<Vec<f64>> = inputs.iter().map(|x| augment(x, AugmentMode::Strong, aug, rng)).collect();
    let caches = strong.par_iter().map(|x| state.online.forward_cached(x)).collect::<Result<Vec<_>>>()?;
    let momentum_feats = strong.par_iter().map(|x| state.momentum.forward(x)).collect::<Result<Vec<_>>>()?;
    let frozen_feats_weak = if with_frozen {
        inputs
            .par_iter()
            .map(|x| state.frozen.forward(x))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    Ok(EncodedBatch {
        view: BatchView {
            online_feats: caches.iter().map(|c| c.output().clone()).collect(),
            momentum_feats,
            frozen_feats_weak,
            pseudo_labels: labels,
            camera_ids: cams,
        },
        caches,
    })
}

/// Sums per-item parameter gradients in item order.
fn parameter_gradient(encoder: &EncoderParams, parts: &[(&[ForwardCache], &[Vec<f64>])]) -> Result<Vec<f64>> {
    let n = encoder.layout().num_params();
    let jobs: Vec<(&ForwardCache, &Vec<f64>)> = parts.iter().flat_map(|(c, g)| c.iter().zip(g.iter())).collect();
    let per_item = jobs
        .par_iter()
        .map(|(cache, g)| {
            let mut grad = vec![0.0; n];
            encoder.backward(cache, g, &mut grad)?;
            Ok(grad)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = vec![0.0; n];
    for g in per_item {
        for (t, v) in total.iter_mut().zip(g) {
            *t += v;
        }
    }
    Ok(total)
}

fn encode_train(encoder: &EncoderParams, domain: &DomainData) -> Result<Vec<FeatureVector>> {
    domain.train.par_iter().map(|s| encoder.forward(&s.input)).collect()
}

/// Clusters the train split under the momentum encoder.
pub fn cluster_domain(encoder: &EncoderParams, domain: &DomainData, rerank: &RerankParams) -> Result<(Vec<FeatureVector>, ClusterAssignment)> {
    let feats = encode_train(encoder, domain)?;
    let cams: Vec<usize> = domain.train.iter().map(|s| s.camera_id).collect();
    let assignment = cluster_features(&feats, &cams, rerank)?;
    Ok((feats, assignment))
}

/// Trains on one domain and refreshes the buffer.
pub fn run_step(
    domain: &DomainData,
    state: &mut PipelineState,
    config: &PipelineConfig,
    observer: &mut dyn FnMut(&IterationEvent<'_>),
) -> Result<StepLog> {
    config.validate()?;
    if domain.train.is_empty() {
        return Err(Error::InvalidSpec(format!("domain {} has no train split", domain.domain_id)));
    }
    let step = state.step + 1;
    let ema = EmaConfig::new(config.ema_alpha)?;
    state.frozen = state.momentum.freeze_snapshot();
    state.online = state.momentum.clone();
    state.optimizer = OptimizerState::new(config.adam, state.online.layout());

    let cams: Vec<usize> = domain.train.iter().map(|s| s.camera_id).collect();
    let use_buffer = config.rehearsal_active() && state.buffer.len() >= MIN_REHEARSAL_ENTRIES;
    let stored_prototypes = if use_buffer { state.buffer.prototypes() } else { Vec::new() };
    let mut epochs = Vec::with_capacity(config.epochs_per_step);

    for epoch in 0..config.epochs_per_step {
        let (_, assignment) = cluster_domain(&state.momentum, domain, &config.rerank)?;
        let has_clusters = assignment.num_clusters() > 0;
        let mut log = EpochLog {
            epoch,
            num_clusters: assignment.num_clusters(),
            num_noise: assignment.num_noise(),
            skipped: !(has_clusters || use_buffer),
            mean_total: 0.0,
            mean_parts: LossBreakdown::default(),
        };
        if log.skipped {
            epochs.push(log);
            continue;
        }
        for iteration in 0..config.iterations_per_epoch {
            let mut rng = state.rng.clone();
            let current = if has_clusters {
                let idx = identity_batch(&assignment.labels, config.n_p, config.n_k, &mut rng)?;
                let inputs: Vec<&[f64]> = idx.iter().map(|&i| domain.train[i].input.as_slice()).collect();
                let labels = idx.iter().map(|&i| assignment.labels[i]).collect();
                let batch_cams = idx.iter().map(|&i| cams[i]).collect();
                Some(encode_batch(state, &inputs, labels, batch_cams, false, &config.augment, &mut rng)?)
            } else {
                None
            };
            let rehearsal = if use_buffer {
                let idx = state.buffer.sample_rehearsal_batch(config.rehearsal_batch_size, &mut rng)?;
                let entries = state.buffer.entries();
                let inputs: Vec<&[f64]> = idx.iter().map(|&i| entries[i].sample.as_slice()).collect();
                let labels = idx.iter().map(|&i| entries[i].pseudo_identity as i64).collect();
                let batch_cams = idx.iter().map(|&i| entries[i].camera_id).collect();
                Some(encode_batch(state, &inputs, labels, batch_cams, true, &config.augment, &mut rng)?)
            } else {
                None
            };
            state.rng = rng;

            let out = l_overall(
                OverallInputs {
                    current: current.as_ref().map(|b| &b.view),
                    assignment: has_clusters.then_some(&assignment),
                    buffer: rehearsal.as_ref().map(|b| &b.view),
                    stored_prototypes: &stored_prototypes,
                },
                &config.weights,
                &config.temperatures,
            )?;
            let mut parts: Vec<(&[ForwardCache], &[Vec<f64>])> = Vec::new();
            if let Some(b) = &current {
                parts.push((&b.caches, &out.current_grads));
            }
            if let Some(b) = &rehearsal {
                parts.push((&b.caches, &out.buffer_grads));
            }
            let grads = parameter_gradient(&state.online, &parts)?;
            state.optimizer.adam_step(&mut state.online, &grads, epoch)?;
            let momentum_before = state.momentum.clone();
            ema_update(&mut state.momentum, &state.online, ema)?;
            observer(&IterationEvent {
                step,
                epoch,
                iteration,
                online: &state.online,
                momentum_before: &momentum_before,
                momentum: &state.momentum,
                frozen: &state.frozen,
            });

            let k = (iteration + 1) as f64;
            log.mean_total += (out.total - log.mean_total) / k;
            let m = &mut log.mean_parts;
            m.pa += (out.parts.pa - m.pa) / k;
            m.ia += (out.parts.ia - m.ia) / k;
            m.cam += (out.parts.cam - m.cam) / k;
            m.ps += (out.parts.ps - m.ps) / k;
            m.is += (out.parts.is - m.is) / k;
        }
        epochs.push(log);
    }

    let (feats, assignment) = cluster_domain(&state.momentum, domain, &config.rerank)?;
    let samples: Vec<Vec<f64>> = domain.train.iter().map(|s| s.input.clone()).collect();
    let (buffer_new, buffer_old) = state.buffer.update(
        &assignment,
        &samples,
        &cams,
        &feats,
        Provenance {
            domain: domain.domain_id,
            step,
        },
    )?;
    state.step = step;
    state.frozen = state.momentum.freeze_snapshot();
    Ok(StepLog {
        step,
        domain_id: domain.domain_id,
        epochs,
        buffer_new,
        buffer_old,
        buffer_len: state.buffer.len(),
    })
}

/// Everything produced after one step of a sequence.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub log: StepLog,
    pub momentum: EncoderParams,
    pub buffer: MemoryBuffer,
    pub rng: Rng,
    pub metrics: Vec<MetricRow>,
    /// Gallery snapshot of every seen domain under this step's momentum encoder.
    pub galleries: Vec<GallerySnapshot>,
}

#[derive(Debug, Clone)]
pub struct SequenceResult {
    pub state: PipelineState,
    pub steps: Vec<StepRecord>,
}

impl SequenceResult {
    pub fn metrics(&self) -> Vec<MetricRow> {
        self.steps.iter().flat_map(|s| s.metrics.iter().copied()).collect()
    }
}

/// Runs `seen` in order and evaluates after every step.
///
/// Seen domains trained so far get a self-test row and, from the step after
/// they were trained, a cross-test row against the gallery snapshot taken
/// when they were trained. Unseen domains get self-test rows.
pub fn run_sequence(
    seen: &[DomainData],
    unseen: &[DomainData],
    config: &PipelineConfig,
    observer: &mut dyn FnMut(&IterationEvent<'_>),
) -> Result<SequenceResult> {
    if seen.is_empty() {
        return Err(Error::InvalidConfig("at least one seen domain is required".into()));
    }
    let mut state = PipelineState::new(config)?;
    let mut steps = Vec::with_capacity(seen.len());
    let mut trained_snapshots: Vec<GallerySnapshot> = Vec::new();
    for domain in seen {
        let log = run_step(domain, &mut state, config, observer)?;
        let step = log.step;
        let mut metrics = Vec::new();
        let mut galleries = Vec::new();
        for (pos, d) in seen.iter().take(step).enumerate() {
            let gallery = extract_gallery(&state.momentum, d, step)?;
            let self_test = cross_test(&state.momentum, d, &gallery)?;
            metrics.push(MetricRow {
                step,
                domain_id: d.domain_id,
                kind: DomainKind::Seen,
                mode: TestMode::SelfTest,
                map: self_test.map,
                rank1: self_test.rank1,
            });
            if pos + 1 < step {
                let cross = cross_test(&state.momentum, d, &trained_snapshots[pos])?;
                metrics.push(MetricRow {
                    step,
                    domain_id: d.domain_id,
                    kind: DomainKind::Seen,
                    mode: TestMode::CrossTest,
                    map: cross.map,
                    rank1: cross.rank1,
                });
            } else {
                trained_snapshots.push(gallery.clone());
            }
            galleries.push(gallery);
        }
        for d in unseen {
            let m = evaluate_domain(&state.momentum, d)?;
            metrics.push(MetricRow {
                step,
                domain_id: d.domain_id,
                kind: DomainKind::Unseen,
                mode: TestMode::SelfTest,
                map: m.map,
                rank1: m.rank1,
            });
        }
        steps.push(StepRecord {
            log,
            momentum: state.momentum.clone(),
            buffer: state.buffer.clone(),
            rng: state.rng.clone(),
            metrics,
            galleries,
        });
    }
    Ok(SequenceResult { state, steps })
}
