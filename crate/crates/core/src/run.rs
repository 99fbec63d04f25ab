//! Run configuration, on-disk datasets, and run directories.
//!
//! A data directory holds `manifest.json` and one CSV per domain. A run
//! directory holds `config.json`, `metrics.csv`, `summary.csv`, `steps.json`,
//! and the `checkpoints/`, `buffer/`, `gallery_feats/` subdirectories.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::Checkpoint;
use crate::error::{Error, Result};
use crate::evaluation::{cross_test, evaluate_domain, summarize, write_metrics_csv, DomainKind, GallerySnapshot, MetricRow, TestMode};
use crate::pipeline::{run_sequence, Ablation, PipelineConfig, StepLog};
use crate::synth::{read_dataset, write_dataset, DomainData, Sample, SynthConfig};

pub const MANIFEST_VERSION: u32 = 1;

/// Every setting of a run. Written fully resolved to `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub pipeline: PipelineConfig,
    /// Training order of the seen domains; empty means `0..n_seen`.
    pub order: Vec<usize>,
    pub ablation: Ablation,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: SynthConfig::default(),
            pipeline: PipelineConfig::default(),
            order: Vec::new(),
            ablation: Ablation::All,
        }
    }
}

impl RunConfig {
    /// The desk-scale benchmark: default data with [`PipelineConfig::benchmark`].
    pub fn benchmark() -> Self {
        RunConfig {
            pipeline: PipelineConfig::benchmark(),
            ..RunConfig::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidConfig(msg) => Error::InvalidConfig(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Sets the data and training seeds together.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.pipeline.seed = seed;
    }

    /// Validates and fills the implicit training order.
    pub fn resolve(mut self) -> Result<Self> {
        self.synth.validate()?;
        self.pipeline.validate()?;
        if self.order.is_empty() {
            self.order = (0..self.synth.n_seen).collect();
        }
        let mut sorted = self.order.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.order.len() || self.order.iter().any(|&d| d >= self.synth.n_seen) {
            return Err(Error::InvalidConfig(format!(
                "order {:?} must list distinct seen domains below {}",
                self.order, self.synth.n_seen
            )));
        }
        if self.pipeline.encoder_dims[0] != self.synth.d_in {
            return Err(Error::InvalidConfig(format!(
                "pipeline.encoder_dims[0] = {} but synth.d_in = {}",
                self.pipeline.encoder_dims[0], self.synth.d_in
            )));
        }
        Ok(self)
    }

    /// Pipeline settings with the ablation applied to the loss weights.
    pub fn effective_pipeline(&self) -> PipelineConfig {
        let mut p = self.pipeline.clone();
        p.weights = self.ablation.apply(&p.weights);
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestDomain {
    pub domain_id: usize,
    pub kind: DomainKind,
    pub seed: u64,
    pub file: String,
    pub num_train: usize,
    pub num_query: usize,
    pub num_gallery: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub synth: SynthConfig,
    pub domains: Vec<ManifestDomain>,
}

fn kind_of(config: &SynthConfig, domain_id: usize) -> DomainKind {
    if domain_id < config.n_seen {
        DomainKind::Seen
    } else {
        DomainKind::Unseen
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn all_samples(d: &DomainData) -> Vec<Sample> {
    d.train.iter().chain(&d.query).chain(&d.gallery).cloned().collect()
}

/// Generates every domain and writes the CSVs plus `manifest.json`.
pub fn generate_data(config: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    create_dir(out_dir)?;
    let mut domains = Vec::with_capacity(config.num_domains());
    for id in 0..config.num_domains() {
        let data = DomainData::generate(config, id)?;
        let file = format!("domain_{id}.csv");
        write_dataset(&all_samples(&data), config.d_in, &out_dir.join(&file))?;
        domains.push(ManifestDomain {
            domain_id: id,
            kind: kind_of(config, id),
            seed: config.domain_seed(id),
            file,
            num_train: data.train.len(),
            num_query: data.query.len(),
            num_gallery: data.gallery.len(),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        synth: config.clone(),
        domains,
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Encoding(e.to_string()))? + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Seen and unseen domains, each ordered by domain id.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub seen: Vec<DomainData>,
    pub unseen: Vec<DomainData>,
}

impl Datasets {
    pub fn generate(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut out = Datasets {
            seen: Vec::new(),
            unseen: Vec::new(),
        };
        for id in 0..config.num_domains() {
            let d = DomainData::generate(config, id)?;
            match kind_of(config, id) {
                DomainKind::Seen => out.seen.push(d),
                DomainKind::Unseen => out.unseen.push(d),
            }
        }
        Ok(out)
    }

    pub fn load(dir: &Path) -> Result<(Manifest, Self)> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::UnsupportedVersion {
                found: manifest.version,
                expected: MANIFEST_VERSION,
            });
        }
        let mut out = Datasets {
            seen: Vec::new(),
            unseen: Vec::new(),
        };
        for entry in &manifest.domains {
            let samples = read_dataset(&dir.join(&entry.file))?;
            let d = DomainData::from_samples(entry.domain_id, samples);
            match entry.kind {
                DomainKind::Seen => out.seen.push(d),
                DomainKind::Unseen => out.unseen.push(d),
            }
        }
        Ok((manifest, out))
    }

    fn seen_by_id(&self, id: usize) -> Result<&DomainData> {
        self.seen
            .iter()
            .find(|d| d.domain_id == id)
            .ok_or_else(|| Error::InvalidConfig(format!("seen domain {id} is not in the dataset")))
    }
}

pub fn checkpoint_path(run_dir: &Path, step: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("step_{step}.bin"))
}

pub fn buffer_path(run_dir: &Path, step: usize) -> PathBuf {
    run_dir.join("buffer").join(format!("step_{step}.bin"))
}

pub fn gallery_path(snapshots_dir: &Path, step: usize, domain_id: usize) -> PathBuf {
    snapshots_dir.join(format!("step_{step}_domain_{domain_id}.bin"))
}

pub const SUMMARY_HEADER: &str = "step,seen_mAP,seen_rank1,unseen_mAP,unseen_rank1";

fn write_summary_csv(rows: &[MetricRow], steps: usize, path: &Path) -> Result<()> {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for step in 1..=steps {
        let s = summarize(rows, step);
        out.push_str(&format!(
            "{},{:.10},{:.10},{:.10},{:.10}\n",
            step, s.seen_map, s.seen_rank1, s.unseen_map, s.unseen_rank1
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub config: RunConfig,
    pub metrics: Vec<MetricRow>,
    pub steps: Vec<StepLog>,
}

/// Trains the configured sequence on `data` and writes the run directory.
pub fn train_to_dir(config: RunConfig, data: &Datasets, out_dir: &Path) -> Result<TrainOutcome> {
    let config = config.resolve()?;
    let seen = config
        .order
        .iter()
        .map(|&id| data.seen_by_id(id).cloned())
        .collect::<Result<Vec<_>>>()?;
    let pipeline = config.effective_pipeline();
    let result = run_sequence(&seen, &data.unseen, &pipeline, &mut |_| {})?;

    let galleries_dir = out_dir.join("gallery_feats");
    for sub in ["checkpoints", "buffer", "gallery_feats"] {
        create_dir(&out_dir.join(sub))?;
    }
    config.save(&out_dir.join("config.json"))?;
    for record in &result.steps {
        let step = record.log.step;
        Checkpoint::new(step, record.momentum.clone(), Some(record.rng.clone())).save(&checkpoint_path(out_dir, step))?;
        record.buffer.save(&buffer_path(out_dir, step))?;
        for g in &record.galleries {
            g.save(&gallery_path(&galleries_dir, step, g.domain_id))?;
        }
    }
    let metrics = result.metrics();
    write_metrics_csv(&metrics, &out_dir.join("metrics.csv"))?;
    write_summary_csv(&metrics, result.steps.len(), &out_dir.join("summary.csv"))?;
    let logs: Vec<StepLog> = result.steps.iter().map(|s| s.log.clone()).collect();
    let steps_path = out_dir.join("steps.json");
    let text = serde_json::to_string_pretty(&logs).map_err(|e| Error::Encoding(e.to_string()))? + "\n";
    fs::write(&steps_path, text).map_err(|e| Error::io(&steps_path, e))?;
    Ok(TrainOutcome {
        config,
        metrics,
        steps: logs,
    })
}

/// Earliest stored snapshot of `domain_id`, i.e. the one taken when it was trained.
pub fn find_snapshot(snapshots_dir: &Path, domain_id: usize, max_step: usize) -> Option<PathBuf> {
    (1..=max_step).map(|s| gallery_path(snapshots_dir, s, domain_id)).find(|p| p.is_file())
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub rows: Vec<MetricRow>,
    pub warnings: Vec<String>,
}

/// Evaluates a checkpoint on every domain, with cross-test rows for seen
/// domains whose snapshot is available.
pub fn evaluate_checkpoint(checkpoint: &Checkpoint, data: &Datasets, snapshots_dir: Option<&Path>) -> Result<EvalOutcome> {
    let encoder = &checkpoint.params;
    let step = checkpoint.step;
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for d in &data.seen {
        let m = evaluate_domain(encoder, d)?;
        rows.push(MetricRow {
            step,
            domain_id: d.domain_id,
            kind: DomainKind::Seen,
            mode: TestMode::SelfTest,
            map: m.map,
            rank1: m.rank1,
        });
        let Some(dir) = snapshots_dir else { continue };
        match find_snapshot(dir, d.domain_id, step) {
            Some(path) => {
                let snap = GallerySnapshot::load(&path)?;
                let c = cross_test(encoder, d, &snap)?;
                rows.push(MetricRow {
                    step,
                    domain_id: d.domain_id,
                    kind: DomainKind::Seen,
                    mode: TestMode::CrossTest,
                    map: c.map,
                    rank1: c.rank1,
                });
            }
            None => warnings.push(format!("no gallery snapshot for domain {} up to step {step}; cross-test skipped", d.domain_id)),
        }
    }
    for d in &data.unseen {
        let m = evaluate_domain(encoder, d)?;
        rows.push(MetricRow {
            step,
            domain_id: d.domain_id,
            kind: DomainKind::Unseen,
            mode: TestMode::SelfTest,
            map: m.map,
            rank1: m.rank1,
        });
    }
    Ok(EvalOutcome { rows, warnings })
}

pub fn write_eval_csv(outcome: &EvalOutcome, path: &Path) -> Result<()> {
    write_metrics_csv(&outcome.rows, path)
}
