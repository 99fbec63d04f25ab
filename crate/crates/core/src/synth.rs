//! Deterministic multi-domain identity datasets with camera structure,
//! feature-space augmentation, and the CSV dataset format.
//!
//! A sample of identity `u` seen by camera `c` in domain `D` is
//!
//! ```text
//! x = A_D · (u + o_{D,c} + ε) + b_D,    ε ~ N(0, σ² I)
//! ```
//!
//! where `A_D` is a random rotation and `u` is uniform on the unit sphere of
//! the first `identity_dim` coordinates (all of them when
//! `identity_dim == d_in`).

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::dot;
use crate::rng::{derive_seed, seeded, streams, Rng};

/// Identity ids are `domain_id * ID_STRIDE + local index`.
pub const ID_STRIDE: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub d_in: usize,
    pub n_seen: usize,
    pub n_unseen: usize,
    pub n_train_ids: usize,
    pub n_test_ids: usize,
    pub n_cameras: usize,
    pub samples_per_id_per_camera: usize,
    pub noise_sigma: f64,
    pub camera_offset_norm: f64,
    pub bias_norm: f64,
    pub identity_dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            d_in: 64,
            n_seen: 3,
            n_unseen: 2,
            n_train_ids: 100,
            n_test_ids: 50,
            n_cameras: 4,
            samples_per_id_per_camera: 4,
            noise_sigma: 0.1,
            camera_offset_norm: 0.3,
            bias_norm: 0.1,
            identity_dim: 16,
            seed: 2024,
        }
    }
}

impl SynthConfig {
    pub fn num_domains(&self) -> usize {
        self.n_seen + self.n_unseen
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_in", self.d_in),
            ("n_train_ids", self.n_train_ids),
            ("n_test_ids", self.n_test_ids),
            ("n_cameras", self.n_cameras),
            ("samples_per_id_per_camera", self.samples_per_id_per_camera),
            ("identity_dim", self.identity_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("synth.{name} must be positive")));
            }
        }
        if self.identity_dim > self.d_in {
            return Err(Error::InvalidConfig("synth.identity_dim must not exceed d_in".into()));
        }
        if self.n_cameras < 2 {
            return Err(Error::InvalidConfig("synth.n_cameras must be at least 2 for cross-camera queries".into()));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("camera_offset_norm", self.camera_offset_norm),
            ("bias_norm", self.bias_norm),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("synth.{name} must be >= 0")));
            }
        }
        Ok(())
    }

    /// Seed of domain `domain_id`: `derive_seed(seed, domain_id)`.
    pub fn domain_seed(&self, domain_id: usize) -> u64 {
        derive_seed(self.seed, domain_id as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub d_in: usize,
    pub n_train_ids: usize,
    pub n_test_ids: usize,
    pub n_cameras: usize,
    pub samples_per_id_per_camera: usize,
    pub identity_dim: usize,
    /// Row-major `d_in × d_in`.
    pub transform: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub camera_offsets: Vec<Vec<f64>>,
    pub noise_sigma: f64,
}

fn gaussian_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn scaled_direction(n: usize, norm: f64, rng: &mut Rng) -> Vec<f64> {
    let v = gaussian_vec(n, rng);
    let len = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x * norm / len).collect()
}

/// Random orthogonal matrix: Gram–Schmidt on Gaussian rows.
fn random_rotation(n: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v = gaussian_vec(n, rng);
        for r in &rows {
            let proj = dot(&v, r);
            v.iter_mut().zip(r).for_each(|(x, ri)| *x -= proj * ri);
        }
        let len = dot(&v, &v).sqrt();
        if len > 1e-8 {
            rows.push(v.into_iter().map(|x| x / len).collect());
        }
    }
    rows
}

impl DomainSpec {
    /// Draws the domain's rotation, bias, and camera offsets from `seed`.
    pub fn random(config: &SynthConfig, domain_id: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(derive_seed(seed, streams::DOMAIN_SPEC));
        let d = config.d_in;
        let transform = random_rotation(d, &mut rng);
        let bias = scaled_direction(d, config.bias_norm, &mut rng);
        let camera_offsets = (0..config.n_cameras)
            .map(|_| scaled_direction(d, config.camera_offset_norm, &mut rng))
            .collect();
        Ok(DomainSpec {
            domain_id,
            d_in: d,
            n_train_ids: config.n_train_ids,
            n_test_ids: config.n_test_ids,
            n_cameras: config.n_cameras,
            samples_per_id_per_camera: config.samples_per_id_per_camera,
            identity_dim: config.identity_dim,
            transform,
            bias,
            camera_offsets,
            noise_sigma: config.noise_sigma,
        })
    }

    fn validate(&self) -> Result<()> {
        let d = self.d_in;
        let bad = |msg: &str| Err(Error::InvalidSpec(msg.to_string()));
        if d == 0 || self.identity_dim == 0 || self.identity_dim > d {
            return bad("identity_dim must lie in 1..=d_in");
        }
        if self.transform.len() != d || self.transform.iter().any(|r| r.len() != d) {
            return bad("transform must be d_in × d_in");
        }
        if self.bias.len() != d {
            return bad("bias must have d_in entries");
        }
        if self.camera_offsets.len() != self.n_cameras || self.camera_offsets.iter().any(|o| o.len() != d) {
            return bad("one d_in-wide offset per camera is required");
        }
        if self.n_cameras == 0 || self.samples_per_id_per_camera == 0 {
            return bad("cameras and samples per camera must be positive");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0");
        }
        if self.domain_id >= ID_STRIDE / 1000 || self.n_train_ids + self.n_test_ids >= ID_STRIDE {
            return bad("domain or identity count out of range");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "query" => Some(Split::Query),
            "gallery" => Some(Split::Gallery),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub domain_id: usize,
    pub identity_id: usize,
    pub camera_id: usize,
    pub split: Split,
}

/// Generates every sample of a domain. Train identities come first, then
/// test identities; for each test identity the first sample of every camera
/// is a query and the rest go to the gallery.
pub fn generate_domain(spec: &DomainSpec, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut rng = seeded(derive_seed(seed, streams::DOMAIN_SAMPLES));
    let d = spec.d_in;
    let n_ids = spec.n_train_ids + spec.n_test_ids;
    let mut out = Vec::with_capacity(n_ids * spec.n_cameras * spec.samples_per_id_per_camera);
    let mut latent = vec![0.0; d];
    for local in 0..n_ids {
        let mut u = vec![0.0; d];
        let dir = scaled_direction(spec.identity_dim, 1.0, &mut rng);
        u[..spec.identity_dim].copy_from_slice(&dir);
        let is_test = local >= spec.n_train_ids;
        for (cam, offset) in spec.camera_offsets.iter().enumerate() {
            for s in 0..spec.samples_per_id_per_camera {
                for k in 0..d {
                    let eps: f64 = rng.sample(StandardNormal);
                    latent[k] = u[k] + offset[k] + spec.noise_sigma * eps;
                }
                let input = spec
                    .transform
                    .iter()
                    .zip(&spec.bias)
                    .map(|(row, b)| dot(row, &latent) + b)
                    .collect();
                let split = match (is_test, s) {
                    (false, _) => Split::Train,
                    (true, 0) => Split::Query,
                    (true, _) => Split::Gallery,
                };
                out.push(Sample {
                    input,
                    domain_id: spec.domain_id,
                    identity_id: spec.domain_id * ID_STRIDE + local,
                    camera_id: cam,
                    split,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub sigma_aug: f64,
    pub p_mask: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            sigma_aug: 0.1,
            p_mask: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    Weak,
    Strong,
}

/// Weak views are the input itself; strong views add Gaussian jitter and
/// zero each coordinate independently with probability `p_mask`.
pub fn augment(x: &[f64], mode: AugmentMode, cfg: &AugmentConfig, rng: &mut Rng) -> Vec<f64> {
    match mode {
        AugmentMode::Weak => x.to_vec(),
        AugmentMode::Strong => x
            .iter()
            .map(|v| {
                let noise: f64 = rng.sample(StandardNormal);
                let masked = cfg.p_mask > 0.0 && rng.random::<f64>() < cfg.p_mask;
                if masked {
                    0.0
                } else {
                    v + cfg.sigma_aug * noise
                }
            })
            .collect(),
    }
}

/// One domain's samples split by role.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainData {
    pub domain_id: usize,
    pub train: Vec<Sample>,
    pub query: Vec<Sample>,
    pub gallery: Vec<Sample>,
}

impl DomainData {
    pub fn from_samples(domain_id: usize, samples: Vec<Sample>) -> Self {
        let mut d = DomainData {
            domain_id,
            train: Vec::new(),
            query: Vec::new(),
            gallery: Vec::new(),
        };
        for s in samples {
            match s.split {
                Split::Train => d.train.push(s),
                Split::Query => d.query.push(s),
                Split::Gallery => d.gallery.push(s),
            }
        }
        d
    }

    pub fn generate(config: &SynthConfig, domain_id: usize) -> Result<Self> {
        let seed = config.domain_seed(domain_id);
        let spec = DomainSpec::random(config, domain_id, seed)?;
        Ok(DomainData::from_samples(domain_id, generate_domain(&spec, seed)?))
    }
}

fn header(d_in: usize) -> Vec<String> {
    let mut h: Vec<String> = ["domain_id", "split", "identity_id", "camera_id"].iter().map(|s| s.to_string()).collect();
    h.extend((0..d_in).map(|k| format!("f{k}")));
    h
}

/// Writes samples as CSV with 17 significant digits per float.
pub fn write_dataset(samples: &[Sample], d_in: usize, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", header(d_in).join(",")).map_err(io)?;
    for s in samples {
        if s.input.len() != d_in {
            return Err(Error::DimensionMismatch {
                expected: d_in,
                actual: s.input.len(),
            });
        }
        write!(w, "{},{},{},{}", s.domain_id, s.split.as_str(), s.identity_id, s.camera_id).map_err(io)?;
        for v in &s.input {
            write!(w, ",{v:.16e}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a CSV written by [`write_dataset`]; the input width comes from the header.
pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Encoding(format!("{other:?}")),
        })?;
    let head = rdr.headers()?.clone();
    let n_feat = head.len().saturating_sub(4);
    let expected = header(n_feat);
    if head.len() < 5 || head.iter().zip(&expected).any(|(a, b)| a != b) {
        return Err(Error::HeaderMismatch(format!(
            "expected `domain_id,split,identity_id,camera_id,f0,...`, got `{}`",
            head.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| Error::MalformedRow {
            line,
            reason: e.to_string(),
        })?;
        if record.len() != head.len() {
            return Err(Error::MalformedRow {
                line,
                reason: format!("{} fields, expected {}", record.len(), head.len()),
            });
        }
        let int = |i: usize| {
            record[i].parse::<usize>().map_err(|e| Error::MalformedRow {
                line,
                reason: format!("column {}: {e}", expected[i]),
            })
        };
        let split = Split::parse(&record[1]).ok_or_else(|| Error::MalformedRow {
            line,
            reason: format!("unknown split `{}`", &record[1]),
        })?;
        let input = (4..record.len())
            .map(|i| {
                record[i].parse::<f64>().map_err(|e| Error::MalformedRow {
                    line,
                    reason: format!("column {}: {e}", expected[i]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(Sample {
            domain_id: int(0)?,
            split,
            identity_id: int(2)?,
            camera_id: int(3)?,
            input,
        });
    }
    Ok(out)
}
