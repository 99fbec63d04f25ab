//! Retrieval metrics (mAP, CMC Rank-1), self-test vs cross-test backward
//! compatibility, and triplet order preservation.
//!
//! Gallery items sharing both identity and camera with the query are
//! excluded from its ranking. Similarity ties are broken by gallery index.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::numeric::FeatureVector;
use crate::rng::Rng;
use crate::synth::{DomainData, Sample};

pub const SNAPSHOT_VERSION: u32 = 1;

/// Gallery features of one domain frozen at the step they were extracted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GallerySnapshot {
    pub version: u32,
    pub domain_id: usize,
    pub step_extracted: usize,
    pub features: Vec<FeatureVector>,
    pub identity_ids: Vec<usize>,
    pub camera_ids: Vec<usize>,
}

impl GallerySnapshot {
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = bincode::serialize(self)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let snap: GallerySnapshot = bincode::deserialize(&bytes)?;
        if snap.version != SNAPSHOT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: snap.version,
                expected: SNAPSHOT_VERSION,
            });
        }
        Ok(snap)
    }
}

/// Ranking outcome of one query with at least one valid positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryOutcome {
    pub ap: f64,
    pub rank1_hit: bool,
}

fn rank_query(
    query: &FeatureVector,
    gallery_feats: &[FeatureVector],
    gallery_ids: &[usize],
    gallery_cams: &[usize],
    query_id: usize,
    query_cam: usize,
) -> Result<Option<QueryOutcome>> {
    if gallery_feats.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let mut order: Vec<(f64, usize)> = gallery_feats.iter().map(|g| query.dot(g)).zip(0..).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut rank = 0usize;
    let mut first_hit = None;
    for (_, g) in order {
        if gallery_ids[g] == query_id && gallery_cams[g] == query_cam {
            continue;
        }
        rank += 1;
        let relevant = gallery_ids[g] == query_id;
        if first_hit.is_none() {
            first_hit = Some(relevant);
        }
        if relevant {
            hits += 1;
            precision_sum += hits as f64 / rank as f64;
        }
    }
    if hits == 0 {
        return Ok(None);
    }
    Ok(Some(QueryOutcome {
        ap: precision_sum / hits as f64,
        rank1_hit: first_hit == Some(true),
    }))
}

/// AP of one query, or `None` when the filtered gallery holds no positive.
pub fn average_precision(
    query: &FeatureVector,
    gallery_feats: &[FeatureVector],
    gallery_ids: &[usize],
    gallery_cams: &[usize],
    query_id: usize,
    query_cam: usize,
) -> Result<Option<f64>> {
    Ok(rank_query(query, gallery_feats, gallery_ids, gallery_cams, query_id, query_cam)?.map(|o| o.ap))
}

/// mAP and Rank-1, both in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub map: f64,
    pub rank1: f64,
    pub valid_queries: usize,
}

/// Scores queries against a gallery. Queries without a valid positive are skipped.
pub fn retrieval_metrics(
    query_feats: &[FeatureVector],
    query_ids: &[usize],
    query_cams: &[usize],
    gallery_feats: &[FeatureVector],
    gallery_ids: &[usize],
    gallery_cams: &[usize],
) -> Result<RetrievalMetrics> {
    if gallery_feats.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let outcomes = query_feats
        .par_iter()
        .zip(query_ids.par_iter().zip(query_cams))
        .map(|(q, (&id, &cam))| rank_query(q, gallery_feats, gallery_ids, gallery_cams, id, cam))
        .collect::<Result<Vec<_>>>()?;
    let valid: Vec<QueryOutcome> = outcomes.into_iter().flatten().collect();
    if valid.is_empty() {
        return Err(Error::NoValidQueries);
    }
    let n = valid.len() as f64;
    let map = valid.iter().map(|o| o.ap).sum::<f64>() / n;
    let rank1 = valid.iter().filter(|o| o.rank1_hit).count() as f64 / n;
    Ok(RetrievalMetrics {
        map: 100.0 * map,
        rank1: 100.0 * rank1,
        valid_queries: valid.len(),
    })
}

pub fn encode_all(encoder: &EncoderParams, samples: &[Sample]) -> Result<Vec<FeatureVector>> {
    samples.par_iter().map(|s| encoder.forward(&s.input)).collect()
}

pub fn extract_gallery(encoder: &EncoderParams, domain: &DomainData, step: usize) -> Result<GallerySnapshot> {
    Ok(GallerySnapshot {
        version: SNAPSHOT_VERSION,
        domain_id: domain.domain_id,
        step_extracted: step,
        features: encode_all(encoder, &domain.gallery)?,
        identity_ids: domain.gallery.iter().map(|s| s.identity_id).collect(),
        camera_ids: domain.gallery.iter().map(|s| s.camera_id).collect(),
    })
}

/// Queries encoded by `encoder` against a stored gallery snapshot.
pub fn cross_test(encoder: &EncoderParams, domain: &DomainData, stored: &GallerySnapshot) -> Result<RetrievalMetrics> {
    if stored.domain_id != domain.domain_id {
        return Err(Error::DomainMismatch {
            snapshot: stored.domain_id,
            query: domain.domain_id,
        });
    }
    let queries = encode_all(encoder, &domain.query)?;
    let ids: Vec<usize> = domain.query.iter().map(|s| s.identity_id).collect();
    let cams: Vec<usize> = domain.query.iter().map(|s| s.camera_id).collect();
    retrieval_metrics(&queries, &ids, &cams, &stored.features, &stored.identity_ids, &stored.camera_ids)
}

/// Self-test: queries and gallery both encoded by `encoder` on clean inputs.
pub fn evaluate_domain(encoder: &EncoderParams, domain: &DomainData) -> Result<RetrievalMetrics> {
    let gallery = extract_gallery(encoder, domain, 0)?;
    cross_test(encoder, domain, &gallery)
}

/// Fraction of sampled triplets `(i, p, n)` with `y_i = y_p ≠ y_n`, `p ≠ i`
/// for which `d(a_i, b_p) < d(a_i, b_n)` under cosine distance.
///
/// Pass the same features twice for the incremental criterion, or
/// new-encoder anchors with old-encoder references for the backward
/// compatible one.
pub fn triplet_order_preservation(
    feats_a: &[FeatureVector],
    feats_b: &[FeatureVector],
    ids: &[usize],
    n_triplets: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if feats_a.len() != ids.len() || feats_b.len() != ids.len() {
        return Err(Error::LengthMismatch {
            left: feats_a.len().max(feats_b.len()),
            right: ids.len(),
        });
    }
    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, &id) in ids.iter().enumerate() {
        groups.entry(id).or_default().push(i);
    }
    let anchors: Vec<usize> = (0..ids.len()).filter(|&i| groups[&ids[i]].len() >= 2 && groups[&ids[i]].len() < ids.len()).collect();
    if anchors.is_empty() || n_triplets == 0 {
        return Err(Error::NoValidTriplets);
    }
    let mut preserved = 0usize;
    for _ in 0..n_triplets {
        let i = anchors[rng.random_range(0..anchors.len())];
        let same = &groups[&ids[i]];
        let p = loop {
            let p = same[rng.random_range(0..same.len())];
            if p != i {
                break p;
            }
        };
        let n = loop {
            let n = rng.random_range(0..ids.len());
            if ids[n] != ids[i] {
                break n;
            }
        };
        // cosine distance 1 − a·b
        if feats_a[i].dot(&feats_b[p]) > feats_a[i].dot(&feats_b[n]) {
            preserved += 1;
        }
    }
    Ok(preserved as f64 / n_triplets as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainKind {
    Seen,
    Unseen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestMode {
    #[serde(rename = "self")]
    SelfTest,
    #[serde(rename = "cross")]
    CrossTest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub domain_id: usize,
    pub kind: DomainKind,
    pub mode: TestMode,
    pub map: f64,
    pub rank1: f64,
}

/// Seen/unseen self-test averages at one step, plus per-domain
/// self-test minus cross-test gaps (positive means degradation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub step: usize,
    pub seen_map: f64,
    pub seen_rank1: f64,
    pub unseen_map: f64,
    pub unseen_rank1: f64,
    pub compatibility_gaps: Vec<CompatibilityGap>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompatibilityGap {
    pub domain_id: usize,
    pub self_map: f64,
    pub cross_map: f64,
    pub self_rank1: f64,
    pub cross_rank1: f64,
}

impl CompatibilityGap {
    pub fn map_gap(&self) -> f64 {
        self.self_map - self.cross_map
    }

    pub fn rank1_gap(&self) -> f64 {
        self.self_rank1 - self.cross_rank1
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Aggregates the rows recorded at `step`. Averages are NaN when a kind is absent.
pub fn summarize(rows: &[MetricRow], step: usize) -> RetrievalResult {
    let at = |kind, mode| rows.iter().filter(move |r| r.step == step && r.kind == kind && r.mode == mode);
    let gaps = at(DomainKind::Seen, TestMode::CrossTest)
        .filter_map(|cross| {
            at(DomainKind::Seen, TestMode::SelfTest)
                .find(|s| s.domain_id == cross.domain_id)
                .map(|s| CompatibilityGap {
                    domain_id: s.domain_id,
                    self_map: s.map,
                    cross_map: cross.map,
                    self_rank1: s.rank1,
                    cross_rank1: cross.rank1,
                })
        })
        .collect();
    RetrievalResult {
        step,
        seen_map: mean(at(DomainKind::Seen, TestMode::SelfTest).map(|r| r.map)),
        seen_rank1: mean(at(DomainKind::Seen, TestMode::SelfTest).map(|r| r.rank1)),
        unseen_map: mean(at(DomainKind::Unseen, TestMode::SelfTest).map(|r| r.map)),
        unseen_rank1: mean(at(DomainKind::Unseen, TestMode::SelfTest).map(|r| r.rank1)),
        compatibility_gaps: gaps,
    }
}

pub const METRICS_HEADER: &str = "step,domain_id,kind,mode,mAP,rank1";

pub fn write_metrics_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let kind = match r.kind {
            DomainKind::Seen => "seen",
            DomainKind::Unseen => "unseen",
        };
        let mode = match r.mode {
            TestMode::SelfTest => "self",
            TestMode::CrossTest => "cross",
        };
        out.push_str(&format!("{},{},{},{},{:.10},{:.10}\n", r.step, r.domain_id, kind, mode, r.map, r.rank1));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
