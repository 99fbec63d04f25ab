//! Pseudo-label generation: cosine distances, k-reciprocal Jaccard
//! re-ranking, DBSCAN on a precomputed matrix, and cluster summaries
//! (prototypes and per-camera proxies).

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{normalize, FeatureVector};

/// Label of points DBSCAN leaves unclustered.
pub const NOISE: i64 = -1;

const SYMMETRY_TOL: f64 = 1e-9;

pub type DistanceMatrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankParams {
    pub k1: usize,
    pub k2: usize,
    pub lambda_rr: f64,
    pub eps: f64,
    pub min_pts: usize,
}

impl Default for RerankParams {
    fn default() -> Self {
        RerankParams {
            k1: 30,
            k2: 6,
            lambda_rr: 0.3,
            eps: 0.55,
            min_pts: 4,
        }
    }
}

impl RerankParams {
    pub fn validate(&self) -> Result<()> {
        if self.k1 == 0 || self.k2 == 0 || self.min_pts == 0 {
            return Err(Error::InvalidConfig("k1, k2 and min_pts must be positive".into()));
        }
        if self.k2 > self.k1 {
            return Err(Error::InvalidConfig(format!(
                "k2 ({}) must not exceed k1 ({})",
                self.k2, self.k1
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda_rr) {
            return Err(Error::InvalidConfig("lambda_rr must lie in [0, 1]".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidConfig("eps must be positive".into()));
        }
        Ok(())
    }
}

pub fn pairwise_cosine_distance(feats: &[FeatureVector]) -> DistanceMatrix {
    let n = feats.len();
    (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| if i == j { 0.0 } else { 1.0 - feats[i].dot(&feats[j]) })
                .collect()
        })
        .collect()
}

fn check_symmetric(dist: &[Vec<f64>]) -> Result<()> {
    let n = dist.len();
    for (i, row) in dist.iter().enumerate() {
        if row.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: row.len(),
            });
        }
        for j in (i + 1)..n {
            if (row[j] - dist[j][i]).abs() > SYMMETRY_TOL {
                return Err(Error::NonSymmetricInput { row: i, col: j });
            }
        }
    }
    Ok(())
}

/// Row-wise ascending neighbor order, ties broken by index.
fn neighbor_ranks(dist: &[Vec<f64>]) -> Vec<Vec<usize>> {
    dist.par_iter()
        .map(|row| {
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            idx
        })
        .collect()
}

/// Members of `ranks[i][..=k]` whose own top `k+1` neighbors contain `i`,
/// in forward-rank order.
fn k_reciprocal(ranks: &[Vec<usize>], i: usize, k: usize) -> Vec<usize> {
    ranks[i][..=k]
        .iter()
        .copied()
        .filter(|&j| ranks[j][..=k].contains(&i))
        .collect()
}

type SparseRow = Vec<(usize, f64)>;

/// k-reciprocal re-ranked distance.
///
/// `k1` and `k2` are clamped to `n − 1`. The result is
/// `(1 − λ)·Jaccard + λ·dist`.
pub fn k_reciprocal_jaccard(dist: &[Vec<f64>], params: &RerankParams) -> Result<DistanceMatrix> {
    check_symmetric(dist)?;
    let n = dist.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let k1 = params.k1.min(n - 1);
    let k2 = params.k2.min(n - 1).max(1);
    let half = (k1 as f64 / 2.0).round_ties_even() as usize;
    let ranks = neighbor_ranks(dist);

    let encodings: Vec<SparseRow> = (0..n)
        .into_par_iter()
        .map(|i| {
            let base = k_reciprocal(&ranks, i, k1);
            let mut expanded = base.clone();
            for &cand in &base {
                let cand_set = k_reciprocal(&ranks, cand, half);
                let overlap = cand_set.iter().filter(|c| base.contains(c)).count();
                if overlap as f64 > 2.0 / 3.0 * cand_set.len() as f64 {
                    expanded.extend_from_slice(&cand_set);
                }
            }
            expanded.sort_unstable();
            expanded.dedup();
            let weights: Vec<f64> = expanded.iter().map(|&j| (-dist[i][j]).exp()).collect();
            let total: f64 = weights.iter().sum();
            expanded.into_iter().zip(weights).map(|(j, w)| (j, w / total)).collect()
        })
        .collect();

    // Local query expansion: average the encodings of the k2 nearest rows.
    let encodings: Vec<SparseRow> = if k2 > 1 {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut dense = vec![0.0; n];
                for &r in &ranks[i][..k2] {
                    for &(c, v) in &encodings[r] {
                        dense[c] += v;
                    }
                }
                dense
                    .into_iter()
                    .enumerate()
                    .filter(|(_, v)| *v != 0.0)
                    .map(|(c, v)| (c, v / k2 as f64))
                    .collect()
            })
            .collect()
    } else {
        encodings
    };

    let mut inverted: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (r, row) in encodings.iter().enumerate() {
        for &(c, v) in row {
            inverted[c].push((r, v));
        }
    }

    let lambda = params.lambda_rr;
    let out = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut shared = vec![0.0; n];
            for &(c, v) in &encodings[i] {
                for &(j, w) in &inverted[c] {
                    shared[j] += v.min(w);
                }
            }
            // Rows have unit mass, so Σmax = 2 − Σmin.
            shared
                .iter()
                .zip(&dist[i])
                .map(|(s, d)| {
                    let jaccard = 1.0 - s / (2.0 - s);
                    jaccard * (1.0 - lambda) + d * lambda
                })
                .collect()
        })
        .collect();
    Ok(out)
}

/// DBSCAN on a precomputed distance matrix.
///
/// A point is core iff at least `min_pts` points (itself included) lie
/// within `eps`. Clusters are numbered in discovery order; noise is
/// [`NOISE`].
pub fn dbscan(dist: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<i64> {
    let n = dist.len();
    let neighborhoods: Vec<Vec<usize>> = dist
        .iter()
        .map(|row| (0..n).filter(|&j| row[j] <= eps).collect())
        .collect();
    let is_core: Vec<bool> = neighborhoods.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut labels = vec![NOISE; n];
    let mut visited = vec![false; n];
    let mut next = 0i64;
    for start in 0..n {
        if visited[start] || !is_core[start] {
            continue;
        }
        let cluster = next;
        next += 1;
        visited[start] = true;
        labels[start] = cluster;
        let mut frontier = vec![start];
        while let Some(p) = frontier.pop() {
            for &q in &neighborhoods[p] {
                if labels[q] == NOISE {
                    labels[q] = cluster;
                }
                if !visited[q] && is_core[q] {
                    visited[q] = true;
                    frontier.push(q);
                }
            }
        }
    }
    labels
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraProxy {
    pub cluster: usize,
    pub camera: usize,
    pub count: usize,
    pub feature: FeatureVector,
}

/// Pseudo-labels and per-cluster summaries for one epoch of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<i64>,
    pub prototypes: Vec<FeatureVector>,
    pub cluster_sizes: Vec<usize>,
    /// Member indices per cluster, ascending.
    pub members: Vec<Vec<usize>>,
    /// Sorted by (cluster, camera).
    pub camera_proxies: Vec<CameraProxy>,
}

impl ClusterAssignment {
    pub fn num_clusters(&self) -> usize {
        self.prototypes.len()
    }

    pub fn num_noise(&self) -> usize {
        self.labels.iter().filter(|l| **l == NOISE).count()
    }

    pub fn proxies_of(&self, cluster: usize) -> impl Iterator<Item = &CameraProxy> {
        self.camera_proxies.iter().filter(move |p| p.cluster == cluster)
    }
}

fn mean_direction(feats: &[FeatureVector], idx: &[usize]) -> Result<FeatureVector> {
    let dim = feats[idx[0]].dim();
    let mut acc = vec![0.0; dim];
    for &i in idx {
        for (a, v) in acc.iter_mut().zip(feats[i].as_slice()) {
            *a += v;
        }
    }
    let inv = 1.0 / idx.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    normalize(&acc)
}

/// Builds prototypes (normalized member means) and camera proxies from labels.
pub fn assign_and_summarize(
    momentum_feats: &[FeatureVector],
    camera_ids: &[usize],
    labels: &[i64],
) -> Result<ClusterAssignment> {
    if momentum_feats.len() != labels.len() || camera_ids.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: momentum_feats.len(),
            right: labels.len().max(camera_ids.len()),
        });
    }
    let num_clusters = labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
    let mut members = vec![Vec::new(); num_clusters];
    let mut by_camera: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        if l < 0 {
            continue;
        }
        members[l as usize].push(i);
        by_camera.entry((l as usize, camera_ids[i])).or_default().push(i);
    }
    let mut prototypes = Vec::with_capacity(num_clusters);
    for (c, m) in members.iter().enumerate() {
        if m.is_empty() {
            return Err(Error::EmptyCluster(c));
        }
        prototypes.push(mean_direction(momentum_feats, m)?);
    }
    let camera_proxies = by_camera
        .into_iter()
        .map(|((cluster, camera), idx)| {
            Ok(CameraProxy {
                cluster,
                camera,
                count: idx.len(),
                feature: mean_direction(momentum_feats, &idx)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClusterAssignment {
        labels: labels.to_vec(),
        cluster_sizes: members.iter().map(Vec::len).collect(),
        prototypes,
        members,
        camera_proxies,
    })
}

/// Full clustering pass: distances, re-ranking, DBSCAN, summaries.
pub fn cluster_features(
    momentum_feats: &[FeatureVector],
    camera_ids: &[usize],
    params: &RerankParams,
) -> Result<ClusterAssignment> {
    let dist = pairwise_cosine_distance(momentum_feats);
    let reranked = k_reciprocal_jaccard(&dist, params)?;
    let labels = dbscan(&reranked, params.eps, params.min_pts);
    assign_and_summarize(momentum_feats, camera_ids, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(v: &[f64]) -> FeatureVector {
        normalize(v).unwrap()
    }

    #[test]
    fn cosine_distance_examples() {
        let a = fv(&[1.0, 0.0]);
        let d = pairwise_cosine_distance(&[a.clone(), a.clone(), fv(&[0.0, 1.0]), fv(&[-1.0, 0.0])]);
        assert_eq!(d[0][1], 0.0);
        assert_eq!(d[0][2], 1.0);
        assert_eq!(d[0][3], 2.0);
        assert_eq!(d[2][2], 0.0);
    }

    fn block_matrix(groups: &[usize], intra: f64, inter: f64) -> DistanceMatrix {
        let owner: Vec<usize> = groups
            .iter()
            .enumerate()
            .flat_map(|(g, &n)| std::iter::repeat(g).take(n))
            .collect();
        let n = owner.len();
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| match (i == j, owner[i] == owner[j]) {
                        (true, _) => 0.0,
                        (false, true) => intra,
                        (false, false) => inter,
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn dbscan_examples() {
        let d = block_matrix(&[4, 4], 0.1, 0.9);
        assert_eq!(dbscan(&d, 0.55, 4), vec![0, 0, 0, 0, 1, 1, 1, 1]);

        let d = block_matrix(&[3], 0.1, 0.9);
        assert_eq!(dbscan(&d, 0.55, 4), vec![NOISE; 3]);

        let d = block_matrix(&[3, 3], 0.2, 0.7);
        assert_eq!(dbscan(&d, 0.7, 4), vec![0; 6]);
    }

    #[test]
    fn dbscan_border_point_joins_first_cluster() {
        // 0..=3 dense, 4 is within eps of 3 only.
        let mut d = block_matrix(&[4, 1], 0.1, 0.9);
        d[3][4] = 0.5;
        d[4][3] = 0.5;
        assert_eq!(dbscan(&d, 0.55, 4), vec![0, 0, 0, 0, 0]);
    }

    #[test]
    fn rerank_examples() {
        let a = fv(&[0.3, 0.7, 0.1]);
        let d = pairwise_cosine_distance(&[a.clone(), a]);
        let out = k_reciprocal_jaccard(&d, &RerankParams::default()).unwrap();
        assert!(out[0][1].abs() < 1e-15);

        let feats: Vec<_> = [[1.0, 0.1], [0.9, 0.2], [0.1, 1.0], [-0.5, 0.4], [0.2, -1.0]]
            .iter()
            .map(|v| fv(v))
            .collect();
        let d = pairwise_cosine_distance(&feats);
        let params = RerankParams {
            lambda_rr: 1.0,
            k1: 3,
            k2: 2,
            ..RerankParams::default()
        };
        assert_eq!(k_reciprocal_jaccard(&d, &params).unwrap(), d);

        let mut bad = d.clone();
        bad[0][1] += 0.1;
        assert!(matches!(
            k_reciprocal_jaccard(&bad, &params),
            Err(Error::NonSymmetricInput { row: 0, col: 1 })
        ));
    }

    #[test]
    fn summarize_examples() {
        let feats = vec![fv(&[1.0, 0.0]), fv(&[0.0, 1.0]), fv(&[0.6, 0.8])];
        let a = assign_and_summarize(&feats, &[0, 1, 2], &[0, 0, 1]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((a.prototypes[0].as_slice()[0] - h).abs() < 1e-15);
        assert!((a.prototypes[0].as_slice()[1] - h).abs() < 1e-15);
        let proxy = a.proxies_of(1).next().unwrap();
        assert_eq!(proxy.count, 1);
        assert_eq!(proxy.feature, feats[2]);

        let labels = [0, 0, 0, 0, 1, 1, 1, 1, NOISE];
        let feats: Vec<_> = (0..9).map(|i| fv(&[1.0, i as f64])).collect();
        let a = assign_and_summarize(&feats, &[0; 9], &labels).unwrap();
        assert_eq!(a.cluster_sizes, vec![4, 4]);
        assert_eq!(a.num_noise(), 1);
        assert!(a.members.iter().flatten().all(|&i| i != 8));

        assert!(matches!(
            assign_and_summarize(&feats[..2], &[0, 0], &[1, 1]),
            Err(Error::EmptyCluster(0))
        ));
    }
}
