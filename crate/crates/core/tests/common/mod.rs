//! Independent reference implementations and random instance builders.
#![allow(dead_code)]

use std::collections::HashMap;

use lifereid::clustering::ClusterAssignment;
use lifereid::numeric::{normalize, FeatureVector};
use lifereid::rng::Rng;
use rand::Rng as _;

pub fn random_unit(dim: usize, rng: &mut Rng) -> FeatureVector {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if let Ok(f) = normalize(&v) {
            return f;
        }
    }
}

/// Unit features around `n_centers` random centers.
pub fn clustered_features(n: usize, dim: usize, n_centers: usize, spread: f64, rng: &mut Rng) -> Vec<FeatureVector> {
    let centers: Vec<FeatureVector> = (0..n_centers).map(|_| random_unit(dim, rng)).collect();
    (0..n)
        .map(|i| {
            let c = centers[i % n_centers].as_slice();
            let v: Vec<f64> = c.iter().map(|x| x + spread * rng.random_range(-1.0..1.0)).collect();
            normalize(&v).unwrap()
        })
        .collect()
}

pub fn cosine_distance_matrix(feats: &[FeatureVector]) -> Vec<Vec<f64>> {
    feats
        .iter()
        .enumerate()
        .map(|(i, a)| feats.iter().enumerate().map(|(j, b)| if i == j { 0.0 } else { 1.0 - a.dot(b) }).collect())
        .collect()
}

/// Textbook DBSCAN: connected components of core points, borders joined to
/// the adjacent component whose lowest core index is smallest.
pub fn naive_dbscan(dist: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<i64> {
    let n = dist.len();
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| dist[i][j] <= eps).count() >= min_pts).collect();
    let mut comp = vec![usize::MAX; n];
    let mut n_comp = 0;
    for s in 0..n {
        if !core[s] || comp[s] != usize::MAX {
            continue;
        }
        let mut stack = vec![s];
        comp[s] = n_comp;
        while let Some(p) = stack.pop() {
            for q in 0..n {
                if core[q] && comp[q] == usize::MAX && dist[p][q] <= eps {
                    comp[q] = n_comp;
                    stack.push(q);
                }
            }
        }
        n_comp += 1;
    }
    (0..n)
        .map(|i| {
            if core[i] {
                comp[i] as i64
            } else {
                (0..n)
                    .filter(|&q| core[q] && dist[i][q] <= eps)
                    .map(|q| comp[q] as i64)
                    .min()
                    .unwrap_or(-1)
            }
        })
        .collect()
}

/// True when both labelings induce the same partition with the same noise set.
pub fn same_partition(a: &[i64], b: &[i64]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut fwd: HashMap<i64, i64> = HashMap::new();
    let mut back: HashMap<i64, i64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        if (x < 0) != (y < 0) {
            return false;
        }
        if x < 0 {
            continue;
        }
        if *fwd.entry(x).or_insert(y) != y || *back.entry(y).or_insert(x) != x {
            return false;
        }
    }
    true
}

fn argsort(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap().then(a.cmp(&b)));
    idx
}

fn round_half_even(x: f64) -> usize {
    let f = x.floor();
    let r = if x - f > 0.5 || (x - f == 0.5 && (f as i64) % 2 == 1) { f + 1.0 } else { f };
    r as usize
}

/// Line-by-line transcription of the published k-reciprocal re-ranking
/// routine (probe set = gallery set, no distance normalization), dense.
pub fn reference_rerank(original_dist: &[Vec<f64>], k1: usize, k2: usize, lambda_value: f64) -> Vec<Vec<f64>> {
    let all_num = original_dist.len();
    let initial_rank: Vec<Vec<usize>> = original_dist.iter().map(|r| argsort(r)).collect();
    let take = |v: &Vec<usize>, k: usize| v[..k.min(v.len())].to_vec();
    let mut v_mat = vec![vec![0.0f64; all_num]; all_num];
    for i in 0..all_num {
        let forward_k_neigh_index = take(&initial_rank[i], k1 + 1);
        let k_reciprocal_index: Vec<usize> = forward_k_neigh_index
            .iter()
            .copied()
            .filter(|&c| take(&initial_rank[c], k1 + 1).contains(&i))
            .collect();
        let mut k_reciprocal_expansion_index = k_reciprocal_index.clone();
        let half = round_half_even(k1 as f64 / 2.0);
        for &candidate in &k_reciprocal_index {
            let candidate_forward = take(&initial_rank[candidate], half + 1);
            let candidate_k_reciprocal_index: Vec<usize> = candidate_forward
                .iter()
                .copied()
                .filter(|&c| take(&initial_rank[c], half + 1).contains(&candidate))
                .collect();
            let inter = candidate_k_reciprocal_index.iter().filter(|c| k_reciprocal_index.contains(c)).count();
            if inter as f64 > 2.0 / 3.0 * candidate_k_reciprocal_index.len() as f64 {
                k_reciprocal_expansion_index.extend(candidate_k_reciprocal_index);
            }
        }
        k_reciprocal_expansion_index.sort_unstable();
        k_reciprocal_expansion_index.dedup();
        let weight: Vec<f64> = k_reciprocal_expansion_index.iter().map(|&j| (-original_dist[i][j]).exp()).collect();
        let s: f64 = weight.iter().sum();
        for (&j, w) in k_reciprocal_expansion_index.iter().zip(&weight) {
            v_mat[i][j] = w / s;
        }
    }
    if k2 != 1 {
        let mut v_qe = vec![vec![0.0; all_num]; all_num];
        for i in 0..all_num {
            let rows = take(&initial_rank[i], k2);
            for c in 0..all_num {
                v_qe[i][c] = rows.iter().map(|&r| v_mat[r][c]).sum::<f64>() / rows.len() as f64;
            }
        }
        v_mat = v_qe;
    }
    let mut out = vec![vec![0.0; all_num]; all_num];
    for i in 0..all_num {
        for j in 0..all_num {
            let temp_min: f64 = (0..all_num).map(|c| v_mat[i][c].min(v_mat[j][c])).sum();
            let jaccard = 1.0 - temp_min / (2.0 - temp_min);
            out[i][j] = jaccard * (1.0 - lambda_value) + original_dist[i][j] * lambda_value;
        }
    }
    out
}

/// AP and rank-1 hit by the definition: rank of every kept gallery item
/// counted directly, precision summed over relevant items in rank order.
pub fn brute_force_ap(sims: &[f64], gallery_ids: &[usize], gallery_cams: &[usize], qid: usize, qcam: usize) -> Option<(f64, bool)> {
    let n = sims.len();
    let kept: Vec<usize> = (0..n).filter(|&g| !(gallery_ids[g] == qid && gallery_cams[g] == qcam)).collect();
    let rank_of = |g: usize| 1 + kept.iter().filter(|&&h| sims[h] > sims[g] || (sims[h] == sims[g] && h < g)).count();
    let mut relevant_ranks: Vec<usize> = kept.iter().copied().filter(|&g| gallery_ids[g] == qid).map(rank_of).collect();
    if relevant_ranks.is_empty() {
        return None;
    }
    relevant_ranks.sort_unstable();
    let mut sum = 0.0;
    for (k, &r) in relevant_ranks.iter().enumerate() {
        sum += (k + 1) as f64 / r as f64;
    }
    let top = kept.iter().copied().find(|&g| rank_of(g) == 1).unwrap();
    Some((sum / relevant_ranks.len() as f64, gallery_ids[top] == qid))
}

/// Exhaustive reference for buffer selection: `(cluster, member)` pairs.
pub fn exhaustive_selection(assignment: &ClusterAssignment, feats: &[FeatureVector], n_new: usize) -> Vec<(usize, usize)> {
    let k = assignment.num_clusters();
    let mut chosen: Vec<usize> = Vec::new();
    for _ in 0..n_new.min(k) {
        let best = (0..k)
            .filter(|c| !chosen.contains(c))
            .max_by(|&a, &b| assignment.cluster_sizes[a].cmp(&assignment.cluster_sizes[b]).then(b.cmp(&a)))
            .unwrap();
        chosen.push(best);
    }
    chosen
        .into_iter()
        .map(|c| {
            let members: Vec<usize> = (0..assignment.labels.len()).filter(|&i| assignment.labels[i] == c as i64).collect();
            let best = members
                .iter()
                .copied()
                .max_by(|&a, &b| {
                    let sa = assignment.prototypes[c].dot(&feats[a]);
                    let sb = assignment.prototypes[c].dot(&feats[b]);
                    sa.partial_cmp(&sb).unwrap().then(b.cmp(&a))
                })
                .unwrap();
            (c, best)
        })
        .collect()
}
