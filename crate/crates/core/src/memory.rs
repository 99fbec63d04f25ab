//! Hybrid rehearsal memory: one stored raw sample plus its cluster prototype
//! per entry, refreshed at every step boundary.

use std::fs;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterAssignment;
use crate::error::{Error, Result};
use crate::numeric::FeatureVector;
use crate::rng::Rng;

pub const BUFFER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    /// Raw encoder input, re-encoded by every later encoder.
    pub sample: Vec<f64>,
    /// Prototype as computed at storage time; never re-encoded.
    pub prototype: FeatureVector,
    pub source_domain: usize,
    /// Unique across all steps.
    pub pseudo_identity: u64,
    pub source_cluster_size: usize,
    pub camera_id: usize,
    pub step_stored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBuffer {
    version: u32,
    capacity: usize,
    entries: Vec<BufferEntry>,
    next_pseudo_identity: u64,
}

/// `(n_new, n_old)` for a buffer of `n_mem` slots.
///
/// `n_new = ⌊|P|·n_mem / (|P|+|P^o|)⌋` and the remainder goes to the old
/// side; any quota exceeding what is available is handed to the other side.
pub fn quotas(num_new_clusters: usize, num_old_entries: usize, n_mem: usize) -> Result<(usize, usize)> {
    let total = num_new_clusters + num_old_entries;
    if total == 0 {
        return Err(Error::BothEmpty);
    }
    let mut n_new = ((num_new_clusters as u128 * n_mem as u128) / total as u128) as usize;
    let mut n_old = n_mem - n_new;
    if n_new > num_new_clusters {
        n_old += n_new - num_new_clusters;
        n_new = num_new_clusters;
    }
    if n_old > num_old_entries {
        n_new = (n_new + n_old - num_old_entries).min(num_new_clusters);
        n_old = num_old_entries;
    }
    Ok((n_new, n_old))
}

/// Where the candidate clusters came from.
#[derive(Debug, Clone, Copy)]
pub struct Provenance {
    pub domain: usize,
    pub step: usize,
}

/// Picks the `n_new` largest clusters (ties: lower cluster id) and, for each,
/// the member whose momentum feature is most similar to the prototype
/// (ties: lower sample index).
///
/// Pseudo-identities are left at zero; [`MemoryBuffer::update`] assigns them.
pub fn select_new(
    assignment: &ClusterAssignment,
    samples: &[Vec<f64>],
    camera_ids: &[usize],
    momentum_feats: &[FeatureVector],
    n_new: usize,
    provenance: Provenance,
) -> Vec<BufferEntry> {
    let mut order: Vec<usize> = (0..assignment.num_clusters()).collect();
    order.sort_by(|&a, &b| assignment.cluster_sizes[b].cmp(&assignment.cluster_sizes[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(n_new)
        .map(|c| {
            let proto = &assignment.prototypes[c];
            let mut best = assignment.members[c][0];
            let mut best_sim = f64::NEG_INFINITY;
            for &i in &assignment.members[c] {
                let sim = proto.dot(&momentum_feats[i]);
                if sim > best_sim {
                    best_sim = sim;
                    best = i;
                }
            }
            BufferEntry {
                sample: samples[best].clone(),
                prototype: proto.clone(),
                source_domain: provenance.domain,
                pseudo_identity: 0,
                source_cluster_size: assignment.cluster_sizes[c],
                camera_id: camera_ids[best],
                step_stored: provenance.step,
            }
        })
        .collect()
}

/// Keeps the `n_old` entries with the largest source clusters; ties prefer
/// the most recent step, then the lowest pseudo-identity.
pub fn retain_old(entries: &[BufferEntry], n_old: usize) -> Vec<BufferEntry> {
    let mut kept: Vec<BufferEntry> = entries.to_vec();
    kept.sort_by(|a, b| {
        b.source_cluster_size
            .cmp(&a.source_cluster_size)
            .then(b.step_stored.cmp(&a.step_stored))
            .then(a.pseudo_identity.cmp(&b.pseudo_identity))
    });
    kept.truncate(n_old);
    kept
}

impl MemoryBuffer {
    pub fn new(capacity: usize) -> Self {
        MemoryBuffer {
            version: BUFFER_VERSION,
            capacity,
            entries: Vec::new(),
            next_pseudo_identity: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn prototypes(&self) -> Vec<FeatureVector> {
        self.entries.iter().map(|e| e.prototype.clone()).collect()
    }

    /// Approximate heap footprint in bytes; depends only on entry count and widths.
    pub fn footprint_bytes(&self) -> usize {
        self.entries
            .iter()
            .map(|e| (e.sample.len() + e.prototype.dim()) * std::mem::size_of::<f64>() + std::mem::size_of::<BufferEntry>())
            .sum()
    }

    /// Step-boundary update: quotas once, then retain old and add new entries.
    /// Returns the `(n_new, n_old)` that was applied.
    pub fn update(
        &mut self,
        assignment: &ClusterAssignment,
        samples: &[Vec<f64>],
        camera_ids: &[usize],
        momentum_feats: &[FeatureVector],
        provenance: Provenance,
    ) -> Result<(usize, usize)> {
        if self.capacity == 0 {
            return Ok((0, 0));
        }
        let (n_new, n_old) = match quotas(assignment.num_clusters(), self.entries.len(), self.capacity) {
            Ok(q) => q,
            Err(Error::BothEmpty) => return Ok((0, 0)),
            Err(e) => return Err(e),
        };
        let mut next = retain_old(&self.entries, n_old);
        for mut entry in select_new(assignment, samples, camera_ids, momentum_feats, n_new, provenance) {
            entry.pseudo_identity = self.next_pseudo_identity;
            self.next_pseudo_identity += 1;
            next.push(entry);
        }
        self.entries = next;
        Ok((n_new, n_old))
    }

    /// Indices of `min(batch_size, len)` distinct entries, uniformly without replacement.
    pub fn sample_rehearsal_batch(&self, batch_size: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        if self.entries.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let k = batch_size.min(self.entries.len());
        Ok(index::sample(rng, self.entries.len(), k).into_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = bincode::serialize(self)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let buf: MemoryBuffer = bincode::deserialize(&bytes)?;
        if buf.version != BUFFER_VERSION {
            return Err(Error::UnsupportedVersion {
                found: buf.version,
                expected: BUFFER_VERSION,
            });
        }
        Ok(buf)
    }
}
