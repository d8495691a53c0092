//! PK batch construction: P identities per batch, K instances per identity.

use super::Dataset;
use crate::types::Split;
use anyhow::{ensure, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug)]
pub struct PkBatchSpec {
    pub p: usize,
    pub k: usize,
}

impl Default for PkBatchSpec {
    fn default() -> Self {
        PkBatchSpec { p: 16, k: 4 }
    }
}

impl PkBatchSpec {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.p >= 2, "P must be at least 2, got {}", self.p);
        ensure!(self.k >= 2, "K must be at least 2, got {}", self.k);
        Ok(())
    }
}

/// A sampled batch: record indices plus aligned contiguous labels.
#[derive(Clone, Debug)]
pub struct LabeledBatch {
    /// Indices into the dataset's record list.
    pub record_indices: Vec<usize>,
    /// Contiguous training labels in `[0, num_identities)`.
    pub labels: Vec<usize>,
    pub person_ids: Vec<i32>,
    pub camera_ids: Vec<u32>,
}

/// Training identity table: person id -> contiguous label and record indices.
#[derive(Clone, Debug)]
pub struct IdentityIndex {
    ids: Vec<i32>,
    label_of: BTreeMap<i32, usize>,
    records_of: BTreeMap<i32, Vec<usize>>,
}

impl IdentityIndex {
    /// Build from the train split, excluding junk and distractor records.
    pub fn from_dataset(dataset: &Dataset) -> Result<Self> {
        let mut records_of: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for (i, r) in dataset.records.iter().enumerate() {
            if r.split == Split::Train && !r.is_junk() && !r.is_distractor() {
                records_of.entry(r.person_id).or_default().push(i);
            }
        }
        ensure!(!records_of.is_empty(), "no valid training identities");
        let ids: Vec<i32> = records_of.keys().copied().collect();
        let label_of = ids.iter().enumerate().map(|(l, &pid)| (pid, l)).collect();
        Ok(IdentityIndex { ids, label_of, records_of })
    }

    pub fn num_identities(&self) -> usize {
        self.ids.len()
    }

    pub fn label(&self, person_id: i32) -> Option<usize> {
        self.label_of.get(&person_id).copied()
    }

    fn sample_instances(&self, pid: i32, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let pool = &self.records_of[&pid];
        if pool.len() >= k {
            let mut picks = pool.clone();
            picks.shuffle(rng);
            picks.truncate(k);
            picks
        } else {
            // With replacement, but every available image appears at least
            // once so small identities are fully covered.
            let mut picks = pool.clone();
            while picks.len() < k {
                picks.push(pool[rng.random_range(0..pool.len())]);
            }
            picks.shuffle(rng);
            picks
        }
    }

    fn batch_from_ids(
        &self,
        chosen: &[i32],
        dataset: &Dataset,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> LabeledBatch {
        let mut batch = LabeledBatch {
            record_indices: Vec::new(),
            labels: Vec::new(),
            person_ids: Vec::new(),
            camera_ids: Vec::new(),
        };
        for &pid in chosen {
            for idx in self.sample_instances(pid, k, rng) {
                let rec = &dataset.records[idx];
                batch.record_indices.push(idx);
                batch.labels.push(self.label_of[&pid]);
                batch.person_ids.push(rec.person_id);
                batch.camera_ids.push(rec.camera_id);
            }
        }
        batch
    }
}

/// Draw one PK batch with freshly sampled identities.
pub fn pk_sample(
    dataset: &Dataset,
    index: &IdentityIndex,
    spec: &PkBatchSpec,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledBatch> {
    spec.validate()?;
    ensure!(
        index.num_identities() >= spec.p,
        "dataset has {} identities but P = {}",
        index.num_identities(),
        spec.p
    );
    let mut ids = index.ids.clone();
    ids.shuffle(rng);
    ids.truncate(spec.p);
    Ok(index.batch_from_ids(&ids, dataset, spec.k, rng))
}

/// Epoch-oriented sampler: one epoch is a single pass over the shuffled
/// identity list, chunked into groups of P.
pub struct PkSampler {
    pub spec: PkBatchSpec,
    index: IdentityIndex,
}

impl PkSampler {
    pub fn new(dataset: &Dataset, spec: PkBatchSpec) -> Result<Self> {
        spec.validate()?;
        let index = IdentityIndex::from_dataset(dataset)?;
        ensure!(
            index.num_identities() >= spec.p,
            "dataset has {} identities but P = {}",
            index.num_identities(),
            spec.p
        );
        Ok(PkSampler { spec, index })
    }

    pub fn index(&self) -> &IdentityIndex {
        &self.index
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.index.num_identities() / self.spec.p
    }

    pub fn epoch_batches(&self, dataset: &Dataset, rng: &mut ChaCha8Rng) -> Vec<LabeledBatch> {
        let mut ids = self.index.ids.clone();
        ids.shuffle(rng);
        ids.chunks_exact(self.spec.p)
            .map(|chunk| self.index.batch_from_ids(chunk, dataset, self.spec.k, rng))
            .collect()
    }
}
