//! Dataset ingestion, PK identity sampling, augmentation, and a synthetic
//! desk-scale dataset generator.

mod augment;
mod ingest;
mod sampler;
mod synth;

pub use augment::{augment, AugmentConfig, EraseConfig};
pub use ingest::{ingest_dataset, parse_person_filename, Layout};
pub use sampler::{pk_sample, IdentityIndex, LabeledBatch, PkBatchSpec, PkSampler};
pub use synth::{synth_dataset, SynthSpec};

use crate::types::Split;
use anyhow::{ensure, Context, Result};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

/// One image with its identity and camera annotations.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PersonImageRecord {
    pub path: PathBuf,
    pub person_id: i32,
    pub camera_id: u32,
    pub split: Split,
}

impl PersonImageRecord {
    /// Junk images (person id < 0) never participate in training or metrics.
    pub fn is_junk(&self) -> bool {
        self.person_id < 0
    }

    /// Distractors (person id 0) stay in the gallery as negatives but are
    /// excluded from the training identity set.
    pub fn is_distractor(&self) -> bool {
        self.person_id == 0
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub layout: Layout,
    pub records: Vec<PersonImageRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &PersonImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Distinct valid identities in a split (junk and distractors excluded).
    pub fn identities(&self, split: Split) -> BTreeSet<i32> {
        self.split(split)
            .filter(|r| !r.is_junk() && !r.is_distractor())
            .map(|r| r.person_id)
            .collect()
    }

    pub fn counts(&self) -> Vec<SplitCount> {
        [Split::Train, Split::Query, Split::Gallery]
            .into_iter()
            .map(|s| SplitCount {
                split: s,
                images: self.split(s).count(),
                identities: self.identities(s).len(),
            })
            .collect()
    }

    pub fn manifest(&self) -> DatasetManifest {
        let mut names: Vec<String> = self
            .records
            .iter()
            .map(|r| r.path.to_string_lossy().into_owned())
            .collect();
        names.sort();
        let mut hasher = Sha256::new();
        for n in &names {
            hasher.update(n.as_bytes());
            hasher.update(b"\n");
        }
        DatasetManifest {
            layout: self.layout,
            counts: self.counts(),
            checksum: hex_digest(hasher),
            records: self.records.clone(),
        }
    }
}

fn hex_digest(hasher: Sha256) -> String {
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitCount {
    pub split: Split,
    pub images: usize,
    pub identities: usize,
}

/// Cacheable summary of an ingested dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub layout: Layout,
    pub counts: Vec<SplitCount>,
    pub checksum: String,
    pub records: Vec<PersonImageRecord>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).with_context(|| format!("writing manifest {path:?}"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).with_context(|| format!("reading manifest {path:?}"))?;
        Ok(serde_json::from_str(&json)?)
    }

    pub fn into_dataset(self) -> Dataset {
        Dataset { layout: self.layout, records: self.records }
    }
}

/// Source of pixel data for records; disk-backed for real datasets,
/// in-memory for the synthetic one.
pub trait ImageProvider: Send + Sync {
    /// `[3, H, W]` RGB in `[0, 1]`.
    fn image(&self, record: &PersonImageRecord) -> Result<Array3<f64>>;
}

/// Loads and resizes images from disk.
pub struct DiskProvider {
    pub height: usize,
    pub width: usize,
}

impl ImageProvider for DiskProvider {
    fn image(&self, record: &PersonImageRecord) -> Result<Array3<f64>> {
        let img = image::open(&record.path)
            .with_context(|| format!("loading image {:?}", record.path))?
            .resize_exact(
                self.width as u32,
                self.height as u32,
                image::imageops::FilterType::Triangle,
            )
            .to_rgb8();
        let mut out = Array3::<f64>::zeros((3, self.height, self.width));
        for (x, y, pixel) in img.enumerate_pixels() {
            for c in 0..3 {
                out[[c, y as usize, x as usize]] = pixel[c] as f64 / 255.0;
            }
        }
        Ok(out)
    }
}

/// Fully materialized images keyed by record path.
pub struct MemoryProvider {
    images: std::collections::HashMap<PathBuf, Array3<f64>>,
}

impl MemoryProvider {
    pub fn new(images: std::collections::HashMap<PathBuf, Array3<f64>>) -> Self {
        MemoryProvider { images }
    }
}

impl ImageProvider for MemoryProvider {
    fn image(&self, record: &PersonImageRecord) -> Result<Array3<f64>> {
        self.images
            .get(&record.path)
            .cloned()
            .with_context(|| format!("no in-memory image for {:?}", record.path))
    }
}

/// Load a batch of records through a provider and stack them.
pub fn load_batch(
    provider: &dyn ImageProvider,
    records: &[&PersonImageRecord],
) -> Result<ndarray::Array4<f64>> {
    ensure!(!records.is_empty(), "empty batch");
    let images: Vec<Array3<f64>> = records
        .iter()
        .map(|r| provider.image(r))
        .collect::<Result<_>>()?;
    crate::backbone::stack_images(&images)
}
