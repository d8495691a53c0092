//! Synthetic desk-scale dataset: identity-specific colors and stripe
//! patterns plus noise, rendered for two "cameras" with distinct tints.
//!
//! Identities are separable from raw pixel statistics by construction (a
//! nearest-neighbor probe on mean color already beats chance), so a working
//! training loop must be able to overfit it quickly.

use super::{Dataset, Layout, MemoryProvider, PersonImageRecord};
use crate::types::Split;
use anyhow::{ensure, Result};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::path::PathBuf;

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub num_ids: usize,
    pub imgs_per_id: usize,
    pub query_per_id: usize,
    pub gallery_per_id: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_ids: 8,
            imgs_per_id: 8,
            query_per_id: 2,
            gallery_per_id: 2,
            height: 64,
            width: 32,
            seed: 7,
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn mix_seed(master: u64, split: Split, id: usize, idx: usize) -> u64 {
    let split_tag = match split {
        Split::Train => 1u64,
        Split::Query => 2,
        Split::Gallery => 3,
    };
    let mut h = master ^ 0x9e37_79b9_7f4a_7c15;
    for v in [split_tag, id as u64, idx as u64] {
        h ^= v.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    }
    h
}

fn render(spec: &SynthSpec, split: Split, id: usize, idx: usize, camera: u32) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, split, id, idx));
    let base = hsv_to_rgb(id as f64 / spec.num_ids as f64, 0.85, 0.65);
    let period = 3 + id % 3;
    let phase = id % period;
    let mut img = Array3::<f64>::zeros((3, spec.height, spec.width));
    for y in 0..spec.height {
        let stripe = (y + phase) % period == 0;
        for x in 0..spec.width {
            for c in 0..3 {
                let mut v = base[c];
                if stripe {
                    v = (v * 1.5).min(1.0);
                }
                // Camera 1 applies a warm global tint.
                if camera == 1 {
                    v += match c {
                        0 => 0.06,
                        2 => -0.05,
                        _ => 0.0,
                    };
                }
                v += rng.random_range(-0.05..0.05);
                img[[c, y, x]] = v.clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Generate the synthetic dataset: train images alternate cameras 0/1,
/// queries come from camera 0 and gallery images from camera 1.
pub fn synth_dataset(spec: &SynthSpec) -> Result<(Dataset, MemoryProvider)> {
    ensure!(spec.num_ids >= 2, "need at least 2 synthetic identities");
    ensure!(spec.imgs_per_id >= 1, "need at least 1 image per identity");
    ensure!(spec.height >= 8 && spec.width >= 8, "synthetic images must be at least 8x8");
    let mut records = Vec::new();
    let mut images = HashMap::new();
    let mut add = |split: Split, id: usize, idx: usize, camera: u32| {
        let path = PathBuf::from(format!("synth/{split}/{id:04}_c{camera}s1_{idx:06}_00.png"));
        records.push(PersonImageRecord {
            path: path.clone(),
            person_id: id as i32 + 1,
            camera_id: camera,
            split,
        });
        images.insert(path, render(spec, split, id, idx, camera));
    };
    for id in 0..spec.num_ids {
        for idx in 0..spec.imgs_per_id {
            add(Split::Train, id, idx, (idx % 2) as u32);
        }
        for idx in 0..spec.query_per_id {
            add(Split::Query, id, idx, 0);
        }
        for idx in 0..spec.gallery_per_id {
            add(Split::Gallery, id, idx, 1);
        }
    }
    Ok((Dataset { layout: Layout::Synthetic, records }, MemoryProvider::new(images)))
}
