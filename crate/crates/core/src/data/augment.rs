//! Training-time augmentation: random horizontal flip and random erasing.

use anyhow::{ensure, Result};
use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct EraseConfig {
    pub prob: f64,
    /// Erased area as a fraction of the image, sampled uniformly.
    pub area: (f64, f64),
    /// Aspect ratio (h/w) range of the erased rectangle.
    pub aspect: (f64, f64),
    pub fill: f64,
}

#[derive(Clone, Debug)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub erase: EraseConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            erase: EraseConfig {
                prob: 0.5,
                area: (0.02, 0.4),
                aspect: (0.3, 1.0 / 0.3),
                fill: 0.5,
            },
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for p in [self.flip_prob, self.erase.prob] {
            ensure!((0.0..=1.0).contains(&p), "probabilities must lie in [0, 1]");
        }
        ensure!(
            0.0 < self.erase.area.0 && self.erase.area.0 <= self.erase.area.1 && self.erase.area.1 <= 1.0,
            "bad erase area range"
        );
        ensure!(
            0.0 < self.erase.aspect.0 && self.erase.aspect.0 <= self.erase.aspect.1,
            "bad erase aspect range"
        );
        Ok(())
    }
}

fn flip_horizontal(image: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = image.dim();
    Array3::from_shape_fn((c, h, w), |(ci, hi, wi)| image[[ci, hi, w - 1 - wi]])
}

/// Choose an erase rectangle `(top, left, height, width)`, if one fits.
fn sample_erase_rect(
    h: usize,
    w: usize,
    cfg: &EraseConfig,
    rng: &mut ChaCha8Rng,
) -> Option<(usize, usize, usize, usize)> {
    let area = (h * w) as f64;
    for _ in 0..100 {
        let target = area * rng.random_range(cfg.area.0..=cfg.area.1);
        let aspect = rng.random_range(cfg.aspect.0..=cfg.aspect.1);
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh >= 1 && ew >= 1 && eh <= h && ew <= w {
            let top = rng.random_range(0..=(h - eh));
            let left = rng.random_range(0..=(w - ew));
            return Some((top, left, eh, ew));
        }
    }
    None
}

/// Flip with `flip_prob`, then erase one random rectangle with the erase
/// probability. Dimensions never change; deterministic under a seeded RNG.
pub fn augment(image: &Array3<f64>, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Array3<f64>> {
    cfg.validate()?;
    let (_, h, w) = image.dim();
    let mut out = if rng.random_range(0.0..1.0) < cfg.flip_prob {
        flip_horizontal(image)
    } else {
        image.clone()
    };
    if rng.random_range(0.0..1.0) < cfg.erase.prob {
        if let Some((top, left, eh, ew)) = sample_erase_rect(h, w, &cfg.erase, rng) {
            out.slice_mut(ndarray::s![.., top..top + eh, left..left + ew]).fill(cfg.erase.fill);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn noise_image(seed: u64, h: usize, w: usize) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, h, w), |_| rng.random::<f64>())
    }

    fn with_probs(flip: f64, erase: f64) -> AugmentConfig {
        let mut cfg = AugmentConfig::default();
        cfg.flip_prob = flip;
        cfg.erase.prob = erase;
        cfg
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let img = noise_image(1, 16, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = augment(&img, &with_probs(0.0, 0.0), &mut rng).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn forced_flip_is_an_involution() {
        let img = noise_image(3, 12, 6);
        let cfg = with_probs(1.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let once = augment(&img, &cfg, &mut rng).unwrap();
        assert_ne!(once, img);
        let twice = augment(&once, &cfg, &mut rng).unwrap();
        assert_eq!(twice, img);
    }

    #[test]
    fn forced_erase_changes_exactly_one_rectangle() {
        // All-zero image with fill 0.5: the changed set is exactly the block.
        let img = Array3::<f64>::zeros((3, 20, 10));
        let cfg = with_probs(0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = augment(&img, &cfg, &mut rng).unwrap();
        let changed: Vec<(usize, usize)> = (0..20)
            .flat_map(|i| (0..10).map(move |j| (i, j)))
            .filter(|&(i, j)| (0..3).any(|c| out[[c, i, j]] != 0.0))
            .collect();
        assert!(!changed.is_empty());
        let top = changed.iter().map(|&(i, _)| i).min().unwrap();
        let bottom = changed.iter().map(|&(i, _)| i).max().unwrap();
        let left = changed.iter().map(|&(_, j)| j).min().unwrap();
        let right = changed.iter().map(|&(_, j)| j).max().unwrap();
        assert_eq!(changed.len(), (bottom - top + 1) * (right - left + 1), "a full rectangle");
        for &(i, j) in &changed {
            for c in 0..3 {
                assert_eq!(out[[c, i, j]], 0.5, "erased cells take the fill value");
            }
        }
    }

    #[test]
    fn augmentation_preserves_dimensions_and_is_seed_deterministic() {
        let img = noise_image(6, 24, 12);
        let cfg = AugmentConfig::default();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = augment(&img, &cfg, &mut rng).unwrap();
            assert_eq!(out.dim(), img.dim());
            let mut rng2 = ChaCha8Rng::seed_from_u64(seed);
            let out2 = augment(&img, &cfg, &mut rng2).unwrap();
            assert_eq!(out, out2);
        }
    }
}
