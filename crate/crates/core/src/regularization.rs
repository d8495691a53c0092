//! Batch DropBlock and Gaussian continuous dropout.
//!
//! Batch DropBlock samples ONE rectangle per batch and zeroes it in every
//! feature map, with no rescaling of the survivors. Gaussian continuous
//! dropout multiplies activations by i.i.d. `Normal(1, σ²)` noise; the noise
//! has unit mean so eval mode needs no rescale. Both are exact identities in
//! eval mode. Callers own the RNG stream.

use anyhow::{ensure, Result};
use ndarray::{Array4, ArrayD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::types::BranchId;

#[derive(Clone, Debug)]
pub struct BdbConfig {
    pub height_ratio: f64,
    pub width_ratio: f64,
    pub apply_to: Vec<BranchId>,
}

impl Default for BdbConfig {
    fn default() -> Self {
        BdbConfig {
            height_ratio: 0.3,
            width_ratio: 1.0,
            apply_to: vec![BranchId::Local],
        }
    }
}

impl BdbConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.height_ratio) && (0.0..=1.0).contains(&self.width_ratio),
            "drop-block ratios must lie in [0, 1]"
        );
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GcdConfig {
    pub sigma: f64,
}

impl Default for GcdConfig {
    fn default() -> Self {
        GcdConfig { sigma: 0.5 }
    }
}

impl GcdConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.sigma >= 0.0, "noise sigma must be nonnegative");
        Ok(())
    }
}

/// Multiplicative mask for one batch: a single rectangle of zeros shared by
/// every sample, or `None` when nothing is dropped.
pub fn bdb_mask(
    height: usize,
    width: usize,
    cfg: &BdbConfig,
    rng: &mut ChaCha8Rng,
) -> Option<(usize, usize, usize, usize)> {
    let bh = (cfg.height_ratio * height as f64).ceil() as usize;
    let bw = (cfg.width_ratio * width as f64).ceil() as usize;
    if bh == 0 || bw == 0 {
        return None;
    }
    let bh = bh.min(height);
    let bw = bw.min(width);
    let top = rng.random_range(0..=(height - bh));
    let left = rng.random_range(0..=(width - bw));
    Some((top, left, bh, bw))
}

/// Zero one shared rectangle across every feature map in the batch.
/// Identity in eval mode; survivors are not rescaled.
pub fn batch_dropblock(
    fmaps: &Array4<f64>,
    cfg: &BdbConfig,
    rng: &mut ChaCha8Rng,
    training: bool,
) -> Result<Array4<f64>> {
    cfg.validate()?;
    if !training {
        return Ok(fmaps.clone());
    }
    let (h, w) = (fmaps.shape()[2], fmaps.shape()[3]);
    let Some((top, left, bh, bw)) = bdb_mask(h, w, cfg, rng) else {
        return Ok(fmaps.clone());
    };
    let mut out = fmaps.clone();
    out.slice_mut(ndarray::s![.., .., top..top + bh, left..left + bw]).fill(0.0);
    Ok(out)
}

/// The same drop as a multiplicative mask, for use on the tape.
pub fn bdb_mask_tensor(
    shape: &[usize],
    cfg: &BdbConfig,
    rng: &mut ChaCha8Rng,
) -> Option<ArrayD<f64>> {
    let (h, w) = (shape[2], shape[3]);
    let (top, left, bh, bw) = bdb_mask(h, w, cfg, rng)?;
    let mut mask = ArrayD::<f64>::ones(ndarray::IxDyn(shape));
    mask.slice_mut(ndarray::s![.., .., top..top + bh, left..left + bw]).fill(0.0);
    Some(mask)
}

/// Multiply by i.i.d. `Normal(1, σ²)` noise during training; identity in
/// eval mode or at σ = 0.
pub fn gaussian_continuous_dropout(
    x: &ArrayD<f64>,
    cfg: &GcdConfig,
    rng: &mut ChaCha8Rng,
    training: bool,
) -> Result<ArrayD<f64>> {
    cfg.validate()?;
    match gcd_noise(x.shape(), cfg, rng, training) {
        Some(noise) => Ok(x * &noise),
        None => Ok(x.clone()),
    }
}

/// The noise tensor itself, for use on the tape. `None` when the op is an
/// identity (eval mode or σ = 0).
pub fn gcd_noise(
    shape: &[usize],
    cfg: &GcdConfig,
    rng: &mut ChaCha8Rng,
    training: bool,
) -> Option<ArrayD<f64>> {
    if !training || cfg.sigma == 0.0 {
        return None;
    }
    let normal = Normal::new(1.0, cfg.sigma).unwrap();
    Some(ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| normal.sample(rng)))
}
