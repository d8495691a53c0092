//! Spatial pooling operators: average, max, and generalized-mean (GeM) with
//! a learnable exponent.
//!
//! GeM per channel is `((1/n)·Σ xᵢ^p)^(1/p)` over the pooled region, after
//! clamping inputs to at least `eps`. At `p = 1` it equals average pooling
//! and approaches max pooling as `p → ∞`.
//!
//! Plain-array versions operate on one `[C, H, W]` region and serve as the
//! readable reference; the tape ops batch over `[N, C, H, W]` and carry the
//! hand-derived gradients, including `∂/∂p`.

use crate::autodiff::Var;
use anyhow::{bail, ensure, Result};
use ndarray::{Array1, Array2, ArrayD, ArrayView3, Axis, IxDyn};

/// Learnable GeM exponent configuration.
#[derive(Clone, Debug)]
pub struct GemParams {
    pub p: f64,
    pub learnable: bool,
    pub eps: f64,
}

impl GemParams {
    pub fn new(p: f64) -> Self {
        GemParams { p, learnable: true, eps: 1e-6 }
    }
}

/// Forward clamps `p` so the pooled value stays well-defined even if the
/// optimizer drives the raw parameter low.
pub const GEM_MIN_P: f64 = 0.1;

fn check_region(region: &ArrayView3<'_, f64>) -> Result<()> {
    ensure!(region.len() > 0, "empty pooling region");
    ensure!(
        region.iter().all(|v| v.is_finite()),
        "non-finite values in pooling region"
    );
    Ok(())
}

/// Per-channel arithmetic mean over a `[C, H, W]` region.
pub fn avg_pool(region: &ArrayView3<'_, f64>) -> Result<Array1<f64>> {
    check_region(region)?;
    let c = region.shape()[0];
    let n = (region.shape()[1] * region.shape()[2]) as f64;
    let mut out = Array1::zeros(c);
    for (ci, plane) in region.axis_iter(Axis(0)).enumerate() {
        out[ci] = plane.sum() / n;
    }
    Ok(out)
}

/// Per-channel maximum over a `[C, H, W]` region.
pub fn max_pool(region: &ArrayView3<'_, f64>) -> Result<Array1<f64>> {
    check_region(region)?;
    let c = region.shape()[0];
    let mut out = Array1::zeros(c);
    for (ci, plane) in region.axis_iter(Axis(0)).enumerate() {
        out[ci] = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(out)
}

/// Per-channel generalized mean over a `[C, H, W]` region.
///
/// The per-channel maximum is factored out before exponentiation so the
/// computation never overflows or underflows even at very large `p`:
/// `gem = M · ((1/n)·Σ (xᵢ/M)^p)^(1/p)`.
pub fn gem_pool(region: &ArrayView3<'_, f64>, params: &GemParams) -> Result<Array1<f64>> {
    check_region(region)?;
    if params.p <= 0.0 {
        bail!("GeM exponent must be positive, got {}", params.p);
    }
    let p = params.p.max(GEM_MIN_P);
    let c = region.shape()[0];
    let n = (region.shape()[1] * region.shape()[2]) as f64;
    let mut out = Array1::zeros(c);
    for (ci, plane) in region.axis_iter(Axis(0)).enumerate() {
        let m = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(params.eps);
        let t: f64 = plane.iter().map(|&v| (v.max(params.eps) / m).powf(p)).sum();
        out[ci] = m * (t / n).powf(1.0 / p);
    }
    Ok(out)
}

/// Batched stripe average over rows `rows.0..rows.1`: `[N, C, H, W] → [N, C]`.
pub fn stripe_avg<'t>(x: Var<'t>, rows: (usize, usize)) -> Var<'t> {
    let xv = x.value();
    let x4 = crate::nn::as4(&xv);
    let (n, c, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
    let (r0, r1) = rows;
    assert!(r0 < r1 && r1 <= h, "bad stripe rows {r0}..{r1} for height {h}");
    let count = ((r1 - r0) * w) as f64;
    let mut out = Array2::<f64>::zeros((n, c));
    for i in 0..n {
        for ci in 0..c {
            let mut s = 0.0;
            for hi in r0..r1 {
                for wi in 0..w {
                    s += x4[[i, ci, hi, wi]];
                }
            }
            out[[i, ci]] = s / count;
        }
    }
    let id = x.id();
    x.tape_ref().push(
        out.into_dyn(),
        Some(Box::new(move |g, sink| {
            let g2 = crate::nn::as2(g);
            let mut gx = ndarray::Array4::<f64>::zeros((n, c, h, w));
            for i in 0..n {
                for ci in 0..c {
                    let gv = g2[[i, ci]] / count;
                    for hi in r0..r1 {
                        for wi in 0..w {
                            gx[[i, ci, hi, wi]] = gv;
                        }
                    }
                }
            }
            sink(id, gx.into_dyn());
        })),
    )
}

/// Batched per-channel max over the whole map: `[N, C, H, W] → [N, C]`.
/// Gradient flows to the first maximal cell in row-major order.
pub fn global_max<'t>(x: Var<'t>) -> Var<'t> {
    let xv = x.value();
    let x4 = crate::nn::as4(&xv);
    let (n, c, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
    let mut out = Array2::<f64>::zeros((n, c));
    let mut argmax = vec![0usize; n * c];
    for i in 0..n {
        for ci in 0..c {
            let mut best = f64::NEG_INFINITY;
            let mut best_at = 0;
            for hi in 0..h {
                for wi in 0..w {
                    let v = x4[[i, ci, hi, wi]];
                    if v > best {
                        best = v;
                        best_at = hi * w + wi;
                    }
                }
            }
            out[[i, ci]] = best;
            argmax[i * c + ci] = best_at;
        }
    }
    let id = x.id();
    x.tape_ref().push(
        out.into_dyn(),
        Some(Box::new(move |g, sink| {
            let g2 = crate::nn::as2(g);
            let mut gx = ndarray::Array4::<f64>::zeros((n, c, h, w));
            for i in 0..n {
                for ci in 0..c {
                    let at = argmax[i * c + ci];
                    gx[[i, ci, at / w, at % w]] = g2[[i, ci]];
                }
            }
            sink(id, gx.into_dyn());
        })),
    )
}

/// Batched GeM over rows `rows.0..rows.1` with a scalar exponent node.
///
/// Fused op with analytic gradients for both the inputs and `p`. With the
/// per-channel max `M` factored out, `tᵢ = (xᵢ/M)^p`, `T = Σ tᵢ` and
/// `y = M·(T/n)^(1/p)`:
///   ∂y/∂xᵢ = (xᵢ/y)^(p-1) / n                  (zero where the clamp binds)
///   ∂y/∂p  = (y/p) · (Σ tᵢ·ln xᵢ / T − ln M − ln(T/n)/p)
/// Every intermediate stays bounded for arbitrarily large `p`.
pub fn stripe_gem<'t>(x: Var<'t>, p: Var<'t>, rows: (usize, usize), eps: f64) -> Var<'t> {
    let xv = x.value();
    let pv = p.value();
    assert!(pv.len() == 1, "GeM exponent must be a scalar node");
    let p_raw = *pv.iter().next().unwrap();
    assert!(p_raw.is_finite(), "non-finite GeM exponent");
    let pe = p_raw.max(GEM_MIN_P);
    let clamped = p_raw < GEM_MIN_P;

    let x4 = crate::nn::as4(&xv);
    let (n, c, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
    let (r0, r1) = rows;
    assert!(r0 < r1 && r1 <= h, "bad stripe rows {r0}..{r1} for height {h}");
    let count = ((r1 - r0) * w) as f64;

    let mut out = Array2::<f64>::zeros((n, c));
    let mut t_sum = Array2::<f64>::zeros((n, c)); // T = Σ (x/M)^p
    let mut t_log = Array2::<f64>::zeros((n, c)); // Σ (x/M)^p · ln x
    let mut ch_max = Array2::<f64>::zeros((n, c));
    for i in 0..n {
        for ci in 0..c {
            let mut m = f64::NEG_INFINITY;
            for hi in r0..r1 {
                for wi in 0..w {
                    m = m.max(x4[[i, ci, hi, wi]]);
                }
            }
            let m = m.max(eps);
            let mut t = 0.0;
            let mut a = 0.0;
            for hi in r0..r1 {
                for wi in 0..w {
                    let v = x4[[i, ci, hi, wi]].max(eps);
                    let ti = (v / m).powf(pe);
                    t += ti;
                    a += ti * v.ln();
                }
            }
            ch_max[[i, ci]] = m;
            t_sum[[i, ci]] = t;
            t_log[[i, ci]] = a;
            out[[i, ci]] = m * (t / count).powf(1.0 / pe);
        }
    }

    let (ix, ip) = (x.id(), p.id());
    let xv2 = xv.clone();
    let out2 = out.clone();
    x.tape_ref().push(
        out.into_dyn(),
        Some(Box::new(move |g, sink| {
            let g2 = crate::nn::as2(g);
            let x4 = crate::nn::as4(&xv2);
            let mut gx = ndarray::Array4::<f64>::zeros((n, c, h, w));
            let mut gp = 0.0;
            for i in 0..n {
                for ci in 0..c {
                    let y = out2[[i, ci]];
                    let gout = g2[[i, ci]];
                    if gout == 0.0 {
                        continue;
                    }
                    let ln_y = y.ln();
                    for hi in r0..r1 {
                        for wi in 0..w {
                            let raw = x4[[i, ci, hi, wi]];
                            if raw <= eps {
                                continue; // clamp region: d(clamp)/dx = 0
                            }
                            let d = ((pe - 1.0) * (raw.ln() - ln_y)).exp() / count;
                            gx[[i, ci, hi, wi]] = gout * d;
                        }
                    }
                    if !clamped {
                        let t = t_sum[[i, ci]];
                        let a = t_log[[i, ci]];
                        let m = ch_max[[i, ci]];
                        gp += gout * (y / pe)
                            * (a / t - m.ln() - (t / count).ln() / pe);
                    }
                }
            }
            sink(ix, gx.into_dyn());
            sink(ip, ArrayD::from_elem(IxDyn(&[]), gp));
        })),
    )
}
