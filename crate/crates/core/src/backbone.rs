//! Shared convolutional trunk and per-branch tail stages.
//!
//! The trunk maps `[N, 3, H, W]` images to a `[N, C, H/stride, W/stride]`
//! feature map consumed by all branches. Two variants:
//!
//! * `osnet_like` — a lightweight multi-stream stack with three conv stages
//!   and two 1×1-conv + avg-pool transition stages (total stride 16).
//! * `tiny_test` — a plain three-conv stack sized for fast CPU tests, with a
//!   configurable total stride of 4, 8 or 16.
//!
//! Each branch then owns (or shares, per config) a two-stage tail: a 3×3
//! stage followed by a 1×1 stage, both stride 1 and channel-preserving.

use crate::autodiff::{avg_pool2d, Var};
use crate::nn::{ConvBnRelu, ParamStore, Session};
use crate::types::BranchId;
use anyhow::{bail, ensure, Context, Result};
use ndarray::{Array3, Array4, Axis};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrunkVariant {
    OsnetLike,
    TinyTest,
}

impl std::str::FromStr for TrunkVariant {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "osnet_like" => Ok(TrunkVariant::OsnetLike),
            "tiny_test" => Ok(TrunkVariant::TinyTest),
            other => bail!("unknown trunk variant: {other:?} (expected osnet_like|tiny_test)"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrunkConfig {
    pub variant: TrunkVariant,
    pub out_channels: usize,
    pub share_tail_stages: bool,
    pub total_stride: usize,
}

impl TrunkConfig {
    pub fn osnet_like() -> Self {
        TrunkConfig {
            variant: TrunkVariant::OsnetLike,
            out_channels: 512,
            share_tail_stages: false,
            total_stride: 16,
        }
    }

    pub fn tiny_test(out_channels: usize, total_stride: usize) -> Self {
        TrunkConfig {
            variant: TrunkVariant::TinyTest,
            out_channels,
            share_tail_stages: false,
            total_stride,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.out_channels >= 8,
            "trunk out_channels must be >= 8, got {}",
            self.out_channels
        );
        match self.variant {
            TrunkVariant::OsnetLike => ensure!(
                self.total_stride == 16,
                "osnet_like trunk has a fixed total stride of 16, got {}",
                self.total_stride
            ),
            TrunkVariant::TinyTest => ensure!(
                matches!(self.total_stride, 4 | 8 | 16),
                "tiny_test trunk supports total stride 4, 8 or 16, got {}",
                self.total_stride
            ),
        }
        Ok(())
    }
}

/// One multi-stream stage: parallel 1×1 and 3×3 conv paths, summed before
/// the shared ReLU.
struct LiteBlock {
    point: crate::nn::Conv2d,
    point_bn: crate::nn::BatchNorm,
    spatial: crate::nn::Conv2d,
    spatial_bn: crate::nn::BatchNorm,
}

impl LiteBlock {
    fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, seed: u64) -> Self {
        LiteBlock {
            point: crate::nn::Conv2d::new(store, &format!("{name}.point"), in_ch, out_ch, 1, 1, 0, seed),
            point_bn: crate::nn::BatchNorm::new(store, &format!("{name}.point_bn"), out_ch),
            spatial: crate::nn::Conv2d::new(store, &format!("{name}.spatial"), in_ch, out_ch, 3, 1, 1, seed),
            spatial_bn: crate::nn::BatchNorm::new(store, &format!("{name}.spatial_bn"), out_ch),
        }
    }

    fn forward<'t>(&self, sess: &Session<'t, '_>, x: Var<'t>) -> Var<'t> {
        let a = self.point_bn.forward(sess, self.point.forward(sess, x));
        let b = self.spatial_bn.forward(sess, self.spatial.forward(sess, x));
        a.add(b).relu()
    }
}

enum TrunkBody {
    Osnet {
        stem: ConvBnRelu,
        stage2: LiteBlock,
        transition1: ConvBnRelu,
        stage3: LiteBlock,
        transition2: ConvBnRelu,
    },
    Tiny {
        layers: Vec<ConvBnRelu>,
    },
}

pub struct Trunk {
    pub cfg: TrunkConfig,
    body: TrunkBody,
}

impl Trunk {
    pub fn new(store: &mut ParamStore, cfg: &TrunkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.out_channels;
        let body = match cfg.variant {
            TrunkVariant::OsnetLike => {
                let c0 = (out / 16).max(8);
                let c1 = (out / 8).max(8);
                let c2 = (out / 4).max(8);
                let c3 = (out / 2).max(8);
                TrunkBody::Osnet {
                    stem: ConvBnRelu::new(store, "trunk.stem", 3, c0, 3, 2, 1, seed),
                    stage2: LiteBlock::new(store, "trunk.stage2", c0, c1, seed),
                    transition1: ConvBnRelu::new(store, "trunk.transition1", c1, c2, 1, 1, 0, seed),
                    stage3: LiteBlock::new(store, "trunk.stage3", c2, c3, seed),
                    transition2: ConvBnRelu::new(store, "trunk.transition2", c3, out, 1, 1, 0, seed),
                }
            }
            TrunkVariant::TinyTest => {
                let mid = (out / 2).max(8);
                let plan: &[(usize, usize, usize)] = match cfg.total_stride {
                    16 => &[(4, 4, 0), (3, 2, 1), (3, 2, 1)],
                    8 => &[(2, 2, 0), (3, 2, 1), (3, 2, 1)],
                    4 => &[(2, 2, 0), (3, 2, 1), (3, 1, 1)],
                    _ => unreachable!("validated above"),
                };
                let chans = [(3, mid), (mid, out), (out, out)];
                let layers = plan
                    .iter()
                    .zip(chans)
                    .enumerate()
                    .map(|(i, (&(k, s, p), (ci, co)))| {
                        ConvBnRelu::new(store, &format!("trunk.conv{}", i + 1), ci, co, k, s, p, seed)
                    })
                    .collect();
                TrunkBody::Tiny { layers }
            }
        };
        Ok(Trunk { cfg: cfg.clone(), body })
    }

    /// Run the shared trunk on a validated image batch.
    pub fn forward<'t>(&self, sess: &Session<'t, '_>, images: Var<'t>) -> Var<'t> {
        match &self.body {
            TrunkBody::Osnet { stem, stage2, transition1, stage3, transition2 } => {
                let x = avg_pool2d(stem.forward(sess, images), 2);
                let x = stage2.forward(sess, x);
                let x = avg_pool2d(transition1.forward(sess, x), 2);
                let x = stage3.forward(sess, x);
                avg_pool2d(transition2.forward(sess, x), 2)
            }
            TrunkBody::Tiny { layers } => {
                let mut x = images;
                for layer in layers {
                    x = layer.forward(sess, x);
                }
                x
            }
        }
    }
}

/// Validate and run the trunk; the public forward entry point.
pub fn trunk_forward<'t>(
    trunk: &Trunk,
    sess: &Session<'t, '_>,
    images: &Array4<f64>,
) -> Result<Var<'t>> {
    check_image_batch(images, trunk.cfg.total_stride)?;
    Ok(trunk.forward(sess, sess.tape.var(images.clone().into_dyn())))
}

fn check_image_batch(images: &Array4<f64>, total_stride: usize) -> Result<()> {
    let (n, c, h, w) = (
        images.shape()[0],
        images.shape()[1],
        images.shape()[2],
        images.shape()[3],
    );
    ensure!(n >= 1, "empty image batch");
    ensure!(c == 3, "images must have 3 channels, got {c}");
    ensure!(
        h >= total_stride && w >= total_stride,
        "image {h}x{w} smaller than trunk stride {total_stride}"
    );
    ensure!(
        images.iter().all(|v| v.is_finite()),
        "non-finite values in image batch"
    );
    Ok(())
}

/// Stack per-image tensors into a batch, rejecting mismatched sizes.
pub fn stack_images(images: &[Array3<f64>]) -> Result<Array4<f64>> {
    ensure!(!images.is_empty(), "empty image batch");
    let shape = images[0].dim();
    for (i, img) in images.iter().enumerate() {
        ensure!(
            img.dim() == shape,
            "mismatched image sizes within a batch: image {i} is {:?}, expected {:?}",
            img.dim(),
            shape
        );
    }
    let views: Vec<_> = images.iter().map(|i| i.view().insert_axis(Axis(0))).collect();
    Ok(ndarray::concatenate(Axis(0), &views).context("stacking image batch")?)
}

/// Tail stages 4–5 for one branch: 3×3 then 1×1, stride 1, channel-preserving.
pub struct BranchTail {
    conv4: ConvBnRelu,
    conv5: ConvBnRelu,
}

impl BranchTail {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, seed: u64) -> Self {
        BranchTail {
            conv4: ConvBnRelu::new(store, &format!("{name}.conv4"), channels, channels, 3, 1, 1, seed),
            conv5: ConvBnRelu::new(store, &format!("{name}.conv5"), channels, channels, 1, 1, 0, seed),
        }
    }

    pub fn forward<'t>(&self, sess: &Session<'t, '_>, fmap: Var<'t>) -> Var<'t> {
        self.conv5.forward(sess, self.conv4.forward(sess, fmap))
    }
}

/// The tails for all enabled branches; one shared instance when
/// `share_tail_stages` is set, otherwise private weights per branch.
pub struct TailSet {
    shared: Option<BranchTail>,
    per_branch: BTreeMap<BranchId, BranchTail>,
}

impl TailSet {
    pub fn new(
        store: &mut ParamStore,
        cfg: &TrunkConfig,
        branches: &[BranchId],
        seed: u64,
    ) -> Self {
        if cfg.share_tail_stages {
            TailSet {
                shared: Some(BranchTail::new(store, "tail.shared", cfg.out_channels, seed)),
                per_branch: BTreeMap::new(),
            }
        } else {
            TailSet {
                shared: None,
                per_branch: branches
                    .iter()
                    .map(|&b| {
                        (b, BranchTail::new(store, &format!("tail.{b}"), cfg.out_channels, seed))
                    })
                    .collect(),
            }
        }
    }
}

/// Apply the tail stages for `branch` to a trunk feature map.
pub fn branch_tail_forward<'t>(
    tails: &TailSet,
    sess: &Session<'t, '_>,
    fmap: Var<'t>,
    branch: BranchId,
) -> Result<Var<'t>> {
    let tail = match (&tails.shared, tails.per_branch.get(&branch)) {
        (Some(shared), _) => shared,
        (None, Some(own)) => own,
        (None, None) => bail!("no tail stages configured for branch {branch}"),
    };
    Ok(tail.forward(sess, fmap))
}
