//! The composite objective: per-branch ID loss, batch-hard triplet loss,
//! center loss, and their weighted sum over branches.

use crate::autodiff::{scalar, Var};
use crate::nn::{Linear, ParamStore, Session};
use crate::types::BranchId;
use anyhow::{ensure, Result};
use ndarray::{Array2, ArrayD, IxDyn};

/// Softmax classifier for one branch.
pub struct ClassifierHead {
    pub linear: Linear,
    pub num_classes: usize,
    pub in_dim: usize,
}

impl ClassifierHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        num_classes: usize,
        seed: u64,
    ) -> Self {
        ClassifierHead {
            linear: Linear::new(store, name, in_dim, num_classes, true, seed),
            num_classes,
            in_dim,
        }
    }
}

/// Cross entropy of the true class under softmax logits, averaged over the
/// batch.
pub fn id_loss<'t>(
    sess: &Session<'t, '_>,
    embeddings: Var<'t>,
    labels: &[usize],
    head: &ClassifierHead,
) -> Result<Var<'t>> {
    ensure!(!labels.is_empty(), "empty batch");
    ensure!(embeddings.shape()[0] == labels.len(), "embedding/label count mismatch");
    for &y in labels {
        ensure!(
            y < head.num_classes,
            "label {y} out of range for {} identities",
            head.num_classes
        );
    }
    let logits = head.linear.forward(sess, embeddings);
    Ok(softmax_cross_entropy(logits, labels))
}

/// Mean over rows of `−log softmax(logits)[label]`, as a fused op with the
/// standard `(softmax − onehot)/N` backward.
pub fn softmax_cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Var<'t> {
    let lv = logits.value();
    let l2 = crate::nn::as2(&lv);
    let (n, j) = (l2.shape()[0], l2.shape()[1]);
    assert_eq!(n, labels.len());
    let mut probs = Array2::<f64>::zeros((n, j));
    let mut total = 0.0;
    for i in 0..n {
        let row = l2.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for c in 0..j {
            let e = (row[c] - m).exp();
            probs[[i, c]] = e;
            z += e;
        }
        for c in 0..j {
            probs[[i, c]] /= z;
        }
        total += z.ln() + m - row[labels[i]];
    }
    let labels = labels.to_vec();
    let id = logits.id();
    logits.tape_ref().push(
        scalar(total / n as f64),
        Some(Box::new(move |g, sink| {
            let gv = g[[]] / n as f64;
            let mut gl = probs.clone();
            for (i, &y) in labels.iter().enumerate() {
                gl[[i, y]] -= 1.0;
            }
            sink(id, gl.mapv(|v| v * gv).into_dyn());
        })),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TripletMode {
    HingeMargin,
    Softplus,
}

impl std::str::FromStr for TripletMode {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "hinge_margin" => Ok(TripletMode::HingeMargin),
            "softplus" => Ok(TripletMode::Softplus),
            other => anyhow::bail!("unknown triplet mode: {other:?} (expected hinge_margin|softplus)"),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TripletConfig {
    pub mode: TripletMode,
    pub margin: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig { mode: TripletMode::Softplus, margin: 0.3 }
    }
}

fn euclidean(e: &Array2<f64>, a: usize, b: usize) -> f64 {
    let mut s = 0.0;
    for d in 0..e.shape()[1] {
        let diff = e[[a, d]] - e[[b, d]];
        s += diff * diff;
    }
    s.sqrt()
}

/// Hardest positive / hardest negative indices per anchor, with ties broken
/// by the lowest batch index. Distances are Euclidean on raw embeddings.
pub fn mine_batch_hard(embeddings: &Array2<f64>, labels: &[usize]) -> Vec<(usize, usize)> {
    let n = embeddings.shape()[0];
    (0..n)
        .map(|a| {
            let mut hardest_pos = (0usize, f64::NEG_INFINITY);
            let mut hardest_neg = (0usize, f64::INFINITY);
            for b in 0..n {
                let d = euclidean(embeddings, a, b);
                if labels[b] == labels[a] {
                    if d > hardest_pos.1 {
                        hardest_pos = (b, d);
                    }
                } else if d < hardest_neg.1 {
                    hardest_neg = (b, d);
                }
            }
            (hardest_pos.0, hardest_neg.0)
        })
        .collect()
}

/// Batch-hard triplet loss over a P×K batch, averaged over anchors.
///
/// Requires at least two identities and at least two instances of every
/// identity so every anchor has a valid positive and negative.
pub fn triplet_loss_batch_hard<'t>(
    embeddings: Var<'t>,
    labels: &[usize],
    cfg: &TripletConfig,
) -> Result<Var<'t>> {
    ensure!(cfg.margin >= 0.0, "triplet margin must be nonnegative");
    let ev = embeddings.value();
    let e2 = crate::nn::as2(&ev).to_owned();
    let n = e2.shape()[0];
    ensure!(n == labels.len(), "embedding/label count mismatch");
    let mut counts = std::collections::HashMap::new();
    for &y in labels {
        *counts.entry(y).or_insert(0usize) += 1;
    }
    ensure!(counts.len() >= 2, "batch-hard mining needs at least 2 identities");
    for (&y, &k) in &counts {
        ensure!(k >= 2, "identity {y} has only {k} instance(s); need K >= 2");
    }

    let mined = mine_batch_hard(&e2, labels);
    let dim = e2.shape()[1];
    let mut total = 0.0;
    // Per-anchor weight on (d+ − d−) for the backward pass.
    let mut slopes = vec![0.0; n];
    for (a, &(p, q)) in mined.iter().enumerate() {
        let gap = euclidean(&e2, a, p) - euclidean(&e2, a, q);
        match cfg.mode {
            TripletMode::HingeMargin => {
                let v = cfg.margin + gap;
                if v > 0.0 {
                    total += v;
                    slopes[a] = 1.0;
                }
            }
            TripletMode::Softplus => {
                total += softplus(gap);
                slopes[a] = sigmoid(gap);
            }
        }
    }
    let mean = total / n as f64;

    let id = embeddings.id();
    Ok(embeddings.tape_ref().push(
        scalar(mean),
        Some(Box::new(move |g, sink| {
            let gv = g[[]] / n as f64;
            let mut gx = Array2::<f64>::zeros((n, dim));
            for (a, &(p, q)) in mined.iter().enumerate() {
                let s = slopes[a] * gv;
                if s == 0.0 {
                    continue;
                }
                // d(‖xa − xb‖)/dxa = (xa − xb)/‖·‖; zero at coincident points.
                for (b, sign) in [(p, 1.0), (q, -1.0)] {
                    let d = euclidean(&e2, a, b);
                    if d == 0.0 {
                        continue;
                    }
                    let w = sign * s / d;
                    for k in 0..dim {
                        let diff = e2[[a, k]] - e2[[b, k]];
                        gx[[a, k]] += w * diff;
                        gx[[b, k]] -= w * diff;
                    }
                }
            }
            sink(id, gx.into_dyn());
        })),
    ))
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Class centers plus their update rate.
pub struct CenterState {
    pub centers: Array2<f64>,
    pub center_lr: f64,
}

impl CenterState {
    pub fn new(num_classes: usize, dim: usize, center_lr: f64) -> Self {
        CenterState { centers: Array2::zeros((num_classes, dim)), center_lr }
    }
}

/// `(1/2)·Σᵢ ‖xᵢ − c_{yᵢ}‖²`. Centers are constants here; they move via
/// [`center_update`], not the main optimizer.
pub fn center_loss<'t>(
    embeddings: Var<'t>,
    labels: &[usize],
    centers: &Array2<f64>,
) -> Result<Var<'t>> {
    let ev = embeddings.value();
    let e2 = crate::nn::as2(&ev).to_owned();
    let (n, dim) = (e2.shape()[0], e2.shape()[1]);
    ensure!(n == labels.len(), "embedding/label count mismatch");
    ensure!(dim == centers.shape()[1], "center dim mismatch");
    for &y in labels {
        ensure!(y < centers.shape()[0], "label {y} out of center range");
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        for d in 0..dim {
            let diff = e2[[i, d]] - centers[[y, d]];
            total += diff * diff;
        }
    }
    let labels = labels.to_vec();
    let centers = centers.clone();
    let id = embeddings.id();
    Ok(embeddings.tape_ref().push(
        scalar(0.5 * total),
        Some(Box::new(move |g, sink| {
            let gv = g[[]];
            let mut gx = Array2::<f64>::zeros((n, dim));
            for (i, &y) in labels.iter().enumerate() {
                for d in 0..dim {
                    gx[[i, d]] = gv * (e2[[i, d]] - centers[[y, d]]);
                }
            }
            sink(id, gx.into_dyn());
        })),
    ))
}

/// Move each class center toward the mean of its samples in the batch:
/// `Δc_j = Σ_{i: yᵢ=j} (c_j − xᵢ) / (1 + |{i: yᵢ=j}|)`, `c_j ← c_j − lr·Δc_j`.
pub fn center_update(state: &mut CenterState, embeddings: &Array2<f64>, labels: &[usize]) {
    let dim = embeddings.shape()[1];
    let mut sums: std::collections::HashMap<usize, (Vec<f64>, usize)> = std::collections::HashMap::new();
    for (i, &y) in labels.iter().enumerate() {
        let entry = sums.entry(y).or_insert_with(|| (vec![0.0; dim], 0));
        for d in 0..dim {
            entry.0[d] += embeddings[[i, d]];
        }
        entry.1 += 1;
    }
    for (y, (sum, count)) in sums {
        let denom = 1.0 + count as f64;
        for d in 0..dim {
            let delta = (count as f64 * state.centers[[y, d]] - sum[d]) / denom;
            state.centers[[y, d]] -= state.center_lr * delta;
        }
    }
}

/// Weighting factors of the total objective.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub id: f64,
    pub triplet: f64,
    pub center: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { id: 1.0, triplet: 1.0, center: 5e-4 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.id >= 0.0 && self.triplet >= 0.0 && self.center >= 0.0,
            "loss weights must be nonnegative"
        );
        ensure!(
            self.id > 0.0 || self.triplet > 0.0 || self.center > 0.0,
            "at least one loss weight must be positive"
        );
        Ok(())
    }
}

/// Per-branch loss terms still on the tape.
pub struct BranchLossTerms<'t> {
    pub branch: BranchId,
    pub id: Option<Var<'t>>,
    pub triplet: Option<Var<'t>>,
    pub center: Option<Var<'t>>,
}

/// Loss values per branch, for logging.
#[derive(Clone, Debug, serde::Serialize)]
pub struct BranchLossValues {
    pub branch: String,
    pub id: f64,
    pub triplet: f64,
    pub center: f64,
}

/// The full breakdown emitted per training step.
#[derive(Clone, Debug, serde::Serialize)]
pub struct LossBreakdown {
    pub per_branch: Vec<BranchLossValues>,
    pub total: f64,
}

impl LossBreakdown {
    /// Name of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        for b in &self.per_branch {
            for (name, v) in [("id", b.id), ("triplet", b.triplet), ("center", b.center)] {
                if !v.is_finite() {
                    return Some(format!("{}.{name}", b.branch));
                }
            }
        }
        (!self.total.is_finite()).then(|| "total".to_string())
    }
}

/// `L = Σ_branches (λ₁·L_id + λ₂·L_triplet + λ₃·L_center)`.
pub fn total_loss<'t>(
    parts: &[BranchLossTerms<'t>],
    weights: &LossWeights,
) -> Result<(Var<'t>, LossBreakdown)> {
    ensure!(!parts.is_empty(), "no branches enabled");
    weights.validate()?;
    let mut terms: Vec<Var<'t>> = Vec::new();
    let mut per_branch = Vec::new();
    for part in parts {
        let mut record = BranchLossValues {
            branch: part.branch.to_string(),
            id: 0.0,
            triplet: 0.0,
            center: 0.0,
        };
        if let Some(v) = part.id {
            record.id = v.scalar();
            if weights.id != 0.0 {
                terms.push(v.scale(weights.id));
            }
        }
        if let Some(v) = part.triplet {
            record.triplet = v.scalar();
            if weights.triplet != 0.0 {
                terms.push(v.scale(weights.triplet));
            }
        }
        if let Some(v) = part.center {
            record.center = v.scalar();
            if weights.center != 0.0 {
                terms.push(v.scale(weights.center));
            }
        }
        per_branch.push(record);
    }
    ensure!(!terms.is_empty(), "all loss terms are disabled");
    let total = crate::autodiff::add_n(&terms);
    let breakdown = LossBreakdown { per_branch, total: total.scalar() };
    Ok((total, breakdown))
}

/// Constant-tensor helper for tests and callers assembling scalars.
pub fn const_scalar(tape: &crate::autodiff::Tape, v: f64) -> Var<'_> {
    tape.var(ArrayD::from_elem(IxDyn(&[]), v))
}
