//! Retrieval protocol: feature extraction, distance matrices, and mAP / CMC
//! with junk and same-camera filtering.

use crate::data::{ImageProvider, PersonImageRecord};
use crate::model::{RegConfig, ReidModel};
use crate::nn::Session;
use anyhow::{bail, ensure, Result};
use ndarray::{Array2, Axis};
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceKind {
    Euclidean,
    Cosine,
}

impl std::str::FromStr for DistanceKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "euclidean" => Ok(DistanceKind::Euclidean),
            "cosine" => Ok(DistanceKind::Cosine),
            other => bail!("unknown distance: {other:?} (expected euclidean|cosine)"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub distance: DistanceKind,
    pub normalize: bool,
    pub batch_size: usize,
    pub max_rank: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            distance: DistanceKind::Euclidean,
            normalize: true,
            batch_size: 32,
            max_rank: 20,
        }
    }
}

/// Eval-mode forward over records; the per-branch post-neck features are
/// concatenated and optionally L2-normalized per row.
pub fn extract_features(
    model: &ReidModel,
    provider: &dyn ImageProvider,
    records: &[&PersonImageRecord],
    opts: &EvalOptions,
) -> Result<Array2<f64>> {
    ensure!(!records.is_empty(), "no records to extract");
    let dim = model.cfg.embedding_dim();
    let mut features = Array2::<f64>::zeros((records.len(), dim));
    let reg = RegConfig::default();
    for (start, chunk) in records.chunks(opts.batch_size.max(1)).enumerate() {
        let images = crate::data::load_batch(provider, chunk)?;
        let tape = crate::autodiff::Tape::new();
        let sess = Session::new(&tape, &model.store, false);
        let out = model.forward(&sess, &images, &reg, None)?;
        let mut col = 0;
        for bf in &out.branches {
            let value = bf.neck_out.value();
            let block = crate::nn::as2(&value);
            let width = block.shape()[1];
            for (i, row) in block.rows().into_iter().enumerate() {
                let r = start * opts.batch_size.max(1) + i;
                features.slice_mut(ndarray::s![r, col..col + width]).assign(&row);
            }
            col += width;
        }
    }
    if opts.normalize {
        for mut row in features.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.mapv_inplace(|v| v / norm);
            }
        }
    }
    Ok(features)
}

/// Distance matrix `[num_query, num_gallery]`.
pub fn pairwise_distances(
    query: &Array2<f64>,
    gallery: &Array2<f64>,
    kind: DistanceKind,
) -> Result<Array2<f64>> {
    ensure!(
        query.shape()[1] == gallery.shape()[1],
        "feature dim mismatch: query {} vs gallery {}",
        query.shape()[1],
        gallery.shape()[1]
    );
    let (nq, ng) = (query.shape()[0], gallery.shape()[0]);
    let mut out = Array2::<f64>::zeros((nq, ng));
    match kind {
        DistanceKind::Euclidean => {
            for i in 0..nq {
                for j in 0..ng {
                    let mut s = 0.0;
                    for d in 0..query.shape()[1] {
                        let diff = query[[i, d]] - gallery[[j, d]];
                        s += diff * diff;
                    }
                    out[[i, j]] = s.sqrt();
                }
            }
        }
        DistanceKind::Cosine => {
            let norms = |m: &Array2<f64>| -> Vec<f64> {
                m.axis_iter(Axis(0))
                    .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect()
            };
            let qn = norms(query);
            let gn = norms(gallery);
            for i in 0..nq {
                for j in 0..ng {
                    let dot: f64 = (0..query.shape()[1])
                        .map(|d| query[[i, d]] * gallery[[j, d]])
                        .sum();
                    let denom = qn[i] * gn[j];
                    let sim = if denom > 0.0 { dot / denom } else { 0.0 };
                    out[[i, j]] = 1.0 - sim;
                }
            }
        }
    }
    Ok(out)
}

/// Identity and camera annotations needed by the protocol.
#[derive(Clone, Copy, Debug)]
pub struct EvalMeta {
    pub person_id: i32,
    pub camera_id: u32,
}

impl From<&PersonImageRecord> for EvalMeta {
    fn from(r: &PersonImageRecord) -> Self {
        EvalMeta { person_id: r.person_id, camera_id: r.camera_id }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RetrievalResult {
    pub map: f64,
    /// `cmc[k]` is the rank-(k+1) accuracy.
    pub cmc: Vec<f64>,
    pub rank1: f64,
    pub per_query_ap: Vec<Option<f64>>,
    pub num_query: usize,
    pub num_gallery: usize,
    /// Queries with no valid cross-camera positive, excluded from the mAP
    /// denominator.
    pub skipped_queries: usize,
}

/// Single-query protocol: per query, drop junk gallery entries and entries
/// sharing both identity and camera with the query; rank the rest by
/// `(distance, gallery index)`; AP over relevant ranks, CMC over the top-k.
pub fn evaluate(
    query: &[EvalMeta],
    gallery: &[EvalMeta],
    distances: &Array2<f64>,
    max_rank: usize,
) -> Result<RetrievalResult> {
    ensure!(!query.is_empty() && !gallery.is_empty(), "empty query or gallery set");
    ensure!(
        distances.shape() == [query.len(), gallery.len()],
        "distance matrix shape {:?} does not match {} queries x {} gallery",
        distances.shape(),
        query.len(),
        gallery.len()
    );
    ensure!(
        distances.iter().all(|v| v.is_finite()),
        "non-finite values in the distance matrix"
    );
    let max_rank = max_rank.max(1);

    let mut per_query_ap = Vec::with_capacity(query.len());
    let mut cmc_hits = vec![0usize; max_rank];
    let mut evaluated = 0usize;
    let mut ap_sum = 0.0;

    for (qi, q) in query.iter().enumerate() {
        // Filter, then rank by (distance, index) for deterministic ties.
        let mut candidates: Vec<usize> = (0..gallery.len())
            .filter(|&gj| {
                let g = &gallery[gj];
                if g.person_id < 0 {
                    return false; // junk
                }
                !(g.person_id == q.person_id && g.camera_id == q.camera_id)
            })
            .collect();
        candidates.sort_by(|&a, &b| {
            distances[[qi, a]]
                .partial_cmp(&distances[[qi, b]])
                .unwrap()
                .then(a.cmp(&b))
        });

        let is_relevant =
            |gj: usize| q.person_id > 0 && gallery[gj].person_id == q.person_id;
        let num_relevant = candidates.iter().filter(|&&gj| is_relevant(gj)).count();
        if num_relevant == 0 {
            per_query_ap.push(None);
            continue;
        }
        evaluated += 1;

        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first_hit_rank = None;
        for (rank0, &gj) in candidates.iter().enumerate() {
            if is_relevant(gj) {
                hits += 1;
                precision_sum += hits as f64 / (rank0 + 1) as f64;
                first_hit_rank.get_or_insert(rank0);
            }
        }
        let ap = precision_sum / num_relevant as f64;
        ap_sum += ap;
        per_query_ap.push(Some(ap));
        if let Some(first) = first_hit_rank {
            for k in first..max_rank {
                cmc_hits[k] += 1;
            }
        }
    }
    ensure!(evaluated > 0, "no query has a valid cross-camera positive");

    let cmc: Vec<f64> = cmc_hits.iter().map(|&h| h as f64 / evaluated as f64).collect();
    Ok(RetrievalResult {
        map: ap_sum / evaluated as f64,
        rank1: cmc[0],
        cmc,
        num_query: query.len(),
        num_gallery: gallery.len(),
        skipped_queries: query.len() - evaluated,
        per_query_ap,
    })
}

/// Extract features for both sets and run the full protocol.
pub fn evaluate_retrieval(
    model: &ReidModel,
    provider: &dyn ImageProvider,
    query: &[&PersonImageRecord],
    gallery: &[&PersonImageRecord],
    opts: &EvalOptions,
) -> Result<RetrievalResult> {
    let qf = extract_features(model, provider, query, opts)?;
    let gf = extract_features(model, provider, gallery, opts)?;
    let dist = pairwise_distances(&qf, &gf, opts.distance)?;
    let qm: Vec<EvalMeta> = query.iter().map(|&r| r.into()).collect();
    let gm: Vec<EvalMeta> = gallery.iter().map(|&r| r.into()).collect();
    evaluate(&qm, &gm, &dist, opts.max_rank)
}
