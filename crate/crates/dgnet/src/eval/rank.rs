//! Single-query retrieval protocol: Euclidean distance on L2-normalized
//! embeddings, same-identity same-camera entries and junk entries excluded
//! per query, CMC and mean average precision over the evaluated queries.

use super::embeddings::{l2_normalize_rows, EmbeddingSet};
use crate::error::{DgError, Result};

#[derive(Clone, Debug)]
pub struct RetrievalResult {
    /// `cmc[k]` is the fraction of queries whose first correct match
    /// appears within the top k+1.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Per evaluated query, in query order.
    pub ap: Vec<f64>,
    /// Queries dropped for lack of any valid positive.
    pub skipped: usize,
}

impl RetrievalResult {
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }
}

/// Rank every query against the gallery. `topk` bounds the CMC vector
/// (clamped to the gallery size).
pub fn rank_queries(
    query: &EmbeddingSet,
    gallery: &EmbeddingSet,
    topk: usize,
) -> Result<RetrievalResult> {
    if query.is_empty() || gallery.is_empty() {
        return Err(DgError::Data("ranking needs non-empty query and gallery sets".into()));
    }
    if query.vecs.ncols() != gallery.vecs.ncols() {
        return Err(DgError::Shape {
            ctx: "rank_queries".into(),
            expected: format!("embedding dim {}", query.vecs.ncols()),
            got: format!("{}", gallery.vecs.ncols()),
        });
    }
    let mut q = query.vecs.clone();
    let mut g = gallery.vecs.clone();
    l2_normalize_rows(&mut q);
    l2_normalize_rows(&mut g);

    let depth = topk.min(gallery.len()).max(1);
    let mut cmc_acc = vec![0f64; depth];
    let mut aps = Vec::new();
    let mut skipped = 0usize;

    for qi in 0..query.len() {
        if query.pids[qi] < 0 {
            log::warn!("query {} has a junk identity; skipped", query.paths[qi]);
            skipped += 1;
            continue;
        }
        // Valid gallery entries: labeled, and not the query's own
        // identity seen from the query's own camera.
        let mut order: Vec<usize> = (0..gallery.len())
            .filter(|&gi| {
                gallery.pids[gi] >= 0
                    && !(gallery.pids[gi] == query.pids[qi] && gallery.cams[gi] == query.cams[qi])
            })
            .collect();
        let has_positive = order.iter().any(|&gi| gallery.pids[gi] == query.pids[qi]);
        if !has_positive {
            log::warn!(
                "query {} has no valid positive in the gallery; skipped",
                query.paths[qi]
            );
            skipped += 1;
            continue;
        }
        let dist = |gi: usize| -> f64 {
            let mut s = 0.0;
            for j in 0..q.ncols() {
                let d = q[[qi, j]] - g[[gi, j]];
                s += d * d;
            }
            s
        };
        let d: Vec<f64> = (0..gallery.len()).map(dist).collect();
        // Deterministic: ties broken by gallery index.
        order.sort_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap().then(a.cmp(&b)));

        let total_good = order.iter().filter(|&&gi| gallery.pids[gi] == query.pids[qi]).count();
        let mut hits = 0usize;
        let mut ap = 0.0;
        let mut first_hit = None;
        for (rank, &gi) in order.iter().enumerate() {
            if gallery.pids[gi] == query.pids[qi] {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
                if first_hit.is_none() {
                    first_hit = Some(rank);
                }
            }
        }
        ap /= total_good as f64;
        aps.push(ap);
        if let Some(r) = first_hit {
            for k in r..depth {
                cmc_acc[k] += 1.0;
            }
        }
    }

    if aps.is_empty() {
        return Err(DgError::Data("every query was skipped; nothing to rank".into()));
    }
    let n = aps.len() as f64;
    let cmc: Vec<f64> = cmc_acc.into_iter().map(|v| v / n).collect();
    let map = aps.iter().sum::<f64>() / n;
    Ok(RetrievalResult { cmc, map, ap: aps, skipped })
}
