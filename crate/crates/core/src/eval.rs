//! Retrieval evaluation under the cross-camera protocol.
//!
//! Gallery entries sharing both identity and camera with a query are
//! removed from that query's ranking. Ranking is by ascending squared
//! Euclidean distance with ties broken by gallery index.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::csl::{top_k, MemoryBank};
use crate::error::{PatError, Result};
use crate::tensor::{Real, Tensor};

/// Identity and camera of one query or gallery sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: usize,
    pub camera: usize,
}

#[derive(Clone, Debug)]
pub struct RetrievalResult {
    pub num_query: usize,
    pub num_gallery: usize,
    /// `Q x G` squared Euclidean distances.
    pub distances: Tensor<f64>,
    /// `valid[q][g]` is false for same-identity same-camera pairs.
    pub valid: Vec<Vec<bool>>,
    /// Queries with at least one valid positive.
    pub num_valid_query: usize,
    pub map: f64,
    /// `cmc[r]` is the Rank-(r+1) matching rate.
    pub cmc: Vec<f64>,
    /// Per-query AP, `None` for queries without a valid positive.
    pub ap: Vec<Option<f64>>,
}

impl RetrievalResult {
    /// Rank-`r` accuracy (1-based); saturates past the curve's end.
    pub fn rank(&self, r: usize) -> f64 {
        let i = r.clamp(1, self.cmc.len().max(1)) - 1;
        self.cmc.get(i).copied().unwrap_or(0.0)
    }

    pub fn to_json(&self) -> MetricsJson {
        let mut cmc = BTreeMap::new();
        for r in [1usize, 5, 10] {
            cmc.insert(r.to_string(), self.rank(r));
        }
        MetricsJson {
            map: self.map,
            cmc,
            num_query: self.num_query,
            num_gallery: self.num_gallery,
        }
    }
}

/// `{"mAP": .., "cmc": {"1": .., "5": .., "10": ..}, "num_query": .., "num_gallery": ..}`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsJson {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub cmc: BTreeMap<String, f64>,
    pub num_query: usize,
    pub num_gallery: usize,
}

pub fn squared_distances<T: Real>(query: &Tensor<T>, gallery: &Tensor<T>) -> Result<Tensor<f64>> {
    if query.cols() != gallery.cols() {
        return Err(PatError::shape("distance", query.dims(), gallery.dims()));
    }
    let (q, g) = (query.rows(), gallery.rows());
    let mut d = Vec::with_capacity(q * g);
    for i in 0..q {
        let a = query.row(i);
        for j in 0..g {
            let b = gallery.row(j);
            d.push(
                a.iter()
                    .zip(b)
                    .map(|(&x, &y)| {
                        let t = x.f64() - y.f64();
                        t * t
                    })
                    .sum(),
            );
        }
    }
    Tensor::new(vec![q, g], d)
}

/// mAP and CMC of ranking `gallery` for every query.
pub fn compute_metrics<T: Real>(
    query: &Tensor<T>,
    query_meta: &[SampleMeta],
    gallery: &Tensor<T>,
    gallery_meta: &[SampleMeta],
) -> Result<RetrievalResult> {
    if query.rows() != query_meta.len() || gallery.rows() != gallery_meta.len() {
        return Err(PatError::config("feature rows and metadata disagree"));
    }
    let distances = squared_distances(query, gallery)?;
    let (nq, ng) = (query.rows(), gallery.rows());
    let mut cmc_hits = vec![0usize; ng];
    let mut ap = Vec::with_capacity(nq);
    let mut valid = Vec::with_capacity(nq);
    for (qi, qm) in query_meta.iter().enumerate() {
        let mask: Vec<bool> = gallery_meta
            .iter()
            .map(|gm| !(gm.id == qm.id && gm.camera == qm.camera))
            .collect();
        let row = distances.row(qi);
        let mut order: Vec<usize> = (0..ng).filter(|&g| mask[g]).collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let matches: Vec<bool> = order.iter().map(|&g| gallery_meta[g].id == qm.id).collect();
        let positives = matches.iter().filter(|&&m| m).count();
        valid.push(mask);
        if positives == 0 {
            ap.push(None);
            continue;
        }
        let first = matches.iter().position(|&m| m).expect("has a positive");
        for h in cmc_hits.iter_mut().skip(first) {
            *h += 1;
        }
        let mut hits = 0usize;
        let mut sum_precision = 0.0;
        for (rank, &m) in matches.iter().enumerate() {
            if m {
                hits += 1;
                sum_precision += hits as f64 / (rank + 1) as f64;
            }
        }
        ap.push(Some(sum_precision / positives as f64));
    }
    let num_valid_query = ap.iter().flatten().count();
    if num_valid_query == 0 {
        return Err(PatError::Protocol(
            "no query has a valid positive in the gallery".into(),
        ));
    }
    let map = ap.iter().flatten().sum::<f64>() / num_valid_query as f64;
    let cmc = cmc_hits
        .iter()
        .map(|&h| h as f64 / num_valid_query as f64)
        .collect();
    Ok(RetrievalResult {
        num_query: nq,
        num_gallery: ng,
        distances,
        valid,
        num_valid_query,
        map,
        cmc,
        ap,
    })
}

/// One row of a part-feature ranking list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub index: usize,
    pub score: f64,
    pub id: usize,
}

/// The `top_n` bank rows closest (cosine) to `feature`, self excluded.
pub fn ranking_list<T: Real>(
    bank: &MemoryBank<T>,
    part: usize,
    feature: &[T],
    self_index: Option<usize>,
    top_n: usize,
) -> Result<Vec<RankedEntry>> {
    if !bank.is_initialized() {
        return Err(PatError::State("ranking against an uninitialized bank".into()));
    }
    if top_n == 0 || top_n >= bank.len() {
        return Err(PatError::config(format!(
            "top_n = {top_n} must satisfy 0 < top_n < K = {}",
            bank.len()
        )));
    }
    let scores = bank.similarities(part, feature)?;
    Ok(top_k(&scores, top_n, self_index)
        .into_iter()
        .map(|(index, s)| RankedEntry {
            index,
            score: s.f64(),
            id: bank.ids()[index],
        })
        .collect())
}
