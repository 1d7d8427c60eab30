//! Query/gallery retrieval metrics: distance matrix, CMC and mAP.
//!
//! Gallery entries sharing both identity and camera with the query are
//! dropped before ranking. Equal distances keep gallery order.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::semantic_fusion::EmbeddingRecord;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Query,
    Gallery,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Query => "query",
            Role::Gallery => "gallery",
        })
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" => Ok(Role::Query),
            "gallery" => Ok(Role::Gallery),
            _ => Err(Error::Data(format!("unknown role `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

/// Embeddings with their labels, one row per tracklet.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    /// `[M × d]`
    pub embeddings: Tensor,
    pub identities: Vec<u32>,
    pub cameras: Vec<u32>,
}

impl EmbeddingSet {
    pub fn new(rows: Vec<Vec<f64>>, identities: Vec<u32>, cameras: Vec<u32>) -> Result<Self> {
        let m = rows.len();
        if identities.len() != m || cameras.len() != m {
            return Err(Error::Data(format!(
                "{m} embeddings but {} identities and {} cameras",
                identities.len(),
                cameras.len()
            )));
        }
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Data("embeddings differ in dimension".into()));
        }
        let embeddings = Tensor::new([m, d], rows.into_iter().flatten().collect())?;
        Ok(Self {
            embeddings,
            identities,
            cameras,
        })
    }

    /// Rows of `records` having `role`, in order.
    pub fn from_records(records: &[EmbeddingRecord], role: Role) -> Result<Self> {
        let picked: Vec<&EmbeddingRecord> = records.iter().filter(|r| r.role == role).collect();
        Self::new(
            picked.iter().map(|r| r.embedding.clone()).collect(),
            picked.iter().map(|r| r.identity).collect(),
            picked.iter().map(|r| r.camera).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }
}

/// Pairwise distances `[Nq × Ng]`. Cosine distance is `1 − cos`, taken as 1
/// when either vector is zero.
pub fn distance_matrix(q: &Tensor, g: &Tensor, metric: Metric) -> Result<Tensor> {
    let (sq, sg) = (q.shape(), g.shape());
    if sq.len() != 2 || sg.len() != 2 || sq[1] != sg[1] {
        return Err(Error::Shape {
            op: "distance_matrix",
            expected: vec![sg.first().copied().unwrap_or(0), sq.get(1).copied().unwrap_or(0)],
            actual: sg.to_vec(),
        });
    }
    let (nq, ng, d) = (sq[0], sg[0], sq[1]);
    fn row(t: &Tensor, i: usize, d: usize) -> &[f64] {
        &t.data()[i * d..(i + 1) * d]
    }
    let mut out = Vec::with_capacity(nq * ng);
    for i in 0..nq {
        let a = row(q, i, d);
        for j in 0..ng {
            let b = row(g, j, d);
            out.push(match metric {
                Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
                Metric::Cosine => {
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if na == 0.0 || nb == 0.0 {
                        1.0
                    } else {
                        1.0 - dot / (na * nb)
                    }
                }
            });
        }
    }
    Ok(Tensor::new([nq, ng], out)?)
}

/// Labels of one side of a retrieval problem.
#[derive(Clone, Copy, Debug)]
pub struct Labels<'a> {
    pub identities: &'a [u32],
    pub cameras: &'a [u32],
}

impl<'a> Labels<'a> {
    pub fn of(set: &'a EmbeddingSet) -> Self {
        Self {
            identities: &set.identities,
            cameras: &set.cameras,
        }
    }
}

/// For each query, the relevance (true = same identity) of the ranked
/// gallery after camera exclusion; `None` when no relevant item remains.
fn ranked_relevance(dist: &Tensor, q: Labels, g: Labels) -> Result<Vec<Option<Vec<bool>>>> {
    let s = dist.shape();
    if s.len() != 2
        || s[0] != q.identities.len()
        || s[0] != q.cameras.len()
        || s[1] != g.identities.len()
        || s[1] != g.cameras.len()
    {
        return Err(Error::Shape {
            op: "rank",
            expected: vec![q.identities.len(), g.identities.len()],
            actual: s.to_vec(),
        });
    }
    let (nq, ng) = (s[0], s[1]);
    if nq == 0 || ng == 0 {
        return Err(Error::EmptyTestSet);
    }
    let d = dist.data();
    Ok((0..nq)
        .map(|i| {
            let (id, cam) = (q.identities[i], q.cameras[i]);
            let mut order: Vec<usize> = (0..ng)
                .filter(|&j| !(g.identities[j] == id && g.cameras[j] == cam))
                .collect();
            order.sort_by(|&a, &b| d[i * ng + a].total_cmp(&d[i * ng + b]));
            let rel: Vec<bool> = order.iter().map(|&j| g.identities[j] == id).collect();
            rel.contains(&true).then_some(rel)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmcResult {
    /// `(k, accuracy)` for each requested rank.
    pub accuracies: Vec<(usize, f64)>,
    pub valid_queries: usize,
    /// Queries without any cross-camera match, left out of the averages.
    pub excluded_queries: usize,
}

impl CmcResult {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.accuracies.iter().find(|(r, _)| *r == k).map(|&(_, a)| a)
    }
}

/// Fraction of valid queries whose first correct match is within the top k.
pub fn cmc(dist: &Tensor, q: Labels, g: Labels, ranks: &[usize]) -> Result<CmcResult> {
    let rel = ranked_relevance(dist, q, g)?;
    let firsts: Vec<usize> = rel
        .iter()
        .flatten()
        .map(|r| r.iter().position(|&x| x).expect("has a match"))
        .collect();
    if firsts.is_empty() {
        return Err(Error::NoValidQueries);
    }
    let n = firsts.len() as f64;
    let accuracies = ranks
        .iter()
        .map(|&k| (k, firsts.iter().filter(|&&p| p < k).count() as f64 / n))
        .collect();
    Ok(CmcResult {
        accuracies,
        valid_queries: firsts.len(),
        excluded_queries: rel.len() - firsts.len(),
    })
}

/// Mean over valid queries of the average precision of their ranked list.
pub fn mean_average_precision(dist: &Tensor, q: Labels, g: Labels) -> Result<f64> {
    let rel = ranked_relevance(dist, q, g)?;
    let aps: Vec<f64> = rel.iter().flatten().map(|r| average_precision(r)).collect();
    if aps.is_empty() {
        return Err(Error::NoValidQueries);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

fn average_precision(relevance: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (pos, _) in relevance.iter().enumerate().filter(|(_, &r)| r) {
        hits += 1;
        total += hits as f64 / (pos + 1) as f64;
    }
    total / hits as f64
}

pub const DEFAULT_RANKS: [usize; 4] = [1, 5, 10, 20];

/// Result of a full query/gallery evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub map: f64,
    pub ranks: Vec<(usize, f64)>,
    pub valid_queries: usize,
    pub excluded_queries: usize,
}

impl Report {
    pub fn rank(&self, k: usize) -> Option<f64> {
        self.ranks.iter().find(|(r, _)| *r == k).map(|&(_, a)| a)
    }

    /// Human-readable table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<10} {:>8}", "metric", "value").unwrap();
        writeln!(s, "{:<10} {:>8.2}", "mAP", 100.0 * self.map).unwrap();
        for (k, a) in &self.ranks {
            writeln!(s, "{:<10} {:>8.2}", format!("rank-{k}"), 100.0 * a).unwrap();
        }
        writeln!(s, "{:<10} {:>8}", "queries", self.valid_queries).unwrap();
        writeln!(s, "{:<10} {:>8}", "excluded", self.excluded_queries).unwrap();
        s
    }

    /// `key=value` lines for scripts.
    pub fn key_values(&self) -> String {
        let mut s = format!("map={}\n", self.map);
        for (k, a) in &self.ranks {
            writeln!(s, "rank{k}={a}").unwrap();
        }
        writeln!(s, "excluded_queries={}", self.excluded_queries).unwrap();
        s
    }
}

pub fn evaluate(query: &EmbeddingSet, gallery: &EmbeddingSet, metric: Metric, ranks: &[usize]) -> Result<Report> {
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let dist = distance_matrix(&query.embeddings, &gallery.embeddings, metric)?;
    let (q, g) = (Labels::of(query), Labels::of(gallery));
    let c = cmc(&dist, q, g, ranks)?;
    if c.excluded_queries > 0 {
        log::warn!("{} queries have no cross-camera match and were skipped", c.excluded_queries);
    }
    Ok(Report {
        map: mean_average_precision(&dist, q, g)?,
        ranks: c.accuracies,
        valid_queries: c.valid_queries,
        excluded_queries: c.excluded_queries,
    })
}
