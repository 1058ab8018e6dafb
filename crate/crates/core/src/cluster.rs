//! Hard clustering (projector head or k-means), query assignment, the
//! cluster-containment retrieval metric and stage timing.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projector::{self, ProjectorParams};
use crate::rng::{substream, Substream};
use crate::store::{EmbeddingMatrix, Pair};

pub const DEFAULT_CLUSTERS: usize = 128;
pub const KMEANS_MAX_ITER: usize = 300;
pub const KMEANS_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterKind {
    Head,
    KMeans,
}

impl ClusterKind {
    pub fn name(self) -> &'static str {
        match self {
            ClusterKind::Head => "head",
            ClusterKind::KMeans => "kmeans",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub kind: ClusterKind,
    pub k: usize,
    /// `dim × k`, k-means only.
    pub centroids: Option<Array2<f64>>,
    pub labels: Vec<usize>,
    /// Inertia after every assignment step (k-means only).
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    /// Number of times an empty cluster was reseeded.
    pub empty_repairs: usize,
}

impl ClusterModel {
    pub fn inertia(&self) -> Option<f64> {
        self.inertia_history.last().copied()
    }
}

fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid and its squared distance; ties go to the lowest index.
fn nearest(point: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.axis_iter(Axis(1)).enumerate() {
        let d = squared_distance(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign_all(x: &ArrayView2<f64>, centroids: &Array2<f64>) -> Vec<(usize, f64)> {
    let points: Vec<ArrayView1<f64>> = x.axis_iter(Axis(1)).collect();
    points.into_par_iter().map(|p| nearest(p, centroids)).collect()
}

fn kmeans_plus_plus(x: &ArrayView2<f64>, k: usize, rng: &mut impl Rng) -> Array2<f64> {
    let (d, n) = x.dim();
    let mut centroids = Array2::<f64>::zeros((d, k));
    let first = rng.gen_range(0..n);
    centroids.column_mut(0).assign(&x.column(first));
    let mut closest: Vec<f64> = x
        .axis_iter(Axis(1))
        .map(|p| squared_distance(p, x.column(first)))
        .collect();
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, w) in closest.iter().enumerate() {
                acc += w;
                if acc > target && *w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.column_mut(c).assign(&x.column(pick));
        for (i, p) in x.axis_iter(Axis(1)).enumerate() {
            let dist = squared_distance(p, x.column(pick));
            if dist < closest[i] {
                closest[i] = dist;
            }
        }
    }
    centroids
}

/// Lloyd's algorithm from a k-means++ start; stops once the summed squared
/// centroid shift drops below [`KMEANS_TOL`] or after [`KMEANS_MAX_ITER`] rounds.
pub fn kmeans(x: ArrayView2<f64>, k: usize, seed: u64) -> Result<ClusterModel> {
    let (d, n) = x.dim();
    if n == 0 || d == 0 {
        return Err(Error::DegenerateInput("k-means on an empty matrix".into()));
    }
    if k == 0 || k > n {
        return Err(Error::DegenerateInput(format!("k = {k} for {n} points")));
    }
    let mut rng = substream(seed, Substream::KMeans);
    let mut centroids = kmeans_plus_plus(&x, k, &mut rng);
    let mut inertia_history = Vec::new();
    let mut empty_repairs = 0;
    let mut iterations = 0;

    let mut assignment = assign_all(&x, &centroids);
    inertia_history.push(assignment.iter().map(|a| a.1).sum());
    loop {
        iterations += 1;
        let mut sums = Array2::<f64>::zeros((d, k));
        let mut counts = vec![0usize; k];
        for (i, (c, _)) in assignment.iter().enumerate() {
            let mut col = sums.column_mut(*c);
            col += &x.column(i);
            counts[*c] += 1;
        }
        let mut next = centroids.clone();
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                let mean = sums.column(c).mapv(|v| v / counts[c] as f64);
                next.column_mut(c).assign(&mean);
            } else {
                // reseed to the point currently farthest from its centroid
                let mut far = None;
                for (i, (_, dist)) in assignment.iter().enumerate() {
                    if taken[i] {
                        continue;
                    }
                    match far {
                        Some((_, best)) if *dist <= best => {}
                        _ => far = Some((i, *dist)),
                    }
                }
                if let Some((i, _)) = far {
                    taken[i] = true;
                    next.column_mut(c).assign(&x.column(i));
                    empty_repairs += 1;
                }
            }
        }
        let shift: f64 = next
            .axis_iter(Axis(1))
            .zip(centroids.axis_iter(Axis(1)))
            .map(|(a, b)| squared_distance(a, b))
            .sum();
        centroids = next;
        assignment = assign_all(&x, &centroids);
        inertia_history.push(assignment.iter().map(|a| a.1).sum());
        if shift < KMEANS_TOL || iterations >= KMEANS_MAX_ITER {
            break;
        }
    }
    Ok(ClusterModel {
        kind: ClusterKind::KMeans,
        k,
        centroids: Some(centroids),
        labels: assignment.into_iter().map(|a| a.0).collect(),
        inertia_history,
        iterations,
        empty_repairs,
    })
}

/// Labels for backbone vectors `z` from the projector's cluster head.
pub fn head_model(params: &ProjectorParams, z: ArrayView2<f64>) -> Result<ClusterModel> {
    Ok(ClusterModel {
        kind: ClusterKind::Head,
        k: params.k(),
        centroids: None,
        labels: projector::infer_memberships(params, z)?,
        inertia_history: Vec::new(),
        iterations: 0,
        empty_repairs: 0,
    })
}

/// Cluster for one query. Head models take the backbone vector and need the
/// projector; k-means models take a vector in the centroid space.
pub fn assign_query(
    model: &ClusterModel,
    q: ArrayView1<f64>,
    params: Option<&ProjectorParams>,
) -> Result<usize> {
    match model.kind {
        ClusterKind::Head => {
            let params = params.ok_or_else(|| {
                Error::InvalidConfig("head cluster assignment needs projector parameters".into())
            })?;
            let z = q.insert_axis(Axis(1));
            Ok(projector::infer_memberships(params, z)?[0])
        }
        ClusterKind::KMeans => {
            let centroids = model
                .centroids
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("k-means model without centroids".into()))?;
            if q.len() != centroids.nrows() {
                return Err(Error::ShapeMismatch(format!(
                    "query dim {} vs centroid dim {}",
                    q.len(),
                    centroids.nrows()
                )));
            }
            Ok(nearest(q, centroids).0)
        }
    }
}

/// Fraction of `(query, duplicate)` pairs whose duplicate's corpus label equals
/// the label assigned to the query.
pub fn retrieval_accuracy(
    corpus_labels: &[usize],
    queries: &[(usize, usize)],
    query_labels: &[usize],
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::DegenerateInput("no queries".into()));
    }
    let mut hits = 0usize;
    for &(q, dup) in queries {
        let ql = *query_labels.get(q).ok_or(Error::IndexOutOfRange {
            index: q,
            count: query_labels.len(),
        })?;
        let dl = *corpus_labels.get(dup).ok_or(Error::IndexOutOfRange {
            index: dup,
            count: corpus_labels.len(),
        })?;
        if ql == dl {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub encode_seconds: f64,
    pub cluster_seconds: f64,
    pub total_seconds: f64,
}

/// Run `encode` then `cluster` on its output, timing each stage and the whole.
pub fn timed_pipeline<A, B>(
    encode: impl FnOnce() -> Result<A>,
    cluster: impl FnOnce(A) -> Result<B>,
) -> Result<(B, TimingReport)> {
    let start = Instant::now();
    let encoded = encode()?;
    let encode_seconds = start.elapsed().as_secs_f64();
    let mid = Instant::now();
    let out = cluster(encoded)?;
    let cluster_seconds = mid.elapsed().as_secs_f64();
    let total_seconds = start.elapsed().as_secs_f64();
    Ok((
        out,
        TimingReport {
            encode_seconds,
            cluster_seconds,
            total_seconds,
        },
    ))
}

/// One line of the retrieval report CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrRow {
    pub method: String,
    pub dim: usize,
    pub k: usize,
    pub accuracy: f64,
    pub encode_s: f64,
    pub cluster_s: f64,
    pub total_s: f64,
}

/// How a retrieval corpus/query split is laid out over one embedding matrix:
/// every pair is `(query, duplicate)` and the corpus is every column that is
/// not a query.
#[derive(Debug, Clone)]
pub struct RetrievalSplit {
    pub corpus: Vec<usize>,
    pub queries: Vec<usize>,
    /// `(position in queries, position in corpus)`
    pub targets: Vec<(usize, usize)>,
}

impl RetrievalSplit {
    pub fn new(count: usize, pairs: &[Pair]) -> Result<Self> {
        let mut is_query = vec![false; count];
        for p in pairs {
            for index in [p.a, p.b] {
                if index >= count {
                    return Err(Error::IndexOutOfRange { index, count });
                }
            }
            is_query[p.a] = true;
        }
        let mut corpus_pos = vec![usize::MAX; count];
        let mut corpus = Vec::new();
        for (i, q) in is_query.iter().enumerate() {
            if !q {
                corpus_pos[i] = corpus.len();
                corpus.push(i);
            }
        }
        let mut query_pos = vec![usize::MAX; count];
        let mut queries = Vec::new();
        let mut targets = Vec::with_capacity(pairs.len());
        for p in pairs {
            if corpus_pos[p.b] == usize::MAX {
                return Err(Error::DegenerateInput(format!(
                    "duplicate {} of query {} is itself a query",
                    p.b, p.a
                )));
            }
            if query_pos[p.a] == usize::MAX {
                query_pos[p.a] = queries.len();
                queries.push(p.a);
            }
            targets.push((query_pos[p.a], corpus_pos[p.b]));
        }
        if corpus.is_empty() {
            return Err(Error::DegenerateInput("empty retrieval corpus".into()));
        }
        Ok(RetrievalSplit {
            corpus,
            queries,
            targets,
        })
    }
}

/// Head clustering: encode (trunk + feature head) is timed separately from
/// label computation on the cluster head.
pub fn evaluate_head(
    embeddings: &EmbeddingMatrix,
    split: &RetrievalSplit,
    params: &ProjectorParams,
) -> Result<SrRow> {
    let corpus = embeddings.gather_f64(&split.corpus);
    let queries = embeddings.gather_f64(&split.queries);
    let ((corpus_labels, query_labels), timing) = timed_pipeline(
        || {
            let hc = projector::hidden(params, corpus.view())?;
            let hq = projector::hidden(params, queries.view())?;
            projector::features_from_hidden(params, hc.view())?;
            projector::features_from_hidden(params, hq.view())?;
            Ok((hc, hq))
        },
        |(hc, hq)| {
            Ok((
                projector::labels_from_hidden(params, hc.view()),
                projector::labels_from_hidden(params, hq.view()),
            ))
        },
    )?;
    let accuracy = retrieval_accuracy(&corpus_labels, &split.targets, &query_labels)?;
    Ok(SrRow {
        method: ClusterKind::Head.name().into(),
        dim: params.d_feat(),
        k: params.k(),
        accuracy,
        encode_s: timing.encode_seconds,
        cluster_s: timing.cluster_seconds,
        total_s: timing.total_seconds,
    })
}

/// k-means on the corpus (projected when `params` is given), queries assigned
/// to the nearest centroid afterwards.
pub fn evaluate_kmeans(
    embeddings: &EmbeddingMatrix,
    split: &RetrievalSplit,
    params: Option<&ProjectorParams>,
    k: usize,
    seed: u64,
) -> Result<SrRow> {
    let corpus = embeddings.gather_f64(&split.corpus);
    let queries = embeddings.gather_f64(&split.queries);
    let ((corpus_labels, query_labels), timing) = timed_pipeline(
        || match params {
            Some(p) => Ok((
                projector::project(p, corpus.view())?,
                projector::project(p, queries.view())?,
            )),
            None => Ok((corpus.clone(), queries.clone())),
        },
        |(fc, fq)| {
            let model = kmeans(fc.view(), k, seed)?;
            let centroids = model.centroids.as_ref().expect("k-means has centroids");
            let ql: Vec<usize> = fq
                .axis_iter(Axis(1))
                .map(|q| nearest(q, centroids).0)
                .collect();
            Ok((model.labels, ql))
        },
    )?;
    let accuracy = retrieval_accuracy(&corpus_labels, &split.targets, &query_labels)?;
    Ok(SrRow {
        method: ClusterKind::KMeans.name().into(),
        dim: params.map_or(embeddings.dim(), |p| p.d_feat()),
        k,
        accuracy,
        encode_s: timing.encode_seconds,
        cluster_s: timing.cluster_seconds,
        total_s: timing.total_seconds,
    })
}

pub fn write_sr_report(rows: &[SrRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sr_report(path: impl AsRef<Path>) -> Result<Vec<SrRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::ParseError {
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Mean vector of the columns (used by tests and the `k = 1` case).
pub fn column_mean(x: ArrayView2<f64>) -> Array1<f64> {
    x.mean_axis(Axis(1)).expect("non-empty matrix")
}
