//! Embedding matrices, pair sets, gold scores and their on-disk formats.
//!
//! EMB1 layout (little-endian):
//!
//! | bytes    | content                                  |
//! |----------|------------------------------------------|
//! | 0..4     | ASCII `EMB1`                             |
//! | 4..8     | `u32` dim                                |
//! | 8..16    | `u64` count                              |
//! | 16..     | `count·dim` `f32`, vector-major          |
//!
//! On disk each vector is contiguous; in memory vectors are the columns of a
//! `dim × count` matrix.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{indexed_substream, substream, Substream};

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";
const EMB_HEADER_LEN: u64 = 16;

/// `dim × count` matrix of finite `f32` values; column `j` is vector `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    values: Array2<f32>,
}

impl EmbeddingMatrix {
    pub fn new(values: Array2<f32>) -> Result<Self> {
        let (dim, count) = values.dim();
        if dim == 0 || count == 0 {
            return Err(Error::DegenerateInput(format!(
                "embedding matrix must be at least 1x1, got {dim}x{count}"
            )));
        }
        for (j, col) in values.axis_iter(Axis(1)).enumerate() {
            if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue {
                    offset: payload_offset(dim, j, i),
                });
            }
        }
        Ok(EmbeddingMatrix { values })
    }

    /// Build from 64-bit values, rounding to storage precision.
    pub fn from_f64(values: &Array2<f64>) -> Result<Self> {
        Self::new(values.mapv(|v| v as f32))
    }

    /// Build from vectors given one per row (the on-disk orientation).
    pub fn from_rows(dim: usize, rows: &[Vec<f32>]) -> Result<Self> {
        let mut values = Array2::<f32>::zeros((dim, rows.len()));
        for (j, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "vector {j} has length {}, expected {dim}",
                    row.len()
                )));
            }
            for (i, v) in row.iter().enumerate() {
                values[[i, j]] = *v;
            }
        }
        Self::new(values)
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn count(&self) -> usize {
        self.values.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.values.view()
    }

    pub fn column(&self, j: usize) -> ArrayView1<'_, f32> {
        self.values.column(j)
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.values.mapv(f64::from)
    }

    pub fn into_inner(self) -> Array2<f32> {
        self.values
    }

    /// Columns `indices`, in order, as a 64-bit matrix.
    pub fn gather_f64(&self, indices: &[usize]) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((self.dim(), indices.len()));
        for (dst, &src) in indices.iter().enumerate() {
            for (o, v) in out.column_mut(dst).iter_mut().zip(self.values.column(src)) {
                *o = f64::from(*v);
            }
        }
        out
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        for &i in indices {
            if i >= self.count() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    count: self.count(),
                });
            }
        }
        Self::new(self.values.select(Axis(1), indices))
    }

    pub fn to_rows(&self) -> Vec<Vec<f32>> {
        self.values
            .axis_iter(Axis(1))
            .map(|c| c.to_vec())
            .collect()
    }
}

fn payload_offset(dim: usize, column: usize, row: usize) -> u64 {
    EMB_HEADER_LEN + 4 * (column as u64 * dim as u64 + row as u64)
}

pub fn encode_embeddings(matrix: &EmbeddingMatrix) -> Result<Vec<u8>> {
    let (dim, count) = (matrix.dim(), matrix.count());
    let dim32 = u32::try_from(dim)
        .map_err(|_| Error::ShapeMismatch(format!("dim {dim} does not fit in u32")))?;
    let mut buf = Vec::with_capacity(EMB_HEADER_LEN as usize + 4 * dim * count);
    buf.extend_from_slice(EMB_MAGIC);
    buf.extend_from_slice(&dim32.to_le_bytes());
    buf.extend_from_slice(&(count as u64).to_le_bytes());
    for (j, col) in matrix.values.axis_iter(Axis(1)).enumerate() {
        for (i, v) in col.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteValue {
                    offset: payload_offset(dim, j, i),
                });
            }
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    let len = bytes.len() as u64;
    if bytes.len() < 4 {
        if EMB_MAGIC.starts_with(bytes) {
            return Err(Error::TruncatedFile {
                offset: len,
                expected: EMB_HEADER_LEN,
                found: len,
            });
        }
        return Err(Error::BadMagic {
            offset: 0,
            expected: "EMB1",
        });
    }
    if &bytes[0..4] != EMB_MAGIC {
        return Err(Error::BadMagic {
            offset: 0,
            expected: "EMB1",
        });
    }
    if len < EMB_HEADER_LEN {
        return Err(Error::TruncatedFile {
            offset: len,
            expected: EMB_HEADER_LEN,
            found: len,
        });
    }
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as u64;
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    if dim == 0 || count == 0 {
        return Err(Error::DegenerateInput(format!(
            "EMB1 header declares dim={dim}, count={count}"
        )));
    }
    let expected = dim
        .checked_mul(count)
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(EMB_HEADER_LEN))
        .ok_or_else(|| Error::DegenerateInput("EMB1 header size overflows".into()))?;
    if len < expected {
        return Err(Error::TruncatedFile {
            offset: len,
            expected,
            found: len,
        });
    }
    if len > expected {
        return Err(Error::TrailingBytes { offset: expected });
    }
    let (dim, count) = (dim as usize, count as usize);
    let mut values = Array2::<f32>::zeros((dim, count));
    let payload = &bytes[EMB_HEADER_LEN as usize..];
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFiniteValue {
                offset: EMB_HEADER_LEN + 4 * k as u64,
            });
        }
        values[[k % dim, k / dim]] = v;
    }
    Ok(EmbeddingMatrix { values })
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}

pub fn write_embeddings(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_embeddings(matrix)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// An index pair `(a, b)` marking two similar vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairSet {
    pairs: Vec<Pair>,
}

impl PairSet {
    pub fn new(pairs: Vec<Pair>) -> Result<Self> {
        if let Some(p) = pairs.iter().find(|p| p.a == p.b) {
            return Err(Error::ParseError {
                line: 0,
                message: format!("self-pair ({}, {})", p.a, p.b),
            });
        }
        Ok(PairSet { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn iter(&self) -> impl Iterator<Item = &Pair> {
        self.pairs.iter()
    }

    /// Check every index against a matrix of `count` vectors.
    pub fn validate(&self, count: usize) -> Result<()> {
        for p in &self.pairs {
            for index in [p.a, p.b] {
                if index >= count {
                    return Err(Error::IndexOutOfRange { index, count });
                }
            }
        }
        Ok(())
    }
}

pub fn parse_pairs(reader: impl BufRead) -> Result<PairSet> {
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::ParseError {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: Pair = serde_json::from_str(&line).map_err(|e| Error::ParseError {
            line: line_no,
            message: e.to_string(),
        })?;
        if pair.a == pair.b {
            return Err(Error::ParseError {
                line: line_no,
                message: format!("self-pair ({}, {})", pair.a, pair.b),
            });
        }
        pairs.push(pair);
    }
    Ok(PairSet { pairs })
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<PairSet> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(BufReader::new(file))
}

pub fn write_pairs(pairs: &PairSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for p in pairs.iter() {
        serde_json::to_writer(&mut out, p).expect("pair serializes");
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One human similarity judgement for the pair `(a, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub a: usize,
    pub b: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GoldScores {
    pub records: Vec<GoldRecord>,
}

impl GoldScores {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self, count: usize) -> Result<()> {
        for r in &self.records {
            for index in [r.a, r.b] {
                if index >= count {
                    return Err(Error::IndexOutOfRange { index, count });
                }
            }
        }
        Ok(())
    }
}

pub fn read_gold(path: impl AsRef<Path>) -> Result<GoldScores> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let mut records = Vec::new();
    for (i, rec) in reader.deserialize::<GoldRecord>().enumerate() {
        // header is line 1
        let line = i + 2;
        let rec = rec.map_err(|e| Error::ParseError {
            line,
            message: e.to_string(),
        })?;
        if !rec.score.is_finite() {
            return Err(Error::ParseError {
                line,
                message: "non-finite score".into(),
            });
        }
        records.push(rec);
    }
    Ok(GoldScores { records })
}

pub fn write_gold(gold: &GoldScores, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for r in &gold.records {
        writer
            .serialize(r)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Integer labels, one per line.
pub fn write_labels(labels: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(labels.len() * 3);
    for l in labels {
        writeln!(out, "{l}").expect("write to vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|e: std::num::ParseIntError| Error::ParseError {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub clusters: usize,
    pub points_per_cluster: usize,
    pub subspace_rank: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.clusters == 0 || self.points_per_cluster == 0 || self.subspace_rank == 0 {
            return Err(Error::SpecInfeasible(
                "dim, clusters, points per cluster and rank must all be at least 1".into(),
            ));
        }
        let needed = self.subspace_rank.saturating_mul(self.clusters);
        if needed > self.dim {
            return Err(Error::SpecInfeasible(format!(
                "rank·clusters = {needed} exceeds dim {}",
                self.dim
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::SpecInfeasible(format!(
                "noise sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// A generated corpus: `base` clean points (columns `0..base`) followed by one
/// noisy duplicate of each (columns `base..2·base`), paired as `(i, base + i)`.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub embeddings: EmbeddingMatrix,
    pub pairs: PairSet,
    pub labels: Vec<usize>,
    pub base: usize,
}

/// Random orthogonal `d×d` matrix: modified Gram-Schmidt on a Gaussian matrix.
fn random_orthogonal(dim: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut q = Array2::<f64>::zeros((dim, dim));
    loop {
        for v in q.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let mut ok = true;
        for j in 0..dim {
            for k in 0..j {
                let proj = q.column(j).dot(&q.column(k));
                let qk = q.column(k).to_owned();
                q.column_mut(j).scaled_add(-proj, &qk);
            }
            let norm = q.column(j).dot(&q.column(j)).sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            q.column_mut(j).mapv_inplace(|v| v / norm);
        }
        if ok {
            return q;
        }
    }
}

/// Clusters living on mutually orthogonal subspaces, each point with one
/// noisy duplicate. Deterministic in `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let rotation = random_orthogonal(spec.dim, &mut substream(spec.seed, Substream::Rotation));
    let mut coeff_rng = substream(spec.seed, Substream::Synthetic);
    let mut noise_rng = indexed_substream(spec.seed, Substream::Duplicates, 0);

    let base = spec.clusters * spec.points_per_cluster;
    let mut values = Array2::<f64>::zeros((spec.dim, 2 * base));
    let mut labels = vec![0usize; 2 * base];
    for c in 0..spec.clusters {
        let basis = rotation.slice(ndarray::s![.., c * spec.subspace_rank..(c + 1) * spec.subspace_rank]);
        for p in 0..spec.points_per_cluster {
            let j = c * spec.points_per_cluster + p;
            let coeffs: Vec<f64> = (0..spec.subspace_rank)
                .map(|_| coeff_rng.sample::<f64, _>(StandardNormal).abs())
                .collect();
            let x = basis.dot(&ndarray::Array1::from(coeffs));
            values.column_mut(j).assign(&x);
            labels[j] = c;
            labels[base + j] = c;
        }
    }
    for j in 0..base {
        for i in 0..spec.dim {
            let g: f64 = noise_rng.sample(StandardNormal);
            values[[i, base + j]] = values[[i, j]] + spec.noise_sigma * g;
        }
    }
    let pairs = (0..base).map(|i| Pair { a: i, b: base + i }).collect();
    Ok(SyntheticCorpus {
        embeddings: EmbeddingMatrix::from_f64(&values)?,
        pairs: PairSet { pairs },
        labels,
        base,
    })
}

/// Fresh noisy copies `x + σ·g` of every column, drawn from a noise stream
/// that generation never uses (for held-out queries).
pub fn noisy_copy(matrix: &EmbeddingMatrix, sigma: f64, seed: u64) -> Result<EmbeddingMatrix> {
    let mut rng = indexed_substream(seed, Substream::Duplicates, 1);
    let mut values = matrix.to_f64();
    for v in values.iter_mut() {
        let g: f64 = rng.sample(StandardNormal);
        *v += sigma * g;
    }
    EmbeddingMatrix::from_f64(&values)
}
