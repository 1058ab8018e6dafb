//! The projection layer: a shared ELU trunk feeding a feature head (unit-norm
//! output) and a cluster head (logits, relaxed with Gumbel-Softmax in training).
//!
//! ```text
//! h        = ELU(W_t z + b_t)
//! feature  = normalize(W_f h + b_f)
//! logits   = W_c h + b_c
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::distributions::{Distribution, Open01, Uniform};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rate::{argmax, MembershipMatrix};
use crate::rng::{substream, Substream};

/// Pre-normalization feature columns shorter than this are rejected.
pub const MIN_FEATURE_NORM: f64 = 1e-12;

pub const PRJ_MAGIC: &[u8; 4] = b"PRJ1";
const PRJ_HEADER_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_feat: usize,
    pub k: usize,
    pub seed: u64,
}

impl ProjectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_hidden == 0 || self.d_feat == 0 || self.k == 0 {
            return Err(Error::InvalidConfig(format!(
                "projector dimensions must be ≥ 1: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Weights are `out × in`, applied to column vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorParams {
    pub trunk_weight: Array2<f64>,
    pub trunk_bias: Array1<f64>,
    pub feat_weight: Array2<f64>,
    pub feat_bias: Array1<f64>,
    pub clus_weight: Array2<f64>,
    pub clus_bias: Array1<f64>,
}

fn uniform_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let bound = 1.0 / (cols as f32).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    Array2::from_shape_simple_fn((rows, cols), || f64::from(dist.sample(rng)))
}

impl ProjectorParams {
    /// Uniform `±1/√fan_in` weights (drawn at storage precision), zero biases.
    pub fn init(cfg: &ProjectorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = substream(cfg.seed, Substream::Init);
        let trunk_weight = uniform_matrix(cfg.d_hidden, cfg.d_in, &mut rng);
        let feat_weight = uniform_matrix(cfg.d_feat, cfg.d_hidden, &mut rng);
        let clus_weight = uniform_matrix(cfg.k, cfg.d_hidden, &mut rng);
        Ok(ProjectorParams {
            trunk_weight,
            trunk_bias: Array1::zeros(cfg.d_hidden),
            feat_weight,
            feat_bias: Array1::zeros(cfg.d_feat),
            clus_weight,
            clus_bias: Array1::zeros(cfg.k),
        })
    }

    pub fn zeros(d_in: usize, d_hidden: usize, d_feat: usize, k: usize) -> Self {
        ProjectorParams {
            trunk_weight: Array2::zeros((d_hidden, d_in)),
            trunk_bias: Array1::zeros(d_hidden),
            feat_weight: Array2::zeros((d_feat, d_hidden)),
            feat_bias: Array1::zeros(d_feat),
            clus_weight: Array2::zeros((k, d_hidden)),
            clus_bias: Array1::zeros(k),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.d_in(), self.d_hidden(), self.d_feat(), self.k())
    }

    pub fn d_in(&self) -> usize {
        self.trunk_weight.ncols()
    }

    pub fn d_hidden(&self) -> usize {
        self.trunk_weight.nrows()
    }

    pub fn d_feat(&self) -> usize {
        self.feat_weight.nrows()
    }

    pub fn k(&self) -> usize {
        self.clus_weight.nrows()
    }

    pub fn parameter_count(&self) -> usize {
        self.iter().count()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, i, f, k) = (self.d_hidden(), self.d_in(), self.d_feat(), self.k());
        let ok = self.trunk_bias.len() == h
            && self.feat_weight.ncols() == h
            && self.feat_bias.len() == f
            && self.clus_weight.ncols() == h
            && self.clus_bias.len() == k
            && h > 0
            && i > 0
            && f > 0
            && k > 0;
        if !ok {
            return Err(Error::ShapeMismatch("inconsistent projector parameter shapes".into()));
        }
        if self.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure("non-finite projector parameter".into()));
        }
        Ok(())
    }

    /// All parameters in checkpoint order.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.trunk_weight
            .iter()
            .chain(self.trunk_bias.iter())
            .chain(self.feat_weight.iter())
            .chain(self.feat_bias.iter())
            .chain(self.clus_weight.iter())
            .chain(self.clus_bias.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.trunk_weight
            .iter_mut()
            .chain(self.trunk_bias.iter_mut())
            .chain(self.feat_weight.iter_mut())
            .chain(self.feat_bias.iter_mut())
            .chain(self.clus_weight.iter_mut())
            .chain(self.clus_bias.iter_mut())
    }

    /// Round every parameter to 32-bit storage precision.
    pub fn round_to_storage(&mut self) {
        for v in self.iter_mut() {
            *v = f64::from(*v as f32);
        }
    }
}

fn affine(weight: &Array2<f64>, bias: &Array1<f64>, x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = weight.dot(&x);
    out += &bias.view().insert_axis(Axis(1));
    out
}

pub fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn elu_derivative(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Intermediates of one forward pass, kept for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub hidden_pre: Array2<f64>,
    pub hidden: Array2<f64>,
    pub feature_norms: Array1<f64>,
    /// `d_feat × m`, unit columns.
    pub features: Array2<f64>,
    /// `k × m`.
    pub logits: Array2<f64>,
}

fn check_input(params: &ProjectorParams, z: &ArrayView2<f64>) -> Result<()> {
    if z.nrows() != params.d_in() {
        return Err(Error::ShapeMismatch(format!(
            "input has dim {}, projector expects {}",
            z.nrows(),
            params.d_in()
        )));
    }
    Ok(())
}

pub fn forward(params: &ProjectorParams, z: ArrayView2<f64>) -> Result<ForwardPass> {
    check_input(params, &z)?;
    let hidden_pre = affine(&params.trunk_weight, &params.trunk_bias, z);
    let hidden = hidden_pre.mapv(elu);
    let mut features = affine(&params.feat_weight, &params.feat_bias, hidden.view());
    let logits = affine(&params.clus_weight, &params.clus_bias, hidden.view());
    let mut feature_norms = Array1::<f64>::zeros(z.ncols());
    for (j, mut col) in features.axis_iter_mut(Axis(1)).enumerate() {
        let norm = col.dot(&col).sqrt();
        if !(norm >= MIN_FEATURE_NORM) {
            return Err(Error::ZeroFeature { column: j });
        }
        col.mapv_inplace(|v| v / norm);
        feature_norms[j] = norm;
    }
    Ok(ForwardPass {
        hidden_pre,
        hidden,
        feature_norms,
        features,
        logits,
    })
}

/// Trunk activations `ELU(W_t z + b_t)`.
pub fn hidden(params: &ProjectorParams, z: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_input(params, &z)?;
    Ok(affine(&params.trunk_weight, &params.trunk_bias, z).mapv(elu))
}

/// Unit-norm features from trunk activations.
pub fn features_from_hidden(params: &ProjectorParams, hidden: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut features = affine(&params.feat_weight, &params.feat_bias, hidden);
    for (j, mut col) in features.axis_iter_mut(Axis(1)).enumerate() {
        let norm = col.dot(&col).sqrt();
        if !(norm >= MIN_FEATURE_NORM) {
            return Err(Error::ZeroFeature { column: j });
        }
        col.mapv_inplace(|v| v / norm);
    }
    Ok(features)
}

/// Hard labels straight from trunk activations.
pub fn labels_from_hidden(params: &ProjectorParams, hidden: ArrayView2<f64>) -> Vec<usize> {
    let logits = affine(&params.clus_weight, &params.clus_bias, hidden);
    labels_from_logits(logits.view())
}

/// Cluster logits only (`k × m`); never fails on degenerate features.
pub fn cluster_logits(params: &ProjectorParams, z: ArrayView2<f64>) -> Result<Array2<f64>> {
    let hidden = hidden(params, z)?;
    Ok(affine(&params.clus_weight, &params.clus_bias, hidden.view()))
}

/// Hard labels: argmax of the cluster logits per column, ties to the lowest index.
pub fn infer_memberships(params: &ProjectorParams, z: ArrayView2<f64>) -> Result<Vec<usize>> {
    let hidden = hidden(params, z)?;
    Ok(labels_from_hidden(params, hidden.view()))
}

/// Features of every column, projected in 64-bit.
pub fn project(params: &ProjectorParams, z: ArrayView2<f64>) -> Result<Array2<f64>> {
    let hidden = hidden(params, z)?;
    features_from_hidden(params, hidden.view())
}

pub fn labels_from_logits(logits: ArrayView2<f64>) -> Vec<usize> {
    let columns: Vec<ArrayView1<f64>> = logits.axis_iter(Axis(1)).collect();
    columns.into_par_iter().map(argmax).collect()
}

/// Standard Gumbel noise `−ln(−ln u)`, `k × m`.
pub fn sample_gumbel(k: usize, m: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((k, m), || {
        let u: f64 = rng.sample(Open01);
        -(-u.ln()).ln()
    })
}

/// Column-wise `softmax((logits + noise)/τ)`, returned as `m × k` memberships.
pub fn gumbel_softmax_with_noise(
    logits: ArrayView2<f64>,
    noise: ArrayView2<f64>,
    temperature: f64,
) -> Result<MembershipMatrix> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.dim() != noise.dim() {
        return Err(Error::ShapeMismatch("gumbel noise shape".into()));
    }
    let (k, m) = logits.dim();
    let mut out = Array2::<f64>::zeros((m, k));
    for j in 0..m {
        let scaled: Vec<f64> = (0..k)
            .map(|i| (logits[[i, j]] + noise[[i, j]]) / temperature)
            .collect();
        let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (i, s) in scaled.iter().enumerate() {
            let e = (s - max).exp();
            out[[j, i]] = e;
            total += e;
        }
        out.row_mut(j).mapv_inplace(|v| v / total);
    }
    MembershipMatrix::new(out)
}

pub fn gumbel_softmax(
    logits: ArrayView2<f64>,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<MembershipMatrix> {
    let noise = sample_gumbel(logits.nrows(), logits.ncols(), rng);
    gumbel_softmax_with_noise(logits, noise.view(), temperature)
}

/// Pull a gradient on the `m × k` memberships back to the `k × m` logits,
/// holding the sampled noise fixed.
pub fn gumbel_softmax_backward(
    memberships: ArrayView2<f64>,
    grad_memberships: ArrayView2<f64>,
    temperature: f64,
) -> Array2<f64> {
    let (m, k) = memberships.dim();
    let mut out = Array2::<f64>::zeros((k, m));
    for j in 0..m {
        let y = memberships.row(j);
        let g = grad_memberships.row(j);
        let inner = y.dot(&g);
        for i in 0..k {
            out[[i, j]] = y[i] * (g[i] - inner) / temperature;
        }
    }
    out
}

/// Gradient of `x/‖x‖` pulled back from the normalized side: `(g − f fᵀg)/‖x‖`.
pub fn normalize_backward(
    features: ArrayView2<f64>,
    norms: ArrayView1<f64>,
    grad_features: ArrayView2<f64>,
) -> Array2<f64> {
    let mut out = grad_features.to_owned();
    Zip::from(out.axis_iter_mut(Axis(1)))
        .and(features.axis_iter(Axis(1)))
        .and(norms)
        .for_each(|mut g, f, &norm| {
            let along = f.dot(&g);
            g.scaled_add(-along, &f);
            g.mapv_inplace(|v| v / norm);
        });
    out
}

#[derive(Debug, Clone)]
pub struct ProjectorGrads {
    pub params: ProjectorParams,
    pub input: Array2<f64>,
}

/// Chain rule through both heads and the trunk.
pub fn backward(
    params: &ProjectorParams,
    z: ArrayView2<f64>,
    pass: &ForwardPass,
    grad_features: ArrayView2<f64>,
    grad_logits: ArrayView2<f64>,
) -> Result<ProjectorGrads> {
    check_input(params, &z)?;
    let m = z.ncols();
    if grad_features.dim() != (params.d_feat(), m) || grad_logits.dim() != (params.k(), m) {
        return Err(Error::ShapeMismatch("upstream gradient shapes".into()));
    }
    let g_feat_pre = normalize_backward(pass.features.view(), pass.feature_norms.view(), grad_features);

    let feat_weight = g_feat_pre.dot(&pass.hidden.t());
    let feat_bias = g_feat_pre.sum_axis(Axis(1));
    let clus_weight = grad_logits.dot(&pass.hidden.t());
    let clus_bias = grad_logits.sum_axis(Axis(1));

    let mut g_hidden = params.feat_weight.t().dot(&g_feat_pre);
    g_hidden += &params.clus_weight.t().dot(&grad_logits);
    Zip::from(&mut g_hidden)
        .and(&pass.hidden_pre)
        .for_each(|g, &x| *g *= elu_derivative(x));

    let trunk_weight = g_hidden.dot(&z.t());
    let trunk_bias = g_hidden.sum_axis(Axis(1));
    let input = params.trunk_weight.t().dot(&g_hidden);
    Ok(ProjectorGrads {
        params: ProjectorParams {
            trunk_weight,
            trunk_bias,
            feat_weight,
            feat_bias,
            clus_weight,
            clus_bias,
        },
        input,
    })
}

/// PRJ1 bytes: magic, four `u32` dims, then each tensor row-major as `f32`.
pub fn encode_checkpoint(params: &ProjectorParams) -> Result<Vec<u8>> {
    params.validate()?;
    let mut buf = Vec::with_capacity(PRJ_HEADER_LEN + 4 * params.parameter_count());
    buf.extend_from_slice(PRJ_MAGIC);
    for dim in [params.d_in(), params.d_hidden(), params.d_feat(), params.k()] {
        let d = u32::try_from(dim)
            .map_err(|_| Error::ShapeMismatch(format!("dimension {dim} does not fit in u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    // ndarray's default iteration order is row-major (logical order).
    for v in params.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ProjectorParams> {
    if bytes.len() < 4 || &bytes[..4] != PRJ_MAGIC {
        return Err(Error::BadMagic {
            offset: 0,
            expected: "PRJ1",
        });
    }
    if bytes.len() < PRJ_HEADER_LEN {
        return Err(Error::ShapeMismatch(format!(
            "PRJ1 header needs {PRJ_HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    let dims: Vec<usize> = bytes[4..PRJ_HEADER_LEN]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let (d_in, d_hidden, d_feat, k) = (dims[0], dims[1], dims[2], dims[3]);
    if dims.iter().any(|d| *d == 0) {
        return Err(Error::ShapeMismatch(format!("PRJ1 header has a zero dimension: {dims:?}")));
    }
    let mut params = ProjectorParams::zeros(d_in, d_hidden, d_feat, k);
    let expected = PRJ_HEADER_LEN as u64 + 4 * params.parameter_count() as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::ShapeMismatch(format!(
            "PRJ1 with dims {dims:?} needs {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let mut values = bytes[PRJ_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())));
    for v in params.iter_mut() {
        *v = values.next().expect("length checked");
    }
    params.validate()?;
    Ok(params)
}

pub fn save_checkpoint(params: &ProjectorParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(params)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ProjectorParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Load and require the input dimension to match.
pub fn load_checkpoint_for(path: impl AsRef<Path>, d_in: usize) -> Result<ProjectorParams> {
    let params = load_checkpoint(path)?;
    if params.d_in() != d_in {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint expects input dim {}, data has {d_in}",
            params.d_in()
        )));
    }
    Ok(params)
}
