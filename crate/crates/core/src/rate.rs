//! The coding-rate-reduction objective and its analytic gradients.
//!
//! With `Ẑ` a `d×n` feature matrix, `Π` an `n×k` membership matrix and
//! `(Z₁, Z₂)` the two sides of a pair batch:
//!
//! ```text
//! R(Ẑ)       = ½ logdet(I + d/(n ε²) ẐẐᵀ)
//! R(Ẑ, πₖ)   = nₖ/(2n) logdet(I + d/(nₖ ε²) Ẑ diag(πₖ) Ẑᵀ),   nₖ = Σ πₖ
//! D(Z₁, Z₂)  = mean cosine between matching columns
//! L          = −R(Ẑ) + Σₖ R(Ẑ, πₖ) − λ D(Z₁, Z₂)
//! ```
//!
//! All log-determinants are evaluated on the smaller Gram side.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{GramSide, RegularizedGram};

/// Clusters with total membership below this contribute nothing.
pub const EMPTY_CLUSTER_MASS: f64 = 1e-8;

pub const DEFAULT_EPSILON_SQ: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateConfig {
    pub epsilon_sq: f64,
    pub lambda: f64,
    pub temperature: f64,
    pub clusters: usize,
}

impl RateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_sq > 0.0) || !self.epsilon_sq.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "epsilon_sq must be positive, got {}",
                self.epsilon_sq
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.clusters == 0 {
            return Err(Error::InvalidConfig("clusters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Row-stochastic `n×k` cluster memberships.
#[derive(Debug, Clone, PartialEq)]
pub struct MembershipMatrix {
    values: Array2<f64>,
}

impl MembershipMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.ncols() == 0 {
            return Err(Error::ShapeMismatch("membership matrix needs k ≥ 1".into()));
        }
        for (i, row) in values.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::DegenerateInput(format!(
                    "membership row {i} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::DegenerateInput(format!(
                    "membership row {i} sums to {sum}"
                )));
            }
        }
        Ok(MembershipMatrix { values })
    }

    /// One-hot rows from hard labels.
    pub fn hard(labels: &[usize], k: usize) -> Result<Self> {
        let mut values = Array2::<f64>::zeros((labels.len(), k));
        for (i, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(Error::IndexOutOfRange { index: l, count: k });
            }
            values[[i, l]] = 1.0;
        }
        Ok(MembershipMatrix { values })
    }

    /// A single cluster holding every point.
    pub fn single(n: usize) -> Self {
        MembershipMatrix {
            values: Array2::ones((n, 1)),
        }
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn clusters(&self) -> usize {
        self.values.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }

    /// `nₖ` per cluster.
    pub fn column_sums(&self) -> Array1<f64> {
        self.values.sum_axis(Axis(0))
    }

    pub fn is_hard(&self) -> bool {
        self.values
            .axis_iter(Axis(0))
            .all(|row| row.iter().filter(|v| **v == 1.0).count() == 1 && row.sum() == 1.0)
    }

    /// Argmax per row, ties toward the lowest index.
    pub fn argmax_labels(&self) -> Vec<usize> {
        self.values.axis_iter(Axis(0)).map(|r| argmax(r)).collect()
    }
}

pub(crate) fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

pub fn cosine_pair(z1: ArrayView1<f64>, z2: ArrayView1<f64>) -> Result<f64> {
    if z1.len() != z2.len() {
        return Err(Error::ShapeMismatch(format!(
            "cosine of vectors with lengths {} and {}",
            z1.len(),
            z2.len()
        )));
    }
    let (n1, n2) = (norm(z1), norm(z2));
    if n1 == 0.0 {
        return Err(Error::ZeroVector { column: 0 });
    }
    if n2 == 0.0 {
        return Err(Error::ZeroVector { column: 1 });
    }
    Ok((z1.dot(&z2) / (n1 * n2)).clamp(-1.0, 1.0))
}

fn check_pair_shapes(z1: &ArrayView2<f64>, z2: &ArrayView2<f64>) -> Result<()> {
    if z1.dim() != z2.dim() {
        return Err(Error::ShapeMismatch(format!(
            "pair sides {:?} vs {:?}",
            z1.dim(),
            z2.dim()
        )));
    }
    if z1.ncols() == 0 {
        return Err(Error::ShapeMismatch("empty pair batch".into()));
    }
    Ok(())
}

/// Mean cosine similarity between matching columns of `z1` and `z2`.
pub fn pair_similarity(z1: ArrayView2<f64>, z2: ArrayView2<f64>) -> Result<f64> {
    check_pair_shapes(&z1, &z2)?;
    let mut total = 0.0;
    for (i, (a, b)) in z1.axis_iter(Axis(1)).zip(z2.axis_iter(Axis(1))).enumerate() {
        total += cosine_pair(a, b).map_err(|_| Error::ZeroVector { column: i })?;
    }
    Ok(total / z1.ncols() as f64)
}

/// Gradients of [`pair_similarity`] with respect to both sides.
pub fn pair_similarity_grad(
    z1: ArrayView2<f64>,
    z2: ArrayView2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_pair_shapes(&z1, &z2)?;
    let b = z1.ncols() as f64;
    let mut g1 = Array2::<f64>::zeros(z1.raw_dim());
    let mut g2 = Array2::<f64>::zeros(z2.raw_dim());
    for i in 0..z1.ncols() {
        let (a, c) = (z1.column(i), z2.column(i));
        let (na, nc) = (norm(a), norm(c));
        if na == 0.0 || nc == 0.0 {
            return Err(Error::ZeroVector { column: i });
        }
        let cos = a.dot(&c) / (na * nc);
        let inv = 1.0 / (na * nc * b);
        Zip::from(g1.column_mut(i))
            .and(a)
            .and(c)
            .for_each(|g, &x, &y| *g = y * inv - cos * x / (na * na * b));
        Zip::from(g2.column_mut(i))
            .and(a)
            .and(c)
            .for_each(|g, &x, &y| *g = x * inv - cos * y / (nc * nc * b));
    }
    Ok((g1, g2))
}

fn check_epsilon(epsilon_sq: f64) -> Result<()> {
    if !(epsilon_sq > 0.0) || !epsilon_sq.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "epsilon_sq must be positive, got {epsilon_sq}"
        )));
    }
    Ok(())
}

fn rate_gram(z: ArrayView2<f64>, epsilon_sq: f64, side: Option<GramSide>) -> Result<RegularizedGram> {
    check_epsilon(epsilon_sq)?;
    let (d, n) = z.dim();
    if n == 0 {
        return Err(Error::ShapeMismatch("coding rate of an empty set".into()));
    }
    let alpha = d as f64 / (n as f64 * epsilon_sq);
    match side {
        Some(side) => RegularizedGram::with_side(z.to_owned(), alpha, side),
        None => RegularizedGram::new(z.to_owned(), alpha),
    }
}

/// `½ logdet(I + d/(n ε²) ZZᵀ)`.
pub fn coding_rate(z: ArrayView2<f64>, epsilon_sq: f64) -> Result<f64> {
    Ok(0.5 * rate_gram(z, epsilon_sq, None)?.logdet())
}

/// [`coding_rate`] forced onto one Gram side.
pub fn coding_rate_on_side(z: ArrayView2<f64>, epsilon_sq: f64, side: GramSide) -> Result<f64> {
    Ok(0.5 * rate_gram(z, epsilon_sq, Some(side))?.logdet())
}

/// `α (I + α ZZᵀ)⁻¹ Z` with `α = d/(n ε²)`.
pub fn coding_rate_grad(z: ArrayView2<f64>, epsilon_sq: f64) -> Result<Array2<f64>> {
    let (d, n) = z.dim();
    let gram = rate_gram(z, epsilon_sq, None)?;
    let alpha = d as f64 / (n as f64 * epsilon_sq);
    let mut g = gram.solve(z);
    g.mapv_inplace(|v| v * alpha);
    Ok(g)
}

fn check_membership_column(z: &ArrayView2<f64>, pi_k: &ArrayView1<f64>) -> Result<()> {
    if pi_k.len() != z.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "membership column of length {} for {} points",
            pi_k.len(),
            z.ncols()
        )));
    }
    if pi_k.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::DegenerateInput(
            "membership entries must be finite and non-negative".into(),
        ));
    }
    Ok(())
}

struct ClusterGram {
    gram: RegularizedGram,
    mass: f64,
}

fn cluster_gram(z: &ArrayView2<f64>, pi_k: &ArrayView1<f64>, epsilon_sq: f64) -> Result<Option<ClusterGram>> {
    check_epsilon(epsilon_sq)?;
    check_membership_column(z, pi_k)?;
    let mass = pi_k.sum();
    if mass < EMPTY_CLUSTER_MASS {
        return Ok(None);
    }
    let d = z.nrows() as f64;
    let beta = d / (mass * epsilon_sq);
    let mut w = z.to_owned();
    Zip::from(w.axis_iter_mut(Axis(1)))
        .and(pi_k)
        .for_each(|mut col, &p| col.mapv_inplace(|v| v * p.sqrt()));
    Ok(Some(ClusterGram {
        gram: RegularizedGram::new(w, beta)?,
        mass,
    }))
}

/// `nₖ/(2n) logdet(I + d/(nₖ ε²) Z diag(πₖ) Zᵀ)`; zero for an empty cluster.
pub fn cluster_rate(z: ArrayView2<f64>, pi_k: ArrayView1<f64>, epsilon_sq: f64) -> Result<f64> {
    let n = z.ncols() as f64;
    Ok(match cluster_gram(&z, &pi_k, epsilon_sq)? {
        None => 0.0,
        Some(cg) => cg.mass / (2.0 * n) * cg.gram.logdet(),
    })
}

/// Gradients of [`cluster_rate`] with respect to `Z` and to the membership column.
pub fn cluster_rate_grad(
    z: ArrayView2<f64>,
    pi_k: ArrayView1<f64>,
    epsilon_sq: f64,
) -> Result<(Array2<f64>, Array1<f64>)> {
    Ok(cluster_rate_value_grad(z, pi_k, epsilon_sq)?.1)
}

fn cluster_rate_value_grad(
    z: ArrayView2<f64>,
    pi_k: ArrayView1<f64>,
    epsilon_sq: f64,
) -> Result<(f64, (Array2<f64>, Array1<f64>))> {
    let (d, n) = z.dim();
    let Some(cg) = cluster_gram(&z, &pi_k, epsilon_sq)? else {
        return Ok((0.0, (Array2::zeros(z.raw_dim()), Array1::zeros(n))));
    };
    let nf = n as f64;
    let logdet = cg.gram.logdet();
    let value = cg.mass / (2.0 * nf) * logdet;

    // Y = M⁻¹ Z
    let y = cg.gram.solve(z);
    let scale = d as f64 / (nf * epsilon_sq);
    let mut grad_z = y.clone();
    Zip::from(grad_z.axis_iter_mut(Axis(1)))
        .and(pi_k)
        .for_each(|mut col, &p| col.mapv_inplace(|v| v * p * scale));

    // ∂/∂πⱼ = (logdet + (d/ε²)·zⱼᵀM⁻¹zⱼ − tr(M⁻¹(M−I))) / 2n
    let saturation = cg.gram.saturation_trace();
    let d_over_eps = d as f64 / epsilon_sq;
    let grad_pi = Zip::from(z.axis_iter(Axis(1)))
        .and(y.axis_iter(Axis(1)))
        .map_collect(|zc, yc| (logdet + d_over_eps * zc.dot(&yc) - saturation) / (2.0 * nf));
    Ok((value, (grad_z, grad_pi)))
}

/// The three terms of the objective and their combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    /// `R(Ẑ)`
    pub rate: f64,
    /// `Σₖ R(Ẑ, πₖ)`
    pub cluster_rate_sum: f64,
    /// `D(Z₁, Z₂)`
    pub similarity: f64,
    pub loss: f64,
}

impl LossTerms {
    fn combine(rate: f64, cluster_rate_sum: f64, similarity: f64, lambda: f64) -> Self {
        LossTerms {
            rate,
            cluster_rate_sum,
            similarity,
            loss: -rate + cluster_rate_sum - lambda * similarity,
        }
    }
}

fn check_loss_inputs(zhat: &ArrayView2<f64>, pi: &ArrayView2<f64>, cfg: &RateConfig) -> Result<()> {
    cfg.validate()?;
    if pi.nrows() != zhat.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "membership has {} rows for {} feature columns",
            pi.nrows(),
            zhat.ncols()
        )));
    }
    Ok(())
}

/// Evaluate every term of the objective.
pub fn mcr2_terms(
    zhat: ArrayView2<f64>,
    pi: ArrayView2<f64>,
    z1: ArrayView2<f64>,
    z2: ArrayView2<f64>,
    cfg: &RateConfig,
) -> Result<LossTerms> {
    check_loss_inputs(&zhat, &pi, cfg)?;
    let rate = coding_rate(zhat, cfg.epsilon_sq)?;
    let per_cluster: Vec<Result<f64>> = (0..pi.ncols())
        .into_par_iter()
        .map(|k| cluster_rate(zhat, pi.column(k), cfg.epsilon_sq))
        .collect();
    let mut cluster_rate_sum = 0.0;
    for r in per_cluster {
        cluster_rate_sum += r?;
    }
    let similarity = pair_similarity(z1, z2)?;
    Ok(LossTerms::combine(rate, cluster_rate_sum, similarity, cfg.lambda))
}

/// `−R(Ẑ) + Σₖ R(Ẑ, πₖ) − λ D(Z₁, Z₂)`.
pub fn mcr2_loss(
    zhat: ArrayView2<f64>,
    pi: ArrayView2<f64>,
    z1: ArrayView2<f64>,
    z2: ArrayView2<f64>,
    cfg: &RateConfig,
) -> Result<f64> {
    Ok(mcr2_terms(zhat, pi, z1, z2, cfg)?.loss)
}

#[derive(Debug, Clone)]
pub struct Mcr2Gradient {
    pub terms: LossTerms,
    /// From the rate terms only.
    pub zhat: Array2<f64>,
    pub pi: Array2<f64>,
    /// `−λ ∂D/∂Z₁`
    pub z1: Array2<f64>,
    /// `−λ ∂D/∂Z₂`
    pub z2: Array2<f64>,
}

/// Gradient of [`mcr2_loss`] with `Z₁`, `Z₂` treated as independent inputs.
pub fn mcr2_loss_grad(
    zhat: ArrayView2<f64>,
    pi: ArrayView2<f64>,
    z1: ArrayView2<f64>,
    z2: ArrayView2<f64>,
    cfg: &RateConfig,
) -> Result<Mcr2Gradient> {
    check_loss_inputs(&zhat, &pi, cfg)?;
    let rate = coding_rate(zhat, cfg.epsilon_sq)?;
    let mut grad_zhat = coding_rate_grad(zhat, cfg.epsilon_sq)?;
    grad_zhat.mapv_inplace(|v| -v);

    let per_cluster: Vec<_> = (0..pi.ncols())
        .into_par_iter()
        .map(|k| cluster_rate_value_grad(zhat, pi.column(k), cfg.epsilon_sq))
        .collect();
    let mut grad_pi = Array2::<f64>::zeros(pi.raw_dim());
    let mut cluster_rate_sum = 0.0;
    for (k, r) in per_cluster.into_iter().enumerate() {
        let (value, (gz, gp)) = r?;
        cluster_rate_sum += value;
        grad_zhat += &gz;
        grad_pi.column_mut(k).assign(&gp);
    }

    let similarity = pair_similarity(z1, z2)?;
    let (mut g1, mut g2) = pair_similarity_grad(z1, z2)?;
    g1.mapv_inplace(|v| -cfg.lambda * v);
    g2.mapv_inplace(|v| -cfg.lambda * v);

    Ok(Mcr2Gradient {
        terms: LossTerms::combine(rate, cluster_rate_sum, similarity, cfg.lambda),
        zhat: grad_zhat,
        pi: grad_pi,
        z1: g1,
        z2: g2,
    })
}

/// Loss and gradient for a pair batch laid out as `Ẑ = [Z₁ | Z₂]`: the first
/// half of the columns are side one, the second half side two. The similarity
/// gradient is folded back into those columns.
pub fn batch_loss_grad(
    zhat: ArrayView2<f64>,
    pi: ArrayView2<f64>,
    cfg: &RateConfig,
) -> Result<(LossTerms, Array2<f64>, Array2<f64>)> {
    let n = zhat.ncols();
    if n % 2 != 0 || n == 0 {
        return Err(Error::ShapeMismatch(format!(
            "pair batch needs an even, non-zero column count, got {n}"
        )));
    }
    let b = n / 2;
    let z1 = zhat.slice(s![.., ..b]);
    let z2 = zhat.slice(s![.., b..]);
    let g = mcr2_loss_grad(zhat, pi, z1, z2, cfg)?;
    let mut grad = g.zhat;
    {
        let mut left = grad.slice_mut(s![.., ..b]);
        left += &g.z1;
    }
    {
        let mut right = grad.slice_mut(s![.., b..]);
        right += &g.z2;
    }
    Ok((g.terms, grad, g.pi))
}
