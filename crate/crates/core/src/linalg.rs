//! Cholesky-based log-determinants and solves for matrices of the form `I + β·W·Wᵀ`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Diagonal jitter tried after a plain factorization fails: 1e-12 up to 1e-6.
const JITTER_SCHEDULE: [f64; 7] = [1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: Array2<f64>,
    pub jitter: f64,
}

fn try_factor(a: &ArrayView2<f64>, jitter: f64) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]] + jitter;
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return None;
        }
        let ljj = diag.sqrt();
        l[[j, j]] = ljj;
        for i in (j + 1)..n {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = v / ljj;
        }
    }
    Some(l)
}

impl Cholesky {
    /// Factor `a`, escalating diagonal jitter on breakdown.
    pub fn factor(a: ArrayView2<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "cholesky of non-square {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if let Some(lower) = try_factor(&a, 0.0) {
            return Ok(Cholesky { lower, jitter: 0.0 });
        }
        for &jitter in JITTER_SCHEDULE.iter() {
            if let Some(lower) = try_factor(&a, jitter) {
                return Ok(Cholesky { lower, jitter });
            }
        }
        Err(Error::NumericalFailure(format!(
            "cholesky breakdown on {}x{} matrix after jitter {:e}",
            a.nrows(),
            a.ncols(),
            JITTER_SCHEDULE[JITTER_SCHEDULE.len() - 1]
        )))
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.lower.diag().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// Solve `A·X = B` column by column.
    pub fn solve(&self, b: ArrayView2<f64>) -> Array2<f64> {
        let n = self.dim();
        assert_eq!(b.nrows(), n, "rhs row count");
        let l = &self.lower;
        let mut x = b.to_owned();
        for mut col in x.axis_iter_mut(Axis(1)) {
            // forward: L y = b
            for i in 0..n {
                let mut v = col[i];
                for k in 0..i {
                    v -= l[[i, k]] * col[k];
                }
                col[i] = v / l[[i, i]];
            }
            // backward: Lᵀ x = y
            for i in (0..n).rev() {
                let mut v = col[i];
                for k in (i + 1)..n {
                    v -= l[[k, i]] * col[k];
                }
                col[i] = v / l[[i, i]];
            }
        }
        x
    }

    /// Trace of `A⁻¹`, via `‖L⁻¹‖_F²`.
    pub fn inverse_trace(&self) -> f64 {
        let n = self.dim();
        let l = &self.lower;
        let mut total = 0.0;
        let mut col = Array1::<f64>::zeros(n);
        for j in 0..n {
            col.fill(0.0);
            col[j] = 1.0;
            for i in j..n {
                let mut v = col[i];
                for k in j..i {
                    v -= l[[i, k]] * col[k];
                }
                col[i] = v / l[[i, i]];
            }
            total += col.slice(s![j..]).iter().map(|v| v * v).sum::<f64>();
        }
        total
    }
}

/// Which Gram side a computation is carried out on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GramSide {
    /// `I_d + β·W·Wᵀ` (row dimension).
    Primal,
    /// `I_n + β·Wᵀ·W` (column dimension).
    Dual,
}

impl GramSide {
    /// The smaller side for a `d×n` matrix; ties go to the primal side.
    pub fn smaller(d: usize, n: usize) -> Self {
        if n < d {
            GramSide::Dual
        } else {
            GramSide::Primal
        }
    }
}

/// Factored form of `M = I_d + β·W·Wᵀ` for a `d×n` matrix `W`.
///
/// Both sides share their nonzero spectrum, so the log-determinant and
/// `tr(M⁻¹(M − I))` can be read off whichever side is smaller. Solves against
/// `M` on the dual side go through the Woodbury identity.
#[derive(Debug, Clone)]
pub struct RegularizedGram {
    w: Array2<f64>,
    beta: f64,
    side: GramSide,
    chol: Cholesky,
}

impl RegularizedGram {
    pub fn new(w: Array2<f64>, beta: f64) -> Result<Self> {
        let side = GramSide::smaller(w.nrows(), w.ncols());
        Self::with_side(w, beta, side)
    }

    pub fn with_side(w: Array2<f64>, beta: f64, side: GramSide) -> Result<Self> {
        let mut a = match side {
            GramSide::Primal => w.dot(&w.t()),
            GramSide::Dual => w.t().dot(&w),
        };
        a.mapv_inplace(|v| v * beta);
        for i in 0..a.nrows() {
            a[[i, i]] += 1.0;
        }
        let chol = Cholesky::factor(a.view())?;
        Ok(RegularizedGram {
            w,
            beta,
            side,
            chol,
        })
    }

    pub fn side(&self) -> GramSide {
        self.side
    }

    pub fn logdet(&self) -> f64 {
        self.chol.logdet()
    }

    /// `tr(M⁻¹·β·W·Wᵀ) = Σ λᵢ/(1+λᵢ)`.
    pub fn saturation_trace(&self) -> f64 {
        self.chol.dim() as f64 - self.chol.inverse_trace()
    }

    /// `M⁻¹·R` for a `d×m` right-hand side.
    pub fn solve(&self, rhs: ArrayView2<f64>) -> Array2<f64> {
        match self.side {
            GramSide::Primal => self.chol.solve(rhs),
            GramSide::Dual => {
                // M⁻¹ = I − β W (I + β WᵀW)⁻¹ Wᵀ
                let proj = self.w.t().dot(&rhs);
                let inner = self.chol.solve(proj.view());
                let mut out = rhs.to_owned();
                out.scaled_add(-self.beta, &self.w.dot(&inner));
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn factor_and_solve_small_spd() {
        let a = array![[4.0, 2.0], [2.0, 3.0]];
        let c = Cholesky::factor(a.view()).unwrap();
        assert_eq!(c.jitter, 0.0);
        assert!((c.logdet() - 8.0f64.ln()).abs() < 1e-14);
        let x = c.solve(array![[2.0], [1.0]].view());
        let back = a.dot(&x);
        assert!((back[[0, 0]] - 2.0).abs() < 1e-12);
        assert!((back[[1, 0]] - 1.0).abs() < 1e-12);
        // inverse = [[3,-2],[-2,4]]/8
        assert!((c.inverse_trace() - 7.0 / 8.0).abs() < 1e-14);
    }

    #[test]
    fn indefinite_matrix_is_numerical_failure() {
        let a = array![[1.0, 0.0], [0.0, -1.0]];
        assert!(matches!(
            Cholesky::factor(a.view()),
            Err(Error::NumericalFailure(_))
        ));
    }

    #[test]
    fn semidefinite_matrix_recovers_with_jitter() {
        let a = array![[1.0, 1.0], [1.0, 1.0]];
        let c = Cholesky::factor(a.view()).unwrap();
        assert!(c.jitter > 0.0);
    }

    #[test]
    fn woodbury_solve_matches_primal_solve() {
        let w = array![[1.0, 0.5, -0.3], [0.2, -1.0, 0.7], [0.0, 0.4, 0.9], [1.5, 0.1, 0.2]];
        let rhs = array![[1.0, 0.0], [0.0, 1.0], [2.0, -1.0], [0.5, 0.5]];
        let p = RegularizedGram::with_side(w.clone(), 0.8, GramSide::Primal).unwrap();
        let d = RegularizedGram::with_side(w, 0.8, GramSide::Dual).unwrap();
        let a = p.solve(rhs.view());
        let b = d.solve(rhs.view());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((p.logdet() - d.logdet()).abs() < 1e-12);
        assert!((p.saturation_trace() - d.saturation_trace()).abs() < 1e-12);
    }
}
