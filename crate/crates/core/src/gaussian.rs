//! Gaussian algebra in information (canonical) form.
//!
//! Every factor, message and belief in the engine is an [`InfoGaussian`]:
//! an information vector `eta = Σ⁻¹μ` and a precision `lambda = Σ⁻¹`. Products
//! are parameter sums, and marginalization is a Schur complement.
//!
//! All inversions go through [`Solver`], which factorizes symmetrically and
//! only adds diagonal jitter when a plain factorization fails or is too poorly
//! conditioned.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};

use crate::error::{Error, Result};

/// Default relative diagonal jitter used when a factorization needs help.
pub const DEFAULT_JITTER: f64 = 1e-8;

/// Symmetric-factorization policy shared by every inversion in the crate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Solver {
    /// First jitter level, relative to the largest diagonal magnitude.
    pub jitter: f64,
    /// Squared pivot ratio below which a Cholesky factor counts as singular.
    pub cond_floor: f64,
    /// Number of ×10 jitter escalations attempted before giving up.
    pub escalations: u32,
}

impl Default for Solver {
    fn default() -> Self {
        Solver { jitter: DEFAULT_JITTER, cond_floor: 1e-14, escalations: 6 }
    }
}

/// A symmetric factorization, possibly of a jittered matrix.
#[derive(Debug, Clone)]
pub enum Factored {
    Cholesky { chol: Cholesky<f64, Dyn>, jitter: f64 },
    /// Fallback for invertible but indefinite matrices (transient loopy messages).
    Lu(LU<f64, Dyn, Dyn>),
}

impl Factored {
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Factored::Cholesky { chol, .. } => chol.solve(b),
            Factored::Lu(lu) => lu.solve(b).expect("LU factor checked invertible"),
        }
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            Factored::Cholesky { chol, .. } => chol.solve(b),
            Factored::Lu(lu) => lu.solve(b).expect("LU factor checked invertible"),
        }
    }

    /// Jitter added to the diagonal before factorization (0 when none was needed).
    pub fn jitter(&self) -> f64 {
        match self {
            Factored::Cholesky { jitter, .. } => *jitter,
            Factored::Lu(_) => 0.0,
        }
    }

    pub fn cholesky(&self) -> Option<&Cholesky<f64, Dyn>> {
        match self {
            Factored::Cholesky { chol, .. } => Some(chol),
            Factored::Lu(_) => None,
        }
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = match self {
            Factored::Cholesky { chol, .. } => chol.l_dirty().nrows(),
            Factored::Lu(lu) => lu.l().nrows(),
        };
        symmetrize(self.solve(&DMatrix::identity(n, n)))
    }

    /// log|A| of the factorized (jittered) matrix; only defined for Cholesky.
    pub fn log_det(&self) -> Option<f64> {
        self.cholesky().map(|c| 2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
    }
}

fn pivots_ok(chol: &Cholesky<f64, Dyn>, floor: f64) -> bool {
    let diag = chol.l_dirty().diagonal();
    if diag.is_empty() {
        return true;
    }
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for &d in diag.iter() {
        if !d.is_finite() {
            return false;
        }
        lo = lo.min(d.abs());
        hi = hi.max(d.abs());
    }
    hi > 0.0 && (lo * lo) >= floor * (hi * hi)
}

fn diag_scale(m: &DMatrix<f64>) -> f64 {
    let s = m.diagonal().iter().fold(0.0f64, |acc, d| acc.max(d.abs()));
    if s > 0.0 && s.is_finite() { s } else { 1.0 }
}

impl Solver {
    /// Cholesky with escalating jitter; fails with `SingularPrecision` if even the
    /// largest jitter level does not give an acceptable factor.
    pub fn cholesky(&self, m: &DMatrix<f64>, context: &'static str) -> Result<Factored> {
        self.cholesky_scaled(m, diag_scale(m), context)
    }

    /// Like [`Solver::cholesky`] with jitter relative to `scale` instead of the
    /// matrix's own diagonal (useful for near-zero Schur complements).
    pub fn cholesky_scaled(&self, m: &DMatrix<f64>, scale: f64, context: &'static str) -> Result<Factored> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch { expected: m.nrows(), found: m.ncols() });
        }
        if let Some(chol) = Cholesky::new(m.clone()) {
            if pivots_ok(&chol, self.cond_floor) {
                return Ok(Factored::Cholesky { chol, jitter: 0.0 });
            }
        }
        let mut level = self.jitter * scale;
        for _ in 0..=self.escalations {
            let mut jittered = m.clone();
            for i in 0..m.nrows() {
                jittered[(i, i)] += level;
            }
            if let Some(chol) = Cholesky::new(jittered) {
                if pivots_ok(&chol, self.cond_floor) {
                    return Ok(Factored::Cholesky { chol, jitter: level });
                }
            }
            level *= 10.0;
        }
        Err(Error::SingularPrecision { context })
    }

    /// Like [`Solver::cholesky`] but falls back to LU for invertible indefinite matrices.
    pub fn factor(&self, m: &DMatrix<f64>, context: &'static str) -> Result<Factored> {
        match self.cholesky(m, context) {
            Ok(f) => Ok(f),
            Err(e) => {
                let lu = LU::new(m.clone());
                // pivots, not the determinant: the latter overflows for large blocks
                let u = lu.u();
                let scale = m.amax();
                let usable = (0..u.nrows()).all(|i| u[(i, i)].is_finite() && u[(i, i)].abs() > scale * f64::EPSILON);
                if usable {
                    return Ok(Factored::Lu(lu));
                }
                Err(e)
            }
        }
    }
}

/// Returns `(m + mᵀ) / 2`.
pub fn symmetrize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// A Gaussian in natural parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoGaussian {
    pub eta: DVector<f64>,
    pub lambda: DMatrix<f64>,
}

/// A Gaussian in moment parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentGaussian {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl InfoGaussian {
    pub fn new(eta: DVector<f64>, lambda: DMatrix<f64>) -> Result<Self> {
        if lambda.nrows() != lambda.ncols() {
            return Err(Error::DimensionMismatch { expected: lambda.nrows(), found: lambda.ncols() });
        }
        if eta.len() != lambda.nrows() {
            return Err(Error::DimensionMismatch { expected: lambda.nrows(), found: eta.len() });
        }
        Ok(InfoGaussian { eta, lambda })
    }

    /// The zero-information Gaussian, neutral element of [`InfoGaussian::product`].
    pub fn zeros(dim: usize) -> Self {
        InfoGaussian { eta: DVector::zeros(dim), lambda: DMatrix::zeros(dim, dim) }
    }

    pub fn dim(&self) -> usize {
        self.eta.len()
    }

    pub fn is_zero(&self) -> bool {
        self.eta.iter().all(|v| *v == 0.0) && self.lambda.iter().all(|v| *v == 0.0)
    }

    pub fn to_moments(&self) -> Result<MomentGaussian> {
        self.to_moments_with(&Solver::default())
    }

    pub fn to_moments_with(&self, solver: &Solver) -> Result<MomentGaussian> {
        let f = solver.cholesky(&self.lambda, "converting precision to covariance")?;
        let mu = f.solve_vec(&self.eta);
        let sigma = f.inverse();
        Ok(MomentGaussian { mu, sigma })
    }

    /// Mean only, without forming the covariance.
    pub fn mean_with(&self, solver: &Solver) -> Result<DVector<f64>> {
        let f = solver.cholesky(&self.lambda, "solving for the mean")?;
        Ok(f.solve_vec(&self.eta))
    }

    pub fn product(&self, other: &InfoGaussian) -> Result<InfoGaussian> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: other.dim() });
        }
        Ok(InfoGaussian { eta: &self.eta + &other.eta, lambda: &self.lambda + &other.lambda })
    }

    /// In-place product; panics on dimension mismatch (internal use).
    pub fn accumulate(&mut self, other: &InfoGaussian) {
        assert_eq!(self.dim(), other.dim(), "accumulating Gaussians of different dimension");
        self.eta += &other.eta;
        self.lambda += &other.lambda;
    }

    /// Parameter difference `self / other` (message division).
    pub fn quotient(&self, other: &InfoGaussian) -> Result<InfoGaussian> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: other.dim() });
        }
        Ok(InfoGaussian { eta: &self.eta - &other.eta, lambda: &self.lambda - &other.lambda })
    }

    pub fn marginalize(&self, keep: &[usize]) -> Result<InfoGaussian> {
        self.marginalize_with(keep, &Solver::default())
    }

    /// Schur-complement marginalization onto `keep` (order preserved as given).
    pub fn marginalize_with(&self, keep: &[usize], solver: &Solver) -> Result<InfoGaussian> {
        let d = self.dim();
        let mut kept = vec![false; d];
        for &k in keep {
            if k >= d {
                return Err(Error::DimensionMismatch { expected: d, found: k + 1 });
            }
            kept[k] = true;
        }
        let elim: Vec<usize> = (0..d).filter(|i| !kept[*i]).collect();
        let eta_k = self.eta.select_rows(keep);
        let lam_kk = self.lambda.select_rows(keep).select_columns(keep);
        if elim.is_empty() {
            return Ok(InfoGaussian { eta: eta_k, lambda: lam_kk });
        }
        let lam_ke = self.lambda.select_rows(keep).select_columns(&elim);
        let lam_ee = self.lambda.select_rows(&elim).select_columns(&elim);
        let eta_e = self.eta.select_rows(&elim);
        let f = solver.factor(&lam_ee, "eliminating variables")?;
        // [Λ_ee⁻¹ Λ_ek | Λ_ee⁻¹ η_e] in one solve
        let mut rhs = DMatrix::zeros(elim.len(), keep.len() + 1);
        rhs.view_mut((0, 0), (elim.len(), keep.len())).copy_from(&lam_ke.transpose());
        rhs.set_column(keep.len(), &eta_e);
        let sol = f.solve(&rhs);
        let x = sol.columns(0, keep.len());
        let y = sol.column(keep.len());
        let lambda = symmetrize(lam_kk - &lam_ke * x);
        let eta = eta_k - &lam_ke * y;
        Ok(InfoGaussian { eta, lambda })
    }

    /// Re-indexes the Gaussian onto `new_dim` coordinates: coordinate `i` of the
    /// result takes old coordinate `map[i]`, or carries zero information if `None`.
    /// Old coordinates not mentioned are dropped by truncation (callers that need
    /// marginalization must do it first).
    pub fn remap(&self, map: &[Option<usize>]) -> InfoGaussian {
        let n = map.len();
        let mut out = InfoGaussian::zeros(n);
        for (i, oi) in map.iter().enumerate() {
            let Some(oi) = *oi else { continue };
            out.eta[i] = self.eta[oi];
            for (j, oj) in map.iter().enumerate() {
                if let Some(oj) = *oj {
                    out.lambda[(i, j)] = self.lambda[(oi, oj)];
                }
            }
        }
        out
    }

    /// Places this Gaussian at `offset` inside a zero-information Gaussian of size `dim`.
    pub fn embed(&self, dim: usize, offset: usize) -> InfoGaussian {
        let mut out = InfoGaussian::zeros(dim);
        let d = self.dim();
        out.eta.rows_mut(offset, d).copy_from(&self.eta);
        out.lambda.view_mut((offset, offset), (d, d)).copy_from(&self.lambda);
        out
    }

    pub fn max_abs_diff(&self, other: &InfoGaussian) -> f64 {
        let de = (&self.eta - &other.eta).amax();
        let dl = (&self.lambda - &other.lambda).amax();
        de.max(dl)
    }
}

impl MomentGaussian {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        if sigma.nrows() != sigma.ncols() || sigma.nrows() != mu.len() {
            return Err(Error::DimensionMismatch { expected: mu.len(), found: sigma.nrows() });
        }
        Ok(MomentGaussian { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn to_information(&self) -> Result<InfoGaussian> {
        self.to_information_with(&Solver::default())
    }

    pub fn to_information_with(&self, solver: &Solver) -> Result<InfoGaussian> {
        let f = solver.cholesky(&self.sigma, "inverting covariance")?;
        let lambda = f.inverse();
        let eta = f.solve_vec(&self.mu);
        Ok(InfoGaussian { eta, lambda })
    }
}
