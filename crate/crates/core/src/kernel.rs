//! Covariance functions with log-parameterized hyperparameters.
//!
//! A [`Kernel`] is a single output variance times a product of stationary
//! factors, each acting on a contiguous slice of input coordinates. A plain
//! Matérn-1/2 kernel over 2D space is one factor over `0..2`; the space-time
//! kernel is a Matérn-1/2 factor over `0..2` times another over `2..3`.
//!
//! Hyperparameters are ordered `[log σ_f², log ℓ_0, log ℓ_1, ...]`.

use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inputs::InputSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Matern12,
    SquaredExponential,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelFactor {
    pub family: Family,
    pub log_lengthscale: f64,
    pub dims: Range<usize>,
}

impl KernelFactor {
    fn distance_term(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = self.dims.clone().map(|d| (a[d] - b[d]) * (a[d] - b[d])).sum();
        let ell = self.log_lengthscale.exp();
        match self.family {
            Family::Matern12 => r2.sqrt() / ell,
            Family::SquaredExponential => r2 / (ell * ell),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub log_variance: f64,
    factors: Vec<KernelFactor>,
    input_dim: usize,
}

impl Kernel {
    pub fn single(family: Family, variance: f64, lengthscale: f64, input_dim: usize) -> Self {
        Kernel {
            log_variance: variance.ln(),
            factors: vec![KernelFactor { family, log_lengthscale: lengthscale.ln(), dims: 0..input_dim }],
            input_dim,
        }
    }

    pub fn matern12(variance: f64, lengthscale: f64, input_dim: usize) -> Self {
        Kernel::single(Family::Matern12, variance, lengthscale, input_dim)
    }

    pub fn squared_exponential(variance: f64, lengthscale: f64, input_dim: usize) -> Self {
        Kernel::single(Family::SquaredExponential, variance, lengthscale, input_dim)
    }

    /// Product kernel; slices must be non-empty and disjoint.
    pub fn product(variance: f64, parts: Vec<(Family, f64, Range<usize>)>) -> Result<Self> {
        let input_dim = parts.iter().map(|p| p.2.end).max().unwrap_or(0);
        let mut covered = vec![false; input_dim];
        for (_, ell, r) in &parts {
            if r.is_empty() || *ell <= 0.0 {
                return Err(Error::config("kernel", "empty slice or non-positive lengthscale"));
            }
            for d in r.clone() {
                if covered[d] {
                    return Err(Error::config("kernel", format!("dimension {d} in two factors")));
                }
                covered[d] = true;
            }
        }
        Ok(Kernel {
            log_variance: variance.ln(),
            factors: parts
                .into_iter()
                .map(|(family, ell, dims)| KernelFactor { family, log_lengthscale: ell.ln(), dims })
                .collect(),
            input_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn factors(&self) -> &[KernelFactor] {
        &self.factors
    }

    pub fn variance(&self) -> f64 {
        self.log_variance.exp()
    }

    pub fn n_params(&self) -> usize {
        1 + self.factors.len()
    }

    pub fn params(&self) -> Vec<f64> {
        std::iter::once(self.log_variance).chain(self.factors.iter().map(|f| f.log_lengthscale)).collect()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params());
        self.log_variance = p[0];
        for (f, v) in self.factors.iter_mut().zip(&p[1..]) {
            f.log_lengthscale = *v;
        }
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for f in &self.factors {
            s += match f.family {
                Family::Matern12 => f.distance_term(a, b),
                Family::SquaredExponential => 0.5 * f.distance_term(a, b),
            };
        }
        self.log_variance.exp() * (-s).exp()
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        self.check(a.len())?;
        self.check(b.len())?;
        Ok(self.eval_unchecked(a, b))
    }

    fn check(&self, d: usize) -> Result<()> {
        if d != self.input_dim {
            return Err(Error::DimensionMismatch { expected: self.input_dim, found: d });
        }
        Ok(())
    }

    pub fn gram(&self, x: &InputSet, x2: &InputSet) -> Result<DMatrix<f64>> {
        if !x.is_empty() {
            self.check(x.dim())?;
        }
        if !x2.is_empty() {
            self.check(x2.dim())?;
        }
        Ok(DMatrix::from_fn(x.len(), x2.len(), |i, j| self.eval_unchecked(x.point(i), x2.point(j))))
    }

    /// Symmetric gram with exactly symmetric entries.
    pub fn gram_sym(&self, x: &InputSet) -> Result<DMatrix<f64>> {
        if !x.is_empty() {
            self.check(x.dim())?;
        }
        let n = x.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.eval_unchecked(x.point(i), x.point(j));
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        Ok(k)
    }

    /// Covariance vector between one point and a set.
    pub fn cross(&self, x: &[f64], set: &InputSet) -> Result<nalgebra::DVector<f64>> {
        self.check(x.len())?;
        if !set.is_empty() {
            self.check(set.dim())?;
        }
        Ok(nalgebra::DVector::from_fn(set.len(), |i, _| self.eval_unchecked(x, set.point(i))))
    }

    /// `dK/d(log θ_p)` for every hyperparameter, over `x × x`.
    pub fn gram_grad(&self, x: &InputSet) -> Result<Vec<DMatrix<f64>>> {
        self.gram_grad_cross(x, x)
    }

    /// `dK/d(log θ_p)` for every hyperparameter, over `x × x2`.
    pub fn gram_grad_cross(&self, x: &InputSet, x2: &InputSet) -> Result<Vec<DMatrix<f64>>> {
        let k = self.gram(x, x2)?;
        let mut out = Vec::with_capacity(self.n_params());
        out.push(k.clone());
        for f in &self.factors {
            // d exp(-r/ℓ)/d log ℓ = (r/ℓ)·exp(-r/ℓ); d exp(-r²/2ℓ²)/d log ℓ = (r²/ℓ²)·exp(-r²/2ℓ²)
            out.push(DMatrix::from_fn(x.len(), x2.len(), |i, j| {
                k[(i, j)] * f.distance_term(x.point(i), x2.point(j))
            }));
        }
        Ok(out)
    }
}

/// Observation noise, stored as `log σ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub log_sigma: f64,
}

impl NoiseModel {
    pub fn new(sigma: f64) -> Self {
        NoiseModel { log_sigma: sigma.ln() }
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    pub fn variance(&self) -> f64 {
        (2.0 * self.log_sigma).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::Solver;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> InputSet {
        InputSet::from_flat(dim, (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matern_closed_forms() {
        let k = Kernel::matern12(1.0, 1.0, 2);
        assert_eq!(k.eval(&[0.3, 0.2], &[0.3, 0.2]).unwrap(), 1.0);
        let v = k.eval(&[0.0, 0.0], &[0.6, 0.8]).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        assert!((v - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn space_time_product() {
        let k = Kernel::product(
            1.0,
            vec![(Family::Matern12, 1.0, 0..2), (Family::Matern12, 1.0, 2..3)],
        )
        .unwrap();
        let v = k.eval(&[0.0, 0.0, 0.0], &[1.0, 0.0, 1.0]).unwrap();
        assert!((v - (-2.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn eval_dimension_mismatch() {
        let k = Kernel::matern12(1.0, 1.0, 2);
        assert!(matches!(k.eval(&[0.0], &[0.0, 1.0]), Err(Error::DimensionMismatch { .. })));
        let x = InputSet::from_flat(3, vec![0.0; 3]).unwrap();
        assert!(k.gram(&x, &x).is_err());
    }

    #[test]
    fn gram_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_set(10, 2, &mut rng);
        for k in [Kernel::matern12(2.5, 0.4, 2), Kernel::squared_exponential(0.7, 0.3, 2)] {
            let g = k.gram(&x, &x).unwrap();
            for i in 0..10 {
                assert!((g[(i, i)] - k.variance()).abs() < 1e-14);
                for j in 0..10 {
                    assert_eq!(g[(i, j)], g[(j, i)]);
                }
            }
            let eig = g.symmetric_eigenvalues();
            assert!(eig.min() >= -1e-10);
            let one = x.select(&[3]);
            assert_eq!(k.gram(&one, &one).unwrap()[(0, 0)], k.eval(x.point(3), x.point(3)).unwrap());
        }
    }

    #[test]
    fn gram_psd_after_jitter_up_to_100_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_set(100, 2, &mut rng);
        let k = Kernel::squared_exponential(1.0, 0.8, 2);
        let g = k.gram_sym(&x).unwrap();
        assert!(Solver::default().cholesky(&g, "test").is_ok());
    }

    #[test]
    fn log_variance_gradient_is_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_set(6, 2, &mut rng);
        let k = Kernel::matern12(1.7, 0.5, 2);
        let g = k.gram_grad(&x).unwrap();
        assert_eq!(g[0], k.gram(&x, &x).unwrap());
    }

    #[test]
    fn matern_lengthscale_gradient_closed_form() {
        let k = Kernel::matern12(2.0, 0.5, 1);
        let x = InputSet::from_flat(1, vec![0.0, 0.3, 0.3]).unwrap();
        let g = k.gram_grad(&x).unwrap();
        let r: f64 = 0.3;
        let expected = 2.0 * (r / 0.5) * (-r / 0.5).exp();
        assert!((g[1][(0, 1)] - expected).abs() < 1e-14);
        // coincident inputs: gradient defined as zero
        assert_eq!(g[1][(1, 2)], 0.0);
    }

    fn finite_difference_check(k: &Kernel, x: &InputSet) -> f64 {
        let h = 1e-6;
        let grads = k.gram_grad(x).unwrap();
        let base = k.params();
        let mut worst = 0.0f64;
        for p in 0..k.n_params() {
            let mut kp = k.clone();
            let mut km = k.clone();
            let mut up = base.clone();
            let mut dn = base.clone();
            up[p] += h;
            dn[p] -= h;
            kp.set_params(&up);
            km.set_params(&dn);
            let fd = (kp.gram(x, x).unwrap() - km.gram(x, x).unwrap()) / (2.0 * h);
            let scale = fd.amax().max(1e-3);
            worst = worst.max((&grads[p] - &fd).amax() / scale);
        }
        worst
    }

    #[test]
    fn gram_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let k = match trial % 3 {
                0 => Kernel::matern12(rng.random_range(0.3..3.0), rng.random_range(0.2..2.0), 2),
                1 => Kernel::squared_exponential(rng.random_range(0.3..3.0), rng.random_range(0.2..2.0), 2),
                _ => Kernel::product(
                    rng.random_range(0.3..3.0),
                    vec![
                        (Family::Matern12, rng.random_range(0.2..2.0), 0..2),
                        (Family::Matern12, rng.random_range(0.2..2.0), 2..3),
                    ],
                )
                .unwrap(),
            };
            let x = random_set(7, k.input_dim(), &mut rng);
            let err = finite_difference_check(&k, &x);
            assert!(err < 1e-5, "trial {trial}: relative error {err}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn eval_is_exactly_symmetric(
                a in prop::collection::vec(-2.0f64..2.0, 3),
                b in prop::collection::vec(-2.0f64..2.0, 3),
                ell in 0.1f64..3.0,
            ) {
                let k = Kernel::product(1.3, vec![(Family::Matern12, ell, 0..2), (Family::SquaredExponential, 0.5, 2..3)]).unwrap();
                prop_assert_eq!(k.eval(&a, &b).unwrap(), k.eval(&b, &a).unwrap());
                prop_assert!((k.eval(&a, &a).unwrap() - 1.3).abs() < 1e-14);
            }
        }
    }
}
