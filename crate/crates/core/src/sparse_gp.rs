//! FITC sparse GP building blocks: prior and conditional factors over inducing
//! variables, observation factors, prediction, inducing-point selection and
//! retirement, and the FITC log marginal likelihood.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{symmetrize, Factored, InfoGaussian, MomentGaussian, Solver};
use crate::graph::EnergyModel;
use crate::inputs::InputSet;
use crate::kernel::{Kernel, NoiseModel};

/// Unary prior `N(0, K_zz)` on the inducing values, in information form.
pub fn prior_factor(z: &InputSet, kernel: &Kernel, solver: &Solver) -> Result<InfoGaussian> {
    if z.is_empty() {
        return Err(Error::DimensionMismatch { expected: 1, found: 0 });
    }
    let k = kernel.gram_sym(z)?;
    let f = solver.cholesky(&k, "factorizing the inducing prior")?;
    Ok(InfoGaussian { eta: DVector::zeros(z.len()), lambda: f.inverse() })
}

/// Pairwise factor `p(u_child | u_parent)` over the stacked vector `[u_child, u_parent]`.
pub fn conditional_factor(
    z_child: &InputSet,
    z_parent: &InputSet,
    kernel: &Kernel,
    solver: &Solver,
) -> Result<InfoGaussian> {
    if z_child.is_empty() || z_parent.is_empty() {
        return Err(Error::DimensionMismatch { expected: 1, found: 0 });
    }
    let (mc, mp) = (z_child.len(), z_parent.len());
    let kpp = kernel.gram_sym(z_parent)?;
    let kcp = kernel.gram(z_child, z_parent)?;
    let kcc = kernel.gram_sym(z_child)?;
    let fpp = solver.cholesky(&kpp, "factorizing the parent prior")?;
    // A = K_cp K_pp⁻¹
    let a = fpp.solve(&kcp.transpose()).transpose();
    let q = symmetrize(&kcc - &a * kcp.transpose());
    let scale = kcc.diagonal().amax().max(f64::MIN_POSITIVE);
    let qinv = solver.cholesky_scaled(&q, scale, "factorizing the conditional covariance")?.inverse();
    let qa = &qinv * &a;
    let mut lam = DMatrix::zeros(mc + mp, mc + mp);
    lam.view_mut((0, 0), (mc, mc)).copy_from(&qinv);
    lam.view_mut((0, mc), (mc, mp)).copy_from(&(-&qa));
    lam.view_mut((mc, 0), (mp, mc)).copy_from(&(-qa.transpose()));
    lam.view_mut((mc, mc), (mp, mp)).copy_from(&symmetrize(a.transpose() * &qa));
    Ok(InfoGaussian { eta: DVector::zeros(mc + mp), lambda: lam })
}

/// Pairwise factor `p(u_a, u_b) / (p(u_a) p(u_b))` over `[u_a, u_b]`: the
/// correlation between two blocks whose priors are already in the graph.
pub fn coupling_factor(z_a: &InputSet, z_b: &InputSet, kernel: &Kernel, solver: &Solver) -> Result<InfoGaussian> {
    let mut joint_z = z_a.clone();
    joint_z.extend(z_b)?;
    let (ma, mb) = (z_a.len(), z_b.len());
    let joint = prior_factor(&joint_z, kernel, solver)?;
    let pa = prior_factor(z_a, kernel, solver)?;
    let pb = prior_factor(z_b, kernel, solver)?;
    let mut lam = joint.lambda;
    let mut va = lam.view_mut((0, 0), (ma, ma));
    va -= &pa.lambda;
    let mut vb = lam.view_mut((ma, ma), (mb, mb));
    vb -= &pb.lambda;
    Ok(InfoGaussian { eta: DVector::zeros(ma + mb), lambda: symmetrize(lam) })
}

/// Projection of inputs onto a fixed inducing set: `a = K_zz⁻¹ k_z(x)` and the
/// conditional prior variance `c = k(x,x) − k_z(x)ᵀ a`.
#[derive(Debug, Clone)]
pub struct Projector {
    kernel: Kernel,
    z: InputSet,
    kzz: Factored,
}

impl Projector {
    pub fn new(z: &InputSet, kernel: &Kernel, solver: &Solver) -> Result<Self> {
        if z.is_empty() {
            return Err(Error::DimensionMismatch { expected: 1, found: 0 });
        }
        let k = kernel.gram_sym(z)?;
        let kzz = solver.cholesky(&k, "factorizing the inducing prior")?;
        Ok(Projector { kernel: kernel.clone(), z: z.clone(), kzz })
    }

    pub fn inducing(&self) -> &InputSet {
        &self.z
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    /// Columns `a_n` for each input and the clipped conditional variances `c_n`.
    pub fn project(&self, xs: &InputSet) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let kzx = self.kernel.gram(&self.z, xs)?;
        let a = self.kzz.solve(&kzx);
        let c = DVector::from_fn(xs.len(), |n, _| {
            let x = xs.point(n);
            (self.kernel.eval_unchecked(x, x) - kzx.column(n).dot(&a.column(n))).max(0.0)
        });
        Ok((a, c))
    }

    /// Unary FITC factor of one continuous observation, with `f(x)` integrated out.
    pub fn observation_factor(&self, x: &[f64], y: f64, noise_var: f64) -> Result<InfoGaussian> {
        let xs = InputSet::from_flat(x.len(), x.to_vec())?;
        self.observation_factor_batch(&xs, &[y], noise_var)
    }

    /// Sum of the unary FITC factors of a batch of continuous observations.
    pub fn observation_factor_batch(&self, xs: &InputSet, ys: &[f64], noise_var: f64) -> Result<InfoGaussian> {
        if xs.len() != ys.len() {
            return Err(Error::DimensionMismatch { expected: xs.len(), found: ys.len() });
        }
        let m = self.z.len();
        let mut lambda = DMatrix::zeros(m, m);
        let mut eta = DVector::zeros(m);
        let ids: Vec<usize> = (0..xs.len()).collect();
        for chunk in ids.chunks(OBS_CHUNK) {
            let (a, c) = self.project(&xs.select(chunk))?;
            let mut aw = a.clone();
            for (n, mut col) in aw.column_iter_mut().enumerate() {
                col /= c[n] + noise_var;
            }
            lambda += &aw * a.transpose();
            eta += aw * DVector::from_iterator(chunk.len(), chunk.iter().map(|&i| ys[i]));
        }
        Ok(InfoGaussian { eta, lambda: symmetrize(lambda) })
    }

    /// Predictive mean and variance of `f` at each input given a belief over `u`.
    pub fn predict(&self, xs: &InputSet, belief: &MomentGaussian) -> Result<(Vec<f64>, Vec<f64>)> {
        if belief.dim() != self.z.len() {
            return Err(Error::DimensionMismatch { expected: self.z.len(), found: belief.dim() });
        }
        let kzx = self.kernel.gram(&self.z, xs)?;
        let a = self.kzz.solve(&kzx);
        let means = a.transpose() * &belief.mu;
        let sa = &belief.sigma * &a;
        let mut vars = Vec::with_capacity(xs.len());
        for n in 0..xs.len() {
            let x = xs.point(n);
            let prior = self.kernel.eval_unchecked(x, x);
            let v = prior - kzx.column(n).dot(&a.column(n)) + a.column(n).dot(&sa.column(n));
            vars.push(v.max(0.0));
        }
        Ok((means.iter().copied().collect(), vars))
    }

    pub fn predict_one(&self, x: &[f64], belief: &MomentGaussian) -> Result<(f64, f64)> {
        let xs = InputSet::from_flat(x.len(), x.to_vec())?;
        let (m, v) = self.predict(&xs, belief)?;
        Ok((m[0], v[0]))
    }
}

/// Prior plus every observation factor: the batch FITC posterior over `u`.
pub fn fit_batch(
    z: &InputSet,
    kernel: &Kernel,
    noise: &NoiseModel,
    xs: &InputSet,
    ys: &[f64],
    solver: &Solver,
) -> Result<InfoGaussian> {
    let mut post = prior_factor(z, kernel, solver)?;
    if !xs.is_empty() {
        let p = Projector::new(z, kernel, solver)?;
        post.accumulate(&p.observation_factor_batch(xs, ys, noise.variance())?);
    }
    Ok(post)
}

fn sigmoid(f: f64) -> f64 {
    if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    }
}

/// Observations projected per block when building batch factors.
const OBS_CHUNK: usize = 2048;

/// Floor on the Bernoulli variance so saturated points keep a finite pseudo-target.
const MIN_BERNOULLI_VAR: f64 = 1e-6;

/// A batch of binary observations with binary cross-entropy energy on
/// `σ(f(x))`. Linearizing at a belief mean gives a Gaussian unary factor on `u`
/// with precision `p(1-p)` per observation, inflated by the FITC conditional
/// variance.
#[derive(Debug, Clone)]
pub struct BceBatch {
    a: DMatrix<f64>,
    c: DVector<f64>,
    y: DVector<f64>,
}

impl BceBatch {
    pub fn new(projector: &Projector, xs: &InputSet, ys: &[f64]) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::DimensionMismatch { expected: xs.len(), found: ys.len() });
        }
        let (a, c) = projector.project(xs)?;
        Ok(BceBatch { a, c, y: DVector::from_column_slice(ys) })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

impl EnergyModel for BceBatch {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn linearize(&self, point: &DVector<f64>) -> InfoGaussian {
        let f0 = self.a.transpose() * point;
        let mut aw = self.a.clone();
        let mut wt = DVector::zeros(self.y.len());
        for n in 0..self.y.len() {
            let p = sigmoid(f0[n]);
            let v = (p * (1.0 - p)).max(MIN_BERNOULLI_VAR);
            let target = f0[n] + (self.y[n] - p) / v;
            let w = 1.0 / (self.c[n] + 1.0 / v);
            aw.column_mut(n).scale_mut(w);
            wt[n] = target;
        }
        let lambda = symmetrize(&aw * self.a.transpose());
        let eta = aw * wt;
        InfoGaussian { eta, lambda }
    }
}

/// One robot's inducing inputs, their insertion times, and the unary factor
/// holding every fused-and-discarded observation.
#[derive(Debug, Clone, PartialEq)]
pub struct InducingBlock {
    pub z: InputSet,
    pub stamps: Vec<u64>,
    pub accumulator: InfoGaussian,
}

impl InducingBlock {
    pub fn new(z: InputSet, stamp: u64) -> Self {
        let n = z.len();
        InducingBlock { z, stamps: vec![stamp; n], accumulator: InfoGaussian::zeros(n) }
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// Absorbs a unary factor into the accumulator.
    pub fn fuse(&mut self, factor: &InfoGaussian) -> Result<()> {
        if factor.dim() != self.accumulator.dim() {
            return Err(Error::DimensionMismatch { expected: self.accumulator.dim(), found: factor.dim() });
        }
        self.accumulator.accumulate(factor);
        Ok(())
    }

    /// Appends an inducing point; the accumulator gains a zero row and column.
    /// Returns the coordinate map from the old to the new variable.
    pub fn add_point(&mut self, x: &[f64], stamp: u64) -> Result<Vec<Option<usize>>> {
        self.z.push(x)?;
        let last = self.stamps.last().copied().unwrap_or(0);
        self.stamps.push(stamp.max(last));
        let n = self.z.len();
        let map: Vec<Option<usize>> = (0..n).map(|i| if i + 1 < n { Some(i) } else { None }).collect();
        self.accumulator = self.accumulator.remap(&map);
        Ok(map)
    }

    /// Drops the oldest points beyond `max_count`, marginalizing the
    /// prior-plus-accumulator joint onto the survivors and re-expressing the
    /// result relative to the survivors' prior. Returns the kept indices, or
    /// `None` when nothing was removed.
    pub fn retire(&mut self, max_count: usize, kernel: &Kernel, solver: &Solver) -> Result<Option<Vec<usize>>> {
        let max_count = max_count.max(1);
        let n = self.len();
        if n <= max_count {
            return Ok(None);
        }
        let keep: Vec<usize> = (n - max_count..n).collect();
        let mut joint = prior_factor(&self.z, kernel, solver)?;
        joint.accumulate(&self.accumulator);
        let marg = joint.marginalize_with(&keep, solver)?;
        let z_keep = self.z.select(&keep);
        let prior_keep = prior_factor(&z_keep, kernel, solver)?;
        self.accumulator = marg.quotient(&prior_keep)?;
        self.z = z_keep;
        self.stamps = keep.iter().map(|&i| self.stamps[i]).collect();
        Ok(Some(keep))
    }
}

/// Greedy variance selection: repeatedly picks the candidate with the largest
/// conditional prior variance given the inducing set plus earlier picks.
/// Returns candidate indices in pick order; ties go to the lowest index.
pub fn greedy_variance_select(
    candidates: &InputSet,
    z: &InputSet,
    kernel: &Kernel,
    count: usize,
    solver: &Solver,
) -> Result<Vec<usize>> {
    Ok(greedy_variance_select_scored(candidates, z, kernel, count, solver)?.into_iter().map(|(i, _)| i).collect())
}

/// As [`greedy_variance_select`], also returning each pick's conditional variance
/// at the time it was chosen.
pub fn greedy_variance_select_scored(
    candidates: &InputSet,
    z: &InputSet,
    kernel: &Kernel,
    count: usize,
    solver: &Solver,
) -> Result<Vec<(usize, f64)>> {
    let n = candidates.len();
    let count = count.min(n);
    if count == 0 {
        return Ok(Vec::new());
    }
    // rows of L⁻¹ K_zc, extended by one row per pick (incremental Cholesky)
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut score: Vec<f64> = (0..n).map(|j| kernel.eval_unchecked(candidates.point(j), candidates.point(j))).collect();
    if !z.is_empty() {
        let kzz = solver.cholesky(&kernel.gram_sym(z)?, "factorizing the inducing prior")?;
        let kzc = kernel.gram(z, candidates)?;
        let chol = kzz.cholesky().expect("cholesky path");
        let v = chol.l().solve_lower_triangular(&kzc).expect("nonsingular factor");
        for r in v.row_iter() {
            rows.push(r.transpose());
        }
        for (j, s) in score.iter_mut().enumerate() {
            *s -= v.column(j).norm_squared();
        }
    }
    let mut chosen = Vec::with_capacity(count);
    let mut taken = vec![false; n];
    for _ in 0..count {
        let mut best = None;
        for j in 0..n {
            if taken[j] {
                continue;
            }
            match best {
                None => best = Some(j),
                Some(b) if score[j].max(0.0) > score[b].max(0.0) => best = Some(j),
                _ => {}
            }
        }
        let p = best.expect("untaken candidate remains");
        taken[p] = true;
        chosen.push((p, score[p].max(0.0)));
        let prior_p = kernel.eval_unchecked(candidates.point(p), candidates.point(p));
        if score[p] <= 1e-12 * prior_p.max(f64::MIN_POSITIVE) {
            // no new direction: later scores are unchanged
            continue;
        }
        let d = score[p].sqrt();
        let mut row = DVector::zeros(n);
        for j in 0..n {
            let mut v = kernel.eval_unchecked(candidates.point(p), candidates.point(j));
            for r in &rows {
                v -= r[p] * r[j];
            }
            row[j] = v / d;
        }
        for j in 0..n {
            score[j] -= row[j] * row[j];
        }
        rows.push(row);
    }
    Ok(chosen)
}

/// FITC log marginal likelihood and its gradient with respect to the kernel's
/// log-parameters followed by `log σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMarginal {
    pub value: f64,
    pub grad: Vec<f64>,
}

pub fn fitc_log_marginal(
    xs: &InputSet,
    ys: &[f64],
    z: &InputSet,
    kernel: &Kernel,
    noise: &NoiseModel,
    solver: &Solver,
) -> Result<LogMarginal> {
    let n = xs.len();
    if n == 0 {
        return Err(Error::DimensionMismatch { expected: 1, found: 0 });
    }
    if ys.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: ys.len() });
    }
    let kzz = kernel.gram_sym(z)?;
    let fzz = solver.cholesky(&kzz, "factorizing the inducing prior")?;
    let kzx = kernel.gram(z, xs)?;
    let a = fzz.solve(&kzx);
    let s2 = noise.variance();
    let mut c = symmetrize(kzx.transpose() * &a);
    let kxx: Vec<f64> = (0..n).map(|i| kernel.eval_unchecked(xs.point(i), xs.point(i))).collect();
    for i in 0..n {
        c[(i, i)] = kxx[i] + s2;
    }
    let fc = solver.cholesky(&c, "factorizing the FITC marginal covariance")?;
    let y = DVector::from_column_slice(ys);
    let alpha = fc.solve_vec(&y);
    let value =
        -0.5 * y.dot(&alpha) - 0.5 * fc.log_det().unwrap() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    let w = &alpha * alpha.transpose() - fc.inverse();
    let dzz = kernel.gram_grad(z)?;
    let dzx = kernel.gram_grad_cross(z, xs)?;
    let mut grad = Vec::with_capacity(kernel.n_params() + 1);
    for p in 0..kernel.n_params() {
        let t = dzx[p].transpose() * &a;
        let mut dc = &t + t.transpose() - a.transpose() * &dzz[p] * &a;
        for i in 0..n {
            // diagonal of C is k(x,x) + σ²: only the variance parameter moves it
            dc[(i, i)] = if p == 0 { kxx[i] } else { 0.0 };
        }
        grad.push(0.5 * w.component_mul(&dc).sum());
    }
    grad.push(0.5 * w.trace() * 2.0 * s2);
    Ok(LogMarginal { value, grad })
}

/// Full-rank GP regression, used as a reference for the sparse model.
#[derive(Debug, Clone)]
pub struct ExactGp {
    x: InputSet,
    y: DVector<f64>,
    kernel: Kernel,
    noise_var: f64,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    alpha: DVector<f64>,
}

impl ExactGp {
    pub fn new(x: &InputSet, y: &[f64], kernel: &Kernel, noise_var: f64) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch { expected: x.len(), found: y.len() });
        }
        let mut k = kernel.gram_sym(x)?;
        for i in 0..x.len() {
            k[(i, i)] += noise_var;
        }
        let chol = nalgebra::Cholesky::new(k).ok_or(Error::SingularPrecision { context: "exact GP covariance" })?;
        let y = DVector::from_column_slice(y);
        let alpha = chol.solve(&y);
        Ok(ExactGp { x: x.clone(), y, kernel: kernel.clone(), noise_var, chol, alpha })
    }

    /// Posterior mean and variance of the latent function at `xs`.
    pub fn predict(&self, xs: &InputSet) -> Result<(Vec<f64>, Vec<f64>)> {
        let ks = self.kernel.gram(&self.x, xs)?;
        let mean = ks.transpose() * &self.alpha;
        let v = self.chol.solve(&ks);
        let var = (0..xs.len())
            .map(|j| self.kernel.eval_unchecked(xs.point(j), xs.point(j)) - ks.column(j).dot(&v.column(j)))
            .collect();
        Ok((mean.iter().copied().collect(), var))
    }

    pub fn log_marginal(&self) -> f64 {
        let n = self.y.len() as f64;
        let logdet = 2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        -0.5 * self.y.dot(&self.alpha) - 0.5 * logdet - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }
}
