//! Gridded ground-truth fields.
//!
//! Binary layout (all little-endian):
//!
//! | offset | size | content                                              |
//! |--------|------|------------------------------------------------------|
//! | 0      | 8    | magic `GPFIELD1`                                     |
//! | 8      | 24   | `nx`, `ny`, `nt` as `u64` (`nt = 0` for a static field) |
//! | 32     | 48   | `x0`, `x1`, `y0`, `y1`, `t0`, `dt` as `f64`          |
//! | 80     | ...  | `max(nt, 1)·ny·nx` values as `f64`                    |
//!
//! Values are slice-major, then row-major with `x` varying fastest. Masked
//! cells (e.g. land) are stored as NaN.

use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gaussian::Solver;
use crate::inputs::InputSet;
use crate::kernel::{Family, Kernel};
use crate::region::Rect;

const MAGIC: &[u8; 8] = b"GPFIELD1";
const HEADER_LEN: usize = 80;

/// Largest node count per axis accepted by [`sample_gp_field`].
pub const MAX_SAMPLE_RESOLUTION: usize = 80;

/// Time axis of a dynamic field: slice `k` covers `[t0 + k·dt, t0 + (k+1)·dt)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeAxis {
    pub t0: f64,
    pub dt: f64,
    pub slices: usize,
}

/// Scalar field on a regular node grid, optionally piecewise constant in time.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    pub extents: Rect,
    pub nx: usize,
    pub ny: usize,
    pub time: Option<TimeAxis>,
    /// `slices·ny·nx` values; NaN marks an invalid (masked) node.
    pub values: Vec<f64>,
}

fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

impl FieldGrid {
    pub fn new(extents: Rect, nx: usize, ny: usize, time: Option<TimeAxis>, values: Vec<f64>) -> Result<Self> {
        let slices = time.map(|t| t.slices).unwrap_or(1);
        if nx < 2 || ny < 2 || slices == 0 {
            return Err(Error::config("field.resolution", "need at least 2×2 nodes and one slice"));
        }
        if let Some(t) = time {
            if !(t.dt > 0.0) {
                return Err(Error::config("field.dt", "slice duration must be positive"));
            }
        }
        if values.len() != slices * nx * ny {
            return Err(Error::DimensionMismatch { expected: slices * nx * ny, found: values.len() });
        }
        Ok(FieldGrid { extents, nx, ny, time, values })
    }

    pub fn slices(&self) -> usize {
        self.time.map(|t| t.slices).unwrap_or(1)
    }

    pub fn node(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[(k * self.ny + j) * self.nx + i]
    }

    pub fn x_nodes(&self) -> Vec<f64> {
        axis(self.extents.x0, self.extents.x1, self.nx)
    }

    pub fn y_nodes(&self) -> Vec<f64> {
        axis(self.extents.y0, self.extents.y1, self.ny)
    }

    /// Slice holding time `t`; static fields ignore `t`.
    pub fn slice_at(&self, t: Option<f64>) -> Result<usize> {
        match (self.time, t) {
            (None, _) => Ok(0),
            (Some(ax), Some(t)) => {
                let k = ((t - ax.t0) / ax.dt).floor();
                if k < 0.0 || k >= ax.slices as f64 {
                    return Err(Error::OutOfExtent { x: t, y: f64::NAN });
                }
                Ok(k as usize)
            }
            (Some(_), None) => Err(Error::config("field.time", "dynamic field queried without a time")),
        }
    }

    /// Bilinear interpolation in space within the slice holding `t`.
    pub fn query(&self, x: &[f64], t: Option<f64>) -> Result<f64> {
        let e = &self.extents;
        if !e.contains(x) {
            return Err(Error::OutOfExtent { x: x[0], y: x[1] });
        }
        let k = self.slice_at(t)?;
        let fx = (x[0] - e.x0) / e.width() * (self.nx - 1) as f64;
        let fy = (x[1] - e.y0) / e.height() * (self.ny - 1) as f64;
        let i = (fx.floor() as usize).min(self.nx - 2);
        let j = (fy.floor() as usize).min(self.ny - 2);
        let (u, v) = (fx - i as f64, fy - j as f64);
        let w = [(1.0 - u) * (1.0 - v), u * (1.0 - v), (1.0 - u) * v, u * v];
        let n = [self.node(i, j, k), self.node(i + 1, j, k), self.node(i, j + 1, k), self.node(i + 1, j + 1, k)];
        // zero-weight nodes are skipped so masked neighbours do not leak in
        Ok(w.iter().zip(&n).filter(|(w, _)| **w != 0.0).map(|(w, n)| w * n).sum())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(HEADER_LEN + 8 * self.values.len());
        b.extend_from_slice(MAGIC);
        let nt = self.time.map(|t| t.slices).unwrap_or(0) as u64;
        for v in [self.nx as u64, self.ny as u64, nt] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        let (t0, dt) = self.time.map(|t| (t.t0, t.dt)).unwrap_or((0.0, 0.0));
        for v in [self.extents.x0, self.extents.x1, self.extents.y0, self.extents.y1, t0, dt] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.values {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Parse {
                offset: bytes.len(),
                message: format!("header needs {HEADER_LEN} bytes, found {}", bytes.len()),
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Parse { offset: 0, message: "bad magic, expected GPFIELD1".into() });
        }
        let u = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()) as usize;
        let f = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let (nx, ny, nt) = (u(8), u(16), u(24));
        let extents = Rect::new(f(32), f(48), f(40), f(56))
            .map_err(|_| Error::Parse { offset: 32, message: "degenerate extents".into() })?;
        let time = (nt > 0).then(|| TimeAxis { t0: f(64), dt: f(72), slices: nt });
        let count = nx
            .checked_mul(ny)
            .and_then(|c| c.checked_mul(nt.max(1)))
            .ok_or(Error::Parse { offset: 8, message: "grid size overflows".into() })?;
        let body = &bytes[HEADER_LEN..];
        if body.len() != 8 * count {
            return Err(Error::Parse {
                offset: HEADER_LEN + body.len().min(8 * count),
                message: format!("body should hold {} bytes ({count} values), found {}", 8 * count, body.len()),
            });
        }
        let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        FieldGrid::new(extents, nx, ny, time, values).map_err(|e| Error::Parse { offset: 8, message: e.to_string() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Reads a field and checks it covers `expected` extents when given.
    pub fn load(path: &Path, expected: Option<&Rect>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let f = FieldGrid::from_bytes(&bytes)?;
        if let Some(r) = expected {
            let e = &f.extents;
            if e.x0 > r.x0 || e.y0 > r.y0 || e.x1 < r.x1 || e.y1 < r.y1 {
                return Err(Error::ExtentMismatch(format!(
                    "field covers [{}, {}] × [{}, {}] but the run needs [{}, {}] × [{}, {}]",
                    e.x0, e.x1, e.y0, e.y1, r.x0, r.x1, r.y0, r.y1
                )));
            }
        }
        Ok(f)
    }
}

/// Draws `L·ξ` on a Cartesian grid, applying the Cholesky factor of each
/// separable kernel factor's gram along its own axes.
///
/// `axes[d]` holds the node coordinates of input dimension `d`; values come
/// back with dimension 0 varying fastest.
pub fn sample_on_grid<R: Rng>(axes: &[Vec<f64>], kernel: &Kernel, rng: &mut R, solver: &Solver) -> Result<Vec<f64>> {
    if axes.len() != kernel.input_dim() {
        return Err(Error::DimensionMismatch { expected: kernel.input_dim(), found: axes.len() });
    }
    let total: usize = axes.iter().map(|a| a.len()).product();
    let mut x: Vec<f64> = (0..total).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    if kernel.variance() == 0.0 {
        return Ok(vec![0.0; total]);
    }
    // split squared-exponential factors per axis; others stay whole
    let mut groups: Vec<(Family, f64, std::ops::Range<usize>)> = Vec::new();
    for f in kernel.factors() {
        let ell = f.log_lengthscale.exp();
        match f.family {
            Family::SquaredExponential => groups.extend(f.dims.clone().map(|d| (f.family, ell, d..d + 1))),
            Family::Matern12 => groups.push((f.family, ell, f.dims.clone())),
        }
    }
    groups.sort_by_key(|g| g.2.start);
    let mut inner = 1usize;
    for (family, ell, dims) in groups {
        // sub-grid over this group's dims, first dim fastest
        let sizes: Vec<usize> = dims.clone().map(|d| axes[d].len()).collect();
        let n: usize = sizes.iter().product();
        let mut pts = Vec::with_capacity(n * dims.len());
        for idx in 0..n {
            let mut rem = idx;
            for (k, d) in dims.clone().enumerate() {
                pts.push(axes[d][rem % sizes[k]]);
                rem /= sizes[k];
            }
        }
        let sub = InputSet::from_flat(dims.len(), pts)?;
        let g = Kernel::single(family, 1.0, ell, dims.len()).gram_sym(&sub)?;
        let l = solver.cholesky(&g, "factorizing the field covariance")?;
        let l = l.cholesky().expect("cholesky factor").l();
        let outer = total / (inner * n);
        let mut v = DVector::zeros(n);
        for o in 0..outer {
            for i in 0..inner {
                for j in 0..n {
                    v[j] = x[(o * n + j) * inner + i];
                }
                let w = &l * &v;
                for j in 0..n {
                    x[(o * n + j) * inner + i] = w[j];
                }
            }
        }
        inner *= n;
    }
    let s = kernel.variance().sqrt();
    x.iter_mut().for_each(|v| *v *= s);
    Ok(x)
}

/// Static field drawn from a 2D GP on an `nx × ny` node grid.
pub fn sample_gp_field<R: Rng>(extents: Rect, nx: usize, ny: usize, kernel: &Kernel, rng: &mut R) -> Result<FieldGrid> {
    if nx > MAX_SAMPLE_RESOLUTION || ny > MAX_SAMPLE_RESOLUTION {
        return Err(Error::config("field.resolution", format!("at most {MAX_SAMPLE_RESOLUTION} nodes per axis")));
    }
    let axes = vec![axis(extents.x0, extents.x1, nx), axis(extents.y0, extents.y1, ny)];
    let values = sample_on_grid(&axes, kernel, rng, &Solver::default())?;
    FieldGrid::new(extents, nx, ny, None, values)
}

/// Space-time field from a 3D GP whose third input is the slice time.
pub fn sample_dynamic_field<R: Rng>(
    extents: Rect,
    nx: usize,
    ny: usize,
    time: TimeAxis,
    kernel: &Kernel,
    rng: &mut R,
) -> Result<FieldGrid> {
    if nx > MAX_SAMPLE_RESOLUTION || ny > MAX_SAMPLE_RESOLUTION {
        return Err(Error::config("field.resolution", format!("at most {MAX_SAMPLE_RESOLUTION} nodes per axis")));
    }
    let ts: Vec<f64> = (0..time.slices).map(|k| time.t0 + k as f64 * time.dt).collect();
    let axes = vec![axis(extents.x0, extents.x1, nx), axis(extents.y0, extents.y1, ny), ts];
    let values = sample_on_grid(&axes, kernel, rng, &Solver::default())?;
    FieldGrid::new(extents, nx, ny, Some(time), values)
}

/// Sample covariance of paired draws.
pub fn empirical_covariance(samples: &[(f64, f64)]) -> f64 {
    let n = samples.len() as f64;
    let (ma, mb) = samples.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
    samples.iter().map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0)
}
