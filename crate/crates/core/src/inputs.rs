use crate::error::{Error, Result};

/// A set of input locations stored row-major: point `i` is `data[i*dim..(i+1)*dim]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InputSet {
    dim: usize,
    data: Vec<f64>,
}

impl InputSet {
    pub fn new(dim: usize) -> Self {
        InputSet { dim, data: Vec::new() }
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::DimensionMismatch { expected: dim, found: data.len() });
        }
        Ok(InputSet { dim, data })
    }

    pub fn from_points<P: AsRef<[f64]>>(dim: usize, points: &[P]) -> Result<Self> {
        let mut set = InputSet::new(dim);
        for p in points {
            set.push(p.as_ref())?;
        }
        Ok(set)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 { 0 } else { self.data.len() / self.dim }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: p.len() });
        }
        self.data.extend_from_slice(p);
        Ok(())
    }

    pub fn extend(&mut self, other: &InputSet) -> Result<()> {
        if other.dim != self.dim && !other.is_empty() {
            return Err(Error::DimensionMismatch { expected: self.dim, found: other.dim });
        }
        self.data.extend_from_slice(&other.data);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim.max(1))
    }

    /// Subset of points, in the order given.
    pub fn select(&self, idx: &[usize]) -> InputSet {
        let mut out = InputSet::new(self.dim);
        for &i in idx {
            out.data.extend_from_slice(self.point(i));
        }
        out
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Mean location; `None` when empty.
    pub fn centroid(&self) -> Option<Vec<f64>> {
        if self.is_empty() {
            return None;
        }
        let mut c = vec![0.0; self.dim];
        for p in self.iter() {
            for (a, b) in c.iter_mut().zip(p) {
                *a += b;
            }
        }
        let n = self.len() as f64;
        c.iter_mut().for_each(|v| *v /= n);
        Some(c)
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
