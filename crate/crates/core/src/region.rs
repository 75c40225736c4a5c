use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// A segment of border shared by two rectangles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Border {
    /// The line `x = at`, spanning `lo..hi` in y.
    Vertical { at: f64, lo: f64, hi: f64 },
    /// The line `y = at`, spanning `lo..hi` in x.
    Horizontal { at: f64, lo: f64, hi: f64 },
}

const EDGE_TOL: f64 = 1e-9;

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if !(x1 > x0 && y1 > y0) || ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
            return Err(Error::config("region", format!("degenerate rectangle [{x0}, {x1}] × [{y0}, {y1}]")));
        }
        Ok(Rect { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> [f64; 2] {
        [0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1)]
    }

    /// Closed containment.
    pub fn contains(&self, p: &[f64]) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }

    /// Splits the rectangle into a `rows × cols` grid, row-major from `(x0, y0)`.
    pub fn grid(&self, rows: usize, cols: usize) -> Vec<Rect> {
        let (w, h) = (self.width() / cols as f64, self.height() / rows as f64);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let x0 = self.x0 + c as f64 * w;
                let y0 = self.y0 + r as f64 * h;
                let x1 = if c + 1 == cols { self.x1 } else { x0 + w };
                let y1 = if r + 1 == rows { self.y1 } else { y0 + h };
                out.push(Rect { x0, y0, x1, y1 });
            }
        }
        out
    }

    /// `n × n` regular grid of points inset half a spacing from the edges.
    pub fn lattice(&self, nx: usize, ny: usize) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                out.push([
                    self.x0 + (i as f64 + 0.5) * self.width() / nx as f64,
                    self.y0 + (j as f64 + 0.5) * self.height() / ny as f64,
                ]);
            }
        }
        out
    }

    /// Border shared with `other`, if they touch along a segment of positive length.
    pub fn shared_border(&self, other: &Rect) -> Option<Border> {
        let overlap = |a0: f64, a1: f64, b0: f64, b1: f64| {
            let (lo, hi) = (a0.max(b0), a1.min(b1));
            (hi - lo > EDGE_TOL).then_some((lo, hi))
        };
        if (self.x1 - other.x0).abs() < EDGE_TOL || (self.x0 - other.x1).abs() < EDGE_TOL {
            let at = if (self.x1 - other.x0).abs() < EDGE_TOL { self.x1 } else { self.x0 };
            if let Some((lo, hi)) = overlap(self.y0, self.y1, other.y0, other.y1) {
                return Some(Border::Vertical { at, lo, hi });
            }
        }
        if (self.y1 - other.y0).abs() < EDGE_TOL || (self.y0 - other.y1).abs() < EDGE_TOL {
            let at = if (self.y1 - other.y0).abs() < EDGE_TOL { self.y1 } else { self.y0 };
            if let Some((lo, hi)) = overlap(self.x0, self.x1, other.x0, other.x1) {
                return Some(Border::Horizontal { at, lo, hi });
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_partitions_extents() {
        let r = Rect::new(-1.0, -1.0, 1.0, 1.0).unwrap();
        let cells = r.grid(4, 4);
        assert_eq!(cells.len(), 16);
        assert_eq!(cells[0], Rect { x0: -1.0, y0: -1.0, x1: -0.5, y1: -0.5 });
        assert_eq!(cells[15].x1, 1.0);
        let area: f64 = cells.iter().map(|c| c.width() * c.height()).sum();
        assert!((area - 4.0).abs() < 1e-12);
    }

    #[test]
    fn borders() {
        let r = Rect::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let cells = r.grid(2, 2);
        assert_eq!(cells[0].shared_border(&cells[1]), Some(Border::Vertical { at: 1.0, lo: 0.0, hi: 1.0 }));
        assert_eq!(cells[0].shared_border(&cells[2]), Some(Border::Horizontal { at: 1.0, lo: 0.0, hi: 1.0 }));
        assert_eq!(cells[0].shared_border(&cells[3]), None);
    }

    #[test]
    fn degenerate_rejected() {
        assert!(Rect::new(0.0, 0.0, 0.0, 1.0).is_err());
    }
}
