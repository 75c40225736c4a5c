use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inputs::InputSet;
use crate::region::Rect;

/// A 2D world of wall segments `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyWorld {
    pub extents: Rect,
    pub walls: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidarConfig {
    pub beams: usize,
    /// Field of view in radians, centred on the heading.
    pub fov: f64,
    pub max_range: f64,
    /// Spacing of free-space samples along each beam.
    pub free_spacing: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        // ≈ 100 beams × (4 free + 1 hit) = 500 observations per scan
        LidarConfig { beams: 100, fov: std::f64::consts::TAU, max_range: 2.5, free_spacing: 0.5 }
    }
}

/// One sweep: labelled points (1 = occupied, 0 = free) and the beam hits.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub points: InputSet,
    pub labels: Vec<f64>,
    pub hits: Vec<[f64; 2]>,
}

fn parse_floats(line: &str, offset: usize, want: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse { offset, message: format!("{e} in `{line}`") })?;
    if v.len() != want {
        return Err(Error::Parse { offset, message: format!("expected {want} numbers, found {} in `{line}`", v.len()) });
    }
    Ok(v)
}

/// Non-empty, non-comment lines with their byte offsets.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut off = 0;
    text.split_inclusive('\n').filter_map(move |l| {
        let at = off;
        off += l.len();
        let t = l.trim();
        (!t.is_empty() && !t.starts_with('#')).then_some((at, t))
    })
}

impl OccupancyWorld {
    pub fn new(extents: Rect, walls: Vec<[f64; 4]>) -> Result<Self> {
        for w in &walls {
            if !extents.contains(&w[0..2]) || !extents.contains(&w[2..4]) {
                return Err(Error::ExtentMismatch(format!("wall {w:?} leaves the world extents")));
            }
        }
        Ok(OccupancyWorld { extents, walls })
    }

    /// Parses one `x1 y1 x2 y2` segment per line; `#` starts a comment line.
    pub fn parse(text: &str, extents: Rect) -> Result<Self> {
        let walls = lines(text)
            .map(|(at, l)| parse_floats(l, at, 4).map(|v| [v[0], v[1], v[2], v[3]]))
            .collect::<Result<_>>()?;
        OccupancyWorld::new(extents, walls)
    }

    pub fn load(path: &Path, extents: Rect) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        OccupancyWorld::parse(&text, extents)
    }

    /// Nearest wall hit along a ray within `max_range`.
    pub fn cast(&self, origin: [f64; 2], dir: [f64; 2], max_range: f64) -> Option<([f64; 2], f64)> {
        let mut best: Option<([f64; 2], f64)> = None;
        for w in &self.walls {
            let (ex, ey) = (w[2] - w[0], w[3] - w[1]);
            let den = dir[0] * ey - dir[1] * ex;
            if den.abs() < 1e-15 {
                continue;
            }
            let (qx, qy) = (w[0] - origin[0], w[1] - origin[1]);
            let t = (qx * ey - qy * ex) / den;
            let u = (qx * dir[1] - qy * dir[0]) / den;
            if t >= 0.0 && t <= max_range && (0.0..=1.0).contains(&u) && best.is_none_or(|b| t < b.1) {
                // the hit is placed on the segment itself
                best = Some(([w[0] + u * ex, w[1] + u * ey], t));
            }
        }
        best
    }

    pub fn distance_to_walls(&self, p: &[f64]) -> f64 {
        self.walls
            .iter()
            .map(|w| {
                let (ex, ey) = (w[2] - w[0], w[3] - w[1]);
                let l2 = ex * ex + ey * ey;
                let s = if l2 > 0.0 { (((p[0] - w[0]) * ex + (p[1] - w[1]) * ey) / l2).clamp(0.0, 1.0) } else { 0.0 };
                ((p[0] - w[0] - s * ex).powi(2) + (p[1] - w[1] - s * ey).powi(2)).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Uniform point on the walls (by length).
    pub fn sample_on_wall<R: Rng>(&self, rng: &mut R) -> [f64; 2] {
        let lens: Vec<f64> = self.walls.iter().map(|w| ((w[2] - w[0]).powi(2) + (w[3] - w[1]).powi(2)).sqrt()).collect();
        let mut r = rng.random_range(0.0..lens.iter().sum::<f64>());
        for (w, l) in self.walls.iter().zip(&lens) {
            if r <= *l {
                let s = r / l;
                return [w[0] + s * (w[2] - w[0]), w[1] + s * (w[3] - w[1])];
            }
            r -= l;
        }
        let w = self.walls[self.walls.len() - 1];
        [w[2], w[3]]
    }
}

/// Simulated LIDAR sweep from `pose`.
pub fn lidar_scan(world: &OccupancyWorld, pose: [f64; 2], heading: f64, cfg: &LidarConfig) -> Scan {
    let mut points = InputSet::new(2);
    let mut labels = Vec::new();
    let mut hits = Vec::new();
    for b in 0..cfg.beams {
        let a = heading - 0.5 * cfg.fov + cfg.fov * (b as f64 + 0.5) / cfg.beams as f64;
        let dir = [a.cos(), a.sin()];
        let hit = world.cast(pose, dir, cfg.max_range);
        // free samples stop half a spacing short of the wall
        let free_until = hit.map(|h| h.1 - 0.5 * cfg.free_spacing).unwrap_or(cfg.max_range);
        let mut s = cfg.free_spacing;
        while s <= free_until + 1e-12 {
            let p = [pose[0] + s * dir[0], pose[1] + s * dir[1]];
            if world.extents.contains(&p) {
                points.push(&p).expect("2D point");
                labels.push(0.0);
            }
            s += cfg.free_spacing;
        }
        if let Some((p, _)) = hit {
            points.push(&p).expect("2D point");
            labels.push(1.0);
            hits.push(p);
        }
    }
    Scan { points, labels, hits }
}

/// Hit points moved `offset` back toward the sensor.
pub fn wall_candidates(pose: [f64; 2], hits: &[[f64; 2]], offset: f64) -> InputSet {
    let mut out = InputSet::new(2);
    for h in hits {
        let (dx, dy) = (pose[0] - h[0], pose[1] - h[1]);
        let d = (dx * dx + dy * dy).sqrt();
        let s = if d > 0.0 { offset.min(d) / d } else { 0.0 };
        out.push(&[h[0] + s * dx, h[1] + s * dy]).expect("2D point");
    }
    out
}

/// Parses one `x y` waypoint per line.
pub fn parse_trajectory(text: &str) -> Result<Vec<[f64; 2]>> {
    let pts: Vec<[f64; 2]> = lines(text).map(|(at, l)| parse_floats(l, at, 2).map(|v| [v[0], v[1]])).collect::<Result<_>>()?;
    if pts.is_empty() {
        return Err(Error::Parse { offset: 0, message: "trajectory has no waypoints".into() });
    }
    Ok(pts)
}

pub fn load_trajectory(path: &Path) -> Result<Vec<[f64; 2]>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trajectory(&text)
}
