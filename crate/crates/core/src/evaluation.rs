//! Metrics and the rules deciding which robot answers each query.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inputs::InputSet;
use crate::protocol::RobotAgent;
use crate::region::Rect;

/// Query points with ground truth and a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TestGrid {
    pub points: InputSet,
    pub truth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl TestGrid {
    pub fn new(points: InputSet, truth: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if truth.len() != points.len() || valid.len() != points.len() {
            return Err(Error::DimensionMismatch { expected: points.len(), found: truth.len().min(valid.len()) });
        }
        Ok(TestGrid { points, truth, valid })
    }

    /// Cell-centred `n × n` lattice over `extents`, each point extended by
    /// `extra` coordinates; non-finite truth values are masked out.
    pub fn lattice<F>(extents: &Rect, n: usize, extra: &[f64], truth: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Result<f64>,
    {
        let mut points = InputSet::new(2 + extra.len());
        let mut t = Vec::with_capacity(n * n);
        for p in extents.lattice(n, n) {
            let mut x = p.to_vec();
            x.extend_from_slice(extra);
            t.push(truth(&x)?);
            points.push(&x)?;
        }
        let valid = t.iter().map(|v| v.is_finite()).collect();
        TestGrid::new(points, t, valid)
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Copy with points failing `keep` masked out.
    pub fn masked<F: Fn(&[f64]) -> bool>(&self, keep: F) -> TestGrid {
        let valid = self.valid.iter().enumerate().map(|(i, v)| *v && keep(self.points.point(i))).collect();
        TestGrid { points: self.points.clone(), truth: self.truth.clone(), valid }
    }
}

/// Uniform-bucket index over 2D locations for radius queries.
struct Buckets {
    cell: f64,
    map: HashMap<(i64, i64), Vec<[f64; 2]>>,
}

impl Buckets {
    fn new(points: &InputSet, cell: f64) -> Self {
        let mut map: HashMap<(i64, i64), Vec<[f64; 2]>> = HashMap::new();
        for p in points.iter() {
            let key = ((p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64);
            map.entry(key).or_default().push([p[0], p[1]]);
        }
        Buckets { cell, map }
    }

    fn any_within(&self, p: &[f64], d: f64) -> bool {
        let (cx, cy) = ((p[0] / self.cell).floor() as i64, (p[1] / self.cell).floor() as i64);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(v) = self.map.get(&(cx + dx, cy + dy)) {
                    if v.iter().any(|q| (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) < d * d) {
                        return true;
                    }
                }
            }
        }
        false
    }
}

/// For each point, whether its planar distance to every training location is at least `d`.
pub fn far_from_training(points: &InputSet, training: &InputSet, d: f64) -> Vec<bool> {
    if d <= 0.0 || training.is_empty() {
        return vec![true; points.len()];
    }
    let b = Buckets::new(training, d);
    points.iter().map(|p| !b.any_within(p, d)).collect()
}

/// A metric value with the number of points that entered it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub value: f64,
    pub n_points: usize,
}

/// Mean squared error over valid points at least `d` from every training location.
pub fn mse(pred: &[f64], grid: &TestGrid, d: f64, training: &InputSet) -> Result<Scored> {
    if pred.len() != grid.len() {
        return Err(Error::DimensionMismatch { expected: grid.len(), found: pred.len() });
    }
    let far = far_from_training(&grid.points, training, d);
    let (mut s, mut n) = (0.0, 0usize);
    for i in 0..pred.len() {
        if grid.valid[i] && far[i] {
            s += (pred[i] - grid.truth[i]).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyTestSet);
    }
    Ok(Scored { value: s / n as f64, n_points: n })
}

/// Probabilities are clipped to `[CLIP, 1 - CLIP]` before taking logs.
pub const PROB_CLIP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupancyScore {
    pub bce: f64,
    pub accuracy: f64,
    pub n_points: usize,
}

/// Mean binary cross-entropy and accuracy at threshold 0.5 (`p > 0.5` is occupied).
pub fn occupancy_metrics(probs: &[f64], grid: &TestGrid) -> Result<OccupancyScore> {
    if probs.len() != grid.len() {
        return Err(Error::DimensionMismatch { expected: grid.len(), found: probs.len() });
    }
    let (mut bce, mut hits, mut n) = (0.0, 0usize, 0usize);
    for i in 0..probs.len() {
        if !grid.valid[i] {
            continue;
        }
        let p = probs[i].clamp(PROB_CLIP, 1.0 - PROB_CLIP);
        let y = grid.truth[i];
        bce -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        if (p > 0.5) == (y > 0.5) {
            hits += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyTestSet);
    }
    Ok(OccupancyScore { bce: bce / n as f64, accuracy: hits as f64 / n as f64, n_points: n })
}

/// Class probability from a Gaussian latent, using the probit approximation.
pub fn probability(mean: f64, var: f64) -> f64 {
    let z = mean / (1.0 + std::f64::consts::PI * var / 8.0).sqrt();
    1.0 / (1.0 + (-z).exp())
}

/// Index of the nearest pose; ties go to the lower index.
pub fn assign_closest_robot(x: &[f64], poses: &[[f64; 2]]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, p) in poses.iter().enumerate() {
        let d = (x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Index of the first region containing `x`.
pub fn assign_region(x: &[f64], regions: &[Rect]) -> Result<usize> {
    regions.iter().position(|r| r.contains(x)).ok_or(Error::OutOfExtent { x: x[0], y: x[1] })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Assignment {
    /// The robot currently nearest the query.
    Closest,
    /// The robot whose preallocated region contains the query.
    Region,
}

/// Predictive means and variances, each point answered by its assigned robot's local model.
/// Robots must be ordered by id.
pub fn predict_distributed(robots: &mut [RobotAgent], xs: &InputSet, mode: Assignment) -> Result<(Vec<f64>, Vec<f64>)> {
    let poses: Vec<[f64; 2]> = robots.iter().map(|r| r.pose).collect();
    let regions: Vec<Rect> = robots.iter().map(|r| r.region).collect();
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); robots.len()];
    for (i, x) in xs.iter().enumerate() {
        let r = match mode {
            Assignment::Closest => assign_closest_robot(x, &poses),
            Assignment::Region => assign_region(x, &regions)?,
        };
        groups[r].push(i);
    }
    let mut mean = vec![0.0; xs.len()];
    let mut var = vec![0.0; xs.len()];
    for (r, ids) in groups.iter().enumerate() {
        if ids.is_empty() {
            continue;
        }
        let (m, v) = robots[r].predict(&xs.select(ids))?;
        for (k, &i) in ids.iter().enumerate() {
            mean[i] = m[k];
            var[i] = v[k];
        }
    }
    Ok((mean, var))
}

/// One robot's global map prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPrediction {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Peers whose block was needed but absent from the cache.
    pub missing: Vec<u32>,
}

fn planar_centroid(z: &InputSet) -> [f64; 2] {
    let c = z.centroid().unwrap_or_else(|| vec![0.0, 0.0]);
    [c[0], c[1]]
}

/// Global map of `robots[me]`: each query goes to the block, among all robots,
/// whose inducing centroid is nearest (using the cached copy for peers). Peers
/// missing from the cache answer with the prior and are reported.
pub fn predict_global(robots: &mut [RobotAgent], me: usize, xs: &InputSet) -> Result<GlobalPrediction> {
    let own = robots[me].snapshot()?;
    let ids: Vec<u32> = robots.iter().map(|r| r.id).collect();
    let me_robot = &robots[me];
    let centroids: Vec<[f64; 2]> = robots
        .iter()
        .map(|r| {
            if r.id == me_robot.id {
                planar_centroid(&own.z)
            } else {
                me_robot.cache().get(&r.id).map(|s| planar_centroid(&s.z)).unwrap_or_else(|| planar_centroid(r.z()))
            }
        })
        .collect();
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); robots.len()];
    for (i, x) in xs.iter().enumerate() {
        groups[assign_closest_robot(x, &centroids)].push(i);
    }
    let mut mean = vec![0.0; xs.len()];
    let mut var = vec![0.0; xs.len()];
    let mut missing = Vec::new();
    for (k, pts) in groups.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let sub = xs.select(pts);
        let (m, v) = if ids[k] == me_robot.id {
            me_robot.predict_with_snapshot(&own, &sub)?
        } else if let Some(s) = me_robot.cache().get(&ids[k]) {
            me_robot.predict_with_snapshot(s, &sub)?
        } else {
            missing.push(ids[k]);
            let kern = me_robot.kernel();
            (vec![0.0; sub.len()], sub.iter().map(|x| kern.eval(x, x)).collect::<Result<Vec<_>>>()?)
        };
        for (j, &i) in pts.iter().enumerate() {
            mean[i] = m[j];
            var[i] = v[j];
        }
    }
    Ok(GlobalPrediction { mean, var, missing })
}

/// Writes probabilities as an 8-bit binary PGM, top row = largest `y`.
/// Grey level is `round(255·(1 − p))`, so occupied cells are dark.
pub fn pgm(probs: &[f64], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for row in (0..height).rev() {
        for col in 0..width {
            let p = probs[row * width + col].clamp(0.0, 1.0);
            out.push((255.0 * (1.0 - p)).round() as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_of(truth: Vec<f64>) -> TestGrid {
        let n = truth.len();
        let pts = InputSet::from_flat(2, (0..n).flat_map(|i| [i as f64, 0.0]).collect()).unwrap();
        TestGrid::new(pts, truth, vec![true; n]).unwrap()
    }

    #[test]
    fn mse_basics() {
        let g = grid_of(vec![1.0, 2.0, 3.0]);
        let none = InputSet::new(2);
        assert_eq!(mse(&[1.0, 2.0, 3.0], &g, 0.06, &none).unwrap().value, 0.0);
        assert!((mse(&[1.5, 2.5, 3.5], &g, 0.06, &none).unwrap().value - 0.25).abs() < 1e-15);
        let train = InputSet::from_flat(2, vec![0.0, 0.0, 1.0, 0.0, 2.0, 0.03]).unwrap();
        assert_eq!(mse(&[0.0; 3], &g, 0.06, &train), Err(Error::EmptyTestSet));
        let s = mse(&[1.0, 0.0, 3.0], &g, 0.06, &InputSet::from_flat(2, vec![1.0, 0.01]).unwrap()).unwrap();
        assert_eq!((s.value, s.n_points), (0.0, 2));
    }

    #[test]
    fn exclusion_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = InputSet::from_flat(2, (0..800).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let train = InputSet::from_flat(2, (0..300).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let fast = far_from_training(&pts, &train, 0.06);
        for (i, p) in pts.iter().enumerate() {
            let brute = train.iter().all(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() >= 0.06);
            assert_eq!(fast[i], brute);
        }
    }

    #[test]
    fn occupancy_basics() {
        let g = grid_of(vec![1.0, 0.0, 1.0, 0.0]);
        let s = occupancy_metrics(&[1.0, 0.0, 1.0, 0.0], &g).unwrap();
        assert!(s.bce < 1e-6 && s.accuracy == 1.0);
        let h = occupancy_metrics(&[0.5; 4], &g).unwrap();
        assert!((h.bce - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(h.accuracy, 0.5);
    }

    #[test]
    fn permuted_labels_score_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 4000;
        let probs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let mut labels: Vec<f64> = probs.iter().map(|p| if *p > 0.5 { 1.0 } else { 0.0 }).collect();
        labels.shuffle(&mut rng);
        let acc = occupancy_metrics(&probs, &grid_of(labels)).unwrap().accuracy;
        // binomial sd ≈ 0.008
        assert!((acc - 0.5).abs() < 0.04, "{acc}");
    }

    #[test]
    fn closest_assignment() {
        assert_eq!(assign_closest_robot(&[0.3, 0.3], &[[5.0, 5.0]]), 0);
        assert_eq!(assign_closest_robot(&[0.0, 0.0], &[[1.0, 0.0], [-1.0, 0.0]]), 0);
        let cells = Rect::new(0.0, 0.0, 3.0, 3.0).unwrap().grid(3, 3);
        let poses: Vec<[f64; 2]> = cells.iter().map(|c| c.center()).collect();
        assert_eq!(assign_closest_robot(&cells[3].center(), &poses), 3);
        assert_eq!(assign_closest_robot(&[0.2, 1.7], &poses), 3);
    }

    #[test]
    fn region_assignment() {
        let cells = Rect::new(0.0, 0.0, 2.0, 2.0).unwrap().grid(2, 2);
        assert_eq!(assign_region(&[1.5, 0.5], &cells).unwrap(), 1);
        assert_eq!(assign_region(&[1.0, 0.5], &cells).unwrap(), 0);
        assert_eq!(assign_region(&[1.0, 1.0], &cells).unwrap(), 0);
        assert!(assign_region(&[2.5, 0.5], &cells).is_err());
        for p in Rect::new(0.0, 0.0, 2.0, 2.0).unwrap().lattice(37, 37) {
            assert_eq!(cells.iter().filter(|c| c.contains(&p)).count() >= 1, assign_region(&p, &cells).is_ok());
        }
    }

    #[test]
    fn pgm_layout() {
        let b = pgm(&[0.0, 1.0, 0.5, 0.25], 2, 2);
        let head = b"P5\n2 2\n255\n";
        assert_eq!(&b[..head.len()], head);
        assert_eq!(&b[head.len()..], &[128, 191, 255, 0]);
    }
}
