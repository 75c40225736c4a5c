use rand::Rng;

use crate::region::Rect;

/// Default waypoint tolerance.
pub const DEFAULT_EPSILON: f64 = 0.02;

/// A robot heading at constant speed toward a waypoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryState {
    pub pose: [f64; 2],
    pub waypoint: [f64; 2],
    /// Distance covered per step.
    pub speed: f64,
    pub epsilon: f64,
}

pub fn uniform_in<R: Rng>(r: &Rect, rng: &mut R) -> [f64; 2] {
    [rng.random_range(r.x0..r.x1), rng.random_range(r.y0..r.y1)]
}

impl TrajectoryState {
    pub fn random<R: Rng>(region: &Rect, speed: f64, epsilon: f64, rng: &mut R) -> Self {
        let pose = uniform_in(region, rng);
        TrajectoryState { pose, waypoint: uniform_in(region, rng), speed, epsilon }
    }
}

/// Moves `min(speed, remaining)` toward the waypoint, then draws a fresh
/// waypoint in `region` if the robot ended within `epsilon` of it.
pub fn step_trajectory<R: Rng>(s: &TrajectoryState, region: &Rect, rng: &mut R) -> TrajectoryState {
    let mut next = *s;
    let (dx, dy) = (s.waypoint[0] - s.pose[0], s.waypoint[1] - s.pose[1]);
    let dist = (dx * dx + dy * dy).sqrt();
    if dist > 0.0 {
        let f = s.speed.min(dist) / dist;
        next.pose = [s.pose[0] + f * dx, s.pose[1] + f * dy];
    }
    let (rx, ry) = (next.waypoint[0] - next.pose[0], next.waypoint[1] - next.pose[1]);
    if (rx * rx + ry * ry).sqrt() < s.epsilon {
        next.waypoint = uniform_in(region, rng);
    }
    next
}

/// Follows a fixed waypoint list in order, then stays at the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct WaypointFollower {
    pub pose: [f64; 2],
    pub waypoints: Vec<[f64; 2]>,
    pub next: usize,
    pub speed: f64,
}

impl WaypointFollower {
    pub fn new(waypoints: Vec<[f64; 2]>, speed: f64) -> Self {
        WaypointFollower { pose: waypoints[0], next: 1.min(waypoints.len() - 1), waypoints, speed }
    }

    pub fn finished(&self) -> bool {
        self.next + 1 >= self.waypoints.len() && self.pose == self.waypoints[self.waypoints.len() - 1]
    }

    /// Advances `speed` along the polyline, carrying leftover distance past corners.
    pub fn step(&mut self) {
        let mut budget = self.speed;
        while budget > 0.0 {
            let w = self.waypoints[self.next];
            let (dx, dy) = (w[0] - self.pose[0], w[1] - self.pose[1]);
            let d = (dx * dx + dy * dy).sqrt();
            if d > budget {
                self.pose = [self.pose[0] + dx * budget / d, self.pose[1] + dy * budget / d];
                return;
            }
            self.pose = w;
            budget -= d;
            if self.next + 1 >= self.waypoints.len() {
                return;
            }
            self.next += 1;
        }
    }
}

/// Pairs `(i, j)`, `i < j`, within `d_comm`; empty on steps not divisible by `interval`.
pub fn connectivity(poses: &[[f64; 2]], d_comm: f64, step: u64, interval: u64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    if interval == 0 || step % interval != 0 {
        return out;
    }
    for i in 0..poses.len() {
        for j in (i + 1)..poses.len() {
            let d = ((poses[i][0] - poses[j][0]).powi(2) + (poses[i][1] - poses[j][1]).powi(2)).sqrt();
            if d <= d_comm {
                out.push((i, j));
            }
        }
    }
    out
}

/// `count` disjoint `size × size` squares placed uniformly inside `extents`
/// by rejection sampling. Gives up after a bounded number of draws.
pub fn held_out_regions<R: Rng>(extents: &Rect, count: usize, size: f64, rng: &mut R) -> Vec<Rect> {
    let mut out: Vec<Rect> = Vec::with_capacity(count);
    if size <= 0.0 || size > extents.width() || size > extents.height() {
        return out;
    }
    let mut tries = 0;
    while out.len() < count && tries < 10_000 {
        tries += 1;
        let x0 = rng.random_range(extents.x0..=extents.x1 - size);
        let y0 = rng.random_range(extents.y0..=extents.y1 - size);
        let r = Rect { x0, y0, x1: x0 + size, y1: y0 + size };
        if out.iter().all(|o| r.x1 <= o.x0 || o.x1 <= r.x0 || r.y1 <= o.y0 || o.y1 <= r.y0) {
            out.push(r);
        }
    }
    out
}
