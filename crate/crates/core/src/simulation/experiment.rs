//! The experiment loops behind each subcommand.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{
    far_from_training, mse, occupancy_metrics, pgm, predict_distributed, predict_global, probability, Assignment, Scored,
    TestGrid,
};
use crate::inputs::InputSet;
use crate::protocol::batch::{build_batch_model, build_dense_model, BlockSpec, PriorStructure};
use crate::protocol::{connect, decouple, exchange, share_posteriors, LinkStatus, Observation, RobotAgent};
use crate::region::Rect;
use crate::simulation::config::{Experiment, SimConfig};
use crate::simulation::field::{sample_dynamic_field, sample_gp_field, FieldGrid, TimeAxis};
use crate::simulation::occupancy::{lidar_scan, load_trajectory, wall_candidates, OccupancyWorld};
use crate::simulation::trajectory::{connectivity, held_out_regions, step_trajectory, TrajectoryState, WaypointFollower};

/// One row of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub mode: String,
    pub metric: String,
    pub value: f64,
    pub n_points: usize,
    pub seed: u64,
}

/// An encoded PGM map.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub name: String,
    pub bytes: Vec<u8>,
}

/// Receives results as they are produced, so partial runs leave partial output.
pub trait MetricSink {
    fn record(&mut self, r: MetricRecord) -> Result<()>;

    fn raster(&mut self, _r: Raster) -> Result<()> {
        Ok(())
    }
}

impl MetricSink for Vec<MetricRecord> {
    fn record(&mut self, r: MetricRecord) -> Result<()> {
        self.push(r);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheduler {
    /// Robots processed one after another in id order.
    Sequential,
    /// Robot-local work runs concurrently between exchange barriers.
    Parallel,
}

/// Independent random substreams of one master seed.
mod streams {
    pub const FIELD: u64 = 1;
    pub const TRAJECTORY: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const HELD_OUT: u64 = 4;
    pub const SCHEDULE: u64 = 5;
    pub const TEST: u64 = 6;
}

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn at(step: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        e @ Error::AtStep { .. } => e,
        e => Error::AtStep { step: step as usize, source: Box::new(e) },
    }
}

struct Emitter<'a> {
    sink: &'a mut dyn MetricSink,
    seed: u64,
}

impl Emitter<'_> {
    fn emit(&mut self, step: u64, mode: &str, metric: &str, value: f64, n_points: usize) -> Result<()> {
        self.sink.record(MetricRecord { step, mode: mode.into(), metric: metric.into(), value, n_points, seed: self.seed })
    }

    fn scored(&mut self, step: u64, mode: &str, metric: &str, s: Result<Scored>) -> Result<()> {
        match s {
            Ok(s) => self.emit(step, mode, metric, s.value, s.n_points),
            Err(Error::EmptyTestSet) => Ok(()),
            Err(e) => Err(e),
        }
    }
}

/// Runs one seed of the configured experiment.
pub fn run_experiment(cfg: &SimConfig, seed: u64, scheduler: Scheduler, sink: &mut dyn MetricSink) -> Result<()> {
    cfg.validate()?;
    if cfg.steps == 0 {
        return Ok(());
    }
    let mut out = Emitter { sink, seed };
    match cfg.experiment {
        Experiment::Edges => run_edges(cfg, seed, &mut out),
        Experiment::Async => run_async(cfg, seed, scheduler, &mut out),
        Experiment::Dynamic => run_dynamic(cfg, seed, scheduler, &mut out),
        Experiment::Occupancy => run_occupancy(cfg, seed, scheduler, &mut out),
    }
}

pub fn make_field(cfg: &SimConfig, seed: u64) -> Result<FieldGrid> {
    let dynamic = cfg.experiment == Experiment::Dynamic;
    if let Some(path) = &cfg.field.file {
        let f = FieldGrid::load(path, Some(&cfg.extents))?;
        if dynamic && f.time.is_none() {
            return Err(Error::ExtentMismatch("the dynamic experiment needs a field with a time axis".into()));
        }
        return Ok(f);
    }
    let kernel = cfg.field.kernel.build()?;
    let mut rng = stream(seed, streams::FIELD);
    let n = cfg.field.resolution;
    if dynamic {
        let time = TimeAxis { t0: 0.0, dt: 1.0, slices: cfg.field.slices };
        sample_dynamic_field(cfg.extents, n, n, time, &kernel, &mut rng)
    } else {
        sample_gp_field(cfg.extents, n, n, &kernel, &mut rng)
    }
}

fn lattice_z(region: &Rect, n: usize, extra: &[f64]) -> InputSet {
    let mut z = InputSet::new(2 + extra.len());
    for p in region.lattice(n, n) {
        let mut x = p.to_vec();
        x.extend_from_slice(extra);
        z.push(&x).expect("consistent dimension");
    }
    z
}

fn pair_mut<T>(v: &mut [T], i: usize, j: usize) -> (&mut T, &mut T) {
    assert!(i < j);
    let (lo, hi) = v.split_at_mut(j);
    (&mut lo[i], &mut hi[0])
}

fn for_each_robot<F>(robots: &mut [RobotAgent], scheduler: Scheduler, f: F) -> Result<()>
where
    F: Fn(usize, &mut RobotAgent) -> Result<()> + Sync + Send,
{
    match scheduler {
        Scheduler::Sequential => robots.iter_mut().enumerate().try_for_each(|(i, r)| f(i, r)),
        Scheduler::Parallel => robots.par_iter_mut().enumerate().try_for_each(|(i, r)| f(i, r)),
    }
}

/// Range gating, decoupling of links that fell out of range, then connect /
/// exchange (and optional posterior sharing) for every pair in range.
fn communicate(robots: &mut [RobotAgent], cfg: &SimConfig, step: u64, gbp: bool, share: bool) -> Result<()> {
    if step % cfg.comm_interval != 0 {
        return Ok(());
    }
    let poses: Vec<[f64; 2]> = robots.iter().map(|r| r.pose).collect();
    let pairs = connectivity(&poses, cfg.d_comm, step, cfg.comm_interval);
    let in_range: BTreeSet<(usize, usize)> = pairs.iter().copied().collect();
    if gbp {
        for i in 0..robots.len() {
            for j in (i + 1)..robots.len() {
                let id_j = robots[j].id;
                if robots[i].link(id_j).map(|l| l.1) == Some(LinkStatus::Live) && !in_range.contains(&(i, j)) {
                    let (a, b) = pair_mut(robots, i, j);
                    decouple(a, b)?;
                }
            }
        }
    }
    for (i, j) in pairs {
        let (a, b) = pair_mut(robots, i, j);
        if gbp && !connect(a, b, cfg.d_comm)? {
            exchange(a, b)?;
        }
        if share {
            share_posteriors(a, b, cfg.d_comm)?;
        }
    }
    Ok(())
}

struct Fleet {
    robots: Vec<RobotAgent>,
    trajs: Vec<TrajectoryState>,
    /// Continues the stream that placed the robots.
    traj_rng: ChaCha8Rng,
}

fn grid_fleet(cfg: &SimConfig, seed: u64, extra: &[f64]) -> Result<Fleet> {
    let regions = cfg.extents.grid(cfg.rows, cfg.cols);
    let mut rng = stream(seed, streams::TRAJECTORY);
    let rc = cfg.robot_config()?;
    let mut robots = Vec::with_capacity(regions.len());
    let mut trajs = Vec::with_capacity(regions.len());
    for (i, r) in regions.iter().enumerate() {
        let t = TrajectoryState::random(r, cfg.speed, cfg.epsilon, &mut rng);
        let mut robot = RobotAgent::new(i as u32, *r, t.pose, lattice_z(r, cfg.model.inducing_per_side, extra), rc.clone())?;
        robot.extra_coords = extra.to_vec();
        robots.push(robot);
        trajs.push(t);
    }
    Ok(Fleet { robots, trajs, traj_rng: rng })
}

/// Moves every robot one step and draws its observation (`None` inside a
/// held-out region or on a masked cell). Draw order is fixed by robot index.
fn move_and_sense(
    fleet: &mut Fleet,
    field: &FieldGrid,
    t: Option<f64>,
    held: &[Rect],
    noise_sigma: f64,
    noise_rng: &mut ChaCha8Rng,
) -> Result<Vec<Option<(Vec<f64>, f64)>>> {
    let mut out = Vec::with_capacity(fleet.robots.len());
    for (robot, traj) in fleet.robots.iter_mut().zip(fleet.trajs.iter_mut()) {
        *traj = step_trajectory(traj, &robot.region, &mut fleet.traj_rng);
        robot.pose = traj.pose;
        let eps: f64 = noise_rng.sample(StandardNormal);
        if held.iter().any(|h| h.contains(&traj.pose)) {
            out.push(None);
            continue;
        }
        let f = field.query(&traj.pose, t)?;
        if !f.is_finite() {
            out.push(None);
            continue;
        }
        let mut x = traj.pose.to_vec();
        x.extend(t);
        out.push(Some((x, f + noise_sigma * eps)));
    }
    Ok(out)
}

/// Data for the batch edge-count experiment: every robot's trajectory
/// observations, the per-robot inducing blocks and the evaluation grid.
#[derive(Debug, Clone)]
pub struct EdgesData {
    pub blocks: Vec<BlockSpec>,
    pub xs: InputSet,
    pub ys: Vec<f64>,
    pub grid: TestGrid,
}

pub fn edges_data(cfg: &SimConfig, seed: u64) -> Result<EdgesData> {
    let field = make_field(cfg, seed)?;
    let mut fleet = grid_fleet(cfg, seed, &[])?;
    let mut noise_rng = stream(seed, streams::NOISE);
    let mut xs = InputSet::new(2);
    let mut ys = Vec::new();
    for step in 1..=cfg.steps {
        for (x, y) in move_and_sense(&mut fleet, &field, None, &[], cfg.noise_sigma, &mut noise_rng).map_err(at(step))?.into_iter().flatten() {
            xs.push(&x)?;
            ys.push(y);
        }
    }
    let blocks = fleet.robots.iter().map(|r| BlockSpec { z: r.z().clone(), region: r.region }).collect();
    let grid = TestGrid::lattice(&cfg.extents, cfg.eval.grid, &[], |x| field.query(x, None))?;
    Ok(EdgesData { blocks, xs, ys, grid })
}

fn run_edges(cfg: &SimConfig, seed: u64, out: &mut Emitter) -> Result<()> {
    let EdgesData { blocks, xs, ys, grid } = edges_data(cfg, seed)?;
    let kernel = cfg.model.kernel.build()?;
    let noise = cfg.noise();
    let solver = crate::gaussian::Solver::default();
    let step = cfg.steps;
    let opts = cfg.gbp.options(stream(seed, streams::SCHEDULE).random());

    let mut structures = vec![("independent".to_string(), PriorStructure::Independent)];
    structures.extend(cfg.edges.extra_edges.iter().map(|&n| (format!("tsgp+{n}"), PriorStructure::Tree { extra: n })));
    for (name, s) in structures {
        let mut m = build_batch_model(&blocks, cfg.rows, cfg.cols, &kernel, &noise, &xs, &ys, s, &solver)?;
        let outcome = m.solve(&opts)?;
        let (pred, _) = m.predict(&grid.points)?;
        out.scored(step, &name, "mse", mse(&pred, &grid, cfg.eval.exclusion, &xs))?;
        out.emit(step, &name, "iterations", outcome.iterations as f64, 0)?;
        out.emit(step, &name, "converged", if outcome.converged { 1.0 } else { 0.0 }, 0)?;
        out.emit(step, &name, "last_change", outcome.last_change, 0)?;
    }
    let dense = build_dense_model(&blocks, &kernel, &noise, &xs, &ys, &solver)?;
    let (pred, _) = dense.predict(&grid.points)?;
    out.scored(step, "dense", "mse", mse(&pred, &grid, cfg.eval.exclusion, &xs))
}

fn run_async(cfg: &SimConfig, seed: u64, scheduler: Scheduler, out: &mut Emitter) -> Result<()> {
    let field = make_field(cfg, seed)?;
    let held = held_out_regions(&cfg.extents, cfg.held_out.count, cfg.held_out.size, &mut stream(seed, streams::HELD_OUT));
    let mut fleet = grid_fleet(cfg, seed, &[])?;
    let mut noise_rng = stream(seed, streams::NOISE);
    let grid = TestGrid::lattice(&cfg.extents, cfg.eval.grid, &[], |x| field.query(x, None))?;
    let held_grid = grid.masked(|p| held.iter().any(|h| h.contains(p)));
    let kernel = cfg.model.kernel.build()?;
    let noise = cfg.noise();
    let solver = crate::gaussian::Solver::default();
    let opts = cfg.gbp.options(stream(seed, streams::SCHEDULE).random());
    let hyper_period = cfg.model.hyper.as_ref().map(|h| h.period as u64);
    let mut xs = InputSet::new(2);
    let mut ys = Vec::new();
    for step in 1..=cfg.steps {
        let obs = move_and_sense(&mut fleet, &field, None, &held, cfg.noise_sigma, &mut noise_rng).map_err(at(step))?;
        for (x, y) in obs.iter().flatten() {
            xs.push(x)?;
            ys.push(*y);
        }
        local_update(&mut fleet.robots, obs, step, hyper_period, scheduler).map_err(at(step))?;
        communicate(&mut fleet.robots, cfg, step, cfg.d_comm > 0.0, false).map_err(at(step))?;
        if step % cfg.eval_every == 0 {
            let (pred, _) = predict_distributed(&mut fleet.robots, &grid.points, cfg.eval.assignment).map_err(at(step))?;
            out.scored(step, "distributed", "mse", mse(&pred, &grid, cfg.eval.exclusion, &xs))?;
            out.scored(step, "distributed", "heldout_mse", mse(&pred, &held_grid, cfg.eval.exclusion, &xs))?;
            let blocks: Vec<BlockSpec> = fleet.robots.iter().map(|r| BlockSpec { z: r.z().clone(), region: r.region }).collect();
            for (name, s) in [("independent", PriorStructure::Independent), ("tsgp", PriorStructure::Tree { extra: 0 })] {
                let mut m = build_batch_model(&blocks, cfg.rows, cfg.cols, &kernel, &noise, &xs, &ys, s, &solver).map_err(at(step))?;
                m.solve(&opts).map_err(at(step))?;
                let (pred, _) = m.predict(&grid.points).map_err(at(step))?;
                out.scored(step, name, "mse", mse(&pred, &grid, cfg.eval.exclusion, &xs))?;
                out.scored(step, name, "heldout_mse", mse(&pred, &held_grid, cfg.eval.exclusion, &xs))?;
            }
            let dense = build_dense_model(&blocks, &kernel, &noise, &xs, &ys, &solver).map_err(at(step))?;
            let (pred, _) = dense.predict(&grid.points).map_err(at(step))?;
            out.scored(step, "dense", "mse", mse(&pred, &grid, cfg.eval.exclusion, &xs))?;
            out.scored(step, "dense", "heldout_mse", mse(&pred, &held_grid, cfg.eval.exclusion, &xs))?;
        }
    }
    Ok(())
}

/// Observation, greedy selection and scheduled hyperparameter steps, per robot.
fn local_update(
    robots: &mut [RobotAgent],
    obs: Vec<Option<(Vec<f64>, f64)>>,
    step: u64,
    hyper_period: Option<u64>,
    scheduler: Scheduler,
) -> Result<()> {
    let obs: Vec<std::sync::Mutex<Option<(Vec<f64>, f64)>>> = obs.into_iter().map(std::sync::Mutex::new).collect();
    for_each_robot(robots, scheduler, |i, r| {
        r.clock = step;
        if let Some((x, y)) = obs[i].lock().expect("unpoisoned").take() {
            r.observe(Observation { x, y, t: step })?;
        }
        r.maybe_select(step)?;
        if hyper_period.is_some_and(|p| p > 0 && step % p == 0) {
            r.hyper_step()?;
        }
        r.refresh()
    })
}

fn run_dynamic(cfg: &SimConfig, seed: u64, scheduler: Scheduler, out: &mut Emitter) -> Result<()> {
    let field = make_field(cfg, seed)?;
    let axis = field.time.expect("dynamic field has a time axis");
    let slice_steps = cfg.field.slice_steps;
    if cfg.steps > axis.slices as u64 * slice_steps {
        return Err(Error::config("steps", format!("{} steps exceed {} slices × {slice_steps} steps", cfg.steps, axis.slices)));
    }
    let time_of = |step: u64| axis.t0 + ((step - 1) / slice_steps) as f64 * axis.dt;
    let mut fleet = grid_fleet(cfg, seed, &[time_of(1)])?;
    let mut noise_rng = stream(seed, streams::NOISE);
    let hyper_period = cfg.model.hyper.as_ref().map(|h| h.period as u64);
    let mut slice_x = InputSet::new(2);
    let mut running = (0.0, 0usize);
    for step in 1..=cfg.steps {
        let t = time_of(step);
        if (step - 1) % slice_steps == 0 {
            slice_x = InputSet::new(2);
        }
        let obs = move_and_sense(&mut fleet, &field, Some(t), &[], cfg.noise_sigma, &mut noise_rng).map_err(at(step))?;
        for (x, _) in obs.iter().flatten() {
            slice_x.push(&x[..2])?;
        }
        fleet.robots.iter_mut().for_each(|r| r.extra_coords = vec![t]);
        local_update(&mut fleet.robots, obs, step, hyper_period, scheduler).map_err(at(step))?;
        communicate(&mut fleet.robots, cfg, step, cfg.d_comm > 0.0, false).map_err(at(step))?;
        if step % slice_steps == 0 {
            let grid = TestGrid::lattice(&cfg.extents, cfg.eval.grid, &[t], |x| field.query(x, Some(t)))?;
            let (pred, _) = predict_distributed(&mut fleet.robots, &grid.points, cfg.eval.assignment).map_err(at(step))?;
            let s = mse(&pred, &grid, cfg.eval.exclusion, &slice_x);
            if let Ok(v) = &s {
                if (step / slice_steps) as usize > cfg.dynamic.burn_in_slices {
                    running = (running.0 + v.value, running.1 + 1);
                }
            }
            out.scored(step, "distributed", "mse", s)?;
        }
    }
    if running.1 > 0 {
        out.emit(cfg.steps, "distributed", "mean_mse_after_burn_in", running.0 / running.1 as f64, running.1)?;
    }
    Ok(())
}

/// Balanced occupancy test set: points on walls (label 1) and points at
/// least `free_margin` from every wall (label 0).
pub fn occupancy_test_set<R: Rng>(world: &OccupancyWorld, n_per_class: usize, free_margin: f64, rng: &mut R) -> Result<TestGrid> {
    let mut pts = InputSet::new(2);
    let mut truth = Vec::with_capacity(2 * n_per_class);
    for _ in 0..n_per_class {
        pts.push(&world.sample_on_wall(rng))?;
        truth.push(1.0);
    }
    let e = world.extents;
    let mut tries = 0usize;
    while truth.len() < 2 * n_per_class {
        tries += 1;
        if tries > 1000 * n_per_class {
            return Err(Error::config("occupancy.free_margin", "too few free cells at this margin"));
        }
        let p = [rng.random_range(e.x0..e.x1), rng.random_range(e.y0..e.y1)];
        if world.distance_to_walls(&p) >= free_margin {
            pts.push(&p)?;
            truth.push(0.0);
        }
    }
    let n = truth.len();
    TestGrid::new(pts, truth, vec![true; n])
}

fn log_spaced(last: u64) -> BTreeSet<u64> {
    let mut s: BTreeSet<u64> = std::iter::successors(Some(1u64), |k| Some(k * 2)).take_while(|k| *k < last).collect();
    s.insert(last);
    s
}

fn run_occupancy(cfg: &SimConfig, seed: u64, scheduler: Scheduler, out: &mut Emitter) -> Result<()> {
    let oc = &cfg.occupancy;
    let world = OccupancyWorld::load(&oc.world, cfg.extents)?;
    let mut followers: Vec<WaypointFollower> = oc
        .trajectories
        .iter()
        .map(|p| load_trajectory(p).map(|w| WaypointFollower::new(w, cfg.speed)))
        .collect::<Result<_>>()?;
    for (i, f) in followers.iter().enumerate() {
        if let Some(w) = f.waypoints.iter().find(|w| !cfg.extents.contains(&w[..])) {
            return Err(Error::ExtentMismatch(format!("robot {i} waypoint {w:?} leaves the world")));
        }
    }
    let mut rc = cfg.robot_config()?;
    rc.select_period = 0;
    let mut robots: Vec<RobotAgent> = followers
        .iter()
        .enumerate()
        .map(|(i, f)| RobotAgent::new(i as u32, cfg.extents, f.pose, InputSet::from_points(2, &[f.pose])?, rc.clone()))
        .collect::<Result<_>>()?;
    let test = occupancy_test_set(&world, oc.test_points, oc.free_margin, &mut stream(seed, streams::TEST))?;
    let raster_pts = cfg.extents.lattice(oc.raster, oc.raster);
    let raster_pts = InputSet::from_points(2, &raster_pts)?;
    let eval_steps = log_spaced(cfg.steps);

    evaluate_occupancy(&mut robots, &test, cfg, 0, out)?;
    for step in 1..=cfg.steps {
        let poses: Vec<[f64; 2]> = followers
            .iter_mut()
            .map(|f| {
                f.step();
                f.pose
            })
            .collect();
        for_each_robot(&mut robots, scheduler, |i, r| {
            r.pose = poses[i];
            r.clock = step;
            let scan = lidar_scan(&world, poses[i], 0.0, &oc.lidar);
            let cands = wall_candidates(poses[i], &scan.hits, oc.candidate_offset);
            r.observe_scan(&scan.points, &scan.labels, &cands, oc.new_inducing, step)
        })
        .map_err(at(step))?;
        communicate(&mut robots, cfg, step, oc.gbp_links, oc.share_posteriors).map_err(at(step))?;
        if eval_steps.contains(&step) {
            evaluate_occupancy(&mut robots, &test, cfg, step, out).map_err(at(step))?;
            let (m, v) = predict_distributed(&mut robots, &raster_pts, Assignment::Closest)?;
            let probs: Vec<f64> = m.iter().zip(&v).map(|(m, v)| probability(*m, *v)).collect();
            out.sink.raster(Raster {
                name: format!("seed{seed}_distributed_step{step:05}.pgm"),
                bytes: pgm(&probs, oc.raster, oc.raster),
            })?;
            if step == cfg.steps {
                for i in 0..robots.len() {
                    let g = predict_global(&mut robots, i, &raster_pts)?;
                    let probs: Vec<f64> = g.mean.iter().zip(&g.var).map(|(m, v)| probability(*m, *v)).collect();
                    out.sink.raster(Raster {
                        name: format!("seed{seed}_global_robot{i}_step{step:05}.pgm"),
                        bytes: pgm(&probs, oc.raster, oc.raster),
                    })?;
                }
            }
        }
    }
    Ok(())
}

fn evaluate_occupancy(robots: &mut [RobotAgent], test: &TestGrid, cfg: &SimConfig, step: u64, out: &mut Emitter) -> Result<()> {
    let (m, v) = predict_distributed(robots, &test.points, cfg.eval.assignment)?;
    let probs: Vec<f64> = m.iter().zip(&v).map(|(m, v)| probability(*m, *v)).collect();
    let d = occupancy_metrics(&probs, test)?;
    out.emit(step, "distributed", "accuracy", d.accuracy, d.n_points)?;
    out.emit(step, "distributed", "bce", d.bce, d.n_points)?;
    let (mut acc, mut bce, mut missing) = (0.0, 0.0, 0usize);
    for i in 0..robots.len() {
        let g = predict_global(robots, i, &test.points)?;
        let probs: Vec<f64> = g.mean.iter().zip(&g.var).map(|(m, v)| probability(*m, *v)).collect();
        let s = occupancy_metrics(&probs, test)?;
        acc += s.accuracy / robots.len() as f64;
        bce += s.bce / robots.len() as f64;
        missing += g.missing.len();
    }
    out.emit(step, "global", "accuracy", acc, test.n_valid())?;
    out.emit(step, "global", "bce", bce, test.n_valid())?;
    out.emit(step, "global", "missing_cache", missing as f64, 0)
}

/// Fraction of test points that survive the exclusion radius; handy for tuning.
pub fn surviving_fraction(grid: &TestGrid, training: &InputSet, d: f64) -> f64 {
    let far = far_from_training(&grid.points, training, d);
    far.iter().zip(&grid.valid).filter(|(f, v)| **f && **v).count() as f64 / grid.len().max(1) as f64
}
