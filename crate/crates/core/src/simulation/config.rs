//! Experiment configuration.
//!
//! A config file is TOML. Every key has a per-experiment default, so a file
//! only needs the keys it changes; unknown keys are rejected. The resolved
//! config (defaults merged with the file) is what runs and what gets recorded.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::Assignment;
use crate::graph::{IterateOptions, Schedule};
use crate::kernel::{Family, Kernel, NoiseModel};
use crate::protocol::{BoundaryConfig, BoundaryStrategy, HyperConfig, RobotConfig};
use crate::region::Rect;
use crate::simulation::occupancy::LidarConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Edges,
    Async,
    Dynamic,
    Occupancy,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Edges => "edges",
            Experiment::Async => "async",
            Experiment::Dynamic => "dynamic",
            Experiment::Occupancy => "occupancy",
        }
    }
}

/// Kernel hyperparameters; `time_lengthscale` adds a Matérn-1/2 factor over
/// a third (time) input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub family: Family,
    pub variance: f64,
    pub lengthscale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_lengthscale: Option<f64>,
}

impl KernelSpec {
    pub fn input_dim(&self) -> usize {
        if self.time_lengthscale.is_some() { 3 } else { 2 }
    }

    pub fn build(&self) -> Result<Kernel> {
        match self.time_lengthscale {
            None => Ok(Kernel::single(self.family, self.variance, self.lengthscale, 2)),
            Some(tl) => Kernel::product(
                self.variance,
                vec![(self.family, self.lengthscale, 0..2), (Family::Matern12, tl, 2..3)],
            ),
        }
    }

    fn validate(&self, key: &str) -> Result<()> {
        if !(self.variance >= 0.0) || !(self.lengthscale > 0.0) || self.time_lengthscale.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::config(key, "variance must be ≥ 0 and lengthscales > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub kernel: KernelSpec,
    /// Nodes per axis of the sampled ground-truth grid.
    pub resolution: usize,
    /// Time slices of a dynamic field.
    pub slices: usize,
    /// Simulation steps per time slice.
    pub slice_steps: u64,
    /// Load the field from a gridded binary file instead of sampling it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kernel: KernelSpec,
    /// Initial inducing lattice is `n × n` per robot.
    pub inducing_per_side: usize,
    pub buffer_capacity: usize,
    /// Steps between greedy selections (0 disables selection).
    pub select_period: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_inducing: Option<usize>,
    pub scope_cap_factor: f64,
    pub min_select_variance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyper: Option<HyperConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary: Option<BoundaryConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GbpConfig {
    pub schedule: Schedule,
    pub damping: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl GbpConfig {
    pub fn options(&self, seed: u64) -> IterateOptions {
        IterateOptions { schedule: self.schedule, damping: self.damping, max_iters: self.max_iters, tol: self.tol, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Test lattice is `grid × grid`.
    pub grid: usize,
    /// Test points nearer than this to any observation are dropped.
    pub exclusion: f64,
    pub assignment: Assignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgesConfig {
    /// Extra-edge counts to fit, in addition to the independent and dense baselines.
    pub extra_edges: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeldOutConfig {
    pub count: usize,
    pub size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicConfig {
    /// Slices excluded from the run-average metric.
    pub burn_in_slices: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OccupancyConfig {
    pub world: PathBuf,
    pub trajectories: Vec<PathBuf>,
    pub lidar: LidarConfig,
    /// Inducing points picked per scan from the wall candidates.
    pub new_inducing: usize,
    /// How far hit points are moved back toward the robot to form candidates.
    pub candidate_offset: f64,
    /// Test points per class (occupied and free).
    pub test_points: usize,
    /// Free test points keep at least this distance from every wall.
    pub free_margin: f64,
    pub share_posteriors: bool,
    /// Also run GBP over inter-robot links, not only posterior sharing.
    pub gbp_links: bool,
    /// Raster resolution (pixels per side).
    pub raster: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub experiment: Experiment,
    pub seed: u64,
    /// Number of consecutive seeds a sweep runs, starting at `seed`.
    pub seeds: u64,
    pub rows: usize,
    pub cols: usize,
    pub extents: Rect,
    pub d_comm: f64,
    pub comm_interval: u64,
    pub noise_sigma: f64,
    pub steps: u64,
    pub eval_every: u64,
    /// Robot speed in distance per step.
    pub speed: f64,
    /// Waypoint tolerance.
    pub epsilon: f64,
    pub field: FieldConfig,
    pub model: ModelConfig,
    pub gbp: GbpConfig,
    pub eval: EvalConfig,
    pub edges: EdgesConfig,
    pub held_out: HeldOutConfig,
    pub dynamic: DynamicConfig,
    pub occupancy: OccupancyConfig,
}

fn square(x0: f64, x1: f64) -> Rect {
    Rect { x0, y0: x0, x1, y1: x1 }
}

impl SimConfig {
    pub fn defaults(experiment: Experiment) -> SimConfig {
        let se = |ell: f64| KernelSpec { family: Family::SquaredExponential, variance: 1.0, lengthscale: ell, time_lengthscale: None };
        let mut c = SimConfig {
            experiment,
            seed: 0,
            seeds: 10,
            rows: 4,
            cols: 4,
            extents: square(-1.0, 1.0),
            d_comm: 0.15,
            comm_interval: 1,
            noise_sigma: 0.1,
            steps: 2000,
            eval_every: 400,
            speed: 0.015,
            epsilon: 0.02,
            field: FieldConfig { kernel: se(0.3), resolution: 60, slices: 1, slice_steps: 1, file: None },
            model: ModelConfig {
                kernel: se(0.3),
                inducing_per_side: 4,
                buffer_capacity: 5,
                select_period: 0,
                max_inducing: None,
                scope_cap_factor: 3.0,
                min_select_variance: 1e-3,
                hyper: None,
                boundary: None,
            },
            gbp: GbpConfig { schedule: Schedule::Synchronous, damping: 0.4, max_iters: 1000, tol: 1e-6 },
            eval: EvalConfig { grid: 100, exclusion: 0.06, assignment: Assignment::Region },
            edges: EdgesConfig { extra_edges: (0..=9).collect() },
            held_out: HeldOutConfig { count: 6, size: 0.3 },
            dynamic: DynamicConfig { burn_in_slices: 5 },
            occupancy: OccupancyConfig {
                world: PathBuf::from("data/world.txt"),
                trajectories: (0..7).map(|i| PathBuf::from(format!("data/robot_{i}.txt"))).collect(),
                lidar: LidarConfig::default(),
                new_inducing: 4,
                candidate_offset: 0.1,
                test_points: 1000,
                free_margin: 0.25,
                share_posteriors: true,
                gbp_links: false,
                raster: 128,
            },
        };
        match experiment {
            Experiment::Edges => {
                c.steps = 150;
                c.eval_every = 150;
                c.field.kernel = se(0.25);
                c.model.kernel = se(0.25);
                c.model.inducing_per_side = 5;
            }
            Experiment::Async => {}
            Experiment::Dynamic => {
                let st = KernelSpec { family: Family::Matern12, variance: 1.0, lengthscale: 1.5, time_lengthscale: Some(6.0) };
                c.seeds = 4;
                c.rows = 3;
                c.cols = 3;
                // about 1.7 cell widths, so neighbours (diagonals included) are usually in range
                c.d_comm = 1.15;
                c.field = FieldConfig { kernel: st.clone(), resolution: 40, slices: 24, slice_steps: 15, file: None };
                c.steps = 24 * 15;
                c.eval_every = 15;
                c.speed = 0.03;
                c.model.kernel = st;
                c.model.inducing_per_side = 3;
                c.model.select_period = 2;
                c.model.max_inducing = Some(40);
                c.model.hyper = Some(HyperConfig::default());
                c.model.boundary = Some(BoundaryConfig { strategy: BoundaryStrategy::Line, repeat_on_reconnect: true, ..Default::default() });
                c.eval.grid = 60;
                c.eval.exclusion = 0.0;
            }
            Experiment::Occupancy => {
                c.seeds = 1;
                c.extents = square(0.0, 8.0);
                c.d_comm = 1.5;
                c.steps = 400;
                c.eval_every = 0;
                c.speed = 0.1;
                c.noise_sigma = 1.0;
                c.model.kernel = KernelSpec { family: Family::SquaredExponential, variance: 4.0, lengthscale: 0.3, time_lengthscale: None };
                c.model.inducing_per_side = 1;
                c.eval.assignment = Assignment::Closest;
                c.eval.exclusion = 0.0;
            }
        }
        c
    }

    /// Parses a TOML overlay onto the defaults of `experiment`.
    pub fn from_toml(text: &str, experiment: Experiment) -> Result<SimConfig> {
        let overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            Error::Parse { offset: e.span().map(|s| s.start).unwrap_or(0), message: e.message().to_string() }
        })?;
        if let Some(v) = overlay.get("experiment") {
            if v.as_str() != Some(experiment.name()) {
                return Err(Error::config("experiment", format!("file is for `{v}`, not `{}`", experiment.name())));
            }
        }
        let mut base = toml::Table::try_from(SimConfig::defaults(experiment)).expect("defaults serialize");
        merge(&mut base, overlay);
        let cfg: SimConfig = toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| {
            let msg = e.message().to_string();
            let key = msg.split('`').nth(1).unwrap_or("config").to_string();
            Error::config(key, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |k: &str, v: f64| if v > 0.0 && v.is_finite() { Ok(()) } else { Err(Error::config(k, format!("must be positive, got {v}"))) };
        let nonzero = |k: &str, v: u64| if v > 0 { Ok(()) } else { Err(Error::config(k, "must be at least 1")) };
        nonzero("rows", self.rows as u64)?;
        nonzero("cols", self.cols as u64)?;
        nonzero("seeds", self.seeds)?;
        nonzero("comm_interval", self.comm_interval)?;
        Rect::new(self.extents.x0, self.extents.y0, self.extents.x1, self.extents.y1).map_err(|_| Error::config("extents", "degenerate rectangle"))?;
        if !(self.d_comm >= 0.0) {
            return Err(Error::config("d_comm", "must be ≥ 0"));
        }
        pos("noise_sigma", self.noise_sigma)?;
        pos("speed", self.speed)?;
        pos("epsilon", self.epsilon)?;
        self.field.kernel.validate("field.kernel")?;
        self.model.kernel.validate("model.kernel")?;
        if !(2..=80).contains(&self.field.resolution) {
            return Err(Error::config("field.resolution", "must be between 2 and 80"));
        }
        nonzero("field.slices", self.field.slices as u64)?;
        nonzero("field.slice_steps", self.field.slice_steps)?;
        nonzero("model.inducing_per_side", self.model.inducing_per_side as u64)?;
        nonzero("model.buffer_capacity", self.model.buffer_capacity as u64)?;
        if self.model.max_inducing == Some(0) {
            return Err(Error::config("model.max_inducing", "must be at least 1"));
        }
        pos("model.scope_cap_factor", self.model.scope_cap_factor)?;
        if !(0.0..1.0).contains(&self.gbp.damping) {
            return Err(Error::config("gbp.damping", "must lie in [0, 1)"));
        }
        nonzero("gbp.max_iters", self.gbp.max_iters as u64)?;
        nonzero("eval.grid", self.eval.grid as u64)?;
        if !(self.eval.exclusion >= 0.0) {
            return Err(Error::config("eval.exclusion", "must be ≥ 0"));
        }
        if self.held_out.count > 0 {
            pos("held_out.size", self.held_out.size)?;
        }
        match self.experiment {
            Experiment::Edges => {
                let max_extra = (self.rows * self.cols) * (self.rows * self.cols - 1) / 2 - (self.rows * self.cols - 1);
                if let Some(e) = self.edges.extra_edges.iter().find(|e| **e > max_extra) {
                    return Err(Error::config("edges.extra_edges", format!("{e} exceeds the {max_extra} possible extra edges")));
                }
            }
            Experiment::Async => nonzero("eval_every", self.eval_every)?,
            Experiment::Dynamic => {
                if self.model.kernel.time_lengthscale.is_none() {
                    return Err(Error::config("model.kernel.time_lengthscale", "the dynamic experiment needs a space-time kernel"));
                }
                if self.field.file.is_none() && self.field.kernel.time_lengthscale.is_none() {
                    return Err(Error::config("field.kernel.time_lengthscale", "a sampled dynamic field needs a space-time kernel"));
                }
            }
            Experiment::Occupancy => {
                if self.occupancy.trajectories.is_empty() {
                    return Err(Error::config("occupancy.trajectories", "need at least one robot"));
                }
                let l = &self.occupancy.lidar;
                nonzero("occupancy.lidar.beams", l.beams as u64)?;
                pos("occupancy.lidar.max_range", l.max_range)?;
                pos("occupancy.lidar.free_spacing", l.free_spacing)?;
                nonzero("occupancy.test_points", self.occupancy.test_points as u64)?;
                nonzero("occupancy.raster", self.occupancy.raster as u64)?;
            }
        }
        Ok(())
    }

    pub fn noise(&self) -> NoiseModel {
        NoiseModel::new(self.noise_sigma)
    }

    pub fn robot_config(&self) -> Result<RobotConfig> {
        let mut rc = RobotConfig::new(self.model.kernel.build()?, self.noise());
        rc.buffer_capacity = self.model.buffer_capacity;
        rc.select_period = self.model.select_period;
        rc.max_inducing = self.model.max_inducing;
        rc.scope_cap_factor = self.model.scope_cap_factor;
        rc.min_select_variance = self.model.min_select_variance;
        rc.damping = self.gbp.damping;
        rc.hyper = self.model.hyper.clone();
        rc.boundary = self.model.boundary.clone();
        Ok(rc)
    }

    /// Resolves relative file paths against `base`.
    pub fn resolve_paths(&mut self, base: &std::path::Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(f) = self.field.file.as_mut() {
            fix(f);
        }
        fix(&mut self.occupancy.world);
        self.occupancy.trajectories.iter_mut().for_each(fix);
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
