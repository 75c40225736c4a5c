//! The multi-robot layer.
//!
//! Each [`RobotAgent`] owns a small local factor graph around its inducing
//! variable `u`. When two robots meet, the higher id becomes the child: its
//! unary prior becomes a conditional on the parent's block. The parent's
//! block enters the child's graph as a ghost variable whose only other factor
//! is a unary holding the parent's latest variable-to-factor message. The
//! parent in turn holds a unary factor on its own `u` carrying the latest
//! factor-to-variable message computed by the child. All traffic crosses the
//! robot boundary as [`WireRecord`] snapshots.

pub mod batch;
pub mod wire;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{InfoGaussian, MomentGaussian, Solver};
use crate::graph::{damp, FactorGraph, FactorId, FactorPayload, VarId};
use crate::inputs::InputSet;
use crate::kernel::{Kernel, NoiseModel};
use crate::region::{Border, Rect};
use crate::sparse_gp::{
    conditional_factor, coupling_factor, fitc_log_marginal, greedy_variance_select_scored, prior_factor, BceBatch,
    InducingBlock, Projector,
};

pub use wire::{PosteriorSnapshot, WireRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub x: Vec<f64>,
    pub y: f64,
    pub t: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryStrategy {
    /// A line of new points just inside each robot's side of the shared border.
    Line,
    /// Copies of the peer's points that lie near the shared border.
    Mirror,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundaryConfig {
    pub strategy: BoundaryStrategy,
    pub count: usize,
    /// Inset from the border as a fraction of the region width.
    pub inset_frac: f64,
    /// Band width (mirror strategy) as a fraction of the region width.
    pub band_frac: f64,
    /// Whether the parent also adds points, not just the child.
    pub both_sides: bool,
    /// Place a fresh set on every reconnection instead of once per pair.
    pub repeat_on_reconnect: bool,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        BoundaryConfig { strategy: BoundaryStrategy::Line, count: 5, inset_frac: 0.01, band_frac: 0.1, both_sides: true, repeat_on_reconnect: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperConfig {
    /// Steps between hyperparameter updates.
    pub period: usize,
    pub step_size: f64,
    /// Largest allowed step norm in log-parameter space.
    pub max_step: f64,
    /// Step halvings tried before a step is rejected.
    pub backtracks: usize,
}

impl Default for HyperConfig {
    fn default() -> Self {
        HyperConfig { period: 10, step_size: 1e-2, max_step: 0.5, backtracks: 5 }
    }
}

#[derive(Debug, Clone)]
pub struct RobotConfig {
    pub kernel: Kernel,
    pub noise: NoiseModel,
    /// Observations retained before the oldest is fused into the accumulator.
    pub buffer_capacity: usize,
    /// Steps between greedy inducing-point additions from the buffer; 0 disables.
    pub select_period: usize,
    /// Oldest inducing points beyond this count are retired.
    pub max_inducing: Option<usize>,
    /// A new parent joins the main conditional while the conditional's scope
    /// stays within this multiple of the robot's own block size.
    pub scope_cap_factor: f64,
    pub boundary: Option<BoundaryConfig>,
    pub hyper: Option<HyperConfig>,
    /// Relinearization sweeps per binary scan before it is fused.
    pub scan_sweeps: usize,
    /// Greedy picks with conditional variance below this fraction of the prior are skipped.
    pub min_select_variance: f64,
    /// Weight kept on the previous inbound inter-robot message.
    pub damping: f64,
    pub solver: Solver,
}

impl RobotConfig {
    pub fn new(kernel: Kernel, noise: NoiseModel) -> Self {
        RobotConfig {
            kernel,
            noise,
            buffer_capacity: 5,
            select_period: 2,
            max_inducing: None,
            scope_cap_factor: 3.0,
            boundary: None,
            hyper: None,
            scan_sweeps: 3,
            min_select_variance: 1e-3,
            damping: 0.0,
            solver: Solver::default(),
        }
    }
}

/// This robot's role on an inter-robot edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Parent,
    Child,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkStatus {
    Live,
    Stale,
}

#[derive(Debug, Clone)]
struct Link {
    role: Role,
    status: LinkStatus,
    // child side
    ghost: Option<VarId>,
    ghost_unary: Option<FactorId>,
    coupling: Option<FactorId>,
    peer_z: InputSet,
    // parent side
    remote: Option<FactorId>,
    sent_z: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RobotAgent {
    pub id: u32,
    pub region: Rect,
    pub pose: [f64; 2],
    /// Coordinates appended to spatial locations placed by the protocol
    /// (boundary points), e.g. the current time for space-time inputs.
    pub extra_coords: Vec<f64>,
    /// Timestamp given to inducing points placed by the protocol.
    pub clock: u64,
    kernel: Kernel,
    noise: NoiseModel,
    block: InducingBlock,
    graph: FactorGraph,
    u: VarId,
    prior_f: FactorId,
    acc_f: FactorId,
    data_f: FactorId,
    buffer: VecDeque<Observation>,
    links: BTreeMap<u32, Link>,
    cond_order: Vec<u32>,
    cache: BTreeMap<u32, PosteriorSnapshot>,
    version: u64,
    z_version: u64,
    boundary_done: BTreeSet<u32>,
    dirty: bool,
    cfg: RobotConfig,
}

fn check_scale(a: &InfoGaussian, b: &InfoGaussian) -> f64 {
    if a.dim() != b.dim() {
        return f64::INFINITY;
    }
    a.max_abs_diff(b) / b.lambda.amax().max(b.eta.amax()).max(1.0)
}

/// Index map from `old` to `new`: coordinate `i` of `new` comes from the
/// first unused identical point of `old`.
fn match_points(old: &InputSet, new: &InputSet) -> Vec<Option<usize>> {
    let mut used = vec![false; old.len()];
    (0..new.len())
        .map(|i| {
            let p = new.point(i);
            let hit = (0..old.len()).find(|&j| !used[j] && old.point(j) == p);
            if let Some(j) = hit {
                used[j] = true;
            }
            hit
        })
        .collect()
}

impl RobotAgent {
    pub fn new(id: u32, region: Rect, pose: [f64; 2], z: InputSet, cfg: RobotConfig) -> Result<Self> {
        if z.is_empty() {
            return Err(Error::config("inducing", "a robot needs at least one initial inducing point"));
        }
        let mut graph = FactorGraph::with_solver(cfg.solver);
        let m = z.len();
        let u = graph.add_variable(m)?;
        let prior = prior_factor(&z, &cfg.kernel, &cfg.solver)?;
        let prior_f = graph.add_factor(&[u], FactorPayload::Gaussian(prior))?;
        let acc_f = graph.add_factor(&[u], FactorPayload::Gaussian(InfoGaussian::zeros(m)))?;
        let data_f = graph.add_factor(&[u], FactorPayload::Gaussian(InfoGaussian::zeros(m)))?;
        let mut robot = RobotAgent {
            id,
            region,
            pose,
            extra_coords: Vec::new(),
            clock: 0,
            kernel: cfg.kernel.clone(),
            noise: cfg.noise,
            block: InducingBlock::new(z, 0),
            graph,
            u,
            prior_f,
            acc_f,
            data_f,
            buffer: VecDeque::new(),
            links: BTreeMap::new(),
            cond_order: Vec::new(),
            cache: BTreeMap::new(),
            version: 0,
            z_version: 0,
            boundary_done: BTreeSet::new(),
            dirty: true,
            cfg,
        };
        robot.refresh()?;
        Ok(robot)
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn config(&self) -> &RobotConfig {
        &self.cfg
    }

    pub fn block(&self) -> &InducingBlock {
        &self.block
    }

    pub fn z(&self) -> &InputSet {
        &self.block.z
    }

    pub fn buffer(&self) -> impl Iterator<Item = &Observation> {
        self.buffer.iter()
    }

    pub fn graph(&self) -> &FactorGraph {
        &self.graph
    }

    pub fn cache(&self) -> &BTreeMap<u32, PosteriorSnapshot> {
        &self.cache
    }

    /// Version of the latest snapshot this robot has issued.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn link(&self, peer: u32) -> Option<(Role, LinkStatus)> {
        self.links.get(&peer).map(|l| (l.role, l.status))
    }

    pub fn peers(&self) -> Vec<u32> {
        self.links.keys().copied().collect()
    }

    /// Parents included in the main conditional, in scope order.
    pub fn conditional_parents(&self) -> &[u32] {
        &self.cond_order
    }

    /// Current prior or conditional factor over `[u, parents...]`.
    pub fn prior_payload(&self) -> Result<InfoGaussian> {
        Ok(self.graph.payload(self.prior_f)?.gaussian().clone())
    }

    /// Runs the local tree sweep if anything changed since the last one.
    pub fn refresh(&mut self) -> Result<()> {
        if self.dirty {
            self.graph.sweep_tree(self.u)?;
            self.dirty = false;
        }
        Ok(())
    }

    pub fn belief_info(&mut self) -> Result<InfoGaussian> {
        self.refresh()?;
        Ok(self.graph.belief(self.u)?.clone())
    }

    pub fn belief(&mut self) -> Result<MomentGaussian> {
        self.refresh()?;
        self.graph.belief_moments(self.u)
    }

    pub fn projector(&self) -> Result<Projector> {
        Projector::new(&self.block.z, &self.kernel, &self.cfg.solver)
    }

    /// Local predictive mean and variance.
    pub fn predict(&mut self, xs: &InputSet) -> Result<(Vec<f64>, Vec<f64>)> {
        let b = self.belief()?;
        self.projector()?.predict(xs, &b)
    }

    fn data_payload(&self) -> Result<InfoGaussian> {
        if self.buffer.is_empty() {
            return Ok(InfoGaussian::zeros(self.block.len()));
        }
        let dim = self.kernel.input_dim();
        let xs = InputSet::from_flat(dim, self.buffer.iter().flat_map(|o| o.x.iter().copied()).collect())?;
        let ys: Vec<f64> = self.buffer.iter().map(|o| o.y).collect();
        self.projector()?.observation_factor_batch(&xs, &ys, self.noise.variance())
    }

    fn scope_cap(&self) -> usize {
        (self.cfg.scope_cap_factor * self.block.len() as f64).floor() as usize
    }

    /// Rebuilds every kernel-dependent factor from the current kernel and inducing sets.
    fn rebuild(&mut self) -> Result<()> {
        let solver = self.cfg.solver;
        let mut scope = vec![self.u];
        let mut z_par = InputSet::new(self.kernel.input_dim());
        for p in &self.cond_order {
            let l = &self.links[p];
            scope.push(l.ghost.unwrap());
            z_par.extend(&l.peer_z)?;
        }
        let payload = if z_par.is_empty() {
            prior_factor(&self.block.z, &self.kernel, &solver)?
        } else {
            conditional_factor(&self.block.z, &z_par, &self.kernel, &solver)?
        };
        self.graph.retarget_factor(self.prior_f, &scope, FactorPayload::Gaussian(payload))?;
        for l in self.links.values() {
            if let Some(f) = l.coupling {
                let c = coupling_factor(&self.block.z, &l.peer_z, &self.kernel, &solver)?;
                self.graph.set_payload(f, FactorPayload::Gaussian(c))?;
            }
        }
        self.graph.set_payload(self.acc_f, FactorPayload::Gaussian(self.block.accumulator.clone()))?;
        let data = self.data_payload()?;
        self.graph.set_payload(self.data_f, FactorPayload::Gaussian(data))?;
        self.dirty = true;
        Ok(())
    }

    /// Adds one continuous observation; the oldest retained one beyond capacity
    /// is fused into the accumulator and dropped.
    pub fn observe(&mut self, obs: Observation) -> Result<()> {
        if obs.x.len() != self.kernel.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.kernel.input_dim(), found: obs.x.len() });
        }
        self.buffer.push_back(obs);
        self.fuse_overflow()
    }

    fn fuse_overflow(&mut self) -> Result<()> {
        if self.buffer.len() > self.cfg.buffer_capacity {
            let p = self.projector()?;
            while self.buffer.len() > self.cfg.buffer_capacity {
                let o = self.buffer.pop_front().unwrap();
                self.block.fuse(&p.observation_factor(&o.x, o.y, self.noise.variance())?)?;
            }
            self.graph.set_payload(self.acc_f, FactorPayload::Gaussian(self.block.accumulator.clone()))?;
        }
        let data = self.data_payload()?;
        self.graph.set_payload(self.data_f, FactorPayload::Gaussian(data))?;
        self.dirty = true;
        Ok(())
    }

    /// Greedy selection of one new inducing point from the retained buffer,
    /// on steps that are multiples of the selection period.
    pub fn maybe_select(&mut self, step: u64) -> Result<bool> {
        let k = self.cfg.select_period as u64;
        if k == 0 || step % k != 0 || self.buffer.is_empty() {
            return Ok(false);
        }
        let dim = self.kernel.input_dim();
        let cands = InputSet::from_flat(dim, self.buffer.iter().flat_map(|o| o.x.iter().copied()).collect())?;
        let picks = greedy_variance_select_scored(&cands, &self.block.z, &self.kernel, 1, &self.cfg.solver)?;
        match picks.first() {
            Some(&(i, score)) if score > self.cfg.min_select_variance * self.kernel.variance() => {
                let x = cands.point(i).to_vec();
                self.add_inducing_point(&x, step)?;
                Ok(true)
            }
            _ => Ok(false),
        }
    }

    /// Appends an inducing point, then retires the oldest points beyond the cap.
    pub fn add_inducing_point(&mut self, x: &[f64], stamp: u64) -> Result<()> {
        let map = self.block.add_point(x, stamp)?;
        self.graph.resize_variable(self.u, &map)?;
        let remotes: Vec<FactorId> = self.links.values().filter_map(|l| l.remote).collect();
        for f in remotes {
            let g = self.graph.payload(f)?.gaussian().remap(&map);
            self.graph.set_payload(f, FactorPayload::Gaussian(g))?;
        }
        self.z_version += 1;
        self.rebuild()?;
        if let Some(cap) = self.cfg.max_inducing {
            self.retire(cap)?;
        }
        Ok(())
    }

    /// Removes the oldest inducing points beyond `cap`, marginalizing them out.
    pub fn retire(&mut self, cap: usize) -> Result<bool> {
        if self.block.len() <= cap.max(1) {
            return Ok(false);
        }
        let solver = self.cfg.solver;
        let old_prior = prior_factor(&self.block.z, &self.kernel, &solver)?;
        let Some(keep) = self.block.retire(cap, &self.kernel, &solver)? else {
            return Ok(false);
        };
        let new_prior = prior_factor(&self.block.z, &self.kernel, &solver)?;
        let old_dim = old_prior.dim();
        let map: Vec<Option<usize>> = keep.iter().map(|&i| Some(i)).collect();
        let updates: Vec<(FactorId, InfoGaussian)> = self
            .links
            .values()
            .filter_map(|l| l.remote.map(|f| (f, l.status)))
            .map(|(f, status)| {
                let g = self.graph.payload(f)?.gaussian().clone();
                let next = if status == LinkStatus::Live || g.dim() != old_dim {
                    InfoGaussian::zeros(keep.len())
                } else {
                    old_prior.product(&g)?.marginalize_with(&keep, &solver)?.quotient(&new_prior)?
                };
                Ok((f, next))
            })
            .collect::<Result<_>>()?;
        self.graph.resize_variable(self.u, &map)?;
        for (f, g) in updates {
            self.graph.set_payload(f, FactorPayload::Gaussian(g))?;
        }
        self.z_version += 1;
        self.rebuild()?;
        Ok(true)
    }

    /// Fuses one batch of binary observations. New inducing points are first
    /// picked greedily from `candidates`; the batch then enters the graph as a
    /// cross-entropy factor, is relinearized over a few local sweeps, and its
    /// final Gaussian form is absorbed into the accumulator.
    pub fn observe_scan(
        &mut self,
        xs: &InputSet,
        ys: &[f64],
        candidates: &InputSet,
        n_new: usize,
        stamp: u64,
    ) -> Result<()> {
        if n_new > 0 && !candidates.is_empty() {
            let picks = greedy_variance_select_scored(candidates, &self.block.z, &self.kernel, n_new, &self.cfg.solver)?;
            for (i, score) in picks {
                if score > self.cfg.min_select_variance * self.kernel.variance() {
                    self.add_inducing_point(candidates.point(i), stamp)?;
                }
            }
        }
        if xs.is_empty() {
            return Ok(());
        }
        let model = BceBatch::new(&self.projector()?, xs, ys)?;
        self.refresh()?;
        let f = self.graph.add_factor(&[self.u], FactorPayload::non_gaussian(Arc::new(model)))?;
        for _ in 0..self.cfg.scan_sweeps.max(1) {
            self.graph.sweep_tree(self.u)?;
        }
        let lin = self.graph.payload(f)?.gaussian().clone();
        self.graph.remove_factor(f)?;
        self.block.fuse(&lin)?;
        self.graph.set_payload(self.acc_f, FactorPayload::Gaussian(self.block.accumulator.clone()))?;
        self.dirty = true;
        self.refresh()
    }

    /// One gradient-ascent step of the FITC log marginal on the retained
    /// buffer, with step halving. Returns whether a step was accepted.
    pub fn hyper_step(&mut self) -> Result<bool> {
        let Some(h) = self.cfg.hyper.clone() else { return Ok(false) };
        if self.buffer.is_empty() {
            return Ok(false);
        }
        let dim = self.kernel.input_dim();
        let xs = InputSet::from_flat(dim, self.buffer.iter().flat_map(|o| o.x.iter().copied()).collect())?;
        let ys: Vec<f64> = self.buffer.iter().map(|o| o.y).collect();
        let solver = self.cfg.solver;
        let base = fitc_log_marginal(&xs, &ys, &self.block.z, &self.kernel, &self.noise, &solver)?;
        let mut step: Vec<f64> = base.grad.iter().map(|g| g * h.step_size).collect();
        let norm = step.iter().map(|s| s * s).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Ok(false);
        }
        if norm > h.max_step {
            step.iter_mut().for_each(|s| *s *= h.max_step / norm);
        }
        let mut params = self.kernel.params();
        params.push(self.noise.log_sigma);
        let mut scale = 1.0;
        for _ in 0..=h.backtracks {
            let trial: Vec<f64> = params.iter().zip(&step).map(|(p, s)| p + scale * s).collect();
            let mut k = self.kernel.clone();
            k.set_params(&trial[..trial.len() - 1]);
            let n = NoiseModel { log_sigma: trial[trial.len() - 1] };
            if let Ok(v) = fitc_log_marginal(&xs, &ys, &self.block.z, &k, &n, &solver) {
                if v.value > base.value {
                    self.kernel = k;
                    self.noise = n;
                    self.rebuild()?;
                    return Ok(true);
                }
            }
            scale *= 0.5;
        }
        Ok(false)
    }

    /// Issues a fresh snapshot of this robot's posterior.
    pub fn snapshot(&mut self) -> Result<PosteriorSnapshot> {
        let b = self.belief()?;
        self.version += 1;
        let mut theta = self.kernel.params();
        theta.push(self.noise.log_sigma);
        Ok(PosteriorSnapshot { robot: self.id, version: self.version, z: self.block.z.clone(), mu: b.mu, sigma: b.sigma, theta })
    }

    /// Prediction from a cached (or own, when `robot == self.id`) posterior.
    pub fn predict_with_snapshot(&self, snap: &PosteriorSnapshot, xs: &InputSet) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut k = self.kernel.clone();
        k.set_params(&snap.theta[..snap.theta.len() - 1]);
        let p = Projector::new(&snap.z, &k, &self.cfg.solver)?;
        p.predict(xs, &MomentGaussian { mu: snap.mu.clone(), sigma: snap.sigma.clone() })
    }

    fn merge_snapshot(&mut self, snap: &PosteriorSnapshot) {
        if snap.robot == self.id {
            return;
        }
        match self.cache.get(&snap.robot) {
            Some(old) if old.version >= snap.version => {}
            _ => {
                self.cache.insert(snap.robot, snap.clone());
            }
        }
    }

    fn link_as_parent(&mut self, peer: u32) -> Result<()> {
        match self.links.get_mut(&peer) {
            Some(l) => {
                l.status = LinkStatus::Live;
                l.sent_z = None;
                let f = l.remote.unwrap();
                self.graph.set_payload(f, FactorPayload::Gaussian(InfoGaussian::zeros(self.block.len())))?;
            }
            None => {
                let f = self.graph.add_factor(&[self.u], FactorPayload::Gaussian(InfoGaussian::zeros(self.block.len())))?;
                self.links.insert(
                    peer,
                    Link {
                        role: Role::Parent,
                        status: LinkStatus::Live,
                        ghost: None,
                        ghost_unary: None,
                        coupling: None,
                        peer_z: InputSet::new(0),
                        remote: Some(f),
                        sent_z: None,
                    },
                );
            }
        }
        self.dirty = true;
        Ok(())
    }

    fn link_as_child(&mut self, peer: u32, peer_z: &InputSet) -> Result<()> {
        if let Some(l) = self.links.get_mut(&peer) {
            // stale state is discarded; the ghost restarts from zero information
            l.status = LinkStatus::Live;
            let ghost = l.ghost.unwrap();
            let gu = l.ghost_unary.unwrap();
            l.peer_z = peer_z.clone();
            self.graph.resize_variable(ghost, &vec![None; peer_z.len()])?;
            self.graph.set_payload(gu, FactorPayload::Gaussian(InfoGaussian::zeros(peer_z.len())))?;
            return self.rebuild();
        }
        let ghost = self.graph.add_variable(peer_z.len())?;
        let gu = self.graph.add_factor(&[ghost], FactorPayload::Gaussian(InfoGaussian::zeros(peer_z.len())))?;
        let used: usize = self.block.len() + self.cond_order.iter().map(|p| self.links[p].peer_z.len()).sum::<usize>();
        let coupling = if used + peer_z.len() <= self.scope_cap() {
            self.cond_order.push(peer);
            None
        } else {
            let c = coupling_factor(&self.block.z, peer_z, &self.kernel, &self.cfg.solver)?;
            Some(self.graph.add_factor(&[self.u, ghost], FactorPayload::Gaussian(c))?)
        };
        self.links.insert(
            peer,
            Link {
                role: Role::Child,
                status: LinkStatus::Live,
                ghost: Some(ghost),
                ghost_unary: Some(gu),
                coupling,
                peer_z: peer_z.clone(),
                remote: None,
                sent_z: None,
            },
        );
        self.rebuild()
    }

    fn update_peer_z(&mut self, peer: u32, z: &InputSet) -> Result<()> {
        let l = self.links.get(&peer).ok_or(Error::NotConnected { a: self.id, b: peer })?;
        if l.peer_z == *z {
            return Ok(());
        }
        let map = match_points(&l.peer_z, z);
        let lossless = map.iter().flatten().count() == l.peer_z.len();
        let (ghost, gu) = (l.ghost.unwrap(), l.ghost_unary.unwrap());
        let old = self.graph.payload(gu)?.gaussian().clone();
        self.graph.resize_variable(ghost, &map)?;
        let g = if lossless { old.remap(&map) } else { InfoGaussian::zeros(z.len()) };
        self.graph.set_payload(gu, FactorPayload::Gaussian(g))?;
        self.links.get_mut(&peer).unwrap().peer_z = z.clone();
        self.rebuild()
    }

    /// Records the parent sends to `child` on one exchange.
    fn outbound(&mut self, child: u32) -> Result<Vec<WireRecord>> {
        self.refresh()?;
        let l = self.links.get(&child).ok_or(Error::NotConnected { a: self.id, b: child })?;
        let mut out = Vec::new();
        if l.sent_z != Some(self.z_version) {
            out.push(WireRecord::Connect { from: self.id, to: child, z: self.block.z.clone() });
        }
        let msg = self.graph.variable_to_factor(self.u, l.remote.unwrap())?;
        out.push(WireRecord::Msg { from: self.id, to: child, message: msg });
        let zv = self.z_version;
        self.links.get_mut(&child).unwrap().sent_z = Some(zv);
        Ok(out)
    }

    /// Applies one inbound record; a child answers a parent's MSG with its own.
    pub fn handle(&mut self, rec: &WireRecord) -> Result<Option<WireRecord>> {
        match rec {
            WireRecord::Connect { from, to, z } => {
                debug_assert_eq!(*to, self.id);
                let existing = self.links.get(from).map(|l| (l.role, l.status));
                if existing == Some((Role::Child, LinkStatus::Live)) {
                    self.update_peer_z(*from, z)?;
                } else {
                    self.link_as_child(*from, z)?;
                }
                Ok(None)
            }
            WireRecord::Msg { from, message, .. } => {
                let l = self.links.get(from).ok_or(Error::NotConnected { a: self.id, b: *from })?.clone();
                match l.role {
                    Role::Child => {
                        let m = self.damped(l.ghost_unary.unwrap(), message)?;
                        self.graph.set_payload(l.ghost_unary.unwrap(), FactorPayload::Gaussian(m))?;
                        self.dirty = true;
                        self.refresh()?;
                        let f = l.coupling.unwrap_or(self.prior_f);
                        let reply = self.graph.message_to_variable(f, l.ghost.unwrap())?.clone();
                        Ok(Some(WireRecord::Msg { from: self.id, to: *from, message: reply }))
                    }
                    Role::Parent => {
                        let m = self.damped(l.remote.unwrap(), message)?;
                        self.graph.set_payload(l.remote.unwrap(), FactorPayload::Gaussian(m))?;
                        self.dirty = true;
                        Ok(None)
                    }
                }
            }
            WireRecord::Decouple { from, .. } => {
                let l = self.links.get_mut(from).ok_or(Error::NotConnected { a: self.id, b: *from })?;
                l.status = LinkStatus::Stale;
                Ok(None)
            }
            WireRecord::Posterior(p) => {
                self.merge_snapshot(p);
                Ok(None)
            }
        }
    }

    /// Blends an inbound message with the one it replaces; a link that holds
    /// no information yet takes the message as is.
    fn damped(&self, f: FactorId, message: &InfoGaussian) -> Result<InfoGaussian> {
        let old = self.graph.payload(f)?.gaussian();
        if old.is_zero() {
            return Ok(message.clone());
        }
        Ok(damp(message.clone(), old, self.cfg.damping))
    }

    /// Removes all observations still in the buffer without fusing them.
    pub fn clear_buffer(&mut self) -> Result<()> {
        self.buffer.clear();
        self.fuse_overflow()
    }
}

fn order<'a>(a: &'a mut RobotAgent, b: &'a mut RobotAgent) -> (&'a mut RobotAgent, &'a mut RobotAgent) {
    if a.id < b.id {
        (a, b)
    } else {
        (b, a)
    }
}

fn live(a: &RobotAgent, b: &RobotAgent) -> bool {
    a.links.get(&b.id).map(|l| l.status == LinkStatus::Live).unwrap_or(false)
        && b.links.get(&a.id).map(|l| l.status == LinkStatus::Live).unwrap_or(false)
}

pub fn distance(a: &RobotAgent, b: &RobotAgent) -> f64 {
    ((a.pose[0] - b.pose[0]).powi(2) + (a.pose[1] - b.pose[1]).powi(2)).sqrt()
}

/// Establishes a live edge: the lower id becomes the parent and the higher id
/// replaces its unary prior with a conditional on the parent's block. Returns
/// `false` when the edge was already live.
pub fn connect(a: &mut RobotAgent, b: &mut RobotAgent, d_comm: f64) -> Result<bool> {
    if a.id == b.id {
        return Err(Error::UnknownId { kind: "distinct robot", id: a.id as usize });
    }
    let d = distance(a, b);
    if d > d_comm {
        return Err(Error::OutOfRange { a: a.id, b: b.id, distance: d, range: d_comm });
    }
    if live(a, b) {
        return Ok(false);
    }
    let (parent, child) = order(a, b);
    if let Some(cfg) = parent.cfg.boundary.clone() {
        if !parent.boundary_done.contains(&child.id) {
            let extra = parent.extra_coords.clone();
            let stamp = parent.clock;
            match boundary_inducing(parent, child, &cfg, &extra, stamp) {
                Ok(_) | Err(Error::NoSharedBoundary { .. }) => {}
                Err(e) => return Err(e),
            }
            parent.boundary_done.insert(child.id);
            child.boundary_done.insert(parent.id);
        }
    }
    parent.link_as_parent(child.id)?;
    let rec = WireRecord::Connect { from: parent.id, to: child.id, z: parent.block.z.clone() };
    child.handle(&rec)?;
    let zv = parent.z_version;
    parent.links.get_mut(&child.id).unwrap().sent_z = Some(zv);
    // the ghost starts without information; one exchange gives it the parent's belief
    exchange(parent, child)?;
    Ok(true)
}

/// One round of message exchange across a live edge. Returns the relative
/// change of the parent's stored inbound message.
pub fn exchange(a: &mut RobotAgent, b: &mut RobotAgent) -> Result<f64> {
    if !live(a, b) {
        return Err(Error::NotConnected { a: a.id, b: b.id });
    }
    let (parent, child) = order(a, b);
    let recs = parent.outbound(child.id)?;
    let mut reply = None;
    for r in &recs {
        reply = child.handle(r)?.or(reply);
    }
    let reply = reply.expect("child answers a message");
    let before = parent.graph.payload(parent.links[&child.id].remote.unwrap())?.gaussian().clone();
    parent.handle(&reply)?;
    let WireRecord::Msg { message, .. } = &reply else { unreachable!() };
    Ok(check_scale(&before, message))
}

/// Freezes a live edge. Both sides keep their last messages as fixed factors.
pub fn decouple(a: &mut RobotAgent, b: &mut RobotAgent) -> Result<()> {
    if !live(a, b) {
        return Err(Error::NotConnected { a: a.id, b: b.id });
    }
    a.handle(&WireRecord::Decouple { from: b.id, to: a.id })?;
    b.handle(&WireRecord::Decouple { from: a.id, to: b.id })?;
    let (ida, idb) = (a.id, b.id);
    for (r, peer) in [(&mut *a, idb), (&mut *b, ida)] {
        if r.cfg.boundary.as_ref().is_some_and(|c| c.repeat_on_reconnect) {
            r.boundary_done.remove(&peer);
        }
    }
    Ok(())
}

/// Adds boundary inducing points for a pair of robots with adjacent regions.
/// `extra` is appended to every new spatial location (e.g. the current time).
/// Returns how many points each robot (lower id first) gained.
pub fn boundary_inducing(
    a: &mut RobotAgent,
    b: &mut RobotAgent,
    cfg: &BoundaryConfig,
    extra: &[f64],
    stamp: u64,
) -> Result<(usize, usize)> {
    let (lo, hi) = order(a, b);
    let border = lo.region.shared_border(&hi.region).ok_or(Error::NoSharedBoundary { a: lo.id, b: hi.id })?;
    let pts_lo = if cfg.both_sides { boundary_points(lo, hi, &border, cfg, extra) } else { Vec::new() };
    let pts_hi = boundary_points(hi, lo, &border, cfg, extra);
    for p in &pts_lo {
        lo.add_inducing_point(p, stamp)?;
    }
    for p in &pts_hi {
        hi.add_inducing_point(p, stamp)?;
    }
    Ok((pts_lo.len(), pts_hi.len()))
}

fn boundary_points(me: &RobotAgent, peer: &RobotAgent, border: &Border, cfg: &BoundaryConfig, extra: &[f64]) -> Vec<Vec<f64>> {
    let c = me.region.center();
    match cfg.strategy {
        BoundaryStrategy::Line => {
            let n = cfg.count;
            let mut out = Vec::with_capacity(n);
            for k in 0..n {
                let (x, y) = match *border {
                    Border::Vertical { at, lo, hi } => {
                        let d = cfg.inset_frac * me.region.width();
                        (at - d * (at - c[0]).signum(), lo + (k as f64 + 0.5) * (hi - lo) / n as f64)
                    }
                    Border::Horizontal { at, lo, hi } => {
                        let d = cfg.inset_frac * me.region.height();
                        (lo + (k as f64 + 0.5) * (hi - lo) / n as f64, at - d * (at - c[1]).signum())
                    }
                };
                let mut p = vec![x, y];
                p.extend_from_slice(extra);
                out.push(p);
            }
            out
        }
        BoundaryStrategy::Mirror => {
            let z = &peer.block.z;
            let mut near: Vec<(f64, usize)> = (0..z.len())
                .filter_map(|i| {
                    let p = z.point(i);
                    let (dist, along, lo, hi, w) = match *border {
                        Border::Vertical { at, lo, hi } => ((p[0] - at).abs(), p[1], lo, hi, peer.region.width()),
                        Border::Horizontal { at, lo, hi } => ((p[1] - at).abs(), p[0], lo, hi, peer.region.height()),
                    };
                    (dist <= cfg.band_frac * w && along >= lo && along <= hi).then_some((dist, i))
                })
                .collect();
            near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            near.into_iter().take(cfg.count).map(|(_, i)| z.point(i).to_vec()).collect()
        }
    }
}

/// Both robots exchange their own snapshot and every snapshot they hold.
pub fn share_posteriors(a: &mut RobotAgent, b: &mut RobotAgent, d_comm: f64) -> Result<()> {
    let d = distance(a, b);
    if d > d_comm {
        return Err(Error::OutOfRange { a: a.id, b: b.id, distance: d, range: d_comm });
    }
    let mut from_a: Vec<WireRecord> = a.cache.values().cloned().map(WireRecord::Posterior).collect();
    from_a.push(WireRecord::Posterior(a.snapshot()?));
    let mut from_b: Vec<WireRecord> = b.cache.values().cloned().map(WireRecord::Posterior).collect();
    from_b.push(WireRecord::Posterior(b.snapshot()?));
    for r in &from_b {
        a.handle(r)?;
    }
    for r in &from_a {
        b.handle(r)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
