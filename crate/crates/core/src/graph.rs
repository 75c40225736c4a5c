//! Gaussian factor graphs and belief propagation.
//!
//! Each edge stores both directions of message. Beliefs are cached per
//! variable as the product of all incoming factor-to-variable messages and
//! are refreshed whenever those messages change.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{InfoGaussian, MomentGaussian, Solver};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FactorId(pub usize);

/// A non-Gaussian energy that can be expanded to a Gaussian factor around a point.
pub trait EnergyModel: Send + Sync + fmt::Debug {
    /// Total dimension of the factor scope.
    fn dim(&self) -> usize;
    /// Gaussian factor from a first-order expansion at `point` (stacked scope means).
    fn linearize(&self, point: &DVector<f64>) -> InfoGaussian;
}

#[derive(Debug, Clone)]
pub enum FactorPayload {
    Gaussian(InfoGaussian),
    NonGaussian { model: Arc<dyn EnergyModel>, linearized: InfoGaussian },
}

impl FactorPayload {
    pub fn non_gaussian(model: Arc<dyn EnergyModel>) -> Self {
        let d = model.dim();
        FactorPayload::NonGaussian { model, linearized: InfoGaussian::zeros(d) }
    }

    /// Current Gaussian form (the last linearization for non-Gaussian factors).
    pub fn gaussian(&self) -> &InfoGaussian {
        match self {
            FactorPayload::Gaussian(g) => g,
            FactorPayload::NonGaussian { linearized, .. } => linearized,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            FactorPayload::Gaussian(g) => g.dim(),
            FactorPayload::NonGaussian { model, .. } => model.dim(),
        }
    }
}

#[derive(Debug, Clone)]
struct Variable {
    dim: usize,
    edges: Vec<FactorId>,
    belief: InfoGaussian,
}

#[derive(Debug, Clone)]
struct Factor {
    scope: Vec<VarId>,
    offsets: Vec<usize>,
    payload: FactorPayload,
    to_var: Vec<InfoGaussian>,
    to_factor: Vec<InfoGaussian>,
    group: u32,
}

impl Factor {
    fn slot(&self, v: VarId) -> Option<usize> {
        self.scope.iter().position(|x| *x == v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// All variable-to-factor messages, then all factor-to-variable messages.
    Synchronous,
    /// Factors updated one at a time in a freshly shuffled order each iteration.
    RandomEdge,
    /// Factors updated one at a time, grouped by owner tag, in ascending order.
    PerGroup,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterateOptions {
    pub schedule: Schedule,
    /// Weight on the previous message: `m = (1-γ)·m_raw + γ·m_old`.
    pub damping: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for IterateOptions {
    fn default() -> Self {
        IterateOptions { schedule: Schedule::Synchronous, damping: 0.4, max_iters: 500, tol: 1e-8, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterateOutcome {
    pub converged: bool,
    pub iterations: usize,
    pub last_change: f64,
}

#[derive(Debug, Clone)]
pub struct FactorGraph {
    vars: Vec<Option<Variable>>,
    factors: Vec<Option<Factor>>,
    pub solver: Solver,
    /// Any message whose precision trace exceeds this aborts iteration.
    pub divergence_bound: f64,
}

impl Default for FactorGraph {
    fn default() -> Self {
        FactorGraph::new()
    }
}

pub(crate) fn damp(raw: InfoGaussian, old: &InfoGaussian, gamma: f64) -> InfoGaussian {
    if gamma == 0.0 || old.dim() != raw.dim() {
        return raw;
    }
    InfoGaussian {
        eta: raw.eta * (1.0 - gamma) + &old.eta * gamma,
        lambda: raw.lambda * (1.0 - gamma) + &old.lambda * gamma,
    }
}

/// Change between two messages: moments when both are proper, natural parameters otherwise.
fn message_change(old: &InfoGaussian, new: &InfoGaussian) -> f64 {
    if old.dim() != new.dim() {
        return f64::INFINITY;
    }
    if old == new {
        return 0.0;
    }
    let strict = Solver { escalations: 0, jitter: 0.0, cond_floor: 1e-12 };
    if let (Ok(a), Ok(b)) = (strict.cholesky(&old.lambda, ""), strict.cholesky(&new.lambda, "")) {
        if a.jitter() == 0.0 && b.jitter() == 0.0 {
            let ma = a.solve_vec(&old.eta);
            let mb = b.solve_vec(&new.eta);
            let va = a.inverse().diagonal();
            let vb = b.inverse().diagonal();
            let mut worst = 0.0f64;
            for i in 0..ma.len() {
                worst = worst.max((ma[i] - mb[i]).abs() / ma[i].abs().max(1.0));
                worst = worst.max((va[i] - vb[i]).abs() / va[i].abs().max(1.0));
            }
            return worst;
        }
    }
    let scale = old.lambda.amax().max(old.eta.amax()).max(1.0);
    old.max_abs_diff(new) / scale
}

impl FactorGraph {
    pub fn new() -> Self {
        FactorGraph { vars: Vec::new(), factors: Vec::new(), solver: Solver::default(), divergence_bound: 1e12 }
    }

    pub fn with_solver(solver: Solver) -> Self {
        FactorGraph { solver, ..FactorGraph::new() }
    }

    fn var(&self, v: VarId) -> Result<&Variable> {
        self.vars.get(v.0).and_then(|x| x.as_ref()).ok_or(Error::UnknownId { kind: "variable", id: v.0 })
    }

    fn var_mut(&mut self, v: VarId) -> Result<&mut Variable> {
        self.vars.get_mut(v.0).and_then(|x| x.as_mut()).ok_or(Error::UnknownId { kind: "variable", id: v.0 })
    }

    fn factor(&self, f: FactorId) -> Result<&Factor> {
        self.factors.get(f.0).and_then(|x| x.as_ref()).ok_or(Error::UnknownId { kind: "factor", id: f.0 })
    }

    fn factor_mut(&mut self, f: FactorId) -> Result<&mut Factor> {
        self.factors.get_mut(f.0).and_then(|x| x.as_mut()).ok_or(Error::UnknownId { kind: "factor", id: f.0 })
    }

    pub fn variable_ids(&self) -> Vec<VarId> {
        self.vars.iter().enumerate().filter(|(_, v)| v.is_some()).map(|(i, _)| VarId(i)).collect()
    }

    pub fn factor_ids(&self) -> Vec<FactorId> {
        self.factors.iter().enumerate().filter(|(_, f)| f.is_some()).map(|(i, _)| FactorId(i)).collect()
    }

    pub fn dim(&self, v: VarId) -> Result<usize> {
        Ok(self.var(v)?.dim)
    }

    pub fn factors_of(&self, v: VarId) -> Result<&[FactorId]> {
        Ok(&self.var(v)?.edges)
    }

    pub fn scope(&self, f: FactorId) -> Result<&[VarId]> {
        Ok(&self.factor(f)?.scope)
    }

    pub fn payload(&self, f: FactorId) -> Result<&FactorPayload> {
        Ok(&self.factor(f)?.payload)
    }

    pub fn belief(&self, v: VarId) -> Result<&InfoGaussian> {
        Ok(&self.var(v)?.belief)
    }

    pub fn belief_moments(&self, v: VarId) -> Result<MomentGaussian> {
        self.var(v)?.belief.to_moments_with(&self.solver)
    }

    /// Stored factor-to-variable message on edge `(f, v)`.
    pub fn message_to_variable(&self, f: FactorId, v: VarId) -> Result<&InfoGaussian> {
        let fac = self.factor(f)?;
        let s = fac.slot(v).ok_or(Error::UnknownId { kind: "edge", id: v.0 })?;
        Ok(&fac.to_var[s])
    }

    /// Stored variable-to-factor message on edge `(f, v)`.
    pub fn message_to_factor(&self, v: VarId, f: FactorId) -> Result<&InfoGaussian> {
        let fac = self.factor(f)?;
        let s = fac.slot(v).ok_or(Error::UnknownId { kind: "edge", id: v.0 })?;
        Ok(&fac.to_factor[s])
    }

    pub fn add_variable(&mut self, dim: usize) -> Result<VarId> {
        if dim == 0 {
            return Err(Error::DimensionMismatch { expected: 1, found: 0 });
        }
        self.vars.push(Some(Variable { dim, edges: Vec::new(), belief: InfoGaussian::zeros(dim) }));
        Ok(VarId(self.vars.len() - 1))
    }

    /// Removes a variable and every factor attached to it.
    pub fn remove_variable(&mut self, v: VarId) -> Result<()> {
        let edges = self.var(v)?.edges.clone();
        for f in edges {
            self.remove_factor(f)?;
        }
        self.vars[v.0] = None;
        Ok(())
    }

    fn check_scope(&self, scope: &[VarId], payload: &FactorPayload) -> Result<Vec<usize>> {
        let mut offsets = Vec::with_capacity(scope.len());
        let mut total = 0;
        for (i, v) in scope.iter().enumerate() {
            if scope[..i].contains(v) {
                return Err(Error::UnknownId { kind: "duplicate scope variable", id: v.0 });
            }
            offsets.push(total);
            total += self.var(*v)?.dim;
        }
        if payload.dim() != total {
            return Err(Error::DimensionMismatch { expected: total, found: payload.dim() });
        }
        Ok(offsets)
    }

    pub fn add_factor(&mut self, scope: &[VarId], payload: FactorPayload) -> Result<FactorId> {
        self.add_factor_in_group(scope, payload, 0)
    }

    pub fn add_factor_in_group(&mut self, scope: &[VarId], payload: FactorPayload, group: u32) -> Result<FactorId> {
        let offsets = self.check_scope(scope, &payload)?;
        let id = FactorId(self.factors.len());
        let dims: Vec<usize> = scope.iter().map(|v| self.vars[v.0].as_ref().unwrap().dim).collect();
        let mut fac = Factor {
            scope: scope.to_vec(),
            offsets,
            payload,
            to_var: dims.iter().map(|d| InfoGaussian::zeros(*d)).collect(),
            to_factor: dims.iter().map(|d| InfoGaussian::zeros(*d)).collect(),
            group,
        };
        if let FactorPayload::NonGaussian { model, linearized } = &mut fac.payload {
            *linearized = model.linearize(&self.stacked_means(scope));
        }
        self.factors.push(Some(fac));
        for v in scope {
            self.vars[v.0].as_mut().unwrap().edges.push(id);
        }
        Ok(id)
    }

    pub fn remove_factor(&mut self, f: FactorId) -> Result<()> {
        let scope = self.factor(f)?.scope.clone();
        self.factors[f.0] = None;
        for v in scope {
            let var = self.var_mut(v)?;
            var.edges.retain(|x| *x != f);
            self.refresh_belief(v)?;
        }
        Ok(())
    }

    /// Replaces a factor's payload keeping its scope and stored messages.
    pub fn set_payload(&mut self, f: FactorId, payload: FactorPayload) -> Result<()> {
        let scope = self.factor(f)?.scope.clone();
        self.check_scope(&scope, &payload)?;
        let means = if matches!(payload, FactorPayload::NonGaussian { .. }) { Some(self.stacked_means(&scope)) } else { None };
        let fac = self.factor_mut(f)?;
        fac.payload = payload;
        if let (FactorPayload::NonGaussian { model, linearized }, Some(m)) = (&mut fac.payload, means) {
            *linearized = model.linearize(&m);
        }
        Ok(())
    }

    /// Sets a unary Gaussian factor and immediately refreshes its outgoing message.
    pub fn set_unary(&mut self, f: FactorId, g: InfoGaussian) -> Result<()> {
        self.set_payload(f, FactorPayload::Gaussian(g))?;
        let fac = self.factor(f)?;
        if fac.scope.len() == 1 {
            let v = fac.scope[0];
            let msg = fac.payload.gaussian().clone();
            self.factor_mut(f)?.to_var[0] = msg;
            self.refresh_belief(v)?;
        }
        Ok(())
    }

    /// Changes a factor's scope. Messages on edges to variables that stay in the
    /// scope are kept; new edges start at zero information.
    pub fn retarget_factor(&mut self, f: FactorId, scope: &[VarId], payload: FactorPayload) -> Result<()> {
        let offsets = self.check_scope(scope, &payload)?;
        let old = self.factor(f)?.clone();
        let mut to_var = Vec::with_capacity(scope.len());
        let mut to_factor = Vec::with_capacity(scope.len());
        for v in scope {
            match old.slot(*v) {
                Some(s) => {
                    to_var.push(old.to_var[s].clone());
                    to_factor.push(old.to_factor[s].clone());
                }
                None => {
                    let d = self.var(*v)?.dim;
                    to_var.push(InfoGaussian::zeros(d));
                    to_factor.push(InfoGaussian::zeros(d));
                }
            }
        }
        for v in &old.scope {
            if !scope.contains(v) {
                self.var_mut(*v)?.edges.retain(|x| *x != f);
            }
        }
        for v in scope {
            if !old.scope.contains(v) {
                self.var_mut(*v)?.edges.push(f);
            }
        }
        let fac = self.factor_mut(f)?;
        fac.scope = scope.to_vec();
        fac.offsets = offsets;
        fac.payload = payload;
        fac.to_var = to_var;
        fac.to_factor = to_factor;
        for v in old.scope.iter().chain(scope.iter()) {
            if self.vars.get(v.0).map(|x| x.is_some()).unwrap_or(false) {
                self.refresh_belief(*v)?;
            }
        }
        Ok(())
    }

    /// Changes a variable's dimension. Coordinate `i` of the new variable is old
    /// coordinate `map[i]` (or new if `None`). Messages on its edges are remapped
    /// when no coordinate is dropped and reset to zero information otherwise.
    /// Payloads of attached factors must be replaced by the caller before the next
    /// message update.
    pub fn resize_variable(&mut self, v: VarId, map: &[Option<usize>]) -> Result<()> {
        if map.is_empty() {
            return Err(Error::DimensionMismatch { expected: 1, found: 0 });
        }
        let old_dim = self.var(v)?.dim;
        let kept = map.iter().flatten().count();
        let lossless = kept == old_dim;
        let new_dim = map.len();
        let edges = self.var(v)?.edges.clone();
        for f in edges {
            let fac = self.factor_mut(f)?;
            let s = fac.slot(v).unwrap();
            if lossless {
                fac.to_var[s] = fac.to_var[s].remap(map);
                fac.to_factor[s] = fac.to_factor[s].remap(map);
            } else {
                fac.to_var[s] = InfoGaussian::zeros(new_dim);
                fac.to_factor[s] = InfoGaussian::zeros(new_dim);
            }
            let mut off = 0;
            let dims: Vec<usize> = fac.to_var.iter().map(|m| m.dim()).collect();
            for (o, d) in fac.offsets.iter_mut().zip(dims) {
                *o = off;
                off += d;
            }
        }
        let var = self.var_mut(v)?;
        var.dim = new_dim;
        var.belief = InfoGaussian::zeros(new_dim);
        self.refresh_belief(v)
    }

    pub fn set_group(&mut self, f: FactorId, group: u32) -> Result<()> {
        self.factor_mut(f)?.group = group;
        Ok(())
    }

    fn refresh_belief(&mut self, v: VarId) -> Result<()> {
        let var = self.var(v)?;
        let mut b = InfoGaussian::zeros(var.dim);
        for f in &var.edges {
            let fac = self.factors[f.0].as_ref().unwrap();
            let s = fac.slot(v).unwrap();
            if fac.to_var[s].dim() == b.dim() {
                b.accumulate(&fac.to_var[s]);
            }
        }
        self.var_mut(v)?.belief = b;
        Ok(())
    }

    pub fn refresh_beliefs(&mut self) -> Result<()> {
        for v in self.variable_ids() {
            self.refresh_belief(v)?;
        }
        Ok(())
    }

    fn belief_mean_or_zero(&self, v: VarId) -> DVector<f64> {
        let var = self.vars[v.0].as_ref().unwrap();
        var.belief.mean_with(&self.solver).unwrap_or_else(|_| DVector::zeros(var.dim))
    }

    fn stacked_means(&self, scope: &[VarId]) -> DVector<f64> {
        let parts: Vec<DVector<f64>> = scope.iter().map(|v| self.belief_mean_or_zero(*v)).collect();
        let n = parts.iter().map(|p| p.len()).sum();
        let mut out = DVector::zeros(n);
        let mut off = 0;
        for p in parts {
            out.rows_mut(off, p.len()).copy_from(&p);
            off += p.len();
        }
        out
    }

    /// Product of all factor-to-variable messages into `v` except the one from `f`.
    pub fn variable_to_factor(&self, v: VarId, f: FactorId) -> Result<InfoGaussian> {
        let var = self.var(v)?;
        self.factor(f)?.slot(v).ok_or(Error::UnknownId { kind: "edge", id: v.0 })?;
        let mut m = InfoGaussian::zeros(var.dim);
        for g in &var.edges {
            if *g == f {
                continue;
            }
            let fac = self.factors[g.0].as_ref().unwrap();
            m.accumulate(&fac.to_var[fac.slot(v).unwrap()]);
        }
        Ok(m)
    }

    /// Marginal over `v` of the factor times the stored messages from its other variables.
    pub fn factor_to_variable(&self, f: FactorId, v: VarId) -> Result<InfoGaussian> {
        let fac = self.factor(f)?;
        let slot = fac.slot(v).ok_or(Error::UnknownId { kind: "edge", id: v.0 })?;
        self.compute_outgoing(fac, slot)
    }

    fn compute_outgoing(&self, fac: &Factor, slot: usize) -> Result<InfoGaussian> {
        let g = fac.payload.gaussian();
        let total: usize = fac.to_var.iter().map(|m| m.dim()).sum();
        if g.dim() != total {
            return Err(Error::DimensionMismatch { expected: total, found: g.dim() });
        }
        if fac.scope.len() == 1 {
            return Ok(g.clone());
        }
        let mut joint = g.clone();
        for (k, m) in fac.to_factor.iter().enumerate() {
            if k == slot {
                continue;
            }
            let off = fac.offsets[k];
            let d = m.dim();
            let mut eta = joint.eta.rows_mut(off, d);
            eta += &m.eta;
            let mut lam = joint.lambda.view_mut((off, off), (d, d));
            lam += &m.lambda;
        }
        let off = fac.offsets[slot];
        let keep: Vec<usize> = (off..off + fac.to_var[slot].dim()).collect();
        joint.marginalize_with(&keep, &self.solver)
    }

    fn relinearize_in_place(&mut self, f: FactorId) -> Result<()> {
        let scope = self.factor(f)?.scope.clone();
        if matches!(self.factor(f)?.payload, FactorPayload::NonGaussian { .. }) {
            let point = self.stacked_means(&scope);
            if let FactorPayload::NonGaussian { model, linearized } = &mut self.factor_mut(f)?.payload {
                *linearized = model.linearize(&point);
            }
        }
        Ok(())
    }

    /// Re-expands a non-Gaussian factor at the current belief means and returns
    /// its Gaussian form. Gaussian factors are returned unchanged.
    pub fn relinearize(&mut self, f: FactorId) -> Result<InfoGaussian> {
        self.relinearize_in_place(f)?;
        Ok(self.factor(f)?.payload.gaussian().clone())
    }

    fn check_divergence(&self, m: &InfoGaussian) -> Result<()> {
        let trace = m.lambda.trace();
        if !trace.is_finite() || trace.abs() > self.divergence_bound {
            return Err(Error::DivergenceDetected { trace, bound: self.divergence_bound });
        }
        Ok(())
    }

    /// Gauss-Seidel update of one factor: refresh its inbound messages from the
    /// current beliefs, then recompute every outbound message. Returns the
    /// largest message change.
    pub fn update_factor(&mut self, f: FactorId, damping: f64) -> Result<f64> {
        let scope = self.factor(f)?.scope.clone();
        let inbound: Vec<InfoGaussian> = scope
            .iter()
            .enumerate()
            .map(|(s, v)| {
                let b = &self.vars[v.0].as_ref().unwrap().belief;
                let fac = self.factors[f.0].as_ref().unwrap();
                b.quotient(&fac.to_var[s])
            })
            .collect::<Result<_>>()?;
        self.factor_mut(f)?.to_factor = inbound;
        self.relinearize_in_place(f)?;
        let fac = self.factor(f)?;
        let mut out = Vec::with_capacity(scope.len());
        for s in 0..scope.len() {
            out.push(self.compute_outgoing(fac, s)?);
        }
        let mut change = 0.0f64;
        for (s, raw) in out.into_iter().enumerate() {
            let fac = self.factor(f)?;
            let new = damp(raw, &fac.to_var[s], damping);
            self.check_divergence(&new)?;
            change = change.max(message_change(&fac.to_var[s], &new));
            self.factor_mut(f)?.to_var[s] = new;
        }
        for v in scope {
            self.refresh_belief(v)?;
        }
        Ok(change)
    }

    fn synchronous_sweep(&mut self, damping: f64) -> Result<f64> {
        let fids = self.factor_ids();
        for f in &fids {
            let fac = self.factors[f.0].as_ref().unwrap();
            let inbound: Vec<InfoGaussian> = fac
                .scope
                .iter()
                .enumerate()
                .map(|(s, v)| self.vars[v.0].as_ref().unwrap().belief.quotient(&fac.to_var[s]))
                .collect::<Result<_>>()?;
            self.factor_mut(*f)?.to_factor = inbound;
        }
        for f in &fids {
            self.relinearize_in_place(*f)?;
        }
        let mut updates = Vec::with_capacity(fids.len());
        for f in &fids {
            let fac = self.factors[f.0].as_ref().unwrap();
            let msgs: Vec<InfoGaussian> =
                (0..fac.scope.len()).map(|s| self.compute_outgoing(fac, s)).collect::<Result<_>>()?;
            updates.push(msgs);
        }
        let mut change = 0.0f64;
        for (f, msgs) in fids.iter().zip(updates) {
            for (s, raw) in msgs.into_iter().enumerate() {
                let fac = self.factors[f.0].as_ref().unwrap();
                let new = damp(raw, &fac.to_var[s], damping);
                self.check_divergence(&new)?;
                change = change.max(message_change(&fac.to_var[s], &new));
                self.factors[f.0].as_mut().unwrap().to_var[s] = new;
            }
        }
        self.refresh_beliefs()?;
        Ok(change)
    }

    /// Belief means and marginal variances; `None` for an improper belief.
    fn belief_snapshot(&self) -> Vec<Option<(DVector<f64>, DVector<f64>)>> {
        self.vars
            .iter()
            .map(|v| {
                let v = v.as_ref()?;
                let m = v.belief.to_moments_with(&self.solver).ok()?;
                Some((m.mu, m.sigma.diagonal()))
            })
            .collect()
    }

    /// Largest relative change in belief moments between two snapshots.
    fn snapshot_change(a: &[Option<(DVector<f64>, DVector<f64>)>], b: &[Option<(DVector<f64>, DVector<f64>)>]) -> f64 {
        let mut worst = 0.0f64;
        for (x, y) in a.iter().zip(b) {
            match (x, y) {
                (Some((ma, va)), Some((mb, vb))) if ma.len() == mb.len() => {
                    for i in 0..ma.len() {
                        worst = worst.max((ma[i] - mb[i]).abs() / ma[i].abs().max(1.0));
                        worst = worst.max((va[i] - vb[i]).abs() / va[i].abs().max(1.0));
                    }
                }
                (None, None) => {}
                _ => return f64::INFINITY,
            }
        }
        worst
    }

    /// Runs loopy GBP until the largest change in belief moments drops below
    /// `tol` or the iteration budget is spent. Beliefs rather than messages are
    /// compared: messages toward a conditioned-on block are often numerically
    /// rank-deficient and their moments are dominated by roundoff.
    pub fn iterate(&mut self, opts: &IterateOptions) -> Result<IterateOutcome> {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut last = f64::INFINITY;
        let mut before = self.belief_snapshot();
        for it in 0..opts.max_iters {
            match opts.schedule {
                Schedule::Synchronous => {
                    self.synchronous_sweep(opts.damping)?;
                }
                Schedule::RandomEdge | Schedule::PerGroup => {
                    let mut order = self.factor_ids();
                    if opts.schedule == Schedule::RandomEdge {
                        order.shuffle(&mut rng);
                    } else {
                        order.sort_by_key(|f| (self.factors[f.0].as_ref().unwrap().group, f.0));
                    }
                    for f in order {
                        self.update_factor(f, opts.damping)?;
                    }
                }
            }
            let after = self.belief_snapshot();
            last = Self::snapshot_change(&before, &after);
            before = after;
            if last < opts.tol {
                return Ok(IterateOutcome { converged: true, iterations: it + 1, last_change: last });
            }
        }
        Ok(IterateOutcome { converged: false, iterations: opts.max_iters, last_change: last })
    }

    /// Checks the variable/factor bipartite graph for cycles.
    pub fn is_forest(&self) -> bool {
        self.find_cycle().is_none()
    }

    fn find_cycle(&self) -> Option<String> {
        // union-find over nodes: variables 0..nv, factors nv..nv+nf
        let nv = self.vars.len();
        let mut parent: Vec<usize> = (0..nv + self.factors.len()).collect();
        fn root(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for (fi, fac) in self.factors.iter().enumerate() {
            let Some(fac) = fac else { continue };
            for v in &fac.scope {
                let (a, b) = (root(&mut parent, v.0), root(&mut parent, nv + fi));
                if a == b {
                    return Some(format!("cycle through factor {fi} and variable {}", v.0));
                }
                parent[a] = b;
            }
        }
        None
    }

    /// Exact inference on a tree (or forest): one leaves-to-root and one
    /// root-to-leaves pass. `root` roots its own component; other components are
    /// rooted at their lowest variable id.
    pub fn sweep_tree(&mut self, root: VarId) -> Result<()> {
        self.var(root)?;
        if let Some(why) = self.find_cycle() {
            return Err(Error::NotATree(why));
        }
        #[derive(Clone, Copy, PartialEq)]
        enum Node {
            V(VarId),
            F(FactorId),
        }
        let mut seen_v = vec![false; self.vars.len()];
        let mut seen_f = vec![false; self.factors.len()];
        // BFS order with parent links
        let mut order: Vec<(Node, Option<Node>)> = Vec::new();
        let mut roots = vec![root];
        roots.extend(self.variable_ids().into_iter().filter(|v| *v != root));
        for r in roots {
            if seen_v[r.0] {
                continue;
            }
            seen_v[r.0] = true;
            let mut queue = VecDeque::from([(Node::V(r), None)]);
            while let Some((n, p)) = queue.pop_front() {
                order.push((n, p));
                match n {
                    Node::V(v) => {
                        for f in &self.vars[v.0].as_ref().unwrap().edges {
                            if !seen_f[f.0] {
                                seen_f[f.0] = true;
                                queue.push_back((Node::F(*f), Some(n)));
                            }
                        }
                    }
                    Node::F(f) => {
                        for v in &self.factors[f.0].as_ref().unwrap().scope {
                            if !seen_v[v.0] {
                                seen_v[v.0] = true;
                                queue.push_back((Node::V(*v), Some(n)));
                            }
                        }
                    }
                }
            }
        }
        // leaves to root
        for &(n, p) in order.iter().rev() {
            match (n, p) {
                (Node::V(v), Some(Node::F(f))) => {
                    let m = self.variable_to_factor(v, f)?;
                    let fac = self.factor_mut(f)?;
                    let s = fac.slot(v).unwrap();
                    fac.to_factor[s] = m;
                }
                (Node::F(f), Some(Node::V(v))) => {
                    self.relinearize_in_place(f)?;
                    let m = self.factor_to_variable(f, v)?;
                    self.check_divergence(&m)?;
                    let fac = self.factor_mut(f)?;
                    let s = fac.slot(v).unwrap();
                    fac.to_var[s] = m;
                }
                (Node::F(f), None) => {
                    // isolated factor with no variables cannot occur; factors always have scope
                    debug_assert!(false, "factor {f:?} as root");
                }
                _ => {}
            }
        }
        // root to leaves
        for &(n, p) in order.iter() {
            match n {
                Node::V(v) => {
                    let edges = self.vars[v.0].as_ref().unwrap().edges.clone();
                    for f in edges {
                        if Some(Node::F(f)) == p {
                            continue;
                        }
                        let m = self.variable_to_factor(v, f)?;
                        let fac = self.factor_mut(f)?;
                        let s = fac.slot(v).unwrap();
                        fac.to_factor[s] = m;
                    }
                }
                Node::F(f) => {
                    self.relinearize_in_place(f)?;
                    let scope = self.factors[f.0].as_ref().unwrap().scope.clone();
                    for v in scope {
                        if Some(Node::V(v)) == p {
                            continue;
                        }
                        let m = self.factor_to_variable(f, v)?;
                        self.check_divergence(&m)?;
                        let fac = self.factor_mut(f)?;
                        let s = fac.slot(v).unwrap();
                        fac.to_var[s] = m;
                    }
                }
            }
        }
        self.refresh_beliefs()
    }

    /// Writes one line per variable, factor and edge.
    pub fn dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for v in self.variable_ids() {
            let var = self.vars[v.0].as_ref().unwrap();
            let mean = var
                .belief
                .mean_with(&self.solver)
                .map(|m| m.iter().map(|x| format!("{x:.6e}")).collect::<Vec<_>>().join(","))
                .unwrap_or_else(|_| "-".into());
            writeln!(w, "VAR id={} dim={} degree={} mean={}", v.0, var.dim, var.edges.len(), mean)?;
        }
        for f in self.factor_ids() {
            let fac = self.factors[f.0].as_ref().unwrap();
            let kind = match fac.payload {
                FactorPayload::Gaussian(_) => "gaussian",
                FactorPayload::NonGaussian { .. } => "non-gaussian",
            };
            let scope: Vec<String> = fac.scope.iter().map(|v| v.0.to_string()).collect();
            writeln!(w, "FACTOR id={} kind={} group={} scope={}", f.0, kind, fac.group, scope.join(","))?;
            for (s, v) in fac.scope.iter().enumerate() {
                writeln!(
                    w,
                    "EDGE factor={} var={} to_var_trace={:.6e} to_factor_trace={:.6e}",
                    f.0,
                    v.0,
                    fac.to_var[s].lambda.trace(),
                    fac.to_factor[s].lambda.trace()
                )?;
            }
        }
        Ok(())
    }
}
