//! Centralized models over a grid of inducing blocks, fitted on all data at once.
//!
//! Blocks are indexed row-major over a `rows × cols` grid. The spanning tree is
//! a comb: a spine down column 0 plus every row. Blocks are ordered by
//! breadth-first search from block 0 along the tree, and each block is
//! conditioned on all of its neighbours that come earlier in that order. With
//! no extra edges that is a tree-structured GP; with every pair connected it is
//! the sequential factorization of the dense prior.

use std::collections::{BTreeSet, VecDeque};

use crate::error::{Error, Result};
use crate::gaussian::{MomentGaussian, Solver};
use crate::graph::{FactorGraph, FactorPayload, IterateOptions, IterateOutcome, VarId};
use crate::inputs::InputSet;
use crate::kernel::{Kernel, NoiseModel};
use crate::region::Rect;
use crate::sparse_gp::{conditional_factor, prior_factor, Projector};

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub z: InputSet,
    pub region: Rect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorStructure {
    /// No edges: every block has its own unary prior.
    Independent,
    /// Comb spanning tree plus the given number of ranked extra edges.
    Tree { extra: usize },
}

/// Comb spanning tree over a row-major grid.
pub fn comb_tree(rows: usize, cols: usize) -> Vec<(usize, usize)> {
    let mut e = Vec::new();
    for r in 0..rows {
        if r + 1 < rows {
            e.push((r * cols, (r + 1) * cols));
        }
        for c in 0..cols.saturating_sub(1) {
            e.push((r * cols + c, r * cols + c + 1));
        }
    }
    e
}

fn adjacency(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    for l in &mut adj {
        l.sort_unstable();
    }
    adj
}

/// Hop counts from `from` along `edges` (`usize::MAX` when unreachable).
pub fn hop_distances(n: usize, edges: &[(usize, usize)], from: usize) -> Vec<usize> {
    let adj = adjacency(n, edges);
    let mut d = vec![usize::MAX; n];
    d[from] = 0;
    let mut q = VecDeque::from([from]);
    while let Some(v) = q.pop_front() {
        for &w in &adj[v] {
            if d[w] == usize::MAX {
                d[w] = d[v] + 1;
                q.push_back(w);
            }
        }
    }
    d
}

/// Picks `count` extra edges one at a time: shortest centroid distance first,
/// then longest current graph distance, then lowest id pair.
pub fn rank_extra_edges(centroids: &[[f64; 2]], tree: &[(usize, usize)], count: usize) -> Vec<(usize, usize)> {
    let n = centroids.len();
    let mut edges: Vec<(usize, usize)> = tree.to_vec();
    let mut present: BTreeSet<(usize, usize)> = tree.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
    let mut added = Vec::new();
    // distances quantized so grid-symmetric pairs tie exactly
    let euclid = |a: usize, b: usize| {
        let d = ((centroids[a][0] - centroids[b][0]).powi(2) + (centroids[a][1] - centroids[b][1]).powi(2)).sqrt();
        (d * 1e9).round() as i64
    };
    for _ in 0..count {
        let hops: Vec<Vec<usize>> = (0..n).map(|i| hop_distances(n, &edges, i)).collect();
        let mut best: Option<(i64, std::cmp::Reverse<usize>, (usize, usize))> = None;
        for i in 0..n {
            for j in (i + 1)..n {
                if present.contains(&(i, j)) {
                    continue;
                }
                let key = (euclid(i, j), std::cmp::Reverse(hops[i][j]), (i, j));
                if best.as_ref().map(|b| key < *b).unwrap_or(true) {
                    best = Some(key);
                }
            }
        }
        let Some((_, _, pair)) = best else { break };
        present.insert(pair);
        edges.push(pair);
        added.push(pair);
    }
    added
}

/// Index of the first region containing `x`.
pub fn containing_block(blocks: &[BlockSpec], x: &[f64]) -> Option<usize> {
    blocks.iter().position(|b| b.region.contains(x))
}

fn centroid2(z: &InputSet) -> [f64; 2] {
    let c = z.centroid().unwrap_or_else(|| vec![0.0; 2]);
    [c[0], c[1]]
}

/// A graph-structured batch model: one variable per block.
#[derive(Debug, Clone)]
pub struct BatchModel {
    pub graph: FactorGraph,
    pub vars: Vec<VarId>,
    pub blocks: Vec<BlockSpec>,
    /// Earlier-ordered neighbours each block is conditioned on.
    pub parents: Vec<Vec<usize>>,
    pub edges: Vec<(usize, usize)>,
    kernel: Kernel,
    solver: Solver,
}

#[allow(clippy::too_many_arguments)]
pub fn build_batch_model(
    blocks: &[BlockSpec],
    rows: usize,
    cols: usize,
    kernel: &Kernel,
    noise: &NoiseModel,
    xs: &InputSet,
    ys: &[f64],
    structure: PriorStructure,
    solver: &Solver,
) -> Result<BatchModel> {
    let n = blocks.len();
    if n != rows * cols || n == 0 {
        return Err(Error::DimensionMismatch { expected: rows * cols, found: n });
    }
    let tree = comb_tree(rows, cols);
    let edges: Vec<(usize, usize)> = match structure {
        PriorStructure::Independent => Vec::new(),
        PriorStructure::Tree { extra } => {
            let cents: Vec<[f64; 2]> = blocks.iter().map(|b| centroid2(&b.z)).collect();
            let mut e = tree.clone();
            e.extend(rank_extra_edges(&cents, &tree, extra));
            e
        }
    };
    // breadth-first order along the tree from block 0
    let tree_adj = adjacency(n, &tree);
    let mut pos = vec![usize::MAX; n];
    let mut q = VecDeque::from([0usize]);
    pos[0] = 0;
    let mut next = 1;
    while let Some(v) = q.pop_front() {
        for &w in &tree_adj[v] {
            if pos[w] == usize::MAX {
                pos[w] = next;
                next += 1;
                q.push_back(w);
            }
        }
    }
    let adj = adjacency(n, &edges);
    let parents: Vec<Vec<usize>> = (0..n)
        .map(|b| {
            let mut p: Vec<usize> = adj[b].iter().copied().filter(|&w| pos[w] < pos[b]).collect();
            p.sort_by_key(|&w| pos[w]);
            p
        })
        .collect();

    let mut graph = FactorGraph::with_solver(*solver);
    let vars: Vec<VarId> = blocks.iter().map(|b| graph.add_variable(b.z.len())).collect::<Result<_>>()?;
    for b in 0..n {
        if parents[b].is_empty() {
            let p = prior_factor(&blocks[b].z, kernel, solver)?;
            graph.add_factor(&[vars[b]], FactorPayload::Gaussian(p))?;
        } else {
            let mut zp = InputSet::new(kernel.input_dim());
            let mut scope = vec![vars[b]];
            for &p in &parents[b] {
                zp.extend(&blocks[p].z)?;
                scope.push(vars[p]);
            }
            let c = conditional_factor(&blocks[b].z, &zp, kernel, solver)?;
            graph.add_factor(&scope, FactorPayload::Gaussian(c))?;
        }
    }
    let per_block = split_by_block(blocks, xs, ys)?;
    for (b, (bx, by)) in per_block.into_iter().enumerate() {
        if by.is_empty() {
            continue;
        }
        let f = Projector::new(&blocks[b].z, kernel, solver)?.observation_factor_batch(&bx, &by, noise.variance())?;
        graph.add_factor(&[vars[b]], FactorPayload::Gaussian(f))?;
    }
    Ok(BatchModel { graph, vars, blocks: blocks.to_vec(), parents, edges, kernel: kernel.clone(), solver: *solver })
}

fn split_by_block(blocks: &[BlockSpec], xs: &InputSet, ys: &[f64]) -> Result<Vec<(InputSet, Vec<f64>)>> {
    let mut out: Vec<(InputSet, Vec<f64>)> = blocks.iter().map(|_| (InputSet::new(xs.dim()), Vec::new())).collect();
    for (i, y) in ys.iter().enumerate() {
        let x = xs.point(i);
        let b = containing_block(blocks, x).ok_or(Error::OutOfExtent { x: x[0], y: x[1] })?;
        out[b].0.push(x)?;
        out[b].1.push(*y);
    }
    Ok(out)
}

/// Groups query points by containing block and runs `f` once per block.
fn predict_grouped<F>(blocks: &[BlockSpec], xs: &InputSet, mut f: F) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: FnMut(usize, &InputSet) -> Result<(Vec<f64>, Vec<f64>)>,
{
    let mut idx: Vec<Vec<usize>> = vec![Vec::new(); blocks.len()];
    for i in 0..xs.len() {
        let x = xs.point(i);
        let b = containing_block(blocks, x).ok_or(Error::OutOfExtent { x: x[0], y: x[1] })?;
        idx[b].push(i);
    }
    let mut mean = vec![0.0; xs.len()];
    let mut var = vec![0.0; xs.len()];
    for (b, ids) in idx.iter().enumerate() {
        if ids.is_empty() {
            continue;
        }
        let (m, v) = f(b, &xs.select(ids))?;
        for (k, &i) in ids.iter().enumerate() {
            mean[i] = m[k];
            var[i] = v[k];
        }
    }
    Ok((mean, var))
}

impl BatchModel {
    /// Exact sweep on trees, loopy GBP otherwise.
    pub fn solve(&mut self, opts: &IterateOptions) -> Result<IterateOutcome> {
        if self.graph.is_forest() {
            self.graph.sweep_tree(self.vars[0])?;
            return Ok(IterateOutcome { converged: true, iterations: 1, last_change: 0.0 });
        }
        self.graph.iterate(opts)
    }

    pub fn block_belief(&self, b: usize) -> Result<MomentGaussian> {
        self.graph.belief_moments(self.vars[b])
    }

    /// Predicts each point from the block whose region contains it.
    pub fn predict(&self, xs: &InputSet) -> Result<(Vec<f64>, Vec<f64>)> {
        predict_grouped(&self.blocks, xs, |b, pts| {
            let belief = self.block_belief(b)?;
            Projector::new(&self.blocks[b].z, &self.kernel, &self.solver)?.predict(pts, &belief)
        })
    }
}

/// The dense-prior baseline: the same blocks, observation factors and
/// block-local prediction as [`BatchModel`], but with the joint GP prior over
/// every inducing point. This is the fully connected limit of the graph model,
/// solved exactly.
#[derive(Debug, Clone)]
pub struct DenseModel {
    blocks: Vec<BlockSpec>,
    offsets: Vec<usize>,
    joint: MomentGaussian,
    kernel: Kernel,
    solver: Solver,
}

pub fn build_dense_model(
    blocks: &[BlockSpec],
    kernel: &Kernel,
    noise: &NoiseModel,
    xs: &InputSet,
    ys: &[f64],
    solver: &Solver,
) -> Result<DenseModel> {
    let mut z = InputSet::new(kernel.input_dim());
    let mut offsets = Vec::with_capacity(blocks.len());
    for b in blocks {
        offsets.push(z.len());
        z.extend(&b.z)?;
    }
    let mut joint = prior_factor(&z, kernel, solver)?;
    for (b, (bx, by)) in split_by_block(blocks, xs, ys)?.into_iter().enumerate() {
        if by.is_empty() {
            continue;
        }
        let f = Projector::new(&blocks[b].z, kernel, solver)?.observation_factor_batch(&bx, &by, noise.variance())?;
        let (o, d) = (offsets[b], blocks[b].z.len());
        let mut eta = joint.eta.rows_mut(o, d);
        eta += &f.eta;
        let mut lam = joint.lambda.view_mut((o, o), (d, d));
        lam += &f.lambda;
    }
    Ok(DenseModel { blocks: blocks.to_vec(), offsets, joint: joint.to_moments_with(solver)?, kernel: kernel.clone(), solver: *solver })
}

impl DenseModel {
    /// Joint posterior over all inducing values, blocks stacked in order.
    pub fn belief(&self) -> &MomentGaussian {
        &self.joint
    }

    pub fn block_belief(&self, b: usize) -> MomentGaussian {
        let (o, d) = (self.offsets[b], self.blocks[b].z.len());
        MomentGaussian { mu: self.joint.mu.rows(o, d).into_owned(), sigma: self.joint.sigma.view((o, o), (d, d)).into_owned() }
    }

    pub fn predict(&self, xs: &InputSet) -> Result<(Vec<f64>, Vec<f64>)> {
        predict_grouped(&self.blocks, xs, |b, pts| {
            Projector::new(&self.blocks[b].z, &self.kernel, &self.solver)?.predict(pts, &self.block_belief(b))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::InfoGaussian;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_blocks(rows: usize, cols: usize, per: usize) -> Vec<BlockSpec> {
        let ext = Rect::new(-1.0, -1.0, 1.0, 1.0).unwrap();
        ext.grid(rows, cols)
            .into_iter()
            .map(|r| {
                let pts: Vec<f64> = r.lattice(per, per).into_iter().flatten().collect();
                BlockSpec { z: InputSet::from_flat(2, pts).unwrap(), region: r }
            })
            .collect()
    }

    fn data(n: usize, seed: u64) -> (InputSet, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = InputSet::from_flat(2, (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y = (0..n).map(|i| (3.0 * x.point(i)[0]).sin() + rng.random_range(-0.1..0.1)).collect();
        (x, y)
    }

    #[test]
    fn comb_is_spanning_tree() {
        for (r, c) in [(3, 3), (4, 4), (5, 5), (2, 3)] {
            let t = comb_tree(r, c);
            assert_eq!(t.len(), r * c - 1);
            assert!(hop_distances(r * c, &t, 0).iter().all(|d| *d != usize::MAX));
        }
    }

    #[test]
    fn extra_edges_complete_the_lattice_first() {
        for (side, want) in [(3, 4), (4, 9), (5, 16)] {
            let blocks = grid_blocks(side, side, 2);
            let cents: Vec<[f64; 2]> = blocks.iter().map(|b| centroid2(&b.z)).collect();
            let extra = rank_extra_edges(&cents, &comb_tree(side, side), want);
            let mut all: BTreeSet<(usize, usize)> = comb_tree(side, side).into_iter().collect();
            all.extend(extra);
            for r in 0..side {
                for c in 0..side {
                    let i = r * side + c;
                    if c + 1 < side {
                        assert!(all.contains(&(i, i + 1)));
                    }
                    if r + 1 < side {
                        assert!(all.contains(&(i, i + side)), "missing vertical {i}");
                    }
                }
            }
        }
    }

    #[test]
    fn zero_extra_edges_is_a_tree() {
        let blocks = grid_blocks(3, 3, 2);
        let (x, y) = data(60, 1);
        let k = Kernel::squared_exponential(1.0, 0.4, 2);
        let m = build_batch_model(
            &blocks,
            3,
            3,
            &k,
            &NoiseModel::new(0.1),
            &x,
            &y,
            PriorStructure::Tree { extra: 0 },
            &Solver::default(),
        )
        .unwrap();
        assert!(m.graph.is_forest());
        assert!(m.parents.iter().skip(1).all(|p| p.len() == 1));
    }

    #[test]
    fn dense_model_matches_fully_connected_graph() {
        let blocks = grid_blocks(2, 2, 2);
        let (x, y) = data(80, 3);
        let k = Kernel::matern12(1.0, 0.5, 2);
        let noise = NoiseModel::new(0.2);
        let solver = Solver::default();
        let dense = build_dense_model(&blocks, &k, &noise, &x, &y, &solver).unwrap();
        let mut m = build_batch_model(&blocks, 2, 2, &k, &noise, &x, &y, PriorStructure::Tree { extra: 10 }, &solver).unwrap();
        let out = m.solve(&IterateOptions { max_iters: 5000, ..Default::default() }).unwrap();
        assert!(out.converged);
        for b in 0..4 {
            let got = m.block_belief(b).unwrap();
            let want = dense.block_belief(b);
            assert!((&got.mu - &want.mu).amax() < 1e-6, "block {b}");
        }
        let q = InputSet::from_flat(2, vec![-0.5, -0.5, 0.5, 0.25]).unwrap();
        let (pd, _) = dense.predict(&q).unwrap();
        let (pg, _) = m.predict(&q).unwrap();
        assert!((pd[0] - pg[0]).abs() < 1e-6 && (pd[1] - pg[1]).abs() < 1e-6);
    }

    #[test]
    fn full_connectivity_reproduces_dense_prior() {
        let blocks = grid_blocks(2, 2, 2);
        let k = Kernel::squared_exponential(1.0, 0.8, 2);
        let solver = Solver::default();
        let m = build_batch_model(
            &blocks,
            2,
            2,
            &k,
            &NoiseModel::new(0.1),
            &InputSet::new(2),
            &[],
            PriorStructure::Tree { extra: 10 },
            &solver,
        )
        .unwrap();
        // assemble the joint from the graph's factors
        let offs: Vec<usize> = (0..4).map(|b| 4 * b).collect();
        let mut joint = InfoGaussian::zeros(16);
        for f in m.graph.factor_ids() {
            let scope = m.graph.scope(f).unwrap();
            let g = m.graph.payload(f).unwrap().gaussian();
            let mut map = vec![None; 16];
            let mut local = 0;
            for v in scope {
                let b = m.vars.iter().position(|x| x == v).unwrap();
                for j in 0..4 {
                    map[offs[b] + j] = Some(local + j);
                }
                local += 4;
            }
            joint.accumulate(&g.remap(&map));
        }
        let mut z = InputSet::new(2);
        blocks.iter().for_each(|b| z.extend(&b.z).unwrap());
        let gram = k.gram_sym(&z).unwrap();
        assert!((joint.to_moments().unwrap().sigma - gram).amax() < 1e-8);
    }
}
