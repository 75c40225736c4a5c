use super::*;
use crate::sparse_gp::fit_batch;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn se(ell: f64) -> Kernel {
    Kernel::squared_exponential(1.0, ell, 2)
}

fn lattice_z(r: &Rect, n: usize) -> InputSet {
    InputSet::from_flat(2, r.lattice(n, n).into_iter().flatten().collect()).unwrap()
}

fn robot(id: u32, region: Rect, z: InputSet, kernel: Kernel) -> RobotAgent {
    let mut cfg = RobotConfig::new(kernel, NoiseModel::new(0.1));
    cfg.select_period = 0;
    RobotAgent::new(id, region, region.center(), z, cfg).unwrap()
}

fn feed(r: &mut RobotAgent, n: usize, seed: u64) -> (InputSet, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = InputSet::new(2);
    let mut ys = Vec::new();
    for t in 0..n {
        let x = vec![rng.random_range(r.region.x0..r.region.x1), rng.random_range(r.region.y0..r.region.y1)];
        let y = (2.0 * x[0]).sin() * (1.5 * x[1]).cos() + 0.1 * rng.random_range(-1.0..1.0);
        xs.push(&x).unwrap();
        ys.push(y);
        r.observe(Observation { x, y, t: t as u64 }).unwrap();
    }
    (xs, ys)
}

/// FITC data factor on a block, built directly from kernel matrices.
fn data_info(z: &InputSet, k: &Kernel, xs: &InputSet, ys: &[f64], s2: f64) -> (DMatrix<f64>, DVector<f64>) {
    let kzz = k.gram_sym(z).unwrap();
    let inv = kzz.try_inverse().unwrap();
    let m = z.len();
    let mut lam = DMatrix::zeros(m, m);
    let mut eta = DVector::zeros(m);
    for (n, y) in ys.iter().enumerate() {
        let kx = k.cross(xs.point(n), z).unwrap();
        let a = &inv * &kx;
        let c = (k.eval(xs.point(n), xs.point(n)).unwrap() - kx.dot(&a)).max(0.0);
        lam += &a * a.transpose() / (c + s2);
        eta += &a * (*y / (c + s2));
    }
    (lam, eta)
}

/// Posterior over the concatenated blocks under the dense joint prior with
/// block-local data factors.
fn joint_oracle(zs: &[&InputSet], k: &Kernel, data: &[(&InputSet, &[f64])], s2: f64) -> (DVector<f64>, DMatrix<f64>) {
    let mut all = InputSet::new(2);
    zs.iter().for_each(|z| all.extend(z).unwrap());
    let mut lam = k.gram_sym(&all).unwrap().try_inverse().unwrap();
    let mut eta = DVector::zeros(all.len());
    let mut off = 0;
    for (z, (x, y)) in zs.iter().zip(data) {
        let (l, e) = data_info(z, k, x, y, s2);
        let m = z.len();
        let mut blk = lam.view_mut((off, off), (m, m));
        blk += &l;
        let mut seg = eta.rows_mut(off, m);
        seg += &e;
        off += m;
    }
    let sigma = lam.try_inverse().unwrap();
    (&sigma * eta, sigma)
}

fn two_robots(ell: f64) -> (RobotAgent, RobotAgent) {
    let left = Rect::new(-1.0, -1.0, 0.0, 1.0).unwrap();
    let right = Rect::new(0.0, -1.0, 1.0, 1.0).unwrap();
    let mut a = robot(1, left, lattice_z(&left, 3), se(ell));
    let mut b = robot(2, right, lattice_z(&right, 3), se(ell));
    a.pose = [-0.05, 0.0];
    b.pose = [0.05, 0.0];
    (a, b)
}

#[test]
fn fresh_robot_holds_the_prior() {
    let r0 = Rect::new(0.0, 0.0, 1.0, 1.0).unwrap();
    let z = lattice_z(&r0, 3);
    let k = se(0.4);
    let mut r = robot(1, r0, z.clone(), k.clone());
    let b = r.belief().unwrap();
    assert!(b.mu.amax() < 1e-12);
    assert!((b.sigma - k.gram_sym(&z).unwrap()).amax() < 1e-8);
    let q = InputSet::from_flat(2, vec![0.3, 0.7, 0.9, 0.1]).unwrap();
    let (m, v) = r.predict(&q).unwrap();
    assert!(m.iter().all(|x| x.abs() < 1e-12));
    assert!(v.iter().all(|x| (x - 1.0).abs() < 1e-8));
}

#[test]
fn unconnected_robot_matches_batch_fit() {
    let r0 = Rect::new(0.0, 0.0, 1.0, 1.0).unwrap();
    let z = lattice_z(&r0, 3);
    let k = se(0.3);
    let mut r = robot(3, r0, z.clone(), k.clone());
    let (xs, ys) = feed(&mut r, 40, 7);
    let want = fit_batch(&z, &k, &NoiseModel::new(0.1), &xs, &ys, &Solver::default()).unwrap().to_moments().unwrap();
    let got = r.belief().unwrap();
    assert!((got.mu - want.mu).amax() < 1e-8);
    assert!((got.sigma - want.sigma).amax() < 1e-8);
}

#[test]
fn lower_id_becomes_parent() {
    let (mut a, mut b) = two_robots(0.4);
    a.id = 2;
    b.id = 5;
    assert!(connect(&mut b, &mut a, 0.2).unwrap());
    assert_eq!(a.link(5), Some((Role::Parent, LinkStatus::Live)));
    assert_eq!(b.link(2), Some((Role::Child, LinkStatus::Live)));
    assert_eq!(b.conditional_parents(), &[2]);
    assert!(a.conditional_parents().is_empty());
    assert!(!connect(&mut a, &mut b, 0.2).unwrap());
    assert_eq!(b.graph().variable_ids().len(), 2);
}

#[test]
fn connect_respects_range() {
    let (mut a, mut b) = two_robots(0.4);
    assert!(matches!(connect(&mut a, &mut b, 0.05), Err(Error::OutOfRange { .. })));
    assert!(matches!(exchange(&mut a, &mut b), Err(Error::NotConnected { .. })));
}

#[test]
fn exchange_converges_to_joint_posterior() {
    let (mut a, mut b) = two_robots(0.5);
    let (xa, ya) = feed(&mut a, 30, 1);
    let (xb, yb) = feed(&mut b, 30, 2);
    connect(&mut a, &mut b, 0.2).unwrap();
    let mut change = f64::INFINITY;
    for _ in 0..5 {
        change = exchange(&mut a, &mut b).unwrap();
    }
    assert!(change < 1e-10, "change {change}");
    let (mu, sigma) = joint_oracle(&[a.z(), b.z()], &se(0.5), &[(&xa, &ya), (&xb, &yb)], 0.01);
    let ba = a.belief().unwrap();
    let bb = b.belief().unwrap();
    let m = a.z().len();
    assert!((ba.mu - mu.rows(0, m)).amax() < 1e-6);
    assert!((bb.mu - mu.rows(m, m)).amax() < 1e-6);
    assert!((ba.sigma - sigma.view((0, 0), (m, m))).amax() < 1e-6);
    assert!((bb.sigma - sigma.view((m, m), (m, m))).amax() < 1e-6);
}

#[test]
fn distant_blocks_are_unaffected_by_connection() {
    let (mut a, mut b) = two_robots(0.02);
    feed(&mut a, 20, 3);
    feed(&mut b, 20, 4);
    let (ba, bb) = (a.belief().unwrap(), b.belief().unwrap());
    connect(&mut a, &mut b, 0.2).unwrap();
    for _ in 0..3 {
        exchange(&mut a, &mut b).unwrap();
    }
    assert!((a.belief().unwrap().mu - ba.mu).amax() < 1e-9);
    assert!((b.belief().unwrap().sigma - bb.sigma).amax() < 1e-9);
}

#[test]
fn colocated_robots_agree() {
    let r0 = Rect::new(0.0, 0.0, 1.0, 1.0).unwrap();
    let z = lattice_z(&r0, 3);
    let mut a = robot(1, r0, z.clone(), se(0.4));
    let mut b = robot(2, r0, z, se(0.4));
    feed(&mut a, 25, 9);
    feed(&mut b, 25, 9);
    connect(&mut a, &mut b, 1.0).unwrap();
    for _ in 0..4 {
        exchange(&mut a, &mut b).unwrap();
    }
    let (ba, bb) = (a.belief().unwrap(), b.belief().unwrap());
    assert!((&ba.mu - &bb.mu).amax() < 1e-6, "{}", (&ba.mu - &bb.mu).amax());
}

#[test]
fn decouple_freezes_messages() {
    let (mut a, mut b) = two_robots(0.5);
    feed(&mut a, 15, 5);
    feed(&mut b, 15, 6);
    connect(&mut a, &mut b, 0.2).unwrap();
    for _ in 0..3 {
        exchange(&mut a, &mut b).unwrap();
    }
    let (ba, bb) = (a.belief().unwrap(), b.belief().unwrap());
    decouple(&mut a, &mut b).unwrap();
    assert_eq!(a.link(2), Some((Role::Parent, LinkStatus::Stale)));
    assert_eq!(b.link(1), Some((Role::Child, LinkStatus::Stale)));
    assert!((a.belief().unwrap().mu - &ba.mu).amax() < 1e-12);
    assert!((b.belief().unwrap().mu - &bb.mu).amax() < 1e-12);
    assert!(matches!(exchange(&mut a, &mut b), Err(Error::NotConnected { .. })));
    // new data on the child no longer reaches the parent
    feed(&mut b, 10, 8);
    assert!((b.belief().unwrap().mu - &bb.mu).amax() > 1e-6);
    assert!((a.belief().unwrap().mu - &ba.mu).amax() < 1e-12);
    assert!(connect(&mut a, &mut b, 0.2).unwrap());
    assert_eq!(a.link(2), Some((Role::Parent, LinkStatus::Live)));
    exchange(&mut a, &mut b).unwrap();
}

#[test]
fn line_boundary_points() {
    let right = Rect::new(0.0, 0.0, 2.0, 1.0).unwrap();
    let left = Rect::new(-2.0, 0.0, 0.0, 1.0).unwrap();
    let mut a = robot(1, right, lattice_z(&right, 2), se(0.5));
    let mut b = robot(2, left, lattice_z(&left, 2), se(0.5));
    let cfg = BoundaryConfig { strategy: BoundaryStrategy::Line, count: 5, inset_frac: 0.01, ..Default::default() };
    assert_eq!(boundary_inducing(&mut a, &mut b, &cfg, &[], 1).unwrap(), (5, 5));
    let z = b.z();
    assert_eq!(z.len(), 9);
    for k in 0..5 {
        let p = z.point(4 + k);
        assert!((p[0] + 0.02).abs() < 1e-12);
        assert!((p[1] - (k as f64 + 0.5) / 5.0).abs() < 1e-12);
    }
    assert!((a.z().point(4)[0] - 0.02).abs() < 1e-12);
}

#[test]
fn mirror_with_empty_band_adds_nothing() {
    let right = Rect::new(0.0, 0.0, 2.0, 1.0).unwrap();
    let left = Rect::new(-2.0, 0.0, 0.0, 1.0).unwrap();
    let mut a = robot(1, right, InputSet::from_flat(2, vec![1.5, 0.5]).unwrap(), se(0.5));
    let mut b = robot(2, left, InputSet::from_flat(2, vec![-1.5, 0.5]).unwrap(), se(0.5));
    let cfg = BoundaryConfig { strategy: BoundaryStrategy::Mirror, band_frac: 0.1, ..Default::default() };
    assert_eq!(boundary_inducing(&mut a, &mut b, &cfg, &[], 1).unwrap(), (0, 0));
    assert_eq!((a.z().len(), b.z().len()), (1, 1));
    let far = Rect::new(5.0, 5.0, 6.0, 6.0).unwrap();
    let mut c = robot(3, far, lattice_z(&far, 1), se(0.5));
    assert!(matches!(boundary_inducing(&mut a, &mut c, &cfg, &[], 1), Err(Error::NoSharedBoundary { .. })));
}

#[test]
fn mirror_copies_peer_points_near_border() {
    let right = Rect::new(0.0, 0.0, 2.0, 1.0).unwrap();
    let left = Rect::new(-2.0, 0.0, 0.0, 1.0).unwrap();
    let mut a = robot(1, right, InputSet::from_flat(2, vec![0.1, 0.5, 1.5, 0.5]).unwrap(), se(0.5));
    let mut b = robot(2, left, InputSet::from_flat(2, vec![-1.5, 0.5]).unwrap(), se(0.5));
    let cfg = BoundaryConfig { strategy: BoundaryStrategy::Mirror, band_frac: 0.1, ..Default::default() };
    assert_eq!(boundary_inducing(&mut a, &mut b, &cfg, &[], 1).unwrap(), (0, 1));
    assert_eq!(b.z().point(1), &[0.1, 0.5]);
}

#[test]
fn snapshots_relay_through_intermediate_robot() {
    let cells = Rect::new(0.0, 0.0, 3.0, 1.0).unwrap().grid(1, 3);
    let mut rs: Vec<RobotAgent> = cells.iter().enumerate().map(|(i, c)| robot(i as u32, *c, lattice_z(c, 2), se(0.5))).collect();
    for (i, r) in rs.iter_mut().enumerate() {
        r.pose = [1.0, 0.5];
        feed(r, 5, i as u64);
    }
    let (l, rest) = rs.split_at_mut(1);
    let (m, r) = rest.split_at_mut(1);
    connect(&mut l[0], &mut m[0], 1.0).unwrap();
    share_posteriors(&mut l[0], &mut m[0], 1.0).unwrap();
    connect(&mut m[0], &mut r[0], 1.0).unwrap();
    share_posteriors(&mut m[0], &mut r[0], 1.0).unwrap();
    assert_eq!(r[0].cache().keys().copied().collect::<Vec<_>>(), vec![0, 1]);
    assert_eq!(l[0].cache().keys().copied().collect::<Vec<_>>(), vec![1]);
    // a stale relay never overwrites a newer snapshot
    let v_before = r[0].cache()[&1].version;
    share_posteriors(&mut m[0], &mut r[0], 1.0).unwrap();
    assert!(r[0].cache()[&1].version > v_before);
    let old = WireRecord::Posterior(PosteriorSnapshot { version: 0, ..r[0].cache()[&1].clone() });
    r[0].handle(&old).unwrap();
    assert!(r[0].cache()[&1].version > v_before);
    let q = InputSet::from_flat(2, vec![0.5, 0.5]).unwrap();
    let snap = r[0].cache()[&0].clone();
    let (mc, _) = r[0].predict_with_snapshot(&snap, &q).unwrap();
    let (ml, _) = l[0].predict(&q).unwrap();
    assert!((mc[0] - ml[0]).abs() < 1e-9);
}

#[test]
fn hyper_steps_increase_marginal_and_diverge_per_robot() {
    let r0 = Rect::new(0.0, 0.0, 1.0, 1.0).unwrap();
    let mk = |id, seed, amp: f64| {
        let mut cfg = RobotConfig::new(se(0.3), NoiseModel::new(0.1));
        cfg.buffer_capacity = 60;
        cfg.select_period = 0;
        cfg.hyper = Some(HyperConfig::default());
        let mut r = RobotAgent::new(id, r0, [0.5, 0.5], lattice_z(&r0, 3), cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in 0..60 {
            let x = vec![rng.random::<f64>(), rng.random::<f64>()];
            let y = amp * (4.0 * x[0]).sin() + 0.05 * rng.random_range(-1.0..1.0);
            r.observe(Observation { x, y, t }).unwrap();
        }
        r
    };
    let mut a = mk(1, 1, 0.3);
    let mut b = mk(2, 2, 2.0);
    let lml = |r: &RobotAgent| {
        let xs = InputSet::from_flat(2, r.buffer().flat_map(|o| o.x.clone()).collect()).unwrap();
        let ys: Vec<f64> = r.buffer().map(|o| o.y).collect();
        fitc_log_marginal(&xs, &ys, r.z(), r.kernel(), r.noise(), &Solver::default()).unwrap().value
    };
    for r in [&mut a, &mut b] {
        let mut prev = lml(r);
        for _ in 0..5 {
            r.hyper_step().unwrap();
            let now = lml(r);
            assert!(now >= prev - 1e-12);
            prev = now;
        }
    }
    assert!((a.kernel().variance() - b.kernel().variance()).abs() > 1e-3);
}

#[test]
fn all_to_all_prior_is_dense() {
    let cells = Rect::new(0.0, 0.0, 2.0, 2.0).unwrap().grid(2, 2);
    let k = se(0.7);
    let mut rs: Vec<RobotAgent> = cells
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut cfg = RobotConfig::new(k.clone(), NoiseModel::new(0.1));
            cfg.scope_cap_factor = 4.0;
            RobotAgent::new(i as u32 + 1, *c, [1.0, 1.0], lattice_z(c, 2), cfg).unwrap()
        })
        .collect();
    for i in 0..4 {
        for j in (i + 1)..4 {
            let (lo, hi) = rs.split_at_mut(j);
            connect(&mut lo[i], &mut hi[0], 1.0).unwrap();
        }
    }
    assert_eq!(rs[3].conditional_parents(), &[1, 2, 3]);
    let mut joint = InfoGaussian::zeros(16);
    for (i, r) in rs.iter().enumerate() {
        let mut blocks = vec![i];
        blocks.extend(r.conditional_parents().iter().map(|p| *p as usize - 1));
        let mut map = vec![None; 16];
        for (slot, b) in blocks.iter().enumerate() {
            for j in 0..4 {
                map[4 * b + j] = Some(4 * slot + j);
            }
        }
        joint.accumulate(&r.prior_payload().unwrap().remap(&map));
    }
    let mut all = InputSet::new(2);
    rs.iter().for_each(|r| all.extend(r.z()).unwrap());
    assert!((joint.to_moments().unwrap().sigma - k.gram_sym(&all).unwrap()).amax() < 1e-7);
}

#[test]
fn parents_beyond_scope_cap_use_coupling() {
    let cells = Rect::new(0.0, 0.0, 3.0, 1.0).unwrap().grid(1, 3);
    let k = se(0.6);
    let mut rs: Vec<RobotAgent> = cells
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut cfg = RobotConfig::new(k.clone(), NoiseModel::new(0.1));
            cfg.scope_cap_factor = 2.0;
            RobotAgent::new(i as u32, *c, [1.5, 0.5], lattice_z(c, 2), cfg).unwrap()
        })
        .collect();
    for (i, r) in rs.iter_mut().enumerate() {
        feed(r, 10, 20 + i as u64);
    }
    let (lo, hi) = rs.split_at_mut(2);
    connect(&mut lo[0], &mut hi[0], 5.0).unwrap();
    connect(&mut lo[1], &mut hi[0], 5.0).unwrap();
    assert_eq!(hi[0].conditional_parents(), &[0]);
    for _ in 0..3 {
        exchange(&mut lo[0], &mut hi[0]).unwrap();
        exchange(&mut lo[1], &mut hi[0]).unwrap();
    }
    let b = hi[0].belief().unwrap();
    assert!(b.sigma.iter().all(|v| v.is_finite()));
    assert!(b.sigma.clone().cholesky().is_some());
}

#[test]
fn added_point_keeps_data_and_reaches_peer() {
    let (mut a, mut b) = two_robots(0.5);
    feed(&mut a, 10, 11);
    connect(&mut a, &mut b, 0.2).unwrap();
    exchange(&mut a, &mut b).unwrap();
    a.add_inducing_point(&[-0.1, 0.0], 3).unwrap();
    exchange(&mut a, &mut b).unwrap();
    exchange(&mut a, &mut b).unwrap();
    assert_eq!(b.graph().dim(b.graph().variable_ids()[1]).unwrap(), 10);
}

#[test]
fn retirement_caps_block_size() {
    let r0 = Rect::new(0.0, 0.0, 1.0, 1.0).unwrap();
    let mut cfg = RobotConfig::new(se(0.3), NoiseModel::new(0.1));
    cfg.max_inducing = Some(6);
    cfg.select_period = 1;
    let mut r = RobotAgent::new(0, r0, [0.5, 0.5], lattice_z(&r0, 2), cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for t in 1..40 {
        let x = vec![rng.random::<f64>(), rng.random::<f64>()];
        r.observe(Observation { x, y: 0.5, t }).unwrap();
        r.maybe_select(t).unwrap();
        assert!(r.z().len() <= 6);
    }
    let b = r.belief().unwrap();
    assert!(b.mu.iter().all(|v| v.is_finite()));
}
