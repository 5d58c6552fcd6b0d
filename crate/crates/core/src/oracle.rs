//! Brute-force solvers on small trees. These optimize the exact discrete
//! costs directly - projected gradient with exact adjoint gradients for the
//! follower, nested projected gradient with central finite differences for
//! the leader - and serve as ground truth for the coupled-system solvers.
//! The sweeps here are written independently of the `fbsde` module so the
//! two routes share no solver code.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lattice::{Lattice, NodeProcess, TreeKind};
use crate::model::GameSpec;
use crate::par;

/// Gradient-map tolerance for the follower solve.
pub const FOLLOWER_TOL: f64 = 1e-10;
pub const FOLLOWER_ITER_CAP: usize = 1_000_000;
/// Outer (leader) gradient-map tolerance and caps. The outer gradient is a
/// central difference through the nested solve, so its accuracy is bounded
/// by the follower tolerance divided by the difference step; tightening the
/// outer tolerance past that floor would only chase noise.
pub const LEADER_TOL: f64 = 1e-6;
pub const LEADER_ITER_CAP: usize = 400;
const FD_STEP: f64 = 1e-5;
const ARMIJO_BETA: f64 = 0.5;
const ARMIJO_SIGMA: f64 = 1e-4;

/// Flattened per-node control vector in fixed lexicographic (layer, node)
/// order; one `m`-dimensional block per non-terminal node.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeControlVector {
    pub m: usize,
    pub blocks: Vec<DVector<f64>>,
    layer_offsets: Vec<usize>,
}

impl TreeControlVector {
    pub fn zeros(lat: &Lattice, m: usize) -> Self {
        let mut layer_offsets = Vec::with_capacity(lat.n_steps());
        let mut total = 0usize;
        for i in 0..lat.n_steps() {
            layer_offsets.push(total);
            total += lat.layer_size(i);
        }
        TreeControlVector {
            m,
            blocks: vec![DVector::zeros(m); total],
            layer_offsets,
        }
    }

    pub fn from_process(lat: &Lattice, proc: &NodeProcess) -> Self {
        let mut out = Self::zeros(lat, proc.dim());
        for i in 0..lat.n_steps() {
            for j in 0..lat.layer_size(i) {
                *out.block_mut(i, j) = proc.at(i, j).clone();
            }
        }
        out
    }

    pub fn to_process(&self, lat: &Lattice) -> NodeProcess {
        let mut proc = NodeProcess::zeros_interior(lat, self.m);
        for i in 0..lat.n_steps() {
            for j in 0..lat.layer_size(i) {
                proc.set(i, j, self.block(i, j).clone());
            }
        }
        proc
    }

    pub fn block(&self, layer: usize, node: usize) -> &DVector<f64> {
        &self.blocks[self.layer_offsets[layer] + node]
    }

    pub fn block_mut(&mut self, layer: usize, node: usize) -> &mut DVector<f64> {
        &mut self.blocks[self.layer_offsets[layer] + node]
    }

    pub fn len(&self) -> usize {
        self.blocks.len() * self.m
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn sup_distance(&self, other: &Self) -> f64 {
        self.blocks
            .iter()
            .zip(other.blocks.iter())
            .map(|(a, b)| crate::linalg::sup_distance(a, b))
            .fold(0.0, f64::max)
    }
}

fn require_small_tree(lat: &Lattice, cap: usize, what: &str) -> Result<()> {
    if lat.kind() != TreeKind::PathDependent {
        return Err(Error::InvalidLattice(
            "brute-force oracles run on path-dependent trees".into(),
        ));
    }
    if lat.n_steps() > cap {
        return Err(Error::InvalidLattice(format!(
            "{what} oracle is capped at {cap} steps, got {}",
            lat.n_steps()
        )));
    }
    Ok(())
}

/// Forward state sweep under explicit controls.
fn forward_state(
    spec: &GameSpec,
    lat: &Lattice,
    u: &TreeControlVector,
    v: &TreeControlVector,
) -> NodeProcess {
    let dt = lat.dt();
    let sq = lat.sqrt_dt();
    let mut x = NodeProcess::zeros(lat, spec.n);
    x.set(0, 0, spec.x0.clone());
    for i in 0..lat.n_steps() {
        let t = lat.time(i);
        let a = spec.a.at(t);
        let c = spec.c.at(t);
        let b1 = spec.b1.at(t);
        let d1 = spec.d1.at(t);
        let b2 = spec.b2.at(t);
        let d2 = spec.d2.at(t);
        let next = par::map_indexed(lat.layer_size(i + 1), |jn| {
            let j = jn >> 1;
            let sign = if jn & 1 == 1 { 1.0 } else { -1.0 };
            let xj = x.at(i, j);
            let drift = a * xj + b1 * u.block(i, j) + b2 * v.block(i, j);
            let diff = c * xj + d1 * u.block(i, j) + d2 * v.block(i, j);
            xj + drift * dt + diff * (sign * sq)
        });
        x.set_layer(i + 1, next);
    }
    x
}

fn follower_cost(
    spec: &GameSpec,
    lat: &Lattice,
    x: &NodeProcess,
    v: &TreeControlVector,
) -> f64 {
    let dt = lat.dt();
    let mut j2 = 0.0;
    for i in 0..lat.n_steps() {
        let t = lat.time(i);
        let q2 = spec.q2.at(t);
        let r2 = spec.r2.at(t);
        for j in 0..lat.layer_size(i) {
            let w = lat.weight(i, j);
            let xj = x.at(i, j);
            let vj = v.block(i, j);
            j2 += w * 0.5 * ((q2 * xj).dot(xj) + (r2 * vj).dot(vj)) * dt;
        }
    }
    let last = lat.n_steps();
    for j in 0..lat.layer_size(last) {
        let w = lat.weight(last, j);
        let xj = x.at(last, j);
        j2 += w * 0.5 * (&spec.phi2 * xj).dot(xj);
    }
    j2
}

fn leader_cost(spec: &GameSpec, lat: &Lattice, x: &NodeProcess, u: &TreeControlVector) -> f64 {
    let dt = lat.dt();
    let mut j1 = 0.0;
    for i in 0..lat.n_steps() {
        let t = lat.time(i);
        let q1 = spec.q1.at(t);
        let r1 = spec.r1.at(t);
        for j in 0..lat.layer_size(i) {
            let w = lat.weight(i, j);
            let xj = x.at(i, j);
            let uj = u.block(i, j);
            j1 += w * 0.5 * ((q1 * xj).dot(xj) + (r1 * uj).dot(uj)) * dt;
        }
    }
    let last = lat.n_steps();
    for j in 0..lat.layer_size(last) {
        let w = lat.weight(last, j);
        let xj = x.at(last, j);
        j1 += w * 0.5 * (&spec.phi1 * xj).dot(xj);
    }
    j1
}

/// Exact gradient of the discrete follower cost with respect to every
/// control block, computed by one reverse sweep through the tree. Returned
/// blocks are scaled by `1 / (weight * dt)` so the step size is uniform
/// across layers; the scaling is a positive diagonal preconditioner.
fn follower_gradient(
    spec: &GameSpec,
    lat: &Lattice,
    x: &NodeProcess,
    v: &TreeControlVector,
) -> TreeControlVector {
    let n_steps = lat.n_steps();
    let dt = lat.dt();
    let sq = lat.sqrt_dt();
    let mut grad = TreeControlVector::zeros(lat, spec.m2);
    // lambda carries dJ/dx scaled by 1/weight
    let mut lambda: Vec<DVector<f64>> = (0..lat.layer_size(n_steps))
        .map(|j| &spec.phi2 * x.at(n_steps, j))
        .collect();
    for i in (0..n_steps).rev() {
        let t = lat.time(i);
        let a = spec.a.at(t);
        let c = spec.c.at(t);
        let b2 = spec.b2.at(t);
        let d2 = spec.d2.at(t);
        let q2 = spec.q2.at(t);
        let r2 = spec.r2.at(t);
        let mut next_lambda = Vec::with_capacity(lat.layer_size(i));
        for j in 0..lat.layer_size(i) {
            let (down, up) = lat.successors(i, j);
            let mean = (&lambda[up] + &lambda[down]) * 0.5;
            let diff = (&lambda[up] - &lambda[down]) / (2.0 * sq);
            *grad.block_mut(i, j) =
                r2 * v.block(i, j) + b2.transpose() * &mean + d2.transpose() * &diff;
            let lam =
                &mean + (a.transpose() * &mean + c.transpose() * &diff + q2 * x.at(i, j)) * dt;
            next_lambda.push(lam);
        }
        lambda = next_lambda;
    }
    grad
}

fn project_controls(set: &crate::projection::ConstraintSet, v: &TreeControlVector) -> TreeControlVector {
    let mut out = v.clone();
    for b in out.blocks.iter_mut() {
        *b = set.project_euclidean(b);
    }
    out
}

/// Result of a brute-force follower solve.
#[derive(Debug, Clone)]
pub struct FollowerOracle {
    pub controls: TreeControlVector,
    pub cost: f64,
    pub iterations: usize,
    pub gradient_map_norm: f64,
}

/// Largest curvature of the preconditioned follower gradient, by power
/// iteration on its (exact, affine) difference map.
fn follower_lipschitz(spec: &GameSpec, lat: &Lattice, u: &TreeControlVector) -> f64 {
    let base = TreeControlVector::zeros(lat, spec.m2);
    let x0 = forward_state(spec, lat, u, &base);
    let g0 = follower_gradient(spec, lat, &x0, &base);
    let mut w = TreeControlVector::zeros(lat, spec.m2);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for b in w.blocks.iter_mut() {
        for e in b.iter_mut() {
            *e = if rand::Rng::gen_bool(&mut rng, 0.5) { 1.0 } else { -1.0 };
        }
    }
    let norm = |t: &TreeControlVector| -> f64 {
        t.blocks.iter().map(|b| b.norm_squared()).sum::<f64>().sqrt()
    };
    let mut estimate = 1.0;
    for _ in 0..20 {
        let scale = norm(&w).max(1e-300);
        for b in w.blocks.iter_mut() {
            *b /= scale;
        }
        let mut probe = base.clone();
        for (p, d) in probe.blocks.iter_mut().zip(w.blocks.iter()) {
            *p += d;
        }
        let xp = forward_state(spec, lat, u, &probe);
        let gp = follower_gradient(spec, lat, &xp, &probe);
        for ((wb, gb), g0b) in w.blocks.iter_mut().zip(gp.blocks.iter()).zip(g0.blocks.iter()) {
            *wb = gb - g0b;
        }
        estimate = norm(&w);
    }
    estimate.max(crate::linalg::max_abs(spec.r2.at(0.0))).max(1e-12)
}

/// Minimize the exact discrete follower cost over per-node controls by
/// projected gradient with Armijo backtracking. The objective is strongly
/// convex (positive control weight), so the minimizer is unique. The step
/// never shrinks below the safe fixed step `~1/L`, where descent holds
/// without a cost comparison; this keeps the tail of the iteration immune
/// to floating-point cancellation in the objective.
pub fn oracle_follower(
    spec: &GameSpec,
    lat: &Lattice,
    leader_controls: &TreeControlVector,
    warm: Option<&TreeControlVector>,
) -> Result<FollowerOracle> {
    require_small_tree(lat, 6, "follower")?;
    let mut v = match warm {
        Some(w) => project_controls(&spec.gamma2, w),
        None => project_controls(&spec.gamma2, &TreeControlVector::zeros(lat, spec.m2)),
    };
    let mut x = forward_state(spec, lat, leader_controls, &v);
    let mut cost = follower_cost(spec, lat, &x, &v);
    let eta_floor = 0.95 / follower_lipschitz(spec, lat, leader_controls);
    let mut eta = eta_floor * 4.0;

    for iter in 0..FOLLOWER_ITER_CAP {
        let grad = follower_gradient(spec, lat, &x, &v);
        let mut trial = v.clone();
        for (b, g) in trial.blocks.iter_mut().zip(grad.blocks.iter()) {
            *b = spec.gamma2.project_euclidean(&(&*b - g * eta));
        }
        let gmap = trial.sup_distance(&v) / eta;
        if gmap <= FOLLOWER_TOL {
            return Ok(FollowerOracle {
                controls: v,
                cost,
                iterations: iter,
                gradient_map_norm: gmap,
            });
        }
        // Armijo backtracking down to the safe fixed step
        loop {
            let at_floor = eta <= eta_floor;
            let x_trial = forward_state(spec, lat, leader_controls, &trial);
            let cost_trial = follower_cost(spec, lat, &x_trial, &trial);
            let step_sq: f64 = trial
                .blocks
                .iter()
                .zip(v.blocks.iter())
                .map(|(a, b)| (a - b).norm_squared())
                .sum();
            if at_floor || cost_trial <= cost - ARMIJO_SIGMA * step_sq / eta {
                v = trial;
                x = x_trial;
                cost = cost_trial;
                break;
            }
            eta = (eta * ARMIJO_BETA).max(eta_floor);
            trial = v.clone();
            for (b, g) in trial.blocks.iter_mut().zip(grad.blocks.iter()) {
                *b = spec.gamma2.project_euclidean(&(&*b - g * eta));
            }
        }
        eta = (eta * 1.3).min(eta_floor * 8.0);
    }
    Err(Error::NotConverged {
        iterations: FOLLOWER_ITER_CAP,
        last_residual: f64::NAN,
        history: Vec::new(),
        failing_alpha: None,
    })
}

/// One multistart outcome of the leader oracle.
#[derive(Debug, Clone)]
pub struct LeaderRestart {
    pub label: String,
    pub cost: f64,
    pub controls: TreeControlVector,
    pub follower: TreeControlVector,
    pub gradient_map_norm: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct LeaderOracle {
    pub restarts: Vec<LeaderRestart>,
    pub best: usize,
}

impl LeaderOracle {
    pub fn best_restart(&self) -> &LeaderRestart {
        &self.restarts[self.best]
    }
}

/// Leader objective with the follower's exact best response substituted.
fn nested_cost(
    spec: &GameSpec,
    lat: &Lattice,
    u: &TreeControlVector,
    warm: Option<&TreeControlVector>,
) -> Result<(f64, TreeControlVector)> {
    let follower = oracle_follower(spec, lat, u, warm)?;
    let x = forward_state(spec, lat, u, &follower.controls);
    Ok((leader_cost(spec, lat, &x, u), follower.controls))
}

/// Minimize the leader's nested objective by projected gradient with central
/// finite differences, from several starting points. Returns every restart;
/// the best one is the oracle answer. Best-effort: the outer problem is
/// smooth almost everywhere but not certified convex.
pub fn oracle_leader(
    spec: &GameSpec,
    lat: &Lattice,
    restarts: usize,
    seed: u64,
    warm_start: Option<&TreeControlVector>,
) -> Result<LeaderOracle> {
    require_small_tree(lat, 4, "leader")?;
    let starts: Vec<(String, TreeControlVector)> = {
        let mut s = Vec::new();
        if let Some(w) = warm_start {
            s.push(("warm".to_string(), project_controls(&spec.gamma1, w)));
        }
        s.push((
            "zero".to_string(),
            project_controls(&spec.gamma1, &TreeControlVector::zeros(lat, spec.m1)),
        ));
        for r in 0..restarts {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
            let mut u = TreeControlVector::zeros(lat, spec.m1);
            let anchor = DVector::zeros(spec.m1);
            for b in u.blocks.iter_mut() {
                *b = spec.gamma1.sample(&mut rng, &anchor, 1.5);
            }
            s.push((format!("random-{r}"), u));
        }
        s
    };

    let outcomes = par::map_indexed(starts.len(), |idx| -> Result<LeaderRestart> {
        let (label, start) = &starts[idx];
        let (restart_cost, controls, follower, gmap, iters) =
            leader_descent(spec, lat, start.clone())?;
        Ok(LeaderRestart {
            label: label.clone(),
            cost: restart_cost,
            controls,
            follower,
            gradient_map_norm: gmap,
            iterations: iters,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let best = outcomes
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.cost.partial_cmp(&b.1.cost).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    Ok(LeaderOracle {
        restarts: outcomes,
        best,
    })
}

type DescentOutcome = (f64, TreeControlVector, TreeControlVector, f64, usize);

fn leader_descent(
    spec: &GameSpec,
    lat: &Lattice,
    mut u: TreeControlVector,
) -> Result<DescentOutcome> {
    let (mut cost, mut follower) = nested_cost(spec, lat, &u, None)?;
    let mut eta = 0.5;
    let mut gmap = f64::INFINITY;
    for iter in 0..LEADER_ITER_CAP {
        // central finite differences through the nested solve
        let dim = u.blocks.len();
        let grads = par::map_indexed(dim * spec.m1, |flat| -> Result<f64> {
            let (block, coord) = (flat / spec.m1, flat % spec.m1);
            let mut plus = u.clone();
            plus.blocks[block][coord] += FD_STEP;
            let mut minus = u.clone();
            minus.blocks[block][coord] -= FD_STEP;
            let (jp, _) = nested_cost(spec, lat, &plus, Some(&follower))?;
            let (jm, _) = nested_cost(spec, lat, &minus, Some(&follower))?;
            Ok((jp - jm) / (2.0 * FD_STEP))
        })
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
        let mut grad = TreeControlVector::zeros(lat, spec.m1);
        for (flat, g) in grads.iter().enumerate() {
            grad.blocks[flat / spec.m1][flat % spec.m1] = *g;
        }

        let mut trial = u.clone();
        for (b, g) in trial.blocks.iter_mut().zip(grad.blocks.iter()) {
            *b = spec.gamma1.project_euclidean(&(&*b - g * eta));
        }
        gmap = trial.sup_distance(&u) / eta;
        if gmap <= LEADER_TOL {
            return Ok((cost, u, follower, gmap, iter));
        }
        let mut accepted = false;
        for _ in 0..40 {
            let (cost_trial, follower_trial) = nested_cost(spec, lat, &trial, Some(&follower))?;
            let step_sq: f64 = trial
                .blocks
                .iter()
                .zip(u.blocks.iter())
                .map(|(a, b)| (a - b).norm_squared())
                .sum();
            if cost_trial <= cost - ARMIJO_SIGMA * step_sq / eta {
                u = trial.clone();
                cost = cost_trial;
                follower = follower_trial;
                accepted = true;
                break;
            }
            eta *= ARMIJO_BETA;
            trial = u.clone();
            for (b, g) in trial.blocks.iter_mut().zip(grad.blocks.iter()) {
                *b = spec.gamma1.project_euclidean(&(&*b - g * eta));
            }
        }
        if !accepted {
            return Ok((cost, u, follower, gmap, iter));
        }
        eta = (eta * 1.2).min(10.0);
    }
    Ok((cost, u.clone(), follower, gmap, LEADER_ITER_CAP))
}

/// Evaluate the exact discrete cost pair for explicit controls; shared by
/// comparison reports.
pub fn evaluate_costs(
    spec: &GameSpec,
    lat: &Lattice,
    u: &TreeControlVector,
    v: &TreeControlVector,
) -> (f64, f64) {
    let x = forward_state(spec, lat, u, v);
    (leader_cost(spec, lat, &x, u), follower_cost(spec, lat, &x, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbsde;
    use crate::model::scalar_spec;
    use crate::projection::ConstraintSet;

    fn mild_fixture() -> GameSpec {
        scalar_spec(&[
            ("A", 0.2),
            ("C", 0.15),
            ("B1", 0.6),
            ("B2", 0.5),
            ("D1", 0.2),
            ("D2", 0.2),
            ("Q1", 0.5),
            ("Q2", 0.4),
            ("R1", 1.0),
            ("R2", 1.0),
            ("Phi1", 0.3),
            ("Phi2", 0.25),
        ])
    }

    #[test]
    fn pure_control_cost_projects_zero() {
        let mut spec = scalar_spec(&[("Q2", 0.0), ("Phi2", 0.0)]);
        spec.gamma2 = ConstraintSet::Interval { lo: 0.2, hi: 1.0 };
        let lat = Lattice::path_dependent(3, 1.0).unwrap();
        let u = TreeControlVector::zeros(&lat, 1);
        let sol = oracle_follower(&spec, &lat, &u, None).unwrap();
        for b in &sol.controls.blocks {
            assert!((b[0] - 0.2).abs() < 1e-9, "expected clamp at 0.2, got {}", b[0]);
        }
    }

    #[test]
    fn follower_oracle_matches_picard_solver_fullspace() {
        let spec = mild_fixture();
        let lat = Lattice::path_dependent(3, 1.0).unwrap();
        let zeros = NodeProcess::zeros_interior(&lat, 1);
        let picard =
            fbsde::solve_follower(&spec, &lat, &zeros, &fbsde::SolverParams::default()).unwrap();
        let u = TreeControlVector::zeros(&lat, 1);
        let oracle = oracle_follower(&spec, &lat, &u, None).unwrap();
        let picard_v = TreeControlVector::from_process(&lat, &picard.v);
        let gap = oracle.controls.sup_distance(&picard_v);
        assert!(gap < 1e-6, "controls disagree by {gap}");
    }

    #[test]
    fn follower_oracle_active_set_matches_picard() {
        let mut spec = scalar_spec(&[
            ("A", 0.3),
            ("C", 0.2),
            ("B1", 0.0),
            ("D1", 0.0),
            ("B2", 0.8),
            ("D2", 0.2),
            ("Q2", 2.5),
            ("R2", 1.0),
            ("Phi2", 1.0),
            ("x0", 1.5),
        ]);
        spec.gamma2 = ConstraintSet::Interval { lo: -0.5, hi: 0.5 };
        let lat = Lattice::path_dependent(3, 1.0).unwrap();
        let zeros = NodeProcess::zeros_interior(&lat, 1);
        let picard =
            fbsde::solve_follower(&spec, &lat, &zeros, &fbsde::SolverParams::default()).unwrap();
        let u = TreeControlVector::zeros(&lat, 1);
        let oracle = oracle_follower(&spec, &lat, &u, None).unwrap();
        let mut some_clamped = false;
        for i in 0..3 {
            for j in 0..lat.layer_size(i) {
                let vo = oracle.controls.block(i, j)[0];
                let vp = picard.v.at(i, j)[0];
                assert!((vo - vp).abs() < 1e-6, "node ({i},{j}): {vo} vs {vp}");
                let clamped_o = vo.abs() >= 0.5 - 1e-7;
                let clamped_p = vp.abs() >= 0.5 - 1e-7;
                assert_eq!(clamped_o, clamped_p, "active sets differ at ({i},{j})");
                some_clamped |= clamped_o;
            }
        }
        assert!(some_clamped, "fixture should clamp somewhere");
    }

    #[test]
    fn leader_oracle_cost_only_control_projects_zero() {
        let mut spec = scalar_spec(&[("B1", 0.0), ("D1", 0.0)]);
        spec.gamma1 = ConstraintSet::Interval { lo: -1.0, hi: 1.0 };
        let lat = Lattice::path_dependent(2, 1.0).unwrap();
        let oracle = oracle_leader(&spec, &lat, 2, 11, None).unwrap();
        for b in &oracle.best_restart().controls.blocks {
            assert!(b[0].abs() < 1e-6, "expected zero control, got {}", b[0]);
        }
    }

    #[test]
    fn leader_oracle_matches_picard_solver_fullspace() {
        let spec = mild_fixture();
        let lat = Lattice::path_dependent(3, 1.0).unwrap();
        let picard =
            fbsde::solve_leader_system(&spec, &lat, &fbsde::SolverParams::default()).unwrap();
        let warm = TreeControlVector::from_process(&lat, &picard.u);
        let oracle = oracle_leader(&spec, &lat, 3, 5, Some(&warm)).unwrap();
        let best = oracle.best_restart();
        let picard_u = TreeControlVector::from_process(&lat, &picard.u);
        let (j1_picard, _) = evaluate_costs(
            &spec,
            &lat,
            &picard_u,
            &TreeControlVector::from_process(&lat, &picard.v),
        );
        assert!(
            (best.cost - j1_picard).abs() < 1e-6,
            "costs {} vs {}",
            best.cost,
            j1_picard
        );
        let gap = best.controls.sup_distance(&picard_u);
        assert!(gap < 1e-4, "controls disagree by {gap}");
    }

    #[test]
    fn descent_is_monotone() {
        let spec = mild_fixture();
        let lat = Lattice::path_dependent(3, 1.0).unwrap();
        let u = TreeControlVector::zeros(&lat, 1);
        // follow the projected-gradient path manually and watch the cost
        let mut v = TreeControlVector::zeros(&lat, 1);
        let mut x = forward_state(&spec, &lat, &u, &v);
        let mut prev = follower_cost(&spec, &lat, &x, &v);
        let eta = 0.3;
        for _ in 0..40 {
            let grad = follower_gradient(&spec, &lat, &x, &v);
            for (b, g) in v.blocks.iter_mut().zip(grad.blocks.iter()) {
                *b = spec.gamma2.project_euclidean(&(&*b - g * eta));
            }
            x = forward_state(&spec, &lat, &u, &v);
            let cost = follower_cost(&spec, &lat, &x, &v);
            assert!(cost <= prev + 1e-12, "cost rose from {prev} to {cost}");
            prev = cost;
        }
    }

    #[test]
    fn finite_difference_gradient_agrees_with_adjoint() {
        let spec = mild_fixture();
        let lat = Lattice::path_dependent(3, 1.0).unwrap();
        let u = TreeControlVector::zeros(&lat, 1);
        let mut v = TreeControlVector::zeros(&lat, 1);
        for (idx, b) in v.blocks.iter_mut().enumerate() {
            b[0] = 0.1 * (idx as f64 - 3.0);
        }
        let x = forward_state(&spec, &lat, &u, &v);
        let grad = follower_gradient(&spec, &lat, &x, &v);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..lat.layer_size(i) {
                let mut plus = v.clone();
                plus.block_mut(i, j)[0] += h;
                let mut minus = v.clone();
                minus.block_mut(i, j)[0] -= h;
                let xp = forward_state(&spec, &lat, &u, &plus);
                let xm = forward_state(&spec, &lat, &u, &minus);
                let fd = (follower_cost(&spec, &lat, &xp, &plus)
                    - follower_cost(&spec, &lat, &xm, &minus))
                    / (2.0 * h);
                // adjoint gradient is preconditioned by 1/(w dt)
                let scale = lat.weight(i, j) * lat.dt();
                let adj = grad.block(i, j)[0] * scale;
                assert!(
                    (fd - adj).abs() < 1e-6,
                    "({i},{j}): fd {fd} vs adjoint {adj}"
                );
            }
        }
    }
}
