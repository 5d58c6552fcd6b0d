//! Coupled forward-backward systems on the binomial tree, solved by Picard
//! iteration with an optional homotopy ramp for strongly coupled instances.
//!
//! Discretization. Forward components step exactly:
//! `x(succ) = x + b dt + sigma dW`. Backward components use the exact
//! conditional expectation with an explicit driver:
//! `p(i) = E[p(i+1)] + drift(E[p(i+1)], MI(p(i+1)), x(i)) dt`,
//! where `MI` extracts the martingale integrand. Both pointwise optimizers
//! are evaluated at the predictor pair `(E[p(i+1)], MI(p(i+1)))`. With this
//! convention the converged lattice solution satisfies the exact first-order
//! conditions of the discrete control problem, so it must agree with the
//! brute-force oracle to solver tolerance rather than to O(dt).
//!
//! The sensitivity (`k`) equation uses the chain rule on the follower's
//! optimizer, so its mixed terms carry the transposed channel products; on
//! scalar instances this coincides with the augmented-block form used in
//! `riccati`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lattice::{self, Lattice, NodeProcess, TreeKind};
use crate::model::GameSpec;
use crate::par;
use crate::projection;

/// Fixed-point tolerance (sup-norm over all node fields).
pub const DEFAULT_TOL: f64 = 1e-10;
/// Iteration cap per homotopy step.
pub const DEFAULT_MAX_ITERATIONS: usize = 500;
/// Residual considered hopeless; aborts the iteration early.
const DIVERGENCE_LIMIT: f64 = 1e12;
/// Relaxation factors a homotopy step walks down when its inner iteration
/// stalls: plain first, then progressively heavier damping.
const DAMPING_LADDER: &[f64] = &[1.0, 0.5, 0.25, 0.125, 0.0625];

#[derive(Debug, Clone, Copy)]
pub struct SolverParams {
    pub tol: f64,
    pub max_iterations: usize,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            tol: DEFAULT_TOL,
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }
}

/// Which coupled system a homotopy solve should target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SystemKind {
    Follower,
    Leader,
}

/// Solved follower system: state, adjoint pair, extracted integrand, and the
/// controls that generated the state.
#[derive(Debug, Clone)]
pub struct FollowerSystemSolution {
    pub x: NodeProcess,
    pub p2: NodeProcess,
    /// Martingale integrand of `p2`, interior layers.
    pub q2: NodeProcess,
    /// Predictor `E[p2(i+1)]`, interior layers; the argument of the
    /// follower optimizer.
    pub p2_pred: NodeProcess,
    pub u: NodeProcess,
    pub v: NodeProcess,
    pub residual: f64,
    pub iterations: usize,
    pub history: Vec<f64>,
}

/// Solved leader system: six coupled processes plus controls.
#[derive(Debug, Clone)]
pub struct LeaderSystemSolution {
    pub x: NodeProcess,
    pub k: NodeProcess,
    pub p1: NodeProcess,
    pub p2: NodeProcess,
    pub q1: NodeProcess,
    pub q2: NodeProcess,
    pub p1_pred: NodeProcess,
    pub p2_pred: NodeProcess,
    pub u: NodeProcess,
    pub v: NodeProcess,
    pub residual: f64,
    pub iterations: usize,
    pub history: Vec<f64>,
}

fn require_path_tree(lat: &Lattice) -> Result<()> {
    if lat.kind() != TreeKind::PathDependent {
        return Err(Error::InvalidLattice(
            "coupled solves need a path-dependent tree; use the feedback-gain solvers for large scalar unconstrained instances"
                .into(),
        ));
    }
    Ok(())
}

/// Convex mix `(1 - theta) old + theta new`, the relaxation step of the
/// damped iterations.
fn relax(old: &NodeProcess, new: NodeProcess, theta: f64) -> NodeProcess {
    if theta >= 1.0 {
        return new;
    }
    let mut mixed = new;
    for i in 0..mixed.num_layers() {
        let layer = mixed.layer_mut(i);
        for (j, value) in layer.iter_mut().enumerate() {
            *value = old.at(i, j) * (1.0 - theta) + &*value * theta;
        }
    }
    mixed
}

/// Interior-layer predictor pair `(E[p(i+1)], MI(p(i+1)))` for a backward process.
fn predictors(lat: &Lattice, p: &NodeProcess) -> (NodeProcess, NodeProcess) {
    let mut pred = NodeProcess::zeros_interior(lat, p.dim());
    let mut integrand = NodeProcess::zeros_interior(lat, p.dim());
    for i in 0..lat.n_steps() {
        pred.set_layer(i, lattice::conditional_expectation(lat, p, i));
        integrand.set_layer(i, lattice::martingale_integrand(lat, p, i));
    }
    (pred, integrand)
}

struct FollowerSweep {
    x: NodeProcess,
    p2: NodeProcess,
    v: NodeProcess,
}

/// One Picard map application for the follower system with coupling scale
/// `alpha`. Controls come from the incoming `p2` field; the returned fields
/// satisfy the forward and backward recursions exactly.
fn follower_sweep(
    spec: &GameSpec,
    lat: &Lattice,
    u: &NodeProcess,
    p2_field: &NodeProcess,
    alpha: f64,
) -> Result<FollowerSweep> {
    let n_steps = lat.n_steps();
    let dt = lat.dt();
    let sq = lat.sqrt_dt();

    let (p2_pred, q2_pred) = predictors(lat, p2_field);
    let mut v = NodeProcess::zeros_interior(lat, spec.m2);
    for i in 0..n_steps {
        let t = lat.time(i);
        let follower_opt = projection::PointwiseOptimizer::follower(spec, t)?;
        let layer = par::map_indexed(lat.layer_size(i), |j| {
            follower_opt.eval(p2_pred.at(i, j), q2_pred.at(i, j))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        v.set_layer(i, layer);
    }

    // forward
    let mut x = NodeProcess::zeros(lat, spec.n);
    x.set(0, 0, spec.x0.clone());
    for i in 0..n_steps {
        let t = lat.time(i);
        let a = spec.a.at(t);
        let c = spec.c.at(t);
        let b1 = spec.b1.at(t);
        let d1 = spec.d1.at(t);
        let b2 = spec.b2.at(t);
        let d2 = spec.d2.at(t);
        let next = par::map_indexed(lat.layer_size(i + 1), |j_next| {
            let j = j_next >> 1;
            let sign = if j_next & 1 == 1 { 1.0 } else { -1.0 };
            let xj = x.at(i, j);
            let uj = u.at(i, j);
            let vj = v.at(i, j);
            let drift = a * xj + b1 * uj + b2 * vj;
            let diffusion = c * xj + d1 * uj + d2 * vj;
            xj + (drift * dt + diffusion * (sign * sq)) * alpha
        });
        x.set_layer(i + 1, next);
    }

    // backward, explicit driver at the predictor pair
    let mut p2 = NodeProcess::zeros(lat, spec.n);
    let terminal = par::map_indexed(lat.layer_size(n_steps), |j| {
        &spec.phi2 * x.at(n_steps, j) * alpha
    });
    p2.set_layer(n_steps, terminal);
    for i in (0..n_steps).rev() {
        let t = lat.time(i);
        let a_t = spec.a.at(t).transpose();
        let c_t = spec.c.at(t).transpose();
        let q2w = spec.q2.at(t);
        let pred = lattice::conditional_expectation(lat, &p2, i);
        let integrand = lattice::martingale_integrand(lat, &p2, i);
        let layer = par::map_indexed(lat.layer_size(i), |j| {
            let drift = &a_t * &pred[j] + &c_t * &integrand[j] + q2w * x.at(i, j);
            &pred[j] + drift * (alpha * dt)
        });
        p2.set_layer(i, layer);
    }

    Ok(FollowerSweep { x, p2, v })
}

/// Solve the follower's coupled system for a given adapted leader control by
/// Picard iteration at full coupling.
pub fn solve_follower(
    spec: &GameSpec,
    lat: &Lattice,
    leader_controls: &NodeProcess,
    params: &SolverParams,
) -> Result<FollowerSystemSolution> {
    solve_follower_scaled(spec, lat, leader_controls, params, 1.0, None)
}

fn solve_follower_scaled(
    spec: &GameSpec,
    lat: &Lattice,
    leader_controls: &NodeProcess,
    params: &SolverParams,
    alpha: f64,
    warm: Option<(NodeProcess, NodeProcess)>,
) -> Result<FollowerSystemSolution> {
    solve_follower_damped(spec, lat, leader_controls, params, alpha, warm, 1.0)
}

/// Damped Picard iteration: the new backward field is the convex mix
/// `(1 - theta) old + theta sweep(old)`. Relaxation leaves fixed points
/// untouched and stabilizes oscillatory divergence; `theta = 1` is the
/// plain iteration.
fn solve_follower_damped(
    spec: &GameSpec,
    lat: &Lattice,
    leader_controls: &NodeProcess,
    params: &SolverParams,
    alpha: f64,
    warm: Option<(NodeProcess, NodeProcess)>,
    theta: f64,
) -> Result<FollowerSystemSolution> {
    require_path_tree(lat)?;
    let (mut x, mut p2) = warm.unwrap_or_else(|| {
        (
            NodeProcess::zeros(lat, spec.n),
            NodeProcess::zeros(lat, spec.n),
        )
    });
    let mut history = Vec::new();
    for _ in 0..params.max_iterations {
        let sweep = follower_sweep(spec, lat, leader_controls, &p2, alpha)?;
        let diff = sweep.p2.sup_distance(&p2).max(sweep.x.sup_distance(&x));
        history.push(diff);
        x = sweep.x;
        p2 = relax(&p2, sweep.p2, theta);
        if diff <= params.tol {
            let (p2_pred, q2) = predictors(lat, &p2);
            return Ok(FollowerSystemSolution {
                x,
                p2,
                q2,
                p2_pred,
                u: leader_controls.clone(),
                v: sweep.v,
                residual: diff,
                iterations: history.len(),
                history,
            });
        }
        if !diff.is_finite() || diff > DIVERGENCE_LIMIT {
            return Err(Error::not_converged(history, None));
        }
    }
    Err(Error::not_converged(history, None))
}

struct LeaderSweep {
    x: NodeProcess,
    k: NodeProcess,
    p1: NodeProcess,
    p2: NodeProcess,
    u: NodeProcess,
    v: NodeProcess,
}

/// One Picard map application for the leader's six-process system.
fn leader_sweep(
    spec: &GameSpec,
    lat: &Lattice,
    p1_field: &NodeProcess,
    p2_field: &NodeProcess,
    alpha: f64,
) -> Result<LeaderSweep> {
    let n_steps = lat.n_steps();
    let dt = lat.dt();
    let sq = lat.sqrt_dt();

    let (p1_pred, q1_pred) = predictors(lat, p1_field);
    let (p2_pred, q2_pred) = predictors(lat, p2_field);

    let mut u = NodeProcess::zeros_interior(lat, spec.m1);
    let mut v = NodeProcess::zeros_interior(lat, spec.m2);
    // per-node follower-optimizer Jacobians
    let mut jac_p: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(n_steps);
    let mut jac_q: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(n_steps);
    for i in 0..n_steps {
        let t = lat.time(i);
        let leader_opt = projection::PointwiseOptimizer::leader(spec, t)?;
        let follower_opt = projection::PointwiseOptimizer::follower(spec, t)?;
        let entries = par::map_indexed(lat.layer_size(i), |j| -> Result<_> {
            let uj = leader_opt.eval(p1_pred.at(i, j), q1_pred.at(i, j))?;
            let vj = follower_opt.eval(p2_pred.at(i, j), q2_pred.at(i, j))?;
            let (dp, dq) = follower_opt.jacobians(p2_pred.at(i, j), q2_pred.at(i, j))?;
            Ok((uj, vj, dp, dq))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let mut us = Vec::with_capacity(entries.len());
        let mut vs = Vec::with_capacity(entries.len());
        let mut dps = Vec::with_capacity(entries.len());
        let mut dqs = Vec::with_capacity(entries.len());
        for (uj, vj, dp, dq) in entries {
            us.push(uj);
            vs.push(vj);
            dps.push(dp);
            dqs.push(dq);
        }
        u.set_layer(i, us);
        v.set_layer(i, vs);
        jac_p.push(dps);
        jac_q.push(dqs);
    }

    // forward: x and the sensitivity k
    let mut x = NodeProcess::zeros(lat, spec.n);
    let mut k = NodeProcess::zeros(lat, spec.n);
    x.set(0, 0, spec.x0.clone());
    for i in 0..n_steps {
        let t = lat.time(i);
        let a = spec.a.at(t);
        let c = spec.c.at(t);
        let b1 = spec.b1.at(t);
        let d1 = spec.d1.at(t);
        let b2 = spec.b2.at(t);
        let d2 = spec.d2.at(t);
        let b2t = b2.transpose();
        let d2t = d2.transpose();
        let pairs = par::map_indexed(lat.layer_size(i + 1), |j_next| {
            let j = j_next >> 1;
            let sign = if j_next & 1 == 1 { 1.0 } else { -1.0 };
            let xj = x.at(i, j);
            let kj = k.at(i, j);
            let uj = u.at(i, j);
            let vj = v.at(i, j);
            let x_drift = a * xj + b1 * uj + b2 * vj;
            let x_diff = c * xj + d1 * uj + d2 * vj;
            let x_next = xj + (x_drift * dt + x_diff * (sign * sq)) * alpha;
            // tau = B2^T p1_pred + D2^T q1_pred drives the sensitivity channel
            let tau = &b2t * p1_pred.at(i, j) + &d2t * q1_pred.at(i, j);
            let k_drift = a * kj - jac_p[i][j].transpose() * &tau;
            let k_diff = c * kj - jac_q[i][j].transpose() * &tau;
            let k_next = kj + (k_drift * dt + k_diff * (sign * sq)) * alpha;
            (x_next, k_next)
        });
        let (xs, ks): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        x.set_layer(i + 1, xs);
        k.set_layer(i + 1, ks);
    }

    // backward: follower adjoint p2 and leader adjoint p1
    let mut p2 = NodeProcess::zeros(lat, spec.n);
    let mut p1 = NodeProcess::zeros(lat, spec.n);
    let last = n_steps;
    let term2 = par::map_indexed(lat.layer_size(last), |j| &spec.phi2 * x.at(last, j) * alpha);
    let term1 = par::map_indexed(lat.layer_size(last), |j| {
        (&spec.phi1 * x.at(last, j) - &spec.phi2 * k.at(last, j)) * alpha
    });
    p2.set_layer(last, term2);
    p1.set_layer(last, term1);
    for i in (0..n_steps).rev() {
        let t = lat.time(i);
        let a_t = spec.a.at(t).transpose();
        let c_t = spec.c.at(t).transpose();
        let q1w = spec.q1.at(t);
        let q2w = spec.q2.at(t);
        let pred2 = lattice::conditional_expectation(lat, &p2, i);
        let int2 = lattice::martingale_integrand(lat, &p2, i);
        let pred1 = lattice::conditional_expectation(lat, &p1, i);
        let int1 = lattice::martingale_integrand(lat, &p1, i);
        let layer2 = par::map_indexed(lat.layer_size(i), |j| {
            let drift = &a_t * &pred2[j] + &c_t * &int2[j] + q2w * x.at(i, j);
            &pred2[j] + drift * (alpha * dt)
        });
        let layer1 = par::map_indexed(lat.layer_size(i), |j| {
            let drift = &a_t * &pred1[j] + &c_t * &int1[j] + q1w * x.at(i, j) - q2w * k.at(i, j);
            &pred1[j] + drift * (alpha * dt)
        });
        p2.set_layer(i, layer2);
        p1.set_layer(i, layer1);
    }

    Ok(LeaderSweep { x, k, p1, p2, u, v })
}

/// Solve the leader's coupled system (state, sensitivity, both adjoint
/// pairs) by Picard iteration at full coupling.
pub fn solve_leader_system(
    spec: &GameSpec,
    lat: &Lattice,
    params: &SolverParams,
) -> Result<LeaderSystemSolution> {
    solve_leader_scaled(spec, lat, params, 1.0, None)
}

type LeaderFields = (NodeProcess, NodeProcess, NodeProcess, NodeProcess);

fn solve_leader_scaled(
    spec: &GameSpec,
    lat: &Lattice,
    params: &SolverParams,
    alpha: f64,
    warm: Option<LeaderFields>,
) -> Result<LeaderSystemSolution> {
    solve_leader_damped(spec, lat, params, alpha, warm, 1.0)
}

fn solve_leader_damped(
    spec: &GameSpec,
    lat: &Lattice,
    params: &SolverParams,
    alpha: f64,
    warm: Option<LeaderFields>,
    theta: f64,
) -> Result<LeaderSystemSolution> {
    require_path_tree(lat)?;
    let (mut x, mut k, mut p1, mut p2) = warm.unwrap_or_else(|| {
        (
            NodeProcess::zeros(lat, spec.n),
            NodeProcess::zeros(lat, spec.n),
            NodeProcess::zeros(lat, spec.n),
            NodeProcess::zeros(lat, spec.n),
        )
    });
    let mut history = Vec::new();
    for _ in 0..params.max_iterations {
        let sweep = leader_sweep(spec, lat, &p1, &p2, alpha)?;
        let diff = sweep
            .p1
            .sup_distance(&p1)
            .max(sweep.p2.sup_distance(&p2))
            .max(sweep.x.sup_distance(&x))
            .max(sweep.k.sup_distance(&k));
        history.push(diff);
        x = sweep.x;
        k = sweep.k;
        p1 = relax(&p1, sweep.p1, theta);
        p2 = relax(&p2, sweep.p2, theta);
        if diff <= params.tol {
            let (p1_pred, q1) = predictors(lat, &p1);
            let (p2_pred, q2) = predictors(lat, &p2);
            return Ok(LeaderSystemSolution {
                x,
                k,
                p1,
                p2,
                q1,
                q2,
                p1_pred,
                p2_pred,
                u: sweep.u,
                v: sweep.v,
                residual: diff,
                iterations: history.len(),
                history,
            });
        }
        if !diff.is_finite() || diff > DIVERGENCE_LIMIT {
            return Err(Error::not_converged(history, None));
        }
    }
    Err(Error::not_converged(history, None))
}

/// Outcome of one homotopy solve, with per-step convergence diagnostics.
#[derive(Debug, Clone)]
pub struct ContinuationReport {
    pub alphas: Vec<f64>,
    /// Fitted geometric residual-decay ratio per step.
    pub contraction_ratios: Vec<Option<f64>>,
    pub iterations_per_step: Vec<usize>,
}

pub enum ContinuationSolution {
    Follower(Box<FollowerSystemSolution>),
    Leader(Box<LeaderSystemSolution>),
}

/// Walk the coupling scale from 0 to 1 in `steps` equal increments, solving
/// each intermediate system warm-started from the previous one. The
/// zero-coupling base system is decoupled and trivial, so the first step
/// starts from a reliable neighborhood; with one step this degenerates to
/// plain Picard on the full system.
pub fn solve_by_continuation(
    spec: &GameSpec,
    lat: &Lattice,
    system: SystemKind,
    steps: usize,
    leader_controls: Option<&NodeProcess>,
    params: &SolverParams,
) -> Result<(ContinuationSolution, ContinuationReport)> {
    require_path_tree(lat)?;
    if steps == 0 {
        return Err(Error::InvalidLattice(
            "continuation needs at least one step".into(),
        ));
    }
    let mut report = ContinuationReport {
        alphas: Vec::new(),
        contraction_ratios: Vec::new(),
        iterations_per_step: Vec::new(),
    };
    match system {
        SystemKind::Follower => {
            let zeros_u = NodeProcess::zeros_interior(lat, spec.m1);
            let u = leader_controls.unwrap_or(&zeros_u);
            let mut warm: Option<(NodeProcess, NodeProcess)> = None;
            let mut last: Option<FollowerSystemSolution> = None;
            for j in 1..=steps {
                let alpha = j as f64 / steps as f64;
                let mut outcome = Err(Error::not_converged(Vec::new(), Some(alpha)));
                for theta in DAMPING_LADDER {
                    outcome = solve_follower_damped(
                        spec,
                        lat,
                        u,
                        params,
                        alpha,
                        warm.clone(),
                        *theta,
                    );
                    if outcome.is_ok() {
                        break;
                    }
                    if !matches!(outcome, Err(Error::NotConverged { .. })) {
                        break;
                    }
                }
                match outcome {
                    Ok(sol) => {
                        report.alphas.push(alpha);
                        report
                            .contraction_ratios
                            .push(fit_contraction_ratio(&sol.history));
                        report.iterations_per_step.push(sol.iterations);
                        warm = Some((sol.x.clone(), sol.p2.clone()));
                        last = Some(sol);
                    }
                    Err(Error::NotConverged { history, .. }) => {
                        return Err(Error::not_converged(history, Some(alpha)));
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok((
                ContinuationSolution::Follower(Box::new(last.unwrap())),
                report,
            ))
        }
        SystemKind::Leader => {
            let mut warm: Option<LeaderFields> = None;
            let mut last: Option<LeaderSystemSolution> = None;
            for j in 1..=steps {
                let alpha = j as f64 / steps as f64;
                let mut outcome = Err(Error::not_converged(Vec::new(), Some(alpha)));
                for theta in DAMPING_LADDER {
                    outcome =
                        solve_leader_damped(spec, lat, params, alpha, warm.clone(), *theta);
                    if outcome.is_ok() {
                        break;
                    }
                    if !matches!(outcome, Err(Error::NotConverged { .. })) {
                        break;
                    }
                }
                match outcome {
                    Ok(sol) => {
                        report.alphas.push(alpha);
                        report
                            .contraction_ratios
                            .push(fit_contraction_ratio(&sol.history));
                        report.iterations_per_step.push(sol.iterations);
                        warm = Some((sol.x.clone(), sol.k.clone(), sol.p1.clone(), sol.p2.clone()));
                        last = Some(sol);
                    }
                    Err(Error::NotConverged { history, .. }) => {
                        return Err(Error::not_converged(history, Some(alpha)));
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok((
                ContinuationSolution::Leader(Box::new(last.unwrap())),
                report,
            ))
        }
    }
}

/// Geometric mean of successive residual ratios, skipping a short burn-in.
pub fn fit_contraction_ratio(history: &[f64]) -> Option<f64> {
    let usable: Vec<f64> = history.iter().copied().filter(|r| *r > 0.0).collect();
    if usable.len() < 3 {
        return None;
    }
    let start = (usable.len() / 3).min(3);
    let window = &usable[start..];
    if window.len() < 2 {
        return None;
    }
    let mut log_sum = 0.0;
    let mut count = 0usize;
    for w in window.windows(2) {
        log_sum += (w[1] / w[0]).ln();
        count += 1;
    }
    if count == 0 {
        None
    } else {
        Some((log_sum / count as f64).exp())
    }
}

/// Exact discrete costs of a control pair along a solved state process.
pub fn discrete_costs(
    spec: &GameSpec,
    lat: &Lattice,
    x: &NodeProcess,
    u: &NodeProcess,
    v: &NodeProcess,
) -> (f64, f64) {
    let dt = lat.dt();
    let mut j1 = 0.0;
    let mut j2 = 0.0;
    for i in 0..lat.n_steps() {
        let t = lat.time(i);
        let q1 = spec.q1.at(t);
        let q2 = spec.q2.at(t);
        let r1 = spec.r1.at(t);
        let r2 = spec.r2.at(t);
        for j in 0..lat.layer_size(i) {
            let w = lat.weight(i, j);
            let xj = x.at(i, j);
            j1 += w * 0.5 * ((q1 * xj).dot(xj) + (r1 * u.at(i, j)).dot(u.at(i, j))) * dt;
            j2 += w * 0.5 * ((q2 * xj).dot(xj) + (r2 * v.at(i, j)).dot(v.at(i, j))) * dt;
        }
    }
    let last = lat.n_steps();
    for j in 0..lat.layer_size(last) {
        let w = lat.weight(last, j);
        let xj = x.at(last, j);
        j1 += w * 0.5 * (&spec.phi1 * xj).dot(xj);
        j2 += w * 0.5 * (&spec.phi2 * xj).dot(xj);
    }
    (j1, j2)
}

/// Per-node first-order-condition residuals and variational-inequality
/// probes for a solved system.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MaxPrincipleReport {
    pub max_follower_projection_residual: f64,
    pub max_leader_projection_residual: f64,
    /// Worst violation of `<dH/dv, y - v*> >= 0` over all probes and nodes.
    pub max_variational_violation: f64,
    pub probes_per_node: usize,
}

#[allow(clippy::too_many_arguments)]
fn control_residuals(
    spec: &GameSpec,
    lat: &Lattice,
    controls: &NodeProcess,
    pred: &NodeProcess,
    integrand: &NodeProcess,
    leader_side: bool,
    probes: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut max_proj = 0.0f64;
    let mut max_violation = 0.0f64;
    for i in 0..lat.n_steps() {
        let t = lat.time(i);
        for j in 0..lat.layer_size(i) {
            let p = pred.at(i, j);
            let q = integrand.at(i, j);
            let (target, grad, set) = if leader_side {
                let target = projection::phi1(spec, t, p, q)?;
                let grad = spec.b1.at(t).transpose() * p
                    + spec.d1.at(t).transpose() * q
                    + spec.r1.at(t) * controls.at(i, j);
                (target, grad, &spec.gamma1)
            } else {
                let target = projection::phi2(spec, t, p, q)?;
                let grad = spec.b2.at(t).transpose() * p
                    + spec.d2.at(t).transpose() * q
                    + spec.r2.at(t) * controls.at(i, j);
                (target, grad, &spec.gamma2)
            };
            let r = (controls.at(i, j) - &target).norm();
            max_proj = max_proj.max(r);
            let anchor = controls.at(i, j);
            for _ in 0..probes {
                let y = set.sample(&mut rng, anchor, 1.0);
                let margin = grad.dot(&(&y - anchor));
                if margin < 0.0 {
                    max_violation = max_violation.max(-margin);
                }
            }
        }
    }
    Ok((max_proj, max_violation))
}

/// Check the pointwise first-order conditions of a solved leader system.
pub fn max_principle_residual(
    spec: &GameSpec,
    lat: &Lattice,
    sol: &LeaderSystemSolution,
    probes: usize,
    seed: u64,
) -> Result<MaxPrincipleReport> {
    let (rv, viol_v) =
        control_residuals(spec, lat, &sol.v, &sol.p2_pred, &sol.q2, false, probes, seed)?;
    let (ru, viol_u) = control_residuals(
        spec,
        lat,
        &sol.u,
        &sol.p1_pred,
        &sol.q1,
        true,
        probes,
        seed ^ 0x9e37_79b9_7f4a_7c15,
    )?;
    Ok(MaxPrincipleReport {
        max_follower_projection_residual: rv,
        max_leader_projection_residual: ru,
        max_variational_violation: viol_v.max(viol_u),
        probes_per_node: probes,
    })
}

/// Follower-only variant of the first-order-condition check.
pub fn follower_principle_residual(
    spec: &GameSpec,
    lat: &Lattice,
    sol: &FollowerSystemSolution,
    probes: usize,
    seed: u64,
) -> Result<MaxPrincipleReport> {
    let (rv, viol) =
        control_residuals(spec, lat, &sol.v, &sol.p2_pred, &sol.q2, false, probes, seed)?;
    Ok(MaxPrincipleReport {
        max_follower_projection_residual: rv,
        max_leader_projection_residual: 0.0,
        max_variational_violation: viol,
        probes_per_node: probes,
    })
}

/// Computes `E<Phi2 x(T), x(T)>` two ways: directly at the terminal layer
/// and by telescoping the pairing `<p2, x>` through the discrete dynamics.
/// Both routes coincide at a converged solution.
pub fn ito_product_identity_gap(
    spec: &GameSpec,
    lat: &Lattice,
    sol: &FollowerSystemSolution,
) -> (f64, f64) {
    let last = lat.n_steps();
    let mut direct = 0.0;
    for j in 0..lat.layer_size(last) {
        let w = lat.weight(last, j);
        let xj = sol.x.at(last, j);
        direct += w * (&spec.phi2 * xj).dot(xj);
    }
    let mut telescoped = sol.p2.at(0, 0).dot(sol.x.at(0, 0));
    let dt = lat.dt();
    for i in 0..last {
        let t = lat.time(i);
        let b1 = spec.b1.at(t);
        let d1 = spec.d1.at(t);
        let b2 = spec.b2.at(t);
        let d2 = spec.d2.at(t);
        let q2 = spec.q2.at(t);
        for j in 0..lat.layer_size(i) {
            let w = lat.weight(i, j);
            let pbar = sol.p2_pred.at(i, j);
            let qbar = sol.q2.at(i, j);
            let xj = sol.x.at(i, j);
            let uj = sol.u.at(i, j);
            let vj = sol.v.at(i, j);
            let control_pairing = (b2.transpose() * pbar + d2.transpose() * qbar).dot(vj)
                + (b1.transpose() * pbar + d1.transpose() * qbar).dot(uj);
            telescoped += w * dt * (control_pairing - (q2 * xj).dot(xj));
        }
    }
    (direct, telescoped)
}

/// Per-layer feedback representation of the follower solution for scalar
/// unconstrained instances with no leader input: `v(node) = gain_i x(node)`
/// and `p2(node) = kappa_i x(node)`. This closes the discrete system without
/// materializing the tree, so it scales to large step counts.
#[derive(Debug, Clone)]
pub struct FollowerGains {
    pub times: Vec<f64>,
    pub kappa: Vec<f64>,
    pub gain: Vec<f64>,
}

pub fn solve_follower_gains(spec: &GameSpec, n_steps: usize) -> Result<FollowerGains> {
    if !spec.is_scalar() || !spec.unconstrained() {
        return Err(Error::InvalidLattice(
            "feedback-gain recursion needs a scalar unconstrained instance".into(),
        ));
    }
    let dt = spec.horizon / n_steps as f64;
    let mut kappa = vec![0.0; n_steps + 1];
    let mut gain = vec![0.0; n_steps];
    kappa[n_steps] = spec.phi2[(0, 0)];
    for i in (0..n_steps).rev() {
        let t = i as f64 * dt;
        let a = spec.a.at(t)[(0, 0)];
        let c = spec.c.at(t)[(0, 0)];
        let b2 = spec.b2.at(t)[(0, 0)];
        let d2 = spec.d2.at(t)[(0, 0)];
        let r2 = spec.r2.at(t)[(0, 0)];
        let q2 = spec.q2.at(t)[(0, 0)];
        let kp = kappa[i + 1];
        // stationarity of the discrete problem in the layer gain
        let g = -kp * (b2 * (1.0 + a * dt) + d2 * c) / (r2 + kp * (b2 * b2 * dt + d2 * d2));
        let m_drift = 1.0 + (a + b2 * g) * dt;
        let sigma = c + d2 * g;
        kappa[i] = kp * m_drift * (1.0 + a * dt) + c * kp * sigma * dt + q2 * dt;
        gain[i] = g;
    }
    let times = (0..=n_steps).map(|i| i as f64 * dt).collect();
    Ok(FollowerGains { times, kappa, gain })
}

/// Per-layer feedback representation of the leader system for scalar
/// unconstrained instances: `(p1, p2)(node) = K_i (x, k)(node)` with
/// controls `u = u_row . (x, k)` and `v = v_row . (x, k)`.
#[derive(Debug, Clone)]
pub struct LeaderGains {
    pub times: Vec<f64>,
    pub k_mats: Vec<DMatrix<f64>>,
    pub u_rows: Vec<DVector<f64>>,
    pub v_rows: Vec<DVector<f64>>,
    /// Row of the sensitivity forcing `B2^T p1_pred + D2^T q1_pred` in the
    /// stacked state; used to reconstruct the sensitivity dynamics off the
    /// tree.
    pub tau_rows: Vec<DVector<f64>>,
}

pub fn solve_leader_gains(spec: &GameSpec, n_steps: usize) -> Result<LeaderGains> {
    if !spec.is_scalar() || !spec.unconstrained() {
        return Err(Error::InvalidLattice(
            "feedback-gain recursion needs a scalar unconstrained instance".into(),
        ));
    }
    let dt = spec.horizon / n_steps as f64;
    let mut k_mats = vec![DMatrix::zeros(2, 2); n_steps + 1];
    let mut u_rows = vec![DVector::zeros(2); n_steps];
    let mut v_rows = vec![DVector::zeros(2); n_steps];
    let mut tau_rows = vec![DVector::zeros(2); n_steps];
    k_mats[n_steps] = DMatrix::from_row_slice(
        2,
        2,
        &[
            spec.phi1[(0, 0)],
            -spec.phi2[(0, 0)],
            spec.phi2[(0, 0)],
            0.0,
        ],
    );
    for i in (0..n_steps).rev() {
        let t = i as f64 * dt;
        let a = spec.a.at(t)[(0, 0)];
        let c = spec.c.at(t)[(0, 0)];
        let b1 = spec.b1.at(t)[(0, 0)];
        let d1 = spec.d1.at(t)[(0, 0)];
        let b2 = spec.b2.at(t)[(0, 0)];
        let d2 = spec.d2.at(t)[(0, 0)];
        let r1 = spec.r1.at(t)[(0, 0)];
        let r2 = spec.r2.at(t)[(0, 0)];
        let q1 = spec.q1.at(t)[(0, 0)];
        let q2 = spec.q2.at(t)[(0, 0)];
        let kp = &k_mats[i + 1];

        // within-layer fixed point in the control rows and one-step maps
        let mut g1 = if i + 1 < n_steps {
            u_rows[i + 1].clone()
        } else {
            DVector::zeros(2)
        };
        let mut g2 = if i + 1 < n_steps {
            v_rows[i + 1].clone()
        } else {
            DVector::zeros(2)
        };
        let mut m_bar = DMatrix::identity(2, 2);
        let mut s_mat = DMatrix::zeros(2, 2);
        for _ in 0..200 {
            let x_drift = DVector::from_row_slice(&[a, 0.0]) + &g1 * b1 + &g2 * b2;
            let x_diff = DVector::from_row_slice(&[c, 0.0]) + &g1 * d1 + &g2 * d2;
            let p1_row = kp.row(0).transpose();
            let p1_bar = m_bar.transpose() * &p1_row;
            let p1_int = s_mat.transpose() * &p1_row;
            let tau = &p1_bar * b2 + &p1_int * d2;
            let k_drift = DVector::from_row_slice(&[0.0, a]) + &tau * (b2 / r2);
            let k_diff = DVector::from_row_slice(&[0.0, c]) + &tau * (d2 / r2);
            let mut m_new = DMatrix::zeros(2, 2);
            m_new
                .row_mut(0)
                .copy_from(&(DVector::from_row_slice(&[1.0, 0.0]) + &x_drift * dt).transpose());
            m_new
                .row_mut(1)
                .copy_from(&(DVector::from_row_slice(&[0.0, 1.0]) + &k_drift * dt).transpose());
            let mut s_new = DMatrix::zeros(2, 2);
            s_new.row_mut(0).copy_from(&x_diff.transpose());
            s_new.row_mut(1).copy_from(&k_diff.transpose());
            let pred = kp * &m_new;
            let int = kp * &s_new;
            let g1_new = -(pred.row(0).transpose() * b1 + int.row(0).transpose() * d1) / r1;
            let g2_new = -(pred.row(1).transpose() * b2 + int.row(1).transpose() * d2) / r2;
            let shift = (&g1_new - &g1)
                .amax()
                .max((&g2_new - &g2).amax())
                .max((&m_new - &m_bar).amax())
                .max((&s_new - &s_mat).amax());
            g1 = g1_new;
            g2 = g2_new;
            m_bar = m_new;
            s_mat = s_new;
            if shift < 1e-15 {
                break;
            }
        }
        // backward rows
        let pred = kp * &m_bar;
        let int = kp * &s_mat;
        let mut k_new = DMatrix::zeros(2, 2);
        let row1 = pred.row(0).transpose() * (1.0 + a * dt)
            + int.row(0).transpose() * (c * dt)
            + DVector::from_row_slice(&[q1 * dt, -q2 * dt]);
        let row2 = pred.row(1).transpose() * (1.0 + a * dt)
            + int.row(1).transpose() * (c * dt)
            + DVector::from_row_slice(&[q2 * dt, 0.0]);
        k_new.row_mut(0).copy_from(&row1.transpose());
        k_new.row_mut(1).copy_from(&row2.transpose());
        let p1_row = kp.row(0).transpose();
        tau_rows[i] = m_bar.transpose() * &p1_row * b2 + s_mat.transpose() * &p1_row * d2;
        u_rows[i] = g1;
        v_rows[i] = g2;
        k_mats[i] = k_new;
    }
    let times = (0..=n_steps).map(|i| i as f64 * dt).collect();
    Ok(LeaderGains {
        times,
        k_mats,
        u_rows,
        v_rows,
        tau_rows,
    })
}
