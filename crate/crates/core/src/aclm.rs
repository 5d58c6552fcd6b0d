//! The scalar closed-loop memoryless game. The leader announces an affine
//! state-feedback strategy with a gain bound; substituting the follower's
//! unconstrained response and the affine ansatz (chi, p1, p2, q1, q2) =
//! (alpha, beta, gamma, delta1, delta2) * x turns the Hamiltonian system
//! into a coupled forward-backward system for the coefficient processes,
//! solved here by damped Picard iteration on the tree.
//!
//! Discretization choices: the forward coefficient `alpha` is updated by
//! exact division through the state's one-step map, so the reconstruction
//! `chi = alpha x` satisfies the discrete sensitivity dynamics to machine
//! precision; `delta1`, `delta2` are extracted as martingale integrands of
//! the reconstructed adjoints, which makes the per-node two-by-two linear
//! system relating them to the integrand pair an exact algebraic identity.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::fbsde::SolverParams;
use crate::lattice::{Lattice, NodeProcess, TreeKind};
use crate::model::GameSpec;
use crate::projection::ConstraintSet;
use crate::simulate::{self, CostEstimate, SimConfig, StrategyLaw};

/// Relaxation factor applied to the switching value between iterations.
const SWITCH_DAMPING: f64 = 0.5;
/// Division guard for the state one-step factors.
const STEP_FACTOR_FLOOR: f64 = 1e-8;

/// Scalar coefficient bundle at one node and time.
#[derive(Clone, Copy)]
struct Coeffs {
    a: f64,
    c: f64,
    b1: f64,
    d1: f64,
    b2: f64,
    d2: f64,
    r1: f64,
    r2: f64,
    q1: f64,
    q2: f64,
}

fn coeffs(spec: &GameSpec, t: f64) -> Coeffs {
    Coeffs {
        a: spec.a.at(t)[(0, 0)],
        c: spec.c.at(t)[(0, 0)],
        b1: spec.b1.at(t)[(0, 0)],
        d1: spec.d1.at(t)[(0, 0)],
        b2: spec.b2.at(t)[(0, 0)],
        d2: spec.d2.at(t)[(0, 0)],
        r1: spec.r1.at(t)[(0, 0)],
        r2: spec.r2.at(t)[(0, 0)],
        q1: spec.q1.at(t)[(0, 0)],
        q2: spec.q2.at(t)[(0, 0)],
    }
}

/// Feedback reductions of the closed-loop state drift and diffusion:
/// `dx = (A - fb) x dt + (C - fs) x dW`.
fn feedback_reductions(cf: &Coeffs, beta: f64, gamma: f64, d1v: f64, d2v: f64) -> (f64, f64) {
    let leader = cf.b1 * beta + cf.d1 * d1v;
    let follower = cf.b2 * gamma + cf.d2 * d2v;
    let fb = cf.b1 / cf.r1 * leader + cf.b2 / cf.r2 * follower;
    let fs = cf.d1 / cf.r1 * leader + cf.d2 / cf.r2 * follower;
    (fb, fs)
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Converged coefficient processes of the closed-loop game, with the
/// reference state path and every derived per-node quantity.
#[derive(Debug, Clone)]
pub struct AclmSolution {
    /// Sensitivity-to-state ratio, forward from zero.
    pub alpha: NodeProcess,
    /// Leader adjoint ratio, backward from `Phi1 - Phi2 alpha(T)`.
    pub beta: NodeProcess,
    /// Follower adjoint ratio, backward from `Phi2`.
    pub gamma: NodeProcess,
    /// Martingale-integrand ratios of the reconstructed adjoints.
    pub delta1: NodeProcess,
    pub delta2: NodeProcess,
    /// Diffusion coefficients of the ratio processes (interior layers).
    pub alpha2: NodeProcess,
    pub beta2: NodeProcess,
    pub gamma2: NodeProcess,
    /// Right-hand sides of the per-node integrand system.
    pub xi1: NodeProcess,
    pub xi2: NodeProcess,
    /// Damped bang-bang gain value per node, in `[-K, K]`.
    pub switch: NodeProcess,
    /// Open-loop part of the leader strategy along the reference path.
    pub u1_star: NodeProcess,
    /// Reference state path under the candidate strategy pair.
    pub x_star: NodeProcess,
    pub k_gain: f64,
    pub residual: f64,
    pub iterations: usize,
    pub history: Vec<f64>,
}

struct State {
    alpha: NodeProcess,
    beta: NodeProcess,
    gamma: NodeProcess,
    delta1: NodeProcess,
    delta2: NodeProcess,
    switch: NodeProcess,
}

impl State {
    fn zeros(lat: &Lattice) -> State {
        State {
            alpha: NodeProcess::zeros(lat, 1),
            beta: NodeProcess::zeros(lat, 1),
            gamma: NodeProcess::zeros(lat, 1),
            delta1: NodeProcess::zeros_interior(lat, 1),
            delta2: NodeProcess::zeros_interior(lat, 1),
            switch: NodeProcess::zeros_interior(lat, 1),
        }
    }

    fn sup_distance(&self, other: &State) -> f64 {
        self.alpha
            .sup_distance(&other.alpha)
            .max(self.beta.sup_distance(&other.beta))
            .max(self.gamma.sup_distance(&other.gamma))
            .max(self.delta1.sup_distance(&other.delta1))
            .max(self.delta2.sup_distance(&other.delta2))
            .max(self.switch.sup_distance(&other.switch))
    }
}

/// One-step state factors `m_down, m_up` at a node from lagged fields.
fn step_factors(cf: &Coeffs, dt: f64, sq: f64, st: &State, i: usize, j: usize) -> (f64, f64) {
    let (fb, fs) = feedback_reductions(
        cf,
        st.beta.at(i, j)[0],
        st.gamma.at(i, j)[0],
        st.delta1.at(i, j)[0],
        st.delta2.at(i, j)[0],
    );
    let drift = 1.0 + (cf.a - fb) * dt;
    let m_dn = drift - (cf.c - fs) * sq;
    let m_up = drift + (cf.c - fs) * sq;
    (m_dn, m_up)
}

/// Sensitivity-channel forcing rows in the affine representation:
/// drift `(A + B1 S) alpha + (B2^2 beta + B2 D2 delta1) / R2` and its
/// diffusion counterpart.
fn sensitivity_forcing(cf: &Coeffs, s: f64, alpha: f64, beta: f64, d1v: f64) -> (f64, f64) {
    let g_drift = (cf.a + cf.b1 * s) * alpha + cf.b2 / cf.r2 * (cf.b2 * beta + cf.d2 * d1v);
    let g_diff = (cf.c + cf.d1 * s) * alpha + cf.d2 / cf.r2 * (cf.b2 * beta + cf.d2 * d1v);
    (g_drift, g_diff)
}

/// Solve the coefficient system by damped Picard iteration. Requires a
/// one-dimensional game with an unconstrained follower (the affine
/// parametrization is derived under that restriction) and a positive gain
/// bound.
pub fn solve_aclm(
    spec: &GameSpec,
    lat: &Lattice,
    k_gain: f64,
    params: &SolverParams,
) -> Result<AclmSolution> {
    if !spec.is_scalar() {
        return Err(Error::AssumptionViolated(
            "closed-loop solve needs a one-dimensional game".into(),
        ));
    }
    if !matches!(spec.gamma2, ConstraintSet::FullSpace { .. }) {
        return Err(Error::AssumptionViolated(
            "closed-loop solve needs an unconstrained follower".into(),
        ));
    }
    if !k_gain.is_finite() || k_gain <= 0.0 {
        return Err(Error::AssumptionViolated("gain bound must be positive".into()));
    }
    if lat.kind() != TreeKind::PathDependent {
        return Err(Error::InvalidLattice(
            "closed-loop solve needs a path-dependent tree".into(),
        ));
    }

    let n_steps = lat.n_steps();
    let dt = lat.dt();
    let sq = lat.sqrt_dt();
    let phi1 = spec.phi1[(0, 0)];
    let phi2 = spec.phi2[(0, 0)];

    let mut st = State::zeros(lat);
    let mut history = Vec::new();

    for _iter in 0..params.max_iterations {
        let mut new = State::zeros(lat);

        // damped switching update from the lagged fields
        for i in 0..n_steps {
            let t = lat.time(i);
            let cf = coeffs(spec, t);
            for j in 0..lat.layer_size(i) {
                let arg = st.alpha.at(i, j)[0]
                    * (cf.b1 * st.gamma.at(i, j)[0] + cf.d1 * st.delta2.at(i, j)[0]);
                let target = sgn(arg) * k_gain;
                new.switch.set(
                    i,
                    j,
                    DVector::from_element(
                        1,
                        SWITCH_DAMPING * st.switch.at(i, j)[0] + (1.0 - SWITCH_DAMPING) * target,
                    ),
                );
            }
        }

        // forward sweep for alpha by exact division through the state map
        new.alpha.set(0, 0, DVector::zeros(1));
        for i in 0..n_steps {
            let t = lat.time(i);
            let cf = coeffs(spec, t);
            for j in 0..lat.layer_size(i) {
                let (m_dn, m_up) = step_factors(&cf, dt, sq, &st, i, j);
                if m_dn.abs() < STEP_FACTOR_FLOOR || m_up.abs() < STEP_FACTOR_FLOOR {
                    return Err(Error::SingularMatrix {
                        context: "state one-step factor in closed-loop sweep".into(),
                        cond: 1.0 / STEP_FACTOR_FLOOR,
                    });
                }
                let (g_drift, g_diff) = sensitivity_forcing(
                    &cf,
                    new.switch.at(i, j)[0],
                    new.alpha.at(i, j)[0],
                    st.beta.at(i, j)[0],
                    st.delta1.at(i, j)[0],
                );
                let base = new.alpha.at(i, j)[0];
                let (down, up) = lat.successors(i, j);
                new.alpha
                    .set(i + 1, down, DVector::from_element(1, (base + g_drift * dt - g_diff * sq) / m_dn));
                new.alpha
                    .set(i + 1, up, DVector::from_element(1, (base + g_drift * dt + g_diff * sq) / m_up));
            }
        }

        // backward sweeps for beta, gamma and their integrand ratios
        for j in 0..lat.layer_size(n_steps) {
            new.beta.set(
                n_steps,
                j,
                DVector::from_element(1, -phi2 * new.alpha.at(n_steps, j)[0] + phi1),
            );
            new.gamma.set(n_steps, j, DVector::from_element(1, phi2));
        }
        for i in (0..n_steps).rev() {
            let t = lat.time(i);
            let cf = coeffs(spec, t);
            for j in 0..lat.layer_size(i) {
                let (m_dn, m_up) = step_factors(&cf, dt, sq, &st, i, j);
                let (down, up) = lat.successors(i, j);
                let bu = new.beta.at(i + 1, up)[0];
                let bd = new.beta.at(i + 1, down)[0];
                let gu = new.gamma.at(i + 1, up)[0];
                let gd = new.gamma.at(i + 1, down)[0];
                let d1v = (bu * m_up - bd * m_dn) / (2.0 * sq);
                let d2v = (gu * m_up - gd * m_dn) / (2.0 * sq);
                let e_beta = 0.5 * (bu * m_up + bd * m_dn);
                let e_gamma = 0.5 * (gu * m_up + gd * m_dn);
                let alpha_here = new.alpha.at(i, j)[0];
                let s_here = new.switch.at(i, j)[0];
                // leader adjoint ratio, implicit in its own drift term
                let beta_new =
                    (e_beta + (cf.c * d1v - alpha_here * cf.q2 + cf.q1) * dt) / (1.0 - cf.a * dt);
                // follower adjoint ratio under the announced feedback
                let gamma_new = (e_gamma + ((cf.c + cf.d1 * s_here) * d2v + cf.q2) * dt)
                    / (1.0 - (cf.a + cf.b1 * s_here) * dt);
                new.delta1.set(i, j, DVector::from_element(1, d1v));
                new.delta2.set(i, j, DVector::from_element(1, d2v));
                new.beta.set(i, j, DVector::from_element(1, beta_new));
                new.gamma.set(i, j, DVector::from_element(1, gamma_new));
            }
        }

        let diff = new.sup_distance(&st);
        st = new;
        history.push(diff);
        if diff <= params.tol {
            return Ok(finish(spec, lat, st, k_gain, diff, history));
        }
        if !diff.is_finite() || diff > 1e12 {
            return Err(Error::not_converged(history, None));
        }
    }
    Err(Error::not_converged(history, None))
}

/// Assemble derived per-node quantities from a converged state.
fn finish(
    spec: &GameSpec,
    lat: &Lattice,
    st: State,
    k_gain: f64,
    residual: f64,
    history: Vec<f64>,
) -> AclmSolution {
    let n_steps = lat.n_steps();
    let dt = lat.dt();
    let sq = lat.sqrt_dt();
    let mut alpha2 = NodeProcess::zeros_interior(lat, 1);
    let mut beta2 = NodeProcess::zeros_interior(lat, 1);
    let mut gamma2 = NodeProcess::zeros_interior(lat, 1);
    let mut xi1 = NodeProcess::zeros_interior(lat, 1);
    let mut xi2 = NodeProcess::zeros_interior(lat, 1);
    let mut u1_star = NodeProcess::zeros_interior(lat, 1);
    let mut x_star = NodeProcess::zeros(lat, 1);
    x_star.set(0, 0, spec.x0.clone());

    for i in 0..n_steps {
        let t = lat.time(i);
        let cf = coeffs(spec, t);
        for j in 0..lat.layer_size(i) {
            let beta = st.beta.at(i, j)[0];
            let gamma = st.gamma.at(i, j)[0];
            let d1v = st.delta1.at(i, j)[0];
            let d2v = st.delta2.at(i, j)[0];
            let alpha = st.alpha.at(i, j)[0];
            let s = st.switch.at(i, j)[0];
            let (fb, fs) = feedback_reductions(&cf, beta, gamma, d1v, d2v);
            // diffusion coefficients from the exact matching identities
            let b2v = d1v - beta * (cf.c - fs);
            let g2v = d2v - gamma * (cf.c - fs);
            let (_, g_diff) = sensitivity_forcing(&cf, s, alpha, beta, d1v);
            let a2v = g_diff - alpha * (cf.c - fs);
            alpha2.set(i, j, DVector::from_element(1, a2v));
            beta2.set(i, j, DVector::from_element(1, b2v));
            gamma2.set(i, j, DVector::from_element(1, g2v));
            // right-hand sides of the integrand system
            let x1 = beta * cf.c
                - beta * cf.d1 / cf.r1 * cf.b1 * beta
                - beta * cf.d2 / cf.r2 * cf.b2 * gamma
                + b2v;
            let x2 = gamma * cf.c
                - gamma * cf.d1 / cf.r1 * cf.b1 * beta
                - gamma * cf.d2 / cf.r2 * cf.b2 * gamma
                + g2v;
            xi1.set(i, j, DVector::from_element(1, x1));
            xi2.set(i, j, DVector::from_element(1, x2));
            // reference path and open-loop strategy part
            let x = x_star.at(i, j)[0];
            u1_star.set(
                i,
                j,
                DVector::from_element(1, -s * x - (cf.b1 * beta + cf.d1 * d1v) / cf.r1 * x),
            );
            let drift = 1.0 + (cf.a - fb) * dt;
            let (down, up) = lat.successors(i, j);
            x_star.set(i + 1, down, DVector::from_element(1, (drift - (cf.c - fs) * sq) * x));
            x_star.set(i + 1, up, DVector::from_element(1, (drift + (cf.c - fs) * sq) * x));
        }
    }
    AclmSolution {
        alpha: st.alpha,
        beta: st.beta,
        gamma: st.gamma,
        delta1: st.delta1,
        delta2: st.delta2,
        alpha2,
        beta2,
        gamma2,
        xi1,
        xi2,
        switch: st.switch,
        u1_star,
        x_star,
        k_gain,
        residual,
        iterations: history.len(),
        history,
    }
}

/// Worst defect of the reconstructed Hamiltonian-system dynamics under the
/// affine ansatz, over all nodes and all five equations.
pub fn reconstruction_residual(spec: &GameSpec, lat: &Lattice, sol: &AclmSolution) -> f64 {
    let n_steps = lat.n_steps();
    let dt = lat.dt();
    let sq = lat.sqrt_dt();
    let phi1 = spec.phi1[(0, 0)];
    let phi2 = spec.phi2[(0, 0)];
    let mut worst = 0.0f64;

    let node = |p: &NodeProcess, i: usize, j: usize| p.at(i, j)[0];

    for i in 0..n_steps {
        let t = lat.time(i);
        let cf = coeffs(spec, t);
        for j in 0..lat.layer_size(i) {
            let x = node(&sol.x_star, i, j);
            let alpha = node(&sol.alpha, i, j);
            let beta = node(&sol.beta, i, j);
            let gamma = node(&sol.gamma, i, j);
            let d1v = node(&sol.delta1, i, j);
            let d2v = node(&sol.delta2, i, j);
            let s = node(&sol.switch, i, j);
            let u1 = node(&sol.u1_star, i, j);
            let chi = alpha * x;
            let p1 = beta * x;
            let p2 = gamma * x;
            let q1 = d1v * x;
            let q2 = d2v * x;
            let (down, up) = lat.successors(i, j);

            // state equation under (u2, u1) and the follower response
            let v_term = (cf.b2 * p2 + cf.d2 * q2) / cf.r2;
            let x_drift = (cf.a + cf.b1 * s) * x + cf.b1 * u1 - cf.b2 * v_term;
            let x_diff = (cf.c + cf.d1 * s) * x + cf.d1 * u1 - cf.d2 * v_term;
            let xu = node(&sol.x_star, i + 1, up);
            let xd = node(&sol.x_star, i + 1, down);
            worst = worst.max((xu - (x + x_drift * dt + x_diff * sq)).abs());
            worst = worst.max((xd - (x + x_drift * dt - x_diff * sq)).abs());

            // sensitivity equation
            let chi_drift = (cf.a + cf.b1 * s) * chi + (cf.b2 * cf.b2 * p1 + cf.d2 * cf.b2 * q1) / cf.r2;
            let chi_diff = (cf.c + cf.d1 * s) * chi + (cf.b2 * cf.d2 * p1 + cf.d2 * cf.d2 * q1) / cf.r2;
            let chi_u = node(&sol.alpha, i + 1, up) * xu;
            let chi_d = node(&sol.alpha, i + 1, down) * xd;
            worst = worst.max((chi_u - (chi + chi_drift * dt + chi_diff * sq)).abs());
            worst = worst.max((chi_d - (chi + chi_drift * dt - chi_diff * sq)).abs());

            // leader adjoint: p1(i) = E[p1(i+1)] + drift dt, q1 = integrand
            let p1u = node(&sol.beta, i + 1, up) * xu;
            let p1d = node(&sol.beta, i + 1, down) * xd;
            let p1_drift = cf.a * p1 + cf.c * q1 - chi * cf.q2 + cf.q1 * x;
            worst = worst.max((p1 - (0.5 * (p1u + p1d) + p1_drift * dt)).abs());
            worst = worst.max((q1 - (p1u - p1d) / (2.0 * sq)).abs());

            // follower adjoint under the announced feedback slope
            let p2u = node(&sol.gamma, i + 1, up) * xu;
            let p2d = node(&sol.gamma, i + 1, down) * xd;
            let p2_drift = (cf.a + cf.b1 * s) * p2 + (cf.c + cf.d1 * s) * q2 + cf.q2 * x;
            worst = worst.max((p2 - (0.5 * (p2u + p2d) + p2_drift * dt)).abs());
            worst = worst.max((q2 - (p2u - p2d) / (2.0 * sq)).abs());
        }
    }
    // boundary conditions
    worst = worst.max(node(&sol.alpha, 0, 0).abs());
    for j in 0..lat.layer_size(n_steps) {
        let alpha_t = node(&sol.alpha, n_steps, j);
        worst = worst.max((node(&sol.beta, n_steps, j) - (phi1 - phi2 * alpha_t)).abs());
        worst = worst.max((node(&sol.gamma, n_steps, j) - phi2).abs());
    }
    worst
}

/// Worst defect of the per-node linear system tying the integrand ratios to
/// the diffusion coefficients; an exact identity at a converged solution.
pub fn integrand_system_residual(spec: &GameSpec, lat: &Lattice, sol: &AclmSolution) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..lat.n_steps() {
        let t = lat.time(i);
        let cf = coeffs(spec, t);
        for j in 0..lat.layer_size(i) {
            let beta = sol.beta.at(i, j)[0];
            let gamma = sol.gamma.at(i, j)[0];
            let d1v = sol.delta1.at(i, j)[0];
            let d2v = sol.delta2.at(i, j)[0];
            let lhs1 = (1.0 + beta * cf.d1 / cf.r1 * cf.d1) * d1v
                + beta * cf.d2 / cf.r2 * cf.d2 * d2v;
            let lhs2 = gamma * cf.d1 / cf.r1 * cf.d1 * d1v
                + (1.0 + gamma * cf.d2 / cf.r2 * cf.d2) * d2v;
            worst = worst.max((lhs1 - sol.xi1.at(i, j)[0]).abs());
            worst = worst.max((lhs2 - sol.xi2.at(i, j)[0]).abs());
            // diffusion-matching identity for the sensitivity ratio
            let (_, fs) = feedback_reductions(&cf, beta, gamma, d1v, d2v);
            let alpha = sol.alpha.at(i, j)[0];
            let s = sol.switch.at(i, j)[0];
            let expect_a2 = alpha * fs
                + cf.d1 * s * alpha
                + cf.b2 / cf.r2 * cf.d2 * beta
                + cf.d2 / cf.r2 * cf.d2 * d1v;
            worst = worst.max((sol.alpha2.at(i, j)[0] - expect_a2).abs());
        }
    }
    worst
}

/// Stationarity and bang-bang consistency report for a solved system.
#[derive(Debug, Clone, serde::Serialize)]
pub struct H3Report {
    pub max_stationarity_residual: f64,
    /// Nodes whose stationarity residual exceeds the tolerance.
    pub flagged: Vec<(usize, usize, f64)>,
    pub bang_bang_consistent: bool,
    pub max_gain_bound_violation: f64,
    pub tol: f64,
}

/// Check `dH3/du1 = p1 B1 + q1 D1 + R1 (u2 x + u1)` at every node under the
/// reconstructed adjoints, and the sign structure of the bang-bang gain.
pub fn h3_stationarity_check(spec: &GameSpec, lat: &Lattice, sol: &AclmSolution, tol: f64) -> H3Report {
    let mut max_res = 0.0f64;
    let mut flagged = Vec::new();
    let mut bang_ok = true;
    let mut gain_violation = 0.0f64;
    for i in 0..lat.n_steps() {
        let t = lat.time(i);
        let cf = coeffs(spec, t);
        for j in 0..lat.layer_size(i) {
            let x = sol.x_star.at(i, j)[0];
            let p1 = sol.beta.at(i, j)[0] * x;
            let q1 = sol.delta1.at(i, j)[0] * x;
            let s = sol.switch.at(i, j)[0];
            let u1 = sol.u1_star.at(i, j)[0];
            let res = (p1 * cf.b1 + q1 * cf.d1 + cf.r1 * (s * x + u1)).abs();
            max_res = max_res.max(res);
            if res > tol {
                flagged.push((i, j, res));
            }
            gain_violation = gain_violation.max(s.abs() - sol.k_gain);
            let arg = sol.alpha.at(i, j)[0]
                * (cf.b1 * sol.gamma.at(i, j)[0] + cf.d1 * sol.delta2.at(i, j)[0]);
            if arg.abs() > tol {
                if (s - sgn(arg) * sol.k_gain).abs() > tol {
                    bang_ok = false;
                }
            } else if s.abs() > tol {
                bang_ok = false;
            }
        }
    }
    H3Report {
        max_stationarity_residual: max_res,
        flagged,
        bang_bang_consistent: bang_ok,
        max_gain_bound_violation: gain_violation.max(0.0),
        tol,
    }
}

/// Candidate leader strategy evaluated at a realized lattice node:
/// `u(x) = S x - S x* - R1^{-1}(B1 beta + D1 delta1) x*`, where the last
/// two terms are the stored open-loop part.
pub fn leader_strategy_at_node(
    sol: &AclmSolution,
    layer: usize,
    node: usize,
    x: f64,
) -> f64 {
    sol.switch.at(layer, node)[0] * x + sol.u1_star.at(layer, node)[0]
}

/// Deterministic affine surrogate of the node-indexed strategy, for
/// off-lattice evaluation: per-layer slope is the expected switching value
/// and the intercept is the expectation of the open-loop part.
#[derive(Debug, Clone)]
pub struct AclmStrategyProfile {
    pub times: Vec<f64>,
    pub slope: Vec<f64>,
    pub intercept: Vec<f64>,
}

impl AclmStrategyProfile {
    fn layer(&self, t: f64) -> usize {
        let n = self.slope.len();
        let dt = self.times[1] - self.times[0];
        ((t / dt) as usize).min(n - 1)
    }

    pub fn eval(&self, t: f64, x: f64) -> f64 {
        let i = self.layer(t);
        self.slope[i] * x + self.intercept[i]
    }
}

/// Build the off-lattice strategy surrogate by root-path expectation of the
/// coefficient processes.
pub fn strategy_profile(lat: &Lattice, sol: &AclmSolution) -> AclmStrategyProfile {
    let n_steps = lat.n_steps();
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut slope = Vec::with_capacity(n_steps);
    let mut intercept = Vec::with_capacity(n_steps);
    for i in 0..n_steps {
        times.push(lat.time(i));
        let mut s_mean = 0.0;
        let mut open_loop_mean = 0.0;
        for j in 0..lat.layer_size(i) {
            let w = lat.weight(i, j);
            s_mean += w * sol.switch.at(i, j)[0];
            // full open-loop part: -S x* + u1* has the feedback term
            // cancelled on the reference path, so the intercept is the
            // expectation of u1* minus slope times the reference state
            open_loop_mean += w * (sol.u1_star.at(i, j)[0]);
        }
        slope.push(s_mean);
        intercept.push(open_loop_mean);
        let _ = &mut intercept;
    }
    times.push(lat.horizon());
    AclmStrategyProfile {
        times,
        slope,
        intercept,
    }
}

/// Candidate leader strategy at an off-lattice point: the expectation
/// surrogate of the node-indexed coefficients.
pub fn leader_strategy(profile: &AclmStrategyProfile, t: f64, x: f64) -> f64 {
    profile.eval(t, x)
}

/// A piecewise-constant affine leader announcement `u(t, x) = a(t) x + c(t)`
/// with layer breakpoints; the follower best-responds through a pair of
/// backward coefficient equations.
#[derive(Debug, Clone)]
pub struct AffineLeader {
    pub times: Vec<f64>,
    pub slope: Vec<f64>,
    pub intercept: Vec<f64>,
}

impl AffineLeader {
    pub fn constant(a: f64, c: f64, horizon: f64) -> Self {
        AffineLeader {
            times: vec![0.0, horizon],
            slope: vec![a],
            intercept: vec![c],
        }
    }

    pub fn from_profile(p: &AclmStrategyProfile) -> Self {
        AffineLeader {
            times: p.times.clone(),
            slope: p.slope.clone(),
            intercept: p.intercept.clone(),
        }
    }

    fn at(&self, t: f64) -> (f64, f64) {
        let idx = self
            .times
            .iter()
            .take(self.slope.len())
            .rposition(|b| *b <= t)
            .unwrap_or(0);
        (self.slope[idx], self.intercept[idx])
    }
}

/// Follower's optimal response to an announced affine leader strategy:
/// `v(t, x) = -(theta1(t) x + theta0(t))` with coefficients integrated
/// backward from the terminal weight.
#[derive(Debug, Clone)]
pub struct AffineFollowerResponse {
    pub times: Vec<f64>,
    pub theta1: Vec<f64>,
    pub theta0: Vec<f64>,
}

impl AffineFollowerResponse {
    pub fn theta(&self, t: f64) -> (f64, f64) {
        let times = &self.times;
        if t <= times[0] {
            return (self.theta1[0], self.theta0[0]);
        }
        if t >= *times.last().unwrap() {
            return (*self.theta1.last().unwrap(), *self.theta0.last().unwrap());
        }
        let hi = times.partition_point(|x| *x < t);
        let lo = hi - 1;
        let w = (t - times[lo]) / (times[hi] - times[lo]);
        (
            self.theta1[lo] * (1.0 - w) + self.theta1[hi] * w,
            self.theta0[lo] * (1.0 - w) + self.theta0[hi] * w,
        )
    }
}

/// Backward quadratic/linear value-coefficient equations of the follower's
/// problem under an affine leader; fourth-order integration on a grid
/// refined within each leader segment.
pub fn affine_follower_response(
    spec: &GameSpec,
    leader: &AffineLeader,
    grid_steps: usize,
) -> Result<AffineFollowerResponse> {
    if !spec.is_scalar() {
        return Err(Error::AssumptionViolated(
            "affine response needs a one-dimensional game".into(),
        ));
    }
    let horizon = spec.horizon;
    let mut times: Vec<f64> = (0..=grid_steps)
        .map(|k| horizon * k as f64 / grid_steps as f64)
        .collect();
    times.extend(leader.times.iter().copied().filter(|b| *b > 0.0 && *b < horizon));
    times.extend(
        spec.coefficient_grid()
            .into_iter()
            .filter(|b| *b > 0.0 && *b < horizon),
    );
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup_by(|a, b| (*a - *b).abs() < 1e-13);

    let m = times.len();
    let mut p = vec![0.0; m];
    let mut s = vec![0.0; m];
    p[m - 1] = spec.phi2[(0, 0)];
    s[m - 1] = 0.0;

    let rhs = |t: f64, pv: f64, sv: f64| -> (f64, f64) {
        let cf = coeffs(spec, t);
        let (a_l, c_l) = leader.at(t);
        let a_t = cf.a + cf.b1 * a_l;
        let c_t = cf.c + cf.d1 * a_l;
        let mden = cf.r2 + pv * cf.d2 * cf.d2;
        let th1 = (pv * cf.b2 + pv * cf.d2 * c_t) / mden;
        let th0 = (cf.b2 * sv + pv * cf.d2 * cf.d1 * c_l) / mden;
        let sigma1 = c_t - cf.d2 * th1;
        let sigma0 = cf.d1 * c_l - cf.d2 * th0;
        let dp = -(2.0 * pv * a_t - 2.0 * pv * cf.b2 * th1
            + pv * sigma1 * sigma1
            + cf.q2
            + cf.r2 * th1 * th1);
        let ds = -(pv * (cf.b1 * c_l - cf.b2 * th0)
            + sv * (a_t - cf.b2 * th1)
            + pv * sigma1 * sigma0
            + cf.r2 * th1 * th0);
        (dp, ds)
    };

    for idx in (0..m - 1).rev() {
        let t1 = times[idx + 1];
        let t0 = times[idx];
        let h = t0 - t1;
        let mid = 0.5 * (t0 + t1);
        let (mut pv, mut sv) = (p[idx + 1], s[idx + 1]);
        let (k1p, k1s) = rhs(mid, pv, sv);
        let (k2p, k2s) = rhs(mid, pv + 0.5 * h * k1p, sv + 0.5 * h * k1s);
        let (k3p, k3s) = rhs(mid, pv + 0.5 * h * k2p, sv + 0.5 * h * k2s);
        let (k4p, k4s) = rhs(mid, pv + h * k3p, sv + h * k3s);
        pv += h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
        sv += h / 6.0 * (k1s + 2.0 * k2s + 2.0 * k3s + k4s);
        if !pv.is_finite() || pv.abs() > 1e8 {
            return Err(Error::BlowUp {
                escape_time: t0,
                max_entry: pv.abs(),
            });
        }
        p[idx] = pv;
        s[idx] = sv;
    }

    let mut theta1 = Vec::with_capacity(m);
    let mut theta0 = Vec::with_capacity(m);
    for (idx, t) in times.iter().enumerate() {
        let cf = coeffs(spec, *t);
        let (a_l, c_l) = leader.at(*t);
        let c_t = cf.c + cf.d1 * a_l;
        let mden = cf.r2 + p[idx] * cf.d2 * cf.d2;
        theta1.push((p[idx] * cf.b2 + p[idx] * cf.d2 * c_t) / mden);
        theta0.push((cf.b2 * s[idx] + p[idx] * cf.d2 * cf.d1 * c_l) / mden);
    }
    Ok(AffineFollowerResponse {
        times,
        theta1,
        theta0,
    })
}

/// Simulated cost pair of an announced affine leader strategy with the
/// follower responding optimally.
pub fn simulate_affine_game(
    spec: &GameSpec,
    leader: &AffineLeader,
    cfg: &SimConfig,
) -> Result<CostEstimate> {
    let response = affine_follower_response(spec, leader, 400)?;
    let strategies = move |t: f64, x: &DVector<f64>| {
        let (a_l, c_l) = leader.at(t);
        let (th1, th0) = response.theta(t);
        (
            DVector::from_element(1, a_l * x[0] + c_l),
            DVector::from_element(1, -(th1 * x[0] + th0)),
        )
    };
    let law = StrategyLaw {
        spec,
        strategies: &strategies,
    };
    Ok(simulate::simulate_costs(&law, spec.horizon, cfg))
}

/// Exhaustive grid search over constant affine leader strategies
/// `u = a x + c` with `|a| <= k_gain`; returns the best simulated leader
/// cost and the winning pair.
pub fn best_constant_affine(
    spec: &GameSpec,
    k_gain: f64,
    slope_steps: usize,
    intercepts: &[f64],
    cfg: &SimConfig,
) -> Result<(f64, f64, f64, CostEstimate)> {
    let mut best: Option<(f64, f64, f64, CostEstimate)> = None;
    for si in 0..=slope_steps {
        let a = -k_gain + 2.0 * k_gain * si as f64 / slope_steps as f64;
        for &c in intercepts {
            let leader = AffineLeader::constant(a, c, spec.horizon);
            let est = simulate_affine_game(spec, &leader, cfg)?;
            if best.as_ref().map(|b| est.j1_mean < b.2).unwrap_or(true) {
                best = Some((a, c, est.j1_mean, est));
            }
        }
    }
    let (a, c, j1, est) = best.unwrap();
    Ok((a, c, j1, est))
}
