//! Game instances: coefficient data, standing-assumption validation, and the
//! two control Hamiltonians of the linear-quadratic game.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::projection::ConstraintSet;

/// Default uniform-positivity floor for the control weights.
pub const DEFAULT_DELTA_R: f64 = 1e-6;
/// Symmetry tolerance for the state weights.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Eigenvalue floor for nonnegativity checks.
pub const PSD_TOL: f64 = -1e-10;

/// A piecewise-constant matrix map on [0, T]. Intervals are left-closed on a
/// shared breakpoint grid starting at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseMatrix {
    breaks: Vec<f64>,
    values: Vec<DMatrix<f64>>,
}

impl PiecewiseMatrix {
    pub fn constant(value: DMatrix<f64>) -> Self {
        PiecewiseMatrix {
            breaks: vec![0.0],
            values: vec![value],
        }
    }

    pub fn new(breaks: Vec<f64>, values: Vec<DMatrix<f64>>) -> Result<Self> {
        if breaks.is_empty() || breaks.len() != values.len() {
            return Err(Error::MalformedSpec(
                "piecewise map needs one matrix per breakpoint".into(),
            ));
        }
        if breaks[0] != 0.0 {
            return Err(Error::MalformedSpec(
                "first breakpoint must be t = 0".into(),
            ));
        }
        if breaks.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::MalformedSpec(
                "breakpoints must be strictly increasing".into(),
            ));
        }
        Ok(PiecewiseMatrix { breaks, values })
    }

    pub fn at(&self, t: f64) -> &DMatrix<f64> {
        let idx = self.breaks.iter().rposition(|b| *b <= t).unwrap_or(0);
        &self.values[idx]
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    pub fn values(&self) -> &[DMatrix<f64>] {
        &self.values
    }

    /// Re-express the map on a finer grid containing its own breakpoints.
    pub fn on_grid(&self, grid: &[f64]) -> PiecewiseMatrix {
        let values = grid.iter().map(|t| self.at(*t).clone()).collect();
        PiecewiseMatrix {
            breaks: grid.to_vec(),
            values,
        }
    }
}

/// Merge breakpoint grids of several maps into one sorted, deduplicated grid.
pub fn merged_grid(maps: &[&PiecewiseMatrix]) -> Vec<f64> {
    let mut grid: Vec<f64> = maps.iter().flat_map(|m| m.breaks.iter().copied()).collect();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
    grid
}

/// Complete description of one game instance: dynamics, costs, horizon,
/// initial state, and the two admissible control sets.
#[derive(Debug, Clone)]
pub struct GameSpec {
    pub n: usize,
    pub m1: usize,
    pub m2: usize,
    pub horizon: f64,
    pub x0: DVector<f64>,
    pub a: PiecewiseMatrix,
    pub c: PiecewiseMatrix,
    pub b1: PiecewiseMatrix,
    pub d1: PiecewiseMatrix,
    pub b2: PiecewiseMatrix,
    pub d2: PiecewiseMatrix,
    pub q1: PiecewiseMatrix,
    pub q2: PiecewiseMatrix,
    pub r1: PiecewiseMatrix,
    pub r2: PiecewiseMatrix,
    pub phi1: DMatrix<f64>,
    pub phi2: DMatrix<f64>,
    pub gamma1: ConstraintSet,
    pub gamma2: ConstraintSet,
    /// Uniform-positivity floor for R1, R2 used by `validate_spec`.
    pub delta_r: f64,
}

/// Outcome of one named validation check.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub residual: f64,
}

/// One entry per standing-assumption condition per breakpoint.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

impl ValidationReport {
    fn from_checks(checks: Vec<CheckResult>) -> Self {
        let passed = checks.iter().all(|c| c.passed);
        ValidationReport { checks, passed }
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl GameSpec {
    /// Is the instance one-dimensional in state and both controls?
    pub fn is_scalar(&self) -> bool {
        self.n == 1 && self.m1 == 1 && self.m2 == 1
    }

    pub fn unconstrained(&self) -> bool {
        matches!(self.gamma1, ConstraintSet::FullSpace { .. })
            && matches!(self.gamma2, ConstraintSet::FullSpace { .. })
    }

    /// Union of breakpoints across all ten coefficient maps.
    pub fn coefficient_grid(&self) -> Vec<f64> {
        merged_grid(&[
            &self.a, &self.c, &self.b1, &self.d1, &self.b2, &self.d2, &self.q1, &self.q2,
            &self.r1, &self.r2,
        ])
    }

    fn check_dims(&self) -> Result<()> {
        let dims = [
            ("A", &self.a, self.n, self.n),
            ("C", &self.c, self.n, self.n),
            ("B1", &self.b1, self.n, self.m1),
            ("D1", &self.d1, self.n, self.m1),
            ("B2", &self.b2, self.n, self.m2),
            ("D2", &self.d2, self.n, self.m2),
            ("Q1", &self.q1, self.n, self.n),
            ("Q2", &self.q2, self.n, self.n),
            ("R1", &self.r1, self.m1, self.m1),
            ("R2", &self.r2, self.m2, self.m2),
        ];
        for (name, map, rows, cols) in dims {
            for v in map.values() {
                if v.nrows() != rows || v.ncols() != cols {
                    return Err(Error::MalformedSpec(format!(
                        "{name} must be {rows}x{cols}, got {}x{}",
                        v.nrows(),
                        v.ncols()
                    )));
                }
                if v.iter().any(|e| !e.is_finite()) {
                    return Err(Error::MalformedSpec(format!("{name} has non-finite entries")));
                }
            }
        }
        for (name, m, rows) in [("Phi1", &self.phi1, self.n), ("Phi2", &self.phi2, self.n)] {
            if m.nrows() != rows || m.ncols() != rows {
                return Err(Error::MalformedSpec(format!(
                    "{name} must be {rows}x{rows}, got {}x{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        if self.x0.len() != self.n {
            return Err(Error::MalformedSpec(format!(
                "x0 must have length {}, got {}",
                self.n,
                self.x0.len()
            )));
        }
        if self.horizon <= 0.0 {
            return Err(Error::MalformedSpec("horizon must be positive".into()));
        }
        if self.gamma1.dim() != self.m1 || self.gamma2.dim() != self.m2 {
            return Err(Error::MalformedSpec(
                "constraint set dimensions must match control dimensions".into(),
            ));
        }
        Ok(())
    }
}

/// Check the standing assumptions: state weights symmetric nonnegative,
/// control weights symmetric and uniformly positive, terminal weights
/// symmetric nonnegative. Dimension mismatches abort with `MalformedSpec`;
/// assumption violations are reported entry by entry.
pub fn validate_spec(spec: &GameSpec) -> Result<ValidationReport> {
    spec.check_dims()?;
    let mut checks = Vec::new();

    let mut psd_checks = |name: &str, map: &PiecewiseMatrix| {
        for (k, v) in map.values().iter().enumerate() {
            let t = map.breaks()[k];
            let sym = linalg::symmetry_defect(v);
            checks.push(CheckResult {
                name: format!("(H2) {name} symmetric at t={t}"),
                passed: sym <= SYMMETRY_TOL,
                residual: sym,
            });
            let min_eig = linalg::min_eigenvalue(v);
            checks.push(CheckResult {
                name: format!("(H2) {name} nonnegative at t={t}"),
                passed: min_eig >= PSD_TOL,
                residual: min_eig,
            });
        }
    };
    psd_checks("Q1", &spec.q1);
    psd_checks("Q2", &spec.q2);

    for (name, m) in [("Phi1", &spec.phi1), ("Phi2", &spec.phi2)] {
        let sym = linalg::symmetry_defect(m);
        checks.push(CheckResult {
            name: format!("(H2) {name} symmetric"),
            passed: sym <= SYMMETRY_TOL,
            residual: sym,
        });
        let min_eig = linalg::min_eigenvalue(m);
        checks.push(CheckResult {
            name: format!("(H2) {name} nonnegative"),
            passed: min_eig >= PSD_TOL,
            residual: min_eig,
        });
    }

    for (name, map) in [("R1", &spec.r1), ("R2", &spec.r2)] {
        for (k, v) in map.values().iter().enumerate() {
            let t = map.breaks()[k];
            let sym = linalg::symmetry_defect(v);
            checks.push(CheckResult {
                name: format!("(H3) {name} symmetric at t={t}"),
                passed: sym <= SYMMETRY_TOL,
                residual: sym,
            });
            let min_eig = linalg::min_eigenvalue(v);
            checks.push(CheckResult {
                name: format!("(H3) {name} uniform positivity at t={t}"),
                passed: min_eig >= spec.delta_r,
                residual: min_eig,
            });
        }
    }

    Ok(ValidationReport::from_checks(checks))
}

/// Follower Hamiltonian
/// `<p2, Ax + B1 u + B2 v> + <q2, Cx + D1 u + D2 v> + (1/2)(<Q2 x, x> + <R2 v, v>)`.
pub fn hamiltonian_h2(
    spec: &GameSpec,
    t: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    v: &DVector<f64>,
    p2: &DVector<f64>,
    q2: &DVector<f64>,
) -> f64 {
    let drift = spec.a.at(t) * x + spec.b1.at(t) * u + spec.b2.at(t) * v;
    let diffusion = spec.c.at(t) * x + spec.d1.at(t) * u + spec.d2.at(t) * v;
    p2.dot(&drift)
        + q2.dot(&diffusion)
        + 0.5 * ((spec.q2.at(t) * x).dot(x) + (spec.r2.at(t) * v).dot(v))
}

/// Leader Hamiltonian with the follower's pointwise optimizer substituted and
/// the sensitivity process `k` paired against the follower adjoint drift.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian_h1(
    spec: &GameSpec,
    t: f64,
    u: &DVector<f64>,
    x: &DVector<f64>,
    k: &DVector<f64>,
    p1: &DVector<f64>,
    p2: &DVector<f64>,
    q1: &DVector<f64>,
    q2: &DVector<f64>,
) -> Result<f64> {
    let v = crate::projection::phi2(spec, t, p2, q2)?;
    let drift = spec.a.at(t) * x + spec.b1.at(t) * u + spec.b2.at(t) * &v;
    let diffusion = spec.c.at(t) * x + spec.d1.at(t) * u + spec.d2.at(t) * &v;
    let adjoint_drift =
        spec.a.at(t).transpose() * p2 + spec.c.at(t).transpose() * q2 + spec.q2.at(t) * x;
    Ok(p1.dot(&drift)
        + q1.dot(&diffusion)
        + 0.5 * ((spec.q1.at(t) * x).dot(x) + (spec.r1.at(t) * u).dot(u))
        - k.dot(&adjoint_drift))
}

#[cfg(test)]
pub(crate) use tests::scalar_spec;
