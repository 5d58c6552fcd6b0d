//! JSON configuration documents: the single on-disk description of a game
//! instance plus solver and simulation settings. Matrices are nested row
//! arrays; coefficients may be constant or piecewise constant with
//! breakpoints; box bounds use `null` for unbounded entries.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbsde::SolverParams;
use crate::model::{GameSpec, PiecewiseMatrix, DEFAULT_DELTA_R};
use crate::projection::ConstraintSet;
use crate::simulate::SimConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Dimensions {
    pub n: usize,
    pub m1: usize,
    pub m2: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Breakpoint {
    pub t_from: f64,
    pub matrix: Vec<Vec<f64>>,
}

/// A coefficient map: either one matrix for the whole horizon or a list of
/// left-closed breakpoints.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum CoefficientDef {
    Constant(Vec<Vec<f64>>),
    Piecewise(Vec<Breakpoint>),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Coefficients {
    #[serde(rename = "A")]
    pub a: CoefficientDef,
    #[serde(rename = "B1")]
    pub b1: CoefficientDef,
    #[serde(rename = "B2")]
    pub b2: CoefficientDef,
    #[serde(rename = "C")]
    pub c: CoefficientDef,
    #[serde(rename = "D1")]
    pub d1: CoefficientDef,
    #[serde(rename = "D2")]
    pub d2: CoefficientDef,
    #[serde(rename = "Q1")]
    pub q1: CoefficientDef,
    #[serde(rename = "Q2")]
    pub q2: CoefficientDef,
    #[serde(rename = "R1")]
    pub r1: CoefficientDef,
    #[serde(rename = "R2")]
    pub r2: CoefficientDef,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Terminal {
    #[serde(rename = "Phi1")]
    pub phi1: Vec<Vec<f64>>,
    #[serde(rename = "Phi2")]
    pub phi2: Vec<Vec<f64>>,
}

/// Constraint-set descriptor. Box bounds accept `null` entries for
/// unbounded coordinates.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ConstraintDef {
    FullSpace,
    Box {
        lower: Vec<Option<f64>>,
        upper: Vec<Option<f64>>,
    },
    Orthant,
    Ball {
        center: Vec<f64>,
        radius: f64,
    },
    Halfspace {
        normal: Vec<f64>,
        offset: f64,
    },
    Interval {
        lo: f64,
        hi: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Constraints {
    pub gamma1: ConstraintDef,
    pub gamma2: ConstraintDef,
}

fn default_lattice_steps() -> usize {
    8
}
fn default_tol() -> f64 {
    1e-10
}
fn default_continuation_steps() -> usize {
    8
}
fn default_k_gain() -> f64 {
    0.5
}
fn default_riccati_grid() -> usize {
    2000
}
fn default_delta_r() -> f64 {
    DEFAULT_DELTA_R
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SolverSection {
    #[serde(rename = "N", default = "default_lattice_steps")]
    pub lattice_steps: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_continuation_steps")]
    pub continuation_steps: usize,
    #[serde(rename = "K_gain", default = "default_k_gain")]
    pub k_gain: f64,
    #[serde(default = "default_riccati_grid")]
    pub riccati_grid: usize,
    #[serde(default = "default_delta_r")]
    pub delta_r: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            lattice_steps: default_lattice_steps(),
            tol: default_tol(),
            continuation_steps: default_continuation_steps(),
            k_gain: default_k_gain(),
            riccati_grid: default_riccati_grid(),
            delta_r: default_delta_r(),
        }
    }
}

fn default_paths() -> usize {
    10_000
}
fn default_steps() -> usize {
    100
}
fn default_seed() -> u64 {
    7
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SimulationSection {
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub antithetic: bool,
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection {
            paths: default_paths(),
            steps: default_steps(),
            seed: default_seed(),
            antithetic: false,
        }
    }
}

/// The full configuration document.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConfigDocument {
    pub dimensions: Dimensions,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub coefficients: Coefficients,
    pub terminal: Terminal,
    pub constraints: Constraints,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub simulation: SimulationSection,
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::MalformedSpec(format!("{what}: empty matrix")));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::MalformedSpec(format!("{what}: ragged matrix rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn rows_from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn piecewise_from_def(def: &CoefficientDef, what: &str) -> Result<PiecewiseMatrix> {
    match def {
        CoefficientDef::Constant(rows) => {
            Ok(PiecewiseMatrix::constant(matrix_from_rows(rows, what)?))
        }
        CoefficientDef::Piecewise(bps) => {
            let mut breaks = Vec::with_capacity(bps.len());
            let mut values = Vec::with_capacity(bps.len());
            for bp in bps {
                breaks.push(bp.t_from);
                values.push(matrix_from_rows(&bp.matrix, what)?);
            }
            PiecewiseMatrix::new(breaks, values)
        }
    }
}

fn def_from_piecewise(map: &PiecewiseMatrix) -> CoefficientDef {
    if map.breaks().len() == 1 {
        CoefficientDef::Constant(rows_from_matrix(&map.values()[0]))
    } else {
        CoefficientDef::Piecewise(
            map.breaks()
                .iter()
                .zip(map.values().iter())
                .map(|(t, m)| Breakpoint {
                    t_from: *t,
                    matrix: rows_from_matrix(m),
                })
                .collect(),
        )
    }
}

fn constraint_from_def(def: &ConstraintDef, dim: usize, what: &str) -> Result<ConstraintSet> {
    let set = match def {
        ConstraintDef::FullSpace => ConstraintSet::FullSpace { dim },
        ConstraintDef::Box { lower, upper } => {
            if lower.len() != dim || upper.len() != dim {
                return Err(Error::MalformedSpec(format!(
                    "{what}: box bounds must have length {dim}"
                )));
            }
            ConstraintSet::Box {
                lower: DVector::from_fn(dim, |i, _| lower[i].unwrap_or(f64::NEG_INFINITY)),
                upper: DVector::from_fn(dim, |i, _| upper[i].unwrap_or(f64::INFINITY)),
            }
        }
        ConstraintDef::Orthant => ConstraintSet::NonnegativeOrthant { dim },
        ConstraintDef::Ball { center, radius } => ConstraintSet::EuclideanBall {
            center: DVector::from_vec(center.clone()),
            radius: *radius,
        },
        ConstraintDef::Halfspace { normal, offset } => ConstraintSet::Halfspace {
            normal: DVector::from_vec(normal.clone()),
            offset: *offset,
        },
        ConstraintDef::Interval { lo, hi } => ConstraintSet::Interval { lo: *lo, hi: *hi },
    };
    if set.dim() != dim {
        return Err(Error::MalformedSpec(format!(
            "{what}: constraint dimension {} does not match control dimension {dim}",
            set.dim()
        )));
    }
    set.validate()?;
    Ok(set)
}

fn def_from_constraint(set: &ConstraintSet) -> ConstraintDef {
    match set {
        ConstraintSet::FullSpace { .. } => ConstraintDef::FullSpace,
        ConstraintSet::Box { lower, upper } => ConstraintDef::Box {
            lower: lower
                .iter()
                .map(|v| if v.is_finite() { Some(*v) } else { None })
                .collect(),
            upper: upper
                .iter()
                .map(|v| if v.is_finite() { Some(*v) } else { None })
                .collect(),
        },
        ConstraintSet::NonnegativeOrthant { .. } => ConstraintDef::Orthant,
        ConstraintSet::EuclideanBall { center, radius } => ConstraintDef::Ball {
            center: center.iter().copied().collect(),
            radius: *radius,
        },
        ConstraintSet::Halfspace { normal, offset } => ConstraintDef::Halfspace {
            normal: normal.iter().copied().collect(),
            offset: *offset,
        },
        ConstraintSet::Interval { lo, hi } => ConstraintDef::Interval { lo: *lo, hi: *hi },
    }
}

impl ConfigDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::MalformedSpec(format!("config parse: {e}")))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn to_game_spec(&self) -> Result<GameSpec> {
        let d = &self.dimensions;
        Ok(GameSpec {
            n: d.n,
            m1: d.m1,
            m2: d.m2,
            horizon: self.horizon,
            x0: DVector::from_vec(self.x0.clone()),
            a: piecewise_from_def(&self.coefficients.a, "A")?,
            c: piecewise_from_def(&self.coefficients.c, "C")?,
            b1: piecewise_from_def(&self.coefficients.b1, "B1")?,
            d1: piecewise_from_def(&self.coefficients.d1, "D1")?,
            b2: piecewise_from_def(&self.coefficients.b2, "B2")?,
            d2: piecewise_from_def(&self.coefficients.d2, "D2")?,
            q1: piecewise_from_def(&self.coefficients.q1, "Q1")?,
            q2: piecewise_from_def(&self.coefficients.q2, "Q2")?,
            r1: piecewise_from_def(&self.coefficients.r1, "R1")?,
            r2: piecewise_from_def(&self.coefficients.r2, "R2")?,
            phi1: matrix_from_rows(&self.terminal.phi1, "Phi1")?,
            phi2: matrix_from_rows(&self.terminal.phi2, "Phi2")?,
            gamma1: constraint_from_def(&self.constraints.gamma1, d.m1, "gamma1")?,
            gamma2: constraint_from_def(&self.constraints.gamma2, d.m2, "gamma2")?,
            delta_r: self.solver.delta_r,
        })
    }

    pub fn from_game_spec(
        spec: &GameSpec,
        solver: SolverSection,
        simulation: SimulationSection,
    ) -> Self {
        ConfigDocument {
            dimensions: Dimensions {
                n: spec.n,
                m1: spec.m1,
                m2: spec.m2,
            },
            horizon: spec.horizon,
            x0: spec.x0.iter().copied().collect(),
            coefficients: Coefficients {
                a: def_from_piecewise(&spec.a),
                b1: def_from_piecewise(&spec.b1),
                b2: def_from_piecewise(&spec.b2),
                c: def_from_piecewise(&spec.c),
                d1: def_from_piecewise(&spec.d1),
                d2: def_from_piecewise(&spec.d2),
                q1: def_from_piecewise(&spec.q1),
                q2: def_from_piecewise(&spec.q2),
                r1: def_from_piecewise(&spec.r1),
                r2: def_from_piecewise(&spec.r2),
            },
            terminal: Terminal {
                phi1: rows_from_matrix(&spec.phi1),
                phi2: rows_from_matrix(&spec.phi2),
            },
            constraints: Constraints {
                gamma1: def_from_constraint(&spec.gamma1),
                gamma2: def_from_constraint(&spec.gamma2),
            },
            solver,
            simulation: simulation.clone(),
        }
    }

    pub fn solver_params(&self) -> SolverParams {
        SolverParams {
            tol: self.solver.tol,
            max_iterations: crate::fbsde::DEFAULT_MAX_ITERATIONS,
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            paths: self.simulation.paths,
            steps: self.simulation.steps,
            seed: self.simulation.seed,
            antithetic: self.simulation.antithetic,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_json() -> &'static str {
        r#"{
            "dimensions": {"n": 1, "m1": 1, "m2": 1},
            "horizon": 1.0,
            "x0": [1.0],
            "coefficients": {
                "A": [[0.2]],
                "B1": [[0.6]],
                "B2": [[0.5]],
                "C": [[0.15]],
                "D1": [[0.2]],
                "D2": [[0.2]],
                "Q1": [[0.5]],
                "Q2": [{"t_from": 0.0, "matrix": [[0.4]]}, {"t_from": 0.5, "matrix": [[0.2]]}],
                "R1": [[1.0]],
                "R2": [[1.0]]
            },
            "terminal": {"Phi1": [[0.3]], "Phi2": [[0.25]]},
            "constraints": {
                "gamma1": {"type": "interval", "lo": -1.0, "hi": 1.0},
                "gamma2": {"type": "box", "lower": [0.0], "upper": [null]}
            },
            "solver": {"N": 4, "tol": 1e-10, "continuation_steps": 8, "K_gain": 0.5, "riccati_grid": 500},
            "simulation": {"paths": 1000, "steps": 50, "seed": 3, "antithetic": true}
        }"#
    }

    #[test]
    fn parses_and_converts() {
        let doc = ConfigDocument::from_json(sample_json()).unwrap();
        let spec = doc.to_game_spec().unwrap();
        assert_eq!(spec.n, 1);
        assert_eq!(spec.q2.breaks(), &[0.0, 0.5]);
        assert_eq!(spec.q2.at(0.7)[(0, 0)], 0.2);
        match &spec.gamma2 {
            ConstraintSet::Box { lower, upper } => {
                assert_eq!(lower[0], 0.0);
                assert!(upper[0].is_infinite());
            }
            other => panic!("wrong set {other:?}"),
        }
        let report = crate::model::validate_spec(&spec).unwrap();
        assert!(report.passed);
    }

    #[test]
    fn game_spec_round_trip_is_field_exact() {
        let doc = ConfigDocument::from_json(sample_json()).unwrap();
        let spec = doc.to_game_spec().unwrap();
        let doc2 =
            ConfigDocument::from_game_spec(&spec, doc.solver.clone(), doc.simulation.clone());
        let spec2 = doc2.to_game_spec().unwrap();
        assert_eq!(spec.x0, spec2.x0);
        assert_eq!(spec.a, spec2.a);
        assert_eq!(spec.q2, spec2.q2);
        assert_eq!(spec.phi1, spec2.phi1);
        assert_eq!(spec.gamma1, spec2.gamma1);
        assert_eq!(spec.gamma2, spec2.gamma2);
        assert_eq!(spec.horizon, spec2.horizon);
        // and the documents themselves agree
        assert_eq!(doc2, ConfigDocument::from_json(&doc2.to_json_pretty()).unwrap());
    }

    #[test]
    fn rejects_ragged_matrices() {
        let bad = sample_json().replace("\"A\": [[0.2]]", "\"A\": [[0.2, 1.0], [0.3]]");
        let doc = ConfigDocument::from_json(&bad).unwrap();
        assert!(matches!(doc.to_game_spec(), Err(Error::MalformedSpec(_))));
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let mut trimmed: serde_json::Value = serde_json::from_str(sample_json()).unwrap();
        trimmed.as_object_mut().unwrap().remove("solver");
        trimmed.as_object_mut().unwrap().remove("simulation");
        let doc = ConfigDocument::from_json(&trimmed.to_string()).unwrap();
        assert_eq!(doc.solver.lattice_steps, 8);
        assert_eq!(doc.simulation.paths, 10_000);
    }
}
