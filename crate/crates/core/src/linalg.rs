//! Small dense helpers shared by the solver modules. Everything here runs at
//! desk scale (matrices up to 8x8), so direct decompositions are fine.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const COND_LIMIT: f64 = 1e12;

/// Max-abs entry of `m - m^T`.
pub fn symmetry_defect(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// 2-norm condition estimate via singular values.
pub fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let svd = m.clone().svd(false, false);
    let max = svd.singular_values.iter().copied().fold(0.0f64, f64::max);
    let min = svd
        .singular_values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Inverse with a condition-number guard; `context` names the solve in errors.
pub fn guarded_inverse(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let cond = condition_estimate(m);
    if !cond.is_finite() || cond > COND_LIMIT {
        return Err(Error::SingularMatrix {
            context: context.to_string(),
            cond,
        });
    }
    m.clone().try_inverse().ok_or_else(|| Error::SingularMatrix {
        context: context.to_string(),
        cond,
    })
}

pub fn guarded_solve(m: &DMatrix<f64>, rhs: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    let cond = condition_estimate(m);
    if !cond.is_finite() || cond > COND_LIMIT {
        return Err(Error::SingularMatrix {
            context: context.to_string(),
            cond,
        });
    }
    m.clone()
        .lu()
        .solve(rhs)
        .ok_or_else(|| Error::SingularMatrix {
            context: context.to_string(),
            cond,
        })
}

pub fn sup_distance(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..a.len() {
        worst = worst.max((a[i] - b[i]).abs());
    }
    worst
}
