//! Backward matrix Riccati equations for the augmented leader-follower
//! system with deterministic coefficients (the martingale part of the
//! solution vanishes, so the equations are matrix ODEs).
//!
//! Three flavours share one integrator: the augmented equation whose
//! solution maps the stacked state (x, k) to the stacked adjoints (p1, p2),
//! a symmetrized variant obtained from a scalar linear change of variables,
//! and the classical single-player form used as an independent cross-check.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::GameSpec;

/// Abort threshold for finite-time escape.
pub const BLOWUP_LIMIT: f64 = 1e8;
/// Tolerance for the ratio assumptions behind the symmetrizing transform.
pub const RATIO_TOL: f64 = 1e-10;

/// Coefficient blocks of the augmented first-order system, stored per
/// breakpoint of the coefficient grid. All blocks are `2n x 2n`.
#[derive(Debug, Clone)]
pub struct AugmentedSystem {
    pub n: usize,
    pub horizon: f64,
    breaks: Vec<f64>,
    a: Vec<DMatrix<f64>>,
    c: Vec<DMatrix<f64>>,
    b1: Vec<DMatrix<f64>>,
    b2: Vec<DMatrix<f64>>,
    d1: Vec<DMatrix<f64>>,
    d2: Vec<DMatrix<f64>>,
    q1: Vec<DMatrix<f64>>,
    pub phi_hat: DMatrix<f64>,
    pub x0: DVector<f64>,
}

fn block2(
    n: usize,
    tl: &DMatrix<f64>,
    tr: &DMatrix<f64>,
    bl: &DMatrix<f64>,
    br: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    out.view_mut((0, 0), (n, n)).copy_from(tl);
    out.view_mut((0, n), (n, n)).copy_from(tr);
    out.view_mut((n, 0), (n, n)).copy_from(bl);
    out.view_mut((n, n), (n, n)).copy_from(br);
    out
}

impl AugmentedSystem {
    fn index_at(&self, t: f64) -> usize {
        self.breaks.iter().rposition(|b| *b <= t).unwrap_or(0)
    }

    pub fn a_at(&self, t: f64) -> &DMatrix<f64> {
        &self.a[self.index_at(t)]
    }
    pub fn c_at(&self, t: f64) -> &DMatrix<f64> {
        &self.c[self.index_at(t)]
    }
    pub fn b1_at(&self, t: f64) -> &DMatrix<f64> {
        &self.b1[self.index_at(t)]
    }
    pub fn b2_at(&self, t: f64) -> &DMatrix<f64> {
        &self.b2[self.index_at(t)]
    }
    pub fn d1_at(&self, t: f64) -> &DMatrix<f64> {
        &self.d1[self.index_at(t)]
    }
    pub fn d2_at(&self, t: f64) -> &DMatrix<f64> {
        &self.d2[self.index_at(t)]
    }
    pub fn q1_at(&self, t: f64) -> &DMatrix<f64> {
        &self.q1[self.index_at(t)]
    }
    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }
}

/// Assemble the augmented blocks from a validated game. The only solves are
/// the two control-weight inversions.
pub fn build_augmented(spec: &GameSpec) -> Result<AugmentedSystem> {
    let n = spec.n;
    let grid = spec.coefficient_grid();
    let zero = DMatrix::zeros(n, n);
    let mut a = Vec::new();
    let mut c = Vec::new();
    let mut b1 = Vec::new();
    let mut b2 = Vec::new();
    let mut d1 = Vec::new();
    let mut d2 = Vec::new();
    let mut q1 = Vec::new();

    for &t in &grid {
        let r1_inv = linalg::guarded_inverse(spec.r1.at(t), "R1 inversion")?;
        let r2_inv = linalg::guarded_inverse(spec.r2.at(t), "R2 inversion")?;
        let bm1 = spec.b1.at(t);
        let bm2 = spec.b2.at(t);
        let dm1 = spec.d1.at(t);
        let dm2 = spec.d2.at(t);

        let b1r_b1 = bm1 * &r1_inv * bm1.transpose();
        let b2r_b2 = bm2 * &r2_inv * bm2.transpose();
        let b1r_d1 = bm1 * &r1_inv * dm1.transpose();
        let b2r_d2 = bm2 * &r2_inv * dm2.transpose();
        let d1r_b1 = dm1 * &r1_inv * bm1.transpose();
        let d2r_b2 = dm2 * &r2_inv * bm2.transpose();
        let d1r_d1 = dm1 * &r1_inv * dm1.transpose();
        let d2r_d2 = dm2 * &r2_inv * dm2.transpose();

        a.push(block2(n, spec.a.at(t), &zero, &zero, spec.a.at(t)));
        c.push(block2(n, spec.c.at(t), &zero, &zero, spec.c.at(t)));
        b1.push(block2(n, &b1r_b1, &b2r_b2, &(-&b2r_b2), &zero));
        b2.push(block2(n, &b1r_d1, &b2r_d2, &(-&d2r_b2), &zero));
        d1.push(block2(n, &d1r_b1, &d2r_b2, &(-&b2r_d2), &zero));
        d2.push(block2(n, &d1r_d1, &d2r_d2, &(-&d2r_d2), &zero));
        q1.push(block2(n, spec.q1.at(t), &(-spec.q2.at(t)), spec.q2.at(t), &zero));
    }

    let phi_hat = block2(n, &spec.phi1, &(-&spec.phi2), &spec.phi2, &zero);
    let mut x0 = DVector::zeros(2 * n);
    x0.rows_mut(0, n).copy_from(&spec.x0);

    Ok(AugmentedSystem {
        n,
        horizon: spec.horizon,
        breaks: grid,
        a,
        c,
        b1,
        b2,
        d1,
        d2,
        q1,
        phi_hat,
        x0,
    })
}

/// Time-gridded solution of a backward matrix Riccati equation together
/// with the derived diffusion-feedback matrix.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub times: Vec<f64>,
    pub r: Vec<DMatrix<f64>>,
    pub xi: Vec<DMatrix<f64>>,
}

impl RiccatiSolution {
    /// Value at an arbitrary time by linear interpolation on the grid.
    pub fn r_at(&self, t: f64) -> DMatrix<f64> {
        interp(&self.times, &self.r, t)
    }

    pub fn xi_at(&self, t: f64) -> DMatrix<f64> {
        interp(&self.times, &self.xi, t)
    }
}

fn interp(times: &[f64], values: &[DMatrix<f64>], t: f64) -> DMatrix<f64> {
    if t <= times[0] {
        return values[0].clone();
    }
    if t >= *times.last().unwrap() {
        return values.last().unwrap().clone();
    }
    let hi = times.partition_point(|x| *x < t);
    let lo = hi - 1;
    let span = times[hi] - times[lo];
    if span <= 0.0 {
        return values[lo].clone();
    }
    let w = (t - times[lo]) / span;
    &values[lo] * (1.0 - w) + &values[hi] * w
}

/// Uniform grid on [0, horizon] merged with the coefficient breakpoints.
fn build_grid(horizon: f64, steps: usize, breaks: &[f64]) -> Vec<f64> {
    let mut grid: Vec<f64> = (0..=steps).map(|k| horizon * k as f64 / steps as f64).collect();
    grid.extend(breaks.iter().copied().filter(|b| *b > 0.0 && *b < horizon));
    grid.sort_by(|x, y| x.partial_cmp(y).unwrap());
    grid.dedup_by(|x, y| (*x - *y).abs() < 1e-13);
    grid
}

/// Classical fourth-order backward integration of `dR/dt = f(t, R)` from a
/// terminal value. Coefficients are frozen at the midpoint of each grid
/// interval, which is exact for piecewise-constant data when the grid
/// contains every breakpoint.
fn integrate_backward<F>(times: &[f64], terminal: DMatrix<f64>, f: F) -> Result<Vec<DMatrix<f64>>>
where
    F: Fn(f64, &DMatrix<f64>) -> Result<DMatrix<f64>>,
{
    let m = times.len();
    let mut values = vec![DMatrix::zeros(terminal.nrows(), terminal.ncols()); m];
    values[m - 1] = terminal;
    for idx in (0..m - 1).rev() {
        let t1 = times[idx + 1];
        let t0 = times[idx];
        let h = t0 - t1; // negative
        let mid = 0.5 * (t0 + t1);
        let y = &values[idx + 1];
        let k1 = f(mid, y)?;
        let k2 = f(mid, &(y + &k1 * (h / 2.0)))?;
        let k3 = f(mid, &(y + &k2 * (h / 2.0)))?;
        let k4 = f(mid, &(y + &k3 * h))?;
        let next = y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if linalg::max_abs(&next) > BLOWUP_LIMIT {
            return Err(Error::BlowUp {
                escape_time: t0,
                max_entry: linalg::max_abs(&next),
            });
        }
        values[idx] = next;
    }
    Ok(values)
}

/// Right-hand side shared by all three Riccati flavours:
/// `Xi = (I + R D2)^{-1} (R C - R D1 R)` and
/// `dR/dt = -(A R + C^T Xi + Q + R (A - B1 R - B2 Xi))`.
#[allow(clippy::too_many_arguments)]
fn riccati_rhs(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    b1: &DMatrix<f64>,
    b2: &DMatrix<f64>,
    d1: &DMatrix<f64>,
    d2: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let dim = r.nrows();
    let lhs = DMatrix::identity(dim, dim) + r * d2;
    let rhs = r * c - r * d1 * r;
    let cond = linalg::condition_estimate(&lhs);
    if !cond.is_finite() || cond > linalg::COND_LIMIT {
        return Err(Error::SingularMatrix {
            context: "I + R D2 in riccati step".into(),
            cond,
        });
    }
    let xi = lhs.lu().solve(&rhs).ok_or_else(|| Error::SingularMatrix {
        context: "I + R D2 in riccati step".into(),
        cond,
    })?;
    let pi = a * r + c.transpose() * &xi + q + r * (a - b1 * r - b2 * &xi);
    Ok((-pi, xi))
}

/// Integrate the augmented Riccati equation backward from its terminal
/// weight on a uniform grid of `steps` intervals (plus breakpoints).
pub fn solve_riccati(aug: &AugmentedSystem, steps: usize) -> Result<RiccatiSolution> {
    let times = build_grid(aug.horizon, steps.max(1), &aug.breaks);
    let r = integrate_backward(&times, aug.phi_hat.clone(), |t, y| {
        riccati_rhs(
            aug.a_at(t),
            aug.c_at(t),
            aug.b1_at(t),
            aug.b2_at(t),
            aug.d1_at(t),
            aug.d2_at(t),
            aug.q1_at(t),
            y,
        )
        .map(|(drift, _)| drift)
    })?;
    let xi = times
        .iter()
        .zip(r.iter())
        .map(|(t, rt)| {
            riccati_rhs(
                aug.a_at(*t),
                aug.c_at(*t),
                aug.b1_at(*t),
                aug.b2_at(*t),
                aug.d1_at(*t),
                aug.d2_at(*t),
                aug.q1_at(*t),
                rt,
            )
            .map(|(_, xi)| xi)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RiccatiSolution { times, r, xi })
}

/// The scalar linear change of variables that symmetrizes the augmented
/// blocks when the cost and channel ratios between the two players are
/// constant.
#[derive(Debug, Clone)]
pub struct UpsilonTransform {
    pub lambda: f64,
    pub mu: f64,
    pub upsilon: DMatrix<f64>,
    pub upsilon_inv: DMatrix<f64>,
    /// Barred system ready for the standard Riccati solve.
    pub barred: AugmentedSystem,
}

/// Resolve a family of (numerator, denominator) pairs into one consistent
/// ratio; zero-over-zero pairs are unconstrained.
fn resolve_ratio(pairs: &[(f64, f64, &str)]) -> Result<f64> {
    let mut ratio: Option<(f64, &str)> = None;
    for (num, den, name) in pairs {
        if den.abs() <= RATIO_TOL {
            if num.abs() > RATIO_TOL {
                return Err(Error::AssumptionViolated(format!(
                    "ratio {name} has zero denominator but numerator {num:.3e}"
                )));
            }
            continue;
        }
        let r = num / den;
        match ratio {
            None => ratio = Some((r, name)),
            Some((prev, prev_name)) => {
                if (prev - r).abs() > RATIO_TOL {
                    return Err(Error::AssumptionViolated(format!(
                        "ratio {name} = {r:.12} disagrees with {prev_name} = {prev:.12} by {:.3e}",
                        (prev - r).abs()
                    )));
                }
            }
        }
    }
    Ok(ratio.map(|(r, _)| r).unwrap_or(0.0))
}

/// Build the symmetrizing transform for a one-dimensional game. Fails when
/// the ratio assumptions do not hold or any transformed matrix misses the
/// symmetry / nonnegativity requirements.
pub fn upsilon_transform(spec: &GameSpec) -> Result<UpsilonTransform> {
    if spec.n != 1 {
        return Err(Error::AssumptionViolated(
            "the symmetrizing transform is defined for one-dimensional state only".into(),
        ));
    }
    let aug = build_augmented(spec)?;
    let grid = aug.breaks.clone();

    let mut lambda_pairs: Vec<(f64, f64, &str)> = Vec::new();
    let mut mu_pairs: Vec<(f64, f64, &str)> = Vec::new();
    lambda_pairs.push((spec.phi2[(0, 0)], spec.phi1[(0, 0)], "Phi2/Phi1"));
    for &t in &grid {
        lambda_pairs.push((spec.q2.at(t)[(0, 0)], spec.q1.at(t)[(0, 0)], "Q2/Q1"));
        // the four channel ratios, read off the assembled blocks
        let b1t = aug.b1_at(t);
        let b2t = aug.b2_at(t);
        let d1t = aug.d1_at(t);
        let d2t = aug.d2_at(t);
        mu_pairs.push((b1t[(0, 1)], b1t[(0, 0)], "B2 R2^-1 B2 / B1 R1^-1 B1"));
        mu_pairs.push((b2t[(0, 1)], b2t[(0, 0)], "B2 R2^-1 D2 / B1 R1^-1 D1"));
        mu_pairs.push((d1t[(0, 1)], d1t[(0, 0)], "D2 R2^-1 B2 / D1 R1^-1 B1"));
        mu_pairs.push((d2t[(0, 1)], d2t[(0, 0)], "D2 R2^-1 D2 / D1 R1^-1 D1"));
    }
    let lambda = resolve_ratio(&lambda_pairs)?;
    let mu = resolve_ratio(&mu_pairs)?;

    let upsilon = DMatrix::from_row_slice(2, 2, &[1.0, -2.0 * mu, 2.0 * lambda, 1.0]);
    let det = 1.0 + 4.0 * lambda * mu;
    if det.abs() < 1e-14 {
        return Err(Error::AssumptionViolated(format!(
            "transform is singular (1 + 4 lambda mu = {det:.3e})"
        )));
    }
    let upsilon_inv = DMatrix::from_row_slice(2, 2, &[1.0, 2.0 * mu, -2.0 * lambda, 1.0]) / det;

    let map = |ms: &[DMatrix<f64>], right: bool| -> Vec<DMatrix<f64>> {
        ms.iter()
            .map(|m| if right { m * &upsilon } else { &upsilon_inv * m })
            .collect()
    };
    let barred = AugmentedSystem {
        n: 1,
        horizon: aug.horizon,
        breaks: grid.clone(),
        a: aug.a.clone(),
        c: aug.c.clone(),
        b1: map(&aug.b1, true),
        b2: map(&aug.b2, true),
        d1: map(&aug.d1, true),
        d2: map(&aug.d2, true),
        q1: map(&aug.q1, false),
        phi_hat: &upsilon_inv * &aug.phi_hat,
        x0: aug.x0.clone(),
    };

    let check_sym = |name: &str, ms: &[DMatrix<f64>]| -> Result<()> {
        for m in ms {
            let defect = linalg::symmetry_defect(m);
            if defect > 1e-12 {
                return Err(Error::AssumptionViolated(format!(
                    "transformed {name} not symmetric (defect {defect:.3e})"
                )));
            }
        }
        Ok(())
    };
    check_sym("B1", &barred.b1)?;
    check_sym("B2", &barred.b2)?;
    check_sym("D1", &barred.d1)?;
    check_sym("D2", &barred.d2)?;
    check_sym("Q1", &barred.q1)?;
    check_sym("Phi1", std::slice::from_ref(&barred.phi_hat))?;
    for m in barred.q1.iter().chain(std::iter::once(&barred.phi_hat)) {
        let min_eig = linalg::min_eigenvalue(m);
        if min_eig < -1e-10 {
            return Err(Error::AssumptionViolated(format!(
                "transformed cost weight not nonnegative (min eigenvalue {min_eig:.3e})"
            )));
        }
    }

    Ok(UpsilonTransform {
        lambda,
        mu,
        upsilon,
        upsilon_inv,
        barred,
    })
}

/// Solve the symmetrized equation and back-map its solution. Returns the
/// barred solution and the recovered direct solution `Upsilon * R_bar`.
pub fn solve_symmetrized_riccati(
    ut: &UpsilonTransform,
    steps: usize,
) -> Result<(RiccatiSolution, RiccatiSolution)> {
    let barred = solve_riccati(&ut.barred, steps)?;
    let mapped = RiccatiSolution {
        times: barred.times.clone(),
        r: barred.r.iter().map(|m| &ut.upsilon * m).collect(),
        xi: barred.xi.iter().map(|m| &ut.upsilon * m).collect(),
    };
    Ok((barred, mapped))
}

/// Single-player backward Riccati solution with multiplicative noise: the
/// gain `N^{-1}(B^T K + D^T Z)` gives the feedback `u = -gain * x`.
#[derive(Debug, Clone)]
pub struct TangRiccatiSolution {
    pub times: Vec<f64>,
    pub k: Vec<DMatrix<f64>>,
    pub z: Vec<DMatrix<f64>>,
    pub gain: Vec<DMatrix<f64>>,
}

impl TangRiccatiSolution {
    pub fn k_at(&self, t: f64) -> DMatrix<f64> {
        interp(&self.times, &self.k, t)
    }

    pub fn gain_at(&self, t: f64) -> DMatrix<f64> {
        interp(&self.times, &self.gain, t)
    }
}

/// Backward integration of the single-player equation
/// `dK/dt = -(A^T K + C^T Z + Q + K A - K B N^{-1} B^T K - K B N^{-1} D^T Z)`
/// with `Z = (I + K D N^{-1} D^T)^{-1}(K C - K D N^{-1} B^T K)` and
/// terminal `K(T) = M`.
#[allow(clippy::too_many_arguments)]
pub fn solve_tang_riccati(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
    q: &DMatrix<f64>,
    n_weight: &DMatrix<f64>,
    m_terminal: &DMatrix<f64>,
    horizon: f64,
    steps: usize,
) -> Result<TangRiccatiSolution> {
    let n_inv = linalg::guarded_inverse(n_weight, "control weight inversion")?;
    let bn_b = b * &n_inv * b.transpose();
    let bn_d = b * &n_inv * d.transpose();
    let dn_b = d * &n_inv * b.transpose();
    let dn_d = d * &n_inv * d.transpose();
    let at = a.transpose();
    let ct = c.transpose();

    let rhs = |k: &DMatrix<f64>| -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let dim = k.nrows();
        let lhs = DMatrix::identity(dim, dim) + k * &dn_d;
        let cond = linalg::condition_estimate(&lhs);
        if !cond.is_finite() || cond > linalg::COND_LIMIT {
            return Err(Error::SingularMatrix {
                context: "I + K D N^-1 D^T".into(),
                cond,
            });
        }
        let z = lhs
            .lu()
            .solve(&(k * c - k * &dn_b * k))
            .ok_or_else(|| Error::SingularMatrix {
                context: "I + K D N^-1 D^T".into(),
                cond,
            })?;
        let k1 = &at * k + &ct * &z + q + k * a - k * &bn_b * k - k * &bn_d * &z;
        Ok((-k1, z))
    };

    let times = build_grid(horizon, steps.max(1), &[0.0]);
    let k = integrate_backward(&times, m_terminal.clone(), |_t, y| rhs(y).map(|(dk, _)| dk))?;
    let z = k
        .iter()
        .map(|ki| rhs(ki).map(|(_, zi)| zi))
        .collect::<Result<Vec<_>>>()?;
    let gain = k
        .iter()
        .zip(z.iter())
        .map(|(ki, zi)| &n_inv * (b.transpose() * ki + d.transpose() * zi))
        .collect();
    Ok(TangRiccatiSolution { times, k, z, gain })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::scalar_spec;
    use nalgebra::dmatrix;

    #[test]
    fn augmented_blocks_at_unit_coefficients() {
        let spec = scalar_spec(&[]);
        let aug = build_augmented(&spec).unwrap();
        assert_eq!(aug.b1_at(0.0), &dmatrix![1.0, 1.0; -1.0, 0.0]);
        assert_eq!(aug.q1_at(0.0), &dmatrix![1.0, -1.0; 1.0, 0.0]);
        assert_eq!(aug.phi_hat, dmatrix![1.0, -1.0; 1.0, 0.0]);
        assert_eq!(aug.a_at(0.0), &dmatrix![1.0, 0.0; 0.0, 1.0]);
    }

    #[test]
    fn augmented_blocks_decouple_without_follower_channel() {
        let spec = scalar_spec(&[("B2", 0.0), ("D2", 0.0)]);
        let aug = build_augmented(&spec).unwrap();
        assert_eq!(aug.b1_at(0.0), &dmatrix![1.0, 0.0; 0.0, 0.0]);
        let spec2 = scalar_spec(&[("Q2", 0.0), ("Phi2", 0.0)]);
        let aug2 = build_augmented(&spec2).unwrap();
        assert_eq!(aug2.q1_at(0.0), &dmatrix![1.0, 0.0; 0.0, 0.0]);
        assert_eq!(aug2.phi_hat, dmatrix![1.0, 0.0; 0.0, 0.0]);
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let spec = scalar_spec(&[("Q1", 0.0), ("Q2", 0.0), ("Phi1", 0.0), ("Phi2", 0.0)]);
        let aug = build_augmented(&spec).unwrap();
        let sol = solve_riccati(&aug, 100).unwrap();
        assert!(sol.r.iter().all(|m| linalg::max_abs(m) < 1e-14));
        assert!(sol.xi.iter().all(|m| linalg::max_abs(m) < 1e-14));
    }

    #[test]
    fn pure_quadrature_case_is_linear_in_time() {
        // no dynamics, no channels: R(t) = Phi_hat + Q_hat (T - t)
        let spec = scalar_spec(&[
            ("A", 0.0),
            ("C", 0.0),
            ("B1", 0.0),
            ("B2", 0.0),
            ("D1", 0.0),
            ("D2", 0.0),
        ]);
        let aug = build_augmented(&spec).unwrap();
        let sol = solve_riccati(&aug, 64).unwrap();
        for (t, r) in sol.times.iter().zip(sol.r.iter()) {
            let expect = &aug.phi_hat + aug.q1_at(*t) * (spec.horizon - t);
            assert!(linalg::max_abs(&(r - expect)) < 1e-12);
        }
        assert!(sol.xi.iter().all(|m| linalg::max_abs(m) < 1e-12));
    }

    #[test]
    fn terminal_condition_exact() {
        let spec = scalar_spec(&[("A", 0.3), ("C", 0.2), ("Q1", 0.7)]);
        let aug = build_augmented(&spec).unwrap();
        let sol = solve_riccati(&aug, 50).unwrap();
        assert_eq!(sol.r.last().unwrap(), &aug.phi_hat);
    }

    #[test]
    fn grid_refinement_is_fourth_order() {
        let spec = scalar_spec(&[
            ("A", 0.3),
            ("C", 0.2),
            ("B1", 1.0),
            ("B2", 0.8),
            ("D1", 0.3),
            ("D2", 0.25),
            ("Q1", 1.0),
            ("Q2", 0.6),
            ("R2", 0.8),
            ("Phi1", 0.5),
            ("Phi2", 0.4),
        ]);
        let aug = build_augmented(&spec).unwrap();
        let coarse = solve_riccati(&aug, 20).unwrap();
        let mid = solve_riccati(&aug, 40).unwrap();
        let fine = solve_riccati(&aug, 80).unwrap();
        let err_coarse = linalg::max_abs(&(&coarse.r[0] - &fine.r[0]));
        let err_mid = linalg::max_abs(&(&mid.r[0] - &fine.r[0]));
        assert!(
            err_coarse > err_mid * 8.0,
            "expected >= 2^4/2 reduction, got {err_coarse:.3e} vs {err_mid:.3e}"
        );
    }

    #[test]
    fn upsilon_with_unit_ratios() {
        let spec = scalar_spec(&[
            ("B1", 0.9),
            ("B2", 0.9),
            ("D1", 0.4),
            ("D2", 0.4),
            ("R1", 1.3),
            ("R2", 1.3),
            ("Q1", 0.8),
            ("Q2", 0.8),
            ("Phi1", 0.6),
            ("Phi2", 0.6),
        ]);
        let ut = upsilon_transform(&spec).unwrap();
        assert!((ut.lambda - 1.0).abs() < 1e-12);
        assert!((ut.mu - 1.0).abs() < 1e-12);
        assert_eq!(ut.upsilon, dmatrix![1.0, -2.0; 2.0, 1.0]);
        let expect_inv = dmatrix![0.2, 0.4; -0.4, 0.2];
        assert!(linalg::max_abs(&(&ut.upsilon_inv - expect_inv)) < 1e-14);
        // barred B1 block evaluated at these values
        let b = 0.9 * 0.9 / 1.3;
        let expect_b1 = dmatrix![3.0 * b, -b; -b, 2.0 * b];
        assert!(linalg::max_abs(&(ut.barred.b1_at(0.0) - expect_b1)) < 1e-12);
    }

    #[test]
    fn upsilon_degenerates_to_identity() {
        let spec = scalar_spec(&[("B2", 0.0), ("D2", 0.0), ("Q2", 0.0), ("Phi2", 0.0)]);
        let ut = upsilon_transform(&spec).unwrap();
        assert_eq!(ut.lambda, 0.0);
        assert_eq!(ut.mu, 0.0);
        assert_eq!(ut.upsilon, DMatrix::identity(2, 2));
    }

    #[test]
    fn upsilon_rejects_broken_ratio() {
        let spec = scalar_spec(&[("Q2", 0.5), ("Phi2", 0.9)]); // Q2/Q1 != Phi2/Phi1
        match upsilon_transform(&spec) {
            Err(Error::AssumptionViolated(msg)) => assert!(msg.contains("ratio")),
            other => panic!("expected AssumptionViolated, got {other:?}"),
        }
    }

    #[test]
    fn symmetrized_solution_matches_direct() {
        let spec = scalar_spec(&[
            ("A", 0.2),
            ("C", 0.1),
            ("B1", 0.9),
            ("B2", 0.9),
            ("D1", 0.4),
            ("D2", 0.4),
            ("R1", 1.3),
            ("R2", 1.3),
            ("Q1", 0.8),
            ("Q2", 0.8),
            ("Phi1", 0.6),
            ("Phi2", 0.6),
        ]);
        let aug = build_augmented(&spec).unwrap();
        let direct = solve_riccati(&aug, 400).unwrap();
        let ut = upsilon_transform(&spec).unwrap();
        let (barred, mapped) = solve_symmetrized_riccati(&ut, 400).unwrap();
        // symmetric flow stays symmetric
        for m in &barred.r {
            assert!(linalg::symmetry_defect(m) < 1e-10);
        }
        let mut worst = 0.0f64;
        for (a, b) in mapped.r.iter().zip(direct.r.iter()) {
            worst = worst.max(linalg::max_abs(&(a - b)));
        }
        assert!(worst < 1e-8, "sup disagreement {worst:.3e}");
    }

    #[test]
    fn tang_zero_data_is_zero() {
        let z = dmatrix![0.0];
        let one = dmatrix![1.0];
        let sol = solve_tang_riccati(&one, &one, &one, &one, &z, &one, &z, 1.0, 100).unwrap();
        assert!(sol.k.iter().all(|m| linalg::max_abs(m) < 1e-14));
        assert!(sol.z.iter().all(|m| linalg::max_abs(m) < 1e-14));
    }

    #[test]
    fn tang_reduces_to_classical_lqr_closed_form() {
        // A = 0, B = N = Q = 1, D = C = 0, M = 0, T = 1:
        // dK/dt = K^2 - 1, K(1) = 0, so K(t) = tanh(1 - t) and K(0) = tanh(1).
        let zero = dmatrix![0.0];
        let one = dmatrix![1.0];
        let sol =
            solve_tang_riccati(&zero, &one, &zero, &zero, &one, &one, &zero, 1.0, 200).unwrap();
        let expect = 1.0f64.tanh();
        assert!(
            (sol.k[0][(0, 0)] - expect).abs() < 1e-10,
            "got {} want {expect}",
            sol.k[0][(0, 0)]
        );
        // interior point too
        let k_half = sol.k_at(0.5)[(0, 0)];
        assert!((k_half - 0.5f64.tanh()).abs() < 1e-10);
    }

    #[test]
    fn tang_blowup_reports_escape_time() {
        // strong growth with a huge terminal weight and no control authority
        let a = dmatrix![6.0];
        let b = dmatrix![0.0];
        let q = dmatrix![50.0];
        let one = dmatrix![1.0];
        let zero = dmatrix![0.0];
        let m = dmatrix![1e7];
        match solve_tang_riccati(&a, &b, &zero, &zero, &q, &one, &m, 4.0, 400) {
            Err(Error::BlowUp { escape_time, .. }) => assert!(escape_time < 4.0),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }
}
