//! Nearest-point maps onto closed convex control sets under a weighted inner
//! product, plus the pointwise optimizers built from them.
//!
//! Closed forms cover the cases that show up in practice: any set with the
//! identity map, clamps under diagonal weights, balls under scalar weights,
//! and halfspaces under any weight via the one-constraint KKT formula. All
//! remaining (set, weight) pairs fall back to projected gradient on
//! `f(z) = 0.5 ||z - x||^2_R` with Euclidean projection steps.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::GameSpec;

/// Stop when successive fallback iterates differ by less than this.
const FALLBACK_STEP_TOL: f64 = 1e-12;
const FALLBACK_ITER_CAP: usize = 100_000;

/// A nonempty closed convex subset of control space.
#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintSet {
    FullSpace {
        dim: usize,
    },
    /// Componentwise bounds; infinite entries leave a side unbounded.
    Box {
        lower: DVector<f64>,
        upper: DVector<f64>,
    },
    NonnegativeOrthant {
        dim: usize,
    },
    EuclideanBall {
        center: DVector<f64>,
        radius: f64,
    },
    /// `{ z : a . z <= b }`.
    Halfspace {
        normal: DVector<f64>,
        offset: f64,
    },
    /// Scalar `[lo, hi]`.
    Interval {
        lo: f64,
        hi: f64,
    },
}

impl ConstraintSet {
    pub fn dim(&self) -> usize {
        match self {
            ConstraintSet::FullSpace { dim } => *dim,
            ConstraintSet::Box { lower, .. } => lower.len(),
            ConstraintSet::NonnegativeOrthant { dim } => *dim,
            ConstraintSet::EuclideanBall { center, .. } => center.len(),
            ConstraintSet::Halfspace { normal, .. } => normal.len(),
            ConstraintSet::Interval { .. } => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ConstraintSet::Box { lower, upper } => {
                if lower.len() != upper.len() {
                    return Err(Error::MalformedSpec("box bounds length mismatch".into()));
                }
                for i in 0..lower.len() {
                    if lower[i] > upper[i] {
                        return Err(Error::MalformedSpec(format!(
                            "box lower bound exceeds upper bound in coordinate {i}"
                        )));
                    }
                }
                Ok(())
            }
            ConstraintSet::EuclideanBall { radius, .. } => {
                if *radius < 0.0 {
                    Err(Error::MalformedSpec("ball radius must be nonnegative".into()))
                } else {
                    Ok(())
                }
            }
            ConstraintSet::Halfspace { normal, .. } => {
                if normal.norm() == 0.0 {
                    Err(Error::MalformedSpec("halfspace normal must be nonzero".into()))
                } else {
                    Ok(())
                }
            }
            ConstraintSet::Interval { lo, hi } => {
                if lo > hi {
                    Err(Error::MalformedSpec("interval lo exceeds hi".into()))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn contains(&self, z: &DVector<f64>, tol: f64) -> bool {
        match self {
            ConstraintSet::FullSpace { .. } => true,
            ConstraintSet::Box { lower, upper } => (0..z.len())
                .all(|i| z[i] >= lower[i] - tol && z[i] <= upper[i] + tol),
            ConstraintSet::NonnegativeOrthant { .. } => z.iter().all(|e| *e >= -tol),
            ConstraintSet::EuclideanBall { center, radius } => (z - center).norm() <= radius + tol,
            ConstraintSet::Halfspace { normal, offset } => normal.dot(z) <= offset + tol,
            ConstraintSet::Interval { lo, hi } => z[0] >= lo - tol && z[0] <= hi + tol,
        }
    }

    /// Euclidean projection; exact for every variant.
    pub fn project_euclidean(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            ConstraintSet::FullSpace { .. } => x.clone(),
            ConstraintSet::Box { lower, upper } => {
                DVector::from_fn(x.len(), |i, _| x[i].clamp(lower[i], upper[i]))
            }
            ConstraintSet::NonnegativeOrthant { .. } => x.map(|e| e.max(0.0)),
            ConstraintSet::EuclideanBall { center, radius } => {
                let d = x - center;
                let norm = d.norm();
                if norm <= *radius {
                    x.clone()
                } else {
                    center + d * (*radius / norm)
                }
            }
            ConstraintSet::Halfspace { normal, offset } => {
                let excess = normal.dot(x) - offset;
                if excess <= 0.0 {
                    x.clone()
                } else {
                    x - normal * (excess / normal.norm_squared())
                }
            }
            ConstraintSet::Interval { lo, hi } => DVector::from_element(1, x[0].clamp(*lo, *hi)),
        }
    }

    /// Draw a point of the set; unbounded directions are sampled within
    /// `span` of the anchor. Used by variational-inequality probes.
    pub fn sample<R: Rng>(&self, rng: &mut R, anchor: &DVector<f64>, span: f64) -> DVector<f64> {
        let m = self.dim();
        let raw = DVector::from_fn(m, |i, _| {
            match self {
                ConstraintSet::Box { lower, upper } => {
                    let lo = lower[i].max(anchor[i] - span);
                    let hi = upper[i].min(anchor[i] + span);
                    if lo >= hi {
                        lo
                    } else {
                        rng.gen_range(lo..hi)
                    }
                }
                ConstraintSet::Interval { lo, hi } => {
                    let lo = lo.max(anchor[i] - span);
                    let hi = hi.min(anchor[i] + span);
                    if lo >= hi {
                        lo
                    } else {
                        rng.gen_range(lo..hi)
                    }
                }
                _ => anchor[i] + rng.gen_range(-span..span),
            }
        });
        self.project_euclidean(&raw)
    }
}

/// The `R`-weighted inner product used for projections onto a control set.
#[derive(Debug, Clone)]
pub struct WeightedMetric {
    r: DMatrix<f64>,
    diagonal: bool,
    scalar_multiple: bool,
}

impl WeightedMetric {
    pub fn new(r: DMatrix<f64>) -> Result<Self> {
        if linalg::symmetry_defect(&r) > 1e-10 {
            return Err(Error::MalformedSpec("metric weight must be symmetric".into()));
        }
        if linalg::min_eigenvalue(&r) <= 0.0 {
            return Err(Error::MalformedSpec(
                "metric weight must be positive definite".into(),
            ));
        }
        let diagonal = (0..r.nrows())
            .all(|i| (0..r.ncols()).all(|j| i == j || r[(i, j)] == 0.0));
        let scalar_multiple =
            diagonal && (1..r.nrows()).all(|i| (r[(i, i)] - r[(0, 0)]).abs() < 1e-15);
        Ok(WeightedMetric {
            r,
            diagonal,
            scalar_multiple,
        })
    }

    pub fn identity(dim: usize) -> Self {
        WeightedMetric::new(DMatrix::identity(dim, dim)).unwrap()
    }

    pub fn weight(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn norm(&self, z: &DVector<f64>) -> f64 {
        (&self.r * z).dot(z).max(0.0).sqrt()
    }

    pub fn inner(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (&self.r * a).dot(b)
    }
}

/// Nearest point of `set` to `x` in the metric `||.||_R`.
pub fn project(set: &ConstraintSet, metric: &WeightedMetric, x: &DVector<f64>) -> Result<DVector<f64>> {
    debug_assert_eq!(set.dim(), x.len());
    match set {
        ConstraintSet::FullSpace { .. } => Ok(x.clone()),
        ConstraintSet::Box { .. } | ConstraintSet::Interval { .. } | ConstraintSet::NonnegativeOrthant { .. }
            if metric.diagonal =>
        {
            Ok(set.project_euclidean(x))
        }
        ConstraintSet::EuclideanBall { .. } if metric.scalar_multiple => {
            Ok(set.project_euclidean(x))
        }
        ConstraintSet::Halfspace { normal, offset } => {
            let excess = normal.dot(x) - offset;
            if excess <= 0.0 {
                return Ok(x.clone());
            }
            let rinv_a = linalg::guarded_solve(&metric.r, normal, "halfspace projection")?;
            let denom = normal.dot(&rinv_a);
            Ok(x - rinv_a * (excess / denom))
        }
        _ => project_fallback(set, metric, x),
    }
}

/// Projected gradient on the weighted distance with Euclidean projection
/// steps and step size `1 / lambda_max(R)`.
fn project_fallback(
    set: &ConstraintSet,
    metric: &WeightedMetric,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    let lambda_max = metric
        .r
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(0.0f64, f64::max);
    let step = 1.0 / lambda_max;
    let mut z = set.project_euclidean(x);
    for _ in 0..FALLBACK_ITER_CAP {
        let grad = &metric.r * (&z - x);
        let next = set.project_euclidean(&(&z - grad * step));
        let shift = linalg::sup_distance(&next, &z);
        z = next;
        if shift < FALLBACK_STEP_TOL {
            return Ok(z);
        }
    }
    Err(Error::ProjectionNotConverged(FALLBACK_ITER_CAP))
}

/// B-derivative of `z -> project(set, metric, z)` at `x`: the derivative of
/// the active closed form where it exists, zero on clamped coordinates.
/// Fallback cases use central finite differences.
pub fn projection_jacobian(
    set: &ConstraintSet,
    metric: &WeightedMetric,
    x: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let m = set.dim();
    match set {
        ConstraintSet::FullSpace { .. } => Ok(DMatrix::identity(m, m)),
        ConstraintSet::Box { lower, upper } if metric.diagonal => {
            Ok(DMatrix::from_fn(m, m, |i, j| {
                if i == j && x[i] > lower[i] && x[i] < upper[i] {
                    1.0
                } else {
                    0.0
                }
            }))
        }
        ConstraintSet::Interval { lo, hi } if metric.diagonal => {
            Ok(DMatrix::from_element(1, 1, if x[0] > *lo && x[0] < *hi { 1.0 } else { 0.0 }))
        }
        ConstraintSet::NonnegativeOrthant { .. } if metric.diagonal => {
            Ok(DMatrix::from_fn(m, m, |i, j| {
                if i == j && x[i] > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }))
        }
        ConstraintSet::EuclideanBall { center, radius } if metric.scalar_multiple => {
            let d = x - center;
            let norm = d.norm();
            if norm <= *radius {
                Ok(DMatrix::identity(m, m))
            } else {
                let w = d / norm;
                let scale = radius / norm;
                Ok((DMatrix::identity(m, m) - &w * w.transpose()) * scale)
            }
        }
        ConstraintSet::Halfspace { normal, offset } => {
            if normal.dot(x) <= *offset {
                Ok(DMatrix::identity(m, m))
            } else {
                let rinv_a = linalg::guarded_solve(&metric.r, normal, "halfspace jacobian")?;
                let denom = normal.dot(&rinv_a);
                Ok(DMatrix::identity(m, m) - (&rinv_a * normal.transpose()) / denom)
            }
        }
        _ => {
            let h = 1e-7;
            let mut jac = DMatrix::zeros(m, m);
            for j in 0..m {
                let mut plus = x.clone();
                let mut minus = x.clone();
                plus[j] += h;
                minus[j] -= h;
                let col = (project(set, metric, &plus)? - project(set, metric, &minus)?) / (2.0 * h);
                jac.set_column(j, &col);
            }
            Ok(jac)
        }
    }
}

/// One player's pointwise optimizer at a fixed time, with the weight
/// inversion and metric hoisted out so per-node evaluation is cheap.
pub struct PointwiseOptimizer<'a> {
    set: &'a ConstraintSet,
    metric: WeightedMetric,
    r_inv: DMatrix<f64>,
    b_t: DMatrix<f64>,
    d_t: DMatrix<f64>,
}

impl<'a> PointwiseOptimizer<'a> {
    /// Follower optimizer at time `t`.
    pub fn follower(spec: &'a GameSpec, t: f64) -> Result<Self> {
        Ok(PointwiseOptimizer {
            set: &spec.gamma2,
            metric: WeightedMetric::new(spec.r2.at(t).clone())?,
            r_inv: linalg::guarded_inverse(spec.r2.at(t), "follower weight inversion")?,
            b_t: spec.b2.at(t).transpose(),
            d_t: spec.d2.at(t).transpose(),
        })
    }

    /// Leader optimizer at time `t`.
    pub fn leader(spec: &'a GameSpec, t: f64) -> Result<Self> {
        Ok(PointwiseOptimizer {
            set: &spec.gamma1,
            metric: WeightedMetric::new(spec.r1.at(t).clone())?,
            r_inv: linalg::guarded_inverse(spec.r1.at(t), "leader weight inversion")?,
            b_t: spec.b1.at(t).transpose(),
            d_t: spec.d1.at(t).transpose(),
        })
    }

    fn target(&self, p: &DVector<f64>, q: &DVector<f64>) -> DVector<f64> {
        -(&self.r_inv * (&self.b_t * p + &self.d_t * q))
    }

    pub fn eval(&self, p: &DVector<f64>, q: &DVector<f64>) -> Result<DVector<f64>> {
        project(self.set, &self.metric, &self.target(p, q))
    }

    /// Jacobians of the optimizer with respect to its two adjoint
    /// arguments, via the B-derivative of the projection.
    pub fn jacobians(&self, p: &DVector<f64>, q: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let jac_set = projection_jacobian(self.set, &self.metric, &self.target(p, q))?;
        let dp = -&jac_set * &self.r_inv * &self.b_t;
        let dq = -jac_set * &self.r_inv * &self.d_t;
        Ok((dp, dq))
    }
}

/// Follower pointwise optimizer:
/// projection of `-R2^{-1}(B2^T p2 + D2^T q2)` onto the follower set in the
/// `R2(t)`-weighted metric.
pub fn phi2(spec: &GameSpec, t: f64, p2: &DVector<f64>, q2: &DVector<f64>) -> Result<DVector<f64>> {
    PointwiseOptimizer::follower(spec, t)?.eval(p2, q2)
}

/// Leader pointwise optimizer, mirroring `phi2` with the leader's data.
pub fn phi1(spec: &GameSpec, t: f64, p1: &DVector<f64>, q1: &DVector<f64>) -> Result<DVector<f64>> {
    PointwiseOptimizer::leader(spec, t)?.eval(p1, q1)
}

/// Jacobians of `phi2` with respect to its two adjoint arguments.
pub fn phi2_jacobians(
    spec: &GameSpec,
    t: f64,
    p2: &DVector<f64>,
    q2: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    PointwiseOptimizer::follower(spec, t)?.jacobians(p2, q2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec<R: Rng>(rng: &mut R, m: usize, scale: f64) -> DVector<f64> {
        DVector::from_fn(m, |_, _| rng.gen_range(-scale..scale))
    }

    #[test]
    fn identity_on_members() {
        let set = ConstraintSet::Box {
            lower: dvector![-1.0, -1.0],
            upper: dvector![1.0, 1.0],
        };
        let metric = WeightedMetric::new(dmatrix![2.0, 0.0; 0.0, 5.0]).unwrap();
        let x = dvector![0.25, -0.75];
        assert_eq!(project(&set, &metric, &x).unwrap(), x);
    }

    #[test]
    fn interval_clamp() {
        let set = ConstraintSet::Interval { lo: -0.5, hi: 0.5 };
        let metric = WeightedMetric::identity(1);
        let z = project(&set, &metric, &dvector![2.0]).unwrap();
        assert_eq!(z[0], 0.5);
    }

    #[test]
    fn box_clamp_under_diagonal_metric_verified_by_grid() {
        let set = ConstraintSet::Box {
            lower: dvector![0.0, 0.0],
            upper: dvector![1.0, 1.0],
        };
        let metric = WeightedMetric::new(dmatrix![1.0, 0.0; 0.0, 4.0]).unwrap();
        let x = dvector![2.0, -1.0];
        let z = project(&set, &metric, &x).unwrap();
        assert_eq!(z, dvector![1.0, 0.0]);

        // Dense grid search over the box confirms the clamp is the minimizer.
        let mut best = f64::INFINITY;
        let mut best_pt = dvector![0.0, 0.0];
        let steps = 200;
        for i in 0..=steps {
            for j in 0..=steps {
                let cand = dvector![i as f64 / steps as f64, j as f64 / steps as f64];
                let d = metric.norm(&(&cand - &x));
                if d < best {
                    best = d;
                    best_pt = cand;
                }
            }
        }
        assert!((best_pt - z).norm() < 1e-2);
    }

    #[test]
    fn halfspace_kkt_solution() {
        // Frozen from the one-constraint KKT system solved by hand:
        // z = x - max(0, a.x - b) / (a^T R^{-1} a) * R^{-1} a = (0, 3/2).
        let set = ConstraintSet::Halfspace {
            normal: dvector![1.0, 0.0],
            offset: 0.0,
        };
        let metric = WeightedMetric::new(dmatrix![2.0, 1.0; 1.0, 2.0]).unwrap();
        let z = project(&set, &metric, &dvector![1.0, 1.0]).unwrap();
        assert!((z[0] - 0.0).abs() < 1e-12);
        assert!((z[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn fallback_matches_closed_form_on_halfspace() {
        let set = ConstraintSet::Halfspace {
            normal: dvector![1.0, -0.5],
            offset: -0.2,
        };
        let metric = WeightedMetric::new(dmatrix![2.0, 0.7; 0.7, 1.5]).unwrap();
        let x = dvector![1.4, 0.3];
        let exact = project(&set, &metric, &x).unwrap();
        let iterative = project_fallback(&set, &metric, &x).unwrap();
        assert!((exact - iterative).norm() < 1e-9);
    }

    #[test]
    fn weighted_box_projection_fallback_satisfies_variational_inequality() {
        let set = ConstraintSet::Box {
            lower: dvector![-0.3, -0.3],
            upper: dvector![0.3, 0.3],
        };
        let metric = WeightedMetric::new(dmatrix![1.5, 0.6; 0.6, 1.2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let x = rand_vec(&mut rng, 2, 2.0);
            let z = project(&set, &metric, &x).unwrap();
            for _ in 0..20 {
                let y = set.sample(&mut rng, &z, 1.0);
                let lhs = metric.inner(&(&z - &x), &(&z - &y));
                assert!(lhs <= 1e-10, "variational inequality violated: {lhs}");
            }
        }
    }

    #[test]
    fn projection_laws_hold_for_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let set = ConstraintSet::EuclideanBall {
            center: dvector![0.1, -0.2, 0.3],
            radius: 0.8,
        };
        let metric = WeightedMetric::new(DMatrix::identity(3, 3) * 1.7).unwrap();
        for _ in 0..500 {
            let x = rand_vec(&mut rng, 3, 3.0);
            let y = rand_vec(&mut rng, 3, 3.0);
            let px = project(&set, &metric, &x).unwrap();
            let py = project(&set, &metric, &y).unwrap();
            // idempotence
            let ppx = project(&set, &metric, &px).unwrap();
            assert!((&ppx - &px).norm() < 1e-12);
            // nonexpansive
            assert!(metric.norm(&(&px - &py)) <= metric.norm(&(&x - &y)) + 1e-10);
            // firm monotonicity
            let lhs = metric.inner(&(&px - &py), &(&x - &y));
            let rhs = metric.norm(&(&px - &py)).powi(2);
            assert!(lhs >= rhs - 1e-10);
        }
    }

    #[test]
    fn phi2_fullspace_is_linear_map() {
        let spec = crate::model::scalar_spec(&[("R2", 2.0), ("B2", 1.5), ("D2", 0.5)]);
        let p2 = dvector![0.8];
        let q2 = dvector![-0.4];
        let v = phi2(&spec, 0.0, &p2, &q2).unwrap();
        let expect = -(1.5 * 0.8 + 0.5 * (-0.4)) / 2.0;
        assert!((v[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn phi2_interval_clamps_preimage() {
        let mut spec = crate::model::scalar_spec(&[]);
        spec.gamma2 = ConstraintSet::Interval { lo: -0.5, hi: 0.5 };
        // B2 = D2 = R2 = 1, p2 = q2 = 1 maps to -2, clamped to -0.5.
        let v = phi2(&spec, 0.0, &dvector![1.0], &dvector![1.0]).unwrap();
        assert_eq!(v[0], -0.5);
        // zero pre-image projects to zero
        let v0 = phi2(&spec, 0.0, &dvector![0.0], &dvector![0.0]).unwrap();
        assert_eq!(v0[0], 0.0);
    }

    #[test]
    fn phi1_fullspace_examples() {
        let spec = crate::model::scalar_spec(&[("D1", 0.0)]);
        let u = phi1(&spec, 0.0, &dvector![3.0], &dvector![0.0]).unwrap();
        assert_eq!(u[0], -3.0);
        let mut clamped = crate::model::scalar_spec(&[]);
        clamped.gamma1 = ConstraintSet::Interval { lo: -0.5, hi: 0.5 };
        let u = phi1(&clamped, 0.0, &dvector![1.0], &dvector![1.0]).unwrap();
        assert_eq!(u[0], -0.5);
    }

    #[test]
    fn jacobian_zero_on_clamped_coordinates() {
        let set = ConstraintSet::Box {
            lower: dvector![-1.0, -1.0],
            upper: dvector![1.0, 1.0],
        };
        let metric = WeightedMetric::identity(2);
        let jac = projection_jacobian(&set, &metric, &dvector![2.0, 0.0]).unwrap();
        assert_eq!(jac[(0, 0)], 0.0);
        assert_eq!(jac[(1, 1)], 1.0);
        assert_eq!(jac[(0, 1)], 0.0);
    }
}
