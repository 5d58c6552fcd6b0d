//! Property tests for the projection and lattice primitives.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use stackgame_core::lattice::{self, Lattice, NodeProcess};
use stackgame_core::projection::{project, ConstraintSet, WeightedMetric};

fn diag_metric(entries: Vec<f64>) -> WeightedMetric {
    let m = entries.len();
    WeightedMetric::new(DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            entries[i]
        } else {
            0.0
        }
    }))
    .unwrap()
}

proptest! {
    #[test]
    fn box_projection_is_idempotent_and_feasible(
        xs in prop::collection::vec(-5.0f64..5.0, 3),
        lo in -2.0f64..0.0,
        width in 0.1f64..3.0,
        weights in prop::collection::vec(0.3f64..3.0, 3),
    ) {
        let set = ConstraintSet::Box {
            lower: DVector::from_element(3, lo),
            upper: DVector::from_element(3, lo + width),
        };
        let metric = diag_metric(weights);
        let x = DVector::from_vec(xs);
        let px = project(&set, &metric, &x).unwrap();
        prop_assert!(set.contains(&px, 1e-12));
        let ppx = project(&set, &metric, &px).unwrap();
        prop_assert!((ppx - &px).norm() < 1e-12);
    }

    #[test]
    fn projection_shrinks_weighted_distance(
        xs in prop::collection::vec(-5.0f64..5.0, 2),
        ys in prop::collection::vec(-5.0f64..5.0, 2),
        radius in 0.1f64..2.0,
        scale in 0.3f64..3.0,
    ) {
        let set = ConstraintSet::EuclideanBall {
            center: DVector::zeros(2),
            radius,
        };
        let metric = WeightedMetric::new(DMatrix::identity(2, 2) * scale).unwrap();
        let x = DVector::from_vec(xs);
        let y = DVector::from_vec(ys);
        let px = project(&set, &metric, &x).unwrap();
        let py = project(&set, &metric, &y).unwrap();
        prop_assert!(metric.norm(&(px - py)) <= metric.norm(&(x - y)) + 1e-10);
    }

    #[test]
    fn lattice_reconstruction_is_exact(
        values in prop::collection::vec(-10.0f64..10.0, 8),
        steps in 1usize..5,
        horizon in 0.1f64..4.0,
    ) {
        let lat = Lattice::path_dependent(steps, horizon).unwrap();
        let mut proc = NodeProcess::zeros(&lat, 1);
        for j in 0..lat.layer_size(steps) {
            proc.set(steps, j, DVector::from_element(1, values[j % values.len()]));
        }
        let i = steps - 1;
        let expectation = lattice::conditional_expectation(&lat, &proc, i);
        let integrand = lattice::martingale_integrand(&lat, &proc, i);
        for j in 0..lat.layer_size(i) {
            let (down, up) = lat.successors(i, j);
            let up_rec = &expectation[j] + &integrand[j] * lat.sqrt_dt();
            let down_rec = &expectation[j] - &integrand[j] * lat.sqrt_dt();
            prop_assert!((up_rec - proc.at(i + 1, up)).amax() < 1e-12);
            prop_assert!((down_rec - proc.at(i + 1, down)).amax() < 1e-12);
        }
    }

    #[test]
    fn tower_property_reaches_terminal_mean(
        values in prop::collection::vec(-10.0f64..10.0, 16),
        horizon in 0.1f64..4.0,
    ) {
        let steps = 4usize;
        let lat = Lattice::recombining(steps, horizon).unwrap();
        let mut proc = NodeProcess::zeros(&lat, 1);
        for j in 0..lat.layer_size(steps) {
            proc.set(steps, j, DVector::from_element(1, values[j % values.len()]));
        }
        let mut layer = proc.layer(steps).to_vec();
        for i in (0..steps).rev() {
            let mut tmp = proc.clone();
            tmp.set_layer(i + 1, layer.clone());
            layer = lattice::conditional_expectation(&lat, &tmp, i);
        }
        let direct = proc.layer_expectation(&lat, steps);
        prop_assert!((layer[0][0] - direct[0]).abs() < 1e-10);
    }
}
