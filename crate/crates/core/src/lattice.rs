//! Binomial discretization of the driving Brownian motion. Increments are
//! +/- sqrt(dt) with probability 1/2, so conditional expectations and
//! martingale-integrand extraction are exact and backward equations become
//! finite recursions.
//!
//! Two topologies are supported. The recombining lattice keeps O(N^2) nodes
//! and is valid whenever the solved dynamics actually recombine (scalar
//! homogeneous linear instances); solvers verify this and refuse otherwise.
//! The path-dependent tree stores all 2^i histories and is always valid, at
//! the cost of a hard cap on depth.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Depth cap for the full binary tree.
pub const PATH_TREE_MAX_STEPS: usize = 16;
/// Depth cap for the recombining lattice.
pub const RECOMBINING_MAX_STEPS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeKind {
    Recombining,
    PathDependent,
}

#[derive(Debug, Clone)]
pub struct Lattice {
    kind: TreeKind,
    n_steps: usize,
    horizon: f64,
    dt: f64,
    sqrt_dt: f64,
}

impl Lattice {
    pub fn recombining(n_steps: usize, horizon: f64) -> Result<Self> {
        if n_steps == 0 || n_steps > RECOMBINING_MAX_STEPS {
            return Err(Error::InvalidLattice(format!(
                "recombining lattice needs 1..={RECOMBINING_MAX_STEPS} steps, got {n_steps}"
            )));
        }
        Self::build(TreeKind::Recombining, n_steps, horizon)
    }

    pub fn path_dependent(n_steps: usize, horizon: f64) -> Result<Self> {
        if n_steps == 0 || n_steps > PATH_TREE_MAX_STEPS {
            return Err(Error::InvalidLattice(format!(
                "path-dependent tree needs 1..={PATH_TREE_MAX_STEPS} steps, got {n_steps}"
            )));
        }
        Self::build(TreeKind::PathDependent, n_steps, horizon)
    }

    fn build(kind: TreeKind, n_steps: usize, horizon: f64) -> Result<Self> {
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(Error::InvalidLattice("horizon must be positive".into()));
        }
        let dt = horizon / n_steps as f64;
        Ok(Lattice {
            kind,
            n_steps,
            horizon,
            dt,
            sqrt_dt: dt.sqrt(),
        })
    }

    pub fn kind(&self) -> TreeKind {
        self.kind
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sqrt_dt(&self) -> f64 {
        self.sqrt_dt
    }

    pub fn time(&self, layer: usize) -> f64 {
        if layer == self.n_steps {
            self.horizon
        } else {
            layer as f64 * self.dt
        }
    }

    pub fn layer_size(&self, layer: usize) -> usize {
        match self.kind {
            TreeKind::Recombining => layer + 1,
            TreeKind::PathDependent => 1usize << layer,
        }
    }

    /// Successor indices at `layer + 1` as `(down, up)`.
    pub fn successors(&self, _layer: usize, node: usize) -> (usize, usize) {
        match self.kind {
            TreeKind::Recombining => (node, node + 1),
            TreeKind::PathDependent => (node << 1, (node << 1) | 1),
        }
    }

    /// Probability of reaching `node` at `layer` from the root.
    pub fn weight(&self, layer: usize, node: usize) -> f64 {
        match self.kind {
            TreeKind::PathDependent => 0.5f64.powi(layer as i32),
            TreeKind::Recombining => {
                // C(layer, node) / 2^layer via a multiplicative recurrence.
                let mut acc = 0.5f64.powi(layer as i32);
                let k = node.min(layer - node.min(layer));
                for i in 0..k {
                    acc *= (layer - i) as f64 / (i + 1) as f64;
                }
                acc
            }
        }
    }

    /// Cumulative Brownian value at a node.
    pub fn brownian_value(&self, layer: usize, node: usize) -> f64 {
        match self.kind {
            TreeKind::Recombining => (2.0 * node as f64 - layer as f64) * self.sqrt_dt,
            TreeKind::PathDependent => {
                let ups = (node as u64).count_ones() as f64;
                (2.0 * ups - layer as f64) * self.sqrt_dt
            }
        }
    }
}

/// One value per node of a lattice, uniform dimension across nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeProcess {
    dim: usize,
    layers: Vec<Vec<DVector<f64>>>,
}

impl NodeProcess {
    /// Zero process over layers `0..=n_steps`.
    pub fn zeros(lattice: &Lattice, dim: usize) -> Self {
        let layers = (0..=lattice.n_steps())
            .map(|i| vec![DVector::zeros(dim); lattice.layer_size(i)])
            .collect();
        NodeProcess { dim, layers }
    }

    /// Zero process over the non-terminal layers `0..n_steps` (controls).
    pub fn zeros_interior(lattice: &Lattice, dim: usize) -> Self {
        let layers = (0..lattice.n_steps())
            .map(|i| vec![DVector::zeros(dim); lattice.layer_size(i)])
            .collect();
        NodeProcess { dim, layers }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, i: usize) -> &[DVector<f64>] {
        &self.layers[i]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut Vec<DVector<f64>> {
        &mut self.layers[i]
    }

    pub fn set_layer(&mut self, i: usize, values: Vec<DVector<f64>>) {
        debug_assert_eq!(values.len(), self.layers[i].len());
        self.layers[i] = values;
    }

    pub fn at(&self, layer: usize, node: usize) -> &DVector<f64> {
        &self.layers[layer][node]
    }

    pub fn set(&mut self, layer: usize, node: usize, value: DVector<f64>) {
        self.layers[layer][node] = value;
    }

    /// Sup-norm distance to another process with the same shape.
    pub fn sup_distance(&self, other: &NodeProcess) -> f64 {
        let mut worst = 0.0f64;
        for (la, lb) in self.layers.iter().zip(other.layers.iter()) {
            for (a, b) in la.iter().zip(lb.iter()) {
                worst = worst.max(crate::linalg::sup_distance(a, b));
            }
        }
        worst
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.iter())
            .fold(0.0f64, |acc, v| acc.max(v.amax()))
    }

    /// Probability-weighted mean over one layer.
    pub fn layer_expectation(&self, lattice: &Lattice, layer: usize) -> DVector<f64> {
        let mut acc = DVector::zeros(self.dim);
        for (j, v) in self.layers[layer].iter().enumerate() {
            acc += v * lattice.weight(layer, j);
        }
        acc
    }
}

/// Conditional expectation of layer `i + 1` values seen from layer `i`:
/// the equally weighted mean over the two successors of each node.
pub fn conditional_expectation(lattice: &Lattice, proc: &NodeProcess, layer: usize) -> Vec<DVector<f64>> {
    (0..lattice.layer_size(layer))
        .map(|j| {
            let (down, up) = lattice.successors(layer, j);
            (proc.at(layer + 1, down) + proc.at(layer + 1, up)) * 0.5
        })
        .collect()
}

/// Martingale integrand of layer `i + 1` values seen from layer `i`: the
/// unique `z` with `value = E[value] + z * dW` at both successors.
pub fn martingale_integrand(lattice: &Lattice, proc: &NodeProcess, layer: usize) -> Vec<DVector<f64>> {
    let scale = 1.0 / (2.0 * lattice.sqrt_dt());
    (0..lattice.layer_size(layer))
        .map(|j| {
            let (down, up) = lattice.successors(layer, j);
            (proc.at(layer + 1, up) - proc.at(layer + 1, down)) * scale
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn increments_have_exact_moments() {
        let lat = Lattice::recombining(4, 1.0).unwrap();
        let up = lat.sqrt_dt();
        let down = -lat.sqrt_dt();
        assert_eq!(0.5 * up + 0.5 * down, 0.0);
        assert!((0.5 * up * up + 0.5 * down * down - lat.dt()).abs() < 1e-16);
    }

    #[test]
    fn constant_process_expectation_is_constant() {
        let lat = Lattice::recombining(3, 1.0).unwrap();
        let mut proc = NodeProcess::zeros(&lat, 1);
        for i in 0..=3 {
            for j in 0..lat.layer_size(i) {
                proc.set(i, j, dvector![4.25]);
            }
        }
        let e = conditional_expectation(&lat, &proc, 1);
        assert!(e.iter().all(|v| (v[0] - 4.25).abs() < 1e-16));
        let z = martingale_integrand(&lat, &proc, 1);
        assert!(z.iter().all(|v| v[0] == 0.0));
    }

    #[test]
    fn martingale_increment_has_zero_root_expectation_and_unit_integrand() {
        let lat = Lattice::recombining(1, 0.25).unwrap();
        let mut proc = NodeProcess::zeros(&lat, 1);
        proc.set(1, 0, dvector![-lat.sqrt_dt()]);
        proc.set(1, 1, dvector![lat.sqrt_dt()]);
        let e = conditional_expectation(&lat, &proc, 0);
        assert_eq!(e[0][0], 0.0);
        let z = martingale_integrand(&lat, &proc, 0);
        assert!((z[0][0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn integrand_formula_example() {
        // successors (5, 1) with dt = 0.25 give (5 - 1) / (2 * 0.5) = 4
        let lat = Lattice::recombining(1, 0.25).unwrap();
        let mut proc = NodeProcess::zeros(&lat, 1);
        proc.set(1, 0, dvector![1.0]);
        proc.set(1, 1, dvector![5.0]);
        let z = martingale_integrand(&lat, &proc, 0);
        assert!((z[0][0] - 4.0).abs() < 1e-15);
        let e = conditional_expectation(&lat, &proc, 0);
        assert!((e[0][0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn reconstruction_identity_exact() {
        let lat = Lattice::path_dependent(5, 1.0).unwrap();
        let mut proc = NodeProcess::zeros(&lat, 2);
        // arbitrary values
        for i in 0..=5 {
            for j in 0..lat.layer_size(i) {
                proc.set(i, j, dvector![(i * 7 + j) as f64 * 0.31, (j as f64).cos()]);
            }
        }
        for i in 0..5 {
            let e = conditional_expectation(&lat, &proc, i);
            let z = martingale_integrand(&lat, &proc, i);
            for j in 0..lat.layer_size(i) {
                let (down, up) = lat.successors(i, j);
                let rec_up = &e[j] + &z[j] * lat.sqrt_dt();
                let rec_down = &e[j] - &z[j] * lat.sqrt_dt();
                assert!((rec_up - proc.at(i + 1, up)).amax() < 1e-14);
                assert!((rec_down - proc.at(i + 1, down)).amax() < 1e-14);
            }
        }
    }

    #[test]
    fn tower_property_matches_binomial_mean() {
        let lat = Lattice::recombining(6, 2.0).unwrap();
        let mut proc = NodeProcess::zeros(&lat, 1);
        for j in 0..lat.layer_size(6) {
            proc.set(6, j, dvector![(j as f64).powi(2) - 3.0]);
        }
        // iterate conditional expectations down to the root
        let mut layer_vals: Vec<DVector<f64>> = proc.layer(6).to_vec();
        for i in (0..6).rev() {
            let mut tmp = proc.clone();
            tmp.set_layer(i + 1, layer_vals.clone());
            layer_vals = conditional_expectation(&lat, &tmp, i);
        }
        let direct = proc.layer_expectation(&lat, 6);
        assert!((layer_vals[0][0] - direct[0]).abs() < 1e-12);
    }

    #[test]
    fn weights_sum_to_one() {
        for lat in [
            Lattice::recombining(9, 1.0).unwrap(),
            Lattice::path_dependent(9, 1.0).unwrap(),
        ] {
            for i in 0..=9 {
                let total: f64 = (0..lat.layer_size(i)).map(|j| lat.weight(i, j)).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn path_tree_depth_cap_enforced() {
        assert!(Lattice::path_dependent(17, 1.0).is_err());
        assert!(Lattice::path_dependent(16, 1.0).is_ok());
    }
}
