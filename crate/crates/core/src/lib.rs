//! Solvers for linear-quadratic leader-follower stochastic differential
//! games under convex control constraints.
//!
//! The library computes global leader-follower solutions three ways and
//! cross-checks them against each other:
//!
//! * [`fbsde`] solves the coupled forward-backward adjoint systems on a
//!   binomial lattice by Picard iteration, with a homotopy fallback for
//!   strongly coupled instances.
//! * [`riccati`] integrates the backward Riccati equation of the augmented
//!   (state, sensitivity) system, its symmetrized variant, and the
//!   single-player form used as an independent cross-check.
//! * [`oracle`] solves the same discrete problems by brute-force projected
//!   gradient descent and serves as ground truth for the other two.
//!
//! [`aclm`] handles the scalar closed-loop memoryless game, [`simulate`]
//! runs Euler-Maruyama Monte Carlo under any computed strategy, and
//! [`config`] parses the JSON documents consumed by the CLI.

pub mod aclm;
pub mod config;
pub mod error;
pub mod fbsde;
pub mod lattice;
pub(crate) mod linalg;
pub mod model;
pub mod oracle;
pub(crate) mod par;
pub mod projection;
pub mod riccati;
pub mod simulate;

pub use error::{Error, Result};
pub use model::GameSpec;

/// Cap the global worker pool at `threads`. A no-op once any parallel work
/// has run, and a no-op entirely in sequential builds; results never depend
/// on the pool size either way.
pub fn configure_thread_pool(threads: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
    }
}
