//! Table emitters. CSV floats are printed with 17 significant digits so
//! round-tripping through text loses nothing.

use serde_json::json;

use stackgame_core::aclm::AclmSolution;
use stackgame_core::fbsde::LeaderSystemSolution;
use stackgame_core::lattice::Lattice;
use stackgame_core::model::GameSpec;
use stackgame_core::riccati::RiccatiSolution;

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn vec_cells(v: &nalgebra::DVector<f64>) -> String {
    v.iter().map(|e| fmt(*e)).collect::<Vec<_>>().join(",")
}

fn header_block(name: &str, dim: usize) -> String {
    (0..dim).map(|i| format!("{name}{i}")).collect::<Vec<_>>().join(",")
}

/// Node table of a solved leader system. Terminal-layer rows leave the
/// integrand and control columns empty.
pub fn leader_solution_csv(lat: &Lattice, sol: &LeaderSystemSolution) -> String {
    let n = sol.x.dim();
    let m1 = sol.u.dim();
    let m2 = sol.v.dim();
    let mut out = String::new();
    out.push_str(&format!(
        "layer,node,t,{},{},{},{},{},{},{},{}\n",
        header_block("x", n),
        header_block("k", n),
        header_block("p1", n),
        header_block("p2", n),
        header_block("q1", n),
        header_block("q2", n),
        header_block("u", m1),
        header_block("v", m2),
    ));
    let empty = |dim: usize| vec![""; dim].join(",");
    for i in 0..=lat.n_steps() {
        for j in 0..lat.layer_size(i) {
            let interior = i < lat.n_steps();
            let q1 = if interior {
                vec_cells(sol.q1.at(i, j))
            } else {
                empty(n)
            };
            let q2 = if interior {
                vec_cells(sol.q2.at(i, j))
            } else {
                empty(n)
            };
            let u = if interior {
                vec_cells(sol.u.at(i, j))
            } else {
                empty(m1)
            };
            let v = if interior {
                vec_cells(sol.v.at(i, j))
            } else {
                empty(m2)
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                i,
                j,
                fmt(lat.time(i)),
                vec_cells(sol.x.at(i, j)),
                vec_cells(sol.k.at(i, j)),
                vec_cells(sol.p1.at(i, j)),
                vec_cells(sol.p2.at(i, j)),
                q1,
                q2,
                u,
                v,
            ));
        }
    }
    out
}

pub fn leader_solution_json(lat: &Lattice, sol: &LeaderSystemSolution) -> Vec<serde_json::Value> {
    let mut rows = Vec::new();
    for i in 0..=lat.n_steps() {
        for j in 0..lat.layer_size(i) {
            let interior = i < lat.n_steps();
            rows.push(json!({
                "layer": i,
                "node": j,
                "t": lat.time(i),
                "x": sol.x.at(i, j).as_slice(),
                "k": sol.k.at(i, j).as_slice(),
                "p1": sol.p1.at(i, j).as_slice(),
                "p2": sol.p2.at(i, j).as_slice(),
                "q1": interior.then(|| sol.q1.at(i, j).as_slice().to_vec()),
                "q2": interior.then(|| sol.q2.at(i, j).as_slice().to_vec()),
                "u": interior.then(|| sol.u.at(i, j).as_slice().to_vec()),
                "v": interior.then(|| sol.v.at(i, j).as_slice().to_vec()),
            }));
        }
    }
    rows
}

/// Node table of a solved closed-loop coefficient system.
pub fn aclm_solution_csv(lat: &Lattice, sol: &AclmSolution) -> String {
    let mut out = String::from("layer,node,t,alpha,beta,gamma,delta1,delta2,u2,u1,x_star\n");
    for i in 0..=lat.n_steps() {
        for j in 0..lat.layer_size(i) {
            let interior = i < lat.n_steps();
            let d1 = if interior {
                fmt(sol.delta1.at(i, j)[0])
            } else {
                String::new()
            };
            let d2 = if interior {
                fmt(sol.delta2.at(i, j)[0])
            } else {
                String::new()
            };
            let u2 = if interior {
                fmt(sol.switch.at(i, j)[0])
            } else {
                String::new()
            };
            let u1 = if interior {
                fmt(sol.u1_star.at(i, j)[0])
            } else {
                String::new()
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                i,
                j,
                fmt(lat.time(i)),
                fmt(sol.alpha.at(i, j)[0]),
                fmt(sol.beta.at(i, j)[0]),
                fmt(sol.gamma.at(i, j)[0]),
                d1,
                d2,
                u2,
                u1,
                fmt(sol.x_star.at(i, j)[0]),
            ));
        }
    }
    out
}

pub fn aclm_solution_json(lat: &Lattice, sol: &AclmSolution) -> Vec<serde_json::Value> {
    let mut rows = Vec::new();
    for i in 0..=lat.n_steps() {
        for j in 0..lat.layer_size(i) {
            let interior = i < lat.n_steps();
            rows.push(json!({
                "layer": i,
                "node": j,
                "t": lat.time(i),
                "alpha": sol.alpha.at(i, j)[0],
                "beta": sol.beta.at(i, j)[0],
                "gamma": sol.gamma.at(i, j)[0],
                "delta1": interior.then(|| sol.delta1.at(i, j)[0]),
                "delta2": interior.then(|| sol.delta2.at(i, j)[0]),
                "u2": interior.then(|| sol.switch.at(i, j)[0]),
                "u1": interior.then(|| sol.u1_star.at(i, j)[0]),
                "x_star": sol.x_star.at(i, j)[0],
            }));
        }
    }
    rows
}

/// Time series of the backward Riccati solution: entries of both matrices
/// in row-major order.
pub fn riccati_csv(sol: &RiccatiSolution) -> String {
    let dim = sol.r[0].nrows();
    let mut header = String::from("t");
    for i in 0..dim {
        for j in 0..dim {
            header.push_str(&format!(",r_{i}{j}"));
        }
    }
    for i in 0..dim {
        for j in 0..dim {
            header.push_str(&format!(",xi_{i}{j}"));
        }
    }
    header.push('\n');
    let mut out = header;
    for (idx, t) in sol.times.iter().enumerate() {
        out.push_str(&fmt(*t));
        for i in 0..dim {
            for j in 0..dim {
                out.push_str(&format!(",{}", fmt(sol.r[idx][(i, j)])));
            }
        }
        for i in 0..dim {
            for j in 0..dim {
                out.push_str(&format!(",{}", fmt(sol.xi[idx][(i, j)])));
            }
        }
        out.push('\n');
    }
    out
}

/// Worst node defect of the feedback relation between stacked adjoints and
/// the Riccati matrices, over the whole tree.
pub fn duality_max_error(
    spec: &GameSpec,
    lat: &Lattice,
    sol: &LeaderSystemSolution,
    riccati: &RiccatiSolution,
) -> f64 {
    let n = spec.n;
    let mut worst = 0.0f64;
    for i in 0..=lat.n_steps() {
        let t = lat.time(i);
        let r = riccati.r_at(t);
        let xi = riccati.xi_at(t);
        for j in 0..lat.layer_size(i) {
            let mut state = nalgebra::DVector::zeros(2 * n);
            state.rows_mut(0, n).copy_from(sol.x.at(i, j));
            state.rows_mut(n, n).copy_from(sol.k.at(i, j));
            let p_pred = &r * &state;
            for d in 0..n {
                worst = worst.max((sol.p1.at(i, j)[d] - p_pred[d]).abs());
                worst = worst.max((sol.p2.at(i, j)[d] - p_pred[n + d]).abs());
            }
            if i < lat.n_steps() {
                let q_pred = &xi * &state;
                for d in 0..n {
                    worst = worst.max((sol.q1.at(i, j)[d] - q_pred[d]).abs());
                    worst = worst.max((sol.q2.at(i, j)[d] - q_pred[n + d]).abs());
                }
            }
        }
    }
    worst
}
