//! Full Gauss–Newton step over frames and map jointly: the oracle the
//! reduced solve is checked against.

use nalgebra::{DMatrix, DVector};

use super::sparse_chol::{SparseCholesky, UpperCsc};
use super::{assemble, JoinProblem, ResidualSystem};
use crate::error::{Error, Result};

/// Largest number of observed cells the dense path will factor.
pub const DENSE_CELL_LIMIT: usize = 20_000;

#[derive(Debug, Clone)]
pub struct FullStep {
    /// `Δ^r`, same layout as the reduced solve.
    pub pose: DVector<f64>,
    /// `Δ^M`, one entry per observed cell in `cells` order.
    pub map: DVector<f64>,
    /// Global linear index of each observed cell.
    pub cells: Vec<usize>,
}

fn current_map(problem: &JoinProblem, sys: &ResidualSystem) -> Vec<f64> {
    match &problem.map {
        Some(m) => sys.cells.iter().map(|&j| m.values()[j]).collect(),
        None => vec![0.0; sys.cells.len()],
    }
}

/// Solves `JᵀJ Δ = −JᵀF` with `J = [J_r J_M]` by dense Cholesky, using
/// `problem.map` (zeros if absent) as the current map.
pub fn full_gn_step(problem: &JoinProblem) -> Result<FullStep> {
    let sys = assemble(problem)?;
    let nc = sys.observed_cells();
    if nc > DENSE_CELL_LIMIT {
        return Err(Error::MemoryGuard {
            cells: nc,
            limit: DENSE_CELL_LIMIT,
        });
    }
    let m = current_map(problem, &sys);
    let d = sys.pose_dim();
    let n = d + nc;
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for c in 0..nc {
        let mc = d + c;
        for o in sys.cell_obs(c) {
            let f = o.weight * m[c] - o.value;
            a[(mc, mc)] += o.weight * o.weight;
            b[mc] -= o.weight * f;
            if let Some(col) = ResidualSystem::pose_col(o.submap) {
                let g = o.jacobian;
                for i in 0..3 {
                    for k in 0..3 {
                        a[(col + i, col + k)] += g[i] * g[k];
                    }
                    a[(col + i, mc)] += g[i] * o.weight;
                    a[(mc, col + i)] += g[i] * o.weight;
                    b[col + i] -= g[i] * f;
                }
            }
        }
    }
    let x = match a.clone().cholesky() {
        Some(chol) => chol.solve(&b),
        None => {
            return Err(Error::Degenerate {
                min_eigenvalue: a.symmetric_eigenvalues().min(),
            })
        }
    };
    Ok(FullStep {
        pose: x.rows(0, d).into_owned(),
        map: x.rows(d, nc).into_owned(),
        cells: sys.cells,
    })
}

/// Same step via sparse Cholesky on the full normal matrix, map unknowns
/// ordered before pose unknowns. Works on the given linearization.
pub fn full_gn_step_sparse(problem: &JoinProblem, sys: &ResidualSystem) -> Result<FullStep> {
    let m = current_map(problem, sys);
    let nc = sys.observed_cells();
    let d = sys.pose_dim();
    let mut u = DMatrix::<f64>::zeros(d, d);
    let mut w: Vec<Vec<(usize, f64)>> = vec![Vec::new(); d];
    let mut b = vec![0.0; nc + d];
    for c in 0..nc {
        for o in sys.cell_obs(c) {
            let f = o.weight * m[c] - o.value;
            b[c] -= o.weight * f;
            if let Some(col) = ResidualSystem::pose_col(o.submap) {
                let g = o.jacobian;
                for i in 0..3 {
                    for k in 0..3 {
                        u[(col + i, col + k)] += g[i] * g[k];
                    }
                    w[col + i].push((c, g[i] * o.weight));
                    b[nc + col + i] -= g[i] * f;
                }
            }
        }
    }
    let nnz = nc + w.iter().map(Vec::len).sum::<usize>() + d * (d + 1) / 2;
    let mut a = UpperCsc::with_capacity(nc + d, nnz);
    for c in 0..nc {
        a.push_column([(c, sys.v_diag[c])]);
    }
    for p in 0..d {
        let pose_rows = (0..=p).map(|q| (nc + q, u[(q, p)]));
        a.push_column(w[p].iter().copied().chain(pose_rows));
    }
    let chol = SparseCholesky::factor(&a).ok_or(Error::Degenerate {
        min_eigenvalue: f64::NAN,
    })?;
    chol.solve_in_place(&mut b);
    Ok(FullStep {
        pose: DVector::from_column_slice(&b[nc..]),
        map: DVector::from_column_slice(&b[..nc]),
        cells: sys.cells.clone(),
    })
}
