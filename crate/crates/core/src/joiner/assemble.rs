use nalgebra::{DMatrix, Vector2};
use rayon::prelude::*;

use super::JoinProblem;
use crate::error::{Error, Result};
use crate::grid::Grid2D;

/// Interpolated hit counts at or below this are treated as unobserved.
pub const EPS_HIT: f64 = 1e-9;

/// One residual `ω·M(m_j) − L_i(p)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub submap: usize,
    /// Projected point in submap metric coordinates.
    pub point: Vector2<f64>,
    pub weight: f64,
    /// `L_i(p)`, one entry of `H`.
    pub value: f64,
    /// `∇L_i(p)` per submap cell.
    pub gradient: Vector2<f64>,
    /// Row of `J_r` restricted to this residual's frame; zero for submap 0.
    pub jacobian: [f64; 3],
}

/// Linearization at the current frames. Observations are grouped by
/// observed cell; cell `c` owns `obs[offsets[c]..offsets[c + 1]]`.
#[derive(Debug, Clone, Default)]
pub struct ResidualSystem {
    pub n_frames: usize,
    /// Global linear index of each observed cell.
    pub cells: Vec<usize>,
    pub offsets: Vec<usize>,
    pub obs: Vec<Observation>,
    /// `Σ ω²` per observed cell: the diagonal of `J_Mᵀ J_M`.
    pub v_diag: Vec<f64>,
}

impl ResidualSystem {
    pub fn residual_count(&self) -> usize {
        self.obs.len()
    }

    pub fn observed_cells(&self) -> usize {
        self.cells.len()
    }

    /// Number of pose unknowns: 3 per frame except the gauge frame.
    pub fn pose_dim(&self) -> usize {
        3 * self.n_frames.saturating_sub(1)
    }

    pub fn cell_obs(&self, c: usize) -> &[Observation] {
        &self.obs[self.offsets[c]..self.offsets[c + 1]]
    }

    /// Column of `J_r` where the block of `submap` starts.
    pub fn pose_col(submap: usize) -> Option<usize> {
        (submap > 0).then(|| 3 * (submap - 1))
    }

    /// `H(X^r)` in residual order.
    pub fn h(&self) -> Vec<f64> {
        self.obs.iter().map(|o| o.value).collect()
    }

    /// Closed-form map value `Σωh / Σω²` for every observed cell.
    pub fn map_estimate(&self) -> Vec<f64> {
        (0..self.cells.len())
            .map(|c| {
                let s: f64 = self.cell_obs(c).iter().map(|o| o.weight * o.value).sum();
                s / self.v_diag[c]
            })
            .collect()
    }

    /// Objective with the map at its closed-form minimizer.
    pub fn reduced_objective(&self) -> f64 {
        let m = self.map_estimate();
        (0..self.cells.len())
            .map(|c| {
                self.cell_obs(c)
                    .iter()
                    .map(|o| (o.weight * m[c] - o.value).powi(2))
                    .sum::<f64>()
            })
            .sum()
    }

    /// `Σ (ω M(m_j) − L_i(p))²` for a full global map.
    pub fn objective_with(&self, map: &Grid2D) -> f64 {
        let values = map.values();
        (0..self.cells.len())
            .map(|c| {
                let m = values[self.cells[c]];
                self.cell_obs(c)
                    .iter()
                    .map(|o| (o.weight * m - o.value).powi(2))
                    .sum::<f64>()
            })
            .sum()
    }

    /// Dense `J_r` (residuals × pose_dim).
    pub fn jr_dense(&self) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.obs.len(), self.pose_dim());
        for (k, o) in self.obs.iter().enumerate() {
            if let Some(col) = Self::pose_col(o.submap) {
                for a in 0..3 {
                    j[(k, col + a)] = o.jacobian[a];
                }
            }
        }
        j
    }

    /// Dense `J_M` (residuals × observed cells).
    pub fn jm_dense(&self) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.obs.len(), self.cells.len());
        for c in 0..self.cells.len() {
            for k in self.offsets[c]..self.offsets[c + 1] {
                j[(k, c)] = self.obs[k].weight;
            }
        }
        j
    }
}

#[derive(Default)]
struct RowChunk {
    cells: Vec<usize>,
    counts: Vec<usize>,
    v: Vec<f64>,
    obs: Vec<Observation>,
}

/// Linearizes the problem at its current frames and hit map.
pub fn assemble(problem: &JoinProblem) -> Result<ResidualSystem> {
    let layout = &problem.global_layout;
    let placed = problem.placements();
    let hits = problem.global_hits().values();
    let chunks: Vec<RowChunk> = (0..layout.height)
        .into_par_iter()
        .map(|row| {
            let mut chunk = RowChunk::default();
            let active: Vec<(usize, &super::Placement)> = placed
                .iter()
                .enumerate()
                .filter(|(_, pl)| pl.covers_row(row))
                .collect();
            if active.is_empty() {
                return chunk;
            }
            for col in 0..layout.width {
                let index = row * layout.width + col;
                let total = hits[index];
                if !(total > 0.0) {
                    continue;
                }
                let w = layout.cell_to_world([col as i64, row as i64]);
                let start = chunk.obs.len();
                let mut v = 0.0;
                for &(i, pl) in &active {
                    if !pl.covers(col, row) {
                        continue;
                    }
                    let p = pl.local(&w);
                    let q = pl.cell_coords(&p);
                    let n = match pl.submap.hits.interp_bilinear(&q) {
                        Some(n) if n > EPS_HIT => n,
                        _ => continue,
                    };
                    let (value, gradient) = pl
                        .submap
                        .occupancy
                        .interp_gradient(&q)
                        .expect("occupancy and hits share a layout");
                    let weight = n / total;
                    let jacobian = if i == 0 {
                        [0.0; 3]
                    } else {
                        pl.jacobian_row(&w, &gradient)
                    };
                    v += weight * weight;
                    chunk.obs.push(Observation {
                        submap: i,
                        point: p,
                        weight,
                        value,
                        gradient,
                        jacobian,
                    });
                }
                let count = chunk.obs.len() - start;
                if count > 0 {
                    chunk.cells.push(index);
                    chunk.counts.push(count);
                    chunk.v.push(v);
                }
            }
            chunk
        })
        .collect();

    let n_cells: usize = chunks.iter().map(|c| c.cells.len()).sum();
    if n_cells == 0 {
        return Err(Error::NotSolvable);
    }
    let n_obs: usize = chunks.iter().map(|c| c.obs.len()).sum();
    let mut sys = ResidualSystem {
        n_frames: problem.len(),
        cells: Vec::with_capacity(n_cells),
        offsets: Vec::with_capacity(n_cells + 1),
        obs: Vec::with_capacity(n_obs),
        v_diag: Vec::with_capacity(n_cells),
    };
    sys.offsets.push(0);
    for chunk in chunks {
        sys.cells.extend_from_slice(&chunk.cells);
        sys.v_diag.extend_from_slice(&chunk.v);
        for count in chunk.counts {
            let last = *sys.offsets.last().unwrap();
            sys.offsets.push(last + count);
        }
        sys.obs.extend(chunk.obs);
    }
    Ok(sys)
}
