use std::borrow::Cow;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{assemble, JoinProblem, ResidualSystem};
use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::se2::Pose2;

/// Cells per parallel work unit in the reduced-system accumulation. Fixed
/// so the summation order does not depend on the thread count.
const CELLS_PER_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GnOptions {
    /// Iteration cap `τ_k`.
    pub max_iterations: usize,
    /// Stop once `‖Δ^r‖² < τ_Δ`.
    pub delta_threshold: f64,
}

impl Default for GnOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            delta_threshold: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GnReport {
    pub iterations: usize,
    pub objective_trace: Vec<f64>,
    pub delta_norm_trace: Vec<f64>,
    pub converged: bool,
    pub assemble_seconds: f64,
    pub solve_seconds: f64,
    /// Frames after each iteration, starting with the initial frames.
    #[serde(skip)]
    pub frames_trace: Vec<Vec<Pose2>>,
}

fn accumulate(
    sys: &ResidualSystem,
    cells: std::ops::Range<usize>,
    s: &mut DMatrix<f64>,
    rhs: &mut DVector<f64>,
) {
    let mut g: Vec<(usize, f64, [f64; 3])> = Vec::with_capacity(8);
    for c in cells {
        let obs = sys.cell_obs(c);
        let v = sys.v_diag[c];
        let m_hat = obs.iter().map(|o| o.weight * o.value).sum::<f64>() / v;
        g.clear();
        for o in obs {
            if let Some(col) = ResidualSystem::pose_col(o.submap) {
                g.push((col, o.weight, o.jacobian));
                let e = o.value - o.weight * m_hat;
                for a in 0..3 {
                    rhs[col + a] += o.jacobian[a] * e;
                }
            }
        }
        for (ka, &(ca, wa, ga)) in g.iter().enumerate() {
            for (kb, &(cb, wb, gb)) in g.iter().enumerate() {
                let coef = if ka == kb { 1.0 } else { 0.0 } - wa * wb / v;
                for a in 0..3 {
                    let ca_a = coef * ga[a];
                    for b in 0..3 {
                        s[(ca + a, cb + b)] += ca_a * gb[b];
                    }
                }
            }
        }
    }
}

/// Reduced pose system `S Δ^r = rhs` (map block eliminated per cell).
pub(crate) fn reduced_system(sys: &ResidualSystem) -> (DMatrix<f64>, DVector<f64>) {
    let d = sys.pose_dim();
    let n = sys.observed_cells();
    let partials: Vec<(DMatrix<f64>, DVector<f64>)> = (0..n.div_ceil(CELLS_PER_CHUNK))
        .into_par_iter()
        .map(|k| {
            let mut s = DMatrix::zeros(d, d);
            let mut rhs = DVector::zeros(d);
            let end = ((k + 1) * CELLS_PER_CHUNK).min(n);
            accumulate(sys, k * CELLS_PER_CHUNK..end, &mut s, &mut rhs);
            (s, rhs)
        })
        .collect();
    let mut s = DMatrix::zeros(d, d);
    let mut rhs = DVector::zeros(d);
    for (ps, pr) in partials {
        s += ps;
        rhs += pr;
    }
    (s, rhs)
}

/// Frame increments for all non-gauge frames, stacked `(x, y, θ)` per frame.
/// Reads only weights, submap values and their gradients; never the map.
pub fn solve_pose_increment(sys: &ResidualSystem) -> Result<DVector<f64>> {
    let d = sys.pose_dim();
    if d == 0 {
        return Ok(DVector::zeros(0));
    }
    let (s, rhs) = reduced_system(sys);
    if s.iter().chain(rhs.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteResidual { iteration: 0 });
    }
    match s.clone().cholesky() {
        Some(chol) => Ok(chol.solve(&rhs)),
        None => {
            let min_eigenvalue = s.symmetric_eigenvalues().min();
            Err(Error::Degenerate { min_eigenvalue })
        }
    }
}

/// Additive update of frames 1.. with angle normalization; frame 0 is untouched.
pub fn apply_increment(frames: &[Pose2], delta: &DVector<f64>) -> Vec<Pose2> {
    assert_eq!(delta.len(), 3 * (frames.len() - 1));
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| match ResidualSystem::pose_col(i) {
            Some(c) => f.plus(&Vector3::new(delta[c], delta[c + 1], delta[c + 2])),
            None => *f,
        })
        .collect()
}

/// Pose-only Gauss–Newton. On success `problem` holds the final frames and
/// the hit map for them.
pub fn pose_only_gn(problem: &mut JoinProblem, opts: &GnOptions) -> Result<(Vec<Pose2>, GnReport)> {
    let mut report = GnReport::default();
    let t0 = Instant::now();
    let mut sys = assemble(problem)?;
    report.assemble_seconds += t0.elapsed().as_secs_f64();
    let obj = sys.reduced_objective();
    if !obj.is_finite() {
        return Err(Error::NonFiniteResidual { iteration: 0 });
    }
    report.objective_trace.push(obj);
    report.frames_trace.push(problem.frames().to_vec());

    let mut increases = 0;
    for k in 0..opts.max_iterations {
        let t0 = Instant::now();
        let delta = solve_pose_increment(&sys).map_err(|e| match e {
            Error::NonFiniteResidual { .. } => Error::NonFiniteResidual { iteration: k + 1 },
            e => e,
        })?;
        report.solve_seconds += t0.elapsed().as_secs_f64();
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteResidual { iteration: k + 1 });
        }
        let frames = apply_increment(problem.frames(), &delta);

        let t0 = Instant::now();
        problem.set_frames(frames)?;
        sys = assemble(problem)?;
        report.assemble_seconds += t0.elapsed().as_secs_f64();

        let obj = sys.reduced_objective();
        if !obj.is_finite() {
            return Err(Error::NonFiniteResidual { iteration: k + 1 });
        }
        let sq = delta.norm_squared();
        report.iterations += 1;
        report.delta_norm_trace.push(sq.sqrt());
        report.frames_trace.push(problem.frames().to_vec());
        let prev = *report.objective_trace.last().unwrap();
        report.objective_trace.push(obj);

        increases = if obj > prev { increases + 1 } else { 0 };
        if increases >= 3 {
            return Err(Error::Diverged(increases));
        }
        if sq < opts.delta_threshold {
            report.converged = true;
            break;
        }
    }
    Ok((problem.frames().to_vec(), report))
}

fn at_frames<'a>(problem: &'a JoinProblem, frames: &[Pose2]) -> Result<Cow<'a, JoinProblem>> {
    if frames == problem.frames() {
        Ok(Cow::Borrowed(problem))
    } else {
        let mut p = problem.clone();
        p.set_frames(frames.to_vec())?;
        Ok(Cow::Owned(p))
    }
}

/// Closed-form global map at `frames`: `Σ ω L_i(p) / Σ ω²` per observed
/// cell, 0 (unknown) elsewhere.
pub fn recover_map(problem: &JoinProblem, frames: &[Pose2]) -> Result<Grid2D> {
    let p = at_frames(problem, frames)?;
    let sys = assemble(&p)?;
    let mut map = Grid2D::zeros(problem.global_layout);
    let values = map.values_mut();
    for (c, m) in sys.map_estimate().into_iter().enumerate() {
        values[sys.cells[c]] = m;
    }
    Ok(map)
}

/// `Σ_i Σ_j (ω M(m_j) − L_i(p))²` at `frames` with global map `map`.
pub fn objective(problem: &JoinProblem, frames: &[Pose2], map: &Grid2D) -> Result<f64> {
    if map.layout() != &problem.global_layout {
        return Err(Error::Validation(
            "map layout differs from the global layout".into(),
        ));
    }
    let p = at_frames(problem, frames)?;
    Ok(assemble(&p)?.objective_with(map))
}
