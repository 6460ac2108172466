//! Joint optimization of submap frames and the global occupancy map.
//!
//! Every global cell `m_j` is projected into each submap; wherever the
//! submap has observations it contributes a residual `ω·M(m_j) − L_i(p)`
//! with `ω = N^{L_i}(p) / N^M(m_j)`. The map block of the normal equations
//! is diagonal, so it is eliminated per cell and only the frame increments
//! are solved for. The map is recovered in closed form afterwards.

mod assemble;
mod full;
mod gn;
pub mod sparse_chol;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use crate::builder::Submap;
use crate::error::{Error, Result};
use crate::grid::{Grid2D, GridLayout};
use crate::se2::{rot_matrix, rot_matrix_derivative, Pose2};

pub use assemble::{assemble, Observation, ResidualSystem, EPS_HIT};
pub use full::{full_gn_step, full_gn_step_sparse, FullStep, DENSE_CELL_LIMIT};
pub use gn::{
    apply_increment, objective, pose_only_gn, recover_map, solve_pose_increment, GnOptions,
    GnReport,
};

#[derive(Debug, Clone)]
pub struct JoinProblem {
    pub submaps: Vec<Submap>,
    frames: Vec<Pose2>,
    pub global_layout: GridLayout,
    global_hits: Grid2D,
    /// Global occupancy values; only the full-GN oracle reads them.
    pub map: Option<Grid2D>,
}

impl JoinProblem {
    pub fn new(
        submaps: Vec<Submap>,
        frames: Vec<Pose2>,
        global_layout: GridLayout,
    ) -> Result<Self> {
        if submaps.is_empty() {
            return Err(Error::EmptyInput("no submaps"));
        }
        if submaps.len() != frames.len() {
            return Err(Error::LengthMismatch {
                left: submaps.len(),
                right: frames.len(),
            });
        }
        global_layout.validate()?;
        check_gauge(&frames)?;
        let global_hits = hit_map(&submaps, &frames, &global_layout);
        Ok(Self {
            submaps,
            frames,
            global_layout,
            global_hits,
            map: None,
        })
    }

    /// Builds the problem on a layout sized from the initial frames.
    pub fn with_margin(
        submaps: Vec<Submap>,
        frames: Vec<Pose2>,
        margin: f64,
        s: f64,
    ) -> Result<Self> {
        let layout = compute_global_layout(&submaps, &frames, margin, s)?;
        Self::new(submaps, frames, layout)
    }

    pub fn frames(&self) -> &[Pose2] {
        &self.frames
    }

    pub fn global_hits(&self) -> &Grid2D {
        &self.global_hits
    }

    /// Replaces the frames and rebuilds `N^M` for them.
    pub fn set_frames(&mut self, frames: Vec<Pose2>) -> Result<()> {
        if frames.len() != self.submaps.len() {
            return Err(Error::LengthMismatch {
                left: self.submaps.len(),
                right: frames.len(),
            });
        }
        check_gauge(&frames)?;
        self.frames = frames;
        self.global_hits = build_global_hit_map(self);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.submaps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.submaps.is_empty()
    }

    pub(crate) fn placements(&self) -> Vec<Placement<'_>> {
        placements(&self.submaps, &self.frames, &self.global_layout)
    }
}

fn check_gauge(frames: &[Pose2]) -> Result<()> {
    match frames.first() {
        Some(f) if f.t == Vector2::zeros() && f.theta == 0.0 => Ok(()),
        Some(_) => Err(Error::Validation("frame 0 must be the identity".into())),
        None => Err(Error::EmptyInput("no frames")),
    }
}

/// Axis-aligned box around all transformed submap corners, padded by
/// `margin`. Cell centers sit on multiples of `s`.
pub fn compute_global_layout(
    submaps: &[Submap],
    frames: &[Pose2],
    margin: f64,
    s: f64,
) -> Result<GridLayout> {
    if submaps.is_empty() {
        return Err(Error::EmptyInput("no submaps"));
    }
    if submaps.len() != frames.len() {
        return Err(Error::LengthMismatch {
            left: submaps.len(),
            right: frames.len(),
        });
    }
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::Validation(format!(
            "global resolution must be positive, got {s}"
        )));
    }
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::Validation(format!(
            "margin must be non-negative, got {margin}"
        )));
    }
    let mut lo = Vector2::repeat(f64::INFINITY);
    let mut hi = Vector2::repeat(f64::NEG_INFINITY);
    for (submap, frame) in submaps.iter().zip(frames) {
        for c in corners(submap.layout()) {
            let w = frame.transform_point(&c);
            lo = lo.inf(&w);
            hi = hi.sup(&w);
        }
    }
    lo.add_scalar_mut(-margin);
    hi.add_scalar_mut(margin);
    let k0 = (lo / s).map(|v| (v + 0.5 + 1e-9).floor());
    let k1 = (hi / s).map(|v| (v - 0.5 - 1e-9).ceil());
    let width = ((k1.x - k0.x) as usize + 1).max(2);
    let height = ((k1.y - k0.y) as usize + 1).max(2);
    GridLayout::new(width, height, k0 * s, s)
}

fn corners(layout: &GridLayout) -> [Vector2<f64>; 4] {
    let (a, b) = layout.extent();
    [a, Vector2::new(b.x, a.y), b, Vector2::new(a.x, b.y)]
}

/// A submap placed in the global frame, with the window of global cells
/// that can possibly land inside it.
pub(crate) struct Placement<'a> {
    pub submap: &'a Submap,
    t: Vector2<f64>,
    r: Matrix2<f64>,
    dr: Matrix2<f64>,
    cols: (usize, usize),
    rows: (usize, usize),
}

impl Placement<'_> {
    #[inline]
    pub fn covers(&self, col: usize, row: usize) -> bool {
        col >= self.cols.0 && col <= self.cols.1 && row >= self.rows.0 && row <= self.rows.1
    }

    #[inline]
    pub fn covers_row(&self, row: usize) -> bool {
        row >= self.rows.0 && row <= self.rows.1 && self.cols.0 <= self.cols.1
    }

    /// Metric position of world point `w` in the submap frame.
    #[inline]
    pub fn local(&self, w: &Vector2<f64>) -> Vector2<f64> {
        self.r * (w - self.t)
    }

    /// Continuous submap cell coordinates of a local point.
    #[inline]
    pub fn cell_coords(&self, p: &Vector2<f64>) -> Vector2<f64> {
        self.submap.layout().world_to_cell(p)
    }

    /// Row of `J_r` for a residual `−L_i(p)` given the per-cell gradient.
    #[inline]
    pub fn jacobian_row(&self, w: &Vector2<f64>, grad: &Vector2<f64>) -> [f64; 3] {
        let gm = grad / self.submap.layout().resolution;
        let a = self.dr * (w - self.t);
        let r = &self.r;
        [
            gm.x * r[(0, 0)] + gm.y * r[(1, 0)],
            gm.x * r[(0, 1)] + gm.y * r[(1, 1)],
            -(gm.x * a.x + gm.y * a.y),
        ]
    }
}

pub(crate) fn placements<'a>(
    submaps: &'a [Submap],
    frames: &[Pose2],
    global: &GridLayout,
) -> Vec<Placement<'a>> {
    submaps
        .iter()
        .zip(frames)
        .map(|(submap, frame)| {
            let mut lo = Vector2::repeat(f64::INFINITY);
            let mut hi = Vector2::repeat(f64::NEG_INFINITY);
            for c in corners(submap.layout()) {
                let q = global.world_to_cell(&frame.transform_point(&c));
                lo = lo.inf(&q);
                hi = hi.sup(&q);
            }
            let clamp = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64) as usize;
            let empty_x = hi.x < 0.0 || lo.x > (global.width - 1) as f64;
            let empty_y = hi.y < 0.0 || lo.y > (global.height - 1) as f64;
            let cols = if empty_x || empty_y {
                (1, 0)
            } else {
                (
                    clamp(lo.x.floor(), global.width),
                    clamp(hi.x.ceil(), global.width),
                )
            };
            let rows = if empty_x || empty_y {
                (1, 0)
            } else {
                (
                    clamp(lo.y.floor(), global.height),
                    clamp(hi.y.ceil(), global.height),
                )
            };
            Placement {
                submap,
                t: frame.t,
                r: rot_matrix(frame.theta),
                dr: rot_matrix_derivative(frame.theta),
                cols,
                rows,
            }
        })
        .collect()
}

fn hit_map(submaps: &[Submap], frames: &[Pose2], layout: &GridLayout) -> Grid2D {
    let placed = placements(submaps, frames, layout);
    let width = layout.width;
    let rows: Vec<Vec<f64>> = (0..layout.height)
        .into_par_iter()
        .map(|row| {
            let mut out = vec![0.0; width];
            for pl in placed.iter().filter(|pl| pl.covers_row(row)) {
                for col in pl.cols.0..=pl.cols.1 {
                    let w = layout.cell_to_world([col as i64, row as i64]);
                    let q = pl.cell_coords(&pl.local(&w));
                    if let Some(n) = pl.submap.hits.interp_bilinear(&q) {
                        out[col] += n;
                    }
                }
            }
            out
        })
        .collect();
    Grid2D::from_values(*layout, rows.concat()).expect("layout already validated")
}

/// `N^M`: the local hit maps projected through the current frames and summed.
pub fn build_global_hit_map(problem: &JoinProblem) -> Grid2D {
    hit_map(&problem.submaps, &problem.frames, &problem.global_layout)
}

/// Reads an initial-frames file: one `id x y theta` per line.
pub fn read_frames(path: &Path) -> Result<Vec<(usize, Pose2)>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound {
            what: "frames file",
            path: path.to_path_buf(),
        },
        _ => Error::Io(e),
    })?;
    parse_frames(&text)
}

pub fn parse_frames(text: &str) -> Result<Vec<(usize, Pose2)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Format(format!("frames line {}: expected `id x y theta`", n + 1));
        if fields.len() != 4 {
            return Err(bad());
        }
        let id: usize = fields[0].parse().map_err(|_| bad())?;
        let mut v = [0.0f64; 3];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| bad())?;
            if !slot.is_finite() {
                return Err(bad());
            }
        }
        out.push((id, Pose2::from(v)));
    }
    Ok(out)
}

pub fn format_frames(ids: &[usize], frames: &[Pose2]) -> String {
    let mut s = String::new();
    for (id, f) in ids.iter().zip(frames) {
        // `{}` on f64 prints the shortest representation that round-trips.
        let _ = writeln!(s, "{id} {} {} {}", f.t.x, f.t.y, f.theta);
    }
    s
}

pub fn write_frames(path: &Path, ids: &[usize], frames: &[Pose2]) -> Result<()> {
    fs::write(path, format_frames(ids, frames))?;
    Ok(())
}
