//! Incremental grid traversal (Amanatides & Woo).
//!
//! Cells are squares centered on their index. When a segment passes exactly
//! through a cell corner the walk steps in x before y.

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::grid::{Cell, GridLayout};

/// Iterator over the cells crossed by a segment, excluding the cell that
/// contains the end point.
#[derive(Debug, Clone)]
pub struct RayWalk {
    cell: Cell,
    end: Cell,
    step: [i64; 2],
    t_max: [f64; 2],
    t_delta: [f64; 2],
    remaining: u64,
}

impl RayWalk {
    pub fn new(layout: &GridLayout, start: &Vector2<f64>, end: &Vector2<f64>) -> Result<Self> {
        if start == end {
            return Err(Error::Validation("zero-length ray".into()));
        }
        let u0 = layout.world_to_cell(start).add_scalar(0.5);
        let u1 = layout.world_to_cell(end).add_scalar(0.5);
        let d = u1 - u0;
        let cell = [u0.x.floor() as i64, u0.y.floor() as i64];
        let end = [u1.x.floor() as i64, u1.y.floor() as i64];
        let mut step = [0i64; 2];
        let mut t_max = [f64::INFINITY; 2];
        let mut t_delta = [f64::INFINITY; 2];
        for k in 0..2 {
            if d[k] > 0.0 {
                step[k] = 1;
                t_max[k] = (cell[k] as f64 + 1.0 - u0[k]) / d[k];
                t_delta[k] = 1.0 / d[k];
            } else if d[k] < 0.0 {
                step[k] = -1;
                t_max[k] = (u0[k] - cell[k] as f64) / -d[k];
                t_delta[k] = -1.0 / d[k];
            }
        }
        // Upper bound on the number of steps; guards against rounding.
        let remaining = ((end[0] - cell[0]).abs() + (end[1] - cell[1]).abs()) as u64;
        Ok(Self {
            cell,
            end,
            step,
            t_max,
            t_delta,
            remaining,
        })
    }
}

impl Iterator for RayWalk {
    type Item = Cell;

    fn next(&mut self) -> Option<Cell> {
        if self.cell == self.end || self.remaining == 0 {
            return None;
        }
        let current = self.cell;
        let axis = if self.t_max[0] <= self.t_max[1] { 0 } else { 1 };
        self.cell[axis] += self.step[axis];
        self.t_max[axis] += self.t_delta[axis];
        self.remaining -= 1;
        Some(current)
    }
}

/// Ordered cells whose interior the segment `start -> end` crosses,
/// excluding the end cell.
pub fn trace_ray(
    layout: &GridLayout,
    start: &Vector2<f64>,
    end: &Vector2<f64>,
) -> Result<Vec<Cell>> {
    Ok(RayWalk::new(layout, start, end)?.collect())
}
