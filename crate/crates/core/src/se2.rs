//! SE(2) frames and the global-to-local projection.
//!
//! `rot_matrix(θ)` is `[[cos θ, sin θ], [-sin θ, cos θ]]`, i.e. it maps a
//! global displacement into the local frame of a pose with heading θ.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix2, Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::grid::Cell;

/// Wraps an angle into (-π, π].
pub fn normalize_angle(theta: f64) -> f64 {
    let mut a = theta.rem_euclid(TAU);
    if a > PI {
        a -= TAU;
    }
    // rem_euclid can land on exactly TAU for tiny negative inputs.
    if a <= -PI {
        a += TAU;
    }
    a
}

/// World-to-local rotation for heading `theta`.
pub fn rot_matrix(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, s, -s, c)
}

/// Derivative of [`rot_matrix`] with respect to `theta`.
pub fn rot_matrix_derivative(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(-s, c, -c, -s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Pose2 {
    pub t: Vector2<f64>,
    pub theta: f64,
}

impl From<[f64; 3]> for Pose2 {
    fn from(v: [f64; 3]) -> Self {
        Pose2::new(v[0], v[1], v[2])
    }
}

impl From<Pose2> for [f64; 3] {
    fn from(p: Pose2) -> Self {
        [p.t.x, p.t.y, p.theta]
    }
}

impl Default for Pose2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            t: Vector2::new(x, y),
            theta: normalize_angle(theta),
        }
    }

    pub fn identity() -> Self {
        Self {
            t: Vector2::zeros(),
            theta: 0.0,
        }
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.t.x, self.t.y, self.theta)
    }

    /// Additive increment `(dx, dy, dθ)` followed by angle normalization.
    pub fn plus(&self, delta: &Vector3<f64>) -> Self {
        Pose2::new(self.t.x + delta.x, self.t.y + delta.y, self.theta + delta.z)
    }

    /// Maps a point expressed in this frame into the parent frame.
    pub fn transform_point(&self, local: &Vector2<f64>) -> Vector2<f64> {
        self.t + rot_matrix(self.theta).transpose() * local
    }

    /// Maps a parent-frame point into this frame.
    pub fn inverse_transform_point(&self, world: &Vector2<f64>) -> Vector2<f64> {
        rot_matrix(self.theta) * (world - self.t)
    }

    /// Frame composition `self ⊕ other`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let t = self.transform_point(&other.t);
        Pose2::new(t.x, t.y, self.theta + other.theta)
    }

    pub fn inverse(&self) -> Pose2 {
        let t = -(rot_matrix(self.theta) * self.t);
        Pose2::new(t.x, t.y, -self.theta)
    }

    /// `other` expressed in this frame: `self⁻¹ ⊕ other`.
    pub fn between(&self, other: &Pose2) -> Pose2 {
        let t = self.inverse_transform_point(&other.t);
        Pose2::new(t.x, t.y, other.theta - self.theta)
    }
}

/// Local metric position of a global point: `R(θ)(world - t)`.
#[inline]
pub fn project_point(pose: &Pose2, world: &Vector2<f64>) -> Vector2<f64> {
    rot_matrix(pose.theta) * (world - pose.t)
}

/// Jacobian of [`project_point`] with respect to `(t_x, t_y, θ)`.
#[inline]
pub fn dproject_point(pose: &Pose2, world: &Vector2<f64>) -> Matrix2x3<f64> {
    let r = rot_matrix(pose.theta);
    let dtheta = rot_matrix_derivative(pose.theta) * (world - pose.t);
    Matrix2x3::new(
        -r[(0, 0)],
        -r[(0, 1)],
        dtheta.x,
        -r[(1, 0)],
        -r[(1, 1)],
        dtheta.y,
    )
}

/// Projection of global cell `cell` (resolution `s`) into the local frame of `pose`.
pub fn project_global_to_local(pose: &Pose2, cell: Cell, s: f64) -> Vector2<f64> {
    project_point(pose, &(Vector2::new(cell[0] as f64, cell[1] as f64) * s))
}

pub fn dproj_dpose(pose: &Pose2, cell: Cell, s: f64) -> Matrix2x3<f64> {
    dproject_point(pose, &(Vector2::new(cell[0] as f64, cell[1] as f64) * s))
}
