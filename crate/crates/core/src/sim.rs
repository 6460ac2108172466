//! Laser/odometry simulation over line-segment worlds.
//!
//! Noise comes from a PCG-64 stream (`rand_pcg::Pcg64`, the 128-bit LCG with
//! XSL-RR output) seeded through `SeedableRng::seed_from_u64`, turned into
//! standard normals with the polar-free Box-Muller transform:
//! `u1, u2` uniform on (0, 1] from the top 53 bits of successive draws,
//! `z0 = sqrt(-2 ln u1) cos(2π u2)`, `z1 = sqrt(-2 ln u1) sin(2π u2)`,
//! emitted in that order. Per scan the stream is consumed as three odometry
//! normals (x, y, θ; skipped for the first scan) followed by one normal per
//! beam. Changing any of this changes every shipped dataset.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use nalgebra::Vector2;
use rand_core::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::builder::LaserScan;
use crate::error::{Error, Result};
use crate::se2::{normalize_angle, Pose2};

pub const DATASET_FORMAT: &str = "gjds-1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: [f64; 2],
    pub b: [f64; 2],
}

impl Segment {
    pub fn new(a: [f64; 2], b: [f64; 2]) -> Self {
        Self { a, b }
    }

    fn length(&self) -> f64 {
        (self.b[0] - self.a[0]).hypot(self.b[1] - self.a[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub segments: Vec<Segment>,
    /// `[xmin, ymin, xmax, ymax]`, meters.
    pub bounds: [f64; 4],
    /// Optional default route through the world.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub waypoints: Vec<Pose2>,
}

impl World {
    pub fn validate(&self) -> Result<()> {
        let [x0, y0, x1, y1] = self.bounds;
        if !(x1 > x0 && y1 > y0) {
            return Err(Error::Validation("world bounds are empty".into()));
        }
        let inside = |p: [f64; 2]| p[0] >= x0 && p[0] <= x1 && p[1] >= y0 && p[1] <= y1;
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.length() > 0.0) {
                return Err(Error::Validation(format!("segment {i} has zero length")));
            }
            if !inside(s.a) || !inside(s.b) {
                return Err(Error::Validation(format!(
                    "segment {i} leaves the world bounds"
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        let [x0, y0, x1, y1] = self.bounds;
        p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound {
                what: "world file",
                path: path.to_owned(),
            },
            _ => Error::Io(e),
        })?;
        let world: World =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("world file: {e}")))?;
        world.validate()?;
        Ok(world)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(
            path,
            serde_json::to_string_pretty(self).expect("world serializes"),
        )?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma_range: f64,
    pub sigma_odo_xy: f64,
    pub sigma_odo_theta: f64,
    pub seed: u64,
}

impl NoiseSpec {
    /// Beam and odometry noise used for the shipped simulation runs.
    pub fn standard(seed: u64) -> Self {
        Self {
            sigma_range: 0.02,
            sigma_odo_xy: 0.04,
            sigma_odo_theta: 0.003,
            seed,
        }
    }

    pub fn zero(seed: u64) -> Self {
        Self {
            sigma_range: 0.0,
            sigma_odo_xy: 0.0,
            sigma_odo_theta: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.sigma_range, self.sigma_odo_xy, self.sigma_odo_theta];
        if all.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::Validation(
                "noise sigmas must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScannerConfig {
    pub beams: usize,
    pub fov_min: f64,
    pub fov_max: f64,
    pub max_range: f64,
}

impl Default for ScannerConfig {
    /// 1081 beams over ±135°, 30 m range.
    fn default() -> Self {
        Self {
            beams: 1081,
            fov_min: (-135.0f64).to_radians(),
            fov_max: 135.0f64.to_radians(),
            max_range: 30.0,
        }
    }
}

impl ScannerConfig {
    pub fn angles(&self) -> Vec<f64> {
        let n = self.beams;
        if n == 1 {
            return vec![self.fov_min];
        }
        let step = (self.fov_max - self.fov_min) / (n - 1) as f64;
        (0..n).map(|i| self.fov_min + step * i as f64).collect()
    }
}

/// Standard normal source: PCG-64 + Box-Muller (see module docs).
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    rng: Pcg64,
    spare: Option<f64>,
}

impl GaussianSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: Pcg64::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Uniform on (0, 1].
    pub fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (TAU * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }

    pub fn normal(&mut self, sigma: f64) -> f64 {
        sigma * self.standard_normal()
    }
}

fn cross(a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Distance along each beam to the nearest segment, or `f64::INFINITY` if
/// nothing is hit. Hits beyond `max_range` are reported as-is.
pub fn raycast(world: &World, pose: &Pose2, angles: &[f64]) -> Vec<f64> {
    let origin = pose.t;
    let segs: Vec<(Vector2<f64>, Vector2<f64>)> = world
        .segments
        .iter()
        .map(|s| {
            let a = Vector2::new(s.a[0], s.a[1]);
            (a, Vector2::new(s.b[0], s.b[1]) - a)
        })
        .collect();
    angles
        .iter()
        .map(|&angle| {
            let heading = pose.theta + angle;
            let d = Vector2::new(heading.cos(), heading.sin());
            let mut best = f64::INFINITY;
            for &(a, e) in &segs {
                let den = cross(d, e);
                if den.abs() < 1e-14 {
                    continue;
                }
                let ao = a - origin;
                let t = cross(ao, e) / den;
                let u = cross(ao, d) / den;
                if t > 1e-12 && (0.0..=1.0).contains(&u) && t < best {
                    best = t;
                }
            }
            best
        })
        .collect()
}

/// Range value written for beams without a return.
pub fn no_return_marker(max_range: f64) -> f64 {
    max_range + 1.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub angles: Vec<f64>,
    pub max_range: f64,
    pub noise: NoiseSpec,
    /// Ground-truth sensor poses in the world frame, one per scan.
    pub gt_poses: Vec<Pose2>,
    /// Noisy relative motion from the previous scan (identity for the first).
    pub odometry: Vec<Pose2>,
    /// Noisy ranges per scan.
    pub ranges: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.gt_poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt_poses.is_empty()
    }

    pub fn scan(&self, index: usize, pose_in_submap: Pose2) -> LaserScan {
        LaserScan {
            angles: self.angles.clone(),
            ranges: self.ranges[index].clone(),
            max_range: self.max_range,
            pose_in_submap,
        }
    }

    /// Odometry composed from the identity.
    pub fn odometry_poses(&self) -> Vec<Pose2> {
        integrate_odometry(Pose2::identity(), &self.odometry)
    }

    /// Ground truth re-expressed in the frame of the first pose.
    pub fn relative_gt_poses(&self) -> Vec<Pose2> {
        let first = self.gt_poses[0];
        self.gt_poses.iter().map(|p| first.between(p)).collect()
    }
}

/// Chains relative increments from `start`; the first increment is ignored.
pub fn integrate_odometry(start: Pose2, odometry: &[Pose2]) -> Vec<Pose2> {
    let mut poses = Vec::with_capacity(odometry.len());
    let mut current = start;
    for (k, step) in odometry.iter().enumerate() {
        if k > 0 {
            current = current.compose(step);
        }
        poses.push(current);
    }
    poses
}

/// Constant-speed position and shortest-arc heading interpolation with a
/// fixed number of steps per leg; the last waypoint is included.
pub fn interpolate_waypoints(waypoints: &[Pose2], steps_per_leg: usize) -> Vec<Pose2> {
    let steps = steps_per_leg.max(1);
    let mut out = Vec::with_capacity(waypoints.len().saturating_sub(1) * steps + 1);
    for leg in waypoints.windows(2) {
        let (a, b) = (leg[0], leg[1]);
        let dtheta = normalize_angle(b.theta - a.theta);
        for s in 0..steps {
            let alpha = s as f64 / steps as f64;
            let t = a.t + (b.t - a.t) * alpha;
            out.push(Pose2::new(t.x, t.y, a.theta + dtheta * alpha));
        }
    }
    if let Some(last) = waypoints.last() {
        out.push(*last);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub steps_per_leg: usize,
    pub scanner: ScannerConfig,
}

pub fn simulate(
    world: &World,
    waypoints: &[Pose2],
    config: &TrajectoryConfig,
    noise: &NoiseSpec,
) -> Result<Dataset> {
    if waypoints.is_empty() {
        return Err(Error::EmptyInput("waypoints"));
    }
    noise.validate()?;
    world.validate()?;
    if let Some(i) = waypoints.iter().position(|w| !world.contains(&w.t)) {
        return Err(Error::Validation(format!(
            "waypoint {i} lies outside the world bounds"
        )));
    }
    let gt_poses = interpolate_waypoints(waypoints, config.steps_per_leg);
    let angles = config.scanner.angles();
    let max_range = config.scanner.max_range;
    let marker = no_return_marker(max_range);
    let mut gauss = GaussianSampler::new(noise.seed);
    let mut odometry = Vec::with_capacity(gt_poses.len());
    let mut ranges = Vec::with_capacity(gt_poses.len());
    for (k, pose) in gt_poses.iter().enumerate() {
        if k == 0 {
            odometry.push(Pose2::identity());
        } else {
            let step = gt_poses[k - 1].between(pose);
            let dx = gauss.normal(noise.sigma_odo_xy);
            let dy = gauss.normal(noise.sigma_odo_xy);
            let dth = gauss.normal(noise.sigma_odo_theta);
            odometry.push(Pose2::new(step.t.x + dx, step.t.y + dy, step.theta + dth));
        }
        let truth = raycast(world, pose, &angles);
        let scan = truth
            .into_iter()
            .map(|r| {
                let e = gauss.normal(noise.sigma_range);
                if r > max_range {
                    marker
                } else {
                    (r + e).max(0.0)
                }
            })
            .collect();
        ranges.push(scan);
    }
    Ok(Dataset {
        angles,
        max_range,
        noise: *noise,
        gt_poses,
        odometry,
        ranges,
    })
}

/// One contiguous block of scans destined for a single submap.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub scans: Range<usize>,
    /// Frame of the submap in the global (first-pose) frame.
    pub frame: Pose2,
    /// Sensor poses relative to `frame`, one per scan in `scans`.
    pub poses: Vec<Pose2>,
}

fn chunk_ranges(len: usize, n_submaps: usize) -> Result<Vec<Range<usize>>> {
    if n_submaps == 0 || n_submaps > len {
        return Err(Error::Validation(format!(
            "submap count {n_submaps} must lie in 1..={len}"
        )));
    }
    let base = len / n_submaps;
    let extra = len % n_submaps;
    let mut start = 0;
    Ok((0..n_submaps)
        .map(|i| {
            let size = base + usize::from(i < extra);
            let r = start..start + size;
            start += size;
            r
        })
        .collect())
}

/// Splits the dataset into near-equal contiguous chunks with
/// odometry-initialized frames. Frame 0 is the identity.
pub fn partition(dataset: &Dataset, n_submaps: usize) -> Result<Vec<Chunk>> {
    let ranges = chunk_ranges(dataset.len(), n_submaps)?;
    let absolute = dataset.odometry_poses();
    Ok(ranges
        .into_iter()
        .map(|r| {
            let poses = integrate_odometry(Pose2::identity(), &dataset.odometry[r.clone()]);
            Chunk {
                frame: absolute[r.start],
                poses,
                scans: r,
            }
        })
        .collect())
}

/// Same chunking as [`partition`] but with ground-truth frames and poses,
/// expressed relative to the first ground-truth pose.
pub fn partition_ground_truth(dataset: &Dataset, n_submaps: usize) -> Result<Vec<Chunk>> {
    let ranges = chunk_ranges(dataset.len(), n_submaps)?;
    let relative = dataset.relative_gt_poses();
    Ok(ranges
        .into_iter()
        .map(|r| {
            let frame = relative[r.start];
            let poses = relative[r.clone()]
                .iter()
                .map(|p| frame.between(p))
                .collect();
            Chunk {
                frame,
                poses,
                scans: r,
            }
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct NoiseHeader {
    sigma_range: f64,
    sigma_odo_xy: f64,
    sigma_odo_theta: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    angles: Vec<f64>,
    max_range: f64,
    noise: NoiseHeader,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Record {
    gt: [f64; 3],
    odo: [f64; 3],
    ranges: Vec<f64>,
}

impl Dataset {
    /// JSON-lines: a header line followed by one record per scan.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let header = Header {
            format: DATASET_FORMAT.into(),
            angles: self.angles.clone(),
            max_range: self.max_range,
            noise: NoiseHeader {
                sigma_range: self.noise.sigma_range,
                sigma_odo_xy: self.noise.sigma_odo_xy,
                sigma_odo_theta: self.noise.sigma_odo_theta,
            },
            seed: self.noise.seed,
        };
        writeln!(out, "{}", to_json(&header))?;
        for k in 0..self.len() {
            let record = Record {
                gt: self.gt_poses[k].into(),
                odo: self.odometry[k].into(),
                ranges: self.ranges[k].clone(),
            };
            writeln!(out, "{}", to_json(&record))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let first = lines
            .next()
            .ok_or(Error::Format("dataset file is empty".into()))??;
        let header: Header = serde_json::from_str(&first)
            .map_err(|e| Error::Format(format!("dataset header: {e}")))?;
        if header.format != DATASET_FORMAT {
            return Err(Error::Format(format!(
                "unsupported dataset format {:?}, expected {DATASET_FORMAT:?}",
                header.format
            )));
        }
        let noise = NoiseSpec {
            sigma_range: header.noise.sigma_range,
            sigma_odo_xy: header.noise.sigma_odo_xy,
            sigma_odo_theta: header.noise.sigma_odo_theta,
            seed: header.seed,
        };
        let mut data = Dataset {
            angles: header.angles,
            max_range: header.max_range,
            noise,
            gt_poses: Vec::new(),
            odometry: Vec::new(),
            ranges: Vec::new(),
        };
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("dataset record {}: {e}", n + 1)))?;
            if rec.ranges.len() != data.angles.len() {
                return Err(Error::Format(format!(
                    "dataset record {} has {} ranges for {} angles",
                    n + 1,
                    rec.ranges.len(),
                    data.angles.len()
                )));
            }
            data.gt_poses.push(rec.gt.into());
            data.odometry.push(rec.odo.into());
            data.ranges.push(rec.ranges);
        }
        if data.is_empty() {
            return Err(Error::Format("dataset has no scan records".into()));
        }
        Ok(data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound {
                what: "dataset file",
                path: path.to_owned(),
            },
            _ => Error::Io(e),
        })?;
        Self::read_from(BufReader::new(file))
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}
