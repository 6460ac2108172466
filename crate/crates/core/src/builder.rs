//! Evidence-grid submap construction from laser scans.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid2D, GridLayout};
use crate::raytrace::RayWalk;
use crate::se2::Pose2;

#[derive(Debug, Clone, PartialEq)]
pub struct LaserScan {
    /// Beam angles in the sensor frame, strictly increasing.
    pub angles: Vec<f64>,
    /// Measured ranges; anything above `max_range` is a no-return.
    pub ranges: Vec<f64>,
    pub max_range: f64,
    /// Sensor pose expressed in the submap frame.
    pub pose_in_submap: Pose2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildParams {
    pub log_odds_occ: f64,
    pub log_odds_free: f64,
    pub clamp: f64,
}

impl Default for BuildParams {
    fn default() -> Self {
        Self {
            log_odds_occ: 0.85,
            log_odds_free: -0.4,
            clamp: 10.0,
        }
    }
}

/// A local occupancy map (log-odds) with its per-cell observation counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Submap {
    pub id: usize,
    pub occupancy: Grid2D,
    pub hits: Grid2D,
}

impl Submap {
    pub fn layout(&self) -> &GridLayout {
        self.occupancy.layout()
    }
}

struct Accumulator<'a> {
    occupancy: &'a mut [f64],
    hits: &'a mut [f64],
    params: &'a BuildParams,
}

impl Accumulator<'_> {
    #[inline]
    fn update(&mut self, index: usize, delta: f64) {
        let c = self.params.clamp;
        self.occupancy[index] = (self.occupancy[index] + delta).clamp(-c, c);
        self.hits[index] += 1.0;
    }
}

/// Builds one submap by log-odds ray casting.
pub fn build_submap(
    scans: &[LaserScan],
    layout: GridLayout,
    params: &BuildParams,
    id: usize,
) -> Result<Submap> {
    if scans.is_empty() {
        return Err(Error::EmptyInput("scan list"));
    }
    layout.validate()?;
    let mut occupancy = Grid2D::zeros(layout);
    let mut hits = Grid2D::zeros(layout);
    {
        let mut acc = Accumulator {
            occupancy: occupancy.values_mut(),
            hits: hits.values_mut(),
            params,
        };
        for scan in scans {
            integrate_scan(&mut acc, &layout, scan)?;
        }
    }
    Ok(Submap {
        id,
        occupancy,
        hits,
    })
}

fn integrate_scan(acc: &mut Accumulator<'_>, layout: &GridLayout, scan: &LaserScan) -> Result<()> {
    if scan.angles.len() != scan.ranges.len() {
        return Err(Error::LengthMismatch {
            left: scan.angles.len(),
            right: scan.ranges.len(),
        });
    }
    let sensor = scan.pose_in_submap.t;
    if !layout.contains(layout.world_to_cell_nearest(&sensor)) {
        return Err(Error::Validation(format!(
            "sensor at ({:.3}, {:.3}) lies outside the submap layout",
            sensor.x, sensor.y
        )));
    }
    for (&angle, &range) in scan.angles.iter().zip(&scan.ranges) {
        if !(range > 0.0) {
            continue;
        }
        let heading = scan.pose_in_submap.theta + angle;
        let dir = Vector2::new(heading.cos(), heading.sin());
        let returned = range <= scan.max_range;
        let end = sensor + dir * if returned { range } else { scan.max_range };
        if end == sensor {
            continue;
        }
        let mut left_grid = false;
        for cell in RayWalk::new(layout, &sensor, &end)? {
            if !layout.contains(cell) {
                left_grid = true;
                break;
            }
            acc.update(layout.index(cell), acc.params.log_odds_free);
        }
        if returned && !left_grid {
            let cell = layout.world_to_cell_nearest(&end);
            if layout.contains(cell) {
                acc.update(layout.index(cell), acc.params.log_odds_occ);
            }
        }
    }
    Ok(())
}

/// Axis-aligned layout covering every sensor position and beam return,
/// padded by `margin` meters.
pub fn layout_for_scans(scans: &[LaserScan], resolution: f64, margin: f64) -> Result<GridLayout> {
    if scans.is_empty() {
        return Err(Error::EmptyInput("scan list"));
    }
    let mut lo = Vector2::repeat(f64::INFINITY);
    let mut hi = Vector2::repeat(f64::NEG_INFINITY);
    let mut include = |p: Vector2<f64>| {
        lo = lo.inf(&p);
        hi = hi.sup(&p);
    };
    for scan in scans {
        let sensor = scan.pose_in_submap.t;
        include(sensor);
        for (&angle, &range) in scan.angles.iter().zip(&scan.ranges) {
            if range > 0.0 && range <= scan.max_range {
                let heading = scan.pose_in_submap.theta + angle;
                include(sensor + Vector2::new(heading.cos(), heading.sin()) * range);
            }
        }
    }
    lo -= Vector2::repeat(margin);
    hi += Vector2::repeat(margin);
    // Snap the origin to the resolution lattice so layouts are reproducible.
    let origin = (lo / resolution).map(f64::floor) * resolution;
    let width = ((hi.x - origin.x) / resolution).ceil() as usize + 1;
    let height = ((hi.y - origin.y) / resolution).ceil() as usize + 1;
    GridLayout::new(width.max(2), height.max(2), origin, resolution)
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    id: usize,
    width: usize,
    height: usize,
    origin_x: f64,
    origin_y: f64,
    resolution: f64,
}

/// Paths of the three files that store a submap.
pub fn submap_paths(dir: &Path, id: usize) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("submap_{id:03}.json")),
        dir.join(format!("submap_{id:03}.occ.grid")),
        dir.join(format!("submap_{id:03}.hits.grid")),
    )
}

impl Submap {
    /// Writes `submap_NNN.{json,occ.grid,hits.grid}` into `dir`; returns the sidecar path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let (meta, occ, hits) = submap_paths(dir, self.id);
        let l = self.layout();
        let sidecar = Sidecar {
            id: self.id,
            width: l.width,
            height: l.height,
            origin_x: l.origin.x,
            origin_y: l.origin.y,
            resolution: l.resolution,
        };
        fs::write(
            &meta,
            serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
        )?;
        self.occupancy.save(occ)?;
        self.hits.save(hits)?;
        Ok(meta)
    }

    /// Loads a submap from its sidecar path; grid files sit next to it.
    pub fn load(sidecar_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(sidecar_path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound {
                what: "submap sidecar",
                path: sidecar_path.to_owned(),
            },
            _ => Error::Io(e),
        })?;
        let sidecar: Sidecar = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("submap sidecar: {e}")))?;
        let dir = sidecar_path.parent().unwrap_or(Path::new("."));
        let (_, occ, hits) = submap_paths(dir, sidecar.id);
        let occupancy = Grid2D::load(occ)?;
        let hits = Grid2D::load(hits)?;
        let expected = GridLayout {
            width: sidecar.width,
            height: sidecar.height,
            origin: Vector2::new(sidecar.origin_x, sidecar.origin_y),
            resolution: sidecar.resolution,
        };
        if occupancy.layout() != &expected || hits.layout() != &expected {
            return Err(Error::Validation(format!(
                "submap {} grid layouts disagree with sidecar",
                sidecar.id
            )));
        }
        if let Some(i) = hits.values().iter().position(|&h| h < 0.0) {
            return Err(Error::Validation(format!("negative hit count at cell {i}")));
        }
        Ok(Submap {
            id: sidecar.id,
            occupancy,
            hits,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(res: f64) -> GridLayout {
        GridLayout::new(60, 20, Vector2::new(-0.5, -0.5), res).unwrap()
    }

    fn single_beam(range: f64) -> LaserScan {
        LaserScan {
            angles: vec![0.0],
            ranges: vec![range],
            max_range: 30.0,
            pose_in_submap: Pose2::identity(),
        }
    }

    #[test]
    fn one_beam_hand_traced() {
        let l = GridLayout::new(40, 5, Vector2::new(0.0, -0.1), 0.05).unwrap();
        let map = build_submap(&[single_beam(1.0)], l, &BuildParams::default(), 0).unwrap();
        let row = 2;
        // Sensor sits at the center of cell (0, 2); the wall at x = 1.0 is cell 20.
        assert_eq!(map.occupancy.get([20, row]), Some(0.85));
        assert_eq!(map.hits.get([20, row]), Some(1.0));
        for col in 1..20 {
            assert_eq!(map.occupancy.get([col, row]), Some(-0.4), "col {col}");
            assert_eq!(map.hits.get([col, row]), Some(1.0));
        }
        // The start cell is crossed as well.
        assert_eq!(map.occupancy.get([0, row]), Some(-0.4));
        let touched = map.hits.values().iter().filter(|&&h| h > 0.0).count();
        assert_eq!(touched, 21);
        for (o, h) in map.occupancy.values().iter().zip(map.hits.values()) {
            if *h == 0.0 {
                assert_eq!(*o, 0.0);
            }
        }
    }

    #[test]
    fn zero_scans_is_error() {
        assert!(matches!(
            build_submap(&[], layout(0.1), &BuildParams::default(), 0),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn sensor_outside_layout_is_error() {
        let mut scan = single_beam(1.0);
        scan.pose_in_submap = Pose2::new(-10.0, 0.0, 0.0);
        assert!(build_submap(&[scan], layout(0.1), &BuildParams::default(), 0).is_err());
    }

    fn fan_scan(pose: Pose2) -> LaserScan {
        let angles: Vec<f64> = (0..11).map(|i| -0.5 + 0.1 * i as f64).collect();
        // Wall at x = 4 in the submap frame.
        let ranges = angles
            .iter()
            .map(|a| {
                let h = pose.theta + a;
                (4.0 - pose.t.x) / h.cos()
            })
            .collect();
        LaserScan {
            angles,
            ranges,
            max_range: 30.0,
            pose_in_submap: pose,
        }
    }

    #[test]
    fn identical_scans_double_evidence() {
        let params = BuildParams::default();
        let scan = fan_scan(Pose2::new(0.0, 0.5, 0.0));
        let once = build_submap(std::slice::from_ref(&scan), layout(0.1), &params, 0).unwrap();
        let twice = build_submap(&[scan.clone(), scan], layout(0.1), &params, 0).unwrap();
        for i in 0..once.occupancy.values().len() {
            let o = once.occupancy.values()[i];
            // All single-scan values are far from the clamp.
            assert!(o.abs() < 5.0);
            assert!((twice.occupancy.values()[i] - 2.0 * o).abs() < 1e-12);
            assert_eq!(twice.hits.values()[i], 2.0 * once.hits.values()[i]);
        }
    }

    #[test]
    fn straight_wall_is_positive_corridor_negative() {
        let map = build_submap(
            &[fan_scan(Pose2::new(0.0, 0.5, 0.0))],
            layout(0.1),
            &BuildParams::default(),
            0,
        )
        .unwrap();
        let l = *map.layout();
        for idx in 0..l.len() {
            let c = l.cell_of_index(idx);
            let x = l.cell_to_world(c).x;
            let v = map.occupancy.values()[idx];
            if v > 0.0 {
                assert!((x - 4.0).abs() < 1e-9, "occupied cell at x={x}");
            }
            if v < 0.0 {
                assert!(x < 4.0 + 1e-9, "free cell beyond the wall at x={x}");
            }
        }
    }

    #[test]
    fn scan_order_does_not_matter_without_clamping() {
        let params = BuildParams::default();
        let a = fan_scan(Pose2::new(0.0, 0.5, 0.1));
        let b = fan_scan(Pose2::new(0.4, 0.2, -0.2));
        let c = fan_scan(Pose2::new(0.2, 0.9, 0.0));
        let m1 = build_submap(&[a.clone(), b.clone(), c.clone()], layout(0.1), &params, 0).unwrap();
        let m2 = build_submap(&[c, a, b], layout(0.1), &params, 0).unwrap();
        assert!(m1.occupancy.values().iter().all(|v| v.abs() < 10.0));
        assert_eq!(m1.hits, m2.hits);
        for (x, y) in m1.occupancy.values().iter().zip(m2.occupancy.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn clamping_bounds_values() {
        let params = BuildParams::default();
        let scans = vec![fan_scan(Pose2::new(0.0, 0.5, 0.0)); 40];
        let map = build_submap(&scans, layout(0.1), &params, 0).unwrap();
        assert!(map.occupancy.values().iter().all(|v| v.abs() <= 10.0));
        assert!(map.occupancy.values().contains(&10.0));
        assert!(map.occupancy.values().iter().any(|v| *v == -10.0));
        // Hits keep counting past the clamp and stay integral.
        assert!(map.hits.values().iter().all(|h| h.fract() == 0.0));
        assert!(map.hits.max() >= 40.0);
    }

    #[test]
    fn no_return_beams_only_clear() {
        let scan = LaserScan {
            angles: vec![0.0],
            ranges: vec![100.0],
            max_range: 2.0,
            pose_in_submap: Pose2::identity(),
        };
        let map = build_submap(&[scan], layout(0.1), &BuildParams::default(), 0).unwrap();
        assert!(map.occupancy.values().iter().all(|v| *v <= 0.0));
        assert_eq!(map.hits.values().iter().sum::<f64>(), 20.0);
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let map = build_submap(
            &[fan_scan(Pose2::new(0.0, 0.5, 0.0))],
            layout(0.1),
            &BuildParams::default(),
            7,
        )
        .unwrap();
        let meta = map.save(dir.path()).unwrap();
        let text = std::fs::read_to_string(&meta).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in [
            "id",
            "width",
            "height",
            "origin_x",
            "origin_y",
            "resolution",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(Submap::load(&meta).unwrap(), map);
    }
}
