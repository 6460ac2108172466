//! Run configuration and the end-to-end commands
//! (simulate, build, join, eval, render) used by the command-line tool.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use toml::{Table, Value};

use crate::builder::{build_submap, layout_for_scans, submap_paths, BuildParams, Submap};
use crate::error::{Error, Result};
use crate::eval::{map_accuracy, pose_errors, Metrics};
use crate::grid::{save_pgm, Grid2D, RenderMode};
use crate::joiner::{
    pose_only_gn, read_frames, recover_map, write_frames, GnOptions, GnReport, JoinProblem,
};
use crate::se2::Pose2;
use crate::sim::{self, Chunk, Dataset, NoiseSpec, ScannerConfig, TrajectoryConfig, World};

/// Every setting of a pipeline run. Loaded from a flat `key = value` file;
/// later assignments (command-line overrides) win.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub world: Option<PathBuf>,
    /// Overrides the waypoints stored in the world file.
    pub waypoints: Option<Vec<Pose2>>,
    pub steps_per_leg: usize,
    pub beams: usize,
    pub fov_deg: f64,
    pub max_range: f64,
    pub sigma_range: f64,
    pub sigma_odo_xy: f64,
    pub sigma_odo_theta: f64,
    pub seed: u64,
    pub n_submaps: usize,
    pub submap_resolution: f64,
    pub log_odds_occ: f64,
    pub log_odds_free: f64,
    pub clamp: f64,
    pub global_resolution: f64,
    pub margin: f64,
    pub max_iterations: usize,
    pub delta_threshold: f64,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let noise = NoiseSpec::standard(1);
        let scanner = ScannerConfig::default();
        let gn = GnOptions::default();
        let build = BuildParams::default();
        Self {
            world: None,
            waypoints: None,
            steps_per_leg: 10,
            beams: scanner.beams,
            fov_deg: (scanner.fov_max - scanner.fov_min).to_degrees(),
            max_range: scanner.max_range,
            sigma_range: noise.sigma_range,
            sigma_odo_xy: noise.sigma_odo_xy,
            sigma_odo_theta: noise.sigma_odo_theta,
            seed: noise.seed,
            n_submaps: 4,
            submap_resolution: 0.1,
            log_odds_occ: build.log_odds_occ,
            log_odds_free: build.log_odds_free,
            clamp: build.clamp,
            global_resolution: 0.1,
            margin: 2.0,
            max_iterations: gn.max_iterations,
            delta_threshold: gn.delta_threshold,
            output: PathBuf::from("out"),
        }
    }
}

fn bad(key: &str, want: &str) -> Error {
    Error::Format(format!("config key `{key}`: expected {want}"))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(bad(key, "a number")),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(bad(key, "a non-negative integer")),
    }
}

impl RunConfig {
    /// Reads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound {
                what: "config file",
                path: path.to_owned(),
            },
            _ => Error::Io(e),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut cfg = Self::default();
        cfg.apply_table(&Self::parse(&text)?, base)?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Table> {
        text.parse::<Table>()
            .map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn apply_table(&mut self, table: &Table, base: &Path) -> Result<()> {
        for (k, v) in table {
            self.set(k, v, base)?;
        }
        Ok(())
    }

    /// Assigns one key. Path values are joined onto `base` when relative.
    pub fn set(&mut self, key: &str, v: &Value, base: &Path) -> Result<()> {
        let path = |v: &Value| -> Result<PathBuf> {
            let s = v.as_str().ok_or_else(|| bad(key, "a string"))?;
            Ok(base.join(s))
        };
        match key {
            "world" => self.world = Some(path(v)?),
            "output" => self.output = path(v)?,
            "waypoints" => {
                let list = v
                    .as_array()
                    .ok_or_else(|| bad(key, "an array of [x, y, theta]"))?;
                let mut out = Vec::with_capacity(list.len());
                for w in list {
                    let a = w
                        .as_array()
                        .filter(|a| a.len() == 3)
                        .ok_or_else(|| bad(key, "[x, y, theta]"))?;
                    out.push(Pose2::new(
                        as_f64(key, &a[0])?,
                        as_f64(key, &a[1])?,
                        as_f64(key, &a[2])?,
                    ));
                }
                self.waypoints = Some(out);
            }
            "steps_per_leg" => self.steps_per_leg = as_usize(key, v)?,
            "beams" => self.beams = as_usize(key, v)?,
            "fov_deg" => self.fov_deg = as_f64(key, v)?,
            "max_range" => self.max_range = as_f64(key, v)?,
            "sigma_range" => self.sigma_range = as_f64(key, v)?,
            "sigma_odo_xy" => self.sigma_odo_xy = as_f64(key, v)?,
            "sigma_odo_theta" => self.sigma_odo_theta = as_f64(key, v)?,
            "seed" => self.seed = as_usize(key, v)? as u64,
            "n_submaps" => self.n_submaps = as_usize(key, v)?,
            "submap_resolution" => self.submap_resolution = as_f64(key, v)?,
            "log_odds_occ" => self.log_odds_occ = as_f64(key, v)?,
            "log_odds_free" => self.log_odds_free = as_f64(key, v)?,
            "clamp" => self.clamp = as_f64(key, v)?,
            "global_resolution" => self.global_resolution = as_f64(key, v)?,
            "margin" => self.margin = as_f64(key, v)?,
            "max_iterations" => self.max_iterations = as_usize(key, v)?,
            "delta_threshold" => self.delta_threshold = as_f64(key, v)?,
            _ => return Err(Error::Format(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("fov_deg", self.fov_deg),
            ("max_range", self.max_range),
            ("submap_resolution", self.submap_resolution),
            ("global_resolution", self.global_resolution),
            ("log_odds_occ", self.log_odds_occ),
            ("clamp", self.clamp),
            ("-log_odds_free", -self.log_odds_free),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("{k} must be positive, got {v}")));
            }
        }
        if !(self.margin >= 0.0 && self.delta_threshold >= 0.0) {
            return Err(Error::Validation(
                "margin and delta_threshold must be non-negative".into(),
            ));
        }
        if self.beams == 0 || self.n_submaps == 0 || self.steps_per_leg == 0 {
            return Err(Error::Validation(
                "beams, n_submaps and steps_per_leg must be positive".into(),
            ));
        }
        self.noise().validate()
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec {
            sigma_range: self.sigma_range,
            sigma_odo_xy: self.sigma_odo_xy,
            sigma_odo_theta: self.sigma_odo_theta,
            seed: self.seed,
        }
    }

    pub fn trajectory(&self) -> TrajectoryConfig {
        let half = self.fov_deg.to_radians() / 2.0;
        TrajectoryConfig {
            steps_per_leg: self.steps_per_leg,
            scanner: ScannerConfig {
                beams: self.beams,
                fov_min: -half,
                fov_max: half,
                max_range: self.max_range,
            },
        }
    }

    pub fn build_params(&self) -> BuildParams {
        BuildParams {
            log_odds_occ: self.log_odds_occ,
            log_odds_free: self.log_odds_free,
            clamp: self.clamp,
        }
    }

    pub fn gn_options(&self) -> GnOptions {
        GnOptions {
            max_iterations: self.max_iterations,
            delta_threshold: self.delta_threshold,
        }
    }
}

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const SUBMAPS_DIR: &str = "submaps";
pub const TRUTH_DIR: &str = "truth";
pub const FRAMES_INIT_FILE: &str = "frames_init.txt";
pub const FRAMES_TRUTH_FILE: &str = "frames_truth.txt";
pub const FRAMES_JOINED_FILE: &str = "frames_joined.txt";
pub const MAP_FILE: &str = "map.grid";
pub const MAP_PGM_FILE: &str = "map.pgm";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.json";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Simulates the configured world and writes `dataset.jsonl` under the
/// output directory.
pub fn simulate(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let world_path = cfg
        .world
        .as_deref()
        .ok_or_else(|| Error::Validation("no world file configured".into()))?;
    let world = World::load(world_path)?;
    let waypoints = cfg.waypoints.as_ref().unwrap_or(&world.waypoints);
    let dataset = sim::simulate(&world, waypoints, &cfg.trajectory(), &cfg.noise())?;
    create_dir(&cfg.output)?;
    let path = cfg.output.join(DATASET_FILE);
    dataset.save(&path)?;
    Ok(path)
}

/// Builds one submap per chunk, in parallel; output order follows the chunks.
pub fn build_chunks(
    dataset: &Dataset,
    chunks: &[Chunk],
    resolution: f64,
    params: &BuildParams,
) -> Result<Vec<Submap>> {
    chunks
        .par_iter()
        .enumerate()
        .map(|(id, chunk)| {
            let scans: Vec<_> = chunk
                .scans
                .clone()
                .zip(&chunk.poses)
                .map(|(k, pose)| dataset.scan(k, *pose))
                .collect();
            let layout = layout_for_scans(&scans, resolution, 2.0 * resolution)?;
            build_submap(&scans, layout, params, id)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BuildArtifacts {
    pub submaps_dir: PathBuf,
    pub frames: PathBuf,
    pub truth_dir: PathBuf,
    pub truth_frames: PathBuf,
}

fn save_submaps(dir: &Path, submaps: &[Submap]) -> Result<()> {
    create_dir(dir)?;
    for s in submaps {
        s.save(dir)?;
    }
    Ok(())
}

fn chunk_frames(chunks: &[Chunk]) -> Vec<Pose2> {
    chunks.iter().map(|c| c.frame).collect()
}

/// Builds odometry submaps (with their initial frames) and the matching
/// ground-truth submaps used as the evaluation reference.
pub fn build(dataset_path: &Path, cfg: &RunConfig) -> Result<BuildArtifacts> {
    cfg.validate()?;
    let dataset = Dataset::load(dataset_path)?;
    let odo = sim::partition(&dataset, cfg.n_submaps)?;
    let gt = sim::partition_ground_truth(&dataset, cfg.n_submaps)?;
    let ids: Vec<usize> = (0..odo.len()).collect();

    let out = BuildArtifacts {
        submaps_dir: cfg.output.join(SUBMAPS_DIR),
        frames: cfg.output.join(FRAMES_INIT_FILE),
        truth_dir: cfg.output.join(TRUTH_DIR),
        truth_frames: cfg.output.join(FRAMES_TRUTH_FILE),
    };
    save_submaps(
        &out.submaps_dir,
        &build_chunks(&dataset, &odo, cfg.submap_resolution, &cfg.build_params())?,
    )?;
    write_frames(&out.frames, &ids, &chunk_frames(&odo))?;
    save_submaps(
        &out.truth_dir,
        &build_chunks(&dataset, &gt, cfg.submap_resolution, &cfg.build_params())?,
    )?;
    write_frames(&out.truth_frames, &ids, &chunk_frames(&gt))?;
    Ok(out)
}

/// Loads every `submap_NNN.json` in `dir`, ordered by id.
pub fn load_submaps(dir: &Path) -> Result<Vec<Submap>> {
    let entries = fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound {
            what: "submap directory",
            path: dir.to_owned(),
        },
        _ => Error::Io(e),
    })?;
    let mut ids = Vec::new();
    for entry in entries {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(id) = name
            .strip_prefix("submap_")
            .and_then(|s| s.strip_suffix(".json"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            ids.push(id);
        }
    }
    if ids.is_empty() {
        return Err(Error::EmptyInput("no submap files in directory"));
    }
    ids.sort_unstable();
    ids.into_iter()
        .map(|id| Submap::load(&submap_paths(dir, id).0))
        .collect()
}

/// Frames from a frames file, reordered to match `submaps`.
pub fn frames_for(submaps: &[Submap], frames_path: &Path) -> Result<Vec<Pose2>> {
    let listed = read_frames(frames_path)?;
    if listed.len() != submaps.len() {
        return Err(Error::LengthMismatch {
            left: submaps.len(),
            right: listed.len(),
        });
    }
    submaps
        .iter()
        .map(|s| {
            listed
                .iter()
                .find(|(id, _)| *id == s.id)
                .map(|(_, f)| *f)
                .ok_or_else(|| {
                    Error::Format(format!("frames file has no entry for submap {}", s.id))
                })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct JoinArtifacts {
    pub frames: PathBuf,
    pub map: PathBuf,
    pub pgm: PathBuf,
    pub report: PathBuf,
    pub gn: GnReport,
}

pub fn join(submaps_dir: &Path, frames_path: &Path, cfg: &RunConfig) -> Result<JoinArtifacts> {
    cfg.validate()?;
    let submaps = load_submaps(submaps_dir)?;
    let frames = frames_for(&submaps, frames_path)?;
    let ids: Vec<usize> = submaps.iter().map(|s| s.id).collect();
    let mut problem = JoinProblem::with_margin(submaps, frames, cfg.margin, cfg.global_resolution)?;
    let (frames, report) = pose_only_gn(&mut problem, &cfg.gn_options())?;
    let map = recover_map(&problem, &frames)?;

    create_dir(&cfg.output)?;
    let out = JoinArtifacts {
        frames: cfg.output.join(FRAMES_JOINED_FILE),
        map: cfg.output.join(MAP_FILE),
        pgm: cfg.output.join(MAP_PGM_FILE),
        report: cfg.output.join(REPORT_FILE),
        gn: report,
    };
    write_frames(&out.frames, &ids, &frames)?;
    map.save(&out.map)?;
    save_pgm(&map, RenderMode::Occupancy, &out.pgm)?;
    fs::write(&out.report, to_json(&out.gn))?;
    Ok(out)
}

/// Reference map: ground-truth submaps fused at ground-truth frames on the
/// layout of `estimate`.
pub fn truth_map(
    truth_submaps: Vec<Submap>,
    truth_frames: Vec<Pose2>,
    estimate: &Grid2D,
) -> Result<Grid2D> {
    let problem = JoinProblem::new(truth_submaps, truth_frames, *estimate.layout())?;
    recover_map(&problem, problem.frames())
}

/// Compares joined frames and map against the ground-truth run and writes
/// the metrics JSON to `out`.
pub fn eval(
    frames: &Path,
    map: &Path,
    truth_frames: &Path,
    truth_submaps: &Path,
    out: &Path,
) -> Result<Metrics> {
    let truth = load_submaps(truth_submaps)?;
    let truth_poses = frames_for(&truth, truth_frames)?;
    let estimate_poses = frames_for(&truth, frames)?;
    let estimate = Grid2D::load(map)?;
    let reference = truth_map(truth, truth_poses.clone(), &estimate)?;
    let metrics = Metrics::new(
        pose_errors(&estimate_poses, &truth_poses)?,
        map_accuracy(&estimate, &reference)?,
    );
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(out, to_json(&metrics))?;
    Ok(metrics)
}

pub fn render(grid: &Path, out: &Path, mode: RenderMode) -> Result<()> {
    let g = Grid2D::load(grid)?;
    save_pgm(&g, mode, out)
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

/// Initial and ground-truth problems for one simulated dataset, kept in
/// memory.
pub struct Scenario {
    pub dataset: Dataset,
    pub problem: JoinProblem,
    pub truth_submaps: Vec<Submap>,
    pub truth_frames: Vec<Pose2>,
}

impl Scenario {
    pub fn from_dataset(dataset: Dataset, cfg: &RunConfig) -> Result<Self> {
        let odo = sim::partition(&dataset, cfg.n_submaps)?;
        let gt = sim::partition_ground_truth(&dataset, cfg.n_submaps)?;
        let submaps = build_chunks(&dataset, &odo, cfg.submap_resolution, &cfg.build_params())?;
        let truth_submaps =
            build_chunks(&dataset, &gt, cfg.submap_resolution, &cfg.build_params())?;
        let problem = JoinProblem::with_margin(
            submaps,
            chunk_frames(&odo),
            cfg.margin,
            cfg.global_resolution,
        )?;
        Ok(Self {
            dataset,
            problem,
            truth_submaps,
            truth_frames: chunk_frames(&gt),
        })
    }

    pub fn simulate(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let world_path = cfg
            .world
            .as_deref()
            .ok_or_else(|| Error::Validation("no world file configured".into()))?;
        let world = World::load(world_path)?;
        let waypoints = cfg.waypoints.as_ref().unwrap_or(&world.waypoints);
        let dataset = sim::simulate(&world, waypoints, &cfg.trajectory(), &cfg.noise())?;
        Self::from_dataset(dataset, cfg)
    }

    pub fn truth_map_on(&self, estimate: &Grid2D) -> Result<Grid2D> {
        truth_map(
            self.truth_submaps.clone(),
            self.truth_frames.clone(),
            estimate,
        )
    }
}
