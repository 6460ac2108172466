use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gridjoin::grid::RenderMode;
use gridjoin::pipeline::{self, RunConfig};
use gridjoin::{Error, Result};

#[derive(Parser)]
#[command(name = "gridjoin", version, about = "Grid-based 2D submap joining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a laser dataset in a world file.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Build odometry and ground-truth submaps from a dataset.
    Build {
        /// Dataset file [default: <output>/dataset.jsonl]
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Join submaps: optimize frames, then recover the global map.
    Join {
        /// Submap directory [default: <output>/submaps]
        #[arg(long)]
        submaps: Option<PathBuf>,
        /// Initial frames file [default: <output>/frames_init.txt]
        #[arg(long)]
        frames: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score joined frames and map against the ground-truth run.
    Eval {
        /// Joined frames [default: <output>/frames_joined.txt]
        #[arg(long)]
        frames: Option<PathBuf>,
        /// Joined map [default: <output>/map.grid]
        #[arg(long)]
        map: Option<PathBuf>,
        /// Ground-truth frames [default: <output>/frames_truth.txt]
        #[arg(long)]
        truth_frames: Option<PathBuf>,
        /// Ground-truth submap directory [default: <output>/truth]
        #[arg(long)]
        truth_submaps: Option<PathBuf>,
        /// Metrics JSON [default: <output>/metrics.json]
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render a grid file to PGM.
    Render {
        grid: PathBuf,
        /// Output image [default: grid path with .pgm extension]
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Mode::Occupancy)]
        mode: Mode,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Occupancy,
    Hits,
}

/// Config file plus one flag per config key. Flags override the file.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    world: Option<String>,
    /// TOML array of [x, y, theta], e.g. "[[0,0,0],[5,0,0]]"
    #[arg(long)]
    waypoints: Option<String>,
    #[arg(long)]
    steps_per_leg: Option<String>,
    #[arg(long)]
    beams: Option<String>,
    #[arg(long)]
    fov_deg: Option<String>,
    #[arg(long)]
    max_range: Option<String>,
    #[arg(long)]
    sigma_range: Option<String>,
    #[arg(long)]
    sigma_odo_xy: Option<String>,
    #[arg(long)]
    sigma_odo_theta: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    n_submaps: Option<String>,
    #[arg(long)]
    submap_resolution: Option<String>,
    #[arg(long)]
    log_odds_occ: Option<String>,
    #[arg(long)]
    log_odds_free: Option<String>,
    #[arg(long)]
    clamp: Option<String>,
    #[arg(long)]
    global_resolution: Option<String>,
    #[arg(long)]
    margin: Option<String>,
    #[arg(long)]
    max_iterations: Option<String>,
    #[arg(long)]
    delta_threshold: Option<String>,
    #[arg(long)]
    output: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> [(&'static str, &Option<String>); 20] {
        [
            ("world", &self.world),
            ("waypoints", &self.waypoints),
            ("steps_per_leg", &self.steps_per_leg),
            ("beams", &self.beams),
            ("fov_deg", &self.fov_deg),
            ("max_range", &self.max_range),
            ("sigma_range", &self.sigma_range),
            ("sigma_odo_xy", &self.sigma_odo_xy),
            ("sigma_odo_theta", &self.sigma_odo_theta),
            ("seed", &self.seed),
            ("n_submaps", &self.n_submaps),
            ("submap_resolution", &self.submap_resolution),
            ("log_odds_occ", &self.log_odds_occ),
            ("log_odds_free", &self.log_odds_free),
            ("clamp", &self.clamp),
            ("global_resolution", &self.global_resolution),
            ("margin", &self.margin),
            ("max_iterations", &self.max_iterations),
            ("delta_threshold", &self.delta_threshold),
            ("output", &self.output),
        ]
    }

    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for (key, raw) in self.overrides() {
            let Some(raw) = raw else { continue };
            let value = if matches!(key, "world" | "output") {
                toml::Value::String(raw.clone())
            } else {
                parse_value(key, raw)?
            };
            // Flag paths are relative to the working directory.
            cfg.set(key, &value, Path::new(""))?;
        }
        Ok(cfg)
    }
}

fn parse_value(key: &str, raw: &str) -> Result<toml::Value> {
    let table = RunConfig::parse(&format!("v = {raw}")).map_err(|_| {
        Error::Format(format!(
            "flag --{}: cannot parse `{raw}`",
            key.replace('_', "-")
        ))
    })?;
    Ok(table["v"].clone())
}

fn or_output(path: &Option<PathBuf>, cfg: &RunConfig, name: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| cfg.output.join(name))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { cfg } => {
            let cfg = cfg.resolve()?;
            let path = pipeline::simulate(&cfg)?;
            println!("{}", path.display());
        }
        Command::Build { dataset, cfg } => {
            let cfg = cfg.resolve()?;
            let dataset = or_output(&dataset, &cfg, pipeline::DATASET_FILE);
            let out = pipeline::build(&dataset, &cfg)?;
            println!("{}", out.submaps_dir.display());
            println!("{}", out.frames.display());
        }
        Command::Join {
            submaps,
            frames,
            cfg,
        } => {
            let cfg = cfg.resolve()?;
            let submaps = or_output(&submaps, &cfg, pipeline::SUBMAPS_DIR);
            let frames = or_output(&frames, &cfg, pipeline::FRAMES_INIT_FILE);
            let out = pipeline::join(&submaps, &frames, &cfg)?;
            eprintln!(
                "{} iterations, converged: {}, objective {:e} -> {:e}",
                out.gn.iterations,
                out.gn.converged,
                out.gn.objective_trace.first().copied().unwrap_or(f64::NAN),
                out.gn.objective_trace.last().copied().unwrap_or(f64::NAN),
            );
            println!("{}", out.frames.display());
            println!("{}", out.map.display());
        }
        Command::Eval {
            frames,
            map,
            truth_frames,
            truth_submaps,
            out,
            cfg,
        } => {
            let cfg = cfg.resolve()?;
            let metrics = pipeline::eval(
                &or_output(&frames, &cfg, pipeline::FRAMES_JOINED_FILE),
                &or_output(&map, &cfg, pipeline::MAP_FILE),
                &or_output(&truth_frames, &cfg, pipeline::FRAMES_TRUTH_FILE),
                &or_output(&truth_submaps, &cfg, pipeline::TRUTH_DIR),
                &or_output(&out, &cfg, pipeline::METRICS_FILE),
            )?;
            println!(
                "{}",
                serde_json::to_string(&metrics).expect("plain data serializes")
            );
        }
        Command::Render { grid, out, mode } => {
            let out = out.unwrap_or_else(|| grid.with_extension("pgm"));
            let mode = match mode {
                Mode::Occupancy => RenderMode::Occupancy,
                Mode::Hits => RenderMode::Hits,
            };
            pipeline::render(&grid, &out, mode)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string();
            if msg.contains(e.name()) {
                eprintln!("gridjoin: {msg}");
            } else {
                eprintln!("gridjoin: {}: {msg}", e.name());
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
