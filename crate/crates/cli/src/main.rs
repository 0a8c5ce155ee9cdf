//! `brm`: building-ratio-map localization from the command line.
//!
//! Every subcommand reads the flat `key = value` config given by `--config`
//! (defaults otherwise) and applies `--set key=value` overrides on top.
//! Failures print one JSON object on stderr and exit with status 1
//! (2 for usage errors).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use brm_core::geo_raster::{parse_polygons, read_pgm, write_pgm};
use brm_core::harness::export::{
    export, parse_candidates_csv, read_flight, read_report, write_flight, write_heatmap,
};
use brm_core::harness::synthetic::{synthetic_buildings, to_geojson};
use brm_core::harness::{
    load_raster, localize, prepare_map, rasterize_extent, simulate_flight, ExperimentConfig, HarnessError,
};
use brm_core::ratio_map::RatioMapSet;
use clap::{Parser, Subcommand};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "brm", version, about = "Building-ratio-map UAV localization")]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set e1=0.25`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic city as GeoJSON.
    SynthMap {
        #[arg(long)]
        out: PathBuf,
    },
    /// Rasterize GeoJSON footprints (or the synthetic city) to PGM + `.geo` sidecar.
    Rasterize {
        #[arg(long)]
        polygons: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Precompute the ratio map of a raster.
    RatioMap {
        #[arg(long)]
        raster: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate a flight: frames, poses and noisy odometry.
    Simulate {
        #[arg(long)]
        raster: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Match a simulated flight against a ratio map and write the report files.
    Localize {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        flight: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline from config: raster, ratio map, flight, matching, report.
    Run {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the metrics of a report and check them against its frame records.
    Evaluate {
        #[arg(long)]
        report: PathBuf,
    },
    /// Render a candidate CSV over a ratio map as PNG.
    Plot {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// List the config keys with their current values.
    Config,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", json!({ "error": { "kind": "usage", "message": first } }));
            return ExitCode::from(2);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                json!({ "error": { "kind": e.kind(), "message": e.to_string(), "frame": e.frame() } })
            );
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("override `{kv}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, HarnessError> {
    fs::read(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn dispatch(cli: Cli) -> Result<(), HarnessError> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::SynthMap { out } => {
            let doc = to_geojson(&synthetic_buildings(&cfg.synthetic));
            write_text(&out, &format!("{doc}\n"))?;
        }
        Command::Rasterize { polygons, out } => {
            let raster = match polygons.or(cfg.polygons.clone()) {
                Some(path) => {
                    let polys = parse_polygons(&read_bytes(&path)?)?;
                    rasterize_extent(&polys, cfg.resolution, 2.0 * cfg.camera.ground_half_width())?
                }
                None => load_raster(&cfg)?,
            };
            write_pgm(&raster, &out)?;
            println!(
                "{}",
                json!({ "width": raster.width(), "height": raster.height(), "building_fraction": raster.building_fraction() })
            );
        }
        Command::RatioMap { raster, out } => {
            if raster.is_some() {
                cfg.raster = raster;
                cfg.polygons = None;
            }
            let raster = load_raster(&cfg)?;
            let _ = fs::remove_file(&out);
            cfg.ratio_map = Some(out);
            let map = prepare_map(&cfg, &raster)?;
            println!(
                "{}",
                json!({ "n": map.n(), "lattice_width": map.lattice_width(), "lattice_height": map.lattice_height(), "stride_m": map.lattice_spacing() })
            );
        }
        Command::Simulate { raster, out } => {
            let raster = match raster {
                Some(path) => read_pgm(&path)?,
                None => load_raster(&cfg)?,
            };
            let (flight, frames) = simulate_flight(&cfg, &raster, &cfg.flight_plan()?)?;
            write_flight(&flight, &frames, &out)?;
            println!("{}", json!({ "frames": frames.len() }));
        }
        Command::Localize { map, flight, out } => {
            let map = RatioMapSet::load(&map)?;
            let flight = read_flight(&flight, map.n())?;
            let mut run = localize(&map, &flight, cfg.matcher, cfg.kidnap_frame)?;
            let s = &mut run.report.settings;
            s.scale_bias = cfg.odometry.scale_bias;
            s.sigma_d = cfg.odometry.sigma_d;
            s.odometry_seed = cfg.odometry.seed;
            s.flip_prob = cfg.segmentation.flip_prob;
            s.segmentation_seed = cfg.segmentation.seed;
            export(&run, &map, &out)?;
            println!("{}", summary(&run.report));
        }
        Command::Run { out } => {
            let out = out
                .or(cfg.output_dir.clone())
                .ok_or_else(|| HarnessError::Config("no output directory: pass --out or set output_dir".into()))?;
            let (run, map) = brm_core::harness::run(&cfg)?;
            export(&run, &map, &out)?;
            println!("{}", summary(&run.report));
        }
        Command::Evaluate { report } => {
            let r = read_report(&report)?;
            let (whole, after, dr_whole, dr_after) = r.recompute_rmse()?;
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
            let close_opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
                (Some(a), Some(b)) => close(a, b),
                (None, None) => true,
                _ => false,
            };
            if !(close(whole, r.rmse_whole_path)
                && close_opt(after, r.rmse_after_first_convergence)
                && close(dr_whole, r.dead_reckoning_rmse_whole_path)
                && close_opt(dr_after, r.dead_reckoning_rmse_after_first_convergence))
            {
                return Err(HarnessError::Parse {
                    path: report,
                    message: "stored RMSE values disagree with the frame records".into(),
                });
            }
            println!("{}", summary(&r));
        }
        Command::Plot { map, candidates, out } => {
            let map = RatioMapSet::load(&map)?;
            let text = String::from_utf8_lossy(&read_bytes(&candidates)?).into_owned();
            let cells = parse_candidates_csv(&text).map_err(|message| HarnessError::Parse {
                path: candidates.clone(),
                message,
            })?;
            write_heatmap(&out, &map, &cells)?;
        }
        Command::Config => {
            print!("{}", cfg.to_text());
        }
    }
    Ok(())
}

fn summary(r: &brm_core::harness::ExperimentReport) -> serde_json::Value {
    json!({
        "frames": r.frames.len(),
        "events": r.events.iter().map(|e| json!({
            "frame": e.frame, "error": e.error, "distance_flown": e.distance_flown, "spread": e.spread,
        })).collect::<Vec<_>>(),
        "rmse_whole_path": r.rmse_whole_path,
        "rmse_after_first_convergence": r.rmse_after_first_convergence,
        "dead_reckoning_rmse_whole_path": r.dead_reckoning_rmse_whole_path,
        "dead_reckoning_rmse_after_first_convergence": r.dead_reckoning_rmse_after_first_convergence,
    })
}
