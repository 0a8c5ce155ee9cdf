//! End-to-end experiments: map preparation, simulated flight, sequential
//! matching against a dead-reckoning baseline, and RMSE reporting.

pub mod config;
pub mod export;
pub mod synthetic;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature::{extract, FeatureError, FeatureVector, FrameMask};
use crate::geo_raster::{parse_polygons, read_pgm, rasterize, BuildingPolygon, BuildingRaster, GeoError, GeoTransform};
use crate::matcher::{Candidate, Matcher, MatcherConfig, MatcherError, OdometryDelta, Phase};
use crate::num::Point2;
use crate::ratio_map::{generate, RatioMapError, RatioMapSet};
use crate::sim::{
    advance, corrupt, gen_trajectory, odometry, render_frame, travel_headings, FlightPlan, SimError, TruePose,
};

pub use config::ExperimentConfig;
pub use synthetic::SyntheticMapConfig;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    RatioMap(#[from] RatioMapError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Matcher(#[from] MatcherError),
    #[error("frame {index}: {source}")]
    Frame {
        index: usize,
        #[source]
        source: Box<HarnessError>,
    },
    #[error("{estimates} estimates against {truths} ground-truth points")]
    LengthMismatch { estimates: usize, truths: usize },
    #[error("no points to evaluate")]
    NoPoints,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl HarnessError {
    /// Stable snake_case identifier of the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Geo(_) => "geo",
            HarnessError::RatioMap(_) => "ratio_map",
            HarnessError::Feature(_) => "feature",
            HarnessError::Sim(_) => "sim",
            HarnessError::Matcher(_) => "matcher",
            HarnessError::Frame { source, .. } => source.kind(),
            HarnessError::LengthMismatch { .. } | HarnessError::NoPoints => "evaluation",
            HarnessError::Io { .. } => "io",
            HarnessError::Parse { .. } => "parse",
        }
    }

    pub fn frame(&self) -> Option<usize> {
        match self {
            HarnessError::Frame { index, .. } => Some(*index),
            _ => None,
        }
    }

    fn at_frame(index: usize) -> impl FnOnce(HarnessError) -> HarnessError {
        move |e| HarnessError::Frame {
            index,
            source: Box::new(e),
        }
    }

    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
        move |source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Root-mean-square Euclidean error.
pub fn rmse(estimates: &[Point2<f64>], truths: &[Point2<f64>]) -> Result<f64, HarnessError> {
    if estimates.len() != truths.len() {
        return Err(HarnessError::LengthMismatch {
            estimates: estimates.len(),
            truths: truths.len(),
        });
    }
    if estimates.is_empty() {
        return Err(HarnessError::NoPoints);
    }
    let sq: f64 = estimates
        .iter()
        .zip(truths)
        .map(|(e, t)| {
            let d = e.distance(t);
            d * d
        })
        .sum();
    Ok((sq / estimates.len() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub t: f64,
    pub truth: Point2<f64>,
    pub estimate: Point2<f64>,
    pub dead_reckoning: Point2<f64>,
    pub candidate_count: usize,
    pub phase: Phase,
    pub global_search: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceEvent {
    pub frame: usize,
    pub estimate: Point2<f64>,
    /// Distance from the estimate to the true position.
    pub error: f64,
    /// True path length flown up to this frame.
    pub distance_flown: f64,
    pub spread: f64,
}

/// Parameters echoed into the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSettings {
    pub n: usize,
    pub stride_m: f64,
    pub lattice_width: usize,
    pub lattice_height: usize,
    pub matcher: MatcherConfig<f64>,
    pub scale_bias: f64,
    pub sigma_d: f64,
    pub odometry_seed: u64,
    pub flip_prob: f64,
    pub segmentation_seed: u64,
    pub kidnap_frame: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub settings: ReportSettings,
    pub frames: Vec<FrameRecord>,
    pub events: Vec<ConvergenceEvent>,
    pub rmse_whole_path: f64,
    /// From the frame after the first convergence; absent without convergence.
    pub rmse_after_first_convergence: Option<f64>,
    pub dead_reckoning_rmse_whole_path: f64,
    pub dead_reckoning_rmse_after_first_convergence: Option<f64>,
}

impl ExperimentReport {
    pub fn first_convergence(&self) -> Option<usize> {
        self.events.first().map(|e| e.frame)
    }

    /// Recomputes the four RMSE fields from the frame records.
    pub fn recompute_rmse(&self) -> Result<(f64, Option<f64>, f64, Option<f64>), HarnessError> {
        let truth: Vec<_> = self.frames.iter().map(|f| f.truth).collect();
        let est: Vec<_> = self.frames.iter().map(|f| f.estimate).collect();
        let dr: Vec<_> = self.frames.iter().map(|f| f.dead_reckoning).collect();
        let after = |pts: &[Point2<f64>]| -> Result<Option<f64>, HarnessError> {
            match self.first_convergence() {
                Some(i) if i + 1 < pts.len() => Ok(Some(rmse(&pts[i + 1..], &truth[i + 1..])?)),
                _ => Ok(None),
            }
        };
        Ok((rmse(&est, &truth)?, after(&est)?, rmse(&dr, &truth)?, after(&dr)?))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Sensor-side view of one flight.
#[derive(Clone, Debug, PartialEq)]
pub struct Flight {
    pub poses: Vec<TruePose<f64>>,
    pub features: Vec<FeatureVector>,
    /// Odometry distance into frame `i + 1`.
    pub deltas: Vec<OdometryDelta<f64>>,
    /// Travel direction into frame `i + 1`, used only for dead reckoning.
    pub headings: Vec<f64>,
}

/// Matching results plus per-frame candidate snapshots.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: ExperimentReport,
    pub candidates: Vec<Vec<Candidate<f64>>>,
}

/// Raster from polygons, a PGM, or the synthetic city, in that order.
pub fn load_raster(cfg: &ExperimentConfig) -> Result<BuildingRaster<f64>, HarnessError> {
    if let Some(path) = &cfg.polygons {
        let bytes = std::fs::read(path).map_err(HarnessError::io(path))?;
        let polys = parse_polygons(&bytes)?;
        let margin = 2.0 * cfg.camera.ground_half_width();
        return Ok(rasterize_extent(&polys, cfg.resolution, margin)?);
    }
    if let Some(path) = &cfg.raster {
        return Ok(read_pgm(path)?);
    }
    Ok(synthetic::synthetic_raster(&cfg.synthetic, cfg.resolution)?)
}

/// Rasterizes over the polygon bounds grown by `margin` on every side.
pub fn rasterize_extent(
    polys: &[BuildingPolygon<f64>],
    resolution: f64,
    margin: f64,
) -> Result<BuildingRaster<f64>, GeoError> {
    let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in polys {
        let (a, b) = p.bounds();
        lo = Point2::new(lo.x.min(a.x), lo.y.min(a.y));
        hi = Point2::new(hi.x.max(b.x), hi.y.max(b.y));
    }
    if polys.is_empty() {
        return Err(GeoError::EmptyRaster);
    }
    let x0 = ((lo.x - margin) / resolution).floor() * resolution;
    let y0 = ((lo.y - margin) / resolution).floor() * resolution;
    let width = ((hi.x + margin - x0) / resolution).ceil() as usize;
    let height = ((hi.y + margin - y0) / resolution).ceil() as usize;
    let t = GeoTransform::new(x0 + resolution / 2.0, y0 + resolution / 2.0, resolution)?;
    rasterize(polys, t, width, height)
}

/// Loads the cached ratio map when it matches the config, otherwise generates (and caches) it.
pub fn prepare_map(cfg: &ExperimentConfig, raster: &BuildingRaster<f64>) -> Result<RatioMapSet<f64>, HarnessError> {
    let stride = cfg.stride_cells()?;
    if let Some(path) = &cfg.ratio_map {
        if path.exists() {
            let map = RatioMapSet::load(path)?;
            let same = map.n() == cfg.n
                && map.stride() == stride
                && map.fov_alpha_deg() == cfg.camera.fov_alpha_deg
                && map.altitude() == cfg.camera.altitude
                && map.transform() == raster.transform()
                && map.lattice_width() == crate::ratio_map::lattice_len(raster.width(), stride)
                && map.lattice_height() == crate::ratio_map::lattice_len(raster.height(), stride);
            if !same {
                return Err(HarnessError::Config(format!(
                    "cached ratio map {} was built with different parameters",
                    path.display()
                )));
            }
            return Ok(map);
        }
    }
    let map = generate(raster, &cfg.camera, cfg.n, stride)?;
    if let Some(path) = &cfg.ratio_map {
        map.save(path)?;
    }
    Ok(map)
}

/// Clean then segmentation-corrupted frames at every pose.
pub fn render_frames(
    cfg: &ExperimentConfig,
    raster: &BuildingRaster<f64>,
    poses: &[TruePose<f64>],
) -> Result<Vec<FrameMask>, HarnessError> {
    let h = cfg.frame_side();
    poses
        .par_iter()
        .enumerate()
        .map(|(i, pose)| {
            let mut frame = render_frame(raster, pose, &cfg.camera, h).map_err(|e| HarnessError::at_frame(i)(e.into()))?;
            frame.index = i;
            if cfg.segmentation.flip_prob > 0.0 {
                frame = corrupt(&frame, &cfg.segmentation.for_frame(i));
            }
            Ok(frame)
        })
        .collect()
}

/// Trajectory, frames, features and noisy odometry for one plan.
pub fn simulate_flight(
    cfg: &ExperimentConfig,
    raster: &BuildingRaster<f64>,
    plan: &FlightPlan<f64>,
) -> Result<(Flight, Vec<FrameMask>), HarnessError> {
    let poses = gen_trajectory(plan)?;
    let frames = render_frames(cfg, raster, &poses)?;
    let features = frames
        .iter()
        .map(|f| extract(f, cfg.n).map_err(|e| HarnessError::at_frame(f.index)(e.into())))
        .collect::<Result<Vec<_>, _>>()?;
    let deltas = if poses.len() > 1 {
        odometry(&poses, &cfg.odometry)?
    } else {
        Vec::new()
    };
    let headings = travel_headings(&poses);
    Ok((
        Flight {
            poses,
            features,
            deltas,
            headings,
        },
        frames,
    ))
}

/// Steps the matcher over a flight and scores it against the truth.
///
/// The estimate is the candidate centroid on frames where the set has
/// converged and the previous estimate advanced by odometry otherwise;
/// the baseline dead-reckons from the true start.
pub fn localize(
    map: &RatioMapSet<f64>,
    flight: &Flight,
    matcher_cfg: MatcherConfig<f64>,
    kidnap_frame: Option<usize>,
) -> Result<RunOutput, HarnessError> {
    let n = flight.poses.len();
    if n == 0 {
        return Err(HarnessError::Config("flight has no frames".into()));
    }
    if flight.features.len() != n || flight.deltas.len() + 1 != n || flight.headings.len() + 1 != n {
        return Err(HarnessError::Config("flight arrays have inconsistent lengths".into()));
    }
    let mut matcher = Matcher::new(map, matcher_cfg)?;
    let start = flight.poses[0].position();
    let mut estimate = start;
    let mut dr = start;
    let mut flown = 0.0;
    let mut frames = Vec::with_capacity(n);
    let mut events = Vec::new();
    let mut snapshots = Vec::with_capacity(n);

    for i in 0..n {
        let truth = flight.poses[i].position();
        let delta = if i == 0 {
            OdometryDelta::zero()
        } else {
            let (d, theta) = (flight.deltas[i - 1], flight.headings[i - 1]);
            estimate = advance(estimate, d.distance(), theta);
            dr = advance(dr, d.distance(), theta);
            flown += flight.poses[i - 1].position().distance(&truth);
            d
        };
        if kidnap_frame == Some(i) {
            matcher.reset();
        }
        let out = matcher
            .step(flight.features[i].values(), delta)
            .map_err(|e| HarnessError::at_frame(i)(e.into()))?;
        if let Some(c) = out.convergence {
            estimate = c.estimate;
            if out.event {
                events.push(ConvergenceEvent {
                    frame: i,
                    estimate,
                    error: estimate.distance(&truth),
                    distance_flown: flown,
                    spread: c.spread,
                });
            }
        }
        frames.push(FrameRecord {
            index: i,
            t: flight.poses[i].t,
            truth,
            estimate,
            dead_reckoning: dr,
            candidate_count: out.candidate_count,
            phase: out.phase,
            global_search: out.global_search,
        });
        snapshots.push(matcher.state().candidates.clone());
    }

    let settings = ReportSettings {
        n: map.n(),
        stride_m: map.lattice_spacing(),
        lattice_width: map.lattice_width(),
        lattice_height: map.lattice_height(),
        matcher: matcher_cfg,
        scale_bias: 0.0,
        sigma_d: 0.0,
        odometry_seed: 0,
        flip_prob: 0.0,
        segmentation_seed: 0,
        kidnap_frame,
    };
    let mut report = ExperimentReport {
        settings,
        frames,
        events,
        rmse_whole_path: 0.0,
        rmse_after_first_convergence: None,
        dead_reckoning_rmse_whole_path: 0.0,
        dead_reckoning_rmse_after_first_convergence: None,
    };
    let (whole, after, dr_whole, dr_after) = report.recompute_rmse()?;
    report.rmse_whole_path = whole;
    report.rmse_after_first_convergence = after;
    report.dead_reckoning_rmse_whole_path = dr_whole;
    report.dead_reckoning_rmse_after_first_convergence = dr_after;
    Ok(RunOutput {
        report,
        candidates: snapshots,
    })
}

/// Runs a simulated flight over an already prepared map.
pub fn run_on(
    cfg: &ExperimentConfig,
    raster: &BuildingRaster<f64>,
    map: &RatioMapSet<f64>,
) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let plan = cfg.flight_plan()?;
    let (flight, _) = simulate_flight(cfg, raster, &plan)?;
    let mut out = localize(map, &flight, cfg.matcher, cfg.kidnap_frame)?;
    let s = &mut out.report.settings;
    s.scale_bias = cfg.odometry.scale_bias;
    s.sigma_d = cfg.odometry.sigma_d;
    s.odometry_seed = cfg.odometry.seed;
    s.flip_prob = cfg.segmentation.flip_prob;
    s.segmentation_seed = cfg.segmentation.seed;
    Ok(out)
}

/// Full pipeline: raster, ratio map, simulation, matching, evaluation.
pub fn run(cfg: &ExperimentConfig) -> Result<(RunOutput, RatioMapSet<f64>), HarnessError> {
    cfg.validate()?;
    let raster = load_raster(cfg)?;
    let map = prepare_map(cfg, &raster)?;
    let out = run_on(cfg, &raster, &map)?;
    Ok((out, map))
}
