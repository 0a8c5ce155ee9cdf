//! Flat `key = value` experiment configuration.
//!
//! Lines starting with `#` and blank lines are ignored. Unknown keys are
//! errors. Every key has a default, so an empty file is a valid config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::harness::synthetic::SyntheticMapConfig;
use crate::harness::HarnessError;
use crate::matcher::MatcherConfig;
use crate::num::Point2;
use crate::ratio_map::CameraConfig;
use crate::sim::{FlightPlan, OdometryNoiseModel, SegmentationNoiseModel};

/// Square flight used when no plan file is given.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SquareFlight {
    pub origin: Point2<f64>,
    pub side: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// GeoJSON footprints; takes precedence over `raster`.
    pub polygons: Option<PathBuf>,
    /// PGM raster with a `.geo` sidecar.
    pub raster: Option<PathBuf>,
    /// Ratio map cache: loaded when present, written after generation otherwise.
    pub ratio_map: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Flight plan JSON; the square flight is used when absent.
    pub plan: Option<PathBuf>,
    /// Raster cell size when rasterizing polygons or the synthetic city.
    pub resolution: f64,
    pub n: usize,
    pub camera: CameraConfig<f64>,
    /// Lattice spacing in meters; must be a whole number of raster cells.
    pub stride_m: f64,
    pub matcher: MatcherConfig<f64>,
    pub square: SquareFlight,
    pub speed: f64,
    pub frame_interval: f64,
    pub odometry: OdometryNoiseModel<f64>,
    pub segmentation: SegmentationNoiseModel,
    pub synthetic: SyntheticMapConfig,
    /// Frame at which the candidate set is cleared before matching.
    pub kidnap_frame: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            polygons: None,
            raster: None,
            ratio_map: None,
            output_dir: None,
            plan: None,
            resolution: 1.0,
            n: 3,
            camera: CameraConfig::default(),
            stride_m: 5.0,
            matcher: MatcherConfig::default(),
            square: SquareFlight {
                origin: Point2::new(880.0, 880.0),
                side: 260.0,
            },
            speed: 5.0,
            frame_interval: 5.0,
            odometry: OdometryNoiseModel {
                scale_bias: 0.05,
                sigma_d: 1.0,
                seed: 1,
            },
            segmentation: SegmentationNoiseModel {
                flip_prob: 0.02,
                seed: 1,
            },
            synthetic: SyntheticMapConfig::default(),
            kidnap_frame: None,
        }
    }
}

/// Documented keys, in file order.
pub const KEYS: &[&str] = &[
    "polygons",
    "raster",
    "ratio_map",
    "output_dir",
    "plan",
    "resolution",
    "n",
    "fov_deg",
    "altitude",
    "frame_width",
    "frame_height",
    "stride_m",
    "e1",
    "epsilon",
    "d_max",
    "k_cap",
    "continue_after_convergence",
    "square_x",
    "square_y",
    "square_side",
    "speed",
    "frame_interval",
    "scale_bias",
    "sigma_d",
    "odometry_seed",
    "flip_prob",
    "segmentation_seed",
    "seed",
    "synthetic_size",
    "synthetic_district",
    "synthetic_seed",
    "kidnap_frame",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V, HarnessError>
where
    V::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| HarnessError::Config(format!("{key} = {value:?}: {e}")))
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let v = value.trim();
        match key.trim() {
            "polygons" => self.polygons = optional_path(v),
            "raster" => self.raster = optional_path(v),
            "ratio_map" => self.ratio_map = optional_path(v),
            "output_dir" => self.output_dir = optional_path(v),
            "plan" => self.plan = optional_path(v),
            "resolution" => self.resolution = parse(key, v)?,
            "n" => self.n = parse(key, v)?,
            "fov_deg" => self.camera.fov_alpha_deg = parse(key, v)?,
            "altitude" => self.camera.altitude = parse(key, v)?,
            "frame_width" => self.camera.frame_w = parse(key, v)?,
            "frame_height" => self.camera.frame_h = parse(key, v)?,
            "stride_m" => self.stride_m = parse(key, v)?,
            "e1" => self.matcher.e1 = parse(key, v)?,
            "epsilon" => self.matcher.epsilon = parse(key, v)?,
            "d_max" => self.matcher.d_max = parse(key, v)?,
            "k_cap" => self.matcher.k_cap = parse(key, v)?,
            "continue_after_convergence" => self.matcher.continue_after_convergence = parse(key, v)?,
            "square_x" => self.square.origin.x = parse(key, v)?,
            "square_y" => self.square.origin.y = parse(key, v)?,
            "square_side" => self.square.side = parse(key, v)?,
            "speed" => self.speed = parse(key, v)?,
            "frame_interval" => self.frame_interval = parse(key, v)?,
            "scale_bias" => self.odometry.scale_bias = parse(key, v)?,
            "sigma_d" => self.odometry.sigma_d = parse(key, v)?,
            "odometry_seed" => self.odometry.seed = parse(key, v)?,
            "flip_prob" => self.segmentation.flip_prob = parse(key, v)?,
            "segmentation_seed" => self.segmentation.seed = parse(key, v)?,
            "seed" => {
                let s = parse(key, v)?;
                self.odometry.seed = s;
                self.segmentation.seed = s;
            }
            "synthetic_size" => self.synthetic.size = parse(key, v)?,
            "synthetic_district" => self.synthetic.district = parse(key, v)?,
            "synthetic_seed" => self.synthetic.seed = parse(key, v)?,
            "kidnap_frame" => {
                self.kidnap_frame = if v.is_empty() || v == "none" {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            other => return Err(HarnessError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), HarnessError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k, v)
                .map_err(|e| HarnessError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_text(&text)?;
        if let Some(base) = path.parent() {
            for p in [
                &mut cfg.polygons,
                &mut cfg.raster,
                &mut cfg.ratio_map,
                &mut cfg.output_dir,
                &mut cfg.plan,
            ]
            .into_iter()
            .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Square side of the processed frame, pixels.
    pub fn frame_side(&self) -> usize {
        self.camera.frame_w.min(self.camera.frame_h) as usize
    }

    /// Lattice stride in raster cells.
    pub fn stride_cells(&self) -> Result<usize, HarnessError> {
        let s = self.stride_m / self.resolution;
        if !(s.is_finite() && s >= 1.0 && (s - s.round()).abs() < 1e-9) {
            return Err(HarnessError::Config(format!(
                "stride_m = {} is not a whole number of {} m cells",
                self.stride_m, self.resolution
            )));
        }
        Ok(s.round() as usize)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let cfg = |m: String| Err(HarnessError::Config(m));
        if !(self.resolution.is_finite() && self.resolution > 0.0) {
            return cfg(format!("resolution must be positive, got {}", self.resolution));
        }
        if self.n == 0 {
            return cfg("n must be at least 1".into());
        }
        self.camera
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.stride_cells()?;
        self.matcher
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if !(self.odometry.sigma_d >= 0.0 && self.odometry.sigma_d.is_finite()) {
            return cfg(format!("sigma_d must be >= 0, got {}", self.odometry.sigma_d));
        }
        if !self.odometry.scale_bias.is_finite() || self.odometry.scale_bias <= -1.0 {
            return cfg(format!("scale_bias must exceed -1, got {}", self.odometry.scale_bias));
        }
        SegmentationNoiseModel::new(self.segmentation.flip_prob, self.segmentation.seed)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        for p in [&self.polygons, &self.raster, &self.plan].into_iter().flatten() {
            if !p.exists() {
                return cfg(format!("{} does not exist", p.display()));
            }
        }
        Ok(())
    }

    /// Flight plan from the plan file or the square parameters.
    pub fn flight_plan(&self) -> Result<FlightPlan<f64>, HarnessError> {
        let plan = match &self.plan {
            Some(path) => {
                let bytes = std::fs::read(path)
                    .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
                serde_json::from_slice(&bytes)
                    .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?
            }
            None => FlightPlan::square(
                self.square.origin,
                self.square.side,
                self.speed,
                self.frame_interval,
                self.camera.altitude,
            ),
        };
        plan.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(plan)
    }

    /// Renders the config back into the file format.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("polygons", path(&self.polygons));
        put("raster", path(&self.raster));
        put("ratio_map", path(&self.ratio_map));
        put("output_dir", path(&self.output_dir));
        put("plan", path(&self.plan));
        put("resolution", self.resolution.to_string());
        put("n", self.n.to_string());
        put("fov_deg", self.camera.fov_alpha_deg.to_string());
        put("altitude", self.camera.altitude.to_string());
        put("frame_width", self.camera.frame_w.to_string());
        put("frame_height", self.camera.frame_h.to_string());
        put("stride_m", self.stride_m.to_string());
        put("e1", self.matcher.e1.to_string());
        put("epsilon", self.matcher.epsilon.to_string());
        put("d_max", self.matcher.d_max.to_string());
        put("k_cap", self.matcher.k_cap.to_string());
        put(
            "continue_after_convergence",
            self.matcher.continue_after_convergence.to_string(),
        );
        put("square_x", self.square.origin.x.to_string());
        put("square_y", self.square.origin.y.to_string());
        put("square_side", self.square.side.to_string());
        put("speed", self.speed.to_string());
        put("frame_interval", self.frame_interval.to_string());
        put("scale_bias", self.odometry.scale_bias.to_string());
        put("sigma_d", self.odometry.sigma_d.to_string());
        put("odometry_seed", self.odometry.seed.to_string());
        put("flip_prob", self.segmentation.flip_prob.to_string());
        put("segmentation_seed", self.segmentation.seed.to_string());
        put("synthetic_size", self.synthetic.size.to_string());
        put("synthetic_district", self.synthetic.district.to_string());
        put("synthetic_seed", self.synthetic.seed.to_string());
        put(
            "kidnap_frame",
            self.kidnap_frame.map(|k| k.to_string()).unwrap_or_default(),
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_table_defaults() {
        let c = ExperimentConfig::from_text("# nothing\n\n").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.n, 3);
        assert_eq!(c.camera.fov_alpha_deg, 43.0);
        assert_eq!(c.camera.altitude, 150.0);
        assert_eq!(c.matcher.e1, 0.3);
        assert_eq!(c.matcher.epsilon, 25.0);
        assert_eq!(c.matcher.d_max, 75.0);
        assert_eq!(c.frame_interval, 5.0);
        assert_eq!(c.frame_side(), 480);
        assert_eq!(c.stride_cells().unwrap(), 5);
    }

    #[test]
    fn overrides_and_errors() {
        let mut c = ExperimentConfig::from_text("e1 = 0.5\nseed=9\nkidnap_frame = 12\n").unwrap();
        assert_eq!(c.matcher.e1, 0.5);
        assert_eq!((c.odometry.seed, c.segmentation.seed), (9, 9));
        assert_eq!(c.kidnap_frame, Some(12));
        c.set("continue_after_convergence", "false").unwrap();
        assert!(!c.matcher.continue_after_convergence);
        assert!(ExperimentConfig::from_text("bogus = 1").is_err());
        assert!(ExperimentConfig::from_text("n = three").is_err());
        assert!(ExperimentConfig::from_text("n 3").is_err());
        c.stride_m = 2.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::default();
        c.kidnap_frame = Some(4);
        c.ratio_map = Some("cache.brm".into());
        c.odometry.sigma_d = 0.125;
        assert_eq!(ExperimentConfig::from_text(&c.to_text()).unwrap(), c);
        for k in KEYS.iter().filter(|&&k| k != "seed") {
            assert!(c.to_text().contains(&format!("{k} = ")), "{k}");
        }
    }

    #[test]
    fn degenerate_plan_is_config_error() {
        let mut c = ExperimentConfig::default();
        c.square.side = 0.0;
        assert!(matches!(c.flight_plan(), Err(HarnessError::Config(_))));
    }
}
