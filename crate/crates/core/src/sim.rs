//! Deterministic flight simulation: trajectories, rendered binary frames,
//! noisy travelled distances and segmentation noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature::FrameMask;
use crate::geo_raster::BuildingRaster;
use crate::grid::BitGrid;
use crate::matcher::OdometryDelta;
use crate::num::{round_half_up, Point2, Real};
use crate::ratio_map::CameraConfig;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid flight plan: {0}")]
    Plan(String),
    #[error("invalid noise model: {0}")]
    Noise(String),
    #[error("frame footprint at ({x:.1}, {y:.1}) leaves the map")]
    OutOfMap { x: f64, y: f64 },
    #[error("frame size must be positive")]
    EmptyFrame,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruePose<T> {
    pub t: T,
    pub x: T,
    pub y: T,
    pub z: T,
    /// Direction of travel, radians.
    pub yaw: T,
}

impl<T: Real> TruePose<T> {
    pub fn position(&self) -> Point2<T> {
        Point2::new(self.x, self.y)
    }
}

/// Constant-speed, constant-altitude piecewise-linear flight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlightPlan<T> {
    pub waypoints: Vec<Point2<T>>,
    /// m/s.
    pub speed: T,
    /// Seconds between processed frames.
    pub frame_interval: T,
    pub altitude: T,
}

impl<T: Real> FlightPlan<T> {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.waypoints.len() < 2 {
            return Err(SimError::Plan("need at least two waypoints".into()));
        }
        if !self.waypoints.iter().all(Point2::is_finite) {
            return Err(SimError::Plan("waypoints must be finite".into()));
        }
        let positive = |v: T| v.is_finite() && v > T::zero();
        if !positive(self.speed) {
            return Err(SimError::Plan("speed must be positive".into()));
        }
        if !positive(self.frame_interval) {
            return Err(SimError::Plan("frame interval must be positive".into()));
        }
        if !positive(self.altitude) {
            return Err(SimError::Plan("altitude must be positive".into()));
        }
        for (i, w) in self.waypoints.windows(2).enumerate() {
            if w[0].distance(&w[1]) == T::zero() {
                return Err(SimError::Plan(format!("leg {i} has zero length")));
            }
        }
        Ok(())
    }

    /// Closed square starting and ending at `corner`, counter-clockwise.
    pub fn square(corner: Point2<T>, side: T, speed: T, frame_interval: T, altitude: T) -> Self {
        let (x, y) = (corner.x, corner.y);
        Self {
            waypoints: vec![
                corner,
                Point2::new(x + side, y),
                Point2::new(x + side, y + side),
                Point2::new(x, y + side),
                corner,
            ],
            speed,
            frame_interval,
            altitude,
        }
    }

    pub fn length(&self) -> T {
        self.waypoints.windows(2).map(|w| w[0].distance(&w[1])).sum()
    }
}

/// Samples the plan every `frame_interval` seconds, endpoints included.
pub fn gen_trajectory<T: Real>(plan: &FlightPlan<T>) -> Result<Vec<TruePose<T>>, SimError> {
    plan.validate()?;
    let legs: Vec<(Point2<T>, Point2<T>, T)> = plan
        .waypoints
        .windows(2)
        .map(|w| (w[0], w[1], w[0].distance(&w[1])))
        .collect();
    let total = plan.length();
    let step = plan.speed * plan.frame_interval;
    let slack = total * T::lit(1e-9);
    let mut poses = Vec::new();
    let mut i = 0usize;
    loop {
        let s = T::lit(i as f64) * step;
        if s > total + slack {
            break;
        }
        let mut start = T::zero();
        let mut pose = None;
        for (j, &(a, b, len)) in legs.iter().enumerate() {
            let last = j + 1 == legs.len();
            if s < start + len || last {
                let u = ((s - start) / len).min(T::one());
                pose = Some(TruePose {
                    t: T::lit(i as f64) * plan.frame_interval,
                    x: a.x + (b.x - a.x) * u,
                    y: a.y + (b.y - a.y) * u,
                    z: plan.altitude,
                    yaw: (b.y - a.y).atan2(b.x - a.x),
                });
                break;
            }
            start = start + len;
        }
        poses.push(pose.expect("at least one leg"));
        i += 1;
    }
    Ok(poses)
}

/// Downward binary frame of side `h` at `pose`, nearest-neighbour sampled.
///
/// The frame spans `2 z tan(alpha / 2)` on the ground; pixel `(h/2, h/2)`
/// sits on the pose and frame axes are rotated by the pose yaw.
pub fn render_frame<T: Real>(
    raster: &BuildingRaster<T>,
    pose: &TruePose<T>,
    camera: &CameraConfig<T>,
    h: usize,
) -> Result<FrameMask, SimError> {
    if h == 0 {
        return Err(SimError::EmptyFrame);
    }
    let half_width = pose.z * (camera.fov_alpha_deg.to_radians() / T::lit(2.0)).tan();
    let pixel = T::lit(2.0) * half_width / T::lit(h as f64);
    render_frame_with_pixel(raster, pose, pixel, h)
}

/// As [`render_frame`] with an explicit ground size per frame pixel.
pub fn render_frame_with_pixel<T: Real>(
    raster: &BuildingRaster<T>,
    pose: &TruePose<T>,
    pixel: T,
    h: usize,
) -> Result<FrameMask, SimError> {
    let t = raster.transform();
    let res = t.resolution();
    let c = T::lit((h / 2) as f64);
    let (sin, cos) = pose.yaw.sin_cos();
    // Pose and frame axes expressed in fractional raster cells.
    let px = (pose.x - t.origin_x()) / res;
    let py = (pose.y - t.origin_y()) / res;
    let scale = pixel / res;
    let (w, hh) = (raster.width() as i64, raster.height() as i64);
    let cells = raster.cells();
    let mut bits = Vec::with_capacity(h * h);
    for v in 0..h {
        let dv = (T::lit(v as f64) - c) * scale;
        for u in 0..h {
            let du = (T::lit(u as f64) - c) * scale;
            let gx = round_half_up(px + cos * du - sin * dv).to_i64().unwrap_or(-1);
            let gy = round_half_up(py + sin * du + cos * dv).to_i64().unwrap_or(-1);
            if gx < 0 || gy < 0 || gx >= w || gy >= hh {
                return Err(SimError::OutOfMap {
                    x: pose.x.to_f64_lossy(),
                    y: pose.y.to_f64_lossy(),
                });
            }
            bits.push(*cells.get(gx as usize, gy as usize));
        }
    }
    let frame = FrameMask::new(BitGrid::from_vec(h, h, bits), 0, pose.t.to_f64_lossy())
        .expect("square frame");
    Ok(frame)
}

/// Multiplicative scale drift plus white noise on the travelled distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdometryNoiseModel<T> {
    pub scale_bias: T,
    /// Std of the additive per-step noise, meters.
    pub sigma_d: T,
    pub seed: u64,
}

impl<T: Real> OdometryNoiseModel<T> {
    pub fn noiseless() -> Self {
        Self {
            scale_bias: T::zero(),
            sigma_d: T::zero(),
            seed: 0,
        }
    }
}

/// Noisy distance between consecutive poses, one per pose after the first.
pub fn odometry<T: Real>(
    poses: &[TruePose<T>],
    noise: &OdometryNoiseModel<T>,
) -> Result<Vec<OdometryDelta<T>>, SimError> {
    if poses.len() < 2 {
        return Err(SimError::Plan("odometry needs at least two poses".into()));
    }
    let sigma = noise.sigma_d.to_f64_lossy();
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| SimError::Noise(format!("sigma_d = {sigma}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let scale = T::one() + noise.scale_bias;
    Ok(poses
        .windows(2)
        .map(|w| {
            let truth = w[0].position().distance(&w[1].position());
            let eta = T::lit(normal.sample(&mut rng));
            let d = (truth * scale + eta).max(T::zero());
            OdometryDelta::new(d).expect("clamped distance")
        })
        .collect())
}

/// Direction of travel between consecutive poses.
pub fn travel_headings<T: Real>(poses: &[TruePose<T>]) -> Vec<T> {
    poses
        .windows(2)
        .map(|w| (w[1].y - w[0].y).atan2(w[1].x - w[0].x))
        .collect()
}

/// Integrates distances along headings from `start`; output has `deltas.len() + 1` points.
pub fn dead_reckon<T: Real>(start: Point2<T>, deltas: &[OdometryDelta<T>], headings: &[T]) -> Vec<Point2<T>> {
    let mut out = Vec::with_capacity(deltas.len() + 1);
    let mut p = start;
    out.push(p);
    for (d, &theta) in deltas.iter().zip(headings) {
        p = advance(p, d.distance(), theta);
        out.push(p);
    }
    out
}

#[inline]
pub fn advance<T: Real>(p: Point2<T>, d: T, theta: T) -> Point2<T> {
    Point2::new(p.x + d * theta.cos(), p.y + d * theta.sin())
}

/// Independent per-pixel flips.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationNoiseModel {
    pub flip_prob: f64,
    pub seed: u64,
}

impl SegmentationNoiseModel {
    pub fn new(flip_prob: f64, seed: u64) -> Result<Self, SimError> {
        if !(0.0..=1.0).contains(&flip_prob) {
            return Err(SimError::Noise(format!("flip_prob {flip_prob} outside [0, 1]")));
        }
        Ok(Self { flip_prob, seed })
    }

    /// Independent stream for frame `index` derived from the base seed.
    pub fn for_frame(&self, index: usize) -> Self {
        Self {
            flip_prob: self.flip_prob,
            seed: self
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(index as u64),
        }
    }
}

pub fn corrupt(frame: &FrameMask, noise: &SegmentationNoiseModel) -> FrameMask {
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let bits = frame.bits().map(|&b| b ^ rng.gen_bool(noise.flip_prob));
    FrameMask::new(bits, frame.index, frame.timestamp).expect("same shape")
}
