//! Building-ratio-map global localization for downward-looking UAV cameras.
//!
//! Geometry and matching are generic over [`num::Real`]; the aliases below
//! fix the scalar to `f64`, with `f32` variants where they are useful.

pub mod feature;
pub mod geo_raster;
pub mod grid;
pub mod harness;
pub mod matcher;
pub mod num;
pub mod ratio_map;
pub mod sim;

pub use feature::{extract, FeatureVector, FrameMask};
pub use grid::{BitGrid, Grid};
pub use num::{Point2 as GenericPoint2, Real};

pub type Point2 = num::Point2<f64>;
pub type GeoTransform = geo_raster::GeoTransform<f64>;
pub type BuildingPolygon = geo_raster::BuildingPolygon<f64>;
pub type BuildingRaster = geo_raster::BuildingRaster<f64>;
pub type CameraConfig = ratio_map::CameraConfig<f64>;
pub type RatioMapSet = ratio_map::RatioMapSet<f64>;
pub type MatcherConfig = matcher::MatcherConfig<f64>;
pub type Matcher<'m> = matcher::Matcher<'m, f64>;
pub type Candidate = matcher::Candidate<f64>;
pub type OdometryDelta = matcher::OdometryDelta<f64>;
pub type TruePose = sim::TruePose<f64>;
pub type FlightPlan = sim::FlightPlan<f64>;
pub type OdometryNoiseModel = sim::OdometryNoiseModel<f64>;

pub type RatioMapSetF32 = ratio_map::RatioMapSet<f32>;
pub type MatcherF32<'m> = matcher::Matcher<'m, f32>;
