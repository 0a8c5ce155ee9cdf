//! Procedural city used by the acceptance runs: districts of differing
//! character split into street blocks of parks, houses, apartment slabs,
//! warehouses and courtyard buildings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::geo_raster::{rasterize, BuildingPolygon, BuildingRaster, GeoError, GeoTransform};
use crate::num::Point2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticMapConfig {
    /// Side of the square world, meters.
    pub size: f64,
    /// Side of one district, meters.
    pub district: f64,
    pub seed: u64,
}

impl Default for SyntheticMapConfig {
    fn default() -> Self {
        Self {
            size: 2000.0,
            district: 250.0,
            seed: 2024,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Block {
    Park,
    Houses,
    Slabs,
    Warehouse,
    Courtyard,
}

/// Block-type weights per district character: rural, residential, downtown, industrial.
const DISTRICTS: [[(Block, u32); 5]; 4] = [
    [(Block::Park, 6), (Block::Houses, 3), (Block::Slabs, 0), (Block::Warehouse, 1), (Block::Courtyard, 0)],
    [(Block::Park, 2), (Block::Houses, 6), (Block::Slabs, 3), (Block::Warehouse, 0), (Block::Courtyard, 1)],
    [(Block::Park, 1), (Block::Houses, 1), (Block::Slabs, 3), (Block::Warehouse, 1), (Block::Courtyard, 5)],
    [(Block::Park, 2), (Block::Houses, 1), (Block::Slabs, 1), (Block::Warehouse, 6), (Block::Courtyard, 0)],
];

fn pick(rng: &mut ChaCha8Rng, weights: &[(Block, u32)]) -> Block {
    let total: u32 = weights.iter().map(|w| w.1).sum();
    let mut x = rng.gen_range(0..total);
    for &(b, w) in weights {
        if x < w {
            return b;
        }
        x -= w;
    }
    unreachable!("weights sum to total")
}

/// Cut positions splitting `[0, len]` into pieces of 45..110 m.
fn cuts(rng: &mut ChaCha8Rng, len: f64) -> Vec<f64> {
    let mut out = vec![0.0];
    let mut at = 0.0;
    while len - at > 110.0 {
        at += rng.gen_range(45.0..110.0);
        if len - at < 45.0 {
            break;
        }
        out.push(at);
    }
    out.push(len);
    out
}

/// Building footprints covering `[0, size]^2`.
///
/// Each district is cut into street blocks; every block holds one kind of
/// development drawn from the district's character.
pub fn synthetic_buildings(cfg: &SyntheticMapConfig) -> Vec<BuildingPolygon<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_side = (cfg.size / cfg.district).ceil() as usize;
    let mut out = Vec::new();
    for dj in 0..per_side {
        for di in 0..per_side {
            let character = DISTRICTS[rng.gen_range(0..DISTRICTS.len())];
            let x0 = di as f64 * cfg.district;
            let y0 = dj as f64 * cfg.district;
            let xs = cuts(&mut rng, cfg.district.min(cfg.size - x0));
            let ys = cuts(&mut rng, cfg.district.min(cfg.size - y0));
            for wy in ys.windows(2) {
                for wx in xs.windows(2) {
                    let road = rng.gen_range(4.0..8.0);
                    let lo = Point2::new(x0 + wx[0] + road, y0 + wy[0] + road);
                    let hi = Point2::new(x0 + wx[1] - road, y0 + wy[1] - road);
                    let kind = pick(&mut rng, &character);
                    block(&mut rng, kind, lo, hi, &mut out);
                }
            }
        }
    }
    out
}

fn block(rng: &mut ChaCha8Rng, kind: Block, lo: Point2<f64>, hi: Point2<f64>, out: &mut Vec<BuildingPolygon<f64>>) {
    let (w, h) = (hi.x - lo.x, hi.y - lo.y);
    let center = Point2::new((lo.x + hi.x) / 2.0, (lo.y + hi.y) / 2.0);
    match kind {
        Block::Park => {
            if rng.gen_bool(0.3) {
                let s = rng.gen_range(6.0..12.0);
                out.push(rectangle(center, s, s, rng.gen_range(0.0..1.5)));
            }
        }
        Block::Houses => {
            let pitch = rng.gen_range(16.0..24.0);
            let (nx, ny) = ((w / pitch).floor() as usize, (h / pitch).floor() as usize);
            for j in 0..ny {
                for i in 0..nx {
                    if !rng.gen_bool(0.75) {
                        continue;
                    }
                    let bw = rng.gen_range(7.0..pitch - 5.0);
                    let bh = rng.gen_range(7.0..pitch - 5.0);
                    let c = Point2::new(lo.x + (i as f64 + 0.5) * pitch, lo.y + (j as f64 + 0.5) * pitch);
                    out.push(rectangle(c, bw, bh, rng.gen_range(-0.3..0.3)));
                }
            }
        }
        Block::Slabs => {
            let depth = rng.gen_range(10.0..16.0);
            let gap = rng.gen_range(12.0..24.0);
            let horizontal = rng.gen_bool(0.5);
            let (along, across) = if horizontal { (w, h) } else { (h, w) };
            let rows = ((across + gap) / (depth + gap)).floor() as usize;
            for r in 0..rows {
                let len = along * rng.gen_range(0.5..0.95);
                let off = (r as f64 + 0.5) * (depth + gap) - gap / 2.0;
                let shift = rng.gen_range(0.0..=(along - len)) + len / 2.0;
                let (c, bw, bh) = if horizontal {
                    (Point2::new(lo.x + shift, lo.y + off), len, depth)
                } else {
                    (Point2::new(lo.x + off, lo.y + shift), depth, len)
                };
                out.push(rectangle(c, bw, bh, 0.0));
            }
        }
        Block::Warehouse => {
            let fx = rng.gen_range(0.5..0.95);
            let fy = rng.gen_range(0.5..0.95);
            let c = Point2::new(
                lo.x + w / 2.0 + rng.gen_range(-0.5..0.5) * w * (1.0 - fx),
                lo.y + h / 2.0 + rng.gen_range(-0.5..0.5) * h * (1.0 - fy),
            );
            out.push(rectangle(c, w * fx, h * fy, 0.0));
        }
        Block::Courtyard => {
            let depth = rng.gen_range(10.0..16.0);
            if w > 2.0 * depth + 8.0 && h > 2.0 * depth + 8.0 {
                let outer = rect_ring(center, w, h);
                let inner = rect_ring(center, w - 2.0 * depth, h - 2.0 * depth);
                out.push(BuildingPolygon::new(outer, vec![inner]).expect("courtyard polygon"));
            } else {
                out.push(rectangle(center, w * 0.8, h * 0.8, 0.0));
            }
        }
    }
}

fn rect_ring(c: Point2<f64>, w: f64, h: f64) -> Vec<Point2<f64>> {
    [(-w, -h), (w, -h), (w, h), (-w, h)]
        .iter()
        .map(|&(dx, dy)| Point2::new(c.x + dx / 2.0, c.y + dy / 2.0))
        .collect()
}

fn rectangle(c: Point2<f64>, w: f64, h: f64, angle: f64) -> BuildingPolygon<f64> {
    let (s, co) = angle.sin_cos();
    let corners = [(-w, -h), (w, -h), (w, h), (-w, h)]
        .iter()
        .map(|&(dx, dy)| {
            let (dx, dy) = (dx / 2.0, dy / 2.0);
            Point2::new(c.x + co * dx - s * dy, c.y + s * dx + co * dy)
        })
        .collect();
    BuildingPolygon::new(corners, Vec::new()).expect("rectangle is a valid polygon")
}

/// Rasterizes the synthetic city; cell `(0, 0)` is centred on `(res/2, res/2)`.
pub fn synthetic_raster(cfg: &SyntheticMapConfig, resolution: f64) -> Result<BuildingRaster<f64>, GeoError> {
    let cells = (cfg.size / resolution).round() as usize;
    let t = GeoTransform::new(resolution / 2.0, resolution / 2.0, resolution)?;
    rasterize(&synthetic_buildings(cfg), t, cells, cells)
}

/// GeoJSON FeatureCollection of the footprints with a projected `crs` member.
pub fn to_geojson(polys: &[BuildingPolygon<f64>]) -> serde_json::Value {
    let ring = |r: &[Point2<f64>]| {
        let mut v: Vec<[f64; 2]> = r.iter().map(|p| [p.x, p.y]).collect();
        v.push(v[0]);
        v
    };
    let features: Vec<_> = polys
        .iter()
        .map(|p| {
            let rings: Vec<_> = p.rings().map(ring).collect();
            json!({
                "type": "Feature",
                "properties": {},
                "geometry": { "type": "Polygon", "coordinates": rings }
            })
        })
        .collect();
    json!({
        "type": "FeatureCollection",
        "crs": { "type": "name", "properties": { "name": "LOCAL:METRIC" } },
        "features": features
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo_raster::parse_polygons;

    #[test]
    fn deterministic_and_mixed_density() {
        let cfg = SyntheticMapConfig {
            size: 1000.0,
            ..Default::default()
        };
        let a = synthetic_raster(&cfg, 2.0).unwrap();
        assert_eq!(a, synthetic_raster(&cfg, 2.0).unwrap());
        assert_eq!((a.width(), a.height()), (500, 500));
        let f = a.building_fraction();
        assert!((0.05..0.6).contains(&f), "{f}");
        let districts: Vec<f64> = (0..4)
            .map(|d| a.cells().window(d * 125, 0, 125, 125).count_true() as f64 / 15625.0)
            .collect();
        let spread = districts.iter().cloned().fold(f64::MIN, f64::max)
            - districts.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread > 0.1, "{districts:?}");
    }

    #[test]
    fn geojson_round_trip() {
        let cfg = SyntheticMapConfig {
            size: 250.0,
            district: 250.0,
            seed: 3,
        };
        let polys = synthetic_buildings(&cfg);
        let doc = serde_json::to_vec(&to_geojson(&polys)).unwrap();
        assert_eq!(parse_polygons::<f64>(&doc).unwrap(), polys);
    }
}
