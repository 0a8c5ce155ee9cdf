//! Building footprints: GeoJSON ingestion, even-odd rasterization and the
//! world ↔ grid mapping.
//!
//! Grid rows grow with world `y` and columns with world `x`; cell `(0, 0)`
//! is centred on `(origin_x, origin_y)`. Input coordinates must already be
//! in a projected metric system, no reprojection is done here.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::grid::BitGrid;
use crate::num::{round_half_up, Point2, Real};

/// Default upper bound on `width * height` for a raster.
pub const DEFAULT_MAX_CELLS: usize = 100_000_000;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("invalid geotransform: {0}")]
    InvalidTransform(String),
    #[error("malformed GeoJSON at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unsupported GeoJSON: {0}")]
    Unsupported(String),
    #[error(
        "coordinates look geographic (all |x| <= 180 and |y| <= 90); \
         reproject the footprints to a metric CRS before rasterizing"
    )]
    GeographicCoordinates,
    #[error("invalid polygon: {0}")]
    InvalidPolygon(String),
    #[error("raster of {width}x{height} cells exceeds the limit of {max} cells")]
    TooLarge {
        width: usize,
        height: usize,
        max: usize,
    },
    #[error("raster dimensions must be positive")]
    EmptyRaster,
    #[error("point ({x}, {y}) falls outside the {width}x{height} grid")]
    OutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("raster I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("raster image: {0}")]
    Image(#[from] image::ImageError),
    #[error("sidecar {path}: {message}")]
    Sidecar { path: PathBuf, message: String },
}

/// Cell index, column first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub col: usize,
    pub row: usize,
}

impl Cell {
    pub const fn new(col: usize, row: usize) -> Self {
        Self { col, row }
    }
}

/// Axis-aligned mapping between grid cells and world meters.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GeoTransform<T> {
    origin_x: T,
    origin_y: T,
    resolution: T,
}

impl<T: Real> GeoTransform<T> {
    pub fn new(origin_x: T, origin_y: T, resolution: T) -> Result<Self, GeoError> {
        if !(resolution.is_finite() && resolution > T::zero()) {
            return Err(GeoError::InvalidTransform(format!(
                "resolution must be positive and finite, got {resolution}"
            )));
        }
        if !(origin_x.is_finite() && origin_y.is_finite()) {
            return Err(GeoError::InvalidTransform("origin must be finite".into()));
        }
        Ok(Self {
            origin_x,
            origin_y,
            resolution,
        })
    }

    pub fn origin_x(&self) -> T {
        self.origin_x
    }

    pub fn origin_y(&self) -> T {
        self.origin_y
    }

    /// Meters per cell.
    pub fn resolution(&self) -> T {
        self.resolution
    }

    /// World position of a cell centre. Accepts fractional / negative cells.
    #[inline]
    pub fn cell_center(&self, col: T, row: T) -> Point2<T> {
        Point2::new(
            self.origin_x + col * self.resolution,
            self.origin_y + row * self.resolution,
        )
    }

    #[inline]
    pub fn grid_to_world(&self, cell: Cell) -> Point2<T> {
        self.cell_center(T::lit(cell.col as f64), T::lit(cell.row as f64))
    }

    /// Nearest cell without bounds checking.
    #[inline]
    pub fn world_to_cell_unbounded(&self, p: Point2<T>) -> (i64, i64) {
        let c = round_half_up((p.x - self.origin_x) / self.resolution);
        let r = round_half_up((p.y - self.origin_y) / self.resolution);
        (
            c.to_i64().unwrap_or(i64::MIN),
            r.to_i64().unwrap_or(i64::MIN),
        )
    }

    /// Nearest cell inside a `width`×`height` grid; out-of-bounds points are an error.
    pub fn world_to_grid(&self, p: Point2<T>, width: usize, height: usize) -> Result<Cell, GeoError> {
        let (c, r) = self.world_to_cell_unbounded(p);
        if c < 0 || r < 0 || c >= width as i64 || r >= height as i64 {
            return Err(GeoError::OutOfBounds {
                x: p.x.to_f64_lossy(),
                y: p.y.to_f64_lossy(),
                width,
                height,
            });
        }
        Ok(Cell::new(c as usize, r as usize))
    }

    pub fn cast<U: Real>(&self) -> GeoTransform<U> {
        GeoTransform {
            origin_x: U::lit(self.origin_x.to_f64_lossy()),
            origin_y: U::lit(self.origin_y.to_f64_lossy()),
            resolution: U::lit(self.resolution.to_f64_lossy()),
        }
    }
}

/// Building outline: exterior ring plus holes, implicitly closed.
#[derive(Clone, Debug, PartialEq)]
pub struct BuildingPolygon<T> {
    exterior: Vec<Point2<T>>,
    holes: Vec<Vec<Point2<T>>>,
}

impl<T: Real> BuildingPolygon<T> {
    pub fn new(exterior: Vec<Point2<T>>, holes: Vec<Vec<Point2<T>>>) -> Result<Self, GeoError> {
        let exterior = normalize_ring(exterior)?;
        let holes = holes
            .into_iter()
            .map(normalize_ring)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { exterior, holes })
    }

    pub fn exterior(&self) -> &[Point2<T>] {
        &self.exterior
    }

    pub fn holes(&self) -> &[Vec<Point2<T>>] {
        &self.holes
    }

    pub fn rings(&self) -> impl Iterator<Item = &[Point2<T>]> {
        std::iter::once(self.exterior.as_slice()).chain(self.holes.iter().map(Vec::as_slice))
    }

    /// (min, max) corners of the exterior.
    pub fn bounds(&self) -> (Point2<T>, Point2<T>) {
        let mut lo = self.exterior[0];
        let mut hi = self.exterior[0];
        for p in self.rings().flatten() {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        (lo, hi)
    }

    /// Even-odd membership with the half-open crossing rule used by the rasterizer.
    pub fn contains(&self, p: Point2<T>) -> bool {
        let mut inside = false;
        for ring in self.rings() {
            let n = ring.len();
            for i in 0..n {
                let a = ring[i];
                let b = ring[(i + 1) % n];
                if (a.y > p.y) != (b.y > p.y) && p.x < edge_crossing_x(a, b, p.y) {
                    inside = !inside;
                }
            }
        }
        inside
    }
}

fn normalize_ring<T: Real>(mut ring: Vec<Point2<T>>) -> Result<Vec<Point2<T>>, GeoError> {
    if ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    if ring.len() < 3 {
        return Err(GeoError::InvalidPolygon(format!(
            "ring has {} distinct vertices, need at least 3",
            ring.len()
        )));
    }
    if !ring.iter().all(Point2::is_finite) {
        return Err(GeoError::InvalidPolygon("non-finite vertex".into()));
    }
    Ok(ring)
}

#[inline]
fn edge_crossing_x<T: Real>(a: Point2<T>, b: Point2<T>, y: T) -> T {
    a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y)
}

/// Options for [`parse_polygons_with`].
#[derive(Clone, Copy, Debug)]
pub struct ParseOptions {
    /// Reject documents whose coordinates all fall in the lon/lat range.
    /// Skipped when the document declares a projected `crs` member.
    pub reject_geographic: bool,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            reject_geographic: true,
        }
    }
}

/// Parses a GeoJSON FeatureCollection of Polygon / MultiPolygon features.
pub fn parse_polygons<T: Real>(document: &[u8]) -> Result<Vec<BuildingPolygon<T>>, GeoError> {
    parse_polygons_with(document, ParseOptions::default())
}

pub fn parse_polygons_with<T: Real>(
    document: &[u8],
    options: ParseOptions,
) -> Result<Vec<BuildingPolygon<T>>, GeoError> {
    let value: serde_json::Value =
        serde_json::from_slice(document).map_err(|e| GeoError::Parse {
            offset: byte_offset(document, e.line(), e.column()),
            message: e.to_string(),
        })?;
    let doc: CollectionDoc = serde_json::from_value(value)
        .map_err(|e| GeoError::Unsupported(e.to_string()))?;
    if doc.kind != "FeatureCollection" {
        return Err(GeoError::Unsupported(format!(
            "expected a FeatureCollection, got {}",
            doc.kind
        )));
    }
    let declared_projected = doc.crs.as_ref().map(crs_is_projected);

    let mut out = Vec::new();
    for (i, feature) in doc.features.into_iter().enumerate() {
        if feature.kind != "Feature" {
            return Err(GeoError::Unsupported(format!("member {i} is a {}", feature.kind)));
        }
        let Some(geometry) = feature.geometry else {
            continue;
        };
        match geometry.kind.as_str() {
            "Polygon" => {
                let rings: Vec<Vec<Vec<f64>>> = coordinates(geometry.coordinates, i)?;
                out.push(polygon_from_rings(&rings, i)?);
            }
            "MultiPolygon" => {
                let polys: Vec<Vec<Vec<Vec<f64>>>> = coordinates(geometry.coordinates, i)?;
                for rings in &polys {
                    out.push(polygon_from_rings(rings, i)?);
                }
            }
            other => {
                return Err(GeoError::Unsupported(format!(
                    "feature {i} has geometry type {other}"
                )))
            }
        }
    }

    let check = options.reject_geographic && declared_projected != Some(true);
    if check && !out.is_empty() && looks_geographic(&out) {
        return Err(GeoError::GeographicCoordinates);
    }
    Ok(out)
}

fn coordinates<C: serde::de::DeserializeOwned>(v: serde_json::Value, feature: usize) -> Result<C, GeoError> {
    serde_json::from_value(v).map_err(|e| GeoError::InvalidPolygon(format!("feature {feature}: {e}")))
}

#[derive(Deserialize)]
struct CollectionDoc {
    #[serde(rename = "type")]
    kind: String,
    #[serde(default)]
    features: Vec<FeatureDoc>,
    crs: Option<serde_json::Value>,
}

#[derive(Deserialize)]
struct FeatureDoc {
    #[serde(rename = "type")]
    kind: String,
    geometry: Option<GeometryDoc>,
}

#[derive(Deserialize)]
struct GeometryDoc {
    #[serde(rename = "type")]
    kind: String,
    #[serde(default)]
    coordinates: serde_json::Value,
}

fn polygon_from_rings<T: Real>(
    rings: &[Vec<Vec<f64>>],
    feature: usize,
) -> Result<BuildingPolygon<T>, GeoError> {
    let mut rings = rings.iter().map(|ring| {
        ring.iter()
            .map(|pos| match pos.as_slice() {
                [x, y, ..] => Ok(Point2::new(T::lit(*x), T::lit(*y))),
                _ => Err(GeoError::InvalidPolygon(format!(
                    "feature {feature}: position with fewer than 2 coordinates"
                ))),
            })
            .collect::<Result<Vec<_>, _>>()
    });
    let exterior = rings
        .next()
        .ok_or_else(|| GeoError::InvalidPolygon(format!("feature {feature}: polygon without rings")))??;
    let holes = rings.collect::<Result<Vec<_>, _>>()?;
    BuildingPolygon::new(exterior, holes)
        .map_err(|e| GeoError::InvalidPolygon(format!("feature {feature}: {e}")))
}

fn looks_geographic<T: Real>(polys: &[BuildingPolygon<T>]) -> bool {
    let lon = T::lit(180.0);
    let lat = T::lit(90.0);
    polys
        .iter()
        .flat_map(|p| p.rings().flatten())
        .all(|p| p.x.abs() <= lon && p.y.abs() <= lat)
}

/// Interprets a legacy `crs` member. Geographic CRSs are WGS84 / CRS84 style names.
fn crs_is_projected(crs: &serde_json::Value) -> bool {
    let name = crs
        .pointer("/properties/name")
        .and_then(|v| v.as_str())
        .unwrap_or_default()
        .to_ascii_uppercase();
    let geographic = ["CRS84", "EPSG::4326", "EPSG:4326", "EPSG::4258", "EPSG:4258"];
    !name.is_empty() && !geographic.iter().any(|g| name.contains(g))
}

fn byte_offset(doc: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start = doc
        .split_inclusive(|&b| b == b'\n')
        .take(line - 1)
        .map(<[u8]>::len)
        .sum::<usize>();
    (line_start + column.saturating_sub(1)).min(doc.len())
}

/// Binary building grid with its world mapping.
#[derive(Clone, Debug, PartialEq)]
pub struct BuildingRaster<T> {
    cells: BitGrid,
    transform: GeoTransform<T>,
}

impl<T: Real> BuildingRaster<T> {
    pub fn new(cells: BitGrid, transform: GeoTransform<T>) -> Result<Self, GeoError> {
        if cells.width() == 0 || cells.height() == 0 {
            return Err(GeoError::EmptyRaster);
        }
        Ok(Self { cells, transform })
    }

    pub fn width(&self) -> usize {
        self.cells.width()
    }

    pub fn height(&self) -> usize {
        self.cells.height()
    }

    pub fn transform(&self) -> &GeoTransform<T> {
        &self.transform
    }

    pub fn cells(&self) -> &BitGrid {
        &self.cells
    }

    #[inline]
    pub fn is_building(&self, cell: Cell) -> bool {
        *self.cells.get(cell.col, cell.row)
    }

    pub fn building_fraction(&self) -> f64 {
        self.cells.count_true() as f64 / (self.width() * self.height()) as f64
    }

    pub fn world_to_grid(&self, p: Point2<T>) -> Result<Cell, GeoError> {
        self.transform.world_to_grid(p, self.width(), self.height())
    }

    pub fn grid_to_world(&self, cell: Cell) -> Point2<T> {
        self.transform.grid_to_world(cell)
    }
}

/// Rasterizes with the default cell limit.
pub fn rasterize<T: Real>(
    polys: &[BuildingPolygon<T>],
    transform: GeoTransform<T>,
    width: usize,
    height: usize,
) -> Result<BuildingRaster<T>, GeoError> {
    rasterize_with_limit(polys, transform, width, height, DEFAULT_MAX_CELLS)
}

/// Marks every cell whose centre lies inside some polygon (even-odd, holes subtract).
pub fn rasterize_with_limit<T: Real>(
    polys: &[BuildingPolygon<T>],
    transform: GeoTransform<T>,
    width: usize,
    height: usize,
    max_cells: usize,
) -> Result<BuildingRaster<T>, GeoError> {
    if width == 0 || height == 0 {
        return Err(GeoError::EmptyRaster);
    }
    if width.checked_mul(height).is_none_or(|n| n > max_cells) {
        return Err(GeoError::TooLarge {
            width,
            height,
            max: max_cells,
        });
    }

    let res = transform.resolution();
    // Candidate row span of each polygon; rows are re-checked exactly via crossings.
    let spans: Vec<(i64, i64)> = polys
        .iter()
        .map(|p| {
            let (lo, hi) = p.bounds();
            let r0 = ((lo.y - transform.origin_y()) / res).floor().to_i64().unwrap_or(i64::MIN);
            let r1 = ((hi.y - transform.origin_y()) / res).ceil().to_i64().unwrap_or(i64::MAX);
            (r0, r1)
        })
        .collect();

    let mut cells = BitGrid::filled(width, height, false);
    cells.rows_mut().enumerate().par_bridge().for_each(|(row, out)| {
        let y = transform.origin_y() + T::lit(row as f64) * res;
        let mut crossings: Vec<T> = Vec::new();
        for (poly, &(r0, r1)) in polys.iter().zip(&spans) {
            if (row as i64) < r0 || (row as i64) > r1 {
                continue;
            }
            crossings.clear();
            for ring in poly.rings() {
                let n = ring.len();
                for i in 0..n {
                    let a = ring[i];
                    let b = ring[(i + 1) % n];
                    if (a.y > y) != (b.y > y) {
                        crossings.push(edge_crossing_x(a, b, y));
                    }
                }
            }
            crossings.sort_by(|a, b| a.partial_cmp(b).expect("finite crossings"));
            for pair in crossings.chunks_exact(2) {
                fill_span(out, &transform, pair[0], pair[1]);
            }
        }
    });
    BuildingRaster::new(cells, transform)
}

/// Sets cells whose centre `x` satisfies `lo <= x < hi`.
fn fill_span<T: Real>(row: &mut [bool], transform: &GeoTransform<T>, lo: T, hi: T) {
    let res = transform.resolution();
    let ox = transform.origin_x();
    let width = row.len() as i64;
    let center = |c: i64| ox + T::lit(c as f64) * res;
    let mut c0 = ((lo - ox) / res).ceil().to_i64().unwrap_or(0).clamp(0, width);
    while c0 > 0 && center(c0 - 1) >= lo {
        c0 -= 1;
    }
    while c0 < width && center(c0) < lo {
        c0 += 1;
    }
    let mut c1 = ((hi - ox) / res).ceil().to_i64().unwrap_or(width).clamp(0, width);
    while c1 > c0 && center(c1 - 1) >= hi {
        c1 -= 1;
    }
    while c1 < width && center(c1) < hi {
        c1 += 1;
    }
    for cell in &mut row[c0 as usize..c1.max(c0) as usize] {
        *cell = true;
    }
}

/// Sidecar path holding the geotransform of a raster image.
pub fn sidecar_path(image: &Path) -> PathBuf {
    image.with_extension("geo")
}

/// Writes a P5 PGM (building = 0, other = 255) and its `.geo` sidecar.
pub fn write_pgm<T: Real>(raster: &BuildingRaster<T>, path: &Path) -> Result<(), GeoError> {
    let pixels: Vec<u8> = raster
        .cells()
        .as_slice()
        .iter()
        .map(|&b| if b { 0 } else { 255 })
        .collect();
    write_gray_pgm(path, raster.width(), raster.height(), &pixels)?;
    let t = raster.transform();
    let mut side = fs::File::create(sidecar_path(path))?;
    writeln!(side, "origin_x = {}", t.origin_x().to_f64_lossy())?;
    writeln!(side, "origin_y = {}", t.origin_y().to_f64_lossy())?;
    writeln!(side, "resolution = {}", t.resolution().to_f64_lossy())?;
    Ok(())
}

/// Writes 8-bit grey pixels as binary PGM.
pub fn write_gray_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<(), GeoError> {
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    use image::ImageEncoder;
    let file = std::io::BufWriter::new(fs::File::create(path)?);
    PnmEncoder::new(file)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(pixels, width as u32, height as u32, image::ExtendedColorType::L8)?;
    Ok(())
}

/// Reads an 8-bit grey image as a bit grid; dark pixels (< 128) are buildings.
pub fn read_bit_image(path: &Path) -> Result<BitGrid, GeoError> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(BitGrid::from_vec(
        w as usize,
        h as usize,
        img.into_raw().into_iter().map(|v| v < 128).collect(),
    ))
}

/// Reads a PGM raster and its sidecar geotransform.
pub fn read_pgm<T: Real>(path: &Path) -> Result<BuildingRaster<T>, GeoError> {
    let cells = read_bit_image(path)?;
    let transform = read_sidecar(&sidecar_path(path))?;
    BuildingRaster::new(cells, transform)
}

fn read_sidecar<T: Real>(path: &Path) -> Result<GeoTransform<T>, GeoError> {
    let text = fs::read_to_string(path)?;
    let err = |message: String| GeoError::Sidecar {
        path: path.to_path_buf(),
        message,
    };
    let (mut ox, mut oy, mut res) = (None, None, None);
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|e| err(format!("{}: {e}", key.trim())))?;
        match key.trim() {
            "origin_x" => ox = Some(value),
            "origin_y" => oy = Some(value),
            "resolution" => res = Some(value),
            other => return Err(err(format!("unknown key {other:?}"))),
        }
    }
    let get = |v: Option<f64>, k: &str| v.ok_or_else(|| err(format!("missing {k}")));
    GeoTransform::new(
        T::lit(get(ox, "origin_x")?),
        T::lit(get(oy, "origin_y")?),
        T::lit(get(res, "resolution")?),
    )
}
