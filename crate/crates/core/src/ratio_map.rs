//! Building ratio maps: for every lattice cell, the fraction of building
//! cells inside each of `n` concentric ground disks.
//!
//! Layer `k` uses the ground radius `(n + 1 - k) / n * z * tan(alpha / 2)`,
//! i.e. the ground footprint of the `k`-th frame disk seen from altitude `z`.
//! Disk sums use per-row prefix sums over the bitmap and the chord
//! decomposition of [`Disk`]; [`disk_sum_bruteforce`] enumerates offsets
//! directly and is kept as the reference.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::geo_raster::{BuildingRaster, GeoError, GeoTransform};
use crate::grid::{ratio, BitGrid, Disk, Grid};
use crate::num::{round_half_up, Point2, Real};

pub const MAGIC: &[u8; 4] = b"BRM1";

#[derive(Debug, Error)]
pub enum RatioMapError {
    #[error("invalid camera configuration: {0}")]
    InvalidCamera(String),
    #[error("layer {k}: radius of {radius_m} m is below one cell at {resolution} m/cell")]
    RadiusTooSmall {
        k: usize,
        radius_m: f64,
        resolution: f64,
    },
    #[error("invalid ratio map configuration: {0}")]
    Config(String),
    #[error("ratio map file: {0}")]
    Format(String),
    #[error("ratio map I/O: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

/// Downward camera geometry.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraConfig<T> {
    /// Full field of view, degrees.
    pub fov_alpha_deg: T,
    /// Flight height above ground, meters.
    pub altitude: T,
    pub frame_w: u32,
    pub frame_h: u32,
}

impl<T: Real> CameraConfig<T> {
    pub fn new(fov_alpha_deg: T, altitude: T, frame_w: u32, frame_h: u32) -> Result<Self, RatioMapError> {
        let cam = Self {
            fov_alpha_deg,
            altitude,
            frame_w,
            frame_h,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), RatioMapError> {
        let bad = |m: &str| Err(RatioMapError::InvalidCamera(m.to_string()));
        if !(self.fov_alpha_deg > T::zero() && self.fov_alpha_deg < T::lit(180.0)) {
            return bad("field of view must lie in (0, 180) degrees");
        }
        if !(self.altitude.is_finite() && self.altitude > T::zero()) {
            return bad("altitude must be positive");
        }
        if self.frame_h == 0 || self.frame_w < self.frame_h {
            return bad("frame must satisfy frame_w >= frame_h > 0");
        }
        Ok(())
    }

    /// Ground distance from the frame centre to the middle of a square-frame edge.
    pub fn ground_half_width(&self) -> T {
        self.altitude * (self.fov_alpha_deg.to_radians() / T::lit(2.0)).tan()
    }
}

impl<T: Real> Default for CameraConfig<T> {
    fn default() -> Self {
        Self {
            fov_alpha_deg: T::lit(43.0),
            altitude: T::lit(150.0),
            frame_w: 640,
            frame_h: 480,
        }
    }
}

/// Ground radius of layer `k` (1-based) out of `n`, in meters.
pub fn ground_radius<T: Real>(k: usize, n: usize, camera: &CameraConfig<T>) -> T {
    assert!(k >= 1 && k <= n, "layer index {k} outside 1..={n}");
    T::lit((n + 1 - k) as f64) / T::lit(n as f64) * camera.ground_half_width()
}

/// Disk radius in cells, rounded half up.
pub fn radius_cells<T: Real>(ground_radius: T, resolution: T) -> i64 {
    round_half_up(ground_radius / resolution).to_i64().unwrap_or(0)
}

/// Building / total counts over a disk, with out-of-grid cells excluded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiskCount {
    pub building: u64,
    pub total: u64,
    /// Part of the disk fell outside the grid.
    pub clipped: bool,
}

impl DiskCount {
    pub fn ratio(&self) -> f32 {
        ratio(self.building, self.total)
    }
}

/// Counts by enumerating every offset of the square around `center`.
pub fn disk_sum_bruteforce(grid: &BitGrid, center: (i64, i64), radius: u32) -> DiskCount {
    let r = radius as i64;
    let mut count = DiskCount {
        building: 0,
        total: 0,
        clipped: false,
    };
    for dy in -r..=r {
        for dx in -r..=r {
            if !Disk::contains(radius, dx, dy) {
                continue;
            }
            match grid.get_signed(center.0 + dx, center.1 + dy) {
                Some(&b) => {
                    count.total += 1;
                    count.building += b as u64;
                }
                None => count.clipped = true,
            }
        }
    }
    count
}

/// Per-row inclusive-exclusive prefix sums: `row[x]` = buildings in columns `0..x`.
pub struct RowPrefix {
    stride: usize,
    sums: Vec<u32>,
}

impl RowPrefix {
    pub fn new(grid: &BitGrid) -> Self {
        let stride = grid.width() + 1;
        let mut sums = vec![0u32; stride * grid.height()];
        sums.par_chunks_mut(stride).enumerate().for_each(|(row, out)| {
            let mut acc = 0u32;
            for (x, &b) in grid.row(row).iter().enumerate() {
                acc += b as u32;
                out[x + 1] = acc;
            }
        });
        Self { stride, sums }
    }

    /// Buildings in `row`, columns `c0..c1`.
    #[inline]
    pub fn span(&self, row: usize, c0: usize, c1: usize) -> u32 {
        let base = row * self.stride;
        self.sums[base + c1] - self.sums[base + c0]
    }
}

/// Lattice position on a ratio map: raster cell `(col * stride, row * stride)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct LatticeCell {
    pub col: u32,
    pub row: u32,
}

impl LatticeCell {
    pub const fn new(col: u32, row: u32) -> Self {
        Self { col, row }
    }

    /// Row-major sort key.
    #[inline]
    pub fn key(&self) -> (u32, u32) {
        (self.row, self.col)
    }
}

/// Lattice dimensions for a raster dimension and stride.
pub fn lattice_len(cells: usize, stride: usize) -> usize {
    cells.div_ceil(stride)
}

/// Ratio values of one disk radius on the stride lattice; NaN where the disk leaves the raster.
pub fn layer_values(grid: &BitGrid, prefix: &RowPrefix, radius: u32, stride: usize) -> Grid<f32> {
    let lw = lattice_len(grid.width(), stride);
    let lh = lattice_len(grid.height(), stride);
    let disk = Disk::new(radius);
    let r = radius as usize;
    let (w, h) = (grid.width(), grid.height());
    let mut values = vec![f32::NAN; lw * lh];
    values.par_chunks_mut(lw).enumerate().for_each(|(j, out)| {
        let cy = j * stride;
        if cy < r || cy + r >= h {
            return;
        }
        for (i, slot) in out.iter_mut().enumerate() {
            let cx = i * stride;
            if cx < r || cx + r >= w {
                continue;
            }
            let building: u64 = disk
                .chords()
                .map(|(dy, half)| {
                    let row = (cy as i64 + dy) as usize;
                    let half = half as usize;
                    prefix.span(row, cx - half, cx + half + 1) as u64
                })
                .sum();
            *slot = ratio(building, disk.area());
        }
    });
    Grid::from_vec(lw, lh, values)
}

/// One precomputed layer `M_k`.
#[derive(Clone, Debug)]
pub struct RatioLayer<T> {
    /// 1-based layer index.
    pub k: usize,
    pub ground_radius: T,
    pub radius_cells: u32,
    /// Lattice values, NaN = invalid.
    pub values: Grid<f32>,
}

impl<T: Real> PartialEq for RatioLayer<T> {
    fn eq(&self, other: &Self) -> bool {
        self.k == other.k
            && self.ground_radius == other.ground_radius
            && self.radius_cells == other.radius_cells
            && self.values.width() == other.values.width()
            && self.values.height() == other.values.height()
            && self
                .values
                .as_slice()
                .iter()
                .zip(other.values.as_slice())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// All `n` layers of a building ratio map over one raster.
#[derive(Clone, Debug)]
pub struct RatioMapSet<T> {
    stride: usize,
    transform: GeoTransform<T>,
    fov_alpha_deg: T,
    altitude: T,
    layers: Vec<RatioLayer<T>>,
    /// Cached: cells where every layer is valid.
    valid: Grid<bool>,
}

impl<T: Real> PartialEq for RatioMapSet<T> {
    fn eq(&self, other: &Self) -> bool {
        self.stride == other.stride
            && self.transform == other.transform
            && self.fov_alpha_deg == other.fov_alpha_deg
            && self.altitude == other.altitude
            && self.layers == other.layers
    }
}

impl<T: Real> RatioMapSet<T> {
    fn assemble(
        stride: usize,
        transform: GeoTransform<T>,
        fov_alpha_deg: T,
        altitude: T,
        layers: Vec<RatioLayer<T>>,
    ) -> Self {
        let first = &layers[0].values;
        let valid = Grid::from_fn(first.width(), first.height(), |c, r| {
            layers.iter().all(|l| !l.values.get(c, r).is_nan())
        });
        Self {
            stride,
            transform,
            fov_alpha_deg,
            altitude,
            layers,
            valid,
        }
    }

    /// Builds a set from explicit lattice values (NaN = invalid), one grid per layer.
    pub fn from_layer_values(
        transform: GeoTransform<T>,
        stride: usize,
        camera: &CameraConfig<T>,
        values: Vec<Grid<f32>>,
    ) -> Result<Self, RatioMapError> {
        camera.validate()?;
        let n = values.len();
        if n == 0 || stride == 0 {
            return Err(RatioMapError::Config("need at least one layer and a positive stride".into()));
        }
        let (w, h) = (values[0].width(), values[0].height());
        if w == 0 || h == 0 {
            return Err(RatioMapError::Config("empty lattice".into()));
        }
        let mut layers = Vec::with_capacity(n);
        for (i, grid) in values.into_iter().enumerate() {
            if grid.width() != w || grid.height() != h {
                return Err(RatioMapError::Config(format!("layer {} has a different extent", i + 1)));
            }
            if grid.as_slice().iter().any(|v| !v.is_nan() && !(0.0..=1.0).contains(v)) {
                return Err(RatioMapError::Config(format!("layer {} has a ratio outside [0, 1]", i + 1)));
            }
            let gr = ground_radius(i + 1, n, camera);
            layers.push(RatioLayer {
                k: i + 1,
                ground_radius: gr,
                radius_cells: radius_cells(gr, transform.resolution()).max(0) as u32,
                values: grid,
            });
        }
        Ok(Self::assemble(stride, transform, camera.fov_alpha_deg, camera.altitude, layers))
    }

    pub fn n(&self) -> usize {
        self.layers.len()
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn transform(&self) -> &GeoTransform<T> {
        &self.transform
    }

    pub fn layers(&self) -> &[RatioLayer<T>] {
        &self.layers
    }

    pub fn fov_alpha_deg(&self) -> T {
        self.fov_alpha_deg
    }

    pub fn altitude(&self) -> T {
        self.altitude
    }

    pub fn lattice_width(&self) -> usize {
        self.valid.width()
    }

    pub fn lattice_height(&self) -> usize {
        self.valid.height()
    }

    /// Distance between neighbouring lattice cells, meters.
    pub fn lattice_spacing(&self) -> T {
        self.transform.resolution() * T::lit(self.stride as f64)
    }

    #[inline]
    pub fn is_valid(&self, cell: LatticeCell) -> bool {
        *self.valid.get(cell.col as usize, cell.row as usize)
    }

    pub fn valid_mask(&self) -> &Grid<bool> {
        &self.valid
    }

    /// Value of layer `k` (1-based), `None` where invalid.
    pub fn value(&self, k: usize, cell: LatticeCell) -> Option<f32> {
        let v = *self.layers[k - 1].values.get(cell.col as usize, cell.row as usize);
        (!v.is_nan()).then_some(v)
    }

    pub fn lattice_to_world(&self, cell: LatticeCell) -> Point2<T> {
        let s = T::lit(self.stride as f64);
        self.transform
            .cell_center(T::lit(cell.col as f64) * s, T::lit(cell.row as f64) * s)
    }

    /// Fractional lattice coordinates of a world point.
    pub fn world_to_lattice(&self, p: Point2<T>) -> Point2<T> {
        let spacing = self.lattice_spacing();
        Point2::new(
            (p.x - self.transform.origin_x()) / spacing,
            (p.y - self.transform.origin_y()) / spacing,
        )
    }

    /// Nearest lattice cell to a world point, if inside the lattice.
    pub fn nearest_cell(&self, p: Point2<T>) -> Option<LatticeCell> {
        let q = self.world_to_lattice(p);
        let c = round_half_up(q.x).to_i64()?;
        let r = round_half_up(q.y).to_i64()?;
        (c >= 0 && r >= 0 && c < self.lattice_width() as i64 && r < self.lattice_height() as i64)
            .then(|| LatticeCell::new(c as u32, r as u32))
    }

    /// Sum of absolute differences between the map and a feature, `None` where invalid.
    #[inline]
    pub fn residual(&self, cell: LatticeCell, feature: &[f32]) -> Option<T> {
        if !self.is_valid(cell) {
            return None;
        }
        let mut sum = T::zero();
        for (layer, &f) in self.layers.iter().zip(feature) {
            let m = *layer.values.get(cell.col as usize, cell.row as usize);
            sum = sum + (T::from_ratio(m) - T::from_ratio(f)).abs();
        }
        Some(sum)
    }

    pub fn save(&self, path: &Path) -> Result<(), RatioMapError> {
        let mut w = io::BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RatioMapError> {
        let bytes = fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// Little-endian binary encoding, see [`MAGIC`].
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), RatioMapError> {
        let to_u32 = |v: usize, what: &str| {
            u32::try_from(v).map_err(|_| RatioMapError::Format(format!("{what} exceeds u32")))
        };
        w.write_all(MAGIC)?;
        for v in [
            to_u32(self.n(), "layer count")?,
            to_u32(self.lattice_width(), "width")?,
            to_u32(self.lattice_height(), "height")?,
            to_u32(self.stride, "stride")?,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in [
            self.transform.resolution(),
            self.transform.origin_x(),
            self.transform.origin_y(),
            self.altitude,
            self.fov_alpha_deg,
        ] {
            w.write_all(&v.to_f64_lossy().to_le_bytes())?;
        }
        for layer in &self.layers {
            w.write_all(&layer.ground_radius.to_f64_lossy().to_le_bytes())?;
            let mut buf = Vec::with_capacity(layer.values.as_slice().len() * 4);
            for v in layer.values.as_slice() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, RatioMapError> {
        let truncated = |e: io::Error| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                RatioMapError::Format("truncated file".into())
            } else {
                RatioMapError::Io(e)
            }
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(RatioMapError::Format(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let mut u = [0u32; 4];
        for slot in &mut u {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(truncated)?;
            *slot = u32::from_le_bytes(b);
        }
        let [n, width, height, stride] = u.map(|v| v as usize);
        if n == 0 || width == 0 || height == 0 || stride == 0 {
            return Err(RatioMapError::Format("zero-sized header field".into()));
        }
        let read_f64 = |r: &mut dyn Read| -> Result<f64, RatioMapError> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(truncated)?;
            Ok(f64::from_le_bytes(b))
        };
        let resolution = read_f64(r)?;
        let origin_x = read_f64(r)?;
        let origin_y = read_f64(r)?;
        let altitude = read_f64(r)?;
        let alpha = read_f64(r)?;
        let transform = GeoTransform::new(T::lit(origin_x), T::lit(origin_y), T::lit(resolution))?;

        let cells = width
            .checked_mul(height)
            .ok_or_else(|| RatioMapError::Format("lattice too large".into()))?;
        let mut layers = Vec::with_capacity(n);
        for k in 1..=n {
            let gr = T::lit(read_f64(r)?);
            let mut raw = vec![0u8; cells * 4];
            r.read_exact(&mut raw).map_err(truncated)?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if values.iter().any(|v| !v.is_nan() && !(0.0..=1.0).contains(v)) {
                return Err(RatioMapError::Format(format!("layer {k} has a ratio outside [0, 1]")));
            }
            let rc = radius_cells(gr, transform.resolution());
            layers.push(RatioLayer {
                k,
                ground_radius: gr,
                radius_cells: rc.max(0) as u32,
                values: Grid::from_vec(width, height, values),
            });
        }
        if layers.windows(2).any(|w| !(w[1].ground_radius < w[0].ground_radius)) {
            return Err(RatioMapError::Format("ground radii must strictly decrease".into()));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(RatioMapError::Format("trailing bytes after last layer".into()));
        }
        Ok(Self::assemble(stride, transform, T::lit(alpha), T::lit(altitude), layers))
    }
}

/// Precomputes `n` layers for the camera geometry on a `stride` lattice.
pub fn generate<T: Real>(
    raster: &BuildingRaster<T>,
    camera: &CameraConfig<T>,
    n: usize,
    stride: usize,
) -> Result<RatioMapSet<T>, RatioMapError> {
    camera.validate()?;
    if n == 0 {
        return Err(RatioMapError::Config("feature count n must be at least 1".into()));
    }
    if stride == 0 {
        return Err(RatioMapError::Config("stride must be at least 1".into()));
    }
    let res = raster.transform().resolution();
    let mut radii = Vec::with_capacity(n);
    for k in 1..=n {
        let gr = ground_radius(k, n, camera);
        let rc = radius_cells(gr, res);
        if rc < 1 {
            return Err(RatioMapError::RadiusTooSmall {
                k,
                radius_m: gr.to_f64_lossy(),
                resolution: res.to_f64_lossy(),
            });
        }
        radii.push((gr, u32::try_from(rc).map_err(|_| RatioMapError::Config(format!("layer {k}: radius too large")))?));
    }

    let prefix = RowPrefix::new(raster.cells());
    let layers = radii
        .into_iter()
        .enumerate()
        .map(|(i, (gr, rc))| RatioLayer {
            k: i + 1,
            ground_radius: gr,
            radius_cells: rc,
            values: layer_values(raster.cells(), &prefix, rc, stride),
        })
        .collect();
    Ok(RatioMapSet::assemble(
        stride,
        *raster.transform(),
        camera.fov_alpha_deg,
        camera.altitude,
        layers,
    ))
}
