//! Rotation-invariant building-ratio features of a square binary frame.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::geo_raster::{read_bit_image, GeoError};
use crate::grid::{ratio, BitGrid, Disk};
use crate::num::{round_half_up, Real};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("frame is {width}x{height}; square cropping needs width >= height")]
    NarrowFrame { width: usize, height: usize },
    #[error("frame side {side} gives a sub-pixel radius for layer {n}")]
    FrameTooSmall { side: usize, n: usize },
    #[error("feature count must be at least 1")]
    NoFeatures,
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("feature export: {0}")]
    Io(#[from] std::io::Error),
}

/// Square binary frame, `true` = building.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMask {
    bits: BitGrid,
    pub index: usize,
    pub timestamp: f64,
}

impl FrameMask {
    pub fn new(bits: BitGrid, index: usize, timestamp: f64) -> Result<Self, FeatureError> {
        if bits.width() != bits.height() || bits.width() == 0 {
            return Err(FeatureError::NarrowFrame {
                width: bits.width(),
                height: bits.height(),
            });
        }
        Ok(Self {
            bits,
            index,
            timestamp,
        })
    }

    pub fn side(&self) -> usize {
        self.bits.width()
    }

    pub fn bits(&self) -> &BitGrid {
        &self.bits
    }

    pub fn into_bits(self) -> BitGrid {
        self.bits
    }

    /// Pixel shared by all disks: `(side / 2, side / 2)`.
    pub fn center(&self) -> usize {
        self.side() / 2
    }

    pub fn read_pgm(path: &Path, index: usize, timestamp: f64) -> Result<Self, FeatureError> {
        let mut frame = square_crop(&read_bit_image(path)?)?;
        frame.index = index;
        frame.timestamp = timestamp;
        Ok(frame)
    }
}

/// Keeps the centred `h`×`h` block; with an odd surplus the extra column is dropped on the right.
pub fn square_crop(mask: &BitGrid) -> Result<FrameMask, FeatureError> {
    let (w, h) = (mask.width(), mask.height());
    if w < h || h == 0 {
        return Err(FeatureError::NarrowFrame {
            width: w,
            height: h,
        });
    }
    let left = (w - h) / 2;
    FrameMask::new(mask.window(left, 0, h, h), 0, 0.0)
}

/// Radius of disk `k` (1-based) out of `n` on an `h`-pixel frame: `h/2 * (n+1-k)/n`.
pub fn pixel_radius<T: Real>(k: usize, n: usize, h: usize) -> T {
    assert!(k >= 1 && k <= n, "layer index {k} outside 1..={n}");
    T::lit(h as f64) / T::lit(2.0) * T::lit((n + 1 - k) as f64) / T::lit(n as f64)
}

/// Integer disk radii used for counting, rounded half up.
pub fn frame_radii(n: usize, h: usize) -> Vec<u32> {
    (1..=n)
        .map(|k| round_half_up(pixel_radius::<f64>(k, n, h)) as u32)
        .collect()
}

/// Building ratios `f_1..f_n`, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeatureVector(Vec<f32>);

impl FeatureVector {
    pub fn new(values: Vec<f32>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Extracts the `n` concentric-disk ratios of a frame.
pub fn extract(frame: &FrameMask, n: usize) -> Result<FeatureVector, FeatureError> {
    if n == 0 {
        return Err(FeatureError::NoFeatures);
    }
    if pixel_radius::<f64>(n, n, frame.side()) < 1.0 {
        return Err(FeatureError::FrameTooSmall {
            side: frame.side(),
            n,
        });
    }
    Ok(extract_with_radii(frame, &frame_radii(n, frame.side())))
}

/// Ratios for explicit integer radii around the frame centre.
///
/// Disk pixels falling outside the frame are excluded from both counts.
pub fn extract_with_radii(frame: &FrameMask, radii: &[u32]) -> FeatureVector {
    let side = frame.side() as i64;
    let c = frame.center() as i64;
    let bits = frame.bits();
    let values = radii
        .iter()
        .map(|&radius| {
            let disk = Disk::new(radius);
            let (mut building, mut total) = (0u64, 0u64);
            for (dy, half) in disk.chords() {
                let y = c + dy;
                if y < 0 || y >= side {
                    continue;
                }
                let x0 = (c - half as i64).max(0) as usize;
                let x1 = (c + half as i64).min(side - 1) as usize;
                let row = &bits.row(y as usize)[x0..=x1];
                total += row.len() as u64;
                building += row.iter().filter(|&&b| b).count() as u64;
            }
            ratio(building, total)
        })
        .collect();
    FeatureVector(values)
}

/// Writes `frame_index, f_1..f_n` rows with a header.
pub fn write_features_csv<'a>(
    out: &mut impl Write,
    rows: impl IntoIterator<Item = (usize, &'a FeatureVector)>,
) -> Result<(), FeatureError> {
    let mut rows = rows.into_iter().peekable();
    let n = rows.peek().map_or(0, |(_, f)| f.len());
    write!(out, "frame_index")?;
    for k in 1..=n {
        write!(out, ",f_{k}")?;
    }
    writeln!(out)?;
    for (i, f) in rows {
        write!(out, "{i}")?;
        for v in f.values() {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}
