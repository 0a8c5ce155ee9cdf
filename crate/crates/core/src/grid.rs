//! Dense row-major 2D grids and the discrete disk shared by map and frame features.

use serde::{Deserialize, Serialize};

/// Row-major grid with `width` columns and `height` rows.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// Binary grid, `true` = building.
pub type BitGrid = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    /// Wraps row-major data. Panics if the length does not match.
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "grid data length mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                data.push(f(col, row));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> &T {
        &self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    /// Signed lookup, `None` outside the grid.
    #[inline]
    pub fn get_signed(&self, col: i64, row: i64) -> Option<&T> {
        if col < 0 || row < 0 || col >= self.width as i64 || row >= self.height as i64 {
            None
        } else {
            Some(self.get(col as usize, row as usize))
        }
    }

    pub fn row(&self, row: usize) -> &[T] {
        &self.data[row * self.width..(row + 1) * self.width]
    }

    pub fn rows_mut(&mut self) -> std::slice::ChunksExactMut<'_, T> {
        self.data.chunks_exact_mut(self.width.max(1))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl BitGrid {
    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Copies the `w`×`h` window whose top-left cell is (`col0`, `row0`).
    pub fn window(&self, col0: usize, row0: usize, w: usize, h: usize) -> BitGrid {
        assert!(col0 + w <= self.width && row0 + h <= self.height);
        Grid::from_fn(w, h, |c, r| *self.get(col0 + c, row0 + r))
    }
}

/// Integer square root: largest `s` with `s*s <= v`.
#[inline]
pub fn isqrt(v: u64) -> u64 {
    let mut s = (v as f64).sqrt() as u64;
    while s * s > v {
        s -= 1;
    }
    while (s + 1) * (s + 1) <= v {
        s += 1;
    }
    s
}

/// Discrete disk: integer offsets `(dx, dy)` with `dx² + dy² ≤ radius²`.
///
/// Both the precomputed map layers and the frame features use this exact
/// membership predicate so their ratios are directly comparable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Disk {
    radius: u32,
    /// `half_widths[dy + radius]` = largest `dx` inside the disk on row `dy`.
    half_widths: Vec<u32>,
    area: u64,
}

impl Disk {
    pub fn new(radius: u32) -> Self {
        let r = radius as i64;
        let half_widths: Vec<u32> = (-r..=r)
            .map(|dy| isqrt((r * r - dy * dy) as u64) as u32)
            .collect();
        let area = half_widths.iter().map(|&h| 2 * h as u64 + 1).sum();
        Self {
            radius,
            half_widths,
            area,
        }
    }

    #[inline]
    pub fn radius(&self) -> u32 {
        self.radius
    }

    /// Number of cells in the unclipped disk.
    #[inline]
    pub fn area(&self) -> u64 {
        self.area
    }

    #[inline]
    pub fn contains(radius: u32, dx: i64, dy: i64) -> bool {
        let r = radius as i64;
        dx * dx + dy * dy <= r * r
    }

    /// Horizontal chords as `(dy, half_width)` from top to bottom.
    pub fn chords(&self) -> impl Iterator<Item = (i64, u32)> + '_ {
        let r = self.radius as i64;
        self.half_widths
            .iter()
            .enumerate()
            .map(move |(i, &h)| (i as i64 - r, h))
    }
}

/// Building fraction of a disk count. Shared by every ratio producer.
#[inline]
pub fn ratio(building: u64, total: u64) -> f32 {
    if total == 0 {
        return f32::NAN;
    }
    (building as f64 / total as f64) as f32
}
