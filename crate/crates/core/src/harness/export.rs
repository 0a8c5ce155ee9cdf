//! Report files (trajectory and candidate CSVs, report JSON, candidate heat
//! maps) and simulated flight directories.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::feature::{extract, FrameMask};
use crate::geo_raster::write_gray_pgm;
use crate::harness::{ExperimentReport, Flight, HarnessError, RunOutput};
use crate::matcher::{Candidate, OdometryDelta};
use crate::sim::TruePose;
use crate::ratio_map::{LatticeCell, RatioMapSet};

pub fn trajectory_csv(report: &ExperimentReport) -> String {
    let mut s = String::from("t,truth_x,truth_y,est_x,est_y,phase\n");
    for f in &report.frames {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            f.t,
            f.truth.x,
            f.truth.y,
            f.estimate.x,
            f.estimate.y,
            f.phase.as_str()
        );
    }
    s
}

pub fn candidates_csv(cands: &[Candidate<f64>]) -> String {
    let mut s = String::from("col,row,x,y,parent,residual\n");
    for c in cands {
        let parent = c.parent.map(|p| p.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            c.cell.col, c.cell.row, c.position.x, c.position.y, parent, c.residual
        );
    }
    s
}

/// `(cell, residual)` pairs from a candidate CSV.
pub fn parse_candidates_csv(text: &str) -> Result<Vec<(LatticeCell, f64)>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "col,row,x,y,parent,residual" => {}
        _ => return Err("missing candidate CSV header".into()),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(format!("line {}: expected 6 fields", i + 2));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| format!("line {}: {e}", i + 2));
            let int = |s: &str| s.trim().parse::<u32>().map_err(|e| format!("line {}: {e}", i + 2));
            Ok((LatticeCell::new(int(f[0])?, int(f[1])?), num(f[5])?))
        })
        .collect()
}

/// Lattice-sized RGB image, north up: ratio map layer 1 in gray, invalid
/// cells black, candidates from red (lowest residual) to yellow.
pub fn heatmap(map: &RatioMapSet<f64>, cands: &[(LatticeCell, f64)]) -> RgbImage {
    let (w, h) = (map.lattice_width() as u32, map.lattice_height() as u32);
    let mut img = RgbImage::from_fn(w, h, |x, y| {
        let cell = LatticeCell::new(x, h - 1 - y);
        match map.value(1, cell) {
            Some(v) if map.is_valid(cell) => {
                let g = (40.0 + 120.0 * v) as u8;
                Rgb([g, g, g])
            }
            _ => Rgb([0, 0, 0]),
        }
    });
    let (lo, hi) = cands
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, r)| (lo.min(r), hi.max(r)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    for &(cell, r) in cands {
        if cell.col < w && cell.row < h {
            let g = (230.0 * (r - lo) / span) as u8;
            img.put_pixel(cell.col, h - 1 - cell.row, Rgb([255, g, 0]));
        }
    }
    img
}

fn write(path: PathBuf, contents: &[u8]) -> Result<(), HarnessError> {
    fs::write(&path, contents).map_err(HarnessError::io(&path))
}

pub fn write_heatmap(path: &Path, map: &RatioMapSet<f64>, cands: &[(LatticeCell, f64)]) -> Result<(), HarnessError> {
    heatmap(map, cands).save(path).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })
}

/// Writes every report artifact into `dir`, replacing earlier files.
pub fn export(out: &RunOutput, map: &RatioMapSet<f64>, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    write(dir.join("trajectory.csv"), trajectory_csv(&out.report).as_bytes())?;
    write(dir.join("report.json"), out.report.to_json().as_bytes())?;
    for (i, cands) in out.candidates.iter().enumerate() {
        write(dir.join(format!("candidates_{i}.csv")), candidates_csv(cands).as_bytes())?;
        let cells: Vec<_> = cands.iter().map(|c| (c.cell, c.residual)).collect();
        write_heatmap(&dir.join(format!("heatmap_{i}.png")), map, &cells)?;
    }
    Ok(())
}

pub fn read_report(path: &Path) -> Result<ExperimentReport, HarnessError> {
    let text = fs::read_to_string(path).map_err(HarnessError::io(path))?;
    ExperimentReport::from_json(&text).map_err(|e| HarnessError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes `poses.csv`, `odometry.csv` and `frames/frame_<i>.pgm` (building = 0).
pub fn write_flight(flight: &Flight, frames: &[FrameMask], dir: &Path) -> Result<(), HarnessError> {
    let frame_dir = dir.join("frames");
    fs::create_dir_all(&frame_dir).map_err(HarnessError::io(&frame_dir))?;
    let mut poses = String::from("t,x,y,z,yaw\n");
    for p in &flight.poses {
        let _ = writeln!(poses, "{},{},{},{},{}", p.t, p.x, p.y, p.z, p.yaw);
    }
    write(dir.join("poses.csv"), poses.as_bytes())?;
    let mut odo = String::from("d,heading\n");
    for (d, h) in flight.deltas.iter().zip(&flight.headings) {
        let _ = writeln!(odo, "{},{}", d.distance(), h);
    }
    write(dir.join("odometry.csv"), odo.as_bytes())?;
    for f in frames {
        let pixels: Vec<u8> = f.bits().as_slice().iter().map(|&b| if b { 0 } else { 255 }).collect();
        let path = frame_dir.join(format!("frame_{}.pgm", f.index));
        write_gray_pgm(&path, f.side(), f.side(), &pixels).map_err(|e| HarnessError::at_frame(f.index)(e.into()))?;
    }
    Ok(())
}

fn read_rows(path: &Path, header: &str) -> Result<Vec<Vec<f64>>, HarnessError> {
    let text = fs::read_to_string(path).map_err(HarnessError::io(path))?;
    let parse_err = |message: String| HarnessError::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(header) {
        return Err(parse_err(format!("expected header `{header}`")));
    }
    let width = header.split(',').count();
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let row = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| parse_err(format!("line {}: {e}", i + 2)))?;
            if row.len() != width {
                return Err(parse_err(format!("line {}: expected {width} fields", i + 2)));
            }
            Ok(row)
        })
        .collect()
}

/// Reads a flight written by [`write_flight`] and extracts `n` features per frame.
pub fn read_flight(dir: &Path, n: usize) -> Result<Flight, HarnessError> {
    let poses: Vec<TruePose<f64>> = read_rows(&dir.join("poses.csv"), "t,x,y,z,yaw")?
        .into_iter()
        .map(|r| TruePose {
            t: r[0],
            x: r[1],
            y: r[2],
            z: r[3],
            yaw: r[4],
        })
        .collect();
    let odo = read_rows(&dir.join("odometry.csv"), "d,heading")?;
    if poses.is_empty() || odo.len() + 1 != poses.len() {
        return Err(HarnessError::Config(format!(
            "{}: {} poses need {} odometry rows, found {}",
            dir.display(),
            poses.len(),
            poses.len().saturating_sub(1),
            odo.len()
        )));
    }
    let deltas = odo
        .iter()
        .enumerate()
        .map(|(i, r)| OdometryDelta::new(r[0]).map_err(|e| HarnessError::at_frame(i + 1)(e.into())))
        .collect::<Result<Vec<_>, _>>()?;
    let headings = odo.iter().map(|r| r[1]).collect();
    let features = poses
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let at = HarnessError::at_frame(i);
            FrameMask::read_pgm(&dir.join("frames").join(format!("frame_{i}.pgm")), i, p.t)
                .and_then(|f| extract(&f, n))
                .map_err(|e| at(e.into()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Flight {
        poses,
        features,
        deltas,
        headings,
    })
}
