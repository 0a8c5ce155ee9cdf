//! Candidate state machine for building-ratio matching.
//!
//! Each frame yields a feature vector `f` and a travelled distance `d`.
//! Without previous candidates every valid lattice cell is tested against
//! `f`; otherwise each surviving candidate proposes cells around the point
//! it predicts from its own heading and `d`, and the proposals are filtered
//! by feature error. Candidates carry a single parent link, so the heading
//! of a candidate is the direction from its parent to itself. A cell is a
//! candidate at most once per generation.
//!
//! The set has converged once every candidate lies within `d_max` of the
//! centroid of the candidate positions; the centroid is then the estimate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::{Point2, Real};
use crate::ratio_map::{LatticeCell, RatioMapSet};

#[derive(Debug, Error, PartialEq)]
pub enum MatcherError {
    #[error("feature has {got} components, the ratio map has {expected} layers")]
    FeatureLength { expected: usize, got: usize },
    #[error("invalid matcher configuration: {0}")]
    Config(String),
    #[error("odometry distance must be finite and non-negative, got {0}")]
    Odometry(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatcherConfig<T> {
    /// Feature error threshold on `sum_k |M_k - f_k|`.
    pub e1: T,
    /// Distance error constant, meters.
    pub epsilon: T,
    /// Convergence radius around the centroid, meters.
    pub d_max: T,
    /// Maximum retained candidates.
    pub k_cap: usize,
    /// Keep matching after the first convergence instead of freezing.
    pub continue_after_convergence: bool,
}

impl<T: Real> Default for MatcherConfig<T> {
    fn default() -> Self {
        Self {
            e1: T::lit(0.3),
            epsilon: T::lit(25.0),
            d_max: T::lit(75.0),
            k_cap: 50_000,
            continue_after_convergence: true,
        }
    }
}

impl<T: Real> MatcherConfig<T> {
    pub fn validate(&self) -> Result<(), MatcherError> {
        let pos = |v: T| v.is_finite() && v > T::zero();
        if !pos(self.e1) {
            return Err(MatcherError::Config("e1 must be positive".into()));
        }
        if !pos(self.epsilon) {
            return Err(MatcherError::Config("epsilon must be positive".into()));
        }
        if !pos(self.d_max) {
            return Err(MatcherError::Config("d_max must be positive".into()));
        }
        if self.k_cap == 0 {
            return Err(MatcherError::Config("k_cap must be at least 1".into()));
        }
        Ok(())
    }
}

/// Distance travelled since the previous frame, meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdometryDelta<T> {
    d: T,
}

impl<T: Real> OdometryDelta<T> {
    pub fn new(d: T) -> Result<Self, MatcherError> {
        if !(d.is_finite() && d >= T::zero()) {
            return Err(MatcherError::Odometry(d.to_f64_lossy()));
        }
        Ok(Self { d })
    }

    pub fn zero() -> Self {
        Self { d: T::zero() }
    }

    pub fn distance(&self) -> T {
        self.d
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate<T> {
    pub cell: LatticeCell,
    pub position: Point2<T>,
    /// Index into the previous generation.
    pub parent: Option<usize>,
    pub parent_position: Option<Point2<T>>,
    /// `sum_k |M_k - f_k|` at this cell for this generation's feature.
    pub residual: T,
}

/// Element of the motion-constrained set: a cell proposed by a parent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Proposal {
    pub cell: LatticeCell,
    pub parent: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Searching,
    Tracking,
    Converged,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Searching => "searching",
            Phase::Tracking => "tracking",
            Phase::Converged => "converged",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Convergence<T> {
    pub estimate: Point2<T>,
    /// Largest distance from the centroid to a candidate.
    pub spread: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet<T> {
    pub generation: usize,
    pub candidates: Vec<Candidate<T>>,
    pub phase: Phase,
    pub estimate: Option<Point2<T>>,
}

impl<T> Default for CandidateSet<T> {
    fn default() -> Self {
        Self {
            generation: 0,
            candidates: Vec::new(),
            phase: Phase::Searching,
            estimate: None,
        }
    }
}

/// Direction from `from` to `to` in `(-pi, pi]`; `None` when the points coincide.
pub fn heading<T: Real>(from: Point2<T>, to: Point2<T>) -> Option<T> {
    let dx = to.x - from.x;
    let dy = to.y - from.y;
    if dx == T::zero() && dy == T::zero() {
        return None;
    }
    let theta = dy.atan2(dx);
    Some(if theta == -T::PI() { T::PI() } else { theta })
}

/// Region of cells a previous candidate may have moved to.
#[derive(Clone, Copy, Debug)]
enum Region<T> {
    /// Open box `|x - cx| < eps, |y - cy| < eps`.
    Box { center: Point2<T>, half: T },
    /// Closed annulus `| |c - p| - d | <= eps`.
    Annulus { center: Point2<T>, radius: T, eps: T },
}

impl<T: Real> Region<T> {
    fn of(prev: &Candidate<T>, d: T, eps: T) -> Self {
        match prev.parent_position.and_then(|q| heading(q, prev.position)) {
            Some(theta) => Region::Box {
                center: Point2::new(
                    prev.position.x + d * theta.cos(),
                    prev.position.y + d * theta.sin(),
                ),
                half: eps,
            },
            None => Region::Annulus {
                center: prev.position,
                radius: d,
                eps,
            },
        }
    }

    #[inline]
    fn contains(&self, p: Point2<T>) -> bool {
        match *self {
            Region::Box { center, half } => (p.x - center.x).abs() < half && (p.y - center.y).abs() < half,
            Region::Annulus { center, radius, eps } => (p.distance(&center) - radius).abs() <= eps,
        }
    }

    /// How far `p` is from the predicted position.
    fn misfit(&self, p: Point2<T>) -> T {
        match *self {
            Region::Box { center, .. } => p.distance(&center),
            Region::Annulus { center, radius, .. } => (p.distance(&center) - radius).abs(),
        }
    }

    /// World-space bounding square (center, half side).
    fn bounds(&self) -> (Point2<T>, T) {
        match *self {
            Region::Box { center, half } => (center, half),
            Region::Annulus { center, radius, eps } => (center, radius + eps),
        }
    }

    /// Valid lattice cells inside the region, row-major.
    fn for_each_cell(&self, map: &RatioMapSet<T>, mut f: impl FnMut(LatticeCell, Point2<T>)) {
        let (center, half) = self.bounds();
        let lo = map.world_to_lattice(Point2::new(center.x - half, center.y - half));
        let hi = map.world_to_lattice(Point2::new(center.x + half, center.y + half));
        let clamp = |v: T, len: usize| -> i64 {
            v.to_i64().unwrap_or(if v > T::zero() { i64::MAX } else { i64::MIN }).clamp(0, len as i64 - 1)
        };
        // One cell of slack on each side; membership is decided by `contains`.
        let (lw, lh) = (map.lattice_width(), map.lattice_height());
        if hi.x < -T::one() || hi.y < -T::one() {
            return;
        }
        if lo.x > T::lit(lw as f64) || lo.y > T::lit(lh as f64) {
            return;
        }
        let c0 = clamp(lo.x.floor() - T::one(), lw);
        let c1 = clamp(hi.x.ceil() + T::one(), lw);
        let r0 = clamp(lo.y.floor() - T::one(), lh);
        let r1 = clamp(hi.y.ceil() + T::one(), lh);
        for row in r0..=r1 {
            for col in c0..=c1 {
                let cell = LatticeCell::new(col as u32, row as u32);
                if !map.is_valid(cell) {
                    continue;
                }
                let p = map.lattice_to_world(cell);
                if self.contains(p) {
                    f(cell, p);
                }
            }
        }
    }
}

fn check_feature<T: Real>(f: &[f32], map: &RatioMapSet<T>) -> Result<(), MatcherError> {
    if f.len() != map.n() {
        return Err(MatcherError::FeatureLength {
            expected: map.n(),
            got: f.len(),
        });
    }
    Ok(())
}

/// Keeps the `k_cap` smallest residuals (ties by row-major cell, then parent),
/// returned in row-major cell order.
fn cap_and_order<T: Real>(mut cands: Vec<Candidate<T>>, k_cap: usize) -> Vec<Candidate<T>> {
    let parent_key = |c: &Candidate<T>| c.parent.map_or(0, |p| p + 1);
    if cands.len() > k_cap {
        cands.par_sort_unstable_by(|a, b| {
            a.residual
                .partial_cmp(&b.residual)
                .expect("finite residuals")
                .then(a.cell.key().cmp(&b.cell.key()))
                .then(parent_key(a).cmp(&parent_key(b)))
        });
        cands.truncate(k_cap);
    }
    cands.par_sort_unstable_by(|a, b| {
        a.cell
            .key()
            .cmp(&b.cell.key())
            .then(parent_key(a).cmp(&parent_key(b)))
    });
    cands
}

/// Whole-map search: every valid cell with residual below `e1`, parentless.
pub fn global_match<T: Real>(
    f: &[f32],
    map: &RatioMapSet<T>,
    cfg: &MatcherConfig<T>,
) -> Result<Vec<Candidate<T>>, MatcherError> {
    check_feature(f, map)?;
    let lw = map.lattice_width() as u32;
    let found: Vec<Candidate<T>> = (0..map.lattice_height() as u32)
        .into_par_iter()
        .flat_map_iter(|row| {
            (0..lw).filter_map(move |col| {
                let cell = LatticeCell::new(col, row);
                let residual = map.residual(cell, f)?;
                (residual < cfg.e1).then(|| Candidate {
                    cell,
                    position: map.lattice_to_world(cell),
                    parent: None,
                    parent_position: None,
                    residual,
                })
            })
        })
        .collect();
    Ok(cap_and_order(found, cfg.k_cap))
}

/// Motion-constrained cells: every valid lattice cell consistent with the
/// travelled distance (and heading, when known) of some previous candidate.
///
/// A cell reached from several candidates keeps the parent whose prediction
/// it fits best (smallest misfit, then lowest parent index). Output is in
/// row-major cell order, one proposal per cell.
pub fn propagate<T: Real>(
    prev: &[Candidate<T>],
    delta: OdometryDelta<T>,
    map: &RatioMapSet<T>,
    cfg: &MatcherConfig<T>,
) -> Vec<Proposal> {
    let lw = map.lattice_width();
    let mut best: Vec<Option<(T, usize)>> = vec![None; lw * map.lattice_height()];
    let mut touched = Vec::new();
    for (parent, p) in prev.iter().enumerate() {
        let region = Region::of(p, delta.distance(), cfg.epsilon);
        region.for_each_cell(map, |cell, position| {
            let slot = &mut best[cell.row as usize * lw + cell.col as usize];
            let misfit = region.misfit(position);
            match slot {
                None => {
                    *slot = Some((misfit, parent));
                    touched.push(cell);
                }
                Some((m, _)) if misfit < *m => *slot = Some((misfit, parent)),
                _ => {}
            }
        });
    }
    touched.par_sort_unstable_by_key(|c| c.key());
    touched
        .into_iter()
        .map(|cell| Proposal {
            cell,
            parent: best[cell.row as usize * lw + cell.col as usize].expect("touched cell").1,
        })
        .collect()
}

/// Keeps proposals whose feature error is below `e1`, capped at `k_cap`.
pub fn filter<T: Real>(
    proposals: &[Proposal],
    prev: &[Candidate<T>],
    f: &[f32],
    map: &RatioMapSet<T>,
    cfg: &MatcherConfig<T>,
) -> Result<Vec<Candidate<T>>, MatcherError> {
    check_feature(f, map)?;
    let kept = proposals
        .par_iter()
        .filter_map(|prop| {
            let residual = map.residual(prop.cell, f)?;
            (residual < cfg.e1).then(|| Candidate {
                cell: prop.cell,
                position: map.lattice_to_world(prop.cell),
                parent: Some(prop.parent),
                parent_position: Some(prev[prop.parent].position),
                residual,
            })
        })
        .collect();
    Ok(cap_and_order(kept, cfg.k_cap))
}

/// Centroid of the distinct candidate positions, if all lie within `d_max` of it.
pub fn convergence_check<T: Real>(cands: &[Candidate<T>], cfg: &MatcherConfig<T>) -> Option<Convergence<T>> {
    let mut points: Vec<Point2<T>> = Vec::with_capacity(cands.len());
    let mut last = None;
    for c in cands {
        // Candidates arrive grouped by cell.
        if last != Some(c.cell) {
            points.push(c.position);
            last = Some(c.cell);
        }
    }
    if points.is_empty() {
        return None;
    }
    let n = T::lit(points.len() as f64);
    let sum = points.iter().fold(Point2::new(T::zero(), T::zero()), |acc, p| acc + *p);
    let centroid = Point2::new(sum.x / n, sum.y / n);
    let spread = points
        .iter()
        .map(|p| p.distance(&centroid))
        .fold(T::zero(), T::max);
    (spread < cfg.d_max).then_some(Convergence {
        estimate: centroid,
        spread,
    })
}

/// What happened during one [`Matcher::step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome<T> {
    pub generation: usize,
    pub phase: Phase,
    pub candidate_count: usize,
    /// The whole map was scanned this step.
    pub global_search: bool,
    /// Set when the criterion held this step.
    pub convergence: Option<Convergence<T>>,
    /// The set entered the converged phase this step.
    pub event: bool,
    /// Candidates are frozen after the first convergence.
    pub frozen: bool,
}

/// Sequential matcher over one ratio map.
#[derive(Clone, Debug)]
pub struct Matcher<'m, T> {
    map: &'m RatioMapSet<T>,
    cfg: MatcherConfig<T>,
    state: CandidateSet<T>,
    frozen: bool,
}

impl<'m, T: Real> Matcher<'m, T> {
    pub fn new(map: &'m RatioMapSet<T>, cfg: MatcherConfig<T>) -> Result<Self, MatcherError> {
        cfg.validate()?;
        Ok(Self {
            map,
            cfg,
            state: CandidateSet::default(),
            frozen: false,
        })
    }

    pub fn state(&self) -> &CandidateSet<T> {
        &self.state
    }

    pub fn config(&self) -> &MatcherConfig<T> {
        &self.cfg
    }

    pub fn map(&self) -> &'m RatioMapSet<T> {
        self.map
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Drops every candidate so the next step searches the whole map.
    pub fn reset(&mut self) {
        self.state.candidates.clear();
        self.state.phase = Phase::Searching;
        self.frozen = false;
    }

    pub fn step(&mut self, f: &[f32], delta: OdometryDelta<T>) -> Result<StepOutcome<T>, MatcherError> {
        check_feature(f, self.map)?;
        self.state.generation += 1;
        if self.frozen {
            return Ok(StepOutcome {
                generation: self.state.generation,
                phase: self.state.phase,
                candidate_count: self.state.candidates.len(),
                global_search: false,
                convergence: None,
                event: false,
                frozen: true,
            });
        }

        let was_converged = self.state.phase == Phase::Converged;
        let global_search = self.state.candidates.is_empty();
        let next = if global_search {
            global_match(f, self.map, &self.cfg)?
        } else {
            let proposals = propagate(&self.state.candidates, delta, self.map, &self.cfg);
            filter(&proposals, &self.state.candidates, f, self.map, &self.cfg)?
        };
        self.state.candidates = next;

        let mut convergence = None;
        self.state.phase = if self.state.candidates.is_empty() {
            Phase::Searching
        } else if let Some(c) = convergence_check(&self.state.candidates, &self.cfg) {
            self.state.estimate = Some(c.estimate);
            convergence = Some(c);
            Phase::Converged
        } else {
            Phase::Tracking
        };
        let event = convergence.is_some() && !was_converged;
        if event && !self.cfg.continue_after_convergence {
            self.frozen = true;
        }
        Ok(StepOutcome {
            generation: self.state.generation,
            phase: self.state.phase,
            candidate_count: self.state.candidates.len(),
            global_search,
            convergence,
            event,
            frozen: self.frozen,
        })
    }
}
