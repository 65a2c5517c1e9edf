//! Intersection layout: conflict blocks, lane paths and the arc-length
//! intervals each path spends inside each block.

use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Half-width of the default intersection box (meters).
pub const DEFAULT_BLOCK_HALF: f64 = 0.45;
/// Default lane width (meters).
pub const DEFAULT_LANE_WIDTH: f64 = 0.45;
/// Default straight approach / exit length outside the box (meters).
pub const DEFAULT_APPROACH_LENGTH: f64 = 1.8;
/// Default distance between the stop line and the block boundary.
pub const DEFAULT_STOP_LINE_OFFSET: f64 = 0.1;

const SPAN_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("unknown path `{0}`")]
    UnknownPath(String),
    #[error("unknown block `{0}`")]
    UnknownBlock(String),
    #[error("path `{path}` does not cross block `{block}`")]
    NotCrossing { path: String, block: String },
    #[error("intersection model has no conflict blocks")]
    NoBlocks,
    #[error("block `{0}` has non-positive area")]
    DegenerateBlock(String),
    #[error("blocks `{0}` and `{1}` overlap")]
    OverlappingBlocks(String, String),
    #[error("path `{0}` does not cross any block")]
    PathCrossesNothing(String),
    #[error("path `{0}` needs at least two distinct points with strictly increasing arc length")]
    DegeneratePath(String),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("unsupported grid size {0}")]
    BadGrid(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(theta: f64) -> Self {
        Self::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn normalized(self) -> Vec2 {
        let n = self.norm();
        if n > 0.0 {
            self * (1.0 / n)
        } else {
            self
        }
    }

    /// Counter-clockwise rotation.
    pub fn rotate(self, theta: f64) -> Vec2 {
        let (s, c) = theta.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn distance(self, o: Vec2) -> f64 {
        (self - o).norm()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

impl fmt::Display for Vec2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.3}, {:.3})", self.x, self.y)
    }
}

/// Axis-aligned rectangle, closed on all sides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: Vec2,
    pub max: Vec2,
}

impl Rect {
    pub fn new(min: Vec2, max: Vec2) -> Self {
        Self { min, max }
    }

    pub fn centered(center: Vec2, width: f64, height: f64) -> Self {
        let h = Vec2::new(width / 2.0, height / 2.0);
        Self::new(center - h, center + h)
    }

    pub fn area(&self) -> f64 {
        (self.max.x - self.min.x).max(0.0) * (self.max.y - self.min.y).max(0.0)
    }

    pub fn center(&self) -> Vec2 {
        (self.min + self.max) * 0.5
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    /// True when the interiors intersect with positive area.
    pub fn overlaps(&self, o: &Rect) -> bool {
        self.min.x < o.max.x && o.min.x < self.max.x && self.min.y < o.max.y && o.min.y < self.max.y
    }

    /// Liang-Barsky clip of the segment `a + t (b - a)`, `t in [0, 1]`.
    /// Returns the parameter range inside the rectangle, if any.
    pub fn clip_segment(&self, a: Vec2, b: Vec2) -> Option<(f64, f64)> {
        let d = b - a;
        let mut t0 = 0.0_f64;
        let mut t1 = 1.0_f64;
        let checks = [
            (-d.x, a.x - self.min.x),
            (d.x, self.max.x - a.x),
            (-d.y, a.y - self.min.y),
            (d.y, self.max.y - a.y),
        ];
        for (p, q) in checks {
            if p == 0.0 {
                if q < 0.0 {
                    return None;
                }
            } else {
                let r = q / p;
                if p < 0.0 {
                    t0 = t0.max(r);
                } else {
                    t1 = t1.min(r);
                }
                if t0 > t1 {
                    return None;
                }
            }
        }
        Some((t0, t1))
    }

    /// Distance along a ray to the rectangle boundary, if hit.
    pub fn ray_hit(&self, origin: Vec2, dir: Vec2, max_range: f64) -> Option<f64> {
        let end = origin + dir * max_range;
        self.clip_segment(origin, end).map(|(t0, _)| t0 * max_range)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictBlock {
    pub id: String,
    pub region: Rect,
}

/// Half-open arc-length interval `[enter_s, exit_s)` of a path inside one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpan {
    pub block_id: String,
    pub enter_s: f64,
    pub exit_s: f64,
}

impl BlockSpan {
    pub fn length(&self) -> f64 {
        self.exit_s - self.enter_s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    id: String,
    points: Vec<Vec2>,
    cumulative: Vec<f64>,
    spans: Vec<BlockSpan>,
}

impl Path {
    fn new(id: String, points: Vec<Vec2>) -> Result<Self, GeometryError> {
        if points.len() < 2 {
            return Err(GeometryError::DegeneratePath(id));
        }
        let mut cumulative = Vec::with_capacity(points.len());
        cumulative.push(0.0);
        for w in points.windows(2) {
            let seg = w[0].distance(w[1]);
            if !(seg > 0.0) || !seg.is_finite() {
                return Err(GeometryError::DegeneratePath(id));
            }
            cumulative.push(cumulative.last().unwrap() + seg);
        }
        Ok(Self { id, points, cumulative, spans: Vec::new() })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Block spans ordered by arc length.
    pub fn spans(&self) -> &[BlockSpan] {
        &self.spans
    }

    pub fn span(&self, block_id: &str) -> Option<&BlockSpan> {
        self.spans.iter().find(|s| s.block_id == block_id)
    }

    pub fn crosses(&self, block_id: &str) -> bool {
        self.span(block_id).is_some()
    }

    /// First block entry along the path.
    pub fn first_enter(&self) -> f64 {
        self.spans.first().map(|s| s.enter_s).unwrap_or(0.0)
    }

    /// Last block exit along the path.
    pub fn last_exit(&self) -> f64 {
        self.spans.last().map(|s| s.exit_s).unwrap_or(0.0)
    }

    fn segment_at(&self, s: f64) -> usize {
        match self.cumulative.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.points.len() - 2),
        }
    }

    /// Point at arc length `s`; extrapolated linearly past either end.
    pub fn point_at(&self, s: f64) -> Vec2 {
        let i = self.segment_at(s);
        let a = self.points[i];
        let b = self.points[i + 1];
        let len = self.cumulative[i + 1] - self.cumulative[i];
        a + (b - a) * ((s - self.cumulative[i]) / len)
    }

    /// Tangent heading (radians) at arc length `s`.
    pub fn heading_at(&self, s: f64) -> f64 {
        let i = self.segment_at(s);
        (self.points[i + 1] - self.points[i]).angle()
    }

    /// Closest point projection: `(arc length, lateral distance)`.
    pub fn project(&self, p: Vec2) -> (f64, f64) {
        let mut best = (0.0, f64::INFINITY);
        for i in 0..self.points.len() - 1 {
            let a = self.points[i];
            let d = self.points[i + 1] - a;
            let len2 = d.dot(d);
            let t = ((p - a).dot(d) / len2).clamp(0.0, 1.0);
            let q = a + d * t;
            let dist = q.distance(p);
            if dist < best.1 {
                best = (self.cumulative[i] + t * len2.sqrt(), dist);
            }
        }
        best
    }

    fn compute_span(&self, block: &ConflictBlock) -> Option<BlockSpan> {
        let mut enter = f64::INFINITY;
        let mut exit = f64::NEG_INFINITY;
        for i in 0..self.points.len() - 1 {
            let (a, b) = (self.points[i], self.points[i + 1]);
            let len = self.cumulative[i + 1] - self.cumulative[i];
            if let Some((t0, t1)) = block.region.clip_segment(a, b) {
                if (t1 - t0) * len > SPAN_EPS {
                    enter = enter.min(self.cumulative[i] + t0 * len);
                    exit = exit.max(self.cumulative[i] + t1 * len);
                }
            }
        }
        (exit - enter > SPAN_EPS).then(|| BlockSpan { block_id: block.id.clone(), enter_s: enter, exit_s: exit })
    }
}

/// Immutable intersection description shared by every agent.
#[derive(Debug, Clone)]
pub struct IntersectionModel {
    blocks: Vec<ConflictBlock>,
    paths: Vec<Path>,
    index: HashMap<String, usize>,
    stop_line_offset: f64,
}

impl IntersectionModel {
    pub fn build(config: &GeometryConfig) -> Result<Self, GeometryError> {
        let (blocks, path_cfgs) = config.resolve()?;
        if blocks.is_empty() {
            return Err(GeometryError::NoBlocks);
        }
        for (i, b) in blocks.iter().enumerate() {
            if !(b.region.area() > 0.0) {
                return Err(GeometryError::DegenerateBlock(b.id.clone()));
            }
            for o in &blocks[..i] {
                if o.id == b.id {
                    return Err(GeometryError::DuplicateId(b.id.clone()));
                }
                if o.region.overlaps(&b.region) {
                    return Err(GeometryError::OverlappingBlocks(o.id.clone(), b.id.clone()));
                }
            }
        }
        let mut paths = Vec::with_capacity(path_cfgs.len());
        let mut index = HashMap::new();
        for pc in path_cfgs {
            if index.contains_key(&pc.id) {
                return Err(GeometryError::DuplicateId(pc.id));
            }
            let mut path = Path::new(pc.id.clone(), pc.points)?;
            let mut spans: Vec<BlockSpan> = blocks.iter().filter_map(|b| path.compute_span(b)).collect();
            if spans.is_empty() {
                return Err(GeometryError::PathCrossesNothing(pc.id));
            }
            spans.sort_by(|a, b| a.enter_s.total_cmp(&b.enter_s));
            path.spans = spans;
            index.insert(pc.id, paths.len());
            paths.push(path);
        }
        Ok(Self { blocks, paths, index, stop_line_offset: config.stop_line_offset })
    }

    pub fn four_way() -> Self {
        Self::build(&GeometryConfig::default()).expect("default geometry is valid")
    }

    pub fn blocks(&self) -> &[ConflictBlock] {
        &self.blocks
    }

    pub fn block(&self, id: &str) -> Result<&ConflictBlock, GeometryError> {
        self.blocks.iter().find(|b| b.id == id).ok_or_else(|| GeometryError::UnknownBlock(id.to_string()))
    }

    pub fn paths(&self) -> &[Path] {
        &self.paths
    }

    pub fn path(&self, id: &str) -> Result<&Path, GeometryError> {
        self.index.get(id).map(|&i| &self.paths[i]).ok_or_else(|| GeometryError::UnknownPath(id.to_string()))
    }

    pub fn stop_line_offset(&self) -> f64 {
        self.stop_line_offset
    }

    /// Two paths conflict iff they cross a common block.
    pub fn paths_conflict(&self, a: &str, b: &str) -> Result<bool, GeometryError> {
        let pa = self.path(a)?;
        let pb = self.path(b)?;
        Ok(pa.spans.iter().any(|sa| pb.crosses(&sa.block_id)))
    }

    pub fn block_span(&self, path_id: &str, block_id: &str) -> Result<&BlockSpan, GeometryError> {
        self.block(block_id)?;
        self.path(path_id)?.span(block_id).ok_or_else(|| GeometryError::NotCrossing {
            path: path_id.to_string(),
            block: block_id.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryPreset {
    /// Four approaches, each with left / straight / right paths.
    FourWay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathConfig {
    pub id: String,
    pub points: Vec<Vec2>,
}

/// Geometry section of a scenario file. A preset expands to blocks and
/// paths; explicit entries are appended after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometryConfig {
    pub preset: Option<GeometryPreset>,
    /// Blocks per side for the preset (1 = a single block).
    pub grid: usize,
    pub blocks: Vec<ConflictBlock>,
    pub paths: Vec<PathConfig>,
    pub stop_line_offset: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            preset: Some(GeometryPreset::FourWay),
            grid: 1,
            blocks: Vec::new(),
            paths: Vec::new(),
            stop_line_offset: DEFAULT_STOP_LINE_OFFSET,
        }
    }
}

impl GeometryConfig {
    pub fn explicit(blocks: Vec<ConflictBlock>, paths: Vec<PathConfig>) -> Self {
        Self { preset: None, grid: 1, blocks, paths, stop_line_offset: DEFAULT_STOP_LINE_OFFSET }
    }

    pub fn four_way_grid(grid: usize) -> Self {
        Self { grid, ..Self::default() }
    }

    fn resolve(&self) -> Result<(Vec<ConflictBlock>, Vec<PathConfig>), GeometryError> {
        let mut blocks = Vec::new();
        let mut paths = Vec::new();
        if let Some(GeometryPreset::FourWay) = self.preset {
            blocks.extend(grid_blocks(self.grid)?);
            paths.extend(four_way_paths());
        }
        blocks.extend(self.blocks.iter().cloned());
        paths.extend(self.paths.iter().cloned());
        Ok((blocks, paths))
    }
}

fn grid_blocks(n: usize) -> Result<Vec<ConflictBlock>, GeometryError> {
    if n == 0 || n > 8 {
        return Err(GeometryError::BadGrid(n));
    }
    let h = DEFAULT_BLOCK_HALF;
    if n == 1 {
        return Ok(vec![ConflictBlock { id: "main".into(), region: Rect::new(Vec2::new(-h, -h), Vec2::new(h, h)) }]);
    }
    let step = 2.0 * h / n as f64;
    let mut out = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            let min = Vec2::new(-h + col as f64 * step, -h + row as f64 * step);
            out.push(ConflictBlock { id: format!("r{row}c{col}"), region: Rect::new(min, min + Vec2::new(step, step)) });
        }
    }
    Ok(out)
}

/// Approach names in counter-clockwise order, each a quarter turn from
/// the previous one. `south` means arriving from the south, heading north.
pub const APPROACHES: [&str; 4] = ["south", "east", "north", "west"];

fn arc(center: Vec2, radius: f64, from: f64, to: f64) -> Vec<Vec2> {
    const STEPS: usize = 90;
    (0..=STEPS)
        .map(|k| {
            let th = from + (to - from) * k as f64 / STEPS as f64;
            center + Vec2::from_angle(th) * radius
        })
        .collect()
}

fn four_way_paths() -> Vec<PathConfig> {
    let h = DEFAULT_BLOCK_HALF;
    let lane = DEFAULT_LANE_WIDTH / 2.0;
    let far = h + DEFAULT_APPROACH_LENGTH;
    let start = Vec2::new(lane, -far);
    let entry = Vec2::new(lane, -h);

    let straight = vec![start, Vec2::new(lane, far)];

    let mut right = vec![start];
    right.extend(arc(Vec2::new(h, -h), h - lane, PI, FRAC_PI_2));
    right.push(Vec2::new(far, -lane));

    let mut left = vec![start];
    left.extend(arc(Vec2::new(-h, -h), h + lane, 0.0, FRAC_PI_2));
    left.push(Vec2::new(-far, lane));

    debug_assert!(right[1].distance(entry) < 1e-12 && left[1].distance(entry) < 1e-12);

    let mut out = Vec::with_capacity(12);
    for (k, name) in APPROACHES.iter().enumerate() {
        let rot = k as f64 * FRAC_PI_2;
        for (turn, pts) in [("left", &left), ("straight", &straight), ("right", &right)] {
            out.push(PathConfig { id: format!("{name}_{turn}"), points: pts.iter().map(|p| p.rotate(rot)).collect() });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_block_parallel() -> GeometryConfig {
        GeometryConfig::explicit(
            vec![
                ConflictBlock { id: "west".into(), region: Rect::new(Vec2::new(-0.9, -0.45), Vec2::new(0.0, 0.45)) },
                ConflictBlock { id: "east".into(), region: Rect::new(Vec2::new(0.0, -0.45), Vec2::new(0.9, 0.45)) },
            ],
            vec![
                PathConfig { id: "a".into(), points: vec![Vec2::new(-0.45, -2.0), Vec2::new(-0.45, 2.0)] },
                PathConfig { id: "b".into(), points: vec![Vec2::new(0.45, -2.0), Vec2::new(0.45, 2.0)] },
            ],
        )
    }

    /// Samples the path every centimeter and reports the inside-run hull.
    fn sampled_span(path: &Path, region: &Rect) -> Option<(f64, f64)> {
        let n = (path.length() / 0.01).ceil() as usize;
        let mut lo: Option<f64> = None;
        let mut hi = 0.0;
        for k in 0..=n {
            let s = (k as f64 * 0.01).min(path.length());
            if region.contains(path.point_at(s)) {
                lo.get_or_insert(s);
                hi = s;
            }
        }
        lo.map(|l| (l, hi))
    }

    #[test]
    fn default_four_way_has_twelve_paths_one_block() {
        let m = IntersectionModel::four_way();
        assert_eq!(m.blocks().len(), 1);
        assert_eq!(m.paths().len(), 12);
        assert_eq!(m.blocks()[0].id, "main");
    }

    #[test]
    fn single_block_everything_conflicts() {
        let m = IntersectionModel::four_way();
        assert!(m.paths_conflict("south_straight", "west_straight").unwrap());
        assert!(m.paths_conflict("north_left", "north_left").unwrap());
        for a in m.paths() {
            for b in m.paths() {
                assert!(m.paths_conflict(a.id(), b.id()).unwrap());
            }
        }
    }

    #[test]
    fn unknown_path_is_error() {
        let m = IntersectionModel::four_way();
        assert_eq!(m.paths_conflict("nope", "south_left"), Err(GeometryError::UnknownPath("nope".into())));
    }

    #[test]
    fn parallel_paths_in_disjoint_blocks_do_not_conflict() {
        let cfg = two_block_parallel();
        let m = IntersectionModel::build(&cfg).unwrap();
        // oracle: rectangle intersection of each block with each path's bounding segment
        let touches = |pid: &str, b: &ConflictBlock| {
            let p = m.path(pid).unwrap();
            sampled_span(p, &b.region).is_some_and(|(lo, hi)| hi > lo)
        };
        let shared = m.blocks().iter().any(|b| touches("a", b) && touches("b", b));
        assert!(!shared);
        assert!(!m.paths_conflict("a", "b").unwrap());
        assert!(!m.paths_conflict("b", "a").unwrap());
    }

    #[test]
    fn straight_path_span_is_symmetric() {
        let cfg = GeometryConfig::explicit(
            vec![ConflictBlock { id: "k".into(), region: Rect::centered(Vec2::new(5.0, 0.0), 2.0, 2.0) }],
            vec![PathConfig { id: "p".into(), points: vec![Vec2::new(0.0, 0.0), Vec2::new(10.0, 0.0)] }],
        );
        let m = IntersectionModel::build(&cfg).unwrap();
        let span = m.block_span("p", "k").unwrap();
        assert!((span.enter_s - 4.0).abs() < 1e-12);
        assert!((span.exit_s - 6.0).abs() < 1e-12);
    }

    #[test]
    fn corner_graze_is_rejected() {
        let cfg = GeometryConfig::explicit(
            vec![ConflictBlock { id: "k".into(), region: Rect::new(Vec2::new(0.0, 0.0), Vec2::new(1.0, 1.0)) }],
            vec![PathConfig { id: "p".into(), points: vec![Vec2::new(-1.0, 1.0), Vec2::new(1.0, -1.0)] }],
        );
        assert_eq!(IntersectionModel::build(&cfg).unwrap_err(), GeometryError::PathCrossesNothing("p".into()));
    }

    #[test]
    fn block_span_error_when_not_crossing() {
        let m = IntersectionModel::build(&two_block_parallel()).unwrap();
        assert!(matches!(m.block_span("a", "east"), Err(GeometryError::NotCrossing { .. })));
    }

    #[test]
    fn turn_spans_match_centimeter_sampling() {
        for grid in [1, 2] {
            let m = IntersectionModel::build(&GeometryConfig::four_way_grid(grid)).unwrap();
            for p in m.paths() {
                for span in p.spans() {
                    let block = m.block(&span.block_id).unwrap();
                    let (lo, hi) = sampled_span(p, &block.region).unwrap();
                    assert!((lo - span.enter_s).abs() <= 0.01 + 1e-6, "{} {}: {lo} vs {}", p.id(), span.block_id, span.enter_s);
                    assert!((hi - span.exit_s).abs() <= 0.01 + 1e-6, "{} {}: {hi} vs {}", p.id(), span.block_id, span.exit_s);
                }
            }
        }
    }

    #[test]
    fn right_turn_span_is_quarter_arc() {
        let m = IntersectionModel::four_way();
        let span = m.block_span("south_right", "main").unwrap();
        assert!((span.enter_s - 1.8).abs() < 1e-9);
        // chord-approximated quarter circle of radius 0.225
        let expect = 0.225 * FRAC_PI_2;
        assert!((span.length() - expect).abs() < 1e-4, "{}", span.length());
    }

    #[test]
    fn grid_build_errors() {
        let mut cfg = GeometryConfig::explicit(vec![], vec![]);
        assert_eq!(IntersectionModel::build(&cfg).unwrap_err(), GeometryError::NoBlocks);
        cfg.blocks = vec![
            ConflictBlock { id: "a".into(), region: Rect::new(Vec2::new(0.0, 0.0), Vec2::new(1.0, 1.0)) },
            ConflictBlock { id: "b".into(), region: Rect::new(Vec2::new(0.5, 0.5), Vec2::new(2.0, 2.0)) },
        ];
        assert!(matches!(IntersectionModel::build(&cfg), Err(GeometryError::OverlappingBlocks(..))));
    }

    #[test]
    fn two_by_two_grid_straights_cross_two_blocks() {
        let m = IntersectionModel::build(&GeometryConfig::four_way_grid(2)).unwrap();
        assert_eq!(m.blocks().len(), 4);
        for a in APPROACHES {
            let p = m.path(&format!("{a}_straight")).unwrap();
            assert_eq!(p.spans().len(), 2, "{a}");
            // oracle: count blocks whose region contains the lane center line at some sample
            let hit = m.blocks().iter().filter(|b| sampled_span(p, &b.region).is_some_and(|(l, h)| h > l)).count();
            assert_eq!(hit, 2);
        }
        // opposite straights use disjoint lanes, so they share nothing
        assert!(!m.paths_conflict("south_straight", "north_straight").unwrap());
        assert!(m.paths_conflict("south_straight", "west_straight").unwrap());
    }

    #[test]
    fn spans_are_ordered_and_disjoint() {
        let m = IntersectionModel::build(&GeometryConfig::four_way_grid(2)).unwrap();
        for p in m.paths() {
            for w in p.spans().windows(2) {
                assert!(w[0].exit_s <= w[1].enter_s + 1e-9);
            }
            for s in p.spans() {
                assert!(s.enter_s < s.exit_s && s.exit_s <= p.length());
            }
        }
    }

    #[test]
    fn projection_recovers_arc_length() {
        let m = IntersectionModel::four_way();
        let p = m.path("west_left").unwrap();
        for s in [0.3, 1.9, 2.2, 3.0] {
            let (s2, d) = p.project(p.point_at(s));
            assert!((s - s2).abs() < 1e-6 && d < 1e-9);
        }
    }
}
