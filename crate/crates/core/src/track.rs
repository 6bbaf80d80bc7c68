//! Sampled lane center line, nearest-sample projection, look-ahead reference
//! generation and obstacle bookkeeping.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point = [f64; 2];

/// Look-ahead samples used by the reference generator.
pub const DEFAULT_LOOKAHEAD: usize = 90;
/// Half-width of the hinted projection window (2 * look-ahead).
pub const DEFAULT_SEARCH_WINDOW: usize = 2 * DEFAULT_LOOKAHEAD;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("invalid track: {0}")]
    Invalid(String),
    #[error("{path}: line {line}, column {column}: {msg}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("{path}: line {line}: {msg}")]
    Rejected { path: String, line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[inline]
fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

#[inline]
fn dist(a: &Point, b: &Point) -> f64 {
    dist2(a, b).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterLine {
    points: Vec<Point>,
    d_s: f64,
    closed: bool,
    #[serde(skip, default = "default_window")]
    search_window: usize,
}

fn default_window() -> usize {
    DEFAULT_SEARCH_WINDOW
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    pub index: usize,
    pub point: Point,
    pub distance: f64,
}

/// Which consecutive pair breaks the spacing rule, if any.
fn spacing_violation(points: &[Point], d_s: f64, closed: bool) -> Option<(usize, f64)> {
    let k = points.len();
    let pairs = if closed { k } else { k - 1 };
    (0..pairs).find_map(|i| {
        let gap = dist(&points[i], &points[(i + 1) % k]);
        if (gap - d_s).abs() > 0.1 * d_s || gap == 0.0 {
            Some((i, gap))
        } else {
            None
        }
    })
}

impl CenterLine {
    pub fn new(points: Vec<Point>, d_s: f64, closed: bool) -> Result<Self, TrackError> {
        if points.is_empty() {
            return Err(TrackError::Invalid("center line has no points".into()));
        }
        if points.len() <= 2 {
            return Err(TrackError::Invalid(format!(
                "center line needs more than 2 points, got {}",
                points.len()
            )));
        }
        if !(d_s.is_finite() && d_s > 0.0) {
            return Err(TrackError::Invalid(format!("d_s must be > 0, got {d_s}")));
        }
        if let Some(i) = points.iter().position(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return Err(TrackError::Invalid(format!("point {i} is not finite")));
        }
        if let Some((i, gap)) = spacing_violation(&points, d_s, closed) {
            return Err(TrackError::Invalid(format!(
                "spacing between points {i} and {} is {gap:.6} m, outside d_s = {d_s} +/- 10%",
                (i + 1) % points.len()
            )));
        }
        Ok(Self {
            points,
            d_s,
            closed,
            search_window: DEFAULT_SEARCH_WINDOW,
        })
    }

    /// Sets the half-width of the hinted search window.
    pub fn with_search_window(mut self, window: usize) -> Self {
        self.search_window = window;
        self
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn d_s(&self) -> f64 {
        self.d_s
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn search_window(&self) -> usize {
        self.search_window
    }

    pub fn point(&self, i: usize) -> Point {
        self.points[i]
    }

    /// Nearest sample to `p`. With a hint only `hint +/- search_window` is
    /// scanned; ties resolve to the smallest index.
    pub fn project(&self, p: Point, hint: Option<usize>) -> ProjectionResult {
        self.project_within(p, hint, self.search_window)
    }

    /// [`Self::project`] with an explicit half-window around the hint.
    pub fn project_within(&self, p: Point, hint: Option<usize>, w: usize) -> ProjectionResult {
        let k = self.points.len();
        let (mut best_i, mut best_d2) = (usize::MAX, f64::INFINITY);
        let mut consider = |i: usize| {
            let d2 = dist2(&self.points[i], &p);
            if d2 < best_d2 || (d2 == best_d2 && i < best_i) {
                best_d2 = d2;
                best_i = i;
            }
        };
        match hint {
            Some(h) if 2 * w + 1 < k => {
                let h = h % k;
                if self.closed {
                    for off in 0..=2 * w {
                        consider((h + k + off - w) % k);
                    }
                } else {
                    let lo = h.saturating_sub(w);
                    let hi = (h + w).min(k - 1);
                    (lo..=hi).for_each(&mut consider);
                }
            }
            _ => (0..k).for_each(&mut consider),
        }
        ProjectionResult {
            index: best_i,
            point: self.points[best_i],
            distance: best_d2.sqrt(),
        }
    }

    /// Foot point on the polyline near the sample selected by
    /// [`Self::project_within`]; `index` is that sample. The squared distance
    /// to the foot point is continuously differentiable away from corners of
    /// the medial axis, unlike the distance to the nearest sample.
    pub fn project_onto_segments(&self, p: Point, hint: Option<usize>, w: usize) -> ProjectionResult {
        let base = self.project_within(p, hint, w);
        let k = self.points.len();
        let i = base.index;
        let mut best = base;
        let mut neighbours = [None, None];
        if self.closed || i > 0 {
            neighbours[0] = Some((i + k - 1) % k);
        }
        if self.closed || i + 1 < k {
            neighbours[1] = Some((i + 1) % k);
        }
        for j in neighbours.into_iter().flatten() {
            let (a, b) = (self.points[i], self.points[j]);
            let ab = [b[0] - a[0], b[1] - a[1]];
            let t = (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / (ab[0] * ab[0] + ab[1] * ab[1])).clamp(0.0, 1.0);
            let foot = [a[0] + t * ab[0], a[1] + t * ab[1]];
            let d = dist(&foot, &p);
            if d < best.distance {
                best = ProjectionResult {
                    index: i,
                    point: foot,
                    distance: d,
                };
            }
        }
        best
    }

    /// Index `lookahead` samples after `i_star`; wraps on closed tracks,
    /// clamps to the last sample on open ones.
    pub fn lookahead_index(&self, i_star: usize, lookahead: usize) -> usize {
        let k = self.points.len();
        if self.closed {
            (i_star % k + lookahead % k) % k
        } else {
            (i_star + lookahead).min(k - 1)
        }
    }

    pub fn lookahead_reference(&self, i_star: usize, lookahead: usize) -> Point {
        self.points[self.lookahead_index(i_star, lookahead)]
    }

    pub fn lateral_deviation(&self, p: Point, hint: Option<usize>) -> f64 {
        self.project(p, hint).distance
    }

    /// Unit tangent at sample `i` (forward difference, backward at an open end).
    pub fn tangent(&self, i: usize) -> Point {
        let k = self.points.len();
        let (a, b) = if self.closed {
            (self.points[i], self.points[(i + 1) % k])
        } else if i + 1 < k {
            (self.points[i], self.points[i + 1])
        } else {
            (self.points[i - 1], self.points[i])
        };
        let n = dist(&a, &b);
        [(b[0] - a[0]) / n, (b[1] - a[1]) / n]
    }

    /// Unsigned curvature at every sample from the circle through samples
    /// `i - span`, `i`, `i + span` (clamped at open ends).
    pub fn curvature_profile(&self, span: usize) -> Vec<f64> {
        let k = self.points.len();
        let span = span.max(1);
        (0..k)
            .map(|i| {
                let (ia, ib) = if self.closed {
                    ((i + k - span % k) % k, (i + span) % k)
                } else {
                    (i.saturating_sub(span), (i + span).min(k - 1))
                };
                if ia == i || ib == i {
                    return 0.0;
                }
                menger_curvature(&self.points[ia], &self.points[i], &self.points[ib])
            })
            .collect()
    }

    /// Total polyline length (including the closing segment of a closed track).
    pub fn length(&self) -> f64 {
        let k = self.points.len();
        let n = if self.closed { k } else { k - 1 };
        (0..n).map(|i| dist(&self.points[i], &self.points[(i + 1) % k])).sum()
    }
}

fn menger_curvature(a: &Point, b: &Point, c: &Point) -> f64 {
    let cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    let denom = dist(a, b) * dist(b, c) * dist(a, c);
    if denom == 0.0 {
        0.0
    } else {
        2.0 * cross.abs() / denom
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Point,
    #[serde(rename = "R")]
    pub radius: f64,
    #[serde(rename = "Gamma")]
    pub gamma: f64,
}

impl Obstacle {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.center[0].is_finite() && self.center[1].is_finite()) {
            return Err("obstacle center is not finite".into());
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(format!("obstacle radius must be > 0, got {}", self.radius));
        }
        if !(self.gamma.is_finite() && self.gamma >= self.radius) {
            return Err(format!(
                "obstacle clearance Gamma = {} must be >= radius R = {}",
                self.gamma, self.radius
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackLayout {
    pub center_line: CenterLine,
    pub obstacles: Vec<Obstacle>,
    pub r_g: f64,
    pub r_c: f64,
}

impl TrackLayout {
    pub fn new(
        center_line: CenterLine,
        obstacles: Vec<Obstacle>,
        r_g: f64,
        r_c: f64,
    ) -> Result<Self, TrackError> {
        let layout = Self {
            center_line,
            obstacles,
            r_g,
            r_c,
        };
        layout.check_corridor()?;
        for i in 0..layout.obstacles.len() {
            layout.check_obstacle(i).map_err(TrackError::Invalid)?;
        }
        Ok(layout)
    }

    /// Half-width available to the car's center: `R_g - R_c`.
    pub fn corridor_half_width(&self) -> f64 {
        self.r_g - self.r_c
    }

    fn check_corridor(&self) -> Result<(), TrackError> {
        if !(self.r_c.is_finite() && self.r_c > 0.0 && self.r_g.is_finite() && self.r_g > self.r_c) {
            return Err(TrackError::Invalid(format!(
                "corridor requires R_g > R_c > 0, got R_g = {}, R_c = {}",
                self.r_g, self.r_c
            )));
        }
        Ok(())
    }

    fn check_obstacle(&self, i: usize) -> Result<(), String> {
        let o = &self.obstacles[i];
        o.validate().map_err(|e| format!("obstacle {i}: {e}"))?;
        let off = self.center_line.project(o.center, None).distance;
        if o.gamma >= off + self.corridor_half_width() {
            return Err(format!(
                "obstacle {i}: no passable gap (Gamma = {} >= {:.4} offset + {:.4} half-width)",
                o.gamma,
                off,
                self.corridor_half_width()
            ));
        }
        Ok(())
    }

    pub fn without_obstacles(&self) -> Self {
        Self {
            obstacles: Vec::new(),
            ..self.clone()
        }
    }

    pub fn to_file(&self) -> TrackFile {
        TrackFile {
            d_s: self.center_line.d_s,
            closed: self.center_line.closed,
            points: self.center_line.points.clone(),
            r_g: self.r_g,
            r_c: self.r_c,
            obstacles: self.obstacles.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), TrackError> {
        let text = serde_json::to_string_pretty(&self.to_file()).expect("track serializes");
        std::fs::write(path, text).map_err(|source| TrackError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrackError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrackError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    /// Parses and validates the JSON track format. Errors carry the line of
    /// the offending point or obstacle in `text`.
    pub fn from_json_str(text: &str, origin: &str) -> Result<Self, TrackError> {
        let file: TrackFile = serde_json::from_str(text).map_err(|e| TrackError::Parse {
            path: origin.to_string(),
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })?;
        let locator = ArrayLocator::new(text);
        let reject = |line: usize, msg: String| TrackError::Rejected {
            path: origin.to_string(),
            line,
            msg,
        };
        let key_line = |key: &str| locator.key_line(key).unwrap_or(1);

        let center_line = CenterLine::new(file.points.clone(), file.d_s, file.closed).map_err(|e| {
            let msg = match e {
                TrackError::Invalid(m) => m,
                other => other.to_string(),
            };
            let line = spacing_violation_line(&file, &locator).unwrap_or_else(|| key_line("points"));
            reject(line, msg)
        })?;
        let layout = TrackLayout {
            center_line,
            obstacles: file.obstacles.clone(),
            r_g: file.r_g,
            r_c: file.r_c,
        };
        layout
            .check_corridor()
            .map_err(|e| reject(key_line("R_g"), e.to_string()))?;
        let obstacle_lines = locator.element_lines("obstacles", b'{');
        for i in 0..layout.obstacles.len() {
            layout.check_obstacle(i).map_err(|m| {
                let line = obstacle_lines.get(i).copied().unwrap_or_else(|| key_line("obstacles"));
                reject(line, m)
            })?;
        }
        Ok(layout)
    }
}

fn spacing_violation_line(file: &TrackFile, locator: &ArrayLocator) -> Option<usize> {
    if file.points.len() < 2 {
        return None;
    }
    let (i, _) = spacing_violation(&file.points, file.d_s, file.closed)?;
    let lines = locator.element_lines("points", b'[');
    lines.get((i + 1) % file.points.len()).copied()
}

/// On-disk track description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackFile {
    pub d_s: f64,
    pub closed: bool,
    pub points: Vec<Point>,
    #[serde(rename = "R_g")]
    pub r_g: f64,
    #[serde(rename = "R_c")]
    pub r_c: f64,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
}

/// Maps top-level keys and array elements back to source lines.
struct ArrayLocator<'a> {
    text: &'a str,
}

impl<'a> ArrayLocator<'a> {
    fn new(text: &'a str) -> Self {
        Self { text }
    }

    fn line_of(&self, offset: usize) -> usize {
        self.text.as_bytes()[..offset].iter().filter(|&&b| b == b'\n').count() + 1
    }

    fn key_offset(&self, key: &str) -> Option<usize> {
        self.text.find(&format!("\"{key}\""))
    }

    fn key_line(&self, key: &str) -> Option<usize> {
        self.key_offset(key).map(|o| self.line_of(o))
    }

    /// Lines where each direct child of the array under `key` starts.
    fn element_lines(&self, key: &str, opener: u8) -> Vec<usize> {
        let bytes = self.text.as_bytes();
        let Some(start) = self.key_offset(key) else {
            return Vec::new();
        };
        let Some(rel) = bytes[start..].iter().position(|&b| b == b'[') else {
            return Vec::new();
        };
        let mut out = Vec::new();
        let mut depth = 0usize;
        let mut in_string = false;
        let mut escaped = false;
        for (off, &b) in bytes[start + rel..].iter().enumerate() {
            if in_string {
                match (escaped, b) {
                    (true, _) => escaped = false,
                    (false, b'\\') => escaped = true,
                    (false, b'"') => in_string = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_string = true,
                b'[' | b'{' => {
                    depth += 1;
                    if depth == 2 && b == opener {
                        out.push(self.line_of(start + rel + off));
                    }
                }
                b']' | b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        break;
                    }
                }
                _ => {}
            }
        }
        out
    }
}

/// One piece of a procedurally described loop, driven like a turtle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PathSegment {
    Line { length: f64 },
    /// Positive `angle` turns left (counter-clockwise).
    Arc { radius: f64, angle: f64 },
}

impl PathSegment {
    fn length(&self) -> f64 {
        match *self {
            PathSegment::Line { length } => length,
            PathSegment::Arc { radius, angle } => radius * angle.abs(),
        }
    }
}

/// Obstacle placed by arc length along the center line and signed lateral
/// offset (positive to the left of the driving direction).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstaclePlacement {
    pub s: f64,
    #[serde(default)]
    pub offset: f64,
    #[serde(rename = "R")]
    pub radius: f64,
    #[serde(rename = "Gamma")]
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum TrackShape {
    Circle { radius: f64 },
    /// Two straights joined by two half circles.
    Stadium { straight: f64, radius: f64 },
    /// Closed loop of arbitrary segments starting at the origin heading +x.
    Segments { segments: Vec<PathSegment> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSpec {
    #[serde(flatten)]
    pub shape: TrackShape,
    #[serde(default = "default_d_s")]
    pub d_s: f64,
    #[serde(rename = "R_g", default = "default_r_g")]
    pub r_g: f64,
    #[serde(rename = "R_c", default = "default_r_c")]
    pub r_c: f64,
    #[serde(default)]
    pub obstacles: Vec<ObstaclePlacement>,
}

fn default_d_s() -> f64 {
    0.1
}
fn default_r_g() -> f64 {
    2.0
}
fn default_r_c() -> f64 {
    0.24
}

impl TrackSpec {
    /// Desk-scale stadium: two 8 m straights, 2.5 m half circles.
    pub fn stadium() -> Self {
        Self {
            shape: TrackShape::Stadium {
                straight: 8.0,
                radius: 2.5,
            },
            d_s: default_d_s(),
            r_g: default_r_g(),
            r_c: default_r_c(),
            obstacles: Vec::new(),
        }
    }

    /// Stadium with one obstacle mid-way down each straight, offset to alternating sides.
    pub fn stadium_with_obstacles() -> Self {
        let mut spec = Self::stadium();
        let half_turn = PI * 2.5;
        spec.obstacles = vec![
            ObstaclePlacement {
                s: 4.0,
                offset: 0.7,
                radius: 1.0,
                gamma: 1.5,
            },
            ObstaclePlacement {
                s: 8.0 + half_turn + 4.0,
                offset: -0.7,
                radius: 1.0,
                gamma: 1.5,
            },
        ];
        spec
    }

    /// Four left-hand corners of different radii.
    pub fn winding() -> Self {
        let q = PI / 2.0;
        Self {
            shape: TrackShape::Segments {
                segments: vec![
                    PathSegment::Line { length: 8.0 },
                    PathSegment::Arc { radius: 2.0, angle: q },
                    PathSegment::Line { length: 4.0 },
                    PathSegment::Arc { radius: 3.5, angle: q },
                    PathSegment::Line { length: 7.0 },
                    PathSegment::Arc { radius: 2.5, angle: q },
                    PathSegment::Line { length: 4.0 },
                    PathSegment::Arc { radius: 3.0, angle: q },
                ],
            },
            d_s: default_d_s(),
            r_g: default_r_g(),
            r_c: default_r_c(),
            obstacles: Vec::new(),
        }
    }

    fn segments(&self) -> Result<Vec<PathSegment>, TrackError> {
        let segs = match &self.shape {
            TrackShape::Circle { radius } => vec![PathSegment::Arc {
                radius: *radius,
                angle: 2.0 * PI,
            }],
            TrackShape::Stadium { straight, radius } => vec![
                PathSegment::Line { length: *straight },
                PathSegment::Arc {
                    radius: *radius,
                    angle: PI,
                },
                PathSegment::Line { length: *straight },
                PathSegment::Arc {
                    radius: *radius,
                    angle: PI,
                },
            ],
            TrackShape::Segments { segments } => segments.clone(),
        };
        for s in &segs {
            let ok = match *s {
                PathSegment::Line { length } => length.is_finite() && length > 0.0,
                PathSegment::Arc { radius, angle } => {
                    radius.is_finite() && radius > 0.0 && angle.is_finite() && angle != 0.0
                }
            };
            if !ok {
                return Err(TrackError::Invalid(format!("degenerate segment {s:?}")));
            }
        }
        Ok(segs)
    }
}

#[derive(Debug, Clone, Copy)]
struct Pose {
    x: f64,
    y: f64,
    heading: f64,
}

fn advance(pose: Pose, seg: &PathSegment, s: f64) -> Pose {
    match *seg {
        PathSegment::Line { .. } => Pose {
            x: pose.x + s * pose.heading.cos(),
            y: pose.y + s * pose.heading.sin(),
            heading: pose.heading,
        },
        PathSegment::Arc { radius, angle } => {
            let sign = angle.signum();
            let turn = sign * s / radius;
            // center lies to the left for positive turns
            let cx = pose.x - sign * radius * pose.heading.sin();
            let cy = pose.y + sign * radius * pose.heading.cos();
            let h = pose.heading + turn;
            Pose {
                x: cx + sign * radius * h.sin(),
                y: cy - sign * radius * h.cos(),
                heading: h,
            }
        }
    }
}

/// Samples the analytic loop at uniform arc length, validates it and places obstacles.
pub fn build_track(spec: &TrackSpec) -> Result<TrackLayout, TrackError> {
    let segs = spec.segments()?;
    if !(spec.d_s.is_finite() && spec.d_s > 0.0) {
        return Err(TrackError::Invalid(format!("d_s must be > 0, got {}", spec.d_s)));
    }
    let total: f64 = segs.iter().map(PathSegment::length).sum();

    let start = Pose {
        x: 0.0,
        y: 0.0,
        heading: 0.0,
    };
    let mut seg_starts = Vec::with_capacity(segs.len() + 1);
    let mut pose = start;
    for seg in &segs {
        seg_starts.push(pose);
        pose = advance(pose, seg, seg.length());
    }
    let closure = ((pose.x - start.x).powi(2) + (pose.y - start.y).powi(2)).sqrt();
    let heading_gap = ((pose.heading - start.heading) / (2.0 * PI)).fract().abs();
    if closure > 1e-6 * total.max(1.0) || (heading_gap > 1e-9 && heading_gap < 1.0 - 1e-9) {
        return Err(TrackError::Invalid(format!(
            "segments do not close the loop (end point off by {closure:.6} m)"
        )));
    }

    let pose_at = |s: f64| -> Pose {
        let mut acc = 0.0;
        for (seg, p0) in segs.iter().zip(&seg_starts) {
            let l = seg.length();
            if s <= acc + l {
                return advance(*p0, seg, s - acc);
            }
            acc += l;
        }
        advance(*seg_starts.last().unwrap(), segs.last().unwrap(), segs.last().unwrap().length())
    };

    let k = (total / spec.d_s).round() as usize;
    if k <= 2 {
        return Err(TrackError::Invalid(format!("track too short for d_s = {}", spec.d_s)));
    }
    let step = total / k as f64;
    let points: Vec<Point> = (0..k)
        .map(|i| {
            let p = pose_at(i as f64 * step);
            [p.x, p.y]
        })
        .collect();

    if let Some((i, j)) = first_self_intersection(&points) {
        return Err(TrackError::Invalid(format!(
            "center line self-intersects (segments {i} and {j})"
        )));
    }

    let center_line = CenterLine::new(points, spec.d_s, true)?;
    let obstacles = spec
        .obstacles
        .iter()
        .map(|o| {
            let p = pose_at(o.s.rem_euclid(total));
            Obstacle {
                center: [
                    p.x - o.offset * p.heading.sin(),
                    p.y + o.offset * p.heading.cos(),
                ],
                radius: o.radius,
                gamma: o.gamma,
            }
        })
        .collect();
    TrackLayout::new(center_line, obstacles, spec.r_g, spec.r_c)
}

fn segments_cross(a: &Point, b: &Point, c: &Point, d: &Point) -> bool {
    let orient = |p: &Point, q: &Point, r: &Point| (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]);
    let (o1, o2) = (orient(a, b, c), orient(a, b, d));
    let (o3, o4) = (orient(c, d, a), orient(c, d, b));
    o1 * o2 < 0.0 && o3 * o4 < 0.0
}

fn first_self_intersection(points: &[Point]) -> Option<(usize, usize)> {
    let k = points.len();
    for i in 0..k {
        let (a, b) = (&points[i], &points[(i + 1) % k]);
        for j in (i + 2)..k {
            if (j + 1) % k == i {
                continue;
            }
            if segments_cross(a, b, &points[j], &points[(j + 1) % k]) {
                return Some((i, j));
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn circle(k: usize, radius: f64) -> CenterLine {
        let pts: Vec<Point> = (0..k)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / k as f64;
                [radius * a.cos(), radius * a.sin()]
            })
            .collect();
        let d_s = 2.0 * radius * (PI / k as f64).sin();
        CenterLine::new(pts, d_s, true).unwrap()
    }

    fn brute_force(cl: &CenterLine, p: Point) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, q) in cl.points().iter().enumerate() {
            let d = ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt();
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    #[test]
    fn projection_of_sample_is_itself() {
        let cl = circle(100, 5.0);
        let r = cl.project(cl.point(7), None);
        assert_eq!(r.index, 7);
        assert_eq!(r.distance, 0.0);
        assert_eq!(r.point, cl.point(7));
    }

    #[test]
    fn projection_tie_breaks_to_smaller_index() {
        let pts: Vec<Point> = (0..10).map(|i| [i as f64 * 0.1, 0.0]).collect();
        let cl = CenterLine::new(pts, 0.1, false).unwrap();
        let r = cl.project([0.35, 0.2], None);
        assert_eq!(r.index, 3);
        let r = cl.project([0.35, 0.2], Some(5));
        assert_eq!(r.index, 3);
    }

    #[test]
    fn projection_matches_brute_force_on_circle() {
        let cl = circle(100, 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let p = [rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0)];
            let (i, d) = brute_force(&cl, p);
            let r = cl.project(p, None);
            assert_eq!(r.index, i);
            assert_eq!(r.distance, d);
            assert_eq!(cl.lateral_deviation(p, None), d);
        }
    }

    #[test]
    fn lateral_deviation_on_circle() {
        let cl = circle(200, 5.0);
        let dev = cl.lateral_deviation([6.0, 0.0], None);
        assert!((dev - 1.0).abs() <= cl.d_s() / 2.0);
        assert_eq!(cl.lateral_deviation(cl.point(11), None), 0.0);
    }

    #[test]
    fn lookahead_wraps_and_clamps() {
        let cl = circle(200, 20.0 / (2.0 * PI));
        assert_eq!(cl.lookahead_reference(150, 0), cl.point(150));
        assert_eq!(cl.lookahead_index(150, 90), 40);
        assert_eq!(cl.lookahead_reference(150, 90), cl.point(40));

        let pts: Vec<Point> = (0..50).map(|i| [i as f64 * 0.1, 0.0]).collect();
        let open = CenterLine::new(pts, 0.1, false).unwrap();
        assert_eq!(open.lookahead_index(48, 90), 49);
    }

    #[test]
    fn center_line_rejects_bad_input() {
        assert!(matches!(CenterLine::new(vec![], 0.1, true), Err(TrackError::Invalid(_))));
        assert!(CenterLine::new(vec![[0.0, 0.0], [0.1, 0.0]], 0.1, false).is_err());
        let uneven = vec![[0.0, 0.0], [0.1, 0.0], [0.3, 0.0]];
        assert!(CenterLine::new(uneven, 0.1, false).is_err());
        let dup = vec![[0.0, 0.0], [0.0, 0.0], [0.1, 0.0]];
        assert!(CenterLine::new(dup, 0.1, false).is_err());
    }

    #[test]
    fn circle_track_has_expected_sample_count() {
        let spec = TrackSpec {
            shape: TrackShape::Circle {
                radius: 20.0 / (2.0 * PI),
            },
            ..TrackSpec::stadium()
        };
        let layout = build_track(&spec).unwrap();
        assert_eq!(layout.center_line.len(), 200);
        let pts = layout.center_line.points();
        for i in 0..200 {
            let gap = dist(&pts[i], &pts[(i + 1) % 200]);
            assert_abs_diff_eq!(gap, 0.1, epsilon = 1e-3);
        }
    }

    #[test]
    fn generated_tracks_satisfy_invariants() {
        for spec in [TrackSpec::stadium(), TrackSpec::stadium_with_obstacles(), TrackSpec::winding()] {
            let layout = build_track(&spec).unwrap();
            let cl = &layout.center_line;
            let pts = cl.points();
            let k = pts.len();
            for i in 0..k {
                let gap = dist(&pts[i], &pts[(i + 1) % k]);
                assert!((gap - spec.d_s).abs() <= 0.1 * spec.d_s, "gap {gap} at {i}");
            }
            assert!(dist(&pts[k - 1], &pts[0]) < 1.1 * spec.d_s);
            for o in &layout.obstacles {
                let off = cl.project(o.center, None).distance;
                assert!(o.gamma < off + layout.corridor_half_width());
            }
        }
    }

    #[test]
    fn stadium_obstacles_sit_beside_the_straights() {
        let layout = build_track(&TrackSpec::stadium_with_obstacles()).unwrap();
        assert_abs_diff_eq!(layout.obstacles[0].center[0], 4.0, epsilon = 1e-9);
        assert_abs_diff_eq!(layout.obstacles[0].center[1], 0.7, epsilon = 1e-9);
        assert_abs_diff_eq!(layout.obstacles[1].center[0], 4.0, epsilon = 1e-9);
        assert_abs_diff_eq!(layout.obstacles[1].center[1], 5.7, epsilon = 1e-9);
    }

    #[test]
    fn impassable_obstacle_is_rejected() {
        let mut spec = TrackSpec::stadium();
        spec.obstacles.push(ObstaclePlacement {
            s: 4.0,
            offset: 0.0,
            radius: 1.0,
            gamma: 1.9,
        });
        assert!(matches!(build_track(&spec), Err(TrackError::Invalid(_))));
    }

    #[test]
    fn open_or_crossing_segments_are_rejected() {
        let spec = TrackSpec {
            shape: TrackShape::Segments {
                segments: vec![PathSegment::Line { length: 5.0 }, PathSegment::Arc { radius: 1.0, angle: PI }],
            },
            ..TrackSpec::stadium()
        };
        assert!(build_track(&spec).is_err());

        // figure eight: closes, but crosses itself
        let eight = TrackSpec {
            shape: TrackShape::Segments {
                segments: vec![
                    PathSegment::Arc { radius: 2.0, angle: 2.0 * PI },
                    PathSegment::Arc { radius: 2.0, angle: -2.0 * PI },
                ],
            },
            ..TrackSpec::stadium()
        };
        assert!(build_track(&eight).is_err());
    }

    #[test]
    fn curvature_profile_on_stadium() {
        let layout = build_track(&TrackSpec::stadium()).unwrap();
        let kappa = layout.center_line.curvature_profile(3);
        // sample 40 is mid-straight, sample 120 mid-curve
        assert!(kappa[40] < 1e-9);
        assert_abs_diff_eq!(kappa[120], 1.0 / 2.5, epsilon = 1e-3);
    }

    #[test]
    fn json_round_trip_and_line_precise_rejection() {
        let layout = build_track(&TrackSpec::stadium_with_obstacles()).unwrap();
        let text = serde_json::to_string_pretty(&layout.to_file()).unwrap();
        let back = TrackLayout::from_json_str(&text, "mem").unwrap();
        assert_eq!(back, layout);

        let bad = r#"{
  "d_s": 0.1,
  "closed": false,
  "points": [
    [0.0, 0.0],
    [0.1, 0.0],
    [0.5, 0.0],
    [0.6, 0.0]
  ],
  "R_g": 2.0,
  "R_c": 0.24,
  "obstacles": []
}"#;
        match TrackLayout::from_json_str(bad, "bad.json") {
            Err(TrackError::Rejected { line, .. }) => assert_eq!(line, 7),
            other => panic!("unexpected {other:?}"),
        }

        let bad_obstacle = r#"{
  "d_s": 0.1, "closed": false,
  "points": [[0.0, 0.0], [0.1, 0.0], [0.2, 0.0]],
  "R_g": 2.0, "R_c": 0.24,
  "obstacles": [
    {"center": [0.1, 3.0], "R": 1.0, "Gamma": 1.5},
    {"center": [0.1, 0.0], "R": 1.0, "Gamma": 0.5}
  ]
}"#;
        match TrackLayout::from_json_str(bad_obstacle, "obs.json") {
            Err(TrackError::Rejected { line, msg, .. }) => {
                assert_eq!(line, 7);
                assert!(msg.contains("obstacle 1"));
            }
            other => panic!("unexpected {other:?}"),
        }

        match TrackLayout::from_json_str("{\n  \"d_s\": 0.1,\n  \"closed\": tru,\n  \"R_g\": 2.0\n}", "syntax.json") {
            Err(TrackError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn hinted_projection_agrees_with_global_scan(
            x in -9.0f64..9.0, y in -4.0f64..9.0, hint_shift in -30i64..30
        ) {
            let layout = build_track(&TrackSpec::winding()).unwrap();
            let cl = layout.center_line.clone().with_search_window(40);
            let global = cl.project([x, y], None);
            let k = cl.len() as i64;
            let hint = ((global.index as i64 + hint_shift).rem_euclid(k)) as usize;
            let hinted = cl.project([x, y], Some(hint));
            prop_assert_eq!(hinted, global);
        }

        #[test]
        fn lookahead_is_additive_on_closed_tracks(i in 0usize..400, a in 0usize..500, b in 0usize..500) {
            let cl = circle(317, 5.0);
            let i = i % 317;
            prop_assert_eq!(
                cl.lookahead_index(i, a + b),
                cl.lookahead_index(cl.lookahead_index(i, a), b)
            );
        }
    }
}
