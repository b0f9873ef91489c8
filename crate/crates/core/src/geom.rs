//! Map elements, scenes, camera rigs, and the geometric operations on them.

use serde::{Deserialize, Serialize};

use crate::error::{geometry, Result};

pub type Point = [f64; 2];

pub const NUM_CLASSES: usize = 3;
/// Index of the background logit in class score vectors.
pub const BACKGROUND: usize = NUM_CLASSES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassId {
    Divider,
    PedCrossing,
    Boundary,
}

impl ClassId {
    pub const ALL: [ClassId; NUM_CLASSES] = [ClassId::Divider, ClassId::PedCrossing, ClassId::Boundary];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassId::Divider => "divider",
            ClassId::PedCrossing => "ped_crossing",
            ClassId::Boundary => "boundary",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevRange {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Default for BevRange {
    fn default() -> Self {
        Self {
            x_min: -15.0,
            x_max: 15.0,
            y_min: -30.0,
            y_max: 30.0,
        }
    }
}

impl BevRange {
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.x_min, self.x_max, self.y_min, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_max > self.x_min
            && self.y_max > self.y_min;
        if ok {
            Ok(())
        } else {
            Err(geometry(format!("invalid BEV range {self:?}")))
        }
    }

    pub fn contains(&self, p: Point) -> bool {
        p[0] >= self.x_min && p[0] <= self.x_max && p[1] >= self.y_min && p[1] <= self.y_max
    }

    pub fn clamp(&self, p: Point) -> Point {
        [p[0].clamp(self.x_min, self.x_max), p[1].clamp(self.y_min, self.y_max)]
    }

    /// Affine map onto the unit square.
    pub fn normalize(&self, p: Point) -> Result<Point> {
        const SLACK: f64 = 1e-9;
        let inside = p[0] >= self.x_min - SLACK
            && p[0] <= self.x_max + SLACK
            && p[1] >= self.y_min - SLACK
            && p[1] <= self.y_max + SLACK;
        if !inside || !p[0].is_finite() || !p[1].is_finite() {
            return Err(geometry(format!("point {p:?} outside BEV range")));
        }
        Ok(self.normalize_unchecked(p))
    }

    pub fn normalize_unchecked(&self, p: Point) -> Point {
        [(p[0] - self.x_min) / self.width(), (p[1] - self.y_min) / self.height()]
    }

    pub fn denormalize(&self, u: Point) -> Point {
        [self.x_min + u[0] * self.width(), self.y_min + u[1] * self.height()]
    }
}

/// Regular BEV grid. Rows run along y (row 0 at `y_min`), columns along x.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub range: BevRange,
}

impl Grid {
    pub fn new(h: usize, w: usize, range: BevRange) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(geometry(format!("grid extents must be positive, got {h}x{w}")));
        }
        range.validate()?;
        Ok(Self { h, w, range })
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn cell_size(&self) -> (f64, f64) {
        (self.range.width() / self.w as f64, self.range.height() / self.h as f64)
    }

    /// Metric center of cell `(row, col)`.
    pub fn center(&self, row: usize, col: usize) -> Point {
        let (cw, ch) = self.cell_size();
        [
            self.range.x_min + (col as f64 + 0.5) * cw,
            self.range.y_min + (row as f64 + 0.5) * ch,
        ]
    }

    /// Cell centers in row-major order.
    pub fn centers(&self) -> Vec<Point> {
        (0..self.h)
            .flat_map(|r| (0..self.w).map(move |c| (r, c)))
            .map(|(r, c)| self.center(r, c))
            .collect()
    }

    /// Cell containing a normalized point, clamped to the grid.
    pub fn cell_of_normalized(&self, u: Point) -> (usize, usize) {
        let col = ((u[0] * self.w as f64).floor().max(0.0) as usize).min(self.w - 1);
        let row = ((u[1] * self.h as f64).floor().max(0.0) as usize).min(self.h - 1);
        (row, col)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapElement {
    pub class: ClassId,
    pub closed: bool,
    pub points: Vec<Point>,
}

impl MapElement {
    /// Resamples `raw` to `n` points (clamping to `range` first).
    pub fn from_raw(class: ClassId, closed: bool, raw: &[Point], n: usize, range: &BevRange) -> Result<Self> {
        let clipped: Vec<Point> = raw.iter().map(|&p| range.clamp(p)).collect();
        Ok(Self {
            class,
            closed,
            points: resample(&clipped, n, closed)?,
        })
    }

    /// Checks point count, range membership, and implicit closure.
    pub fn validate(&self, n: usize, range: &BevRange) -> Result<()> {
        if self.points.len() != n {
            return Err(geometry(format!("expected {n} points, got {}", self.points.len())));
        }
        if let Some(p) = self.points.iter().find(|p| !range.contains(**p)) {
            return Err(geometry(format!("point {p:?} outside BEV range")));
        }
        if self.closed && n > 1 && self.points[0] == self.points[n - 1] {
            return Err(geometry("closed element repeats its first point"));
        }
        Ok(())
    }

    /// Edges in point order; closed elements include the wrap-around edge.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        edges(self.points.len(), self.closed)
    }
}

pub fn edges(n: usize, closed: bool) -> Vec<(usize, usize)> {
    let mut e: Vec<(usize, usize)> = (0..n.saturating_sub(1)).map(|j| (j, j + 1)).collect();
    if closed && n > 2 {
        e.push((n - 1, 0));
    }
    e
}

pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// `n` points on `raw`, equally spaced by arc length along the resampled
/// polyline itself: consecutive output points are a common chord length
/// apart, so resampling an already resampled element is a no-op. Closed
/// inputs are walked around the full perimeter (closing edge included) and
/// the start point is not repeated. Falls back to plain arc-length
/// spacing along `raw` when no common chord exists.
pub fn resample(raw: &[Point], n: usize, closed: bool) -> Result<Vec<Point>> {
    if raw.len() < 2 {
        return Err(geometry(format!("need at least 2 points, got {}", raw.len())));
    }
    if n == 0 {
        return Err(geometry("cannot resample to 0 points"));
    }
    if raw.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(geometry("non-finite coordinate"));
    }
    let mut path = raw.to_vec();
    if closed {
        path.push(raw[0]);
    }
    let total = polyline_length(&path, false);
    if total <= 0.0 {
        return Err(geometry("zero-length polyline"));
    }
    if n == 1 {
        return Ok(vec![path[0]]);
    }
    Ok(equal_chords(&path, n, closed, total).unwrap_or_else(|| arc_length_samples(&path, n, closed, total)))
}

fn arc_length_samples(path: &[Point], n: usize, closed: bool, total: f64) -> Vec<Point> {
    let mut cum = Vec::with_capacity(path.len());
    cum.push(0.0);
    for w in path.windows(2) {
        cum.push(cum.last().unwrap() + dist(w[0], w[1]));
    }
    let step = total / if closed { n } else { n - 1 } as f64;
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for k in 0..n {
        let s = if !closed && k + 1 == n { total } else { k as f64 * step };
        while seg + 2 < cum.len() && cum[seg + 1] < s {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 { ((s - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        let (a, b) = (path[seg], path[seg + 1]);
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    out
}

/// Walks `steps` chords of length `c` along `path`, each ending at the
/// first point of the path that leaves the circle around the previous one.
/// Returns the visited points and the arc position of the last one, or
/// `None` if the path ends first.
pub(crate) fn chord_walk(path: &[Point], cum: &[f64], c: f64, steps: usize) -> Option<(Vec<Point>, f64)> {
    let mut out = Vec::with_capacity(steps + 1);
    let mut q = path[0];
    let mut seg = 0;
    out.push(q);
    for _ in 0..steps {
        let mut a = q;
        let mut found = None;
        for j in seg..path.len() - 1 {
            let cc = (a[0] - q[0]).powi(2) + (a[1] - q[1]).powi(2) - c * c;
            if cc >= 0.0 {
                // Rounding pushed the previous exit just past a vertex.
                found = Some((j, a));
                break;
            }
            let b = path[j + 1];
            let d = [b[0] - a[0], b[1] - a[1]];
            let aa = d[0] * d[0] + d[1] * d[1];
            if aa > 0.0 {
                let bb = 2.0 * ((a[0] - q[0]) * d[0] + (a[1] - q[1]) * d[1]);
                let disc = bb * bb - 4.0 * aa * cc;
                if disc >= 0.0 {
                    let tau = (-bb + disc.sqrt()) / (2.0 * aa);
                    if (0.0..=1.0).contains(&tau) {
                        found = Some((j, [a[0] + tau * d[0], a[1] + tau * d[1]]));
                        break;
                    }
                }
            }
            a = b;
        }
        let (j, p) = found?;
        seg = j;
        q = p;
        out.push(q);
    }
    Some((out, cum[seg] + dist(path[seg], q)))
}

pub(crate) fn equal_chords(path: &[Point], n: usize, closed: bool, total: f64) -> Option<Vec<Point>> {
    let steps = if closed { n } else { n - 1 };
    let end = *path.last().unwrap();
    // Extend the path past its end (once more around a closed loop, along
    // a ray for an open one) so every walk completes, then bisect on the
    // arc position of the last step.
    let mut ext = path.to_vec();
    if closed {
        ext.extend_from_slice(&path[1..]);
    } else {
        let prev = path[path.len() - 2];
        let d = [end[0] - prev[0], end[1] - prev[1]];
        let len = d[0].hypot(d[1]);
        if len == 0.0 {
            return None;
        }
        let k = 2.0 * total / len;
        ext.push([end[0] + k * d[0], end[1] + k * d[1]]);
    }
    let mut cum = Vec::with_capacity(ext.len());
    cum.push(0.0);
    for w in ext.windows(2) {
        cum.push(cum.last().unwrap() + dist(w[0], w[1]));
    }
    let residual = |c: f64| chord_walk(&ext, &cum, c, steps).map(|(_, s)| s - total);
    let (mut lo, mut hi) = (0.0, total / steps as f64 * 1.001);
    if residual(hi)? < 0.0 {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if residual(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Keep whichever bracket end lands closer.
    let walk_lo = chord_walk(&ext, &cum, lo, steps)?;
    let walk_hi = chord_walk(&ext, &cum, hi, steps)?;
    let (mut pts, s) = if (walk_lo.1 - total).abs() < (walk_hi.1 - total).abs() {
        walk_lo
    } else {
        walk_hi
    };
    let last = pts.pop().unwrap();
    if (s - total).abs() > 1e-9 * total.max(1.0) || dist(last, end) > 1e-9 * total.max(1.0) {
        return None;
    }
    if !closed {
        pts.push(end);
    }
    Some(pts)
}

/// Index orderings that describe the same element: identity and reversal
/// for open elements; every cyclic shift in both directions for closed
/// ones.
pub fn equivalent_permutations(n: usize, closed: bool) -> Vec<Vec<usize>> {
    if !closed {
        return vec![(0..n).collect(), (0..n).rev().collect()];
    }
    let mut out = Vec::with_capacity(2 * n);
    for s in 0..n {
        out.push((0..n).map(|j| (s + j) % n).collect());
    }
    for s in 0..n {
        out.push((0..n).map(|j| (s + n - j) % n).collect());
    }
    out
}

pub fn polyline_length(points: &[Point], closed: bool) -> f64 {
    let mut len: f64 = points.windows(2).map(|w| dist(w[0], w[1])).sum();
    if closed && points.len() > 2 {
        len += dist(points[points.len() - 1], points[0]);
    }
    len
}

/// Distance from `p` to segment `ab`.
pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist(p, [a[0] + t * dx, a[1] + t * dy])
}

/// One binary mask per class, each `h * w` cells in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMasks {
    pub h: usize,
    pub w: usize,
    pub masks: [Vec<u8>; NUM_CLASSES],
}

impl ClassMasks {
    pub fn count(&self, class: ClassId) -> usize {
        self.masks[class.index()].iter().filter(|&&v| v != 0).count()
    }

    /// Cell-major `[h * w, classes]` layout matching BEV feature rows.
    pub fn cell_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.h * self.w * NUM_CLASSES);
        for i in 0..self.h * self.w {
            for m in &self.masks {
                out.push(f64::from(m[i]));
            }
        }
        out
    }
}

/// A cell is set when some segment of the element (closing edge included
/// for closed elements) passes within half a cell diagonal of its center.
pub fn rasterize(elements: &[MapElement], grid: &Grid) -> ClassMasks {
    let mut masks: [Vec<u8>; NUM_CLASSES] = std::array::from_fn(|_| vec![0; grid.cells()]);
    let (cw, ch) = grid.cell_size();
    let radius = 0.5 * cw.hypot(ch);
    let r = &grid.range;
    for el in elements {
        let mask = &mut masks[el.class.index()];
        let pts = &el.points;
        let segs: Vec<(Point, Point)> = if pts.len() == 1 {
            vec![(pts[0], pts[0])]
        } else {
            el.edges().into_iter().map(|(a, b)| (pts[a], pts[b])).collect()
        };
        for (a, b) in segs {
            let col_of = |x: f64| ((x - r.x_min) / cw).floor();
            let row_of = |y: f64| ((y - r.y_min) / ch).floor();
            let c0 = col_of(a[0].min(b[0]) - radius).max(0.0) as usize;
            let c1 = (col_of(a[0].max(b[0]) + radius).max(0.0) as usize).min(grid.w - 1);
            let r0 = row_of(a[1].min(b[1]) - radius).max(0.0) as usize;
            let r1 = (row_of(a[1].max(b[1]) + radius).max(0.0) as usize).min(grid.h - 1);
            for row in r0..=r1 {
                for col in c0..=c1 {
                    if point_segment_distance(grid.center(row, col), a, b) <= radius {
                        mask[row * grid.w + col] = 1;
                    }
                }
            }
        }
    }
    ClassMasks {
        h: grid.h,
        w: grid.w,
        masks,
    }
}

/// Pinhole camera; `r` and `t` map world to camera coordinates
/// (`x_cam = R x_world + t`), with camera x right, y down, z forward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub width: usize,
    pub height: usize,
}

/// Minimum camera-frame depth for a valid projection.
pub const MIN_DEPTH: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || self.width == 0 || self.height == 0 {
            return Err(geometry("camera needs positive focal lengths and image size"));
        }
        let r = &self.r;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[3 * i + k] * r[3 * j + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err(geometry("camera rotation is not orthonormal"));
                }
            }
        }
        Ok(())
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.r;
        std::array::from_fn(|i| r[3 * i] * p[0] + r[3 * i + 1] * p[1] + r[3 * i + 2] * p[2] + self.t[i])
    }

    /// Projects a camera-frame point.
    pub fn project_camera(&self, c: [f64; 3]) -> Projection {
        let depth = c[2];
        if depth <= MIN_DEPTH {
            return Projection {
                u: f64::NAN,
                v: f64::NAN,
                depth,
                valid: false,
            };
        }
        let u = self.fx * c[0] / depth + self.cx;
        let v = self.fy * c[1] / depth + self.cy;
        let valid = u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64;
        Projection { u, v, depth, valid }
    }

    pub fn project(&self, p: [f64; 3]) -> Projection {
        self.project_camera(self.to_camera(p))
    }

    /// Pitched pinhole looking along `+y` (`forward = true`) or `-y`,
    /// placed at `center` and tilted down by `pitch` radians.
    pub fn looking(forward: bool, center: [f64; 3], pitch: f64, width: usize, height: usize, focal: f64) -> Self {
        let s = if forward { 1.0 } else { -1.0 };
        let (sp, cp) = pitch.sin_cos();
        let right = [s, 0.0, 0.0];
        let down = [0.0, -s * sp, -cp];
        let fwd = [0.0, s * cp, -sp];
        let r = [
            right[0], right[1], right[2], down[0], down[1], down[2], fwd[0], fwd[1], fwd[2],
        ];
        let t = std::array::from_fn(|i| -(r[3 * i] * center[0] + r[3 * i + 1] * center[1] + r[3 * i + 2] * center[2]));
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            r,
            t,
            width,
            height,
        }
    }
}

/// Front and rear cameras at 128x64 pixels with a 90 degree horizontal
/// field of view.
pub fn default_rig() -> Vec<Camera> {
    vec![
        Camera::looking(true, [0.0, -5.0, 12.0], 0.7, 128, 64, 64.0),
        Camera::looking(false, [0.0, 5.0, 12.0], 0.7, 128, 64, 64.0),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub bev_range: BevRange,
    pub elements: Vec<MapElement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cameras: Option<Vec<Camera>>,
}

impl Scene {
    pub fn empty(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            bev_range: BevRange::default(),
            elements: Vec::new(),
            cameras: None,
        }
    }

    /// Element points mapped onto the unit square.
    pub fn normalized_elements(&self) -> Result<Vec<Vec<Point>>> {
        self.elements
            .iter()
            .map(|e| e.points.iter().map(|&p| self.bev_range.normalize(p)).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn segment_resamples_to_unit_steps() {
        let pts = resample(&[[0.0, 0.0], [0.0, 19.0]], 20, false).unwrap();
        for (k, p) in pts.iter().enumerate() {
            assert!((p[1] - k as f64).abs() < 1e-12 && p[0] == 0.0);
        }
    }

    #[test]
    fn closed_square_keeps_perimeter() {
        let sq = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let pts = resample(&sq, 4, true).unwrap();
        let want: f64 = polyline_length(&sq, true);
        assert!((polyline_length(&pts, true) - want).abs() < 1e-9);
        for (p, q) in pts.iter().zip(&sq) {
            assert!(dist(*p, *q) < 1e-12);
        }
    }

    #[test]
    fn two_points_are_endpoints() {
        let pts = resample(&[[1.0, 2.0], [3.0, -1.0], [5.0, 7.0]], 2, false).unwrap();
        assert_eq!(pts, vec![[1.0, 2.0], [5.0, 7.0]]);
    }

    #[test]
    fn degenerate_input_errors() {
        assert!(resample(&[[1.0, 1.0], [1.0, 1.0]], 5, false).is_err());
        assert!(resample(&[[1.0, 1.0]], 5, false).is_err());
        assert!(resample(&[[f64::NAN, 1.0], [2.0, 2.0]], 5, false).is_err());
    }

    #[test]
    fn open_permutations() {
        assert_eq!(equivalent_permutations(3, false), vec![vec![0, 1, 2], vec![2, 1, 0]]);
    }

    #[test]
    fn closed_permutations_are_distinct() {
        let p = equivalent_permutations(3, true);
        assert_eq!(p.len(), 6);
        let set: std::collections::BTreeSet<_> = p.iter().cloned().collect();
        assert_eq!(set.len(), 6);
    }

    #[test]
    fn closed_permutations_invert_to_identity() {
        let perms = equivalent_permutations(20, true);
        assert_eq!(perms.len(), 40);
        for p in &perms {
            let mut inv = vec![0; 20];
            for (i, &j) in p.iter().enumerate() {
                inv[j] = i;
            }
            let comp: Vec<usize> = (0..20).map(|i| p[inv[i]]).collect();
            assert_eq!(comp, (0..20).collect::<Vec<_>>());
            assert!(perms.contains(&inv), "inverse stays in the class");
        }
    }

    #[test]
    fn normalize_endpoints_and_center() {
        let r = BevRange::default();
        assert_eq!(r.normalize([-15.0, 0.0]).unwrap()[0], 0.0);
        assert_eq!(r.normalize([15.0, 0.0]).unwrap()[0], 1.0);
        assert_eq!(r.normalize([0.0, 0.0]).unwrap(), [0.5, 0.5]);
        assert!(r.normalize([15.5, 0.0]).is_err());
    }

    #[test]
    fn empty_scene_rasterizes_to_zero() {
        let g = Grid::new(8, 4, BevRange::default()).unwrap();
        let m = rasterize(&[], &g);
        assert!(m.masks.iter().all(|m| m.iter().all(|&v| v == 0)));
    }

    #[test]
    fn vertical_divider_through_cell_centers() {
        let g = Grid::new(64, 32, BevRange::default()).unwrap();
        let x = g.center(0, 11)[0];
        let el = MapElement::from_raw(ClassId::Divider, false, &[[x, -30.0], [x, 30.0]], 20, &g.range).unwrap();
        let m = rasterize(std::slice::from_ref(&el), &g);
        // Line traversal oracle: exactly one cell per row, in column 11.
        let mut expected = vec![0u8; g.cells()];
        for row in 0..g.h {
            expected[row * g.w + 11] = 1;
        }
        assert_eq!(m.masks[0], expected);
        assert_eq!(m.count(ClassId::Divider), g.h);
        assert_eq!(m.count(ClassId::Boundary), 0);
        assert_eq!(m, rasterize(&[el], &g));
    }

    #[test]
    fn grid_centers() {
        let one = Grid::new(1, 1, BevRange::default()).unwrap();
        assert_eq!(one.center(0, 0), [0.0, 0.0]);
        let r = BevRange {
            x_min: -1.0,
            x_max: 1.0,
            y_min: -1.0,
            y_max: 1.0,
        };
        let g = Grid::new(2, 2, r).unwrap();
        assert_eq!(g.centers(), vec![[-0.5, -0.5], [0.5, -0.5], [-0.5, 0.5], [0.5, 0.5]]);
    }

    #[test]
    fn projection_examples() {
        let cam = Camera {
            fx: 100.0,
            fy: 100.0,
            cx: 64.0,
            cy: 32.0,
            r: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            t: [0.0; 3],
            width: 128,
            height: 64,
        };
        cam.validate().unwrap();
        let p = cam.project([0.0, 0.0, 5.0]);
        assert!(p.valid && p.u == 64.0 && p.v == 32.0);
        let p = cam.project([1.0, 0.0, 5.0]);
        assert!(p.valid && (p.u - 84.0).abs() < 1e-12 && p.v == 32.0);
        assert!(!cam.project([0.0, 0.0, 0.0]).valid);
    }

    #[test]
    fn default_rig_is_valid_and_sees_ahead_and_behind() {
        let rig = default_rig();
        for c in &rig {
            c.validate().unwrap();
        }
        assert!(rig[0].project([0.0, 15.0, 0.0]).valid);
        assert!(!rig[0].project([0.0, -15.0, 0.0]).valid);
        assert!(rig[1].project([0.0, -15.0, 0.0]).valid);
    }

    /// Road-like shapes without acute vertices: open polylines advancing in
    /// y with turns below 90 degrees, and convex polygons inscribed in a
    /// moderate ellipse. At acute vertices a common chord may not exist and
    /// resampling falls back to plain arc-length spacing.
    fn arb_shape() -> impl Strategy<Value = (Vec<Point>, bool)> {
        let open = (-10.0..10.0f64, prop::collection::vec((-1.0..1.0f64, 0.5..8.0f64), 1..12)).prop_map(|(x0, steps)| {
            let (mut x, mut y) = (x0, -30.0);
            let mut pts = vec![[x, y]];
            for (slope, dy) in steps {
                x = (x + slope * dy * 0.9).clamp(-15.0, 15.0);
                y += dy;
                pts.push([x, y]);
            }
            (pts, false)
        });
        let closed = (3.0..12.0f64, 0.6..1.7f64, prop::collection::vec(-0.1..0.1f64, 24..40)).prop_map(|(ax, aspect, jitter)| {
            let ay = ax * aspect;
            let m = jitter.len() as f64;
            let pts = jitter
                .iter()
                .enumerate()
                .map(|(k, j)| {
                    let a = (k as f64 + j) / m * std::f64::consts::TAU;
                    [ax * a.cos(), ay * a.sin()]
                })
                .collect();
            (pts, true)
        });
        prop_oneof![open, closed]
    }

    proptest! {
        #[test]
        fn resample_is_idempotent((raw, closed) in arb_shape(), n in 10usize..30) {
            prop_assume!(raw.len() >= 2 && polyline_length(&raw, closed) > 1e-3);
            if closed {
                let span = |k: usize| {
                    let (lo, hi) = raw.iter().fold((f64::MAX, f64::MIN), |(l, h), p| (l.min(p[k]), h.max(p[k])));
                    hi - lo
                };
                // Chords must stay shorter than the shape is wide.
                prop_assume!(polyline_length(&raw, true) / (n as f64) < 0.5 * span(0).min(span(1)));
            }
            let once = resample(&raw, n, closed).unwrap();
            let twice = resample(&once, n, closed).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!(dist(*a, *b) < 1e-9, "{a:?} vs {b:?}");
            }
        }

        #[test]
        fn permutation_counts(n in 3usize..40) {
            prop_assert_eq!(equivalent_permutations(n, false).len(), 2);
            prop_assert_eq!(equivalent_permutations(n, true).len(), 2 * n);
        }

        #[test]
        fn normalize_round_trip(x in -15.0..=15.0f64, y in -30.0..=30.0f64) {
            let r = BevRange::default();
            let u = r.normalize([x, y]).unwrap();
            prop_assert!((0.0..=1.0).contains(&u[0]) && (0.0..=1.0).contains(&u[1]));
            let back = r.denormalize(u);
            prop_assert!((back[0] - x).abs() < 1e-9 && (back[1] - y).abs() < 1e-9);
        }

        #[test]
        fn projection_validity_monotone_in_depth(x in -2.0..2.0f64, y in -1.0..1.0f64, d in 0.0..3.0f64, s in 0.0..1.0f64) {
            let cam = default_rig().remove(0);
            let far = cam.project_camera([x * d, y * d, d]);
            let near = cam.project_camera([x * d * s, y * d * s, d * s]);
            if far.depth <= MIN_DEPTH {
                prop_assert!(!near.valid);
            }
        }
    }
}
