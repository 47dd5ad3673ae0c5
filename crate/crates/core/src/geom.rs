//! Run-length-encoded instance masks and the pixel geometry built on them.
//!
//! Masks index pixels in row-major order (`y * width + x`). Runs are kept
//! sorted and maximally merged, so two masks covering the same pixels always
//! compare equal.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("polygon needs at least 3 vertices, got {0}")]
    DegeneratePolygon(usize),
    #[error("mask is empty")]
    EmptyMask,
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("both masks are empty")]
    BothEmpty,
    #[error("invalid run list: {0}")]
    InvalidRuns(String),
    #[error("malformed RLE text: {0}")]
    Parse(String),
    #[error("bbox ({0},{1},{2},{3}) is invalid or outside the {4}x{5} image")]
    BBoxOutOfBounds(u32, u32, u32, u32, u32, u32),
}

/// Binary instance mask stored as `(start, len)` runs over row-major indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: u32,
    height: u32,
    runs: Vec<(u32, u32)>,
}

/// Appends runs in increasing order, merging touching ones.
struct RunBuilder {
    runs: Vec<(u32, u32)>,
}

impl RunBuilder {
    fn new() -> Self {
        Self { runs: Vec::new() }
    }

    fn push(&mut self, start: u32, len: u32) {
        if len == 0 {
            return;
        }
        if let Some(last) = self.runs.last_mut() {
            if last.0 + last.1 == start {
                last.1 += len;
                return;
            }
        }
        self.runs.push((start, len));
    }
}

impl Mask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self { width, height, runs: Vec::new() }
    }

    /// Build from runs that are sorted and non-overlapping. Touching runs are
    /// merged; zero-length runs are dropped.
    pub fn from_runs(width: u32, height: u32, runs: &[(u32, u32)]) -> Result<Self, GeomError> {
        let total = u64::from(width) * u64::from(height);
        let mut builder = RunBuilder::new();
        let mut prev_end = 0u64;
        for (i, &(start, len)) in runs.iter().enumerate() {
            let end = u64::from(start) + u64::from(len);
            if end > total {
                return Err(GeomError::InvalidRuns(format!("run {i} ends at {end} > {total}")));
            }
            if i > 0 && u64::from(start) < prev_end {
                return Err(GeomError::InvalidRuns(format!("run {i} overlaps or is out of order")));
            }
            prev_end = end;
            builder.push(start, len);
        }
        Ok(Self { width, height, runs: builder.runs })
    }

    pub fn from_bitmap(width: u32, height: u32, bits: &[bool]) -> Self {
        assert_eq!(bits.len(), width as usize * height as usize, "bitmap size");
        let mut builder = RunBuilder::new();
        let mut i = 0usize;
        while i < bits.len() {
            if bits[i] {
                let start = i;
                while i < bits.len() && bits[i] {
                    i += 1;
                }
                builder.push(start as u32, (i - start) as u32);
            } else {
                i += 1;
            }
        }
        Self { width, height, runs: builder.runs }
    }

    /// Axis-aligned half-open rectangle, clipped to the image.
    pub fn from_rect(width: u32, height: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        let (x1, y1) = (x1.min(width), y1.min(height));
        let mut builder = RunBuilder::new();
        if x0 < x1 {
            for y in y0..y1 {
                builder.push(y * width + x0, x1 - x0);
            }
        }
        Self { width, height, runs: builder.runs }
    }

    /// Build from horizontal spans `(y, x_start, x_end)` given in row-major
    /// order; spans must not overlap.
    pub fn from_spans(width: u32, height: u32, spans: impl IntoIterator<Item = (u32, u32, u32)>) -> Self {
        let mut builder = RunBuilder::new();
        for (y, a, b) in spans {
            debug_assert!(y < height && a <= b && b <= width);
            builder.push(y * width + a, b - a);
        }
        Self { width, height, runs: builder.runs }
    }

    pub fn to_bitmap(&self) -> Vec<bool> {
        let mut bits = vec![false; self.width as usize * self.height as usize];
        for &(s, l) in &self.runs {
            bits[s as usize..(s + l) as usize].fill(true);
        }
        bits
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn runs(&self) -> &[(u32, u32)] {
        &self.runs
    }

    pub fn area(&self) -> u64 {
        self.runs.iter().map(|&(_, l)| u64::from(l)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        if x >= self.width || y >= self.height {
            return false;
        }
        let idx = y * self.width + x;
        match self.runs.binary_search_by(|&(s, _)| s.cmp(&idx)) {
            Ok(_) => true,
            Err(0) => false,
            Err(pos) => {
                let (s, l) = self.runs[pos - 1];
                idx < s + l
            }
        }
    }

    /// Horizontal spans `(y, x_start, x_end)` with `x_end` exclusive, in
    /// row-major order. A run wrapping a row boundary yields one span per row.
    pub fn row_spans(&self) -> impl Iterator<Item = (u32, u32, u32)> + '_ {
        let w = self.width;
        self.runs.iter().flat_map(move |&(s, l)| {
            let end = s + l;
            let first_row = s / w;
            let last_row = (end - 1) / w;
            (first_row..=last_row).map(move |y| {
                let row_start = y * w;
                let a = s.max(row_start) - row_start;
                let b = end.min(row_start + w) - row_start;
                (y, a, b)
            })
        })
    }

    pub fn intersection_area(&self, other: &Mask) -> u64 {
        let (mut i, mut j) = (0, 0);
        let mut total = 0u64;
        while i < self.runs.len() && j < other.runs.len() {
            let (a0, al) = self.runs[i];
            let (b0, bl) = other.runs[j];
            let (a1, b1) = (a0 + al, b0 + bl);
            let lo = a0.max(b0);
            let hi = a1.min(b1);
            if hi > lo {
                total += u64::from(hi - lo);
            }
            if a1 <= b1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        total
    }

    /// Mask restricted to `bbox`, re-indexed into a `bbox.width() x bbox.height()` frame.
    pub fn crop(&self, bbox: &BBox) -> Result<Mask, GeomError> {
        bbox.check_within(self.width, self.height)?;
        let cw = bbox.width();
        let mut builder = RunBuilder::new();
        for (y, a, b) in self.row_spans() {
            if y < bbox.y0 || y >= bbox.y1 {
                continue;
            }
            let a = a.max(bbox.x0);
            let b = b.min(bbox.x1);
            if b > a {
                builder.push((y - bbox.y0) * cw + (a - bbox.x0), b - a);
            }
        }
        Ok(Mask { width: cw, height: bbox.height(), runs: builder.runs })
    }

    /// Pixels on the convex hull boundary candidates: leftmost and rightmost
    /// pixel of every occupied row.
    fn row_extremes(&self) -> Vec<(i64, i64)> {
        let mut pts: Vec<(i64, i64)> = Vec::new();
        let mut current: Option<(u32, u32, u32)> = None;
        for (y, a, b) in self.row_spans() {
            current = match current {
                Some((cy, lo, hi)) if cy == y => Some((cy, lo.min(a), hi.max(b - 1))),
                Some((cy, lo, hi)) => {
                    pts.push((i64::from(lo), i64::from(cy)));
                    pts.push((i64::from(hi), i64::from(cy)));
                    Some((y, a, b - 1))
                }
                None => Some((y, a, b - 1)),
            };
        }
        if let Some((cy, lo, hi)) = current {
            pts.push((i64::from(lo), i64::from(cy)));
            pts.push((i64::from(hi), i64::from(cy)));
        }
        pts
    }
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Convex hull of integer points (Andrew's monotone chain), counter-clockwise
/// without collinear points.
fn convex_hull(mut pts: Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    pts.sort_unstable();
    pts.dedup();
    if pts.len() <= 2 {
        return pts;
    }
    // Andrew's monotone chain: lower hull, then upper hull
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(pts.len() * 2);
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Farthest pair of hull vertices by exact squared distance.
fn farthest_pair(hull: &[(i64, i64)]) -> ((i64, i64), (i64, i64), i64) {
    let mut best = (hull[0], hull[0], 0i64);
    for (i, &p) in hull.iter().enumerate() {
        for &q in &hull[i + 1..] {
            let d = (p.0 - q.0).pow(2) + (p.1 - q.1).pow(2);
            if d > best.2 {
                best = (p, q, d);
            }
        }
    }
    best
}

impl fmt::Display for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}:", self.width, self.height)?;
        for (i, (s, l)) in self.runs.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{s}+{l}")?;
        }
        Ok(())
    }
}

impl FromStr for Mask {
    type Err = GeomError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |what: &str| GeomError::Parse(format!("{what} in {s:?}"));
        let (dims, body) = s.split_once(':').ok_or_else(|| bad("missing ':'"))?;
        let (w, h) = dims.split_once('x').ok_or_else(|| bad("missing 'x'"))?;
        let width: u32 = w.trim().parse().map_err(|_| bad("bad width"))?;
        let height: u32 = h.trim().parse().map_err(|_| bad("bad height"))?;
        let mut runs = Vec::new();
        if !body.trim().is_empty() {
            for tok in body.split(',') {
                let (a, b) = tok.split_once('+').ok_or_else(|| bad("run without '+'"))?;
                let start: u32 = a.trim().parse().map_err(|_| bad("bad run start"))?;
                let len: u32 = b.trim().parse().map_err(|_| bad("bad run length"))?;
                if len == 0 {
                    return Err(bad("zero-length run"));
                }
                runs.push((start, len));
            }
        }
        let mask = Mask::from_runs(width, height, &runs)?;
        if mask.runs.len() != runs.len() {
            return Err(bad("runs not maximally merged"));
        }
        Ok(mask)
    }
}

impl Serialize for Mask {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Mask {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Half-open pixel box: covers `x0 <= x < x1`, `y0 <= y < y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    /// Longest side; a single pixel measures 1.
    pub fn major_side(&self) -> u32 {
        self.width().max(self.height())
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (f64::from(self.x0) + f64::from(self.x1)) / 2.0,
            (f64::from(self.y0) + f64::from(self.y1)) / 2.0,
        )
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    pub fn check_within(&self, width: u32, height: u32) -> Result<(), GeomError> {
        if self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height {
            Ok(())
        } else {
            Err(GeomError::BBoxOutOfBounds(self.x0, self.y0, self.x1, self.y1, width, height))
        }
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        [self.x0, self.y0, self.x1, self.y1].serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let [x0, y0, x1, y1] = <[u32; 4]>::deserialize(deserializer)?;
        if x0 >= x1 || y0 >= y1 {
            return Err(serde::de::Error::custom("bbox must satisfy x0 < x1 and y0 < y1"));
        }
        Ok(BBox { x0, y0, x1, y1 })
    }
}

/// Rasterize a polygon: a pixel is set when its center lies inside under the
/// even-odd rule. Points exactly on a right-hand or upper crossing are outside.
pub fn mask_from_polygon(polygon: &[(f64, f64)], width: u32, height: u32) -> Result<Mask, GeomError> {
    if polygon.len() < 3 {
        return Err(GeomError::DegeneratePolygon(polygon.len()));
    }
    let (ymin, ymax) = polygon
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    let row_lo = (ymin - 0.5).floor().max(0.0) as u32;
    let row_hi = ((ymax - 0.5).ceil() + 1.0).clamp(0.0, f64::from(height)) as u32;
    let mut builder = RunBuilder::new();
    let mut crossings: Vec<f64> = Vec::new();
    for y in row_lo..row_hi {
        let yc = f64::from(y) + 0.5;
        crossings.clear();
        let mut j = polygon.len() - 1;
        for i in 0..polygon.len() {
            let (xi, yi) = polygon[i];
            let (xj, yj) = polygon[j];
            if (yi > yc) != (yj > yc) {
                crossings.push((xj - xi) * (yc - yi) / (yj - yi) + xi);
            }
            j = i;
        }
        crossings.sort_by(f64::total_cmp);
        for pair in crossings.chunks_exact(2) {
            // centers with a <= x + 0.5 < b
            let lo = (pair[0] - 0.5).ceil().max(0.0);
            let hi = (pair[1] - 0.5).ceil().min(f64::from(width));
            if hi > lo {
                let (lo, hi) = (lo as u32, hi as u32);
                builder.push(y * width + lo, hi - lo);
            }
        }
    }
    if builder.runs.is_empty() {
        return Err(GeomError::EmptyMask);
    }
    Ok(Mask { width, height, runs: builder.runs })
}

/// Intersection over union of two same-sized masks.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64, GeomError> {
    if a.width != b.width || a.height != b.height {
        return Err(GeomError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return Err(GeomError::BothEmpty);
    }
    Ok(inter as f64 / union as f64)
}

/// Tightest half-open box around the mask.
pub fn mask_bbox(mask: &Mask) -> Result<BBox, GeomError> {
    let first = mask.runs.first().ok_or(GeomError::EmptyMask)?;
    let last = mask.runs.last().expect("non-empty");
    let w = mask.width;
    let y0 = first.0 / w;
    let y1 = (last.0 + last.1 - 1) / w + 1;
    let (mut x0, mut x1) = (u32::MAX, 0u32);
    for (_, a, b) in mask.row_spans() {
        x0 = x0.min(a);
        x1 = x1.max(b);
    }
    Ok(BBox { x0, y0, x1, y1 })
}

/// Maximum distance between two pixel centers of the mask plus one pixel of
/// extent, so a single pixel measures 1.
pub fn mask_principal_length(mask: &Mask) -> Result<f64, GeomError> {
    if mask.is_empty() {
        return Err(GeomError::EmptyMask);
    }
    let hull = convex_hull(mask.row_extremes());
    let (_, _, d2) = farthest_pair(&hull);
    Ok((d2 as f64).sqrt() + 1.0)
}

/// Extent of the mask perpendicular to its principal axis, with the same
/// one-pixel convention as [`mask_principal_length`].
pub fn mask_orthogonal_extent(mask: &Mask) -> Result<f64, GeomError> {
    if mask.is_empty() {
        return Err(GeomError::EmptyMask);
    }
    let hull = convex_hull(mask.row_extremes());
    let (p, q, d2) = farthest_pair(&hull);
    if d2 == 0 {
        return Ok(1.0);
    }
    let len = (d2 as f64).sqrt();
    let (nx, ny) = (-((q.1 - p.1) as f64) / len, (q.0 - p.0) as f64 / len);
    let (lo, hi) = hull.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(x, y)| {
        let t = x as f64 * nx + y as f64 * ny;
        (lo.min(t), hi.max(t))
    });
    Ok(hi - lo + 1.0)
}
