//! Contour mathematics: ellipse initialization, sub-contour partitioning,
//! ground-truth resampling and alignment, adjacent-point offsets, and a
//! rasterization-based polygon overlap oracle.
//!
//! Everything here is differentiation-free `f64` math on plain structs. The
//! tensor side of the model converts to/from these types at its boundary.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Minimum width/height of a sub-contour box, in normalized coordinates.
/// Flat arcs would otherwise produce zero-area attention regions.
pub const BOX_FLOOR: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    pub fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }

    pub fn dist(self, o: Point) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }

    pub fn l1(self, o: Point) -> f64 {
        (self.x - o.x).abs() + (self.y - o.y).abs()
    }
}

/// Axis-aligned box in center-size form, normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Tight axis-aligned bounds of a point set (no floor applied).
    pub fn tight(points: &[Point]) -> Self {
        let mut x0 = f64::INFINITY;
        let mut y0 = f64::INFINITY;
        let mut x1 = f64::NEG_INFINITY;
        let mut y1 = f64::NEG_INFINITY;
        for p in points {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        BBox::from_corners(x0, y0, x1, y1)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Generalized IoU, in [-1, 1].
    pub fn giou(&self, other: &BBox) -> f64 {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        let hull_w = ax1.max(bx1) - ax0.min(bx0);
        let hull_h = ay1.max(by1) - ay0.min(by0);
        let hull = hull_w * hull_h;
        let iou = if union <= 0.0 { 0.0 } else { inter / union };
        if hull <= 0.0 {
            iou
        } else {
            iou - (hull - union) / hull
        }
    }
}

/// Closed polygon of ordered boundary points.
///
/// After target preparation the winding order is clockwise in image
/// coordinates (y pointing down).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contour {
    pub points: Vec<Point>,
}

impl Contour {
    pub fn new(points: Vec<Point>) -> Self {
        Contour { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Shoelace signed area with raw (y-down) coordinates. Positive for a
    /// traversal that appears clockwise on screen.
    pub fn shoelace(&self) -> f64 {
        shoelace(&self.points)
    }

    pub fn is_clockwise(&self) -> bool {
        self.shoelace() >= 0.0
    }

    pub fn perimeter(&self) -> f64 {
        perimeter(&self.points)
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let (sx, sy) = self
            .points
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        Point::new(sx / n, sy / n)
    }

    pub fn translated(&self, d: Point) -> Contour {
        Contour::new(self.points.iter().map(|p| p.add(d)).collect())
    }

    pub fn bbox(&self) -> BBox {
        BBox::tight(&self.points)
    }
}

fn shoelace(points: &[Point]) -> f64 {
    let n = points.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = points[i];
        let b = points[(i + 1) % n];
        acc += a.x * b.y - b.x * a.y;
    }
    0.5 * acc
}

fn perimeter(points: &[Point]) -> f64 {
    let n = points.len();
    (0..n).map(|i| points[i].dist(points[(i + 1) % n])).sum()
}

/// Partition of a contour into consecutive arcs with their outer boxes.
#[derive(Debug, Clone)]
pub struct SubContourSet {
    pub arcs: Vec<Vec<Point>>,
    pub boxes: Vec<BBox>,
}

/// Sample `n_points` points of the inscribed ellipse of `bbox`, starting at
/// the top of the box and proceeding clockwise (image coordinates, y down).
pub fn init_contour_from_box(bbox: &BBox, n_points: usize) -> Result<Contour> {
    if bbox.w <= 0.0 || bbox.h <= 0.0 {
        return Err(Error::DegenerateBox {
            w: bbox.w,
            h: bbox.h,
        });
    }
    if n_points < 4 {
        return Err(Error::Config(format!(
            "ellipse init needs at least 4 points, got {n_points}"
        )));
    }
    let a = 0.5 * bbox.w;
    let b = 0.5 * bbox.h;
    let points = (0..n_points)
        .map(|k| {
            let theta = -std::f64::consts::FRAC_PI_2
                + 2.0 * std::f64::consts::PI * k as f64 / n_points as f64;
            Point::new(bbox.cx + a * theta.cos(), bbox.cy + b * theta.sin())
        })
        .collect();
    Ok(Contour::new(points))
}

/// Split a contour into `n_sub` consecutive arcs of equal point count.
pub fn partition_contour(contour: &Contour, n_sub: usize) -> Result<SubContourSet> {
    let nv = contour.len();
    if n_sub == 0 || nv % n_sub != 0 {
        return Err(Error::Config(format!(
            "n_sub={n_sub} does not divide Nv={nv}"
        )));
    }
    let ns = nv / n_sub;
    let mut arcs = Vec::with_capacity(n_sub);
    let mut boxes = Vec::with_capacity(n_sub);
    for j in 0..n_sub {
        let arc: Vec<Point> = contour.points[j * ns..(j + 1) * ns].to_vec();
        boxes.push(subcontour_box(&arc));
        arcs.push(arc);
    }
    Ok(SubContourSet { arcs, boxes })
}

/// Tightest axis-aligned box over an arc, with w and h floored at
/// [`BOX_FLOOR`] about the fixed center.
pub fn subcontour_box(arc: &[Point]) -> BBox {
    let tight = BBox::tight(arc);
    BBox {
        cx: tight.cx,
        cy: tight.cy,
        w: tight.w.max(BOX_FLOOR),
        h: tight.h.max(BOX_FLOOR),
    }
}

/// Resample a raw polygon to `n_points` at uniform arc-length spacing.
///
/// The result winds clockwise and starts at the topmost vertex of the input
/// (smallest y, ties broken by smaller x).
pub fn resample_polygon(raw: &[Point], n_points: usize) -> Result<Contour> {
    if raw.len() < 3 {
        return Err(Error::RejectedInstance(format!(
            "polygon has {} vertices, need at least 3",
            raw.len()
        )));
    }
    let total = perimeter(raw);
    if total < 1e-9 {
        return Err(Error::RejectedInstance(
            "near-zero perimeter polygon".into(),
        ));
    }

    // Force clockwise winding (y-down convention).
    let mut pts: Vec<Point> = raw.to_vec();
    if shoelace(&pts) < 0.0 {
        pts.reverse();
    }

    // Rotate so the topmost vertex comes first.
    let start = pts
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            (a.y, a.x)
                .partial_cmp(&(b.y, b.x))
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .map(|(i, _)| i)
        .unwrap();
    pts.rotate_left(start);

    // Cumulative arc length over the closed polyline.
    let n = pts.len();
    let mut cum = Vec::with_capacity(n + 1);
    cum.push(0.0);
    for i in 0..n {
        let d = pts[i].dist(pts[(i + 1) % n]);
        cum.push(cum[i] + d);
    }
    let total = cum[n];

    let mut out = Vec::with_capacity(n_points);
    let mut seg = 0usize;
    for k in 0..n_points {
        let target = total * k as f64 / n_points as f64;
        while seg + 1 < n && cum[seg + 1] < target {
            seg += 1;
        }
        let seg_len = cum[seg + 1] - cum[seg];
        let t = if seg_len > 0.0 {
            (target - cum[seg]) / seg_len
        } else {
            0.0
        };
        let a = pts[seg];
        let b = pts[(seg + 1) % n];
        out.push(Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)));
    }
    Ok(Contour::new(out))
}

/// Cyclic rotation of `target` minimizing summed L1 distance to `prediction`.
/// Orientation is never flipped. Returns the rotated contour.
pub fn align_start(target: &Contour, prediction: &Contour) -> Contour {
    let k = align_start_index(target, prediction);
    let mut pts = target.points.clone();
    pts.rotate_left(k);
    Contour::new(pts)
}

/// Rotation index chosen by [`align_start`] (smallest index on ties).
pub fn align_start_index(target: &Contour, prediction: &Contour) -> usize {
    assert_eq!(
        target.len(),
        prediction.len(),
        "align_start requires equal point counts"
    );
    let n = target.len();
    let mut best = (f64::INFINITY, 0usize);
    for k in 0..n {
        let cost: f64 = (0..n)
            .map(|i| target.points[(i + k) % n].l1(prediction.points[i]))
            .sum();
        if cost < best.0 {
            best = (cost, k);
        }
    }
    best.1
}

/// Offsets between adjacent points, with the closing wrap included:
/// `{v1-v0, v2-v1, ..., v0-v_{n-1}}`. Sums to zero for any closed contour.
pub fn adjacent_offsets(contour: &Contour) -> Vec<Point> {
    let n = contour.len();
    (0..n)
        .map(|i| contour.points[(i + 1) % n].sub(contour.points[i]))
        .collect()
}

/// Per-worker RNG seed derivation for concurrent dataset workers.
pub fn worker_seed(base_seed: u64, worker_index: u64) -> u64 {
    // splitmix64 over the pair keeps streams independent
    let mut z = base_seed
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(worker_index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Bit-mask rasterization of a polygon on a `grid`×`grid` lattice spanning
/// the rectangle `(x0, y0)..(x1, y1)`, even-odd fill rule, pixel centers.
pub struct RasterMask {
    pub grid: usize,
    words_per_row: usize,
    bits: Vec<u64>,
}

impl RasterMask {
    pub fn rasterize(poly: &[Point], grid: usize, x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        let words_per_row = grid.div_ceil(64);
        let mut bits = vec![0u64; words_per_row * grid];
        let n = poly.len();
        if n >= 3 && x1 > x0 && y1 > y0 {
            let sx = (x1 - x0) / grid as f64;
            let sy = (y1 - y0) / grid as f64;
            let mut xs: Vec<f64> = Vec::with_capacity(8);
            for row in 0..grid {
                let y = y0 + (row as f64 + 0.5) * sy;
                xs.clear();
                for i in 0..n {
                    let a = poly[i];
                    let b = poly[(i + 1) % n];
                    // half-open rule avoids double-counting shared vertices
                    if (a.y <= y && b.y > y) || (b.y <= y && a.y > y) {
                        let t = (y - a.y) / (b.y - a.y);
                        xs.push(a.x + t * (b.x - a.x));
                    }
                }
                xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
                let row_bits = &mut bits[row * words_per_row..(row + 1) * words_per_row];
                for pair in xs.chunks_exact(2) {
                    // columns whose center x0+(c+0.5)sx lies in [pair0, pair1)
                    let lo = ((pair[0] - x0) / sx - 0.5).ceil().max(0.0) as usize;
                    let hi = ((pair[1] - x0) / sx - 0.5).ceil().min(grid as f64) as usize;
                    for c in lo..hi {
                        row_bits[c / 64] |= 1u64 << (c % 64);
                    }
                }
            }
        }
        RasterMask {
            grid,
            words_per_row,
            bits,
        }
    }

    pub fn count(&self) -> u64 {
        self.bits.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn intersection_count(&self, other: &RasterMask) -> u64 {
        debug_assert_eq!(self.bits.len(), other.bits.len());
        self.bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| (a & b).count_ones() as u64)
            .sum()
    }

    pub fn union_count(&self, other: &RasterMask) -> u64 {
        self.bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| (a | b).count_ones() as u64)
            .sum()
    }

    pub fn iou(&self, other: &RasterMask) -> f64 {
        let union = self.union_count(other);
        if union == 0 {
            0.0
        } else {
            self.intersection_count(other) as f64 / union as f64
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.words_per_row + col / 64] >> (col % 64) & 1 == 1
    }
}

/// Joint bounding rectangle of two polygons, padded slightly so boundary
/// pixels are not clipped.
fn joint_bounds(a: &[Point], b: &[Point]) -> (f64, f64, f64, f64) {
    let mut x0 = f64::INFINITY;
    let mut y0 = f64::INFINITY;
    let mut x1 = f64::NEG_INFINITY;
    let mut y1 = f64::NEG_INFINITY;
    for p in a.iter().chain(b.iter()) {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    let pad = 1e-6 + 0.001 * ((x1 - x0).max(y1 - y0)).max(1e-3);
    (x0 - pad, y0 - pad, x1 + pad, y1 + pad)
}

/// Pixel-rasterization overlap oracle: |A ∩ B| / |A ∪ B| on a `grid`×`grid`
/// lattice over the joint bounds of the two polygons, even-odd fill.
pub fn polygon_iou_oracle(a: &[Point], b: &[Point], grid: usize) -> f64 {
    assert!(grid >= 64, "oracle grid must be at least 64");
    let (x0, y0, x1, y1) = joint_bounds(a, b);
    let ma = RasterMask::rasterize(a, grid, x0, y0, x1, y1);
    let mb = RasterMask::rasterize(b, grid, x0, y0, x1, y1);
    ma.iou(&mb)
}
