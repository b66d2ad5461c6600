//! Bird's-eye-view geometry: rotated rectangles, SE(2) poses, convex clipping,
//! IoU and non-maximum suppression.

use std::cmp::Ordering;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Intersections smaller than this (m²) count as no overlap.
pub const MIN_INTERSECTION_AREA: f64 = 1e-12;

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Planar rigid transform of a frame expressed in a parent frame:
/// `parent = R(yaw) * local + (x, y)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Pose {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    pub fn identity() -> Self {
        Pose::default()
    }

    pub fn apply(&self, p: Point) -> Point {
        let (s, c) = self.yaw.sin_cos();
        [c * p[0] - s * p[1] + self.x, s * p[0] + c * p[1] + self.y]
    }

    pub fn inverse(&self) -> Pose {
        let (s, c) = self.yaw.sin_cos();
        Pose::new(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.yaw)
    }

    /// `self ∘ other`: first `other`, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let [x, y] = self.apply([other.x, other.y]);
        Pose::new(x, y, self.yaw + other.yaw)
    }

    /// Transform taking coordinates in the frame at `self` to the frame at
    /// `target` (both poses given in the same parent frame).
    pub fn relative_to(&self, target: &Pose) -> Pose {
        target.inverse().compose(self)
    }
}

/// Rotated rectangle in BEV. At `theta = 0` the `w` side spans x and the
/// `h` side spans y; `theta` rotates counter-clockwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotatedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl RotatedBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || ![cx, cy, w, h, theta].iter().all(|v| v.is_finite()) {
            return Err(Error::Config(format!(
                "invalid box ({cx}, {cy}, {w}, {h}, {theta}): sizes must be positive and finite"
            )));
        }
        Ok(RotatedBox {
            cx,
            cy,
            w,
            h,
            theta: normalize_angle(theta),
        })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> Point {
        [self.cx, self.cy]
    }

    /// Unit vector along the `h` (longitudinal) side.
    pub fn longitudinal(&self) -> Point {
        let (s, c) = self.theta.sin_cos();
        [-s, c]
    }

    pub fn corners(&self) -> ConvexPolygon {
        let (s, c) = self.theta.sin_cos();
        let (hw, hh) = (0.5 * self.w, 0.5 * self.h);
        let pts = [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
            .map(|(u, v)| [self.cx + c * u - s * v, self.cy + s * u + c * v]);
        ConvexPolygon { vertices: pts.to_vec() }
    }

    pub fn contains(&self, p: Point) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (p[0] - self.cx, p[1] - self.cy);
        (c * dx + s * dy).abs() <= 0.5 * self.w && (-s * dx + c * dy).abs() <= 0.5 * self.h
    }

    /// Re-expresses the box through a rigid transform.
    pub fn transformed(&self, pose: &Pose) -> RotatedBox {
        let [cx, cy] = pose.apply([self.cx, self.cy]);
        RotatedBox {
            cx,
            cy,
            w: self.w,
            h: self.h,
            theta: normalize_angle(self.theta + pose.yaw),
        }
    }

    fn circumradius(&self) -> f64 {
        0.5 * self.w.hypot(self.h)
    }

    fn key(&self) -> [f64; 5] {
        [self.cx, self.cy, self.theta, self.w, self.h]
    }
}

fn cmp_keys(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Convex polygon with counter-clockwise vertices, or empty.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConvexPolygon {
    vertices: Vec<Point>,
}

impl ConvexPolygon {
    /// Builds a polygon from counter-clockwise vertices of a convex shape,
    /// dropping repeated and collinear vertices. Degenerate input yields the
    /// empty polygon.
    pub fn from_ccw(points: &[Point]) -> Self {
        const EPS: f64 = 1e-12;
        let mut pts: Vec<Point> = Vec::with_capacity(points.len());
        for &p in points {
            if pts
                .last()
                .map_or(true, |q: &Point| (p[0] - q[0]).hypot(p[1] - q[1]) > EPS)
            {
                pts.push(p);
            }
        }
        while pts.len() > 1 {
            let (f, l) = (pts[0], pts[pts.len() - 1]);
            if (f[0] - l[0]).hypot(f[1] - l[1]) > EPS {
                break;
            }
            pts.pop();
        }
        let mut changed = true;
        while changed && pts.len() >= 3 {
            changed = false;
            let n = pts.len();
            for i in 0..n {
                let (a, b, c) = (pts[(i + n - 1) % n], pts[i], pts[(i + 1) % n]);
                if cross(a, b, c).abs() <= EPS * (1.0 + (c[0] - a[0]).hypot(c[1] - a[1])) {
                    pts.remove(i);
                    changed = true;
                    break;
                }
            }
        }
        if pts.len() < 3 {
            return ConvexPolygon::default();
        }
        let poly = ConvexPolygon { vertices: pts };
        if poly.signed_area() <= 0.0 {
            return ConvexPolygon::default();
        }
        poly
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (p, q) = (self.vertices[i], self.vertices[(i + 1) % n]);
            acc += p[0] * q[1] - q[0] * p[1];
        }
        0.5 * acc
    }

    pub fn area(&self) -> f64 {
        if self.vertices.len() < 3 {
            0.0
        } else {
            self.signed_area().max(0.0)
        }
    }

    pub fn centroid(&self) -> Point {
        let n = self.vertices.len() as f64;
        let s = self.vertices.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
        [s[0] / n, s[1] / n]
    }

    /// Sutherland-Hodgman intersection of two convex polygons.
    pub fn clip(&self, clip: &ConvexPolygon) -> ConvexPolygon {
        if self.is_empty() || clip.is_empty() {
            return ConvexPolygon::default();
        }
        let mut output = self.vertices.clone();
        let m = clip.vertices.len();
        for i in 0..m {
            if output.is_empty() {
                break;
            }
            let (a, b) = (clip.vertices[i], clip.vertices[(i + 1) % m]);
            let input = std::mem::take(&mut output);
            let n = input.len();
            for j in 0..n {
                let cur = input[j];
                let prev = input[(j + n - 1) % n];
                let (dc, dp) = (cross(a, b, cur), cross(a, b, prev));
                if dc >= 0.0 {
                    if dp < 0.0 {
                        output.push(segment_line(prev, cur, dp, dc));
                    }
                    output.push(cur);
                } else if dp >= 0.0 {
                    output.push(segment_line(prev, cur, dp, dc));
                }
            }
        }
        ConvexPolygon::from_ccw(&output)
    }
}

/// Point on segment `p -> q` where the signed edge distance crosses zero.
fn segment_line(p: Point, q: Point, dp: f64, dq: f64) -> Point {
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

pub fn corners(b: &RotatedBox) -> ConvexPolygon {
    b.corners()
}

pub fn clip(subject: &ConvexPolygon, clip: &ConvexPolygon) -> ConvexPolygon {
    subject.clip(clip)
}

pub fn intersection_area(a: &RotatedBox, b: &RotatedBox) -> f64 {
    let (dx, dy) = (a.cx - b.cx, a.cy - b.cy);
    if dx.hypot(dy) > a.circumradius() + b.circumradius() {
        return 0.0;
    }
    // evaluate in a canonical order so that iou(a, b) == iou(b, a) bitwise
    let (p, q) = if cmp_keys(&a.key(), &b.key()).is_le() {
        (a, b)
    } else {
        (b, a)
    };
    let area = p.corners().clip(&q.corners()).area();
    if area < MIN_INTERSECTION_AREA {
        0.0
    } else {
        area
    }
}

pub fn iou(a: &RotatedBox, b: &RotatedBox) -> f64 {
    let inter = intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy non-maximum suppression. Returns indices of kept boxes, highest
/// score first. Equal scores are ordered by `(cx, cy, theta)`.
pub fn nms(dets: &[(RotatedBox, f64)], iou_thr: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        let (bi, si) = &dets[i];
        let (bj, sj) = &dets[j];
        sj.total_cmp(si)
            .then_with(|| cmp_keys(&bi.key(), &bj.key()))
            .then(i.cmp(&j))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&dets[k].0, &dets[i].0) < iou_thr) {
            kept.push(i);
        }
    }
    kept
}

/// Monte-Carlo IoU estimate and its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub iou: f64,
    pub std_err: f64,
}

/// Samples uniformly over the joint axis-aligned bounding region. Conditioned
/// on landing in the union, a sample falls in the intersection with
/// probability IoU, so the estimate is a binomial proportion.
pub fn mc_iou(a: &RotatedBox, b: &RotatedBox, samples: usize, seed: u64) -> McEstimate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<Point> = a
        .corners()
        .vertices
        .iter()
        .chain(b.corners().vertices.iter())
        .copied()
        .collect();
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in &pts {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    let (mut union, mut both) = (0usize, 0usize);
    for _ in 0..samples {
        let p = [rng.gen_range(x0..x1), rng.gen_range(y0..y1)];
        let (ia, ib) = (a.contains(p), b.contains(p));
        if ia || ib {
            union += 1;
        }
        if ia && ib {
            both += 1;
        }
    }
    if union == 0 {
        return McEstimate { iou: 0.0, std_err: 0.0 };
    }
    let p = both as f64 / union as f64;
    McEstimate {
        iou: p,
        std_err: (p * (1.0 - p) / union as f64).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn bx(cx: f64, cy: f64, w: f64, h: f64, t: f64) -> RotatedBox {
        RotatedBox::new(cx, cy, w, h, t).unwrap()
    }

    #[test]
    fn normalize_angle_range() {
        assert_eq!(normalize_angle(PI), PI);
        assert_abs_diff_eq!(normalize_angle(-PI), PI, epsilon = 1e-15);
        assert_abs_diff_eq!(normalize_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(normalize_angle(0.25), 0.25);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(RotatedBox::new(0.0, 0.0, 0.0, 1.0, 0.0).is_err());
        assert!(RotatedBox::new(0.0, 0.0, 1.0, -1.0, 0.0).is_err());
        assert!(RotatedBox::new(f64::NAN, 0.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn unit_square_corners() {
        let c = bx(0.0, 0.0, 1.0, 1.0, 0.0).corners();
        assert_eq!(c.vertices(), &[[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]]);
        assert!(c.signed_area() > 0.0);
    }

    #[test]
    fn quarter_turn_swaps_footprint() {
        let c = bx(0.0, 0.0, 2.0, 4.0, PI / 2.0).corners();
        let xs: Vec<f64> = c.vertices().iter().map(|p| p[0].abs()).collect();
        let ys: Vec<f64> = c.vertices().iter().map(|p| p[1].abs()).collect();
        for (x, y) in xs.iter().zip(&ys) {
            assert_abs_diff_eq!(*x, 2.0, epsilon = 1e-12);
            assert_abs_diff_eq!(*y, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn eighth_turn_corners_on_axes() {
        let c = bx(3.0, -1.0, 2.0, 2.0, PI / 4.0).corners();
        for p in c.vertices() {
            let (dx, dy) = (p[0] - 3.0, p[1] + 1.0);
            assert_abs_diff_eq!(dx.hypot(dy), 2f64.sqrt(), epsilon = 1e-12);
            assert!(dx.abs() < 1e-12 || dy.abs() < 1e-12);
        }
        let cen = c.centroid();
        assert_abs_diff_eq!(cen[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cen[1], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn clip_self_disjoint_and_offset() {
        let a = bx(0.0, 0.0, 2.0, 2.0, 0.3).corners();
        assert_abs_diff_eq!(a.clip(&a).area(), a.area(), epsilon = 1e-12);
        let far = bx(10.0, 0.0, 2.0, 2.0, 0.0).corners();
        assert!(a.clip(&far).is_empty());
        let s = bx(0.0, 0.0, 2.0, 2.0, 0.0).corners();
        let t = bx(1.0, 0.0, 2.0, 2.0, 0.0).corners();
        let i = s.clip(&t);
        assert_abs_diff_eq!(i.area(), 2.0, epsilon = 1e-12);
        let xs: Vec<f64> = i.vertices().iter().map(|p| p[0]).collect();
        assert_abs_diff_eq!(xs.iter().cloned().fold(f64::INFINITY, f64::min), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn analytic_iou_cases() {
        let a = bx(0.0, 0.0, 2.0, 2.0, 0.0);
        assert_abs_diff_eq!(iou(&a, &a), 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(iou(&a, &bx(1.0, 0.0, 2.0, 2.0, 0.0)), 1.0 / 3.0, epsilon = 1e-9);
        // octagon: square minus four corner triangles with legs 2 - sqrt(2)
        let leg = 2.0 - 2f64.sqrt();
        let inter = 4.0 - 2.0 * leg * leg;
        let expected = inter / (8.0 - inter);
        assert_abs_diff_eq!(expected, 0.7071, epsilon = 1e-4);
        assert_abs_diff_eq!(iou(&a, &bx(0.0, 0.0, 2.0, 2.0, PI / 4.0)), expected, epsilon = 1e-12);
    }

    #[test]
    fn edge_touching_boxes_have_zero_iou() {
        let a = bx(0.0, 0.0, 2.0, 2.0, 0.0);
        let b = bx(2.0, 0.0, 2.0, 2.0, 0.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn mc_iou_matches_one_third() {
        let a = bx(0.0, 0.0, 2.0, 2.0, 0.0);
        let b = bx(1.0, 0.0, 2.0, 2.0, 0.0);
        let est = mc_iou(&a, &b, 200_000, 7);
        assert!((est.iou - 1.0 / 3.0).abs() < 3.0 * est.std_err, "{est:?}");
        assert_eq!(mc_iou(&a, &a, 1000, 1).iou, 1.0);
        assert_eq!(mc_iou(&a, &bx(9.0, 9.0, 1.0, 1.0, 0.0), 1000, 1).iou, 0.0);
    }

    #[test]
    fn nms_single_and_duplicates() {
        let a = bx(0.0, 0.0, 2.0, 4.0, 0.0);
        assert_eq!(nms(&[(a, 0.3)], 0.1), vec![0]);
        assert_eq!(nms(&[(a, 0.3), (a, 0.8)], 0.1), vec![1]);
    }

    #[test]
    fn nms_tie_breaks_by_position() {
        let a = bx(1.0, 0.0, 2.0, 2.0, 0.0);
        let b = bx(0.5, 0.0, 2.0, 2.0, 0.0);
        assert_eq!(nms(&[(a, 0.5), (b, 0.5)], 0.1), vec![1]);
    }

    /// Greedy NMS outcome checked by brute force: the kept set is the unique
    /// subset that, walking boxes in score order, keeps a box iff it clears
    /// every previously kept box.
    #[test]
    fn nms_chain_matches_exhaustive() {
        // a overlaps b, b overlaps c, a and c disjoint: greedy keeps a and c.
        let dets = [
            (bx(0.0, 0.0, 2.0, 2.0, 0.0), 0.9),
            (bx(1.5, 0.0, 2.0, 2.0, 0.0), 0.8),
            (bx(3.0, 0.0, 2.0, 2.0, 0.0), 0.7),
        ];
        let thr = 0.1;
        let kept = nms(&dets, thr);
        let mut consistent = Vec::new();
        for mask in 0u32..8 {
            let set: Vec<usize> = (0..3).filter(|i| mask & (1 << i) != 0).collect();
            let ok = (0..3).all(|i| {
                let blocked = set.iter().any(|&k| k < i && iou(&dets[k].0, &dets[i].0) >= thr);
                set.contains(&i) == !blocked
            });
            if ok {
                consistent.push(set);
            }
        }
        assert_eq!(consistent, vec![vec![0, 2]]);
        assert_eq!(kept, vec![0, 2]);
    }

    #[test]
    fn pose_round_trip() {
        let p = Pose::new(1.0, -2.0, 0.7);
        let q = p.compose(&p.inverse());
        assert_abs_diff_eq!(q.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q.y, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q.yaw, 0.0, epsilon = 1e-12);
    }
}
