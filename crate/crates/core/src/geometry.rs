//! Oriented grasp rectangles and the polygon arithmetic behind the Jaccard index.
//!
//! Coordinates live in the image frame: x grows rightward, y grows downward,
//! angles are degrees measured from the x axis toward the y axis. A grasp
//! `{x, y, theta, h, w}` has its `w` edges parallel to the `theta` direction
//! (the gripper plates) and its `h` edges perpendicular to it. Grasps are
//! two-fold symmetric, so `theta` is kept in `[0, 180)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest extent (pixels) accepted for a rectangle edge.
pub const MIN_EXTENT: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid angle {0}: must be finite")]
    InvalidAngle(f64),
    #[error("non-finite coordinate in grasp or vertex data")]
    NonFinite,
    #[error("degenerate rectangle: h = {h}, w = {w}")]
    Degenerate { h: f64, w: f64 },
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
}

/// Reduces an angle in degrees to the canonical range `[0, 180)`.
pub fn canonicalize_angle(theta_deg: f64) -> Result<f64, GeometryError> {
    if !theta_deg.is_finite() {
        return Err(GeometryError::InvalidAngle(theta_deg));
    }
    Ok(wrap_180(theta_deg))
}

fn wrap_180(theta_deg: f64) -> f64 {
    let r = theta_deg.rem_euclid(180.0);
    // rem_euclid can round up to exactly 180 for tiny negative inputs.
    if r >= 180.0 {
        0.0
    } else {
        r
    }
}

/// Distance between two grasp orientations on the 180-degree circle, in `[0, 90]`.
pub fn angle_distance(a_deg: f64, b_deg: f64) -> f64 {
    let d = (a_deg - b_deg).abs().rem_euclid(180.0);
    d.min(180.0 - d).max(0.0)
}

/// `(sin 2θ, cos 2θ)`: an encoding of orientation that is continuous under the
/// 180-degree symmetry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleCode {
    pub s: f64,
    pub c: f64,
}

pub fn encode_angle(theta_deg: f64) -> AngleCode {
    let t = (2.0 * theta_deg).to_radians();
    AngleCode { s: t.sin(), c: t.cos() }
}

/// Inverse of [`encode_angle`]. Unnormalized codes are accepted; the zero
/// code decodes to 0 degrees.
pub fn decode_angle(code: AngleCode) -> f64 {
    if code.s == 0.0 && code.c == 0.0 {
        return 0.0;
    }
    if !code.s.is_finite() || !code.c.is_finite() {
        return 0.0;
    }
    wrap_180(0.5 * code.s.atan2(code.c).to_degrees())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }
}

/// A 5-D grasp rectangle. Construct through [`GraspRect::new`] to enforce
/// positive finite extents and the canonical angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspRect {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub h: f64,
    pub w: f64,
}

impl GraspRect {
    pub fn new(x: f64, y: f64, theta: f64, h: f64, w: f64) -> Result<Self, GeometryError> {
        if !(x.is_finite() && y.is_finite() && h.is_finite() && w.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let theta = canonicalize_angle(theta)?;
        if h <= MIN_EXTENT || w <= MIN_EXTENT {
            return Err(GeometryError::Degenerate { h, w });
        }
        Ok(GraspRect { x, y, theta, h, w })
    }

    pub fn center(&self) -> Point {
        Point::new(self.x, self.y)
    }

    pub fn area(&self) -> f64 {
        self.h * self.w
    }

    /// The four corners, counter-clockwise in a y-up reading (positive
    /// shoelace area). `v0 -> v1` runs along the `w` edge.
    pub fn corners(&self) -> [Point; 4] {
        let t = self.theta.to_radians();
        let (s, c) = t.sin_cos();
        let (hw, hh) = (0.5 * self.w, 0.5 * self.h);
        // u along theta, n perpendicular
        let u = Point::new(c * hw, s * hw);
        let n = Point::new(-s * hh, c * hh);
        [
            Point::new(self.x + u.x + n.x, self.y + u.y + n.y),
            Point::new(self.x - u.x + n.x, self.y - u.y + n.y),
            Point::new(self.x - u.x - n.x, self.y - u.y - n.y),
            Point::new(self.x + u.x - n.x, self.y + u.y - n.y),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    vertices: Vec<Point>,
}

impl ConvexPolygon {
    /// Builds a polygon from convex vertices, reordering clockwise input to
    /// counter-clockwise.
    pub fn new(mut vertices: Vec<Point>) -> Result<Self, GeometryError> {
        if vertices.len() < 3 {
            return Err(GeometryError::TooFewVertices(vertices.len()));
        }
        if vertices.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if signed_area(&vertices) < 0.0 {
            vertices.reverse();
        }
        Ok(ConvexPolygon { vertices })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices).abs()
    }
}

/// Shoelace formula.
pub fn signed_area(pts: &[Point]) -> f64 {
    if pts.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..pts.len() {
        let a = pts[i];
        let b = pts[(i + 1) % pts.len()];
        acc += a.cross(b);
    }
    0.5 * acc
}

pub fn rect_to_polygon(g: &GraspRect) -> ConvexPolygon {
    ConvexPolygon { vertices: g.corners().to_vec() }
}

/// Reads a grasp from four ordered vertices. The first edge `v0 -> v1` fixes
/// the orientation and `w`; the second edge gives `h`.
pub fn polygon_to_rect(v: &[Point; 4]) -> Result<GraspRect, GeometryError> {
    if v.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let cx = v.iter().map(|p| p.x).sum::<f64>() / 4.0;
    let cy = v.iter().map(|p| p.y).sum::<f64>() / 4.0;
    let e0 = v[1].sub(v[0]);
    let w = e0.x.hypot(e0.y);
    let h = v[2].distance(v[1]);
    if w <= MIN_EXTENT || h <= MIN_EXTENT {
        return Err(GeometryError::Degenerate { h, w });
    }
    let theta = e0.y.atan2(e0.x).to_degrees();
    GraspRect::new(cx, cy, theta, h, w)
}

/// Area of the intersection of two convex polygons, by clipping `a` against
/// every edge of `b` and taking the shoelace area of what is left.
pub fn intersection_area(a: &ConvexPolygon, b: &ConvexPolygon) -> f64 {
    let mut out: Vec<Point> = a.vertices.clone();
    let clip = &b.vertices;
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let p0 = clip[i];
        let p1 = clip[(i + 1) % clip.len()];
        out = clip_half_plane(&out, p0, p1);
    }
    signed_area(&out).abs()
}

/// Keeps the part of `poly` on the left of the directed line `p0 -> p1`.
fn clip_half_plane(poly: &[Point], p0: Point, p1: Point) -> Vec<Point> {
    let dir = p1.sub(p0);
    let side = |p: Point| dir.cross(p.sub(p0));
    let mut res = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let cur = poly[i];
        let nxt = poly[(i + 1) % poly.len()];
        let sc = side(cur);
        let sn = side(nxt);
        if sc >= 0.0 {
            res.push(cur);
        }
        if (sc >= 0.0) != (sn >= 0.0) {
            let t = sc / (sc - sn);
            res.push(Point::new(cur.x + t * (nxt.x - cur.x), cur.y + t * (nxt.y - cur.y)));
        }
    }
    res
}

/// Intersection over union of two grasp rectangles.
pub fn jaccard(a: &GraspRect, b: &GraspRect) -> f64 {
    let inter = intersection_area(&rect_to_polygon(a), &rect_to_polygon(b));
    let union = a.area() + b.area() - inter;
    if union <= 1e-12 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// A similarity transform `p -> scale * R(rotation) * p + offset` acting on
/// image-frame points and on grasps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub rotation_deg: f64,
    pub scale: f64,
    pub offset: Point,
}

impl Similarity {
    pub const IDENTITY: Similarity = Similarity { rotation_deg: 0.0, scale: 1.0, offset: Point::new(0.0, 0.0) };

    /// Rotate about `pivot`, then translate, then scale about the origin.
    pub fn new(rotation_deg: f64, pivot: Point, translation: Point, scale: f64) -> Self {
        let (s, c) = rotation_deg.to_radians().sin_cos();
        // R(p - pivot) + pivot + t  =  R p + (pivot - R pivot + t)
        let rp = Point::new(c * pivot.x - s * pivot.y, s * pivot.x + c * pivot.y);
        let off = Point::new(pivot.x - rp.x + translation.x, pivot.y - rp.y + translation.y);
        Similarity { rotation_deg, scale, offset: Point::new(scale * off.x, scale * off.y) }
    }

    pub fn translation(t: Point) -> Self {
        Similarity { offset: t, ..Self::IDENTITY }
    }

    pub fn apply(&self, p: Point) -> Point {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        Point::new(
            self.scale * (c * p.x - s * p.y) + self.offset.x,
            self.scale * (s * p.x + c * p.y) + self.offset.y,
        )
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &Similarity) -> Similarity {
        let o = self.apply(first.offset);
        Similarity {
            rotation_deg: self.rotation_deg + first.rotation_deg,
            scale: self.scale * first.scale,
            offset: o,
        }
    }

    pub fn inverse(&self) -> Similarity {
        let inv = Similarity { rotation_deg: -self.rotation_deg, scale: 1.0 / self.scale, offset: Point::new(0.0, 0.0) };
        let o = inv.apply(self.offset);
        Similarity { offset: Point::new(-o.x, -o.y), ..inv }
    }

    pub fn apply_rect(&self, g: &GraspRect) -> GraspRect {
        let c = self.apply(g.center());
        GraspRect {
            x: c.x,
            y: c.y,
            theta: wrap_180(g.theta + self.rotation_deg),
            h: g.h * self.scale,
            w: g.w * self.scale,
        }
    }
}

/// Rotates `g` about `pivot`, translates it, then scales about the origin.
pub fn transform_rect(g: &GraspRect, rotation_deg: f64, pivot: Point, translation: Point, scale: f64) -> GraspRect {
    assert!(scale > 0.0, "transform scale must be positive");
    Similarity::new(rotation_deg, pivot, translation, scale).apply_rect(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn same_point_set(a: &[Point], b: &[Point], tol: f64) -> bool {
        a.len() == b.len() && a.iter().all(|p| b.iter().any(|q| p.distance(*q) <= tol))
    }

    #[test]
    fn canonical_angles() {
        assert_eq!(canonicalize_angle(180.0).unwrap(), 0.0);
        assert_eq!(canonicalize_angle(-45.0).unwrap(), 135.0);
        assert_eq!(canonicalize_angle(395.0).unwrap(), 35.0);
        assert_eq!(canonicalize_angle(-1e-18).unwrap(), 0.0);
        assert!(matches!(canonicalize_angle(f64::NAN), Err(GeometryError::InvalidAngle(_))));
        assert!(canonicalize_angle(f64::INFINITY).is_err());
    }

    #[test]
    fn angle_codes() {
        let c = encode_angle(45.0);
        assert!(close(c.s, 1.0, 1e-12) && close(c.c, 0.0, 1e-12));
        let c = encode_angle(0.0);
        assert!(close(c.s, 0.0, 1e-12) && close(c.c, 1.0, 1e-12));
        let (a, b) = (encode_angle(210.0), encode_angle(30.0));
        assert!(close(a.s, b.s, 1e-12) && close(a.c, b.c, 1e-12));

        assert!(close(decode_angle(AngleCode { s: 1.0, c: 0.0 }), 45.0, 1e-12));
        assert!(close(decode_angle(AngleCode { s: 0.0, c: -1.0 }), 90.0, 1e-12));
        assert!(close(decode_angle(encode_angle(137.25)), 137.25, 1e-6));
        assert_eq!(decode_angle(AngleCode { s: 0.0, c: 0.0 }), 0.0);
        assert_eq!(decode_angle(AngleCode { s: -0.0, c: -0.0 }), 0.0);
        // unnormalized input
        assert!(close(decode_angle(AngleCode { s: 3.0, c: 0.0 }), 45.0, 1e-12));
    }

    #[test]
    fn polygon_examples() {
        let g = GraspRect::new(0.0, 0.0, 0.0, 2.0, 4.0).unwrap();
        let want = [Point::new(2.0, 1.0), Point::new(-2.0, 1.0), Point::new(-2.0, -1.0), Point::new(2.0, -1.0)];
        assert!(same_point_set(rect_to_polygon(&g).vertices(), &want, 1e-12));

        let g = GraspRect::new(0.0, 0.0, 90.0, 2.0, 4.0).unwrap();
        let want = [Point::new(1.0, 2.0), Point::new(-1.0, 2.0), Point::new(-1.0, -2.0), Point::new(1.0, -2.0)];
        assert!(same_point_set(rect_to_polygon(&g).vertices(), &want, 1e-12));

        let r2 = 2f64.sqrt();
        let g = GraspRect::new(5.0, 5.0, 45.0, r2, r2).unwrap();
        let want = [Point::new(5.0, 6.0), Point::new(5.0, 4.0), Point::new(4.0, 5.0), Point::new(6.0, 5.0)];
        assert!(same_point_set(rect_to_polygon(&g).vertices(), &want, 1e-12));
        assert!(signed_area(rect_to_polygon(&g).vertices()) > 0.0);
    }

    #[test]
    fn parse_quadruple() {
        let v = [Point::new(2.0, 1.0), Point::new(-2.0, 1.0), Point::new(-2.0, -1.0), Point::new(2.0, -1.0)];
        let g = polygon_to_rect(&v).unwrap();
        assert!(close(g.x, 0.0, 1e-12) && close(g.y, 0.0, 1e-12));
        assert!(close(g.theta, 0.0, 1e-12) && close(g.h, 2.0, 1e-12) && close(g.w, 4.0, 1e-12));

        let mut bad = v;
        bad[2].x = f64::NAN;
        assert_eq!(polygon_to_rect(&bad), Err(GeometryError::NonFinite));

        let flat = [Point::new(0.0, 0.0), Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(1.0, 0.0)];
        assert!(matches!(polygon_to_rect(&flat), Err(GeometryError::Degenerate { .. })));
    }

    #[test]
    fn areas() {
        let unit = ConvexPolygon::new(vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(1.0, 1.0),
            Point::new(0.0, 1.0),
        ])
        .unwrap();
        assert!(close(intersection_area(&unit, &unit), 1.0, 1e-12));
        let shifted = ConvexPolygon::new(unit.vertices().iter().map(|p| Point::new(p.x + 0.5, p.y)).collect()).unwrap();
        assert!(close(intersection_area(&unit, &shifted), 0.5, 1e-12));
        let far = ConvexPolygon::new(unit.vertices().iter().map(|p| Point::new(p.x + 3.0, p.y)).collect()).unwrap();
        assert_eq!(intersection_area(&unit, &far), 0.0);
        // clockwise input is reoriented
        let cw = ConvexPolygon::new(unit.vertices().iter().rev().copied().collect()).unwrap();
        assert!(close(intersection_area(&cw, &unit), 1.0, 1e-12));
        assert!(ConvexPolygon::new(vec![Point::new(0.0, 0.0); 2]).is_err());
    }

    #[test]
    fn jaccard_examples() {
        let g = GraspRect::new(10.0, 7.0, 33.0, 5.0, 9.0).unwrap();
        assert!(close(jaccard(&g, &g), 1.0, 1e-12));
        let a = GraspRect::new(0.5, 0.5, 0.0, 1.0, 1.0).unwrap();
        let b = GraspRect::new(1.0, 0.5, 0.0, 1.0, 1.0).unwrap();
        assert!(close(jaccard(&a, &b), 1.0 / 3.0, 1e-12));
        // 180-degree symmetric copy is the same rectangle
        let flipped = GraspRect { theta: canonicalize_angle(g.theta + 180.0).unwrap(), ..g };
        assert!(close(jaccard(&g, &flipped), 1.0, 1e-12));
        // a quarter turn of a non-square rectangle is not
        let turned = GraspRect { theta: g.theta + 90.0, ..g };
        assert!(jaccard(&g, &turned) < 0.99);
    }

    #[test]
    fn angle_distance_examples() {
        assert_eq!(angle_distance(0.0, 180.0), 0.0);
        assert!(close(angle_distance(10.0, 50.0), 40.0, 1e-12));
        assert!(close(angle_distance(170.0, 5.0), 15.0, 1e-12));
        assert!(close(angle_distance(-10.0, 370.0), 20.0, 1e-12));
        assert!(close(angle_distance(0.0, 90.0), 90.0, 1e-12));
    }

    #[test]
    fn transforms() {
        let g = GraspRect::new(12.0, -3.0, 20.0, 4.0, 7.0).unwrap();
        let id = transform_rect(&g, 0.0, Point::new(3.0, 4.0), Point::new(0.0, 0.0), 1.0);
        assert!(close(id.x, g.x, 1e-12) && close(id.y, g.y, 1e-12) && close(id.theta, g.theta, 1e-12));

        let r = transform_rect(&g, 90.0, g.center(), Point::new(0.0, 0.0), 1.0);
        assert!(close(r.x, g.x, 1e-9) && close(r.y, g.y, 1e-9) && close(r.theta, 110.0, 1e-9));

        let t = Similarity::new(37.0, Point::new(5.0, 9.0), Point::new(-4.0, 2.5), 0.7);
        let back = t.inverse().apply_rect(&t.apply_rect(&g));
        assert!(close(back.x, g.x, 1e-9) && close(back.y, g.y, 1e-9));
        assert!(angle_distance(back.theta, g.theta) < 1e-9);
        assert!(close(back.h, g.h, 1e-9) && close(back.w, g.w, 1e-9));

        let u = Similarity::new(-80.0, Point::new(1.0, 1.0), Point::new(3.0, 0.0), 1.3);
        let p = Point::new(2.0, -7.0);
        let lhs = u.compose(&t).apply(p);
        let rhs = u.apply(t.apply(p));
        assert!(lhs.distance(rhs) < 1e-9);
    }
}
