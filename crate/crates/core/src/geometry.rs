//! Unit-sphere primitives.
//!
//! Everything here operates on the unit panorama sphere: viewing directions
//! are unit 3-vectors, viewports are spherical caps, and the successful
//! prefetch ratio needs the exact area of a cap/cap intersection.
//!
//! All functions are pure; values are `Copy` and immutable.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Squared-norm floor below which a vector counts as zero.
const ZERO_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    /// Vector (or quaternion) too close to zero to normalize.
    #[error("vector norm {0:e} is below the zero threshold")]
    ZeroVector(f64),
    /// Cap half-angle outside `[0, PI/2]`.
    #[error("half-angle {0} outside [0, PI/2]")]
    InvalidHalfAngle(f64),
}

/// A unit vector on the panorama sphere.
///
/// Construction always normalizes, so `x^2 + y^2 + z^2 = 1` within 1e-9
/// holds for every live value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    x: f64,
    y: f64,
    z: f64,
}

impl Direction {
    /// Canonical forward axis used when converting camera quaternions.
    pub const FORWARD: Direction = Direction { x: 0.0, y: 0.0, z: -1.0 };

    /// Normalizes a raw 3-vector onto the unit sphere.
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        let norm = (x * x + y * y + z * z).sqrt();
        if !norm.is_finite() || norm <= ZERO_NORM_EPS {
            return Err(GeometryError::ZeroVector(norm));
        }
        Ok(Direction { x: x / norm, y: y / norm, z: z / norm })
    }

    pub fn from_array(v: [f64; 3]) -> Result<Self, GeometryError> {
        Self::new(v[0], v[1], v[2])
    }

    /// Accepts components that are already unit-norm (within 1e-9) without
    /// renormalizing, preserving their exact bits. Used when reading back
    /// serialized directions.
    pub fn from_unit(x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        let norm = (x * x + y * y + z * z).sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-9 {
            return Err(GeometryError::ZeroVector(norm));
        }
        Ok(Direction { x, y, z })
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(&self, other: &Direction) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(&self, other: &Direction) -> [f64; 3] {
        [
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        ]
    }

    /// Angle in `[0, PI]` between two unit vectors.
    ///
    /// The dot product is clamped to `[-1, 1]` before `acos` so near-parallel
    /// inputs never produce NaN.
    pub fn angular_distance(&self, other: &Direction) -> f64 {
        self.dot(other).clamp(-1.0, 1.0).acos()
    }
}

/// Normalizes a raw 3-vector; alias for [`Direction::new`].
pub fn normalize(x: f64, y: f64, z: f64) -> Result<Direction, GeometryError> {
    Direction::new(x, y, z)
}

/// Angle in `[0, PI]` between two directions; alias for
/// [`Direction::angular_distance`].
pub fn angular_distance(u: &Direction, v: &Direction) -> f64 {
    u.angular_distance(v)
}

/// A rotation quaternion, normalized on construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Builds a unit quaternion from raw components.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        if !norm.is_finite() || norm <= ZERO_NORM_EPS {
            return Err(GeometryError::ZeroVector(norm));
        }
        Ok(Quaternion { w: w / norm, x: x / norm, y: y / norm, z: z / norm })
    }

    fn conjugate(&self) -> Quaternion {
        Quaternion { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    fn mul(&self, o: &Quaternion) -> Quaternion {
        Quaternion {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
    }

    /// Rotates a vector: `q (0,v) q^-1`.
    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let p = Quaternion { w: 0.0, x: v[0], y: v[1], z: v[2] };
        let r = self.mul(&p).mul(&self.conjugate());
        [r.x, r.y, r.z]
    }
}

/// Rotates the canonical forward axis by a camera quaternion.
pub fn quat_to_direction(q: &Quaternion, forward: &Direction) -> Result<Direction, GeometryError> {
    let v = q.rotate(forward.as_array());
    Direction::from_array(v)
}

/// A circle of the unit sphere: all points within `half_angle` of `center`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalCap {
    pub center: Direction,
    half_angle: f64,
}

impl SphericalCap {
    /// Half-angles are restricted to `[0, PI/2]`, matching the clamp applied
    /// to prefetch decisions.
    pub fn new(center: Direction, half_angle: f64) -> Result<Self, GeometryError> {
        if !half_angle.is_finite() || !(0.0..=PI / 2.0).contains(&half_angle) {
            return Err(GeometryError::InvalidHalfAngle(half_angle));
        }
        Ok(SphericalCap { center, half_angle })
    }

    pub fn half_angle(&self) -> f64 {
        self.half_angle
    }

    /// Cap area in steradians: `2 PI (1 - cos(half_angle))`.
    pub fn area(&self) -> f64 {
        cap_area(self.half_angle)
    }
}

/// Area in steradians of a spherical cap with the given half-angle.
pub fn cap_area(half_angle: f64) -> f64 {
    2.0 * PI * (1.0 - half_angle.cos())
}

/// Exact area of the intersection of two spherical caps.
///
/// Let `t1`, `t2` be the half-angles and `g` the angular separation of the
/// centers. Disjoint (`g >= t1 + t2`) yields 0 and containment
/// (`g <= |t1 - t2|`) yields the smaller cap's area. The partial-overlap
/// lens area follows from Gauss-Bonnet applied to the region bounded by the
/// two small-circle arcs:
///
/// ```text
/// A = 2 PI - 2 ap - 2 a1 cos(t1) - 2 a2 cos(t2)
/// ```
///
/// where `a1`, `a2` are the azimuthal half-extents of the bounding arcs
/// around their cap axes and `ap` is the corner angle, all given by the
/// spherical law of cosines on the triangle (center1, center2, crossing
/// point).
pub fn cap_intersection_area(a: &SphericalCap, b: &SphericalCap) -> f64 {
    // canonical order makes the evaluation exactly symmetric in (a, b)
    let (a, b) = if a.half_angle <= b.half_angle { (a, b) } else { (b, a) };
    let t1 = a.half_angle;
    let t2 = b.half_angle;
    let g = a.center.angular_distance(&b.center);

    let min_area = cap_area(t1.min(t2));
    if g >= t1 + t2 {
        return 0.0;
    }
    if g <= (t1 - t2).abs() {
        return min_area;
    }

    // Partial overlap: both sines are strictly positive here since the
    // containment branch has absorbed every degenerate case.
    let (sg, cg) = (g.sin(), g.cos());
    let (s1, c1) = (t1.sin(), t1.cos());
    let (s2, c2) = (t2.sin(), t2.cos());

    let ap = ((cg - c1 * c2) / (s1 * s2)).clamp(-1.0, 1.0).acos();
    let a1 = ((c2 - cg * c1) / (sg * s1)).clamp(-1.0, 1.0).acos();
    let a2 = ((c1 - cg * c2) / (sg * s2)).clamp(-1.0, 1.0).acos();

    let area = 2.0 * PI - 2.0 * ap - 2.0 * a1 * c1 - 2.0 * a2 * c2;
    area.clamp(0.0, min_area)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: f64 = 1e-12;

    #[test]
    fn normalize_scales_to_unit() {
        let d = normalize(2.0, 0.0, 0.0).unwrap();
        assert_eq!(d.as_array(), [1.0, 0.0, 0.0]);
        let d = normalize(0.0, 0.0, -5.0).unwrap();
        assert_eq!(d.as_array(), [0.0, 0.0, -1.0]);
    }

    #[test]
    fn normalize_diagonal() {
        let d = normalize(1.0, 1.0, 1.0).unwrap();
        let e = 1.0 / 3f64.sqrt();
        for (got, want) in d.as_array().iter().zip([e, e, e]) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
        // 0.57735 within the spec'd 5-digit precision
        assert!((d.x() - 0.57735).abs() < 1e-5);
    }

    #[test]
    fn normalize_rejects_zero() {
        assert!(matches!(normalize(0.0, 0.0, 0.0), Err(GeometryError::ZeroVector(_))));
        assert!(matches!(normalize(1e-13, 0.0, 0.0), Err(GeometryError::ZeroVector(_))));
    }

    #[test]
    fn angular_distance_basics() {
        let x = normalize(1.0, 0.0, 0.0).unwrap();
        let y = normalize(0.0, 1.0, 0.0).unwrap();
        assert_eq!(x.angular_distance(&x), 0.0);
        assert!((x.angular_distance(&y) - PI / 2.0).abs() < TOL);
        let r = normalize(0.3f64.cos(), 0.3f64.sin(), 0.0).unwrap();
        assert!((x.angular_distance(&r) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn quat_identity_keeps_forward() {
        let d = quat_to_direction(&Quaternion::IDENTITY, &Direction::FORWARD).unwrap();
        assert!((d.z() + 1.0).abs() < TOL && d.x().abs() < TOL && d.y().abs() < TOL);
    }

    #[test]
    fn quat_half_turn_about_y() {
        let q = Quaternion::new(0.0, 0.0, 1.0, 0.0).unwrap();
        let d = quat_to_direction(&q, &Direction::FORWARD).unwrap();
        assert!((d.z() - 1.0).abs() < TOL && d.x().abs() < TOL && d.y().abs() < TOL);
    }

    #[test]
    fn quat_quarter_turn_about_y() {
        let h = (PI / 4.0).cos();
        let q = Quaternion::new(h, 0.0, (PI / 4.0).sin(), 0.0).unwrap();
        let d = quat_to_direction(&q, &Direction::FORWARD).unwrap();
        assert!((d.x() + 1.0).abs() < TOL, "{:?}", d);
        assert!(d.y().abs() < TOL && d.z().abs() < TOL);
    }

    #[test]
    fn quat_rejects_degenerate() {
        assert!(Quaternion::new(0.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn cap_area_values() {
        assert_eq!(cap_area(0.0), 0.0);
        assert!((cap_area(PI / 2.0) - 2.0 * PI).abs() < TOL);
        // closed form 2 PI (1 - cos(PI/8))
        assert!((cap_area(PI / 8.0) - 0.478_279_002_900_724_56).abs() < 1e-12);
    }

    #[test]
    fn cap_rejects_bad_half_angle() {
        let c = Direction::FORWARD;
        assert!(SphericalCap::new(c, -0.1).is_err());
        assert!(SphericalCap::new(c, PI / 2.0 + 0.1).is_err());
        assert!(SphericalCap::new(c, f64::NAN).is_err());
    }

    fn cap(dir: [f64; 3], half: f64) -> SphericalCap {
        SphericalCap::new(Direction::from_array(dir).unwrap(), half).unwrap()
    }

    #[test]
    fn intersection_containment_same_center() {
        let a = cap([0.0, 0.0, 1.0], PI / 8.0);
        let b = cap([0.0, 0.0, 1.0], PI / 4.0);
        assert!((cap_intersection_area(&a, &b) - a.area()).abs() < TOL);
        assert!((cap_intersection_area(&b, &a) - a.area()).abs() < TOL);
    }

    #[test]
    fn intersection_tangent_caps_are_disjoint() {
        let t1 = PI / 8.0;
        let t2 = PI / 6.0;
        let g = t1 + t2;
        let a = cap([0.0, 0.0, 1.0], t1);
        let b = cap([g.sin(), 0.0, g.cos()], t2);
        assert_eq!(cap_intersection_area(&a, &b), 0.0);
    }

    #[test]
    fn intersection_hemispheres_form_lune() {
        // Two hemispheres with poles separated by g intersect in a lune of
        // area 2 (PI - g).
        let g: f64 = 0.7;
        let a = cap([0.0, 0.0, 1.0], PI / 2.0);
        let b = cap([g.sin(), 0.0, g.cos()], PI / 2.0);
        let got = cap_intersection_area(&a, &b);
        assert!((got - 2.0 * (PI - g)).abs() < 1e-9, "{got}");
    }

    #[test]
    fn intersection_is_symmetric() {
        let a = cap([0.3, -0.2, 0.9], 0.5);
        let b = cap([-0.1, 0.8, 0.4], 0.9);
        assert_eq!(cap_intersection_area(&a, &b), cap_intersection_area(&b, &a));
    }

    #[test]
    fn intersection_bounded_by_smaller_cap() {
        let a = cap([0.0, 1.0, 0.0], 0.4);
        let b = cap([0.1, 1.0, 0.0], 0.3);
        let got = cap_intersection_area(&a, &b);
        assert!(got >= 0.0 && got <= cap_area(0.3) + TOL);
    }
}
