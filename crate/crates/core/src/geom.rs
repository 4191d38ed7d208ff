//! Minimal fixed-size linear algebra and triangle utilities.

use crate::num::Real;

#[derive(Clone, Copy, PartialEq, Default, Debug)]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

pub fn vec3<T: Real>(x: T, y: T, z: T) -> Vec3<T> {
    Vec3 { x, y, z }
}

impl<T: Real> Vec3<T> {
    pub fn zero() -> Self {
        vec3(T::zero(), T::zero(), T::zero())
    }

    pub fn splat(v: T) -> Self {
        vec3(v, v, v)
    }

    pub fn from_slice(s: &[T]) -> Self {
        vec3(s[0], s[1], s[2])
    }

    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    pub fn axis(i: usize) -> Self {
        match i {
            0 => vec3(T::one(), T::zero(), T::zero()),
            1 => vec3(T::zero(), T::one(), T::zero()),
            _ => vec3(T::zero(), T::zero(), T::one()),
        }
    }

    pub fn get(self, i: usize) -> T {
        match i {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }

    pub fn set(&mut self, i: usize, v: T) {
        match i {
            0 => self.x = v,
            1 => self.y = v,
            _ => self.z = v,
        }
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        vec3(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_sq(self) -> T {
        self.dot(self)
    }

    pub fn norm(self) -> T {
        self.norm_sq().sqrt()
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        if n > T::zero() {
            self * (T::one() / n)
        } else {
            Self::zero()
        }
    }

    pub fn scale(self, s: T) -> Self {
        vec3(self.x * s, self.y * s, self.z * s)
    }

    pub fn min_with(self, o: Self) -> Self {
        vec3(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max_with(self, o: Self) -> Self {
        vec3(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_f64(self) -> Vec3<f64> {
        vec3(
            self.x.to_f64_lossy(),
            self.y.to_f64_lossy(),
            self.z.to_f64_lossy(),
        )
    }
}

impl<T: Real> std::ops::Add for Vec3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        vec3(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> std::ops::Sub for Vec3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        vec3(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> std::ops::Neg for Vec3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        vec3(-self.x, -self.y, -self.z)
    }
}

impl<T: Real> std::ops::Mul<T> for Vec3<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        self.scale(s)
    }
}

impl<T: Real> std::ops::AddAssign for Vec3<T> {
    fn add_assign(&mut self, o: Self) {
        self.x += o.x;
        self.y += o.y;
        self.z += o.z;
    }
}

/// Row-major 3x3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3<T> {
    pub m: [[T; 3]; 3],
}

impl<T: Real> Mat3<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Mat3 {
            m: [[o, z, z], [z, o, z], [z, z, o]],
        }
    }

    pub fn zero() -> Self {
        Mat3 {
            m: [[T::zero(); 3]; 3],
        }
    }

    pub fn from_rows(r0: Vec3<T>, r1: Vec3<T>, r2: Vec3<T>) -> Self {
        Mat3 {
            m: [r0.to_array(), r1.to_array(), r2.to_array()],
        }
    }

    pub fn from_cols(c0: Vec3<T>, c1: Vec3<T>, c2: Vec3<T>) -> Self {
        Mat3 {
            m: [
                [c0.x, c1.x, c2.x],
                [c0.y, c1.y, c2.y],
                [c0.z, c1.z, c2.z],
            ],
        }
    }

    pub fn col(&self, j: usize) -> Vec3<T> {
        vec3(self.m[0][j], self.m[1][j], self.m[2][j])
    }

    pub fn row(&self, i: usize) -> Vec3<T> {
        Vec3::from_slice(&self.m[i])
    }

    pub fn transpose(&self) -> Self {
        Mat3::from_rows(self.col(0), self.col(1), self.col(2))
    }

    pub fn mul_vec(&self, v: Vec3<T>) -> Vec3<T> {
        vec3(
            self.row(0).dot(v),
            self.row(1).dot(v),
            self.row(2).dot(v),
        )
    }

    pub fn mul_mat(&self, o: &Self) -> Self {
        let mut r = Mat3::zero();
        for i in 0..3 {
            for j in 0..3 {
                let mut s = T::zero();
                for k in 0..3 {
                    s += self.m[i][k] * o.m[k][j];
                }
                r.m[i][j] = s;
            }
        }
        r
    }

    pub fn scale(&self, s: T) -> Self {
        let mut r = *self;
        for i in 0..3 {
            for j in 0..3 {
                r.m[i][j] *= s;
            }
        }
        r
    }

    pub fn add(&self, o: &Self) -> Self {
        let mut r = *self;
        for i in 0..3 {
            for j in 0..3 {
                r.m[i][j] += o.m[i][j];
            }
        }
        r
    }

    pub fn det(&self) -> T {
        self.row(0).dot(self.row(1).cross(self.row(2)))
    }

    /// Cross-product matrix [v]x such that [v]x w = v x w.
    pub fn cross_matrix(v: Vec3<T>) -> Self {
        let z = T::zero();
        Mat3 {
            m: [[z, -v.z, v.y], [v.z, z, -v.x], [-v.y, v.x, z]],
        }
    }

    pub fn outer(a: Vec3<T>, b: Vec3<T>) -> Self {
        Mat3 {
            m: [
                [a.x * b.x, a.x * b.y, a.x * b.z],
                [a.y * b.x, a.y * b.y, a.y * b.z],
                [a.z * b.x, a.z * b.y, a.z * b.z],
            ],
        }
    }

    /// Solve A x = b by Cramer's rule. Returns None when |det| < tol.
    pub fn solve(&self, b: Vec3<T>, det_tol: T) -> Option<Vec3<T>> {
        let d = self.det();
        if d.abs() < det_tol {
            return None;
        }
        let inv_d = T::one() / d;
        let c0 = self.col(0);
        let c1 = self.col(1);
        let c2 = self.col(2);
        let x = Mat3::from_cols(b, c1, c2).det() * inv_d;
        let y = Mat3::from_cols(c0, b, c2).det() * inv_d;
        let z = Mat3::from_cols(c0, c1, b).det() * inv_d;
        Some(vec3(x, y, z))
    }

    pub fn inverse(&self, det_tol: T) -> Option<Self> {
        let d = self.det();
        if d.abs() < det_tol {
            return None;
        }
        let inv_d = T::one() / d;
        let c = |i: usize, j: usize| -> T {
            let (i1, i2) = ((i + 1) % 3, (i + 2) % 3);
            let (j1, j2) = ((j + 1) % 3, (j + 2) % 3);
            (self.m[i1][j1] * self.m[i2][j2] - self.m[i1][j2] * self.m[i2][j1]) * inv_d
        };
        // adjugate transpose
        let mut r = Mat3::zero();
        for i in 0..3 {
            for j in 0..3 {
                r.m[j][i] = c(i, j);
            }
        }
        Some(r)
    }

    /// Rotation from an axis-angle vector, smooth through zero.
    pub fn rodrigues(w: Vec3<T>) -> Self {
        let (a, b) = rodrigues_coeffs(w.norm_sq());
        let k = Mat3::cross_matrix(w);
        Mat3::identity().add(&k.scale(a)).add(&k.mul_mat(&k).scale(b))
    }
}

/// Coefficients (sin(phi)/phi, (1-cos(phi))/phi^2) as smooth functions of
/// s = phi^2, with series fallback near zero.
pub fn rodrigues_coeffs<T: Real>(s: T) -> (T, T) {
    if s < T::of(1e-8) {
        let a = T::one() - s * T::of(1.0 / 6.0) + s * s * T::of(1.0 / 120.0);
        let b = T::of(0.5) - s * T::of(1.0 / 24.0) + s * s * T::of(1.0 / 720.0);
        (a, b)
    } else {
        let phi = s.sqrt();
        ((phi.sin()) / phi, (T::one() - phi.cos()) / s)
    }
}

/// Derivatives of the rodrigues coefficients with respect to s = phi^2.
pub fn rodrigues_coeffs_ds<T: Real>(s: T) -> (T, T) {
    if s < T::of(1e-8) {
        let da = -T::of(1.0 / 6.0) + s * T::of(1.0 / 60.0);
        let db = -T::of(1.0 / 24.0) + s * T::of(1.0 / 360.0);
        (da, db)
    } else {
        let phi = s.sqrt();
        let (sin_p, cos_p) = (phi.sin(), phi.cos());
        let da = (cos_p * phi - sin_p) / (phi * phi) / (T::of(2.0) * phi);
        let db = (sin_p / (T::of(2.0) * phi) * s - (T::one() - cos_p)) / (s * s);
        (da, db)
    }
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug)]
pub struct Aabb<T> {
    pub min: Vec3<T>,
    pub max: Vec3<T>,
}

impl<T: Real> Aabb<T> {
    pub fn empty() -> Self {
        Aabb {
            min: Vec3::splat(T::infinity()),
            max: Vec3::splat(T::neg_infinity()),
        }
    }

    pub fn new(min: Vec3<T>, max: Vec3<T>) -> Self {
        Aabb { min, max }
    }

    pub fn cube(half: T) -> Self {
        Aabb {
            min: Vec3::splat(-half),
            max: Vec3::splat(half),
        }
    }

    pub fn grow(&mut self, p: Vec3<T>) {
        self.min = self.min.min_with(p);
        self.max = self.max.max_with(p);
    }

    pub fn merge(&mut self, o: &Aabb<T>) {
        self.min = self.min.min_with(o.min);
        self.max = self.max.max_with(o.max);
    }

    pub fn extent(&self) -> Vec3<T> {
        self.max - self.min
    }

    pub fn diagonal(&self) -> T {
        self.extent().norm()
    }

    pub fn center(&self) -> Vec3<T> {
        (self.min + self.max) * T::of(0.5)
    }

    pub fn padded(&self, frac: T) -> Self {
        let pad = self.extent() * frac;
        Aabb {
            min: self.min - pad,
            max: self.max + pad,
        }
    }

    pub fn contains(&self, p: Vec3<T>) -> bool {
        p.x >= self.min.x
            && p.y >= self.min.y
            && p.z >= self.min.z
            && p.x <= self.max.x
            && p.y <= self.max.y
            && p.z <= self.max.z
    }

    pub fn clamp(&self, p: Vec3<T>) -> Vec3<T> {
        p.max_with(self.min).min_with(self.max)
    }

    /// Squared distance from a point to the box (zero inside).
    pub fn dist_sq(&self, p: Vec3<T>) -> T {
        let c = self.clamp(p);
        (p - c).norm_sq()
    }

    /// Slab test; returns entry/exit parameters if the ray hits.
    pub fn ray_hit(&self, origin: Vec3<T>, inv_dir: Vec3<T>, t_max: T) -> bool {
        let mut t0 = T::zero();
        let mut t1 = t_max;
        for i in 0..3 {
            let inv = inv_dir.get(i);
            let mut near = (self.min.get(i) - origin.get(i)) * inv;
            let mut far = (self.max.get(i) - origin.get(i)) * inv;
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            t0 = t0.max(near);
            t1 = t1.min(far);
            if t0 > t1 {
                return false;
            }
        }
        true
    }
}

/// Moeller-Trumbore ray/triangle intersection.
/// Returns (t, u, v) with hit point = a + u*(b-a) + v*(c-a), t > t_min.
pub fn ray_triangle<T: Real>(
    origin: Vec3<T>,
    dir: Vec3<T>,
    a: Vec3<T>,
    b: Vec3<T>,
    c: Vec3<T>,
    t_min: T,
) -> Option<(T, T, T)> {
    let e1 = b - a;
    let e2 = c - a;
    let pv = dir.cross(e2);
    let det = e1.dot(pv);
    if det.abs() < T::of(1e-14) {
        return None;
    }
    let inv_det = T::one() / det;
    let tv = origin - a;
    let u = tv.dot(pv) * inv_det;
    if u < T::zero() || u > T::one() {
        return None;
    }
    let qv = tv.cross(e1);
    let v = dir.dot(qv) * inv_det;
    if v < T::zero() || u + v > T::one() {
        return None;
    }
    let t = e2.dot(qv) * inv_det;
    if t <= t_min {
        return None;
    }
    Some((t, u, v))
}

/// Closest point on triangle abc to p (Ericson, Real-Time Collision Detection).
pub fn closest_point_on_triangle<T: Real>(
    p: Vec3<T>,
    a: Vec3<T>,
    b: Vec3<T>,
    c: Vec3<T>,
) -> Vec3<T> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(ap);
    let d2 = ac.dot(ap);
    if d1 <= T::zero() && d2 <= T::zero() {
        return a;
    }
    let bp = p - b;
    let d3 = ab.dot(bp);
    let d4 = ac.dot(bp);
    if d3 >= T::zero() && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= T::zero() && d1 >= T::zero() && d3 <= T::zero() {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(cp);
    let d6 = ac.dot(cp);
    if d6 >= T::zero() && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= T::zero() && d2 >= T::zero() && d6 <= T::zero() {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= T::zero() && (d4 - d3) >= T::zero() && (d5 - d6) >= T::zero() {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = T::one() / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

pub fn triangle_area<T: Real>(a: Vec3<T>, b: Vec3<T>, c: Vec3<T>) -> T {
    (b - a).cross(c - a).norm() * T::of(0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_and_inverse_agree() {
        let a = Mat3::<f64> {
            m: [[2.0, 1.0, 0.3], [-1.0, 3.0, 0.5], [0.2, -0.4, 1.7]],
        };
        let b = vec3(1.0, -2.0, 0.5);
        let x = a.solve(b, 1e-12).unwrap();
        let xi = a.inverse(1e-12).unwrap().mul_vec(b);
        assert!((x - xi).norm() < 1e-12);
        let r = a.mul_vec(x) - b;
        assert!(r.norm() < 1e-12);
    }

    #[test]
    fn rodrigues_matches_quarter_turn() {
        let r = Mat3::<f64>::rodrigues(vec3(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let p = r.mul_vec(vec3(1.0, 0.0, 0.0));
        assert!((p - vec3(0.0, 1.0, 0.0)).norm() < 1e-12);
        let id = Mat3::<f64>::rodrigues(Vec3::zero());
        assert!((id.mul_vec(vec3(0.3, -0.2, 0.9)) - vec3(0.3, -0.2, 0.9)).norm() < 1e-15);
    }

    #[test]
    fn ray_triangle_hit_and_miss() {
        let a = vec3(0.0, 0.0, 0.0);
        let b = vec3(1.0, 0.0, 0.0);
        let c = vec3(0.0, 1.0, 0.0);
        let hit = ray_triangle(vec3(0.2, 0.2, 1.0), vec3(0.0, 0.0, -1.0), a, b, c, 1e-9);
        assert!(hit.is_some());
        let (t, u, v) = hit.unwrap();
        assert!((t - 1.0).abs() < 1e-12 && (u - 0.2).abs() < 1e-12 && (v - 0.2).abs() < 1e-12);
        assert!(ray_triangle(vec3(2.0, 2.0, 1.0), vec3(0.0, 0.0, -1.0), a, b, c, 1e-9).is_none());
    }

    #[test]
    fn closest_point_regions() {
        let a = vec3(0.0, 0.0, 0.0);
        let b = vec3(1.0, 0.0, 0.0);
        let c = vec3(0.0, 1.0, 0.0);
        // above interior
        let q = closest_point_on_triangle(vec3(0.25, 0.25, 2.0), a, b, c);
        assert!((q - vec3(0.25, 0.25, 0.0)).norm() < 1e-12);
        // nearest vertex
        let q = closest_point_on_triangle(vec3(-1.0, -1.0, 0.0), a, b, c);
        assert!((q - a).norm() < 1e-12);
        // nearest edge
        let q = closest_point_on_triangle(vec3(0.5, -1.0, 0.0), a, b, c);
        assert!((q - vec3(0.5, 0.0, 0.0)).norm() < 1e-12);
    }
}
