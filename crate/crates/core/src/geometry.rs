//! Points, rotations and scalar helpers shared by the simulator and the
//! stage calculator. Everything is `f64` and `Copy`.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    /// Distance in the horizontal (x, y) plane.
    pub fn planar_distance(self, o: Vec3) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    /// Component-wise clamp into `[lo, hi]`.
    pub fn clamp(self, lo: Vec3, hi: Vec3) -> Vec3 {
        Vec3::new(self.x.clamp(lo.x, hi.x), self.y.clamp(lo.y, hi.y), self.z.clamp(lo.z, hi.z))
    }

    /// Per-axis clip to `[-bound, bound]`.
    pub fn clip_each(self, bound: f64) -> Vec3 {
        Vec3::new(
            self.x.clamp(-bound, bound),
            self.y.clamp(-bound, bound),
            self.z.clamp(-bound, bound),
        )
    }

    /// Rescale so that the norm does not exceed `max`.
    pub fn clip_norm(self, max: f64) -> Vec3 {
        let n = self.norm();
        if n > max && n > 0.0 {
            self * (max / n)
        } else {
            self
        }
    }

    /// Step of length at most `max` from `self` toward `target`.
    pub fn step_toward(self, target: Vec3, max: f64) -> Vec3 {
        (target - self).clip_norm(max)
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        v.to_array()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// A 3×3 rotation matrix stored row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 9]", into = "[f64; 9]")]
pub struct Rotation {
    m: [[f64; 3]; 3],
}

impl Default for Rotation {
    fn default() -> Self {
        Rotation::IDENTITY
    }
}

impl From<[f64; 9]> for Rotation {
    fn from(a: [f64; 9]) -> Self {
        Rotation { m: [[a[0], a[1], a[2]], [a[3], a[4], a[5]], [a[6], a[7], a[8]]] }
    }
}

impl From<Rotation> for [f64; 9] {
    fn from(r: Rotation) -> Self {
        r.to_row_major()
    }
}

impl Rotation {
    pub const IDENTITY: Rotation = Rotation { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] };

    /// Wrap a row-major matrix without validation.
    pub fn from_rows_unchecked(m: [[f64; 3]; 3]) -> Self {
        Rotation { m }
    }

    /// Wrap a row-major matrix, checking orthonormality and orientation.
    pub fn from_rows(m: [[f64; 3]; 3]) -> Result<Self> {
        let r = Rotation { m };
        if r.is_valid(1e-9) {
            Ok(r)
        } else {
            Err(Error::Precondition("matrix is not a proper rotation".into()))
        }
    }

    pub fn rows(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[i][j]
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.m;
        [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2]]
    }

    pub fn column(&self, j: usize) -> Vec3 {
        Vec3::new(self.m[0][j], self.m[1][j], self.m[2][j])
    }

    pub fn transpose(&self) -> Rotation {
        let mut t = [[0.0; 3]; 3];
        for (i, row) in self.m.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                t[j][i] = *v;
            }
        }
        Rotation { m: t }
    }

    pub fn trace(&self) -> f64 {
        self.m[0][0] + self.m[1][1] + self.m[2][2]
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        let m = &self.m;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn compose(&self, o: &Rotation) -> Rotation {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.m[i][k] * o.m[k][j]).sum();
            }
        }
        Rotation { m: out }
    }

    /// `RᵀR = I` and `det R = 1`, entrywise within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        if !self.m.iter().flatten().all(|v| v.is_finite()) {
            return false;
        }
        let rtr = self.transpose().compose(self);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                if (rtr.m[i][j] - want).abs() > tol {
                    return false;
                }
            }
        }
        (self.determinant() - 1.0).abs() <= tol
    }

    /// Rodrigues construction from a rotation vector (axis scaled by angle).
    /// A zero vector yields the identity.
    pub fn from_rotation_vector(v: Vec3) -> Rotation {
        let angle = v.norm();
        if angle == 0.0 {
            return Rotation::IDENTITY;
        }
        rodrigues(v * (1.0 / angle), angle)
    }

    /// Rotation vector (axis · angle) with angle in `[0, π]`.
    pub fn log(&self) -> Vec3 {
        let angle = geodesic_distance(&Rotation::IDENTITY, self);
        if angle < 1e-12 {
            return Vec3::ZERO;
        }
        let m = &self.m;
        let skew = Vec3::new(m[2][1] - m[1][2], m[0][2] - m[2][0], m[1][0] - m[0][1]);
        let s = angle.sin();
        if s > 1e-6 {
            return skew * (angle / (2.0 * s));
        }
        // Near π the skew part vanishes; recover the axis from the symmetric part.
        let diag = [m[0][0], m[1][1], m[2][2]];
        let c = angle.cos();
        let k = (0..3).max_by(|&a, &b| diag[a].total_cmp(&diag[b])).unwrap_or(0);
        let mut axis = [0.0; 3];
        axis[k] = ((diag[k] - c) / (1.0 - c)).max(0.0).sqrt();
        for j in 0..3 {
            if j != k {
                axis[j] = (m[k][j] + m[j][k]) / (2.0 * (1.0 - c) * axis[k]);
            }
        }
        let mut axis = Vec3::from(axis);
        if axis.dot(skew) < 0.0 {
            axis = -axis;
        }
        axis * (angle / axis.norm())
    }
}

fn rodrigues(u: Vec3, angle: f64) -> Rotation {
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    Rotation {
        m: [
            [c + u.x * u.x * t, u.x * u.y * t - u.z * s, u.x * u.z * t + u.y * s],
            [u.y * u.x * t + u.z * s, c + u.y * u.y * t, u.y * u.z * t - u.x * s],
            [u.z * u.x * t - u.y * s, u.z * u.y * t + u.x * s, c + u.z * u.z * t],
        ],
    }
}

/// Rotation of `angle` radians about the unit vector `axis`.
pub fn axis_angle_to_rotation(axis: Vec3, angle: f64) -> Result<Rotation> {
    let n = axis.norm();
    if !n.is_finite() || (n - 1.0).abs() > 1e-9 {
        return Err(Error::Precondition(format!("rotation axis must be unit length, got norm {n}")));
    }
    if !angle.is_finite() {
        return Err(Error::Precondition("rotation angle must be finite".into()));
    }
    Ok(rodrigues(axis, angle))
}

/// Geodesic distance on SO(3): `arccos((tr(aᵀb) − 1) / 2)`, in `[0, π]`.
pub fn geodesic_distance(a: &Rotation, b: &Rotation) -> f64 {
    // tr(aᵀb) is the Frobenius inner product of a and b.
    let tr: f64 = a.m.iter().flatten().zip(b.m.iter().flatten()).map(|(x, y)| x * y).sum();
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos().clamp(0.0, PI)
}

/// `1 / (1 + e^{-z})`, evaluated without overflow for large `|z|`.
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log σ(z)`, stable for large `|z|`.
pub fn log_logistic(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn z_axis() -> Vec3 {
        Vec3::new(0.0, 0.0, 1.0)
    }

    #[test]
    fn geodesic_identity_and_diameter() {
        let i = Rotation::IDENTITY;
        assert_eq!(geodesic_distance(&i, &i), 0.0);
        let half_turn = axis_angle_to_rotation(z_axis(), PI).unwrap();
        assert!((geodesic_distance(&i, &half_turn) - PI).abs() < 1e-9);
    }

    #[test]
    fn geodesic_recovers_rodrigues_angle() {
        let axis = Vec3::new(1.0, -2.0, 0.5);
        let axis = axis * (1.0 / axis.norm());
        let r = axis_angle_to_rotation(axis, 1.0).unwrap();
        assert!((geodesic_distance(&Rotation::IDENTITY, &r) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn angle_sweep_round_trip() {
        let axis = Vec3::new(0.3, 0.4, -0.5);
        let axis = axis * (1.0 / axis.norm());
        for i in 1..200 {
            let theta = PI * i as f64 / 200.0;
            let r = axis_angle_to_rotation(axis, theta).unwrap();
            assert!(r.is_valid(1e-9));
            let d = geodesic_distance(&Rotation::IDENTITY, &r);
            assert!((d - theta).abs() < 1e-7, "theta {theta} got {d}");
        }
    }

    #[test]
    fn zero_angle_is_identity() {
        let r = axis_angle_to_rotation(Vec3::new(0.0, 1.0, 0.0), 0.0).unwrap();
        assert_eq!(r, Rotation::IDENTITY);
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = axis_angle_to_rotation(z_axis(), PI / 2.0).unwrap();
        let want = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((r.get(i, j) - want[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn non_unit_axis_rejected() {
        let err = axis_angle_to_rotation(Vec3::new(0.0, 0.0, 2.0), 0.3).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn logistic_values() {
        assert_eq!(logistic(0.0), 0.5);
        // 1/(1+e^-1) to 40 digits: 0.73105857863000487925...
        assert!((logistic(1.0) - 0.731_058_578_630_004_879).abs() < 1e-9);
        let tiny = logistic(-50.0);
        assert!(tiny > 0.0 && tiny < 1e-20);
        assert!((log_logistic(-3.0) - logistic(-3.0).ln()).abs() < 1e-14);
        assert!((log_logistic(40.0) - logistic(40.0).ln()).abs() < 1e-14);
    }

    #[test]
    fn log_map_inverts_rodrigues() {
        for &(x, y, z, a) in &[(1.0, 0.0, 0.0, 0.7), (0.0, 0.6, 0.8, 2.9), (0.6, 0.0, -0.8, PI - 1e-9), (0.0, 0.0, 1.0, PI)] {
            let axis = Vec3::new(x, y, z);
            let r = axis_angle_to_rotation(axis, a).unwrap();
            let back = Rotation::from_rotation_vector(r.log());
            assert!(geodesic_distance(&r, &back) < 1e-6, "axis {axis:?} angle {a}");
        }
    }

    fn rotation_strategy() -> impl Strategy<Value = Rotation> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, 0.0f64..PI).prop_filter_map("degenerate axis", |(x, y, z, a)| {
            let v = Vec3::new(x, y, z);
            let n = v.norm();
            (n > 1e-3).then(|| axis_angle_to_rotation(v * (1.0 / n), a).unwrap())
        })
    }

    proptest! {
        #[test]
        fn triangle_inequality(a in rotation_strategy(), b in rotation_strategy(), c in rotation_strategy()) {
            prop_assert!(geodesic_distance(&a, &c) <= geodesic_distance(&a, &b) + geodesic_distance(&b, &c) + 1e-8);
        }

        #[test]
        fn left_invariance(q in rotation_strategy(), a in rotation_strategy(), b in rotation_strategy()) {
            let d = geodesic_distance(&a, &b);
            let dq = geodesic_distance(&q.compose(&a), &q.compose(&b));
            prop_assert!((d - dq).abs() < 1e-8);
        }

        #[test]
        fn geodesic_symmetric(a in rotation_strategy(), b in rotation_strategy()) {
            prop_assert_eq!(geodesic_distance(&a, &b), geodesic_distance(&b, &a));
        }

        #[test]
        fn logistic_monotone_and_symmetric(z1 in -30.0f64..30.0, dz in 1e-3f64..10.0) {
            prop_assert!(logistic(z1) < logistic(z1 + dz));
            prop_assert!((logistic(-z1) - (1.0 - logistic(z1))).abs() < 1e-15);
        }
    }
}
