//! Rotation and rigid/scaled transform primitives.
//!
//! All quantities are `f64`. Euler angles follow the `R = Rz * Ry * Rx`
//! convention: the x rotation (bone twist) is applied first, in the joint's
//! local frame.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Result, RigError};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Euler angles in radians, applied X first, then Y, then Z.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EulerXYZ {
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
}

impl EulerXYZ {
    pub const ZERO: EulerXYZ = EulerXYZ {
        rx: 0.0,
        ry: 0.0,
        rz: 0.0,
    };

    pub fn new(rx: f64, ry: f64, rz: f64) -> Self {
        Self { rx, ry, rz }
    }

    pub fn from_degrees(deg: [f64; 3]) -> Self {
        Self::new(deg[0].to_radians(), deg[1].to_radians(), deg[2].to_radians())
    }

    pub fn to_degrees(self) -> [f64; 3] {
        [self.rx.to_degrees(), self.ry.to_degrees(), self.rz.to_degrees()]
    }

    pub fn to_matrix(self) -> Mat3 {
        rot_z(self.rz) * rot_y(self.ry) * rot_x(self.rx)
    }

    /// Inverse of [`EulerXYZ::to_matrix`] with `ry` in `[-π/2, π/2]`.
    pub fn from_matrix(r: &Mat3) -> Self {
        let ry = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
        if r[(2, 0)].abs() < 1.0 - 1e-12 {
            Self::new(r[(2, 1)].atan2(r[(2, 2)]), ry, r[(1, 0)].atan2(r[(0, 0)]))
        } else {
            // gimbal lock: fold the x rotation into z
            Self::new(0.0, ry, (-r[(0, 1)]).atan2(r[(1, 1)]))
        }
    }

    /// Partial derivatives of [`EulerXYZ::to_matrix`] with respect to
    /// `rx`, `ry` and `rz`.
    pub fn matrix_partials(self) -> [Mat3; 3] {
        let (rx, ry, rz) = (rot_x(self.rx), rot_y(self.ry), rot_z(self.rz));
        [
            rz * ry * d_rot_x(self.rx),
            rz * d_rot_y(self.ry) * rx,
            d_rot_z(self.rz) * ry * rx,
        ]
    }
}

pub fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn d_rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn d_rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn d_rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// Similarity transform `x -> scale * rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform3 {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub scale: f64,
}

impl Default for Transform3 {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Transform3 {
    pub const IDENTITY: Transform3 = Transform3 {
        rotation: Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0),
        translation: Vector3::new(0.0, 0.0, 0.0),
        scale: 1.0,
    };

    pub fn new(rotation: Mat3, translation: Vec3, scale: f64) -> Self {
        Self {
            rotation,
            translation,
            scale,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            translation: t,
            ..Self::IDENTITY
        }
    }

    pub fn from_rotation(r: Mat3) -> Self {
        Self {
            rotation: r,
            ..Self::IDENTITY
        }
    }

    pub fn from_scale(s: f64) -> Self {
        Self {
            scale: s,
            ..Self::IDENTITY
        }
    }

    /// `self ∘ other`: applying the result equals `self(other(x))`.
    pub fn compose(&self, other: &Transform3) -> Transform3 {
        Transform3 {
            rotation: self.rotation * other.rotation,
            translation: self.translation + self.scale * (self.rotation * other.translation),
            scale: self.scale * other.scale,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn inverse(&self) -> Transform3 {
        let rt = self.rotation.transpose();
        let inv_s = 1.0 / self.scale;
        Transform3 {
            rotation: rt,
            translation: -(inv_s * (rt * self.translation)),
            scale: inv_s,
        }
    }

    /// The 3×3 linear part `scale * rotation`.
    pub fn linear(&self) -> Mat3 {
        self.rotation * self.scale
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.linear());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Re-factors a homogeneous similarity matrix. The linear block must be a
    /// positive multiple of a rotation.
    pub fn from_homogeneous(m: &Matrix4<f64>) -> Result<Transform3> {
        let lin: Mat3 = m.fixed_view::<3, 3>(0, 0).into_owned();
        let det = lin.determinant();
        if !(det > 0.0) || !det.is_finite() {
            return Err(RigError::DegenerateRotation("linear block has non-positive determinant"));
        }
        let scale = det.cbrt();
        Ok(Transform3 {
            rotation: lin / scale,
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
            scale,
        })
    }
}

/// First two columns of a rotation matrix, column-major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation6D(pub [f64; 6]);

impl Rotation6D {
    pub const IDENTITY: Rotation6D = Rotation6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn from_matrix(r: &Mat3) -> Self {
        Rotation6D([r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]])
    }

    /// Gram–Schmidt reconstruction of the full rotation.
    pub fn to_matrix(&self) -> Result<Mat3> {
        let a = Vec3::new(self.0[0], self.0[1], self.0[2]);
        let b = Vec3::new(self.0[3], self.0[4], self.0[5]);
        let na = a.norm();
        if !(na > 1e-12) {
            return Err(RigError::DegenerateRotation("first 6D column is zero"));
        }
        let c0 = a / na;
        let b_perp = b - c0 * c0.dot(&b);
        let nb = b_perp.norm();
        if !(nb > 1e-12 * b.norm().max(1.0)) {
            return Err(RigError::DegenerateRotation("6D columns are parallel or zero"));
        }
        let c1 = b_perp / nb;
        let c2 = c0.cross(&c1);
        Ok(Mat3::from_columns(&[c0, c1, c2]))
    }
}

/// Deviation of the joint's 6D rotation from identity, plus its Jacobian
/// with respect to the three Euler angles (column k is d/d(angle k)).
pub(crate) fn rotation6d_deviation(e: EulerXYZ) -> ([f64; 6], [[f64; 6]; 3]) {
    let r6 = Rotation6D::from_matrix(&e.to_matrix()).0;
    let id = Rotation6D::IDENTITY.0;
    let mut dev = [0.0; 6];
    for k in 0..6 {
        dev[k] = r6[k] - id[k];
    }
    let partials = e.matrix_partials();
    let mut jac = [[0.0; 6]; 3];
    for (k, p) in partials.iter().enumerate() {
        jac[k] = Rotation6D::from_matrix(p).0;
    }
    (dev, jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn euler_from_matrix_round_trips() {
        for e in [EulerXYZ::new(0.3, -0.2, 0.5), EulerXYZ::new(-2.0, 1.2, 3.0), EulerXYZ::new(0.0, FRAC_PI_2, 0.4)] {
            let r = e.to_matrix();
            let back = EulerXYZ::from_matrix(&r).to_matrix();
            assert!((r - back).abs().max() < 1e-12);
        }
    }

    fn max_abs(m: &Mat3) -> f64 {
        m.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
    }

    #[test]
    fn zero_euler_is_identity() {
        assert_eq!(EulerXYZ::ZERO.to_matrix(), Mat3::identity());
    }

    #[test]
    fn quarter_turn_about_x_maps_y_to_z() {
        let r = EulerXYZ::new(FRAC_PI_2, 0.0, 0.0).to_matrix();
        let v = r * Vec3::new(0.0, 1.0, 0.0);
        assert!((v - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn euler_matches_explicit_axis_product() {
        // Axis matrices written out by hand and multiplied element-wise.
        let (a, b, c) = (0.3_f64, -0.2_f64, 0.5_f64);
        let rx = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
        let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
        let rz = [[c.cos(), -c.sin(), 0.0], [c.sin(), c.cos(), 0.0], [0.0, 0.0, 1.0]];
        let mul = |x: &[[f64; 3]; 3], y: &[[f64; 3]; 3]| {
            let mut o = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        o[i][j] += x[i][k] * y[k][j];
                    }
                }
            }
            o
        };
        let expected = mul(&mul(&rz, &ry), &rx);
        let got = EulerXYZ::new(a, b, c).to_matrix();
        for i in 0..3 {
            for j in 0..3 {
                assert!((got[(i, j)] - expected[i][j]).abs() < 1e-15);
            }
        }
        // frozen values of the product above
        assert!((got[(0, 0)] - 0.860_089_338_205_047_3).abs() < 1e-12);
        assert!((got[(2, 1)] - 0.289_629_477_625_515_55).abs() < 1e-12);
    }

    #[test]
    fn euler_partials_match_finite_differences() {
        let e = EulerXYZ::new(0.7, -1.1, 0.4);
        let p = e.matrix_partials();
        let h = 1e-6;
        for k in 0..3 {
            let mut ep = e;
            let mut em = e;
            match k {
                0 => {
                    ep.rx += h;
                    em.rx -= h
                }
                1 => {
                    ep.ry += h;
                    em.ry -= h
                }
                _ => {
                    ep.rz += h;
                    em.rz -= h
                }
            }
            let fd = (ep.to_matrix() - em.to_matrix()) / (2.0 * h);
            assert!(max_abs(&(fd - p[k])) < 1e-9);
        }
    }

    #[test]
    fn compose_identity_and_translations() {
        let t = Transform3::new(EulerXYZ::new(0.1, 0.2, 0.3).to_matrix(), Vec3::new(1.0, 2.0, 3.0), 1.5);
        assert_eq!(Transform3::IDENTITY.compose(&t), t);
        let a = Transform3::from_translation(Vec3::new(1.0, 0.0, 0.0));
        let b = Transform3::from_translation(Vec3::new(0.0, 2.0, 0.0));
        assert_eq!(a.compose(&b).translation, Vec3::new(1.0, 2.0, 0.0));
    }

    #[test]
    fn inverse_composes_to_identity() {
        let t = Transform3::new(EulerXYZ::new(0.4, -0.9, 2.0).to_matrix(), Vec3::new(0.3, -2.0, 1.0), 0.7);
        let i = t.compose(&t.inverse());
        assert!(max_abs(&(i.rotation - Mat3::identity())) < 1e-14);
        assert!(i.translation.norm() < 1e-14);
        assert!((i.scale - 1.0).abs() < 1e-15);
    }

    #[test]
    fn six_d_known_values() {
        assert_eq!(Rotation6D::from_matrix(&Mat3::identity()).0, [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let r = Rotation6D::from_matrix(&rot_z(FRAC_PI_2)).0;
        let expected = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0];
        for k in 0..6 {
            assert!((r[k] - expected[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn six_d_rejects_degenerate_input() {
        assert!(Rotation6D([0.0; 6]).to_matrix().is_err());
        assert!(Rotation6D([1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).to_matrix().is_err());
    }

    #[test]
    fn homogeneous_refactor_roundtrip() {
        let t = Transform3::new(EulerXYZ::new(-0.4, 0.9, 0.1).to_matrix(), Vec3::new(1.0, -1.0, 0.5), 2.0);
        let back = Transform3::from_homogeneous(&t.to_homogeneous()).unwrap();
        assert!(max_abs(&(back.rotation - t.rotation)) < 1e-14);
        assert!((back.scale - 2.0).abs() < 1e-14);
    }
}
