//! Axis-angle rotations and their derivatives.

use nalgebra::{Matrix3, Rotation3, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this angle the first-order expansion `I + [v]x` is used.
const SMALL_ANGLE: f64 = 1e-12;

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula.
pub fn rodrigues(v: &Vec3) -> Mat3 {
    let theta = v.norm();
    if theta < SMALL_ANGLE {
        return Mat3::identity() + skew(v);
    }
    let k = skew(&(v / theta));
    Mat3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos())
}

/// Partial derivatives of `rodrigues(v)` with respect to each component of `v`.
///
/// Uses the closed form `dR/dv_i = (v_i [v]x + [v x (I - R) e_i]x) R / |v|^2`,
/// which is exact away from the origin; at the origin the derivative is `[e_i]x`.
pub fn rodrigues_jacobian(v: &Vec3) -> [Mat3; 3] {
    let theta2 = v.norm_squared();
    if theta2.sqrt() < 1e-8 {
        return [skew(&Vec3::x()), skew(&Vec3::y()), skew(&Vec3::z())];
    }
    let r = rodrigues(v);
    let vx = skew(v);
    let i_minus_r = Mat3::identity() - r;
    let mut out = [Mat3::zeros(); 3];
    for (i, d) in out.iter_mut().enumerate() {
        let e = i_minus_r.column(i).into_owned();
        *d = (vx * v[i] + skew(&v.cross(&e))) * r / theta2;
    }
    out
}

/// Inverse of [`rodrigues`]: the axis-angle vector of a rotation matrix.
pub fn axis_angle(r: &Mat3) -> Vec3 {
    Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

/// Row-major flattening of a 3x3 matrix.
pub fn flatten_row_major(m: &Mat3) -> [f64; 9] {
    [
        m[(0, 0)],
        m[(0, 1)],
        m[(0, 2)],
        m[(1, 0)],
        m[(1, 1)],
        m[(1, 2)],
        m[(2, 0)],
        m[(2, 1)],
        m[(2, 2)],
    ]
}
