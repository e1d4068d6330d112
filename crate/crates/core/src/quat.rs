//! Quaternion helpers shared by the splatting and rendering kernels.
//!
//! Quaternions are stored scalar-first: `[w, x, y, z]`. Raw (optimizable)
//! quaternions may be unnormalized; they are normalized on use, and gradients
//! are pulled back through the normalization.

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector4};

pub const MIN_QUAT_NORM: f64 = 1e-8;

pub fn norm(q: [f64; 4]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn normalize(q: [f64; 4]) -> [f64; 4] {
    let n = norm(q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

pub fn to_unit_quaternion(q: [f64; 4]) -> UnitQuaternion<f64> {
    let u = normalize(q);
    UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(u[0], u[1], u[2], u[3]))
}

pub fn from_unit_quaternion(q: &UnitQuaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

/// Rotation matrix of a unit quaternion `[w, x, y, z]`.
pub fn rotation_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partial derivatives of `rotation_matrix` w.r.t. each unit-quaternion
/// component, treating the polynomial formula as a function on R^4.
pub fn rotation_matrix_jacobian(q: [f64; 4]) -> [Matrix3<f64>; 4] {
    let [w, x, y, z] = q;
    let dw = Matrix3::new(
        0.0, -2.0 * z, 2.0 * y, //
        2.0 * z, 0.0, -2.0 * x, //
        -2.0 * y, 2.0 * x, 0.0,
    );
    let dx = Matrix3::new(
        0.0, 2.0 * y, 2.0 * z, //
        2.0 * y, -4.0 * x, -2.0 * w, //
        2.0 * z, 2.0 * w, -4.0 * x,
    );
    let dy = Matrix3::new(
        -4.0 * y, 2.0 * x, 2.0 * w, //
        2.0 * x, 0.0, 2.0 * z, //
        -2.0 * w, 2.0 * z, -4.0 * y,
    );
    let dz = Matrix3::new(
        -4.0 * z, -2.0 * w, 2.0 * x, //
        2.0 * w, -4.0 * z, 2.0 * y, //
        2.0 * x, 2.0 * y, 0.0,
    );
    [dw, dx, dy, dz]
}

/// Pull a gradient w.r.t. the unit quaternion back to the raw (unnormalized)
/// quaternion: `d(q/|q|)/dq = (I - u u^T) / |q|`.
pub fn normalize_backward(raw: [f64; 4], grad_unit: [f64; 4]) -> [f64; 4] {
    let n = norm(raw);
    let u = Vector4::new(raw[0] / n, raw[1] / n, raw[2] / n, raw[3] / n);
    let g = Vector4::new(grad_unit[0], grad_unit[1], grad_unit[2], grad_unit[3]);
    let out = (g - u * u.dot(&g)) / n;
    [out[0], out[1], out[2], out[3]]
}

/// Hamilton product `a ⊗ b`, scalar-first.
pub fn mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// Matrix of left multiplication by `a`: `mul(a, b) = left_mul_matrix(a) * b`.
pub fn left_mul_matrix(a: [f64; 4]) -> Matrix4<f64> {
    let [w, x, y, z] = a;
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, -z, y, //
        y, z, w, -x, //
        z, -y, x, w,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rotation_is_orthonormal() {
        let q = normalize([0.9, -0.3, 0.2, 0.4]);
        let r = rotation_matrix(q);
        let should_be_identity = r * r.transpose();
        assert_relative_eq!(should_be_identity, Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn matches_nalgebra() {
        let q = [0.5, 0.1, -0.7, 0.2];
        let ours = rotation_matrix(normalize(q));
        let theirs = to_unit_quaternion(q).to_rotation_matrix();
        assert_relative_eq!(ours, *theirs.matrix(), epsilon = 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let q = normalize([0.8, 0.1, -0.4, 0.3]);
        let jac = rotation_matrix_jacobian(q);
        let h = 1e-6;
        for k in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            let fd = (rotation_matrix(qp) - rotation_matrix(qm)) / (2.0 * h);
            assert_relative_eq!(jac[k], fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let raw = [1.3, -0.2, 0.5, 0.9];
        // Scalar function of the unit quaternion: dot with a fixed vector.
        let probe = [0.3, -1.1, 0.7, 0.2];
        let f = |q: [f64; 4]| {
            let u = normalize(q);
            u[0] * probe[0] + u[1] * probe[1] + u[2] * probe[2] + u[3] * probe[3]
        };
        let grad = normalize_backward(raw, probe);
        let h = 1e-6;
        for k in 0..4 {
            let mut qp = raw;
            let mut qm = raw;
            qp[k] += h;
            qm[k] -= h;
            let fd = (f(qp) - f(qm)) / (2.0 * h);
            assert_relative_eq!(grad[k], fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn left_mul_matrix_matches_product() {
        let a = [0.2, 0.5, -0.1, 0.8];
        let b = [1.0, -0.3, 0.4, 0.6];
        let direct = mul(a, b);
        let via_matrix = left_mul_matrix(a) * Vector4::new(b[0], b[1], b[2], b[3]);
        for k in 0..4 {
            assert_relative_eq!(direct[k], via_matrix[k], epsilon = 1e-14);
        }
    }
}
