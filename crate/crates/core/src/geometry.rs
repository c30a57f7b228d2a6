//! Small fixed-size vector and rotation helpers for skeletal kinematics.
//!
//! Coordinates are Y-up. Euler angles use the `Z X Y` channel order common in
//! BVH files: `R = Rz(z) · Rx(x) · Ry(y)`.

use crate::scalar::Scalar;

pub type Vec3<T> = [T; 3];
pub type Mat3<T> = [[T; 3]; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

pub fn add<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale<T: Scalar>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm<T: Scalar>(a: Vec3<T>) -> T {
    dot(a, a).sqrt()
}

pub fn normalize<T: Scalar>(a: Vec3<T>) -> Vec3<T> {
    let n = norm(a);
    if n > T::zero() {
        scale(a, T::one() / n)
    } else {
        a
    }
}

pub fn lerp<T: Scalar>(a: Vec3<T>, b: Vec3<T>, w: T) -> Vec3<T> {
    add(a, scale(sub(b, a), w))
}

pub fn identity<T: Scalar>() -> Mat3<T> {
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

pub fn mat_mul<T: Scalar>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn mat_vec<T: Scalar>(a: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [dot(a[0], v), dot(a[1], v), dot(a[2], v)]
}

pub fn transpose<T: Scalar>(a: &Mat3<T>) -> Mat3<T> {
    [
        [a[0][0], a[1][0], a[2][0]],
        [a[0][1], a[1][1], a[2][1]],
        [a[0][2], a[1][2], a[2][2]],
    ]
}

pub fn rot_axis<T: Scalar>(axis: Axis, angle: T) -> Mat3<T> {
    let (s, c) = angle.sin_cos();
    let (o, z) = (T::one(), T::zero());
    match axis {
        Axis::X => [[o, z, z], [z, c, -s], [z, s, c]],
        Axis::Y => [[c, z, s], [z, o, z], [-s, z, c]],
        Axis::Z => [[c, -s, z], [s, c, z], [z, z, o]],
    }
}

pub fn rot_y<T: Scalar>(angle: T) -> Mat3<T> {
    rot_axis(Axis::Y, angle)
}

/// Product of elementary rotations applied in the listed (intrinsic) order.
pub fn euler_to_mat<T: Scalar>(order: &[Axis; 3], angles: [T; 3]) -> Mat3<T> {
    let m = mat_mul(&rot_axis(order[0], angles[0]), &rot_axis(order[1], angles[1]));
    mat_mul(&m, &rot_axis(order[2], angles[2]))
}

/// `Rz(zxy[0]) · Rx(zxy[1]) · Ry(zxy[2])`.
pub fn zxy_to_mat<T: Scalar>(zxy: [T; 3]) -> Mat3<T> {
    euler_to_mat(&[Axis::Z, Axis::X, Axis::Y], zxy)
}

/// Inverse of [`zxy_to_mat`] with `x` in `[-pi/2, pi/2]`.
pub fn mat_to_zxy<T: Scalar>(m: &Mat3<T>) -> [T; 3] {
    let sx = m[2][1].max(-T::one()).min(T::one());
    let x = sx.asin();
    if sx.abs() < T::lit(1.0 - 1e-9) {
        let z = (-m[0][1]).atan2(m[1][1]);
        let y = (-m[2][0]).atan2(m[2][2]);
        [z, x, y]
    } else {
        // gimbal lock: only z + y (or z - y) is defined
        let z = m[1][0].atan2(m[0][0]);
        [z, x, T::zero()]
    }
}

/// Rodrigues rotation about a unit axis.
pub fn axis_angle<T: Scalar>(axis: Vec3<T>, angle: T) -> Mat3<T> {
    let [x, y, z] = normalize(axis);
    let (s, c) = angle.sin_cos();
    let t = T::one() - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Yaw of the rotated forward (+Z) axis, `atan2(f.x, f.z)`.
pub fn heading<T: Scalar>(m: &Mat3<T>) -> T {
    let f = mat_vec(m, [T::zero(), T::zero(), T::one()]);
    f[0].atan2(f[2])
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle<T: Scalar>(a: T) -> T {
    let two_pi = T::PI() + T::PI();
    let mut r = a % two_pi;
    if r > T::PI() {
        r -= two_pi;
    } else if r <= -T::PI() {
        r += two_pi;
    }
    r
}

/// Result of [`two_bone_ik`].
#[derive(Debug, Clone, Copy)]
pub struct TwoBoneSolution<T> {
    pub upper_local: Mat3<T>,
    pub lower_local: Mat3<T>,
    /// The target lay beyond the chain's reach and was pulled in.
    pub clamped: bool,
}

/// Analytic two-bone inverse kinematics.
///
/// `a`, `b`, `c` are the world positions of the upper joint (hip), middle
/// joint (knee) and end effector (ankle); `a_world`/`b_world` are the world
/// rotations of the upper and middle joints, `a_local`/`b_local` their local
/// rotations. Only the two local rotations change, so segment lengths are
/// preserved exactly. `bend_hint` is used as the bend axis when the chain is
/// fully straight.
#[allow(clippy::too_many_arguments)]
pub fn two_bone_ik<T: Scalar>(
    a: Vec3<T>,
    b: Vec3<T>,
    c: Vec3<T>,
    target: Vec3<T>,
    a_world: &Mat3<T>,
    b_world: &Mat3<T>,
    a_local: &Mat3<T>,
    b_local: &Mat3<T>,
    bend_hint: Vec3<T>,
) -> TwoBoneSolution<T> {
    let eps = T::lit(1e-6);
    let clampc = |v: T| v.max(-T::one()).min(T::one());
    let lab = norm(sub(b, a));
    let lcb = norm(sub(b, c));
    let reach = norm(sub(target, a));
    let max_reach = lab + lcb - eps;
    let clamped = reach > max_reach;
    let lat = reach.max(eps).min(max_reach);

    let ac = normalize(sub(c, a));
    let ab = normalize(sub(b, a));
    let ba = normalize(sub(a, b));
    let bc = normalize(sub(c, b));
    let at = normalize(sub(target, a));

    let ac_ab_0 = clampc(dot(ac, ab)).acos();
    let ba_bc_0 = clampc(dot(ba, bc)).acos();
    let ac_ab_1 = clampc((lcb * lcb - lab * lab - lat * lat) / (-(lab + lab) * lat)).acos();
    let ba_bc_1 = clampc((lat * lat - lab * lab - lcb * lcb) / (-(lab + lab) * lcb)).acos();

    let mut axis0 = cross(sub(c, a), sub(b, a));
    if norm(axis0) < T::lit(1e-9) * lab * lab {
        axis0 = bend_hint;
    }
    let axis0 = normalize(axis0);
    let a_inv = transpose(a_world);
    let b_inv = transpose(b_world);

    let r0 = axis_angle(mat_vec(&a_inv, axis0), ac_ab_1 - ac_ab_0);
    let r1 = axis_angle(mat_vec(&b_inv, axis0), ba_bc_1 - ba_bc_0);

    // Swing the (re-bent) chain so the effector direction points at the target.
    let axis1 = cross(sub(c, a), sub(target, a));
    let r2 = if norm(axis1) > T::lit(1e-12) {
        let ac_at_0 = clampc(dot(ac, at)).acos();
        axis_angle(mat_vec(&a_inv, normalize(axis1)), ac_at_0)
    } else {
        identity()
    };
    TwoBoneSolution {
        upper_local: mat_mul(a_local, &mat_mul(&r2, &r0)),
        lower_local: mat_mul(b_local, &r1),
        clamped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &Mat3<f64>, b: &Mat3<f64>, tol: f64) -> bool {
        (0..3).all(|i| (0..3).all(|j| (a[i][j] - b[i][j]).abs() < tol))
    }

    proptest! {
        #[test]
        fn zxy_roundtrip(z in -3.1f64..3.1, x in -1.5f64..1.5, y in -3.1f64..3.1) {
            let m = zxy_to_mat([z, x, y]);
            let back = mat_to_zxy(&m);
            prop_assert!(close(&zxy_to_mat(back), &m, 1e-12));
            prop_assert!((back[0] - z).abs() < 1e-9);
            prop_assert!((back[1] - x).abs() < 1e-9);
            prop_assert!((back[2] - y).abs() < 1e-9);
        }

        #[test]
        fn axis_angle_is_orthonormal(ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in 0.1f64..1.0, ang in -3.0f64..3.0) {
            let r = axis_angle([ax, ay, az], ang);
            prop_assert!(close(&mat_mul(&r, &transpose(&r)), &identity(), 1e-12));
        }
    }

    #[test]
    fn heading_of_yaw() {
        for a in [-2.0f64, -0.5, 0.0, 0.7, 3.0] {
            assert!((heading(&rot_y(a)) - a).abs() < 1e-12);
        }
        assert!((wrap_angle(3.0 * std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
    }

    fn chain(hip: &Mat3<f64>, knee: &Mat3<f64>) -> (Vec3<f64>, Vec3<f64>, Vec3<f64>) {
        let a = [0.0, 1.0, 0.0];
        let b = add(a, mat_vec(hip, [0.0, -0.45, 0.0]));
        let kw = mat_mul(hip, knee);
        let c = add(b, mat_vec(&kw, [0.0, -0.42, 0.0]));
        (a, b, c)
    }

    #[test]
    fn two_bone_reaches_reachable_targets() {
        let hip = identity();
        let knee = rot_axis(Axis::X, 0.3);
        let (a, b, c) = chain(&hip, &knee);
        for target in [[0.05, 0.3, 0.2], [-0.1, 0.25, -0.15], [0.0, 0.5, 0.0], c] {
            let kw = mat_mul(&hip, &knee);
            let sol = two_bone_ik(a, b, c, target, &hip, &kw, &hip, &knee, [1.0, 0.0, 0.0]);
            assert!(!sol.clamped);
            let (a2, b2, c2) = chain(&sol.upper_local, &sol.lower_local);
            assert!(norm(sub(c2, target)) < 1e-9, "missed {target:?}");
            assert!((norm(sub(b2, a2)) - 0.45).abs() < 1e-12);
            assert!((norm(sub(c2, b2)) - 0.42).abs() < 1e-12);
        }
    }

    #[test]
    fn two_bone_clamps_out_of_reach() {
        let hip = identity();
        let knee = rot_axis(Axis::X, 0.3);
        let (a, b, c) = chain(&hip, &knee);
        let kw = mat_mul(&hip, &knee);
        let sol = two_bone_ik(a, b, c, [0.0, -2.0, 0.0], &hip, &kw, &hip, &knee, [1.0, 0.0, 0.0]);
        assert!(sol.clamped);
        let (_, _, c2) = chain(&sol.upper_local, &sol.lower_local);
        assert!((norm(sub(c2, a)) - 0.87).abs() < 1e-4);
    }
}
