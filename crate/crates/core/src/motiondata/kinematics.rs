//! Forward kinematics and the conversion between world-space motion and the
//! clip representation (local rotations plus a root trajectory).
//!
//! Root channels per frame are `[v_x, v_z, height, omega]`: planar velocity
//! expressed in the frame of the accumulated heading, world height, and yaw
//! rate. Headings are measured relative to frame 0, so decoding starts at the
//! planar origin with the clip's own initial root orientation.

use serde::{Deserialize, Serialize};

use crate::geometry::{
    add, heading, identity, mat_mul, mat_to_zxy, mat_vec, norm, rot_y, sub, wrap_angle, zxy_to_mat,
    Mat3, Vec3,
};
use crate::scalar::Scalar;

use super::skeleton::SkeletonDef;
use super::{MotionClip, ROOT_DIMS};

/// Root translation and local joint rotations (the root's is its world rotation).
#[derive(Debug, Clone, PartialEq)]
pub struct WorldMotion {
    pub root_pos: Vec<Vec3<f64>>,
    pub rotations: Vec<Vec<Mat3<f64>>>,
}

impl WorldMotion {
    pub fn num_frames(&self) -> usize {
        self.root_pos.len()
    }

    pub fn slice(&self, start: usize, len: usize) -> WorldMotion {
        WorldMotion {
            root_pos: self.root_pos[start..start + len].to_vec(),
            rotations: self.rotations[start..start + len].to_vec(),
        }
    }

    /// Rotates about the vertical axis so frame 0 faces +Z and moves frame 0's
    /// root to the planar origin. Height is untouched.
    pub fn canonicalize(&self) -> WorldMotion {
        let Some(first) = self.root_pos.first() else {
            return self.clone();
        };
        let turn = rot_y(-heading(&self.rotations[0][0]));
        let origin = [first[0], 0.0, first[2]];
        let root_pos = self.root_pos.iter().map(|&p| mat_vec(&turn, sub(p, origin))).collect();
        let rotations = self
            .rotations
            .iter()
            .map(|rots| {
                let mut r = rots.clone();
                r[0] = mat_mul(&turn, &rots[0]);
                r
            })
            .collect();
        WorldMotion { root_pos, rotations }
    }
}

/// World joint positions and rotations for every frame.
pub fn world_transforms(
    skel: &SkeletonDef,
    motion: &WorldMotion,
) -> (Vec<Vec<Vec3<f64>>>, Vec<Vec<Mat3<f64>>>) {
    let nj = skel.num_joints();
    let mut positions = Vec::with_capacity(motion.num_frames());
    let mut world = Vec::with_capacity(motion.num_frames());
    for (root, local) in motion.root_pos.iter().zip(&motion.rotations) {
        let mut p: Vec<Vec3<f64>> = Vec::with_capacity(nj);
        let mut r: Vec<Mat3<f64>> = Vec::with_capacity(nj);
        for j in 0..nj {
            match skel.parent(j) {
                None => {
                    p.push(*root);
                    r.push(local[0]);
                }
                Some(q) => {
                    p.push(add(p[q], mat_vec(&r[q], skel.offsets[j])));
                    r.push(mat_mul(&r[q], &local[j]));
                }
            }
        }
        positions.push(p);
        world.push(r);
    }
    (positions, world)
}

pub fn positions(skel: &SkeletonDef, motion: &WorldMotion) -> Vec<Vec<Vec3<f64>>> {
    world_transforms(skel, motion).0
}

/// Splits world motion into `(rotations, root)` arrays laid out like a clip:
/// frames x joints x 3 Euler `Z X Y` angles and frames x 4 root channels.
pub fn encode(motion: &WorldMotion, frame_time: f64) -> (Vec<f64>, Vec<f64>) {
    let n = motion.num_frames();
    let nj = motion.rotations.first().map_or(0, Vec::len);
    let h0 = motion.rotations.first().map_or(0.0, |r| heading(&r[0]));
    let mut rel = Vec::with_capacity(n);
    let mut prev = h0;
    let mut acc = 0.0;
    for r in &motion.rotations {
        let h = heading(&r[0]);
        acc += wrap_angle(h - prev);
        prev = h;
        rel.push(acc);
    }

    let mut rotations = Vec::with_capacity(n * nj * 3);
    for (f, rots) in motion.rotations.iter().enumerate() {
        let root_local = mat_mul(&rot_y(-rel[f]), &rots[0]);
        rotations.extend(mat_to_zxy(&root_local));
        for r in &rots[1..] {
            rotations.extend(mat_to_zxy(r));
        }
    }

    let mut root = Vec::with_capacity(n * ROOT_DIMS);
    for f in 0..n {
        let k = if f + 1 < n { f } else { f.saturating_sub(1) };
        let (vx, vz, omega) = if n > 1 {
            let d = sub(motion.root_pos[k + 1], motion.root_pos[k]);
            let v = mat_vec(&rot_y(-rel[k]), [d[0], 0.0, d[2]]);
            (v[0] / frame_time, v[2] / frame_time, (rel[k + 1] - rel[k]) / frame_time)
        } else {
            (0.0, 0.0, 0.0)
        };
        root.extend([vx, vz, motion.root_pos[f][1], omega]);
    }
    (rotations, root)
}

/// Integrates the root channels of a clip into world root positions and rotations.
pub fn decode_root<T: Scalar>(clip: &MotionClip<T>, frame_time: f64) -> (Vec<Vec3<f64>>, Vec<Mat3<f64>>) {
    let n = clip.num_frames;
    let mut pos = Vec::with_capacity(n);
    let mut rot = Vec::with_capacity(n);
    let mut h = 0.0;
    let mut p = [0.0, 0.0, 0.0];
    for f in 0..n {
        let r = clip.root_at(f);
        p[1] = r[2];
        pos.push(p);
        let turn = rot_y(h);
        rot.push(mat_mul(&turn, &zxy_to_mat(clip.joint_angles(f, 0))));
        let step = mat_vec(&turn, [r[0] * frame_time, 0.0, r[1] * frame_time]);
        p = [p[0] + step[0], 0.0, p[2] + step[2]];
        h += r[3] * frame_time;
    }
    (pos, rot)
}

pub fn decode<T: Scalar>(clip: &MotionClip<T>, frame_time: f64) -> WorldMotion {
    let (root_pos, root_rot) = decode_root(clip, frame_time);
    let rotations = (0..clip.num_frames)
        .map(|f| {
            let mut r = vec![identity(); clip.num_joints];
            r[0] = root_rot[f];
            for (j, m) in r.iter_mut().enumerate().skip(1) {
                *m = zxy_to_mat(clip.joint_angles(f, j));
            }
            r
        })
        .collect();
    WorldMotion { root_pos, rotations }
}

/// World positions (frames x joints) of a de-normalized clip.
pub fn forward_kinematics<T: Scalar>(skel: &SkeletonDef, clip: &MotionClip<T>, frame_time: f64) -> Vec<Vec<Vec3<f64>>> {
    positions(skel, &decode(clip, frame_time))
}

/// Height and speed limits below which a foot counts as planted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactThresholds {
    pub height: f64,
    /// Units per second.
    pub speed: f64,
}

impl ContactThresholds {
    /// Foot rest height plus 10% of leg length, and 5% of the mean root speed.
    /// The speed limit never drops below 5% of a leg length per second.
    pub fn calibrated(skel: &SkeletonDef, mean_root_speed: f64) -> Self {
        let leg = skel.leg_length();
        let rest = skel
            .foot_joint_indices
            .first()
            .map_or(0.0, |&f| skel.rest_height_above_ground(f));
        ContactThresholds {
            height: rest + 0.1 * leg,
            speed: (0.05 * mean_root_speed).max(0.05 * leg),
        }
    }
}

/// Mean planar root speed over all frames of all motions.
pub fn mean_root_speed(motions: &[WorldMotion], frame_time: f64) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for m in motions {
        for w in m.root_pos.windows(2) {
            let d = sub(w[1], w[0]);
            total += (d[0] * d[0] + d[2] * d[2]).sqrt() / frame_time;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Contact flags laid out frames x feet. Speed is the backward difference,
/// or the forward difference on the first frame.
pub fn detect_foot_contacts(
    positions: &[Vec<Vec3<f64>>],
    feet: &[usize],
    thresholds: ContactThresholds,
    frame_time: f64,
) -> Vec<f64> {
    let n = positions.len();
    let mut out = Vec::with_capacity(n * feet.len());
    for f in 0..n {
        for &j in feet {
            let p = positions[f][j];
            let speed = if n < 2 {
                0.0
            } else if f == 0 {
                norm(sub(positions[1][j], p)) / frame_time
            } else {
                norm(sub(p, positions[f - 1][j])) / frame_time
            };
            let planted = p[1] < thresholds.height && speed < thresholds.speed;
            out.push(if planted { 1.0 } else { 0.0 });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::dot;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const DT: f64 = 1.0 / 30.0;

    fn random_motion(skel: &SkeletonDef, frames: usize, seed: u64) -> WorldMotion {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut root_pos = Vec::new();
        let mut rotations = Vec::new();
        for _ in 0..frames {
            root_pos.push([rng.random_range(-2.0..2.0), rng.random_range(0.5..1.5), rng.random_range(-2.0..2.0)]);
            rotations.push(
                (0..skel.num_joints())
                    .map(|_| {
                        zxy_to_mat([
                            rng.random_range(-3.0..3.0),
                            rng.random_range(-1.4..1.4),
                            rng.random_range(-3.0..3.0),
                        ])
                    })
                    .collect(),
            );
        }
        WorldMotion { root_pos, rotations }
    }

    fn clip_from(motion: &WorldMotion) -> MotionClip<f64> {
        let (rot, root) = encode(motion, DT);
        let n = motion.num_frames();
        MotionClip::new(n, motion.rotations[0].len(), 0, rot, root, vec![], 0, 0).unwrap()
    }

    #[test]
    fn encode_decode_roundtrip_from_origin() {
        let skel = SkeletonDef::synthetic();
        let m = random_motion(&skel, 12, 3);
        let mut m = m;
        let first = m.root_pos[0];
        for p in &mut m.root_pos {
            p[0] -= first[0];
            p[2] -= first[2];
        }
        let back = decode(&clip_from(&m), DT);
        for f in 0..m.num_frames() {
            for k in 0..3 {
                assert!((back.root_pos[f][k] - m.root_pos[f][k]).abs() < 1e-9);
            }
            for j in 0..skel.num_joints() {
                for (a, b) in back.rotations[f][j].iter().flatten().zip(m.rotations[f][j].iter().flatten()) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn zero_rotations_and_velocity_give_rest_pose() {
        let skel = SkeletonDef::synthetic();
        let n = 4;
        let nj = skel.num_joints();
        let root: Vec<f64> = (0..n).flat_map(|_| [0.0, 0.0, 1.0, 0.0]).collect();
        let clip = MotionClip::new(n, nj, 0, vec![0.0; n * nj * 3], root, vec![], 0, 0).unwrap();
        let pos = forward_kinematics(&skel, &clip, DT);
        let rest = skel.rest_positions();
        for frame in &pos {
            for (p, r) in frame.iter().zip(&rest) {
                assert!((p[0] - r[0]).abs() < 1e-12 && (p[1] - r[1] - 1.0).abs() < 1e-12 && (p[2] - r[2]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_velocity_integrates_linearly() {
        let skel = SkeletonDef::synthetic();
        let n = 10;
        let nj = skel.num_joints();
        let root: Vec<f64> = (0..n).flat_map(|_| [0.3, 1.5, 0.9, 0.0]).collect();
        let clip = MotionClip::new(n, nj, 0, vec![0.0; n * nj * 3], root, vec![], 0, 0).unwrap();
        let pos = forward_kinematics(&skel, &clip, DT);
        for (k, frame) in pos.iter().enumerate() {
            assert!((frame[0][0] - 0.3 * k as f64 * DT).abs() < 1e-12);
            assert!((frame[0][2] - 1.5 * k as f64 * DT).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn fk_preserves_bone_lengths(seed in 0u64..1000, yaw in -3.1f64..3.1) {
            let skel = SkeletonDef::synthetic();
            let mut m = random_motion(&skel, 3, seed);
            for r in &mut m.rotations {
                r[0] = mat_mul(&rot_y(yaw), &r[0]);
            }
            let pos = positions(&skel, &m);
            for frame in &pos {
                for j in 1..skel.num_joints() {
                    let p = skel.parent(j).unwrap();
                    let d = norm(sub(frame[j], frame[p]));
                    prop_assert!((d - norm(skel.offsets[j])).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn canonical_motion_faces_forward_at_origin() {
        let skel = SkeletonDef::synthetic();
        let m = random_motion(&skel, 5, 9).canonicalize();
        assert!(heading(&m.rotations[0][0]).abs() < 1e-9);
        assert!(m.root_pos[0][0].abs() < 1e-12 && m.root_pos[0][2].abs() < 1e-12);
        let f = mat_vec(&m.rotations[0][0], [0.0, 0.0, 1.0]);
        assert!(f[0].abs() < 1e-9 && dot(f, [0.0, 0.0, 1.0]) >= 0.0);
    }

    #[test]
    fn contact_detection_extremes() {
        let th = ContactThresholds { height: 0.1, speed: 0.2 };
        let grounded: Vec<Vec<Vec3<f64>>> = (0..6).map(|_| vec![[0.3, 0.0, 0.2]]).collect();
        assert!(detect_foot_contacts(&grounded, &[0], th, DT).iter().all(|&c| c == 1.0));
        let high: Vec<Vec<Vec3<f64>>> = (0..6).map(|_| vec![[0.3, 1.0, 0.2]]).collect();
        assert!(detect_foot_contacts(&high, &[0], th, DT).iter().all(|&c| c == 0.0));
        let sliding: Vec<Vec<Vec3<f64>>> = (0..6).map(|k| vec![[k as f64 * 0.1, 0.0, 0.0]]).collect();
        assert!(detect_foot_contacts(&sliding, &[0], th, DT).iter().all(|&c| c == 0.0));
    }
}
