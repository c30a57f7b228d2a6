//! Output cleanup: temporal smoothing of joint rotations and foot pinning
//! during contacts.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::{lerp, mat_to_zxy, mat_vec, norm, sub, two_bone_ik, Vec3};
use crate::motiondata::kinematics::{decode, world_transforms};
use crate::motiondata::{MotionClip, SkeletonDef};
use crate::scalar::Scalar;

pub const DEFAULT_SIGMA_FRAMES: f64 = 1.0;

/// Frames over which a pinned target fades back to the original path.
const BLEND_FRAMES: usize = 3;

/// Normalized Gaussian weights for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-r..=r).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Half-sample symmetric reflection: `-1 -> 0`, `n -> n - 1`.
fn reflect(i: i64, n: usize) -> usize {
    let period = 2 * n as i64;
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - 1 - m }) as usize
}

/// Smooths every rotation channel along time. Root and contacts are kept.
pub fn gaussian_filter<T: Scalar>(clip: &MotionClip<T>, sigma_frames: f64) -> Result<MotionClip<T>> {
    ensure!(
        sigma_frames >= 0.0 && sigma_frames.is_finite(),
        Error::InvalidArgument(format!("sigma_frames must be finite and >= 0, got {sigma_frames}"))
    );
    clip.check_shapes()?;
    let kernel = gaussian_kernel(sigma_frames);
    if kernel.len() == 1 {
        return Ok(clip.clone());
    }
    let r = (kernel.len() / 2) as i64;
    let (n, ch) = (clip.num_frames, clip.rotation_channels());
    let mut out = clip.clone();
    for c in 0..ch {
        for f in 0..n {
            let v: f64 = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * clip.rotations[reflect(f as i64 + k as i64 - r, n) * ch + c].as_f64())
                .sum();
            out.rotations[f * ch + c] = T::lit(v);
        }
    }
    Ok(out)
}

/// What [`ik_foot_cleanup`] did.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IkReport {
    pub contact_runs: usize,
    /// Frames whose target was out of reach and got clamped.
    pub clamped_frames: usize,
    pub drift_before: f64,
    pub drift_after: f64,
}

/// Maximal runs `[start, end]` of frames where `flags` is set.
pub fn contact_runs(flags: &[bool]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (f, &on) in flags.iter().chain(std::iter::once(&false)).enumerate() {
        match (on, start) {
            (true, None) => start = Some(f),
            (false, Some(s)) => {
                runs.push((s, f - 1));
                start = None;
            }
            _ => {}
        }
    }
    runs
}

fn contact_flags<T: Scalar>(contacts: &[T], frames: usize, feet: usize, foot: usize) -> Vec<bool> {
    (0..frames).map(|f| contacts[f * feet + foot].as_f64() > 0.5).collect()
}

/// Mean per-frame displacement of the feet inside contact runs.
pub fn contact_drift<T: Scalar>(positions: &[Vec<Vec3<f64>>], feet: &[usize], contacts: &[T]) -> f64 {
    let n = positions.len();
    let (mut total, mut count) = (0.0, 0usize);
    for (k, &j) in feet.iter().enumerate() {
        for (s, e) in contact_runs(&contact_flags(contacts, n, feet.len(), k)) {
            for f in s + 1..=e {
                total += norm(sub(positions[f][j], positions[f - 1][j]));
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// `(hip, knee, ankle)` for a foot joint.
fn leg_chain(skel: &SkeletonDef, foot: usize) -> Result<(usize, usize, usize)> {
    let knee = skel.parent(foot);
    let hip = knee.and_then(|k| skel.parent(k));
    match (hip, knee) {
        (Some(h), Some(k)) if skel.parent(h).is_some() => Ok((h, k, foot)),
        _ => Err(Error::Data(format!("foot joint {foot} has no hip-knee-ankle chain below the root"))),
    }
}

/// Pins each foot to the mean world position of every contact run using
/// two-bone IK on its leg, fading in and out over three frames around the
/// run. `contacts` is frames x feet, `clip` is in physical units.
pub fn ik_foot_cleanup<T: Scalar>(
    clip: &MotionClip<T>,
    skel: &SkeletonDef,
    contacts: &[T],
    frame_time: f64,
) -> Result<(MotionClip<T>, IkReport)> {
    clip.check_shapes()?;
    let (n, feet) = (clip.num_frames, &skel.foot_joint_indices);
    ensure!(
        clip.num_joints == skel.num_joints() && contacts.len() == n * feet.len(),
        Error::Shape("clip, skeleton and contacts disagree".into())
    );
    let mut motion = decode(clip, frame_time);
    let before = world_transforms(skel, &motion).0;
    let mut report = IkReport { drift_before: contact_drift(&before, feet, contacts), ..Default::default() };
    let mut out = clip.clone();

    for (k, &foot) in feet.iter().enumerate() {
        let (hip, knee, ankle) = leg_chain(skel, foot)?;
        let runs = contact_runs(&contact_flags(contacts, n, feet.len(), k));
        report.contact_runs += runs.len();
        // (target, weight) per frame; the strongest pull wins
        let mut targets: Vec<Option<(Vec3<f64>, f64)>> = vec![None; n];
        for &(s, e) in &runs {
            let mut mean = [0.0; 3];
            for p in &before[s..=e] {
                mean = [mean[0] + p[ankle][0], mean[1] + p[ankle][1], mean[2] + p[ankle][2]];
            }
            let m = 1.0 / (e - s + 1) as f64;
            let mean = [mean[0] * m, mean[1] * m, mean[2] * m];
            let lo = s.saturating_sub(BLEND_FRAMES);
            let hi = (e + BLEND_FRAMES).min(n - 1);
            for (f, slot) in targets.iter_mut().enumerate().take(hi + 1).skip(lo) {
                let d = if f < s { s - f } else { f.saturating_sub(e) };
                let w = 1.0 - d as f64 / (BLEND_FRAMES + 1) as f64;
                if slot.is_none_or(|(_, old)| w > old) {
                    *slot = Some((mean, w));
                }
            }
        }
        for (f, t) in targets.iter().enumerate() {
            let Some((pin, w)) = *t else { continue };
            let (pos, world) = world_transforms(skel, &motion.slice(f, 1));
            let (pos, world) = (&pos[0], &world[0]);
            let target = lerp(pos[ankle], pin, w);
            let side = mat_vec(&world[0], [1.0, 0.0, 0.0]);
            let sol = two_bone_ik(
                pos[hip],
                pos[knee],
                pos[ankle],
                target,
                &world[hip],
                &world[knee],
                &motion.rotations[f][hip],
                &motion.rotations[f][knee],
                side,
            );
            report.clamped_frames += sol.clamped as usize;
            motion.rotations[f][hip] = sol.upper_local;
            motion.rotations[f][knee] = sol.lower_local;
            for (j, m) in [(hip, &sol.upper_local), (knee, &sol.lower_local)] {
                let a = mat_to_zxy(m);
                for (i, v) in a.iter().enumerate() {
                    out.rotations[(f * clip.num_joints + j) * 3 + i] = T::lit(*v);
                }
            }
        }
    }
    let after = world_transforms(skel, &decode(&out, frame_time)).0;
    report.drift_after = contact_drift(&after, feet, contacts);
    Ok((out, report))
}
