//! Procedural biped motion with analytic foot contacts.
//!
//! The root follows a constant-speed, constant-turn-rate path. Each foot
//! alternates between stance (planted at a fixed world point) and swing
//! (an eased arc to the next plant). Legs are posed with two-bone IK, the
//! upper body with per-style offsets and a little smooth noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};
use crate::geometry::{
    add, identity, lerp, mat_mul, mat_vec, rot_axis, rot_y, transpose, two_bone_ik, Axis, Mat3,
    Vec3,
};
use crate::scalar::Scalar;

use super::dataset::{Dataset, DatasetMeta, DatasetStats};
use super::kinematics::{encode, world_transforms, ContactThresholds, WorldMotion};
use super::skeleton::SkeletonDef;
use super::{MotionClip, FRAME_TIME, WINDOW};

pub const CONTENT_NAMES: [&str; 6] = ["walk", "run", "jump", "kick", "punch", "transition"];
pub const STYLE_NAMES: [&str; 8] =
    ["neutral", "angry", "old", "proud", "depressed", "childlike", "sexy", "strutting"];

const ANKLE_HEIGHT: f64 = 0.06;
const STANDING_HIPS: f64 = 0.98;
const FOOT_SPREAD: f64 = 0.1;
const REACH: f64 = 0.985 * 0.87;
const HIP_OFFSET: [Vec3<f64>; 2] = [[0.09, -0.05, 0.0], [-0.09, -0.05, 0.0]];
const LEGS: [[usize; 3]; 2] = [[11, 12, 13], [15, 16, 17]];

#[derive(Debug, Clone, Copy, PartialEq)]
enum Pattern {
    Gait,
    Jump,
    Kick,
    Punch,
}

#[derive(Debug, Clone, Copy)]
struct Content {
    pattern: Pattern,
    speed: f64,
    freq: f64,
    duty: f64,
    lift: f64,
    bob: f64,
    turn: f64,
    arm_swing: f64,
    elbow: f64,
    lean: f64,
}

const CONTENTS: [Content; 6] = [
    Content { pattern: Pattern::Gait, speed: 1.2, freq: 0.95, duty: 0.62, lift: 0.10, bob: 0.02, turn: 0.0, arm_swing: 0.35, elbow: 0.3, lean: 0.0 },
    Content { pattern: Pattern::Gait, speed: 2.8, freq: 1.45, duty: 0.38, lift: 0.22, bob: 0.04, turn: 0.0, arm_swing: 0.6, elbow: 1.2, lean: 0.15 },
    Content { pattern: Pattern::Jump, speed: 0.6, freq: 1.2, duty: 0.5, lift: 0.25, bob: 0.12, turn: 0.0, arm_swing: 0.9, elbow: 0.4, lean: 0.1 },
    Content { pattern: Pattern::Kick, speed: 0.0, freq: 0.7, duty: 0.35, lift: 0.45, bob: 0.0, turn: 0.0, arm_swing: 0.4, elbow: 0.8, lean: -0.05 },
    Content { pattern: Pattern::Punch, speed: 0.15, freq: 0.8, duty: 0.75, lift: 0.05, bob: 0.01, turn: 0.0, arm_swing: 1.2, elbow: 1.6, lean: 0.1 },
    Content { pattern: Pattern::Gait, speed: 1.0, freq: 0.9, duty: 0.6, lift: 0.1, bob: 0.02, turn: 0.9, arm_swing: 0.35, elbow: 0.3, lean: 0.05 },
];

#[derive(Debug, Clone, Copy)]
struct Style {
    amp: f64,
    freq: f64,
    speed: f64,
    lean: f64,
    head: f64,
    abduction: f64,
    elbow: f64,
    sway: f64,
    crouch: f64,
}

const STYLES: [Style; 8] = [
    Style { amp: 1.0, freq: 1.0, speed: 1.0, lean: 0.05, head: 0.0, abduction: 0.1, elbow: 0.3, sway: 0.03, crouch: 0.0 },
    Style { amp: 1.3, freq: 1.1, speed: 1.1, lean: 0.15, head: 0.1, abduction: 0.25, elbow: 0.6, sway: 0.03, crouch: 0.02 },
    Style { amp: 0.5, freq: 0.8, speed: 0.7, lean: 0.3, head: 0.2, abduction: 0.1, elbow: 0.4, sway: 0.02, crouch: 0.06 },
    Style { amp: 1.1, freq: 0.95, speed: 1.0, lean: -0.1, head: -0.15, abduction: 0.2, elbow: 0.2, sway: 0.04, crouch: 0.0 },
    Style { amp: 0.4, freq: 0.85, speed: 0.75, lean: 0.25, head: 0.4, abduction: 0.05, elbow: 0.2, sway: 0.01, crouch: 0.03 },
    Style { amp: 1.4, freq: 1.25, speed: 0.9, lean: 0.0, head: -0.05, abduction: 0.35, elbow: 0.5, sway: 0.05, crouch: 0.01 },
    Style { amp: 1.0, freq: 0.9, speed: 0.9, lean: -0.05, head: 0.0, abduction: 0.15, elbow: 0.4, sway: 0.12, crouch: 0.0 },
    Style { amp: 1.2, freq: 0.95, speed: 1.05, lean: -0.08, head: -0.1, abduction: 0.3, elbow: 0.3, sway: 0.08, crouch: 0.0 },
];

/// One clip's fully resolved parameters.
struct Params {
    pattern: Pattern,
    speed: f64,
    omega: f64,
    freq: f64,
    duty: f64,
    lift: f64,
    bob: f64,
    arm_swing: f64,
    elbow: f64,
    lean: f64,
    head: f64,
    abduction: f64,
    sway: f64,
    crouch: f64,
    phase: f64,
    /// amplitude, frequency (Hz), phase for each upper-body joint axis
    noise: Vec<[f64; 3]>,
}

impl Params {
    fn draw<R: Rng + ?Sized>(content: usize, style: usize, rng: &mut R) -> Self {
        let c = CONTENTS[content];
        let s = STYLES[style];
        let speed = c.speed * s.speed * rng.random_range(0.9..1.1);
        let freq = c.freq * s.freq * rng.random_range(0.93..1.07);
        let omega = c.turn + rng.random_range(-0.2..0.2);
        let phase = rng.random_range(0.0..1.0);
        let noise = (0..30)
            .map(|_| [rng.random_range(0.0..0.03), rng.random_range(0.3..1.5), rng.random_range(0.0..2.0 * PI)])
            .collect();
        Params {
            pattern: c.pattern,
            speed,
            omega,
            freq,
            duty: c.duty,
            lift: c.lift * s.amp.sqrt(),
            bob: c.bob,
            arm_swing: c.arm_swing * s.amp,
            elbow: c.elbow + s.elbow,
            lean: c.lean + s.lean,
            head: s.head,
            abduction: s.abduction,
            sway: s.sway,
            crouch: s.crouch,
            phase,
            noise,
        }
    }

    fn heading(&self, t: f64) -> f64 {
        self.omega * t
    }

    /// Planar root position at time `t` (closed form of the constant-turn path).
    fn path(&self, t: f64) -> Vec3<f64> {
        let (v, w) = (self.speed, self.omega);
        if w.abs() < 1e-9 {
            [0.0, 0.0, v * t]
        } else {
            let h = w * t;
            [v * (1.0 - h.cos()) / w, 0.0, v * h.sin() / w]
        }
    }

    fn foot_phase(&self, t: f64, foot: usize) -> f64 {
        let offset = match self.pattern {
            Pattern::Jump | Pattern::Kick => 0.0,
            _ => 0.5 * foot as f64,
        };
        self.freq * t + self.phase + offset
    }

    fn foot_duty(&self, foot: usize) -> f64 {
        match (self.pattern, foot) {
            (Pattern::Kick, 0) => 1.0,
            _ => self.duty,
        }
    }

    /// World position of the plant for stance `cycle` of `foot`.
    fn plant(&self, foot: usize, cycle: f64) -> Vec3<f64> {
        let offset = match self.pattern {
            Pattern::Jump | Pattern::Kick => 0.0,
            _ => 0.5 * foot as f64,
        };
        let duty = self.foot_duty(foot);
        // a permanently planted foot never re-plants
        let t_mid = if duty >= 1.0 { 0.0 } else { (cycle + duty / 2.0 - self.phase - offset) / self.freq };
        let side = if foot == 0 { FOOT_SPREAD } else { -FOOT_SPREAD };
        let p = add(self.path(t_mid), mat_vec(&rot_y(self.heading(t_mid)), [side, 0.0, 0.0]));
        [p[0], ANKLE_HEIGHT, p[2]]
    }

    /// Ankle target and contact flag for `foot` at time `t`.
    fn foot(&self, t: f64, foot: usize) -> (Vec3<f64>, bool) {
        let phi = self.foot_phase(t, foot);
        let cycle = phi.floor();
        let u = phi - cycle;
        let duty = self.foot_duty(foot);
        if u < duty {
            return (self.plant(foot, cycle), true);
        }
        let s = (u - duty) / (1.0 - duty);
        let from = self.plant(foot, cycle);
        match self.pattern {
            Pattern::Kick => {
                let lift = (PI * s).sin();
                let fwd = mat_vec(&rot_y(self.heading(t)), [0.0, 0.0, 0.55 * lift]);
                (add(from, [fwd[0], self.lift * lift * lift, fwd[2]]), false)
            }
            _ => {
                let to = self.plant(foot, cycle + 1.0);
                let w = s * s * (3.0 - 2.0 * s);
                let mut p = lerp(from, to, w);
                p[1] += self.lift * (PI * s).sin();
                (p, false)
            }
        }
    }

    fn gait_phase(&self, t: f64) -> f64 {
        2.0 * PI * self.foot_phase(t, 0)
    }

    fn nominal_height(&self, t: f64) -> f64 {
        let base = STANDING_HIPS - 0.03 - self.crouch;
        match self.pattern {
            Pattern::Jump => {
                let u = self.foot_phase(t, 0).rem_euclid(1.0);
                if u < self.duty {
                    base - self.bob * (PI * u / self.duty).sin()
                } else {
                    let s = (u - self.duty) / (1.0 - self.duty);
                    base + self.lift * (PI * s).sin()
                }
            }
            _ => base - self.bob * (0.5 - 0.5 * (2.0 * self.gait_phase(t)).cos()),
        }
    }

    fn noise(&self, t: f64, k: usize) -> f64 {
        let [a, f, p] = self.noise[k];
        a * (2.0 * PI * f * t + p).sin()
    }
}

fn rx(a: f64) -> Mat3<f64> {
    rot_axis(Axis::X, a)
}

fn rz(a: f64) -> Mat3<f64> {
    rot_axis(Axis::Z, a)
}

fn upper_body(p: &Params, t: f64, local: &mut [Mat3<f64>]) {
    let g = p.gait_phase(t);
    let n = |j: usize, t: f64| -> Mat3<f64> {
        let k = 3 * (j - 1);
        let m = mat_mul(&rz(p.noise(t, k)), &rx(p.noise(t, k + 1)));
        mat_mul(&m, &rot_y(p.noise(t, k + 2)))
    };
    let twist = -0.5 * p.sway * g.cos();
    local[1] = mat_mul(&rx(0.4 * p.lean), &n(1, t));
    local[2] = mat_mul(&mat_mul(&rx(0.4 * p.lean), &rot_y(twist)), &n(2, t));
    local[3] = mat_mul(&rx(0.5 * p.head), &n(3, t));
    local[4] = mat_mul(&rx(0.5 * p.head), &n(4, t));

    let (swing_l, swing_r, bend_l, bend_r) = match p.pattern {
        Pattern::Punch => {
            let q = 2.0 * PI * p.freq * t + 2.0 * PI * p.phase;
            let ext_l = q.sin().max(0.0).powi(2);
            let ext_r = (-q.sin()).max(0.0).powi(2);
            (0.3 + p.arm_swing * ext_l, 0.3 + p.arm_swing * ext_r, p.elbow * (1.0 - ext_l), p.elbow * (1.0 - ext_r))
        }
        Pattern::Jump => {
            let up = p.arm_swing * (0.5 - 0.5 * g.cos());
            (up, up, p.elbow, p.elbow)
        }
        _ => {
            let s = p.arm_swing * (g + PI).cos();
            (s, -s, p.elbow + 0.2 * s.max(0.0), p.elbow + 0.2 * (-s).max(0.0))
        }
    };
    local[5] = mat_mul(&mat_mul(&rz(p.abduction), &rx(-swing_l)), &n(5, t));
    local[6] = mat_mul(&rx(-bend_l), &n(6, t));
    local[7] = n(7, t);
    local[8] = mat_mul(&mat_mul(&rz(-p.abduction), &rx(-swing_r)), &n(8, t));
    local[9] = mat_mul(&rx(-bend_r), &n(9, t));
    local[10] = n(10, t);
}

/// Highest root height that keeps every ankle target within reach.
fn reachable_height(root_xz: Vec3<f64>, root_rot: &Mat3<f64>, targets: &[Vec3<f64>; 2], nominal: f64) -> f64 {
    let mut y = nominal;
    for (off, target) in HIP_OFFSET.iter().zip(targets) {
        let o = mat_vec(root_rot, *off);
        let dx = root_xz[0] + o[0] - target[0];
        let dz = root_xz[2] + o[2] - target[2];
        let flat = (dx * dx + dz * dz).min(REACH * REACH * 0.98);
        y = y.min(target[1] + (REACH * REACH - flat).sqrt() - o[1]);
    }
    y
}

/// Synthesizes `frames` frames of world motion and the analytic contact
/// labels (frames x 2) for one clip.
fn synthesize<R: Rng + ?Sized>(
    skel: &SkeletonDef,
    content: usize,
    style: usize,
    frames: usize,
    rng: &mut R,
) -> (WorldMotion, Vec<f64>) {
    let p = Params::draw(content, style, rng);
    let nj = skel.num_joints();
    let mut root_pos = Vec::with_capacity(frames);
    let mut rotations = Vec::with_capacity(frames);
    let mut contacts = Vec::with_capacity(frames * 2);
    for k in 0..frames {
        let t = k as f64 * FRAME_TIME;
        let g = p.gait_phase(t);
        let h = p.heading(t);
        let root_rot = mat_mul(
            &mat_mul(&rot_y(h), &rz(p.sway * g.sin())),
            &mat_mul(&rx(0.3 * p.lean), &rot_y(0.5 * p.sway * g.cos())),
        );
        let (tl, cl) = p.foot(t, 0);
        let (tr, cr) = p.foot(t, 1);
        let targets = [tl, tr];
        let xz = p.path(t);
        let y = reachable_height(xz, &root_rot, &targets, p.nominal_height(t));
        let root = [xz[0], y, xz[2]];

        let mut local = vec![identity(); nj];
        local[0] = root_rot;
        upper_body(&p, t, &mut local);
        for leg in LEGS {
            local[leg[1]] = rx(0.3);
        }
        let motion = WorldMotion { root_pos: vec![root], rotations: vec![local.clone()] };
        let (pos, world) = world_transforms(skel, &motion);
        let (pos, world) = (&pos[0], &world[0]);
        let foot_rot = rot_y(h);
        for (leg, target) in LEGS.iter().zip(&targets) {
            let [a, b, c] = *leg;
            let hint = mat_vec(&root_rot, [1.0, 0.0, 0.0]);
            let sol = two_bone_ik(
                pos[a], pos[b], pos[c], *target, &world[a], &world[b], &local[a], &local[b], hint,
            );
            local[a] = sol.upper_local;
            local[b] = sol.lower_local;
            let parent = skel.parent(a).unwrap_or(0);
            let knee_world = mat_mul(&mat_mul(&world[parent], &local[a]), &local[b]);
            local[c] = mat_mul(&transpose(&knee_world), &foot_rot);
        }
        root_pos.push(root);
        rotations.push(local);
        contacts.push(if cl { 1.0 } else { 0.0 });
        contacts.push(if cr { 1.0 } else { 0.0 });
    }
    (WorldMotion { root_pos, rotations }.canonicalize(), contacts)
}

/// Long synthetic sequence for one (content, style) pair, e.g. to exercise
/// windowing or BVH export.
pub fn generate_sequence(content: usize, style: usize, frames: usize, seed: u64) -> Result<(WorldMotion, Vec<f64>)> {
    check_classes(content + 1, style + 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(synthesize(&SkeletonDef::synthetic(), content, style, frames, &mut rng))
}

fn check_classes(contents: usize, styles: usize) -> Result<()> {
    ensure!(
        (1..=CONTENT_NAMES.len()).contains(&contents),
        Error::InvalidArgument(format!("content classes must be in 1..={}, got {contents}", CONTENT_NAMES.len()))
    );
    ensure!(
        (1..=STYLE_NAMES.len()).contains(&styles),
        Error::InvalidArgument(format!("style classes must be in 1..={}, got {styles}", STYLE_NAMES.len()))
    );
    Ok(())
}

/// `num_clips` 32-frame clips on [`SkeletonDef::synthetic`], cycling through
/// every (content, style) pair so classes stay balanced. Values are in
/// physical units (radians, metres per second), not normalized.
pub fn generate_synthetic<T: Scalar>(
    num_clips: usize,
    content_classes: usize,
    style_classes: usize,
    seed: u64,
) -> Result<Vec<MotionClip<T>>> {
    check_classes(content_classes, style_classes)?;
    let skel = SkeletonDef::synthetic();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_clips)
        .map(|i| {
            let content = i % content_classes;
            let style = (i / content_classes) % style_classes;
            let (motion, contacts) = synthesize(&skel, content, style, WINDOW, &mut rng);
            let (rot, root) = encode(&motion, FRAME_TIME);
            let c = |v: Vec<f64>| v.into_iter().map(T::lit).collect();
            MotionClip::new(WINDOW, skel.num_joints(), 2, c(rot), c(root), c(contacts), content, style)
        })
        .collect()
}

/// A normalized [`Dataset`] of [`generate_synthetic`] clips with its sidecar
/// metadata. Contact thresholds are calibrated from the clips' root speed.
pub fn synthetic_dataset(num_clips: usize, content_classes: usize, style_classes: usize, seed: u64) -> Result<Dataset> {
    ensure!(num_clips > 0, Error::InvalidArgument("need at least one clip".into()));
    let raw = generate_synthetic::<f32>(num_clips, content_classes, style_classes, seed)?;
    let stats = DatasetStats::compute(&raw)?;
    let clips = raw.iter().map(|c| stats.normalize(c)).collect::<Result<Vec<_>>>()?;
    let frames: Vec<[f64; 4]> = raw.iter().flat_map(|c| (0..c.num_frames).map(move |f| c.root_at(f))).collect();
    let speed = frames.iter().map(|r| r[0].hypot(r[1])).sum::<f64>() / frames.len() as f64;
    let skeleton = SkeletonDef::synthetic();
    let meta = DatasetMeta {
        content_names: CONTENT_NAMES[..content_classes].iter().map(|s| s.to_string()).collect(),
        style_names: STYLE_NAMES[..style_classes].iter().map(|s| s.to_string()).collect(),
        stats,
        thresholds: ContactThresholds::calibrated(&skeleton, speed),
        skeleton,
        frame_time: FRAME_TIME,
    };
    let ds = Dataset { clips, meta };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{norm, sub};
    use crate::motiondata::kinematics::{detect_foot_contacts, forward_kinematics, mean_root_speed, positions};
    use crate::motiondata::ContactThresholds;

    fn mean_speed(clips: &[MotionClip<f64>]) -> f64 {
        let n: f64 = clips.iter().map(|c| c.num_frames as f64).sum();
        clips
            .iter()
            .flat_map(|c| (0..c.num_frames).map(move |f| c.root_at(f)))
            .map(|r| (r[0] * r[0] + r[1] * r[1]).sqrt())
            .sum::<f64>()
            / n
    }

    #[test]
    fn deterministic_and_fixed_length() {
        let a = generate_synthetic::<f32>(12, 6, 2, 5).unwrap();
        let b = generate_synthetic::<f32>(12, 6, 2, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|c| c.num_frames == 32 && c.is_finite()));
        let c = generate_synthetic::<f32>(12, 6, 2, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn run_is_faster_than_walk() {
        let clips = generate_synthetic::<f64>(48, 2, 8, 1).unwrap();
        let (walk, run): (Vec<_>, Vec<_>) = clips.into_iter().partition(|c| c.content == 0);
        let ratio = mean_speed(&run) / mean_speed(&walk);
        assert!(ratio >= 1.5, "ratio {ratio}");
    }

    #[test]
    fn planted_feet_stay_put() {
        let skel = SkeletonDef::synthetic();
        for content in 0..6 {
            let clips = generate_synthetic::<f64>(6, 6, 1, 11 + content as u64).unwrap();
            let clip = &clips[content];
            let pos = forward_kinematics(&skel, clip, FRAME_TIME);
            for f in 1..clip.num_frames {
                for (i, &j) in skel.foot_joint_indices.iter().enumerate() {
                    if clip.contact(f, i) == 1.0 && clip.contact(f - 1, i) == 1.0 {
                        let d = norm(sub(pos[f][j], pos[f - 1][j]));
                        assert!(d < 1e-3, "content {content} frame {f} foot {i} drift {d}");
                        assert!((pos[f][j][1] - ANKLE_HEIGHT).abs() < 1e-3);
                    }
                }
            }
        }
    }

    #[test]
    fn detected_walk_contacts_alternate() {
        let skel = SkeletonDef::synthetic();
        let (motion, labels) = generate_sequence(0, 0, 96, 3).unwrap();
        let speed = mean_root_speed(std::slice::from_ref(&motion), FRAME_TIME);
        let th = ContactThresholds::calibrated(&skel, speed);
        let pos = positions(&skel, &motion);
        let det = detect_foot_contacts(&pos, &skel.foot_joint_indices, th, FRAME_TIME);
        for foot in 0..2 {
            let frac = (0..96).map(|f| det[2 * f + foot]).sum::<f64>() / 96.0;
            assert!((0.4..=0.7).contains(&frac), "foot {foot} contact fraction {frac}");
        }
        let agree = det.iter().zip(&labels).filter(|(a, b)| a == b).count() as f64 / det.len() as f64;
        assert!(agree > 0.85, "agreement {agree}");
        // some frame has exactly one foot down
        assert!((0..96).any(|f| det[2 * f] + det[2 * f + 1] == 1.0));
    }

    #[test]
    fn rejects_too_many_classes() {
        assert!(generate_synthetic::<f32>(4, 7, 1, 0).is_err());
        assert!(generate_synthetic::<f32>(4, 1, 0, 0).is_err());
    }
}
