//! Windowing, z-normalization and the on-disk dataset container.
//!
//! The container is a flat little-endian file:
//!
//! ```text
//! "MDL1" | version u32 | num_clips u32 | frames u32 | joints u32 | feet u32 | root_dims u32
//! rotations f32[num_clips * frames * joints * 3]
//! root      f32[num_clips * frames * root_dims]
//! foot      f32[num_clips * frames * feet]
//! content   u32[num_clips]
//! style     u32[num_clips]
//! ```
//!
//! Names, statistics, skeleton and thresholds live in a JSON sidecar at
//! `<path>.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;

use super::kinematics::{detect_foot_contacts, encode, positions, ContactThresholds, WorldMotion};
use super::skeleton::SkeletonDef;
use super::{MotionClip, ROOT_DIMS, WINDOW};

const MAGIC: &[u8; 4] = b"MDL1";
const VERSION: u32 = 1;
const STD_FLOOR: f64 = 1e-6;

/// Per-channel statistics for the rotation and root blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub rot_mean: Vec<f64>,
    pub rot_std: Vec<f64>,
    pub root_mean: Vec<f64>,
    pub root_std: Vec<f64>,
}

fn channel_stats<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, width: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; width];
    let mut n = 0usize;
    for r in rows.clone() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
        n += 1;
    }
    let n = n.max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; width];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
    (mean, std)
}

impl DatasetStats {
    /// Population mean and standard deviation over every frame of every clip.
    pub fn compute<T: Scalar>(clips: &[MotionClip<T>]) -> Result<Self> {
        ensure!(!clips.is_empty(), Error::Data("cannot compute statistics of an empty set".into()));
        let c = clips[0].rotation_channels();
        ensure!(
            clips.iter().all(|k| k.rotation_channels() == c),
            Error::Shape("clips disagree on joint count".into())
        );
        let rot: Vec<f64> = clips.iter().flat_map(|k| k.rotations.iter().map(|v| v.as_f64())).collect();
        let root: Vec<f64> = clips.iter().flat_map(|k| k.root.iter().map(|v| v.as_f64())).collect();
        let (rot_mean, rot_std) = channel_stats(rot.chunks(c), c);
        let (root_mean, root_std) = channel_stats(root.chunks(ROOT_DIMS), ROOT_DIMS);
        Ok(DatasetStats { rot_mean, rot_std, root_mean, root_std })
    }

    fn check<T: Scalar>(&self, clip: &MotionClip<T>) -> Result<()> {
        ensure!(
            self.rot_mean.len() == clip.rotation_channels() && self.root_mean.len() == ROOT_DIMS,
            Error::Shape(format!(
                "statistics cover {} rotation channels, clip has {}",
                self.rot_mean.len(),
                clip.rotation_channels()
            ))
        );
        Ok(())
    }

    pub fn normalize<T: Scalar>(&self, clip: &MotionClip<T>) -> Result<MotionClip<T>> {
        self.check(clip)?;
        let mut out = clip.clone();
        affine(&mut out.rotations, &self.rot_mean, &self.rot_std, false);
        affine(&mut out.root, &self.root_mean, &self.root_std, false);
        Ok(out)
    }

    pub fn denormalize<T: Scalar>(&self, clip: &MotionClip<T>) -> Result<MotionClip<T>> {
        self.check(clip)?;
        let mut out = clip.clone();
        affine(&mut out.rotations, &self.rot_mean, &self.rot_std, true);
        affine(&mut out.root, &self.root_mean, &self.root_std, true);
        Ok(out)
    }
}

fn affine<T: Scalar>(data: &mut [T], mean: &[f64], std: &[f64], inverse: bool) {
    for row in data.chunks_mut(mean.len()) {
        for ((v, m), s) in row.iter_mut().zip(mean).zip(std) {
            let x = v.as_f64();
            *v = T::lit(if inverse { x * s + m } else { (x - m) / s });
        }
    }
}

/// Cuts a motion into `WINDOW`-frame clips every `stride` frames.
///
/// The whole sequence is encoded once, so root channels are heading-relative
/// per frame and consecutive stride-32 windows tile the encoding exactly.
/// Contacts come from [`detect_foot_contacts`] on the full sequence.
pub fn window_motion<T: Scalar>(
    motion: &WorldMotion,
    skel: &SkeletonDef,
    frame_time: f64,
    stride: usize,
    thresholds: ContactThresholds,
    content: usize,
    style: usize,
) -> Result<Vec<MotionClip<T>>> {
    let n = motion.num_frames();
    ensure!(stride > 0, Error::InvalidArgument("stride must be positive".into()));
    ensure!(n >= WINDOW, Error::Data(format!("motion has {n} frames, need at least {WINDOW}")));
    let motion = motion.canonicalize();
    let (rot, root) = encode(&motion, frame_time);
    let feet = &skel.foot_joint_indices;
    let contacts = detect_foot_contacts(&positions(skel, &motion), feet, thresholds, frame_time);
    let c = |v: &[f64]| v.iter().map(|&x| T::lit(x)).collect::<Vec<T>>();
    let full = MotionClip::new(n, skel.num_joints(), feet.len(), c(&rot), c(&root), c(&contacts), content, style)?;
    Ok((0..=n - WINDOW).step_by(stride).map(|s| full.window(s, WINDOW)).collect())
}

/// Windows every motion and z-normalizes the result, computing statistics
/// when none are supplied. Each entry is `(motion, content, style)`.
pub fn window_and_normalize<T: Scalar>(
    motions: &[(WorldMotion, usize, usize)],
    skel: &SkeletonDef,
    frame_time: f64,
    stride: usize,
    thresholds: ContactThresholds,
    stats: Option<&DatasetStats>,
) -> Result<(Vec<MotionClip<T>>, DatasetStats)> {
    let mut clips = Vec::new();
    for (m, c, s) in motions {
        clips.extend(window_motion(m, skel, frame_time, stride, thresholds, *c, *s)?);
    }
    let stats = match stats {
        Some(s) => s.clone(),
        None => DatasetStats::compute(&clips)?,
    };
    let clips = clips.iter().map(|c| stats.normalize(c)).collect::<Result<Vec<_>>>()?;
    Ok((clips, stats))
}

/// Everything in the JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub content_names: Vec<String>,
    pub style_names: Vec<String>,
    pub stats: DatasetStats,
    pub skeleton: SkeletonDef,
    pub frame_time: f64,
    pub thresholds: ContactThresholds,
}

/// Normalized clips plus their metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub clips: Vec<MotionClip<f32>>,
    pub meta: DatasetMeta,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Dataset {
    pub fn num_contents(&self) -> usize {
        self.meta.content_names.len()
    }

    pub fn num_styles(&self) -> usize {
        self.meta.style_names.len()
    }

    pub fn num_joints(&self) -> usize {
        self.meta.skeleton.num_joints()
    }

    pub fn num_feet(&self) -> usize {
        self.meta.skeleton.foot_joint_indices.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.skeleton.validate()?;
        let nj = self.num_joints();
        let nf = self.num_feet();
        ensure!(
            self.meta.stats.rot_mean.len() == nj * 3 && self.meta.stats.rot_std.len() == nj * 3,
            Error::Data("statistics do not match the skeleton".into())
        );
        for (i, c) in self.clips.iter().enumerate() {
            c.check_shapes()?;
            ensure!(
                c.num_frames == WINDOW && c.num_joints == nj && c.num_feet == nf,
                Error::Data(format!("clip {i} does not match the dataset layout"))
            );
            ensure!(
                c.content < self.num_contents() && c.style < self.num_styles(),
                Error::Data(format!("clip {i} has labels ({}, {}) out of range", c.content, c.style))
            );
            ensure!(c.is_finite(), Error::Data(format!("clip {i} has non-finite values")));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let nj = self.num_joints();
        let nf = self.num_feet();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.clips.len() as u32, WINDOW as u32, nj as u32, nf as u32, ROOT_DIMS as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in &self.clips {
            c.rotations.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        for c in &self.clips {
            c.root.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        for c in &self.clips {
            c.foot_contact.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        for c in &self.clips {
            out.extend_from_slice(&(c.content as u32).to_le_bytes());
        }
        for c in &self.clips {
            out.extend_from_slice(&(c.style as u32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], meta: DatasetMeta) -> Result<Self> {
        ensure!(
            bytes.len() >= 28 && &bytes[..4] == MAGIC,
            Error::Container("not a dataset file (bad magic)".into())
        );
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (version, n, frames, nj, nf, rd) = (word(0), word(1), word(2), word(3), word(4), word(5));
        ensure!(version == VERSION as usize, Error::Container(format!("unsupported version {version}")));
        ensure!(
            frames == WINDOW && rd == ROOT_DIMS,
            Error::Container(format!("unexpected layout: {frames} frames, {rd} root channels"))
        );
        ensure!(
            nj == meta.skeleton.num_joints() && nf == meta.skeleton.foot_joint_indices.len(),
            Error::Container("header disagrees with the sidecar skeleton".into())
        );
        let (r, t, f) = (frames * nj * 3, frames * rd, frames * nf);
        let expected = n
            .checked_mul(4 * (r + t + f + 2))
            .and_then(|v| v.checked_add(28))
            .ok_or_else(|| Error::Container("clip count overflows".into()))?;
        ensure!(
            bytes.len() == expected,
            Error::Container(format!("expected {expected} bytes, found {}", bytes.len()))
        );
        let mut at = 28;
        let mut floats = |len: usize| -> Vec<f32> {
            let v = bytes[at..at + 4 * len]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            at += 4 * len;
            v
        };
        let rot = floats(n * r);
        let root = floats(n * t);
        let foot = floats(n * f);
        let labels: Vec<usize> = bytes[at..]
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .collect();
        let clips = (0..n)
            .map(|i| {
                MotionClip::new(
                    frames,
                    nj,
                    nf,
                    rot[i * r..(i + 1) * r].to_vec(),
                    root[i * t..(i + 1) * t].to_vec(),
                    foot[i * f..(i + 1) * f].to_vec(),
                    labels[i],
                    labels[n + i],
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset { clips, meta };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&self.meta)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        Self::from_bytes(&bytes, meta)
    }

    /// Deterministic split stratified by (content, style). Returns
    /// `(train, held_out)` clip indices, each sorted.
    pub fn split(&self, held_out_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (i, c) in self.clips.iter().enumerate() {
            groups.entry((c.content, c.style)).or_default().push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut train, mut held) = (Vec::new(), Vec::new());
        for (_, mut idx) in groups {
            idx.shuffle(&mut rng);
            let k = (idx.len() as f64 * held_out_fraction).round() as usize;
            held.extend_from_slice(&idx[..k]);
            train.extend_from_slice(&idx[k..]);
        }
        train.sort_unstable();
        held.sort_unstable();
        (train, held)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset { clips: indices.iter().map(|&i| self.clips[i].clone()).collect(), meta: self.meta.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motiondata::synthetic::generate_sequence;
    use crate::motiondata::FRAME_TIME;

    fn thresholds() -> ContactThresholds {
        ContactThresholds { height: 0.15, speed: 0.1 }
    }

    #[test]
    fn windows_count_and_tile() {
        let skel = SkeletonDef::synthetic();
        let (m, _) = generate_sequence(0, 0, 70, 1).unwrap();
        let w32: Vec<MotionClip<f64>> = window_motion(&m, &skel, FRAME_TIME, 32, thresholds(), 0, 0).unwrap();
        assert_eq!(w32.len(), 2);
        let w16: Vec<MotionClip<f64>> = window_motion(&m, &skel, FRAME_TIME, 16, thresholds(), 0, 0).unwrap();
        assert_eq!(w16.len(), 3);
        let (rot, root) = encode(&m.canonicalize(), FRAME_TIME);
        let tiled: Vec<f64> = w32.iter().flat_map(|c| c.rotations.clone()).collect();
        assert_eq!(&tiled[..], &rot[..tiled.len()]);
        let tiled: Vec<f64> = w32.iter().flat_map(|c| c.root.clone()).collect();
        assert_eq!(&tiled[..], &root[..tiled.len()]);
        let short = m.slice(0, 31);
        assert!(window_motion::<f64>(&short, &skel, FRAME_TIME, 32, thresholds(), 0, 0).is_err());
    }

    #[test]
    fn normalization_statistics() {
        let skel = SkeletonDef::synthetic();
        let motions: Vec<_> =
            (0..3).map(|c| (generate_sequence(c, 1, 64, c as u64).unwrap().0, c, 1)).collect();
        let (clips, stats) =
            window_and_normalize::<f64>(&motions, &skel, FRAME_TIME, 16, thresholds(), None).unwrap();
        let again = DatasetStats::compute(&clips).unwrap();
        for (m, s) in again.rot_mean.iter().zip(&again.rot_std).chain(again.root_mean.iter().zip(&again.root_std)) {
            assert!(m.abs() < 1e-6);
            // channels that never move keep the floored scale
            assert!((s - 1.0).abs() < 1e-3 || *s < 1e-3, "std {s}");
        }
        let (reused, _) =
            window_and_normalize::<f64>(&motions, &skel, FRAME_TIME, 16, thresholds(), Some(&stats)).unwrap();
        assert_eq!(clips, reused);
        let back = stats.denormalize(&clips[0]).unwrap();
        let raw: Vec<MotionClip<f64>> = window_motion(&motions[0].0, &skel, FRAME_TIME, 16, thresholds(), 0, 1).unwrap();
        for (a, b) in back.rotations.iter().zip(&raw[0].rotations) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
