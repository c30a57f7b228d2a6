//! Motion ingestion and representation.

pub mod bvh;
pub mod dataset;
pub mod ingest;
pub mod kinematics;
pub mod skeleton;
pub mod synthetic;

pub use bvh::{parse_bvh, serialize_bvh, BvhFile};
pub use dataset::{window_and_normalize, Dataset, DatasetMeta, DatasetStats};
pub use ingest::{dataset_from_bvh, list_bvh_files};
pub use kinematics::{detect_foot_contacts, forward_kinematics, ContactThresholds, WorldMotion};
pub use skeleton::SkeletonDef;
pub use synthetic::{generate_synthetic, synthetic_dataset, CONTENT_NAMES, STYLE_NAMES};

use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Frames per training and generated clip.
pub const WINDOW: usize = 32;
/// Root channels: planar velocity (2), height, yaw rate.
pub const ROOT_DIMS: usize = 4;
/// Seconds per frame of generated motion.
pub const FRAME_TIME: f64 = 1.0 / 30.0;

/// A fixed-length motion window with its labels.
///
/// `rotations` is frames x joints x 3 (Euler `Z X Y`, radians), `root` is
/// frames x 4 and `foot_contact` is frames x feet, all row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionClip<T> {
    pub num_frames: usize,
    pub num_joints: usize,
    pub num_feet: usize,
    pub rotations: Vec<T>,
    pub root: Vec<T>,
    pub foot_contact: Vec<T>,
    pub content: usize,
    pub style: usize,
}

impl<T: Scalar> MotionClip<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        num_frames: usize,
        num_joints: usize,
        num_feet: usize,
        rotations: Vec<T>,
        root: Vec<T>,
        foot_contact: Vec<T>,
        content: usize,
        style: usize,
    ) -> Result<Self> {
        let clip = MotionClip { num_frames, num_joints, num_feet, rotations, root, foot_contact, content, style };
        clip.check_shapes()?;
        Ok(clip)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let f = self.num_frames;
        ensure!(
            self.rotations.len() == f * self.num_joints * 3
                && self.root.len() == f * ROOT_DIMS
                && self.foot_contact.len() == f * self.num_feet,
            Error::Shape(format!(
                "clip arrays {}/{}/{} do not match {f} frames, {} joints, {} feet",
                self.rotations.len(),
                self.root.len(),
                self.foot_contact.len(),
                self.num_joints,
                self.num_feet
            ))
        );
        Ok(())
    }

    pub fn rotation_channels(&self) -> usize {
        self.num_joints * 3
    }

    pub fn joint_angles(&self, frame: usize, joint: usize) -> [f64; 3] {
        let i = (frame * self.num_joints + joint) * 3;
        [self.rotations[i].as_f64(), self.rotations[i + 1].as_f64(), self.rotations[i + 2].as_f64()]
    }

    pub fn root_at(&self, frame: usize) -> [f64; ROOT_DIMS] {
        let r = &self.root[frame * ROOT_DIMS..(frame + 1) * ROOT_DIMS];
        [r[0].as_f64(), r[1].as_f64(), r[2].as_f64(), r[3].as_f64()]
    }

    pub fn contact(&self, frame: usize, foot: usize) -> T {
        self.foot_contact[frame * self.num_feet + foot]
    }

    pub fn is_finite(&self) -> bool {
        self.rotations.iter().chain(&self.root).chain(&self.foot_contact).all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> MotionClip<U> {
        let c = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect();
        MotionClip {
            num_frames: self.num_frames,
            num_joints: self.num_joints,
            num_feet: self.num_feet,
            rotations: c(&self.rotations),
            root: c(&self.root),
            foot_contact: c(&self.foot_contact),
            content: self.content,
            style: self.style,
        }
    }

    /// Frames `start..start + len` as a new clip with the same labels.
    pub fn window(&self, start: usize, len: usize) -> MotionClip<T> {
        let r = self.num_joints * 3;
        MotionClip {
            num_frames: len,
            num_joints: self.num_joints,
            num_feet: self.num_feet,
            rotations: self.rotations[start * r..(start + len) * r].to_vec(),
            root: self.root[start * ROOT_DIMS..(start + len) * ROOT_DIMS].to_vec(),
            foot_contact: self.foot_contact[start * self.num_feet..(start + len) * self.num_feet].to_vec(),
            content: self.content,
            style: self.style,
        }
    }
}

/// Clips stacked channel-major for the networks: `(B, channels, frames)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipBatch<T> {
    /// `(B, joints * 3, frames)`.
    pub x0: Tensor<T>,
    /// `(B, 4, frames)`.
    pub root: Tensor<T>,
    /// `(B, feet, frames)`.
    pub foot: Tensor<T>,
    pub contents: Vec<usize>,
    pub styles: Vec<usize>,
}

/// Frame-major rows of width `ch` to `ch x frames`, appended to `out`.
fn transpose_into<U: Scalar, T: Scalar>(rows: &[U], frames: usize, ch: usize, out: &mut Vec<T>) {
    for c in 0..ch {
        out.extend((0..frames).map(|f| T::lit(rows[f * ch + c].as_f64())));
    }
}

impl<T: Scalar> ClipBatch<T> {
    pub fn from_clips<U: Scalar>(clips: &[&MotionClip<U>]) -> Result<Self> {
        ensure!(!clips.is_empty(), Error::InvalidArgument("empty batch".into()));
        let first = clips[0];
        let (l, j, nf) = (first.num_frames, first.num_joints, first.num_feet);
        let mut x0 = Vec::with_capacity(clips.len() * j * 3 * l);
        let mut root = Vec::with_capacity(clips.len() * ROOT_DIMS * l);
        let mut foot = Vec::with_capacity(clips.len() * nf * l);
        for c in clips {
            c.check_shapes()?;
            ensure!(
                c.num_frames == l && c.num_joints == j && c.num_feet == nf,
                Error::Shape("clips in a batch differ in layout".into())
            );
            transpose_into(&c.rotations, l, j * 3, &mut x0);
            transpose_into(&c.root, l, ROOT_DIMS, &mut root);
            transpose_into(&c.foot_contact, l, nf, &mut foot);
        }
        let b = clips.len();
        Ok(ClipBatch {
            x0: Tensor::new(&[b, j * 3, l], x0)?,
            root: Tensor::new(&[b, ROOT_DIMS, l], root)?,
            foot: Tensor::new(&[b, nf, l], foot)?,
            contents: clips.iter().map(|c| c.content).collect(),
            styles: clips.iter().map(|c| c.style).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.contents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contents.is_empty()
    }

    /// Back to frame-major clips; the foot block is copied as is.
    pub fn to_clips(&self) -> Result<Vec<MotionClip<T>>> {
        let s = self.x0.shape();
        let (b, c, l) = (s[0], s[1], s[2]);
        let nf = self.foot.shape()[1];
        ensure!(
            c % 3 == 0 && self.root.shape() == [b, ROOT_DIMS, l] && self.foot.shape() == [b, nf, l] && self.len() == b,
            Error::Shape("inconsistent batch tensors".into())
        );
        let back = |t: &Tensor<T>, i: usize, ch: usize| {
            let block = &t.data()[i * ch * l..(i + 1) * ch * l];
            let mut rows = Vec::with_capacity(ch * l);
            for f in 0..l {
                rows.extend((0..ch).map(|k| block[k * l + f]));
            }
            rows
        };
        (0..b)
            .map(|i| {
                MotionClip::new(
                    l,
                    c / 3,
                    nf,
                    back(&self.x0, i, c),
                    back(&self.root, i, ROOT_DIMS),
                    back(&self.foot, i, nf),
                    self.contents[i],
                    self.styles[i],
                )
            })
            .collect()
    }
}
