//! Generation by running the reverse chain from Gaussian noise.

use std::path::Path;

use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::model::checkpoint::TensorBundle;
use crate::model::{Conditioning, Denoiser, DenoiserOutput};
use crate::motiondata::{ClipBatch, DatasetMeta, MotionClip};
use crate::nn::ParamSet;
use crate::scalar::Scalar;
use crate::schedule::{NoiseSchedule, Timestep};
use crate::tensor::Tensor;
use crate::trainer::Trainer;

/// Sigmoid outputs above this count as contact.
pub const CONTACT_THRESHOLD: f64 = 0.5;

/// Clips generated per network call.
const CHUNK: usize = 64;

/// A frozen denoiser ready for sampling.
#[derive(Debug, Clone)]
pub struct Generator<T> {
    pub denoiser: Denoiser,
    pub params: ParamSet<T>,
    pub schedule: NoiseSchedule<T>,
    pub meta: DatasetMeta,
}

impl<T: Scalar> Generator<T> {
    /// Uses the averaged weights when `use_ema` is set, the live ones otherwise.
    pub fn from_trainer(t: &Trainer<T>, use_ema: bool) -> Self {
        Generator {
            denoiser: t.denoiser.clone(),
            params: if use_ema { t.ema.clone() } else { t.params.clone() },
            schedule: t.schedule.clone(),
            meta: t.meta.clone(),
        }
    }

    pub fn from_bundle(b: &TensorBundle<T>, use_ema: bool) -> Result<Self> {
        Ok(Self::from_trainer(&Trainer::from_bundle(b)?, use_ema))
    }

    pub fn load(path: &Path, use_ema: bool) -> Result<Self> {
        Self::from_bundle(&TensorBundle::load(path)?, use_ema)
    }

    pub fn num_contents(&self) -> usize {
        self.denoiser.config.contents
    }

    pub fn num_styles(&self) -> usize {
        self.denoiser.config.styles
    }

    fn check_labels(&self, content: usize, style: usize) -> Result<()> {
        ensure!(
            content < self.num_contents(),
            Error::InvalidArgument(format!("content {content} out of range 0..{}", self.num_contents()))
        );
        ensure!(
            style < self.num_styles(),
            Error::InvalidArgument(format!("style {style} out of range 0..{}", self.num_styles()))
        );
        Ok(())
    }

    /// Runs the chain for one chunk of labels. `record` receives `(t, x_t)`
    /// for the initial noise (`t = T`) and after every step (`t - 1`).
    fn chain<R: Rng + ?Sized>(
        &self,
        contents: &[usize],
        styles: &[usize],
        rng: &mut R,
        mut record: impl FnMut(usize, &Tensor<T>),
    ) -> Result<(Tensor<T>, DenoiserOutput<T>)> {
        let c = &self.denoiser.config;
        let b = contents.len();
        let shape = [b, c.rot_channels, c.frames];
        let big_t = self.schedule.steps();
        let mut x = Tensor::<T>::randn(&shape, rng);
        record(big_t, &x);
        let mut last = None;
        for t in (1..=big_t).rev() {
            let cond = Conditioning { contents: contents.to_vec(), styles: styles.to_vec(), steps: vec![t; b] };
            let out = self.denoiser.denoise(&self.params, &x, &cond)?;
            let z = if t > 1 { Tensor::randn(&shape, rng) } else { Tensor::zeros(&shape) };
            x = self.schedule.reverse_step(&x, Timestep::new(t)?, &out.eps_hat, &z)?;
            ensure!(x.is_finite(), Error::NonFinite(format!("sample became non-finite at t = {t}")));
            record(t - 1, &x);
            last = Some(out);
        }
        Ok((x, last.expect("at least one step")))
    }

    /// Generated clips in normalized units, one per label pair. Contacts are
    /// thresholded sigmoid outputs of the last step's foot head.
    pub fn sample_normalized<R: Rng + ?Sized>(
        &self,
        contents: &[usize],
        styles: &[usize],
        rng: &mut R,
    ) -> Result<Vec<MotionClip<T>>> {
        ensure!(contents.len() == styles.len(), Error::Shape("label lists differ in length".into()));
        for (&c, &s) in contents.iter().zip(styles) {
            self.check_labels(c, s)?;
        }
        let mut clips = Vec::with_capacity(contents.len());
        for (cs, ss) in contents.chunks(CHUNK).zip(styles.chunks(CHUNK)) {
            let (x0, heads) = self.chain(cs, ss, rng, |_, _| {})?;
            let foot = heads
                .foot_logits
                .map(|v| if crate::autograd::sigmoid(v).as_f64() > CONTACT_THRESHOLD { T::one() } else { T::zero() });
            let batch = ClipBatch { x0, root: heads.root_hat, foot, contents: cs.to_vec(), styles: ss.to_vec() };
            clips.extend(batch.to_clips()?);
        }
        Ok(clips)
    }

    /// `n` clips of one (content, style) pair in physical units.
    pub fn sample<R: Rng + ?Sized>(&self, content: usize, style: usize, n: usize, rng: &mut R) -> Result<Vec<MotionClip<T>>> {
        self.check_labels(content, style)?;
        self.sample_normalized(&vec![content; n], &vec![style; n], rng)?
            .iter()
            .map(|c| self.meta.stats.denormalize(c))
            .collect()
    }

    /// Snapshots of the rotation block `x_t`, from `x_T` every
    /// `record_every` steps down to `x_0` (always included).
    pub fn sample_trajectory<R: Rng + ?Sized>(
        &self,
        content: usize,
        style: usize,
        n: usize,
        record_every: usize,
        rng: &mut R,
    ) -> Result<Vec<(usize, Tensor<T>)>> {
        self.check_labels(content, style)?;
        ensure!(record_every > 0, Error::InvalidArgument("record_every must be positive".into()));
        ensure!(n > 0, Error::InvalidArgument("need at least one clip".into()));
        let big_t = self.schedule.steps();
        let mut snaps = Vec::new();
        self.chain(&vec![content; n], &vec![style; n], rng, |t, x| {
            let done = big_t - t;
            if t == big_t || t == 0 || done % record_every == 0 {
                snaps.push((t, x.clone()));
            }
        })?;
        Ok(snaps)
    }
}
