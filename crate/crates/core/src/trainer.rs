//! The training loop: noising, multi-head prediction, loss assembly,
//! alternating discriminator updates, Adam and weight averaging.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::derive_seed;
use crate::error::{ensure, Error, Result};
use crate::losses::{
    acceleration_loss, disc_loss, foot_loss, generator_adv_loss, noise_loss, root_loss, total_loss,
    velocity_loss, Ablation, LossReport, LossTerms, LossWeights,
};
use crate::model::checkpoint::TensorBundle;
use crate::model::{Conditioning, Denoiser, Discriminator, ModelConfig};
use crate::motiondata::{ClipBatch, Dataset, DatasetMeta, MotionClip, ROOT_DIMS, WINDOW};
use crate::nn::ParamSet;
use crate::optim::{adam_update, clip_global_norm, ema_update, AdamConfig, AdamState};
use crate::scalar::Scalar;
use crate::schedule::{make_schedule, NoiseSchedule, Timestep};
use crate::tensor::Tensor;

/// Seed for the train / held-out split, shared by every run so that
/// evaluations of different seeds use the same held-out clips.
pub const SPLIT_SEED: u64 = 0;

const CHECKPOINT_FORMAT: &str = "motiondiff-checkpoint";

/// Every knob of a training run. Missing keys in a config file fall back to
/// the chosen preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub disc_learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Number of diffusion steps `T`.
    pub diffusion_steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub ema_decay: f64,
    /// Global gradient-norm limit; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Weight the terms computed on `x0_hat` by `alpha_bar_t` per clip.
    pub snr_weighting: bool,
    pub weights: LossWeights,
    pub ablation: Ablation,
    pub seed: u64,
    /// Optimizer steps to run.
    pub steps: u64,
    pub checkpoint_every: u64,
    /// Share of each (content, style) group held out from training.
    pub held_out_fraction: f64,
    pub width: usize,
    pub levels: usize,
    pub embed_dim: usize,
    pub disc_width: usize,
    pub attention: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::InvalidArgument(format!("unknown preset '{s}', expected desk or paper"))),
        }
    }
}

impl TrainerConfig {
    /// Small enough to train in minutes on one CPU core.
    pub fn desk() -> Self {
        TrainerConfig {
            learning_rate: 1e-3,
            disc_learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            diffusion_steps: 200,
            // the 1e-4..0.02 linear schedule rescaled by 1000 / T
            sigma_min: 5e-4,
            sigma_max: 0.1,
            ema_decay: 0.995,
            grad_clip: Some(1.0),
            snr_weighting: true,
            weights: LossWeights::default(),
            ablation: Ablation::default(),
            seed: 0,
            steps: 2000,
            checkpoint_every: 500,
            held_out_fraction: 1.0 / 3.0,
            width: 64,
            levels: 2,
            embed_dim: 64,
            disc_width: 64,
            attention: true,
        }
    }

    /// Full-scale hyperparameters.
    pub fn paper() -> Self {
        TrainerConfig {
            learning_rate: 2e-4,
            batch_size: 128,
            diffusion_steps: 1000,
            sigma_min: 1e-4,
            sigma_max: 0.02,
            ema_decay: 0.9999,
            grad_clip: None,
            steps: 100_000,
            checkpoint_every: 5000,
            ..Self::desk()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Overlays the keys of a JSON object on `base`. Unknown keys are an
    /// error naming the key.
    pub fn overlay(base: &TrainerConfig, json: &str) -> Result<Self> {
        let patch: serde_json::Value =
            serde_json::from_str(json).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let serde_json::Value::Object(patch) = patch else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let mut merged = serde_json::to_value(base)?;
        let obj = merged.as_object_mut().expect("config serializes to an object");
        for (k, v) in patch {
            if !obj.contains_key(&k) {
                return Err(Error::Config(format!("unknown config key '{k}'")));
            }
            let merged_v = match (obj.get(&k), v) {
                // nested objects (weights, ablation) merge key by key
                (Some(serde_json::Value::Object(old)), serde_json::Value::Object(new)) => {
                    let mut o = old.clone();
                    for (nk, nv) in new {
                        if !o.contains_key(&nk) {
                            return Err(Error::Config(format!("unknown config key '{k}.{nk}'")));
                        }
                        o.insert(nk, nv);
                    }
                    serde_json::Value::Object(o)
                }
                (_, v) => v,
            };
            obj.insert(k, merged_v);
        }
        let cfg: TrainerConfig =
            serde_json::from_value(merged).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.disc_learning_rate > 0.0) {
            return bad("learning rates must be positive");
        }
        let open = |x: f64| x > 0.0 && x < 1.0;
        if !(open(self.adam_beta1) && open(self.adam_beta2)) {
            return bad("Adam betas must lie in (0, 1)");
        }
        if !(self.adam_eps >= 0.0) {
            return bad("adam_eps must be non-negative");
        }
        if !open(self.ema_decay) {
            return bad("ema_decay must lie in (0, 1)");
        }
        if self.batch_size == 0 || self.diffusion_steps == 0 || self.checkpoint_every == 0 {
            return bad("batch_size, diffusion_steps and checkpoint_every must be positive");
        }
        if !(self.sigma_min > 0.0 && self.sigma_min <= self.sigma_max && self.sigma_max < 1.0) {
            return bad("need 0 < sigma_min <= sigma_max < 1");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive");
            }
        }
        if !(0.0..1.0).contains(&self.held_out_fraction) {
            return bad("held_out_fraction must lie in [0, 1)");
        }
        self.weights.validate()
    }

    pub fn model_config(&self, meta: &DatasetMeta) -> ModelConfig {
        ModelConfig {
            rot_channels: meta.skeleton.num_joints() * 3,
            root_channels: ROOT_DIMS,
            feet: meta.skeleton.foot_joint_indices.len(),
            frames: WINDOW,
            contents: meta.content_names.len(),
            styles: meta.style_names.len(),
            steps: self.diffusion_steps,
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
            width: self.width,
            levels: self.levels,
            embed_dim: self.embed_dim,
            disc_width: self.disc_width,
            attention: self.attention,
        }
    }

    /// The configuration of one ablation row (see [`Ablation::row`]).
    pub fn for_ablation_row(&self, row: &str) -> Result<Self> {
        Ok(TrainerConfig { ablation: Ablation::row(row)?, ..self.clone() })
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.learning_rate, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }

    fn disc_adam(&self) -> AdamConfig {
        AdamConfig { lr: self.disc_learning_rate, ..self.adam() }
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub noise: f64,
    pub foot: f64,
    pub root: f64,
    pub adv: f64,
    pub vel: f64,
    pub acc: f64,
    pub total: f64,
    pub disc: f64,
}

impl MetricsRecord {
    pub fn new(step: u64, r: &LossReport) -> Self {
        let t = &r.terms;
        MetricsRecord {
            step,
            noise: t.noise,
            foot: t.foot,
            root: t.root,
            adv: t.adv,
            vel: t.vel,
            acc: t.acc,
            total: r.total,
            disc: r.disc,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    step: u64,
    config: TrainerConfig,
    model: ModelConfig,
    meta: DatasetMeta,
    adam_step: u64,
    disc_adam_step: u64,
}

/// All mutable training state.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub config: TrainerConfig,
    pub meta: DatasetMeta,
    pub denoiser: Denoiser,
    pub params: ParamSet<T>,
    /// Averaged copy of `params`.
    pub ema: ParamSet<T>,
    pub disc: Discriminator,
    pub disc_params: ParamSet<T>,
    pub adam: AdamState<T>,
    pub disc_adam: AdamState<T>,
    pub schedule: NoiseSchedule<T>,
    /// Completed optimizer steps.
    pub step: u64,
}

fn sum_terms<T: Scalar>(g: &mut Graph<T>, parts: &[(f64, Var)]) -> Option<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in parts {
        if w == 0.0 {
            continue;
        }
        let s = g.scale(v, T::lit(w));
        acc = Some(match acc {
            Some(a) => g.add(a, s),
            None => s,
        });
    }
    acc
}

fn collect_grads<T: Scalar>(g: &Graph<T>, root: Var, vars: &[Var], params: &ParamSet<T>) -> Vec<Vec<T>> {
    let grads = g.backward(root);
    vars.iter().zip(params.tensors()).map(|(&v, t)| grads.get_or_zeros(v, t.len())).collect()
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainerConfig, meta: DatasetMeta) -> Result<Self> {
        config.validate()?;
        let mc = config.model_config(&meta);
        let (denoiser, params) = Denoiser::new::<T>(&mc, derive_seed(config.seed, 1))?;
        let (disc, disc_params) = Discriminator::new::<T>(&mc, derive_seed(config.seed, 2))?;
        let schedule = make_schedule(config.diffusion_steps, config.sigma_min, config.sigma_max)?;
        Ok(Trainer {
            adam: AdamState::new(&params),
            disc_adam: AdamState::new(&disc_params),
            ema: params.clone(),
            config,
            meta,
            denoiser,
            params,
            disc,
            disc_params,
            schedule,
            step: 0,
        })
    }

    /// One generator update followed by one discriminator update on the
    /// given (normalized) clips, then the weight-average update.
    pub fn train_step_on<R: Rng + ?Sized>(&mut self, batch: &[&MotionClip<f32>], rng: &mut R) -> Result<LossReport> {
        let (mut report, fakes) = self.generator_update(batch, rng)?;
        if let Some((real, fake)) = fakes {
            report.disc = self.discriminator_update(real, fake)?;
        }
        ema_update(&mut self.ema, &self.params, self.config.ema_decay)?;
        self.step += 1;
        Ok(report)
    }

    /// Updates the denoiser only. When the discriminator is enabled, also
    /// returns the real batch and the detached generated heads
    /// `(x0_hat, root_hat, foot probabilities)` for its update.
    #[allow(clippy::type_complexity)]
    fn generator_update<R: Rng + ?Sized>(
        &mut self,
        batch: &[&MotionClip<f32>],
        rng: &mut R,
    ) -> Result<(LossReport, Option<(ClipBatch<T>, [Tensor<T>; 3])>)> {
        let cfg = &self.config;
        let cb = ClipBatch::<T>::from_clips(batch)?;
        let (b, c, l) = (cb.x0.shape()[0], cb.x0.shape()[1], cb.x0.shape()[2]);
        let big_t = self.schedule.steps();
        let steps: Vec<usize> = (0..b).map(|_| rng.random_range(1..=big_t)).collect();
        let eps = Tensor::<T>::randn(&[b, c, l], rng);

        let per = c * l;
        let mut x_t = Vec::with_capacity(b * per);
        let mut base = Vec::with_capacity(b * per);
        let mut eps_coef = Vec::with_capacity(b);
        let mut guide = Vec::with_capacity(b);
        for i in 0..b {
            let t = Timestep::new(steps[i])?;
            let (sa, so) = (self.schedule.sqrt_alpha_bar(t)?, self.schedule.sqrt_one_minus_alpha_bar(t)?);
            let (inv, k) = self.schedule.reconstruct_coefs(t)?;
            for j in i * per..(i + 1) * per {
                let v = sa * cb.x0.data()[j] + so * eps.data()[j];
                x_t.push(v);
                base.push(inv * v);
            }
            eps_coef.push(k);
            guide.push(if cfg.snr_weighting { sa } else { T::one() });
        }
        let cond = Conditioning { contents: cb.contents.clone(), styles: cb.styles.clone(), steps };
        let weights = cfg.weights.with_ablation(&cfg.ablation);

        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let xv = g.constant(Tensor::new(&[b, c, l], x_t)?);
        let out = self.denoiser.forward(&mut g, &p, xv, &cond)?;
        let ev = g.constant(eps);
        let noise = noise_loss(&mut g, ev, out.eps);
        let fv = g.constant(cb.foot.clone());
        let foot = foot_loss(&mut g, fv, out.foot_logits);
        let rv = g.constant(cb.root.clone());
        let root = root_loss(&mut g, rv, out.root);
        let bv = g.constant(Tensor::new(&[b, c, l], base)?);
        let corr = g.scale_rows(out.eps, eps_coef);
        let x0_hat = g.add(bv, corr);
        // x0_hat amplifies eps error by 1/sqrt(alpha_bar_t); scaling by
        // sqrt(alpha_bar_t) turns the squared terms into alpha_bar_t-weighted ones
        let x0_guide = g.scale_rows(x0_hat, guide.clone());
        let vel = velocity_loss(&mut g, x0_guide);
        let acc = acceleration_loss(&mut g, x0_guide);
        let foot_prob = g.sigmoid(out.foot_logits);
        let adv = if cfg.ablation.discriminator {
            let dp = self.disc_params.bind_frozen(&mut g);
            let score = self.disc.forward(&mut g, &dp, x0_hat, out.root, foot_prob)?;
            let miss = g.add_scalar(score, -T::one());
            let miss = g.scale_rows(miss, guide);
            let miss = g.add_scalar(miss, T::one());
            Some(generator_adv_loss(&mut g, miss))
        } else {
            None
        };
        let val = |v: Var| g.value(v).data()[0].as_f64();
        let terms = LossTerms {
            noise: val(noise),
            foot: val(foot),
            root: val(root),
            adv: adv.map_or(0.0, val),
            vel: val(vel),
            acc: val(acc),
        };
        if let Some(name) = terms.non_finite() {
            return Err(Error::NonFinite(format!("loss term '{name}' is not finite at step {}", self.step + 1)));
        }
        let mut parts = vec![
            (weights.noise, noise),
            (weights.foot, foot),
            (weights.root, root),
            (weights.vel, vel),
            (weights.acc, acc),
        ];
        if let Some(a) = adv {
            parts.push((weights.adv, a));
        }
        if let Some(total) = sum_terms(&mut g, &parts) {
            let mut grads = collect_grads(&g, total, &p, &self.params);
            if let Some(m) = cfg.grad_clip {
                clip_global_norm(&mut grads, m);
            }
            adam_update(&mut self.params, &grads, &mut self.adam, &cfg.adam())?;
        }
        let report = total_loss(&terms, &weights);
        let fakes = adv.map(|_| (cb, [g.value(x0_hat).clone(), g.value(out.root).clone(), g.value(foot_prob).clone()]));
        Ok((report, fakes))
    }

    /// Updates the discriminator only; returns its objective.
    fn discriminator_update(&mut self, real: ClipBatch<T>, fake: [Tensor<T>; 3]) -> Result<f64> {
        let mut g = Graph::new();
        let dp = self.disc_params.bind(&mut g);
        let [rx, rr, rf] = [real.x0, real.root, real.foot].map(|t| g.constant(t));
        let real = self.disc.forward(&mut g, &dp, rx, rr, rf)?;
        let [fx, fr, ff] = fake.map(|t| g.constant(t));
        let fake = self.disc.forward(&mut g, &dp, fx, fr, ff)?;
        let dl = disc_loss(&mut g, real, fake);
        let value = g.value(dl).data()[0].as_f64();
        ensure!(
            value.is_finite(),
            Error::NonFinite(format!("discriminator loss is not finite at step {}", self.step + 1))
        );
        let mut grads = collect_grads(&g, dl, &dp, &self.disc_params);
        if let Some(m) = self.config.grad_clip {
            clip_global_norm(&mut grads, m);
        }
        adam_update(&mut self.disc_params, &grads, &mut self.disc_adam, &self.config.disc_adam())?;
        Ok(value)
    }

    /// Indices of the clips this step trains on. Depends only on the seed
    /// and the step number, so a resumed run draws the same batches.
    fn step_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, 1000 + self.step))
    }

    /// Draws a batch from `pool` (indices into `data`) and runs
    /// [`Self::train_step_on`].
    pub fn train_step(&mut self, data: &Dataset, pool: &[usize]) -> Result<LossReport> {
        ensure!(!pool.is_empty(), Error::Data("no training clips".into()));
        let mut rng = self.step_rng();
        let batch: Vec<&MotionClip<f32>> =
            (0..self.config.batch_size).map(|_| &data.clips[pool[rng.random_range(0..pool.len())]]).collect();
        self.train_step_on(&batch, &mut rng)
    }

    pub fn to_bundle(&self) -> Result<TensorBundle<T>> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            step: self.step,
            config: self.config.clone(),
            model: self.denoiser.config.clone(),
            meta: self.meta.clone(),
            adam_step: self.adam.step,
            disc_adam_step: self.disc_adam.step,
        };
        Ok(TensorBundle {
            header: serde_json::to_value(header)?,
            groups: vec![
                ("denoiser".into(), self.params.clone()),
                ("ema".into(), self.ema.clone()),
                ("discriminator".into(), self.disc_params.clone()),
                ("adam.m".into(), self.adam.m.clone()),
                ("adam.v".into(), self.adam.v.clone()),
                ("disc_adam.m".into(), self.disc_adam.m.clone()),
                ("disc_adam.v".into(), self.disc_adam.v.clone()),
            ],
        })
    }

    pub fn from_bundle(bundle: &TensorBundle<T>) -> Result<Self> {
        let h: CheckpointHeader = serde_json::from_value(bundle.header.clone())
            .map_err(|e| Error::Container(format!("not a training checkpoint: {e}")))?;
        ensure!(h.format == CHECKPOINT_FORMAT, Error::Container(format!("unexpected format '{}'", h.format)));
        let mut t = Trainer::new(h.config, h.meta)?;
        ensure!(
            t.denoiser.config == h.model,
            Error::Container("model configuration disagrees with the training configuration".into())
        );
        let load = |dst: &mut ParamSet<T>, name: &str| -> Result<()> {
            let src = bundle.require(name)?;
            dst.check_layout(src)?;
            *dst = src.clone();
            Ok(())
        };
        load(&mut t.params, "denoiser")?;
        load(&mut t.ema, "ema")?;
        load(&mut t.disc_params, "discriminator")?;
        load(&mut t.adam.m, "adam.m")?;
        load(&mut t.adam.v, "adam.v")?;
        load(&mut t.disc_adam.m, "disc_adam.m")?;
        load(&mut t.disc_adam.v, "disc_adam.v")?;
        t.adam.step = h.adam_step;
        t.disc_adam.step = h.disc_adam_step;
        t.step = h.step;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        self.to_bundle()?.save(&tmp)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bundle(&TensorBundle::load(path)?)
    }
}

/// File names inside a run directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.mdc";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";

/// The training clip indices of `data` under `config`.
pub fn training_pool(data: &Dataset, config: &TrainerConfig) -> Vec<usize> {
    data.split(config.held_out_fraction, SPLIT_SEED).0
}

/// Trains until `config.steps`, starting from `trainer.step`.
///
/// With an output directory, writes the config echo, one metrics line per
/// step and a checkpoint every `checkpoint_every` steps and at the end. On
/// resume, metrics lines past the checkpoint are dropped first so the file
/// matches an uninterrupted run.
pub fn run_training<T: Scalar>(trainer: &mut Trainer<T>, data: &Dataset, out_dir: Option<&Path>) -> Result<Vec<MetricsRecord>> {
    ensure!(
        data.meta == trainer.meta,
        Error::Data("dataset metadata differs from the one the model was built for".into())
    );
    let pool = training_pool(data, &trainer.config);
    let mut metrics = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let echo = serde_json::json!({
                "trainer": trainer.config,
                "model": trainer.denoiser.config,
            });
            fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&echo)? + "\n")?;
            let path = dir.join(METRICS_FILE);
            let mut kept = String::new();
            if trainer.step > 0 {
                if let Ok(old) = fs::read_to_string(&path) {
                    for line in old.lines() {
                        let r: MetricsRecord = serde_json::from_str(line)?;
                        if r.step <= trainer.step {
                            kept.push_str(line);
                            kept.push('\n');
                        }
                    }
                }
            }
            fs::write(&path, kept)?;
            Some(BufWriter::new(fs::OpenOptions::new().append(true).open(path)?))
        }
        None => None,
    };
    let mut records = Vec::new();
    while trainer.step < trainer.config.steps {
        let report = trainer.train_step(data, &pool)?;
        let rec = MetricsRecord::new(trainer.step, &report);
        if let Some(w) = metrics.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        records.push(rec);
        let done = trainer.step == trainer.config.steps;
        if let (Some(dir), true) = (out_dir, done || trainer.step % trainer.config.checkpoint_every == 0) {
            if let Some(w) = metrics.as_mut() {
                w.flush()?;
            }
            trainer.save(&dir.join(CHECKPOINT_FILE))?;
        }
    }
    if let Some(mut w) = metrics {
        w.flush()?;
    }
    if let (Some(dir), 0) = (out_dir, records.len()) {
        trainer.save(&dir.join(CHECKPOINT_FILE))?;
    }
    Ok(records)
}
