//! The conditional denoiser (a 1-D U-Net with attention and three output
//! heads) and the clip discriminator.
//!
//! Tensors are laid out `(batch, channels, frames)`.

pub mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{ensure, Error, Result};
use crate::nn::{uniform, Conv1d, GroupNorm, Linear, ParamSet};
use crate::scalar::Scalar;
use crate::schedule::make_schedule;
use crate::tensor::Tensor;

const DETAIL_FILTERS: usize = 4;
const DETAIL_TAPS: usize = 5;

/// Shapes and widths of both networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Rotation channels per frame (joints x 3).
    pub rot_channels: usize,
    pub root_channels: usize,
    pub feet: usize,
    pub frames: usize,
    pub contents: usize,
    pub styles: usize,
    pub steps: usize,
    /// Noise schedule endpoints, used for the skip path of the noise head.
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub width: usize,
    pub levels: usize,
    pub embed_dim: usize,
    pub disc_width: usize,
    pub attention: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("rot_channels", self.rot_channels),
            ("root_channels", self.root_channels),
            ("frames", self.frames),
            ("contents", self.contents),
            ("styles", self.styles),
            ("steps", self.steps),
            ("width", self.width),
            ("levels", self.levels),
            ("disc_width", self.disc_width),
        ];
        for (name, v) in pos {
            ensure!(v > 0, Error::Config(format!("{name} must be positive")));
        }
        ensure!(
            self.embed_dim >= 2 && self.embed_dim % 2 == 0,
            Error::Config("embed_dim must be an even number >= 2".into())
        );
        ensure!(
            self.frames % (1 << self.levels) == 0,
            Error::Config(format!("frames {} not divisible by 2^{}", self.frames, self.levels))
        );
        ensure!(self.frames >= 8, Error::Config("need at least 8 frames for the discriminator".into()));
        make_schedule::<f64>(self.steps, self.sigma_min, self.sigma_max)?;
        Ok(())
    }

    fn level_channels(&self, level: usize) -> usize {
        self.width * if level == 0 { 1 } else { 2 }
    }
}

/// Batched conditioning: one (content, style, timestep) triple per clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub contents: Vec<usize>,
    pub styles: Vec<usize>,
    /// 1-based diffusion steps.
    pub steps: Vec<usize>,
}

impl Conditioning {
    pub fn len(&self) -> usize {
        self.contents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contents.is_empty()
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let n = self.len();
        ensure!(
            self.styles.len() == n && self.steps.len() == n,
            Error::Shape("conditioning vectors differ in length".into())
        );
        for i in 0..n {
            ensure!(
                self.contents[i] < cfg.contents,
                Error::InvalidArgument(format!("content {} outside [0, {})", self.contents[i], cfg.contents))
            );
            ensure!(
                self.styles[i] < cfg.styles,
                Error::InvalidArgument(format!("style {} outside [0, {})", self.styles[i], cfg.styles))
            );
            ensure!(
                (1..=cfg.steps).contains(&self.steps[i]),
                Error::Timestep { t: self.steps[i], max: cfg.steps }
            );
        }
        Ok(())
    }
}

pub fn one_hot<T: Scalar>(k: usize, n: usize) -> Result<Vec<T>> {
    ensure!(k < n, Error::InvalidArgument(format!("class {k} outside [0, {n})")));
    let mut v = vec![T::zero(); n];
    v[k] = T::one();
    Ok(v)
}

/// Sinusoidal timestep features: `sin(t w_i)` then `cos(t w_i)` with
/// `w_i = 10000^(-i / (dim/2))`.
pub fn timestep_embedding<T: Scalar>(t: usize, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let freqs = (0..half).map(|i| (-(i as f64) / half as f64 * 10000f64.ln()).exp());
    let args: Vec<f64> = freqs.map(|w| t as f64 * w).collect();
    args.iter().map(|a| T::lit(a.sin())).chain(args.iter().map(|a| T::lit(a.cos()))).collect()
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv1d,
    cond_shift: Linear,
    cond_scale: Linear,
    norm2: GroupNorm,
    conv2: Conv1d,
    skip: Option<Conv1d>,
}

impl ResBlock {
    fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, cin: usize, cout: usize, cond_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        ResBlock {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), cin),
            conv1: Conv1d::new(ps, &format!("{name}.conv1"), cin, cout, 3, 1, 1, rng),
            cond_shift: Linear::new(ps, &format!("{name}.cond_shift"), cond_dim, cout, rng),
            cond_scale: Linear::new(ps, &format!("{name}.cond_scale"), cond_dim, cout, rng),
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), cout),
            conv2: Conv1d::new(ps, &format!("{name}.conv2"), cout, cout, 3, 1, 1, rng),
            skip: (cin != cout).then(|| Conv1d::new(ps, &format!("{name}.skip"), cin, cout, 1, 1, 0, rng)),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var, cond: Var) -> Var {
        let h = self.norm1.forward(g, p, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, p, h);
        // scale-and-shift conditioning after the second norm
        let h = self.norm2.forward(g, p, h);
        let scale = self.cond_scale.forward(g, p, cond);
        let h = g.modulate_channels(h, scale);
        let shift = self.cond_shift.forward(g, p, cond);
        let h = g.add_channel_bias(h, shift);
        let h = g.silu(h);
        let h = self.conv2.forward(g, p, h);
        let s = match &self.skip {
            Some(c) => c.forward(g, p, x),
            None => x,
        };
        g.add(s, h)
    }
}

#[derive(Debug, Clone)]
struct Attention {
    norm: GroupNorm,
    q: Conv1d,
    k: Conv1d,
    v: Conv1d,
    out: Conv1d,
    channels: usize,
}

impl Attention {
    fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, c: usize, rng: &mut ChaCha8Rng) -> Self {
        Attention {
            norm: GroupNorm::new(ps, &format!("{name}.norm"), c),
            q: Conv1d::new(ps, &format!("{name}.q"), c, c, 1, 1, 0, rng),
            k: Conv1d::new(ps, &format!("{name}.k"), c, c, 1, 1, 0, rng),
            v: Conv1d::new(ps, &format!("{name}.v"), c, c, 1, 1, 0, rng),
            out: Conv1d::new(ps, &format!("{name}.out"), c, c, 1, 1, 0, rng),
            channels: c,
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        let h = self.norm.forward(g, p, x);
        let q = self.q.forward(g, p, h);
        let k = self.k.forward(g, p, h);
        let v = self.v.forward(g, p, h);
        // scores[b, i, j] = q[:, i] . k[:, j]
        let s = g.batch_matmul(q, k, true, false);
        let s = g.scale(s, T::one() / T::of_usize(self.channels).sqrt());
        let a = g.softmax(s);
        let o = g.batch_matmul(v, a, false, true);
        let o = self.out.forward(g, p, o);
        g.add(x, o)
    }
}

/// Graph handles of the three denoiser heads.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserVars {
    pub eps: Var,
    pub root: Var,
    pub foot_logits: Var,
}

/// Plain-tensor denoiser output.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput<T> {
    /// `(B, rot_channels, frames)`.
    pub eps_hat: Tensor<T>,
    /// `(B, root_channels, frames)`.
    pub root_hat: Tensor<T>,
    /// `(B, feet, frames)`; apply a sigmoid for contact probabilities.
    pub foot_logits: Tensor<T>,
}

/// Structure of the denoiser. Parameters live in a separate [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: ModelConfig,
    content_proj: Linear,
    style_proj: Linear,
    time_proj: Linear,
    input: Conv1d,
    down_blocks: Vec<ResBlock>,
    downsample: Vec<Conv1d>,
    mid1: ResBlock,
    attn: Option<Attention>,
    mid2: ResBlock,
    upsample: Vec<Conv1d>,
    up_blocks: Vec<ResBlock>,
    out_norm: GroupNorm,
    eps_head: Conv1d,
    root_head: Conv1d,
    foot_head: Conv1d,
    /// Shared temporal filters `(DETAIL_FILTERS, 1, DETAIL_TAPS)` applied to
    /// every input channel, mixed per clip and channel by `detail_gate`.
    detail_filter: usize,
    detail_gate: Linear,
    /// `sqrt(1 - alpha_bar_t)` for `t = 1..=steps`.
    eps_skip: Vec<f64>,
}

impl Denoiser {
    /// Builds the network and its freshly initialized parameters.
    pub fn new<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamSet<T>)> {
        config.validate()?;
        let c = config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let e = c.embed_dim;
        let cond_dim = 3 * e;
        let content_proj = Linear::new(&mut ps, "cond.content", c.contents, e, &mut rng);
        let style_proj = Linear::new(&mut ps, "cond.style", c.styles, e, &mut rng);
        let time_proj = Linear::new(&mut ps, "cond.time", e, e, &mut rng);
        let input = Conv1d::new(&mut ps, "input", c.rot_channels, c.width, 3, 1, 1, &mut rng);

        let mut down_blocks = Vec::new();
        let mut downsample = Vec::new();
        let mut ch = c.width;
        for l in 0..c.levels {
            let out = c.level_channels(l);
            down_blocks.push(ResBlock::new(&mut ps, &format!("down{l}.res"), ch, out, cond_dim, &mut rng));
            downsample.push(Conv1d::new(&mut ps, &format!("down{l}.pool"), out, out, 3, 2, 1, &mut rng));
            ch = out;
        }
        let mid1 = ResBlock::new(&mut ps, "mid.res1", ch, ch, cond_dim, &mut rng);
        let attn = c.attention.then(|| Attention::new(&mut ps, "mid.attn", ch, &mut rng));
        let mid2 = ResBlock::new(&mut ps, "mid.res2", ch, ch, cond_dim, &mut rng);

        let mut upsample = Vec::new();
        let mut up_blocks = Vec::new();
        for l in (0..c.levels).rev() {
            let skip = c.level_channels(l);
            upsample.push(Conv1d::new(&mut ps, &format!("up{l}.conv"), ch, skip, 3, 1, 1, &mut rng));
            up_blocks.push(ResBlock::new(&mut ps, &format!("up{l}.res"), 2 * skip, skip, cond_dim, &mut rng));
            ch = skip;
        }
        let out_norm = GroupNorm::new(&mut ps, "out.norm", ch);
        let eps_head = Conv1d::with_gain(&mut ps, "head.eps", ch, c.rot_channels, 1, 1, 0, 0.1, &mut rng);
        let root_head = Conv1d::with_gain(&mut ps, "head.root", ch, c.root_channels, 1, 1, 0, 0.1, &mut rng);
        let foot_head = Conv1d::with_gain(&mut ps, "head.foot", ch, c.feet.max(1), 1, 1, 0, 0.1, &mut rng);
        let detail_filter =
            ps.push("detail.filter", uniform(&[DETAIL_FILTERS, 1, DETAIL_TAPS], 0.1 / DETAIL_TAPS as f64, &mut rng));
        let detail_gate = Linear::new(&mut ps, "detail.gate", cond_dim, c.rot_channels * DETAIL_FILTERS, &mut rng);
        let sched = make_schedule::<f64>(c.steps, c.sigma_min, c.sigma_max)?;
        let eps_skip = sched.alpha_bars().iter().map(|a| (1.0 - a).sqrt()).collect();
        let net = Denoiser {
            eps_skip,
            config: c.clone(),
            content_proj,
            style_proj,
            time_proj,
            input,
            down_blocks,
            downsample,
            mid1,
            attn,
            mid2,
            upsample,
            up_blocks,
            out_norm,
            eps_head,
            root_head,
            foot_head,
            detail_filter,
            detail_gate,
        };
        Ok((net, ps))
    }

    /// Conditioning vector `(B, 3 * embed_dim)`: projected content one-hot,
    /// projected style one-hot, projected sinusoidal timestep features.
    pub fn embed_condition<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], cond: &Conditioning) -> Result<Var> {
        cond.validate(&self.config)?;
        let c = &self.config;
        let b = cond.len();
        let mut oc = Vec::with_capacity(b * c.contents);
        let mut os = Vec::with_capacity(b * c.styles);
        let mut te = Vec::with_capacity(b * c.embed_dim);
        for i in 0..b {
            oc.extend(one_hot::<T>(cond.contents[i], c.contents)?);
            os.extend(one_hot::<T>(cond.styles[i], c.styles)?);
            te.extend(timestep_embedding::<T>(cond.steps[i], c.embed_dim));
        }
        let oc = g.constant(Tensor::new(&[b, c.contents], oc)?);
        let os = g.constant(Tensor::new(&[b, c.styles], os)?);
        let te = g.constant(Tensor::new(&[b, c.embed_dim], te)?);
        let ec = self.content_proj.forward(g, p, oc);
        let es = self.style_proj.forward(g, p, os);
        let et = self.time_proj.forward(g, p, te);
        // linear outputs are (B, E); lay them side by side as (B, 3E)
        let stacked = [ec, es, et].map(|v| g.reshape(v, &[b, c.embed_dim, 1]));
        let joined = g.concat_channels(&stacked);
        Ok(g.reshape(joined, &[b, 3 * c.embed_dim]))
    }

    /// Runs the network on `x_t (B, rot_channels, frames)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x_t: Var, cond: &Conditioning) -> Result<DenoiserVars> {
        let c = &self.config;
        let s = g.shape(x_t).to_vec();
        ensure!(
            s.len() == 3 && s[1] == c.rot_channels && s[2] == c.frames && s[0] == cond.len(),
            Error::Shape(format!(
                "denoiser input {:?}, expected [{}, {}, {}]",
                s,
                cond.len(),
                c.rot_channels,
                c.frames
            ))
        );
        let emb = self.embed_condition(g, p, cond)?;
        let emb = g.silu(emb);
        let mut h = self.input.forward(g, p, x_t);
        let mut skips = Vec::with_capacity(c.levels);
        for (block, pool) in self.down_blocks.iter().zip(&self.downsample) {
            h = block.forward(g, p, h, emb);
            skips.push(h);
            h = pool.forward(g, p, h);
        }
        h = self.mid1.forward(g, p, h, emb);
        if let Some(a) = &self.attn {
            h = a.forward(g, p, h);
        }
        h = self.mid2.forward(g, p, h, emb);
        for (conv, block) in self.upsample.iter().zip(&self.up_blocks) {
            let u = g.upsample2(h);
            let u = conv.forward(g, p, u);
            let skip = skips.pop().expect("one skip per level");
            let joined = g.concat_channels(&[u, skip]);
            h = block.forward(g, p, joined, emb);
        }
        let h = self.out_norm.forward(g, p, h);
        let h = g.silu(h);
        // the head predicts the residual over the linear estimate sqrt(1 - alpha_bar_t) x_t
        let b = cond.len();
        let gate: Vec<T> = cond
            .steps
            .iter()
            .flat_map(|&t| std::iter::repeat_n(T::lit(self.eps_skip[t - 1] - 1.0), c.rot_channels))
            .collect();
        let gate = g.constant(Tensor::new(&[b, c.rot_channels], gate)?);
        let skip = g.modulate_channels(x_t, gate);
        let head = self.eps_head.forward(g, p, h);
        let eps = g.add(head, skip);
        let detail = self.detail(g, p, x_t, emb, b);
        let eps = g.add(eps, detail);
        Ok(DenoiserVars {
            eps,
            root: self.root_head.forward(g, p, h),
            foot_logits: self.foot_head.forward(g, p, h),
        })
    }

    /// Per-channel temporal filtering of `x_t`, so fine detail does not have
    /// to pass through the trunk.
    fn detail<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x_t: Var, emb: Var, b: usize) -> Var {
        let (c, l, k) = (self.config.rot_channels, self.config.frames, DETAIL_FILTERS);
        let x = g.reshape(x_t, &[b * c, 1, l]);
        let f = g.conv1d(x, p[self.detail_filter], None, 1, DETAIL_TAPS / 2);
        let f = g.reshape(f, &[b, c * k, l]);
        let gate = self.detail_gate.forward(g, p, emb);
        let f = g.modulate_channels(f, gate);
        let f = g.reshape(f, &[b * c, k, l]);
        let ones = g.constant(Tensor::new(&[1, k, 1], vec![T::one(); k]).expect("shape"));
        let f = g.conv1d(f, ones, None, 1, 0);
        g.reshape(f, &[b, c, l])
    }

    /// Inference-only forward pass.
    pub fn denoise<T: Scalar>(&self, params: &ParamSet<T>, x_t: &Tensor<T>, cond: &Conditioning) -> Result<DenoiserOutput<T>> {
        let mut g = Graph::inference();
        let p = params.bind_frozen(&mut g);
        let x = g.constant(x_t.clone());
        let out = self.forward(&mut g, &p, x, cond)?;
        Ok(DenoiserOutput {
            eps_hat: g.value(out.eps).clone(),
            root_hat: g.value(out.root).clone(),
            foot_logits: g.value(out.foot_logits).clone(),
        })
    }
}

/// Least-squares critic over the concatenated (rotations, root, foot) channels.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub config: ModelConfig,
    convs: Vec<Conv1d>,
    head: Linear,
}

impl Discriminator {
    pub fn new<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamSet<T>)> {
        config.validate()?;
        let c = config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let cin = c.rot_channels + c.root_channels + c.feet;
        let w = c.disc_width;
        let widths = [(cin, w), (w, 2 * w), (2 * w, 2 * w)];
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| Conv1d::new(&mut ps, &format!("disc.conv{i}"), a, b, 4, 2, 1, &mut rng))
            .collect();
        let head = Linear::new(&mut ps, "disc.head", 2 * w, 1, &mut rng);
        Ok((Discriminator { config: c.clone(), convs, head }, ps))
    }

    /// One unbounded score per clip, shape `(B, 1)`. `foot` holds contact
    /// probabilities in `[0, 1]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x0: Var, root: Var, foot: Var) -> Result<Var> {
        let c = &self.config;
        let (xs, rs, fs) = (g.shape(x0).to_vec(), g.shape(root).to_vec(), g.shape(foot).to_vec());
        ensure!(
            xs.len() == 3
                && xs[1] == c.rot_channels
                && rs == [xs[0], c.root_channels, xs[2]]
                && fs == [xs[0], c.feet, xs[2]],
            Error::Shape(format!("discriminator inputs {xs:?}, {rs:?}, {fs:?}"))
        );
        let mut h = g.concat_channels(&[x0, root, foot]);
        for conv in &self.convs {
            h = conv.forward(g, p, h);
            h = g.leaky_relu(h, T::lit(0.2));
        }
        let h = g.mean_time(h);
        Ok(self.head.forward(g, p, h))
    }

    pub fn discriminate<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x0: &Tensor<T>,
        root: &Tensor<T>,
        foot: &Tensor<T>,
    ) -> Result<Vec<T>> {
        let mut g = Graph::inference();
        let p = params.bind_frozen(&mut g);
        let (x, r, f) = (g.constant(x0.clone()), g.constant(root.clone()), g.constant(foot.clone()));
        let out = self.forward(&mut g, &p, x, r, f)?;
        Ok(g.value(out).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            rot_channels: 3,
            root_channels: 4,
            feet: 2,
            frames: 8,
            contents: 3,
            styles: 2,
            steps: 10,
            sigma_min: 0.01,
            sigma_max: 0.2,
            width: 8,
            levels: 2,
            embed_dim: 4,
            disc_width: 4,
            attention: true,
        }
    }

    fn cond() -> Conditioning {
        Conditioning { contents: vec![0, 2], styles: vec![1, 0], steps: vec![3, 10] }
    }

    #[test]
    fn shapes_and_determinism() {
        let cfg = tiny();
        let (net, ps) = Denoiser::new::<f32>(&cfg, 1).unwrap();
        let x = Tensor::randn(&[2, 3, 8], &mut ChaCha8Rng::seed_from_u64(2));
        let a = net.denoise(&ps, &x, &cond()).unwrap();
        let b = net.denoise(&ps, &x, &cond()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.eps_hat.shape(), &[2, 3, 8]);
        assert_eq!(a.root_hat.shape(), &[2, 4, 8]);
        assert_eq!(a.foot_logits.shape(), &[2, 2, 8]);
        let (_, again) = Denoiser::new::<f32>(&cfg, 1).unwrap();
        assert!(ps.check_layout(&again).is_ok());
        assert_eq!(ps.fingerprint(), again.fingerprint());
    }

    #[test]
    fn style_changes_output() {
        let (net, ps) = Denoiser::new::<f64>(&tiny(), 4).unwrap();
        let x = Tensor::randn(&[2, 3, 8], &mut ChaCha8Rng::seed_from_u64(5));
        let a = net.denoise(&ps, &x, &cond()).unwrap();
        let mut c = cond();
        c.styles = vec![0, 1];
        let b = net.denoise(&ps, &x, &c).unwrap();
        assert!(a.eps_hat.max_abs_diff(&b.eps_hat) > 0.0);
    }

    #[test]
    fn rejects_bad_conditioning() {
        let (net, ps) = Denoiser::new::<f32>(&tiny(), 1).unwrap();
        let x = Tensor::zeros(&[2, 3, 8]);
        let mut c = cond();
        c.contents[0] = 3;
        assert!(net.denoise(&ps, &x, &c).is_err());
        let mut c = cond();
        c.steps[1] = 11;
        assert!(net.denoise(&ps, &x, &c).is_err());
        assert!(net.denoise(&ps, &Tensor::zeros(&[2, 4, 8]), &cond()).is_err());
    }

    #[test]
    fn embeddings() {
        let v = one_hot::<f32>(2, 5).unwrap();
        assert_eq!(v.iter().filter(|&&x| x != 0.0).count(), 1);
        assert_eq!(v[2], 1.0);
        assert!(one_hot::<f32>(5, 5).is_err());
        let table: Vec<Vec<f64>> = (1..=1000).map(|t| timestep_embedding(t, 32)).collect();
        for i in 0..table.len() {
            for j in i + 1..table.len() {
                let d: f64 = table[i].iter().zip(&table[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-6, "steps {} and {} collide", i + 1, j + 1);
            }
        }
    }

    #[test]
    fn outputs_finite_over_random_draws() {
        let mut cfg = tiny();
        cfg.steps = 1000;
        let (net, ps) = Denoiser::new::<f32>(&cfg, 7).unwrap();
        let (disc, dps) = Discriminator::new::<f32>(&cfg, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in 0..1000usize {
            let x = Tensor::<f32>::randn(&[1, 3, 8], &mut rng).map(|v| v * (1 + i % 7) as f32);
            let c = Conditioning { contents: vec![i % 3], styles: vec![i % 2], steps: vec![1 + i % 1000] };
            let out = net.denoise(&ps, &x, &c).unwrap();
            assert!(out.eps_hat.is_finite() && out.root_hat.is_finite() && out.foot_logits.is_finite());
            let s = disc.discriminate(&dps, &x, &out.root_hat, &out.foot_logits.map(crate::autograd::sigmoid)).unwrap();
            assert!(s.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn denoiser_gradients_match_finite_differences() {
        let cfg = tiny();
        let (net, ps) = Denoiser::new::<f64>(&cfg, 11).unwrap();
        let x = Tensor::randn(&[2, 3, 8], &mut ChaCha8Rng::seed_from_u64(12));
        let mut inputs: Vec<Tensor<f64>> = ps.tensors().cloned().collect();
        inputs.push(x);
        let n = ps.len();
        let report = check_gradients(&inputs, |g, v| {
            let out = net.forward(g, &v[..n], v[n], &cond()).unwrap();
            let a = g.mean(out.eps);
            let r = g.square(out.root);
            let r = g.mean(r);
            let f = g.sigmoid(out.foot_logits);
            let f = g.mean(f);
            let s = g.add(a, r);
            g.add(s, f)
        }, 1e-5, 24);
        assert!(report.worst() < 1e-4, "input {} error {}", report.worst_input(), report.worst());
    }

    #[test]
    fn discriminator_gradients_match_finite_differences() {
        let cfg = tiny();
        let (disc, ps) = Discriminator::new::<f64>(&cfg, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut inputs: Vec<Tensor<f64>> = ps.tensors().cloned().collect();
        inputs.push(Tensor::randn(&[2, 3, 8], &mut rng));
        inputs.push(Tensor::randn(&[2, 4, 8], &mut rng));
        inputs.push(Tensor::randn(&[2, 2, 8], &mut rng).map(crate::autograd::sigmoid));
        let n = ps.len();
        let report = check_gradients(&inputs, |g, v| {
            let s = disc.forward(g, &v[..n], v[n], v[n + 1], v[n + 2]).unwrap();
            let s = g.square(s);
            g.mean(s)
        }, 1e-6, 64);
        assert!(report.worst() < 1e-4, "input {} error {}", report.worst_input(), report.worst());
    }
}
