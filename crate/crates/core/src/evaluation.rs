//! Quantitative evaluation: a content classifier whose penultimate features
//! feed a Fréchet distance between real and generated clips.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::derive_seed;
use crate::error::{ensure, Error, Result};
use crate::model::checkpoint::TensorBundle;
use crate::motiondata::{ClipBatch, Dataset, MotionClip};
use crate::nn::{Conv1d, Linear, ParamSet};
use crate::postprocess::gaussian_filter;
use crate::optim::{adam_update, AdamConfig, AdamState};
use crate::sampler::Generator;
use crate::scalar::Scalar;
use crate::trainer::{run_training, Trainer, TrainerConfig, SPLIT_SEED};

/// Eigenvalues and eigenvectors of a symmetric `n x n` matrix (row-major)
/// by cyclic Jacobi rotations. Eigenvector `k` is column `k` of the returned
/// matrix. Eigenvalues are sorted ascending.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let total: f64 = m.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i * n + j].powi(2)).sum();
        if off <= 1e-30 * total {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[i * n + i].total_cmp(&m[j * n + j]));
    let vals = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (new, &old) in order.iter().enumerate() {
        for r in 0..n {
            vecs[r * n + new] = v[r * n + old];
        }
    }
    (vals, vecs)
}

/// Gaussian fit of a feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidStats {
    pub mu: Vec<f64>,
    /// Row-major `dim x dim` covariance.
    pub sigma: Vec<f64>,
}

impl FidStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Mean and unbiased (n - 1) covariance of the rows of `features`.
pub fn compute_stats(features: &[Vec<f64>]) -> Result<FidStats> {
    ensure!(features.len() >= 2, Error::InvalidArgument("need at least two feature rows".into()));
    let d = features[0].len();
    ensure!(d > 0 && features.iter().all(|r| r.len() == d), Error::Shape("ragged feature matrix".into()));
    let n = features.len() as f64;
    let mut mu = vec![0.0; d];
    for r in features {
        for (m, v) in mu.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut sigma = vec![0.0; d * d];
    for r in features {
        let c: Vec<f64> = r.iter().zip(&mu).map(|(v, m)| v - m).collect();
        for i in 0..d {
            for j in i..d {
                sigma[i * d + j] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = sigma[i * d + j] / (n - 1.0);
            sigma[i * d + j] = v;
            sigma[j * d + i] = v;
        }
    }
    Ok(FidStats { mu, sigma })
}

/// Eigenvalues must not fall below `-EIG_TOL * max(1, largest |eigenvalue|)`.
const EIG_TOL: f64 = 1e-6;

fn psd_eigen(a: &[f64], n: usize, what: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let (vals, vecs) = symmetric_eigen(a, n);
    let scale = vals.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if let Some(bad) = vals.iter().find(|&&v| v < -EIG_TOL * scale) {
        return Err(Error::Numeric(format!("{what} is not positive semi-definite (eigenvalue {bad:e})")));
    }
    Ok((vals.into_iter().map(|v| v.max(0.0)).collect(), vecs))
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

fn symmetrize(a: &mut [f64], n: usize) {
    for i in 0..n {
        for j in i + 1..n {
            let m = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = m;
            a[j * n + i] = m;
        }
    }
}

/// Fréchet distance `|mu_r - mu_g|^2 + tr(S_r + S_g - 2 (S_r S_g)^(1/2))`.
///
/// The trace of the square root is taken from the eigenvalues of the
/// symmetric matrix `S_r^(1/2) S_g S_r^(1/2)`, which shares its spectrum
/// with `S_r S_g`.
pub fn fid(r: &FidStats, g: &FidStats) -> Result<f64> {
    let d = r.dim();
    ensure!(
        g.dim() == d && r.sigma.len() == d * d && g.sigma.len() == d * d,
        Error::Shape(format!("feature dimensions differ: {} vs {}", d, g.dim()))
    );
    for (name, s) in [("real covariance", &r.sigma), ("generated covariance", &g.sigma)] {
        ensure!(s.iter().all(|v| v.is_finite()), Error::NonFinite(format!("{name} has non-finite entries")));
        let scale = s.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..d {
            for j in i + 1..d {
                ensure!(
                    (s[i * d + j] - s[j * d + i]).abs() <= 1e-8 * scale,
                    Error::Numeric(format!("{name} is not symmetric"))
                );
            }
        }
    }
    let (vals, vecs) = psd_eigen(&r.sigma, d, "real covariance")?;
    let mut root = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            root[i * d + j] = (0..d).map(|k| vecs[i * d + k] * vals[k].sqrt() * vecs[j * d + k]).sum();
        }
    }
    let mut m = matmul(&matmul(&root, &g.sigma, d), &root, d);
    symmetrize(&mut m, d);
    let (mvals, _) = psd_eigen(&m, d, "covariance product")?;
    let tr_sqrt: f64 = mvals.iter().map(|v| v.sqrt()).sum();
    let trace = |s: &[f64]| (0..d).map(|i| s[i * d + i]).sum::<f64>();
    let mean_term: f64 = r.mu.iter().zip(&g.mu).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((mean_term + trace(&r.sigma) + trace(&g.sigma) - 2.0 * tr_sqrt).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub width: usize,
    pub feature_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { width: 64, feature_dim: 64, steps: 400, batch_size: 32, learning_rate: 1e-3, seed: 0 }
    }
}

/// Temporal convolutions over the rotation channels, global average pooling,
/// a feature layer and a linear content head.
#[derive(Debug, Clone)]
pub struct Classifier<T> {
    pub config: ClassifierConfig,
    pub rot_channels: usize,
    pub num_contents: usize,
    convs: Vec<Conv1d>,
    feature: Linear,
    head: Linear,
    pub params: ParamSet<T>,
}

const CLASSIFIER_FORMAT: &str = "motiondiff-classifier";

#[derive(Serialize, Deserialize)]
struct ClassifierHeader {
    format: String,
    config: ClassifierConfig,
    rot_channels: usize,
    num_contents: usize,
}

impl<T: Scalar> Classifier<T> {
    pub fn new(config: ClassifierConfig, rot_channels: usize, num_contents: usize) -> Result<Self> {
        ensure!(
            config.width > 0 && config.feature_dim > 0 && config.batch_size > 0 && num_contents > 0 && rot_channels > 0,
            Error::Config("classifier sizes must be positive".into())
        );
        ensure!(config.learning_rate > 0.0, Error::Config("classifier learning rate must be positive".into()));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));
        let mut ps = ParamSet::new();
        let w = config.width;
        let convs = vec![
            Conv1d::new(&mut ps, "cls.conv0", rot_channels, w, 5, 1, 2, &mut rng),
            Conv1d::new(&mut ps, "cls.conv1", w, w, 3, 2, 1, &mut rng),
            Conv1d::new(&mut ps, "cls.conv2", w, w, 3, 2, 1, &mut rng),
        ];
        let feature = Linear::new(&mut ps, "cls.feature", w, config.feature_dim, &mut rng);
        let head = Linear::new(&mut ps, "cls.head", config.feature_dim, num_contents, &mut rng);
        Ok(Classifier { config, rot_channels, num_contents, convs, feature, head, params: ps })
    }

    /// `(features, logits)` for rotations `(B, channels, frames)`.
    fn forward(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> (Var, Var) {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, p, h);
            h = g.relu(h);
        }
        let h = g.mean_time(h);
        let f = self.feature.forward(g, p, h);
        let f = g.relu(f);
        let logits = self.head.forward(g, p, f);
        (f, logits)
    }

    fn batch(&self, clips: &[&MotionClip<f32>]) -> Result<crate::tensor::Tensor<T>> {
        let b = ClipBatch::<T>::from_clips(clips)?;
        ensure!(
            b.x0.shape()[1] == self.rot_channels,
            Error::Shape(format!("classifier expects {} rotation channels, got {}", self.rot_channels, b.x0.shape()[1]))
        );
        Ok(b.x0)
    }

    /// Trains on normalized clips; deterministic for a fixed config.
    pub fn train(config: ClassifierConfig, clips: &[&MotionClip<f32>], num_contents: usize) -> Result<Self> {
        ensure!(!clips.is_empty(), Error::Data("no clips to train the classifier on".into()));
        ensure!(
            clips.iter().all(|c| c.content < num_contents),
            Error::Data("clip content label out of range".into())
        );
        let mut cls = Self::new(config, clips[0].rotation_channels(), num_contents)?;
        let mut adam = AdamState::new(&cls.params);
        let opt = AdamConfig { lr: cls.config.learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cls.config.seed, 2));
        for _ in 0..cls.config.steps {
            let pick: Vec<&MotionClip<f32>> =
                (0..cls.config.batch_size).map(|_| clips[rng.random_range(0..clips.len())]).collect();
            let x = cls.batch(&pick)?;
            let targets: Vec<usize> = pick.iter().map(|c| c.content).collect();
            let mut g = Graph::new();
            let p = cls.params.bind(&mut g);
            let xv = g.constant(x);
            let (_, logits) = cls.forward(&mut g, &p, xv);
            let loss = g.cross_entropy(logits, &targets);
            ensure!(g.value(loss).is_finite(), Error::NonFinite("classifier loss is not finite".into()));
            let grads = g.backward(loss);
            let gs: Vec<Vec<T>> = p.iter().zip(cls.params.tensors()).map(|(&v, t)| grads.get_or_zeros(v, t.len())).collect();
            adam_update(&mut cls.params, &gs, &mut adam, &opt)?;
        }
        Ok(cls)
    }

    fn run(&self, clips: &[&MotionClip<f32>]) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
        let mut feats = Vec::with_capacity(clips.len());
        let mut preds = Vec::with_capacity(clips.len());
        for chunk in clips.chunks(128) {
            let x = self.batch(chunk)?;
            let mut g = Graph::inference();
            let p = self.params.bind_frozen(&mut g);
            let xv = g.constant(x);
            let (f, l) = self.forward(&mut g, &p, xv);
            let fd = self.config.feature_dim;
            feats.extend(g.value(f).data().chunks(fd).map(|r| r.iter().map(|v| v.as_f64()).collect::<Vec<f64>>()));
            preds.extend(g.value(l).data().chunks(self.num_contents).map(|r| {
                (0..r.len()).fold(0, |best, k| if r[k] > r[best] { k } else { best })
            }));
        }
        Ok((feats, preds))
    }

    /// Penultimate activations, one row of `feature_dim` values per clip.
    pub fn extract_features(&self, clips: &[&MotionClip<f32>]) -> Result<Vec<Vec<f64>>> {
        Ok(self.run(clips)?.0)
    }

    pub fn predict(&self, clips: &[&MotionClip<f32>]) -> Result<Vec<usize>> {
        Ok(self.run(clips)?.1)
    }

    pub fn accuracy(&self, clips: &[&MotionClip<f32>]) -> Result<f64> {
        ensure!(!clips.is_empty(), Error::Data("no clips to score".into()));
        let p = self.predict(clips)?;
        Ok(p.iter().zip(clips).filter(|(a, c)| **a == c.content).count() as f64 / clips.len() as f64)
    }

    pub fn to_bundle(&self) -> Result<TensorBundle<T>> {
        let header = ClassifierHeader {
            format: CLASSIFIER_FORMAT.into(),
            config: self.config.clone(),
            rot_channels: self.rot_channels,
            num_contents: self.num_contents,
        };
        Ok(TensorBundle { header: serde_json::to_value(header)?, groups: vec![("classifier".into(), self.params.clone())] })
    }

    pub fn from_bundle(b: &TensorBundle<T>) -> Result<Self> {
        let h: ClassifierHeader = serde_json::from_value(b.header.clone())
            .map_err(|e| Error::Container(format!("not a classifier checkpoint: {e}")))?;
        ensure!(h.format == CLASSIFIER_FORMAT, Error::Container(format!("unexpected format '{}'", h.format)));
        let mut c = Self::new(h.config, h.rot_channels, h.num_contents)?;
        let p = b.require("classifier")?;
        c.params.check_layout(p)?;
        c.params = p.clone();
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_bundle()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bundle(&TensorBundle::load(path)?)
    }
}

/// Accuracy of always answering the most frequent label.
pub fn majority_baseline(labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    *counts.values().max().unwrap() as f64 / labels.len() as f64
}

/// Mean norm of the per-joint second difference of rotations (radians per
/// frame squared) over clips in physical units.
pub fn mean_joint_acceleration<T: Scalar>(clips: &[MotionClip<T>]) -> f64 {
    let (mut total, mut count) = (0.0, 0usize);
    for c in clips {
        for f in 2..c.num_frames {
            for j in 0..c.num_joints {
                let (a, b, d) = (c.joint_angles(f, j), c.joint_angles(f - 1, j), c.joint_angles(f - 2, j));
                total += (0..3).map(|k| (a[k] - 2.0 * b[k] + d[k]).powi(2)).sum::<f64>().sqrt();
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

/// Mean planar root speed (units per second) of clips in physical units.
pub fn mean_root_speed<T: Scalar>(clips: &[MotionClip<T>]) -> f64 {
    let v: Vec<f64> = clips
        .iter()
        .flat_map(|c| (0..c.num_frames).map(move |f| c.root_at(f)))
        .map(|r| r[0].hypot(r[1]))
        .collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Everything [`evaluate_run`] measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Generated clips vs the held-out real clips.
    pub fid: f64,
    /// One half of the held-out clips vs the other half, averaged over
    /// [`HALF_SPLITS`] random splits.
    pub real_fid: f64,
    /// Generated clips vs the second half of the same splits, at the first
    /// half's size, so it carries the same small-sample bias as `real_fid`.
    pub half_fid: f64,
    pub n_gen: usize,
    pub n_real: usize,
    /// Content accuracy of the classifier on generated clips.
    pub accuracy: f64,
    pub per_content_accuracy: Vec<f64>,
    pub content_names: Vec<String>,
    /// Classifier accuracy on the held-out real clips.
    pub real_accuracy: f64,
    pub mean_acceleration: f64,
    pub per_content_root_speed: Vec<f64>,
}

/// Held-out clip indices of `data` for a run trained with `held_out_fraction`.
pub fn held_out(data: &Dataset, held_out_fraction: f64) -> Vec<usize> {
    data.split(held_out_fraction, SPLIT_SEED).1
}

/// Labels cycling through every (content, style) pair.
pub fn balanced_labels(n: usize, contents: usize, styles: usize) -> (Vec<usize>, Vec<usize>) {
    ((0..n).map(|i| i % contents).collect(), (0..n).map(|i| (i / contents) % styles).collect())
}

/// Random half-splits averaged in [`EvalReport::real_fid`].
pub const HALF_SPLITS: u64 = 10;

/// Mean `(FID(A, B), FID(G, B))` over random splits of `real` into halves
/// `A`, `B`, with `G` a same-size random subset of `generated`.
pub fn half_split_fids(real: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<(f64, f64)> {
    let n = real.len() / 2;
    ensure!(n >= 2, Error::Data(format!("{} real clips cannot be split into halves", real.len())));
    let m = n.min(generated.len());
    let pick = |src: &[Vec<f64>], idx: &[usize]| idx.iter().map(|&i| src[i].clone()).collect::<Vec<_>>();
    let (mut rr, mut gr) = (0.0, 0.0);
    for k in 0..HALF_SPLITS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(SPLIT_SEED, 100 + k));
        let mut ri: Vec<usize> = (0..real.len()).collect();
        ri.shuffle(&mut rng);
        let mut gi: Vec<usize> = (0..generated.len()).collect();
        gi.shuffle(&mut rng);
        let b = compute_stats(&pick(real, &ri[n..2 * n]))?;
        rr += fid(&compute_stats(&pick(real, &ri[..n]))?, &b)?;
        gr += fid(&compute_stats(&pick(generated, &gi[..m]))?, &b)?;
    }
    Ok((rr / HALF_SPLITS as f64, gr / HALF_SPLITS as f64))
}

/// Generates `n_gen` clips (default: as many as there are held-out clips),
/// balanced over (content, style), and compares them with the held-out set.
pub fn evaluate_run<T: Scalar>(
    generator: &Generator<T>,
    data: &Dataset,
    classifier: &Classifier<f32>,
    held_out_fraction: f64,
    n_gen: Option<usize>,
    filter_sigma: f64,
    seed: u64,
) -> Result<EvalReport> {
    ensure!(generator.meta == data.meta, Error::Data("checkpoint was trained on a different dataset".into()));
    let held: Vec<&MotionClip<f32>> = held_out(data, held_out_fraction).iter().map(|&i| &data.clips[i]).collect();
    ensure!(held.len() >= 4, Error::Data(format!("only {} held-out clips; need at least 4", held.len())));
    let n_gen = n_gen.unwrap_or(held.len());
    ensure!(n_gen >= 2, Error::InvalidArgument("need at least two generated clips".into()));
    let (nc, ns) = (data.num_contents(), data.num_styles());
    let (contents, styles) = balanced_labels(n_gen, nc, ns);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 7));
    let generated: Vec<MotionClip<f32>> =
        generator.sample_normalized(&contents, &styles, &mut rng)?.iter().map(|c| c.cast()).collect();
    // a nonzero sigma scores the smoothed clips; acceleration always uses the raw ones
    let filtered: Vec<MotionClip<f32>> = generated.iter().map(|c| gaussian_filter(c, filter_sigma)).collect::<Result<_>>()?;
    let gen_refs: Vec<&MotionClip<f32>> = filtered.iter().collect();

    let (real_f, real_pred) = classifier.run(&held)?;
    let (gen_f, gen_pred) = classifier.run(&gen_refs)?;
    let real_stats = compute_stats(&real_f)?;
    let fid_value = fid(&real_stats, &compute_stats(&gen_f)?)?;
    let (real_fid, half_fid) = half_split_fids(&real_f, &gen_f)?;

    let hits = |pred: &[usize], clips: &[&MotionClip<f32>]| pred.iter().zip(clips).filter(|(p, c)| **p == c.content).count();
    let per_content_accuracy = (0..nc)
        .map(|k| {
            let idx: Vec<usize> = (0..n_gen).filter(|&i| contents[i] == k).collect();
            if idx.is_empty() {
                return 0.0;
            }
            idx.iter().filter(|&&i| gen_pred[i] == k).count() as f64 / idx.len() as f64
        })
        .collect();
    let physical: Vec<MotionClip<f32>> =
        generated.iter().map(|c| data.meta.stats.denormalize(c)).collect::<Result<_>>()?;
    let per_content_root_speed = (0..nc)
        .map(|k| mean_root_speed(&physical.iter().filter(|c| c.content == k).cloned().collect::<Vec<_>>()))
        .collect();
    Ok(EvalReport {
        fid: fid_value,
        real_fid,
        half_fid,
        n_gen,
        n_real: held.len(),
        accuracy: hits(&gen_pred, &gen_refs) as f64 / n_gen as f64,
        per_content_accuracy,
        content_names: data.meta.content_names.clone(),
        real_accuracy: hits(&real_pred, &held) as f64 / held.len() as f64,
        mean_acceleration: mean_joint_acceleration(&physical),
        per_content_root_speed,
    })
}

/// Trains the content classifier on the training split of `data`.
pub fn train_dataset_classifier(data: &Dataset, held_out_fraction: f64, config: ClassifierConfig) -> Result<Classifier<f32>> {
    let train: Vec<&MotionClip<f32>> = data.split(held_out_fraction, SPLIT_SEED).0.iter().map(|&i| &data.clips[i]).collect();
    Classifier::train(config, &train, data.num_contents())
}

/// One row of the ablation comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: String,
    pub fid: f64,
    pub accuracy: f64,
    pub mean_acceleration: f64,
}

/// Trains and evaluates one model per row name (see
/// [`crate::losses::Ablation::row`]) under the same seed. With an output
/// directory, each row's run goes to `<out>/<row>/`.
pub fn run_ablation(
    base: &TrainerConfig,
    data: &Dataset,
    classifier: &Classifier<f32>,
    rows: &[String],
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let mut table = Vec::with_capacity(rows.len());
    for row in rows {
        let cfg = base.for_ablation_row(row)?;
        let mut trainer = Trainer::<f32>::new(cfg, data.meta.clone())?;
        let dir = out_dir.map(|d| d.join(row));
        run_training(&mut trainer, data, dir.as_deref())?;
        let report = evaluate_run(
            &Generator::from_trainer(&trainer, true),
            data,
            classifier,
            base.held_out_fraction,
            None,
            0.0,
            base.seed,
        )?;
        table.push(AblationRow {
            row: row.clone(),
            fid: report.fid,
            accuracy: report.accuracy,
            mean_acceleration: report.mean_acceleration,
        });
    }
    Ok(table)
}

/// Plain-text table of ablation rows.
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<16} {:>10} {:>9} {:>12}\n", "row", "fid", "accuracy", "mean_accel");
    for r in rows {
        s.push_str(&format!("{:<16} {:>10.4} {:>9.4} {:>12.6}\n", r.row, r.fid, r.accuracy, r.mean_acceleration));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motiondata::synthetic_dataset;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
    }

    fn random_psd(d: usize, seed: u64) -> Vec<f64> {
        let a = DMatrix::from_row_slice(d, d, &random_rows(d, d, seed).concat());
        let s = &a * a.transpose();
        (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| s[(i, j)]).collect()
    }

    #[test]
    fn jacobi_matches_library_eigensolver() {
        let d = 6;
        let a = random_psd(d, 3);
        let (vals, vecs) = symmetric_eigen(&a, d);
        let lib = DMatrix::from_row_slice(d, d, &a).symmetric_eigen();
        let mut lv: Vec<f64> = lib.eigenvalues.iter().copied().collect();
        lv.sort_by(f64::total_cmp);
        for (x, y) in vals.iter().zip(&lv) {
            assert!((x - y).abs() < 1e-9 * lv[d - 1], "{x} vs {y}");
        }
        // V diag(vals) V^T reproduces the input
        for i in 0..d {
            for j in 0..d {
                let r: f64 = (0..d).map(|k| vecs[i * d + k] * vals[k] * vecs[j * d + k]).sum();
                assert!((r - a[i * d + j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fid_trivial_cases() {
        let s = compute_stats(&random_rows(50, 4, 1)).unwrap();
        assert!(fid(&s, &s).unwrap().abs() < 1e-8);
        let a = FidStats { mu: vec![0.0], sigma: vec![1.0] };
        let b = FidStats { mu: vec![1.0], sigma: vec![1.0] };
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert!(fid(&a, &s).is_err());
        let bad = FidStats { mu: vec![0.0, 0.0], sigma: vec![1.0, 0.0, 0.0, -1.0] };
        let ok = FidStats { mu: vec![0.0, 0.0], sigma: vec![1.0, 0.0, 0.0, 1.0] };
        assert!(matches!(fid(&bad, &ok), Err(Error::Numeric(_))));
    }

    /// Independent path: eigenvalues of the non-symmetric product through the
    /// library's general eigen solver.
    fn oracle_fid(r: &FidStats, g: &FidStats) -> f64 {
        let d = r.dim();
        let sr = DMatrix::from_row_slice(d, d, &r.sigma);
        let sg = DMatrix::from_row_slice(d, d, &g.sigma);
        let ev = (&sr * &sg).complex_eigenvalues();
        let tr_sqrt: f64 = ev.iter().map(|z| z.re.max(0.0).sqrt()).sum();
        let m: f64 = r.mu.iter().zip(&g.mu).map(|(a, b)| (a - b).powi(2)).sum();
        m + sr.trace() + sg.trace() - 2.0 * tr_sqrt
    }

    #[test]
    fn fid_matches_oracle_on_random_psd_pairs() {
        for seed in 0..5 {
            let r = FidStats { mu: vec![0.3, -1.0, 2.0], sigma: random_psd(3, 10 + seed) };
            let g = FidStats { mu: vec![0.0, 0.5, 1.5], sigma: random_psd(3, 20 + seed) };
            let (a, b) = (fid(&r, &g).unwrap(), oracle_fid(&r, &g));
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    proptest! {
        #[test]
        fn fid_symmetric_and_translation_invariant(seed in 0u64..1000, shift in -5.0f64..5.0) {
            let a = random_rows(30, 4, seed);
            let b: Vec<Vec<f64>> = random_rows(30, 4, seed + 5000).into_iter().map(|r| r.iter().map(|v| 0.5 * v + 0.3).collect()).collect();
            let (sa, sb) = (compute_stats(&a).unwrap(), compute_stats(&b).unwrap());
            let f = fid(&sa, &sb).unwrap();
            prop_assert!(f >= 0.0);
            prop_assert!((f - fid(&sb, &sa).unwrap()).abs() < 1e-8);
            prop_assert!(fid(&sa, &sa).unwrap().abs() < 1e-8);
            let t = |rows: &[Vec<f64>]| rows.iter().map(|r| r.iter().enumerate().map(|(i, v)| v + shift * (i as f64 + 1.0)).collect()).collect::<Vec<Vec<f64>>>();
            let moved = fid(&compute_stats(&t(&a)).unwrap(), &compute_stats(&t(&b)).unwrap()).unwrap();
            prop_assert!((moved - f).abs() < 1e-8);
        }

        #[test]
        fn stats_are_permutation_invariant(seed in 0u64..1000, rot in 1usize..20) {
            let a = random_rows(20, 3, seed);
            let mut b = a.clone();
            b.rotate_left(rot);
            let (sa, sb) = (compute_stats(&a).unwrap(), compute_stats(&b).unwrap());
            for (x, y) in sa.mu.iter().zip(&sb.mu).chain(sa.sigma.iter().zip(&sb.sigma)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn covariance_oracles() {
        let same = vec![vec![1.5, -2.0, 0.25]; 7];
        let s = compute_stats(&same).unwrap();
        assert!(s.sigma.iter().all(|&v| v.abs() < 1e-24));
        assert!(s.mu.iter().zip([1.5, -2.0, 0.25]).all(|(a, b)| (a - b).abs() < 1e-12));
        // two-pass oracle
        let rows = random_rows(40, 3, 9);
        let st = compute_stats(&rows).unwrap();
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..3).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
        for i in 0..3 {
            for j in 0..3 {
                let c: f64 = rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / (n - 1.0);
                assert!((st.sigma[i * 3 + j] - c).abs() < 1e-8);
            }
        }
        assert!(compute_stats(&rows[..1]).is_err());
    }

    #[test]
    fn majority() {
        assert!((majority_baseline(&[0, 1, 2, 0, 1, 2]) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(majority_baseline(&[1, 1, 0]), 2.0 / 3.0);
    }

    #[test]
    fn classifier_separates_synthetic_contents() {
        let d = synthetic_dataset(300, 3, 3, 5).unwrap();
        let cfg = ClassifierConfig { steps: 300, ..Default::default() };
        let c = train_dataset_classifier(&d, 1.0 / 3.0, cfg.clone()).unwrap();
        let held: Vec<&MotionClip<f32>> = held_out(&d, 1.0 / 3.0).iter().map(|&i| &d.clips[i]).collect();
        let acc = c.accuracy(&held).unwrap();
        assert!(acc > 0.9, "held-out accuracy {acc}");
        let again = train_dataset_classifier(&d, 1.0 / 3.0, cfg).unwrap();
        assert_eq!(again.params, c.params);

        let feats = c.extract_features(&[held[0], held[1], held[0]]).unwrap();
        assert_eq!(feats.len(), 3);
        assert_eq!(feats[0], feats[2]);
        assert_eq!(feats[0].len(), 64);

        // class means are further apart than the typical within-class spread
        let all = c.extract_features(&held).unwrap();
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let means: Vec<Vec<f64>> = (0..3)
            .map(|k| {
                let rows: Vec<&Vec<f64>> = all.iter().zip(&held).filter(|(_, c)| c.content == k).map(|(f, _)| f).collect();
                (0..64).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / rows.len() as f64).collect()
            })
            .collect();
        let within: f64 = all.iter().zip(&held).map(|(f, c)| dist(f, &means[c.content])).sum::<f64>() / all.len() as f64;
        let between = (dist(&means[0], &means[1]) + dist(&means[0], &means[2]) + dist(&means[1], &means[2])) / 3.0;
        assert!(between > within, "between {between} within {within}");

        let back = Classifier::<f32>::from_bundle(&TensorBundle::from_bytes(&c.to_bundle().unwrap().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.predict(&held).unwrap(), c.predict(&held).unwrap());
    }

    #[test]
    fn acceleration_metric() {
        let mk = |f: &dyn Fn(usize) -> f64| {
            MotionClip::new(5, 1, 0, (0..5).flat_map(|i| [f(i), 0.0, 0.0]).collect(), vec![0.0; 20], vec![], 0, 0).unwrap()
        };
        assert!(mean_joint_acceleration(&[mk(&|i| 0.3 * i as f64)]) < 1e-12);
        assert!((mean_joint_acceleration(&[mk(&|i| (i * i) as f64)]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn untrained_run_report_is_complete() {
        let d = synthetic_dataset(36, 3, 2, 2).unwrap();
        let cfg = TrainerConfig { diffusion_steps: 5, width: 8, embed_dim: 8, disc_width: 8, ..TrainerConfig::desk() };
        let g = Generator::from_trainer(&Trainer::<f32>::new(cfg, d.meta.clone()).unwrap(), true);
        let cls = train_dataset_classifier(&d, 1.0 / 3.0, ClassifierConfig { steps: 5, ..Default::default() }).unwrap();
        let r = evaluate_run(&g, &d, &cls, 1.0 / 3.0, None, 0.0, 0).unwrap();
        assert_eq!((r.n_gen, r.n_real), (12, 12));
        assert!(r.fid.is_finite() && r.real_fid.is_finite());
        let json = serde_json::to_value(&r).unwrap();
        for k in ["fid", "real_fid", "accuracy", "per_content_accuracy", "n_gen", "mean_acceleration"] {
            assert!(json.get(k).is_some(), "{k}");
        }
        assert_eq!(evaluate_run(&g, &d, &cls, 1.0 / 3.0, None, 0.0, 0).unwrap(), r);
    }
}
