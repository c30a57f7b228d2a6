//! Training objectives, as graph ops and as plain tensor functions.
//!
//! Squared-error terms are means over every element. The velocity and
//! acceleration terms treat each joint's three rotation channels as one
//! vector: the squared norm of its frame difference, averaged over batch,
//! joints and frames.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Channels per joint in the rotation block.
const JOINT_DIMS: f64 = 3.0;

fn mse<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let s = g.square(d);
    g.mean(s)
}

pub fn noise_loss<T: Scalar>(g: &mut Graph<T>, eps: Var, eps_hat: Var) -> Var {
    mse(g, eps, eps_hat)
}

/// Compares contact labels with `sigmoid(logits)`.
pub fn foot_loss<T: Scalar>(g: &mut Graph<T>, labels: Var, logits: Var) -> Var {
    let p = g.sigmoid(logits);
    mse(g, labels, p)
}

pub fn root_loss<T: Scalar>(g: &mut Graph<T>, root: Var, root_hat: Var) -> Var {
    mse(g, root, root_hat)
}

/// `x0_hat` is `(B, joints * 3, frames)`.
pub fn velocity_loss<T: Scalar>(g: &mut Graph<T>, x0_hat: Var) -> Var {
    let d = g.time_diff(x0_hat);
    let s = g.square(d);
    let m = g.mean(s);
    g.scale(m, T::lit(JOINT_DIMS))
}

pub fn acceleration_loss<T: Scalar>(g: &mut Graph<T>, x0_hat: Var) -> Var {
    let d = g.time_diff(x0_hat);
    let d = g.time_diff(d);
    let s = g.square(d);
    let m = g.mean(s);
    g.scale(m, T::lit(JOINT_DIMS))
}

/// Least-squares critic objective: real scores pulled to 1, fake to 0.
pub fn disc_loss<T: Scalar>(g: &mut Graph<T>, real: Var, fake: Var) -> Var {
    let r = g.add_scalar(real, -T::one());
    let r = g.square(r);
    let r = g.mean(r);
    let f = g.square(fake);
    let f = g.mean(f);
    g.add(r, f)
}

/// Least-squares generator term: fake scores pulled to 1.
pub fn generator_adv_loss<T: Scalar>(g: &mut Graph<T>, fake: Var) -> Var {
    let f = g.add_scalar(fake, -T::one());
    let f = g.square(f);
    g.mean(f)
}

fn eval1<T: Scalar>(a: &Tensor<T>, f: impl Fn(&mut Graph<T>, Var) -> Var) -> T {
    let mut g = Graph::inference();
    let va = g.constant(a.clone());
    let out = f(&mut g, va);
    g.value(out).data()[0]
}

fn eval2<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(&mut Graph<T>, Var, Var) -> Var) -> Result<T> {
    ensure!(
        a.same_shape(b),
        Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape()))
    );
    let mut g = Graph::inference();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = f(&mut g, va, vb);
    Ok(g.value(out).data()[0])
}

pub fn loss_noise<T: Scalar>(eps: &Tensor<T>, eps_hat: &Tensor<T>) -> Result<T> {
    eval2(eps, eps_hat, noise_loss)
}

/// `f_hat` holds probabilities (already passed through a sigmoid).
pub fn loss_foot<T: Scalar>(f: &Tensor<T>, f_hat: &Tensor<T>) -> Result<T> {
    eval2(f, f_hat, mse)
}

pub fn loss_root<T: Scalar>(r: &Tensor<T>, r_hat: &Tensor<T>) -> Result<T> {
    eval2(r, r_hat, root_loss)
}

fn check_frames<T: Scalar>(x: &Tensor<T>, min: usize) -> Result<()> {
    let s = x.shape();
    ensure!(
        s.len() == 3 && s[2] >= min && s[1] % 3 == 0,
        Error::Shape(format!("expected (B, joints*3, frames >= {min}), got {s:?}"))
    );
    Ok(())
}

pub fn loss_velocity<T: Scalar>(x0_hat: &Tensor<T>) -> Result<T> {
    check_frames(x0_hat, 2)?;
    Ok(eval1(x0_hat, velocity_loss))
}

pub fn loss_acceleration<T: Scalar>(x0_hat: &Tensor<T>) -> Result<T> {
    check_frames(x0_hat, 3)?;
    Ok(eval1(x0_hat, acceleration_loss))
}

/// From discriminator scores on real and generated clips.
pub fn loss_disc<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>) -> Result<T> {
    ensure!(real.len() == fake.len(), Error::Shape("score counts differ".into()));
    let mut g = Graph::inference();
    let (r, f) = (g.constant(real.clone()), g.constant(fake.clone()));
    let out = disc_loss(&mut g, r, f);
    Ok(g.value(out).data()[0])
}

pub fn loss_generator_adv<T: Scalar>(fake: &Tensor<T>) -> T {
    eval1(fake, generator_adv_loss)
}

/// Weights `lambda_1..lambda_6` for (noise, foot, root, adversarial, velocity, acceleration).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub noise: f64,
    pub foot: f64,
    pub root: f64,
    pub adv: f64,
    pub vel: f64,
    pub acc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { noise: 1.0, foot: 1.0, root: 1.0, adv: 1.0, vel: 0.01, acc: 0.01 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights { noise: 0.0, foot: 0.0, root: 0.0, adv: 0.0, vel: 0.0, acc: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.noise, self.foot, self.root, self.adv, self.vel, self.acc];
        ensure!(
            all.iter().all(|w| w.is_finite() && *w >= 0.0),
            Error::Config("loss weights must be finite and non-negative".into())
        );
        Ok(())
    }

    /// Zeroes the weights of disabled components.
    pub fn with_ablation(self, a: &Ablation) -> Self {
        LossWeights {
            foot: if a.foot { self.foot } else { 0.0 },
            root: if a.root { self.root } else { 0.0 },
            adv: if a.discriminator { self.adv } else { 0.0 },
            vel: if a.physical { self.vel } else { 0.0 },
            acc: if a.physical { self.acc } else { 0.0 },
            ..self
        }
    }
}

/// Which guidance components are active; `true` means enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub foot: bool,
    pub root: bool,
    pub physical: bool,
    pub discriminator: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation { foot: true, root: true, physical: true, discriminator: true }
    }
}

/// Ablation rows in table order.
pub const ABLATION_ROWS: [&str; 5] = ["foot", "root", "physical", "discriminator", "full"];

impl Ablation {
    /// The configuration for one row: `"full"` keeps everything, any other
    /// row name removes that component.
    pub fn row(name: &str) -> Result<Self> {
        let mut a = Ablation::default();
        match name {
            "full" => {}
            "foot" => a.foot = false,
            "root" => a.root = false,
            "physical" => a.physical = false,
            "discriminator" => a.discriminator = false,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown ablation row '{name}', expected one of {}",
                    ABLATION_ROWS.join(", ")
                )))
            }
        }
        Ok(a)
    }
}

/// Unweighted values of the six generator terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub noise: f64,
    pub foot: f64,
    pub root: f64,
    pub adv: f64,
    pub vel: f64,
    pub acc: f64,
}

impl LossTerms {
    pub fn splat(v: f64) -> Self {
        LossTerms { noise: v, foot: v, root: v, adv: v, vel: v, acc: v }
    }

    fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("noise", self.noise),
            ("foot", self.foot),
            ("root", self.root),
            ("adv", self.adv),
            ("vel", self.vel),
            ("acc", self.acc),
        ]
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.named().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }
}

/// Per-term values, the weighted generator total and the critic objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: LossTerms,
    pub total: f64,
    pub disc: f64,
}

pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> LossReport {
    let total = w.noise * terms.noise
        + w.foot * terms.foot
        + w.root * terms.root
        + w.adv * terms.adv
        + w.vel * terms.vel
        + w.acc * terms.acc;
    LossReport { terms: *terms, total, disc: 0.0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn sum_sq_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += (a.data()[i] - b.data()[i]) * (a.data()[i] - b.data()[i]);
        }
        s / a.len() as f64
    }

    /// Explicit loops over (batch, joint, frame) with per-joint 3-vectors.
    fn diff_oracle(x: &Tensor<f64>, order: usize) -> f64 {
        let (b, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let at = |bi: usize, ch: usize, f: usize| x.data()[(bi * c + ch) * l + f];
        let mut total = 0.0;
        let mut count = 0.0;
        for bi in 0..b {
            for j in 0..c / 3 {
                for f in order..l {
                    let mut n2 = 0.0;
                    for k in 0..3 {
                        let ch = 3 * j + k;
                        let d = if order == 1 {
                            at(bi, ch, f) - at(bi, ch, f - 1)
                        } else {
                            at(bi, ch, f) - 2.0 * at(bi, ch, f - 1) + at(bi, ch, f - 2)
                        };
                        n2 += d * d;
                    }
                    total += n2;
                    count += 1.0;
                }
            }
        }
        total / count
    }

    #[test]
    fn local_losses() {
        let e = rnd(&[2, 6, 5], 1);
        assert_eq!(loss_noise(&e, &e).unwrap(), 0.0);
        let z: Tensor<f64> = Tensor::zeros(&[2, 6, 5]);
        let c = Tensor::full(&[2, 6, 5], 0.7);
        assert!((loss_noise(&z, &c).unwrap() - 0.49).abs() < 1e-15);
        let h = rnd(&[2, 6, 5], 2);
        assert!((loss_noise(&e, &h).unwrap() - sum_sq_oracle(&e, &h)).abs() < 1e-12);
        assert!(loss_noise(&e, &Tensor::zeros(&[2, 6, 4])).is_err());

        let ones: Tensor<f64> = Tensor::full(&[2, 2, 5], 1.0);
        assert_eq!(loss_foot(&ones, &ones).unwrap(), 0.0);
        assert!((loss_foot(&ones, &Tensor::full(&[2, 2, 5], 0.5)).unwrap() - 0.25).abs() < 1e-15);
        let p = rnd(&[2, 2, 5], 3).map(crate::autograd::sigmoid);
        assert!((loss_foot(&ones, &p).unwrap() - sum_sq_oracle(&ones, &p)).abs() < 1e-12);

        let r = rnd(&[2, 4, 5], 4);
        assert_eq!(loss_root(&r, &r).unwrap(), 0.0);
        assert!((loss_root(&Tensor::<f64>::zeros(&[2, 4, 5]), &Tensor::full(&[2, 4, 5], -2.0)).unwrap() - 4.0).abs() < 1e-15);
        let rh = rnd(&[2, 4, 5], 5);
        assert!((loss_root(&r, &rh).unwrap() - sum_sq_oracle(&r, &rh)).abs() < 1e-12);
    }

    #[test]
    fn physical_losses() {
        let (b, c, l) = (2, 6, 7);
        let static_clip = Tensor::new(&[b, c, l], (0..b * c * l).map(|i| ((i / l) as f64).sin()).collect()).unwrap();
        assert_eq!(loss_velocity(&static_clip).unwrap(), 0.0);
        assert_eq!(loss_acceleration(&static_clip).unwrap(), 0.0);
        let delta = 0.3;
        let ramp = Tensor::new(&[b, c, l], (0..b * c * l).map(|i| (i / l) as f64 + delta * (i % l) as f64).collect()).unwrap();
        assert!((loss_velocity(&ramp).unwrap() - 3.0 * delta * delta).abs() < 1e-12);
        assert!(loss_acceleration(&ramp).unwrap() < 1e-20);
        let x = rnd(&[b, c, l], 6);
        assert!((loss_velocity(&x).unwrap() - diff_oracle(&x, 1)).abs() < 1e-12);
        assert!((loss_acceleration(&x).unwrap() - diff_oracle(&x, 2)).abs() < 1e-12);
        assert!(loss_acceleration(&rnd(&[1, 3, 2], 1)).is_err());
    }

    #[test]
    fn adversarial_losses() {
        let one = Tensor::full(&[4, 1], 1.0);
        let zero = Tensor::zeros(&[4, 1]);
        let half: Tensor<f64> = Tensor::full(&[4, 1], 0.5);
        assert_eq!(loss_disc(&one, &zero).unwrap(), 0.0);
        assert!((loss_disc(&half, &half).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(loss_generator_adv(&one), 0.0);
        assert_eq!(loss_generator_adv(&zero), 1.0);
        let (r, f) = (rnd(&[5, 1], 7), rnd(&[5, 1], 8));
        let mut oracle = 0.0;
        let mut gen = 0.0;
        for i in 0..5 {
            oracle += (r.data()[i] - 1.0).powi(2) / 5.0 + f.data()[i].powi(2) / 5.0;
            gen += (f.data()[i] - 1.0).powi(2) / 5.0;
        }
        assert!((loss_disc(&r, &f).unwrap() - oracle).abs() < 1e-12);
        assert!((loss_generator_adv(&f) - gen).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        type Build = fn(&mut Graph<f64>, &[Var]) -> Var;
        let cases: Vec<(&str, Vec<Tensor<f64>>, Build)> = vec![
            ("noise", vec![rnd(&[2, 6, 5], 1), rnd(&[2, 6, 5], 2)], |g, v| noise_loss(g, v[0], v[1])),
            ("foot", vec![rnd(&[2, 2, 5], 3).map(|x| (x > 0.0) as u8 as f64), rnd(&[2, 2, 5], 4)], |g, v| {
                foot_loss(g, v[0], v[1])
            }),
            ("root", vec![rnd(&[2, 4, 5], 5), rnd(&[2, 4, 5], 6)], |g, v| root_loss(g, v[0], v[1])),
            ("vel", vec![rnd(&[2, 6, 5], 7)], |g, v| velocity_loss(g, v[0])),
            ("acc", vec![rnd(&[2, 6, 5], 8)], |g, v| acceleration_loss(g, v[0])),
            ("disc", vec![rnd(&[3, 1], 9), rnd(&[3, 1], 10)], |g, v| disc_loss(g, v[0], v[1])),
            ("gen_adv", vec![rnd(&[3, 1], 11)], |g, v| generator_adv_loss(g, v[0])),
        ];
        for (name, inputs, f) in cases {
            let r = check_gradients(&inputs, f, 1e-6, 1000);
            assert!(r.worst() < 1e-4, "{name}: {}", r.worst());
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let r = total_loss(&LossTerms::splat(1.0), &LossWeights::default());
        assert_eq!(r.total, 4.02);
        assert_eq!(total_loss(&LossTerms::splat(3.0), &LossWeights::zero()).total, 0.0);
        let terms = LossTerms { noise: 0.4, foot: 0.3, root: 0.2, adv: 0.9, vel: 2.0, acc: 5.0 };
        let full = total_loss(&terms, &LossWeights::default()).total;
        let w = LossWeights::default().with_ablation(&Ablation::row("foot").unwrap());
        assert_eq!(w.foot, 0.0);
        assert!((full - total_loss(&terms, &w).total - 0.3).abs() < 1e-12);
        let w = LossWeights::default().with_ablation(&Ablation::row("physical").unwrap());
        assert_eq!((w.vel, w.acc), (0.0, 0.0));
        let w = LossWeights::default().with_ablation(&Ablation::row("discriminator").unwrap());
        assert_eq!(w.adv, 0.0);
        let w = LossWeights::default().with_ablation(&Ablation::row("root").unwrap());
        assert_eq!(w.root, 0.0);
        assert_eq!(LossWeights::default().with_ablation(&Ablation::row("full").unwrap()), LossWeights::default());
        assert!(Ablation::row("nope").is_err());
    }

    proptest! {
        #[test]
        fn nonnegative_and_permutation_invariant(seed in 0u64..500, shift in 1usize..4) {
            let a = rnd(&[4, 6, 5], seed);
            let b = rnd(&[4, 6, 5], seed + 1000);
            let per = 6 * 5;
            let roll = |t: &Tensor<f64>| {
                let mut d = t.data().to_vec();
                d.rotate_left(shift * per);
                Tensor::new(t.shape(), d).unwrap()
            };
            let (ra, rb) = (roll(&a), roll(&b));
            prop_assert!(loss_noise(&a, &b).unwrap() >= 0.0);
            prop_assert!((loss_noise(&a, &b).unwrap() - loss_noise(&ra, &rb).unwrap()).abs() < 1e-12);
            prop_assert!((loss_velocity(&a).unwrap() - loss_velocity(&ra).unwrap()).abs() < 1e-12);
            prop_assert!((loss_acceleration(&a).unwrap() - loss_acceleration(&ra).unwrap()).abs() < 1e-12);
            let s = Tensor::new(&[4, 1], a.data()[..4].to_vec()).unwrap();
            let sf = Tensor::new(&[4, 1], b.data()[..4].to_vec()).unwrap();
            let mut rs = s.data().to_vec();
            rs.rotate_left(shift);
            let rs = Tensor::new(&[4, 1], rs).unwrap();
            let mut rsf = sf.data().to_vec();
            rsf.rotate_left(shift);
            let rsf = Tensor::new(&[4, 1], rsf).unwrap();
            prop_assert!((loss_disc(&s, &sf).unwrap() - loss_disc(&rs, &rsf).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn total_is_linear_in_each_term(v in 0.0f64..10.0, k in 0usize..6) {
            let base = LossTerms { noise: 0.4, foot: 0.3, root: 0.2, adv: 0.9, vel: 2.0, acc: 5.0 };
            let w = LossWeights::default();
            let set = |t: &mut LossTerms, x: f64| match k {
                0 => t.noise = x, 1 => t.foot = x, 2 => t.root = x, 3 => t.adv = x, 4 => t.vel = x, _ => t.acc = x,
            };
            let mut t0 = base; set(&mut t0, 0.0);
            let mut t1 = base; set(&mut t1, 1.0);
            let mut tv = base; set(&mut tv, v);
            let (a, b, c) = (total_loss(&t0, &w).total, total_loss(&t1, &w).total, total_loss(&tv, &w).total);
            prop_assert!((c - (a + v * (b - a))).abs() < 1e-9);
        }
    }
}
