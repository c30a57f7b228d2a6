//! Closed-form diffusion arithmetic: the noise schedule, forward noising,
//! clean-sample reconstruction and the ancestral reverse step.
//!
//! Timesteps are 1-based throughout the public API: step `t` uses the
//! per-step variance `sigma[t-1]` and the cumulative retention
//! `alpha_bar[t-1] = prod_{i<=t} (1 - sigma_i)`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A diffusion step index `t` in `1..=T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Timestep(usize);

impl Timestep {
    pub fn new(t: usize) -> Result<Self> {
        ensure!(t >= 1, Error::Timestep { t, max: usize::MAX });
        Ok(Timestep(t))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<T> {
    sigma: Vec<T>,
    alpha_bar: Vec<T>,
    sqrt_alpha_bar: Vec<T>,
    sqrt_one_minus_alpha_bar: Vec<T>,
}

/// Linear per-step variance from `sigma_min` (t = 1) to `sigma_max` (t = T).
pub fn make_schedule<T: Scalar>(steps: usize, sigma_min: f64, sigma_max: f64) -> Result<NoiseSchedule<T>> {
    ensure!(steps >= 1, Error::InvalidArgument("schedule needs at least one step".into()));
    ensure!(
        sigma_min > 0.0 && sigma_min <= sigma_max && sigma_max < 1.0,
        Error::InvalidArgument(format!(
            "schedule bounds must satisfy 0 < sigma_min <= sigma_max < 1, got {sigma_min}, {sigma_max}"
        ))
    );
    let sigma = (0..steps)
        .map(|i| {
            if steps == 1 {
                sigma_min
            } else {
                sigma_min + (sigma_max - sigma_min) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_sigmas(sigma)
}

impl<T: Scalar> NoiseSchedule<T> {
    /// Builds a schedule from explicit per-step variances (index 0 is t = 1).
    pub fn from_sigmas(sigma: Vec<f64>) -> Result<Self> {
        ensure!(!sigma.is_empty(), Error::InvalidArgument("empty schedule".into()));
        ensure!(
            sigma.iter().all(|&s| s > 0.0 && s < 1.0),
            Error::InvalidArgument("every sigma must lie in (0, 1)".into())
        );
        let mut alpha_bar = Vec::with_capacity(sigma.len());
        let mut acc = 1.0f64;
        for &s in &sigma {
            acc *= 1.0 - s;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule {
            sqrt_alpha_bar: alpha_bar.iter().map(|&a| T::lit(a.sqrt())).collect(),
            sqrt_one_minus_alpha_bar: alpha_bar.iter().map(|&a| T::lit((1.0 - a).sqrt())).collect(),
            sigma: sigma.into_iter().map(T::lit).collect(),
            alpha_bar: alpha_bar.into_iter().map(T::lit).collect(),
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.sigma.len()
    }

    pub fn sigmas(&self) -> &[T] {
        &self.sigma
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bar
    }

    fn idx(&self, t: Timestep) -> Result<usize> {
        ensure!(
            t.0 >= 1 && t.0 <= self.steps(),
            Error::Timestep { t: t.0, max: self.steps() }
        );
        Ok(t.0 - 1)
    }

    pub fn sigma(&self, t: Timestep) -> Result<T> {
        Ok(self.sigma[self.idx(t)?])
    }

    pub fn alpha_bar(&self, t: Timestep) -> Result<T> {
        Ok(self.alpha_bar[self.idx(t)?])
    }

    pub fn sqrt_alpha_bar(&self, t: Timestep) -> Result<T> {
        Ok(self.sqrt_alpha_bar[self.idx(t)?])
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: Timestep) -> Result<T> {
        Ok(self.sqrt_one_minus_alpha_bar[self.idx(t)?])
    }

    /// Coefficients `(a, b)` such that `x0_hat = a * x_t + b * eps_hat`.
    pub fn reconstruct_coefs(&self, t: Timestep) -> Result<(T, T)> {
        let i = self.idx(t)?;
        let s = self.sqrt_alpha_bar[i];
        Ok((T::one() / s, -self.sqrt_one_minus_alpha_bar[i] / s))
    }

    /// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
    pub fn q_sample(&self, x0: &Tensor<T>, t: Timestep, eps: &Tensor<T>) -> Result<Tensor<T>> {
        check_shapes(x0, eps, "q_sample")?;
        let i = self.idx(t)?;
        let (a, b) = (self.sqrt_alpha_bar[i], self.sqrt_one_minus_alpha_bar[i]);
        let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + b * e).collect();
        Tensor::new(x0.shape(), data)
    }

    /// `x0_hat = (x_t - sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_bar_t)`.
    pub fn reconstruct_x0(&self, x_t: &Tensor<T>, t: Timestep, eps_hat: &Tensor<T>) -> Result<Tensor<T>> {
        check_shapes(x_t, eps_hat, "reconstruct_x0")?;
        let i = self.idx(t)?;
        let (a, b) = (self.sqrt_alpha_bar[i], self.sqrt_one_minus_alpha_bar[i]);
        let data = x_t.data().iter().zip(eps_hat.data()).map(|(&x, &e)| (x - b * e) / a).collect();
        Tensor::new(x_t.shape(), data)
    }

    /// Additive noise scale of the reverse step at `t`: `sqrt(sigma_t)`.
    pub fn reverse_noise_scale(&self, t: Timestep) -> Result<T> {
        Ok(self.sigma[self.idx(t)?].sqrt())
    }

    /// One ancestral step:
    /// `x_{t-1} = (x_t - sigma_t / sqrt(1 - alpha_bar_t) eps_hat) / sqrt(1 - sigma_t) + sqrt(sigma_t) z`.
    ///
    /// `z` must be all zeros at `t = 1`.
    pub fn reverse_step(
        &self,
        x_t: &Tensor<T>,
        t: Timestep,
        eps_hat: &Tensor<T>,
        z: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        check_shapes(x_t, eps_hat, "reverse_step")?;
        check_shapes(x_t, z, "reverse_step")?;
        let i = self.idx(t)?;
        ensure!(
            i > 0 || z.data().iter().all(|v| v.is_zero()),
            Error::InvalidArgument("reverse step at t = 1 must not add noise".into())
        );
        let sig = self.sigma[i];
        let inv = T::one() / (T::one() - sig).sqrt();
        let k = sig / self.sqrt_one_minus_alpha_bar[i];
        let ns = sig.sqrt();
        let data = x_t
            .data()
            .iter()
            .zip(eps_hat.data())
            .zip(z.data())
            .map(|((&x, &e), &zz)| inv * (x - k * e) + ns * zz)
            .collect();
        Tensor::new(x_t.shape(), data)
    }
}

fn check_shapes<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    ensure!(
        a.same_shape(b),
        Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()))
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: usize) -> Timestep {
        Timestep::new(v).unwrap()
    }

    fn s(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn endpoints_of_standard_schedule() {
        let sch = make_schedule::<f64>(1000, 1e-4, 0.02).unwrap();
        assert_eq!(sch.steps(), 1000);
        assert!((sch.sigma(t(1)).unwrap() - 1e-4).abs() < 1e-15);
        assert!((sch.sigma(t(1000)).unwrap() - 0.02).abs() < 1e-15);
    }

    #[test]
    fn single_and_constant_products() {
        let one = make_schedule::<f64>(1, 0.5, 0.5).unwrap();
        assert!((one.alpha_bar(t(1)).unwrap() - 0.5).abs() < 1e-15);
        let three = NoiseSchedule::<f64>::from_sigmas(vec![0.1; 3]).unwrap();
        assert!((three.alpha_bar(t(3)).unwrap() - 0.729).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(make_schedule::<f64>(0, 1e-4, 0.02).is_err());
        assert!(make_schedule::<f64>(10, 0.0, 0.02).is_err());
        assert!(make_schedule::<f64>(10, 0.1, 1.0).is_err());
        assert!(make_schedule::<f64>(10, 0.2, 0.1).is_err());
        let sch = make_schedule::<f64>(10, 1e-4, 0.02).unwrap();
        assert!(matches!(sch.q_sample(&s(1.0), t(11), &s(0.0)), Err(Error::Timestep { .. })));
        assert!(Timestep::new(0).is_err());
        let two = Tensor::<f64>::zeros(&[2]);
        assert!(matches!(sch.q_sample(&s(1.0), t(1), &two), Err(Error::Shape(_))));
    }

    /// Schedule whose step `t = 2` has alpha_bar = 0.64.
    fn sched_064() -> NoiseSchedule<f64> {
        // (1 - 0.2) * (1 - 0.2) = 0.64
        NoiseSchedule::from_sigmas(vec![0.2, 0.2]).unwrap()
    }

    #[test]
    fn q_sample_hand_values() {
        let sch = sched_064();
        let xt = sch.q_sample(&s(1.0), t(2), &s(0.5)).unwrap();
        assert!((xt.data()[0] - 1.1).abs() < 1e-12);
        let zero_noise = sch.q_sample(&s(3.0), t(2), &s(0.0)).unwrap();
        assert!((zero_noise.data()[0] - 0.8 * 3.0).abs() < 1e-12);
        let zero_signal = sch.q_sample(&s(0.0), t(2), &s(2.0)).unwrap();
        assert!((zero_signal.data()[0] - 0.6 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn reconstruct_hand_values() {
        let sch = sched_064();
        let x0 = sch.reconstruct_x0(&s(1.1), t(2), &s(0.5)).unwrap();
        assert!((x0.data()[0] - 1.0).abs() < 1e-12);
        let no_eps = sch.reconstruct_x0(&s(1.1), t(2), &s(0.0)).unwrap();
        assert!((no_eps.data()[0] - 1.1 / 0.8).abs() < 1e-12);
    }

    #[test]
    fn reverse_step_hand_values() {
        // sigma_2 = 0.19 and alpha_bar_2 = 0.36 need sigma_1 with
        // (1 - sigma_1) * 0.81 = 0.36.
        let sigma1 = 1.0 - 0.36 / 0.81;
        let sch = NoiseSchedule::<f64>::from_sigmas(vec![sigma1, 0.19]).unwrap();
        assert!((sch.alpha_bar(t(2)).unwrap() - 0.36).abs() < 1e-12);
        let prev = sch.reverse_step(&s(1.0), t(2), &s(0.8), &s(0.0)).unwrap();
        assert!((prev.data()[0] - 0.9).abs() < 1e-12);
        let plain = sch.reverse_step(&s(1.0), t(2), &s(0.0), &s(0.0)).unwrap();
        assert!((plain.data()[0] - 1.0 / 0.9).abs() < 1e-12);
    }

    #[test]
    fn final_step_is_noise_free() {
        let sch = make_schedule::<f64>(1, 0.3, 0.3).unwrap();
        let x1 = s(0.7);
        assert!(sch.reverse_step(&x1, t(1), &s(0.1), &s(0.0)).is_ok());
        assert!(sch.reverse_step(&x1, t(1), &s(0.1), &s(1.0)).is_err());
    }

    #[test]
    fn sqrt_pairs_are_complementary() {
        let sch = make_schedule::<f32>(1000, 1e-4, 0.02).unwrap();
        for i in 1..=1000 {
            let a = sch.sqrt_alpha_bar(t(i)).unwrap();
            let b = sch.sqrt_one_minus_alpha_bar(t(i)).unwrap();
            assert!((a * a + b * b - 1.0).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn reconstruct_inverts_q_sample(
            vals in proptest::collection::vec((-5.0f64..5.0, -3.0f64..3.0), 1..16),
            step in 1usize..=200,
        ) {
            let sch = make_schedule::<f64>(200, 1e-4, 0.02).unwrap();
            let x0 = Tensor::new(&[vals.len()], vals.iter().map(|v| v.0).collect()).unwrap();
            let eps = Tensor::new(&[vals.len()], vals.iter().map(|v| v.1).collect()).unwrap();
            let xt = sch.q_sample(&x0, t(step), &eps).unwrap();
            let back = sch.reconstruct_x0(&xt, t(step), &eps).unwrap();
            prop_assert!(back.max_abs_diff(&x0) < 1e-5);
        }

        #[test]
        fn reverse_step_is_linear_in_each_argument(
            a in -4.0f64..4.0, u in -2.0f64..2.0, step in 2usize..=50,
        ) {
            let sch = make_schedule::<f64>(50, 1e-4, 0.05).unwrap();
            let f = |x: f64, e: f64, z: f64| {
                sch.reverse_step(&s(x), t(step), &s(e), &s(z)).unwrap().data()[0]
            };
            prop_assert!((f(a * u, 0.0, 0.0) - a * f(u, 0.0, 0.0)).abs() < 1e-9);
            prop_assert!((f(0.0, a * u, 0.0) - a * f(0.0, u, 0.0)).abs() < 1e-9);
            prop_assert!((f(0.0, 0.0, a * u) - a * f(0.0, 0.0, u)).abs() < 1e-9);
        }
    }
}
