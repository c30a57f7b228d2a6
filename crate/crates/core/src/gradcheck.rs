//! Central finite-difference checks of reverse-mode gradients.

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of [`check_gradients`].
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Relative error `|fd - analytic| / max(|fd|, |analytic|)` per input,
    /// measured in the Euclidean norm over the checked coordinates.
    pub errors: Vec<f64>,
    pub checked: usize,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn worst_input(&self) -> usize {
        self.errors
            .iter()
            .enumerate()
            .fold((0, 0.0), |acc, (i, &e)| if e > acc.1 { (i, e) } else { acc })
            .0
    }
}

/// Compares the gradient of the scalar built by `f` against central
/// differences with step `h`.
///
/// At most `max_coords` coordinates of each input are perturbed, spread
/// evenly over the tensor. Inputs whose gradient is (numerically) zero on
/// both sides report zero error.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, h: f64, max_coords: usize) -> GradCheck
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars);
    assert_eq!(g.value(root).len(), 1, "objective must be a scalar");
    let grads = g.backward(root);

    let eval = |shifted: &[Tensor<f64>]| {
        let mut g = Graph::inference();
        let vs: Vec<Var> = shifted.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vs);
        g.value(out).data()[0]
    };

    let mut errors = Vec::with_capacity(inputs.len());
    let mut checked = 0;
    let mut work = inputs.to_vec();
    for (i, inp) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], inp.len());
        let n = inp.len();
        let step = n.div_ceil(max_coords.max(1)).max(1);
        let (mut diff, mut fd_sq, mut an_sq) = (0.0, 0.0, 0.0);
        for j in (0..n).step_by(step) {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            diff += (fd - analytic[j]).powi(2);
            fd_sq += fd * fd;
            an_sq += analytic[j] * analytic[j];
            checked += 1;
        }
        let scale = fd_sq.sqrt().max(an_sq.sqrt());
        errors.push(if scale < 1e-10 { 0.0 } else { diff.sqrt() / scale });
    }
    GradCheck { errors, checked }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_correct_and_wrong_gradients() {
        let x = Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap();
        let ok = check_gradients(std::slice::from_ref(&x), |g, v| {
            let s = g.square(v[0]);
            g.mean(s)
        }, 1e-6, 8);
        assert!(ok.worst() < 1e-8);
        assert_eq!(ok.checked, 3);
        // a non-differentiable-through-graph path: the objective ignores its input
        let zero = check_gradients(std::slice::from_ref(&x), |g, _| g.constant(Tensor::scalar(1.0)), 1e-6, 8);
        assert_eq!(zero.worst(), 0.0);
    }
}
