//! Parameter storage and the small set of layers the networks are built from.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered, named collection of learnable tensors.
///
/// Iteration order is the insertion order, which is fixed by the network
/// constructors; optimizer and EMA state are aligned with it by index.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet { entries: Vec::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.entries.push((name.into(), t));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].1
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Places every tensor on the graph as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| g.param(t.clone())).collect()
    }

    /// Places every tensor on the graph as a constant.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| g.constant(t.clone())).collect()
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn check_layout(&self, other: &ParamSet<T>) -> Result<()> {
        ensure!(
            self.len() == other.len(),
            Error::Shape(format!("parameter count {} vs {}", self.len(), other.len()))
        );
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            ensure!(
                na == nb && ta.shape() == tb.shape(),
                Error::Shape(format!("parameter {na} {:?} vs {nb} {:?}", ta.shape(), tb.shape()))
            );
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet { entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect() }
    }

    /// Order-sensitive FNV-1a digest of the raw values.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut buf = Vec::new();
        for (_, t) in &self.entries {
            for &v in t.data() {
                buf.clear();
                v.write_le(&mut buf);
                for &byte in &buf {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

pub(crate) fn uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape")
}

/// Largest of 8, 4, 2, 1 dividing `channels`.
pub fn group_count(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        Self::with_gain(ps, name, cin, cout, kernel, stride, pad, 1.0, rng)
    }

    /// Like [`Conv1d::new`] with the initial weights scaled by `gain`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_gain<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let bound = gain / ((cin * kernel) as f64).sqrt();
        let w = ps.push(format!("{name}.weight"), uniform(&[cout, cin, kernel], bound, rng));
        let b = ps.push(format!("{name}.bias"), uniform(&[cout], bound, rng));
        Conv1d { w, b, stride, pad }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        g.conv1d(x, p[self.w], Some(p[self.b]), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        name: &str,
        fin: usize,
        fout: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fin as f64).sqrt();
        let w = ps.push(format!("{name}.weight"), uniform(&[fout, fin], bound, rng));
        let b = ps.push(format!("{name}.bias"), uniform(&[fout], bound, rng));
        Linear { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        g.linear(x, p[self.w], Some(p[self.b]))
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

impl GroupNorm {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, channels: usize) -> Self {
        let gamma = ps.push(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        let beta = ps.push(format!("{name}.beta"), Tensor::zeros(&[channels]));
        GroupNorm { gamma, beta, groups: group_count(channels) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        g.group_norm(x, p[self.gamma], p[self.beta], self.groups)
    }
}
