//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its variables. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node that depends on a
//! parameter. Graphs are built fresh for each forward pass and dropped after
//! the gradients have been read.
//!
//! Layout conventions: sequence activations are `(batch, channels, frames)`,
//! dense activations are `(rows, features)`.

use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    ScaleRows(Var, Vec<T>),
    AddChannelBias(Var, Var),
    ModulateChannels(Var, Var),
    Silu(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Square(Var),
    Mean(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Vec<T>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        dims: [usize; 4],
    },
    Softmax(Var),
    Concat(Vec<Var>),
    Upsample2(Var),
    MeanTime(Var),
    Reshape(Var),
    TimeDiff(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    record: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` if it never received one.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![T::zero(); len])
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records everything needed for [`Graph::backward`].
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), record: true }
    }

    /// A forward-only graph: parameters are treated as constants and no
    /// backward buffers are kept.
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), record: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let needs_grad = needs_grad && self.record;
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn unary(&mut self, a: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    fn assert_same(&self, a: Var, b: Var) {
        assert_eq!(self.shape(a), self.shape(b), "operand shapes differ");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same(a, b);
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a), data).expect("shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same(a, b);
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(self.shape(a), data).expect("shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same(a, b);
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a), data).expect("shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.unary(a, value, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.unary(a, value, Op::AddScalar(a))
    }

    /// Multiplies the `i`-th slice along the leading axis by `coefs[i]`.
    pub fn scale_rows(&mut self, a: Var, coefs: Vec<T>) -> Var {
        let rows = coefs.len();
        let n = self.value(a).len();
        assert!(rows > 0 && n % rows == 0, "row coefficient count");
        let rl = n / rows;
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * coefs[i / rl])
            .collect();
        let value = Tensor::new(self.shape(a), data).expect("shape");
        self.unary(a, value, Op::ScaleRows(a, coefs))
    }

    /// `x (B,C,L) + bias (B,C)` broadcast over frames.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3);
        assert_eq!(self.shape(bias), &[s[0], s[1]][..], "channel bias shape");
        let l = s[2];
        let bd = self.data(bias);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i / l])
            .collect();
        let value = Tensor::new(&s, data).expect("shape");
        let ng = self.ng(x) || self.ng(bias);
        self.push(value, Op::AddChannelBias(x, bias), ng)
    }

    /// `x (B,C,L) * (1 + scale (B,C))` broadcast over frames.
    pub fn modulate_channels(&mut self, x: Var, scale: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3);
        assert_eq!(self.shape(scale), &[s[0], s[1]][..], "channel scale shape");
        let l = s[2];
        let sd = self.data(scale);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * (T::one() + sd[i / l]))
            .collect();
        let value = Tensor::new(&s, data).expect("shape");
        let ng = self.ng(x) || self.ng(scale);
        self.push(value, Op::ModulateChannels(x, scale), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        self.unary(a, value, Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.unary(a, value, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        self.unary(a, value, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        self.unary(a, value, Op::LeakyRelu(a, slope))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.unary(a, value, Op::Square(a))
    }

    /// Mean over every element, as a one-element tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        self.unary(a, value, Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape).expect("reshape size");
        self.unary(a, value, Op::Reshape(a))
    }

    /// 1-D convolution: `x (B,Cin,L)`, `w (Cout,Cin,K)`, optional `b (Cout)`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv input rank");
        assert_eq!(ws.len(), 3, "conv weight rank");
        let (bsz, cin, l) = (xs[0], xs[1], xs[2]);
        let (cout, wcin, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(cin, wcin, "conv channel mismatch");
        assert!(l + 2 * pad >= k && stride > 0);
        let lout = (l + 2 * pad - k) / stride + 1;
        let ck = cin * k;
        let ncols = bsz * lout;
        let xd = self.data(x);
        let mut cols = vec![T::zero(); ck * ncols];
        for bi in 0..bsz {
            for ci in 0..cin {
                let xrow = &xd[(bi * cin + ci) * l..(bi * cin + ci + 1) * l];
                for kk in 0..k {
                    let crow = &mut cols[(ci * k + kk) * ncols + bi * lout..(ci * k + kk) * ncols + (bi + 1) * lout];
                    for (lo, c) in crow.iter_mut().enumerate() {
                        let pos = (lo * stride + kk) as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < l {
                            *c = xrow[pos as usize];
                        }
                    }
                }
            }
        }
        let mut ymat = vec![T::zero(); cout * ncols];
        gemm(
            T::one(),
            MatRef::new(self.data(w), cout, ck),
            MatRef::new(&cols, ck, ncols),
            T::zero(),
            &mut ymat,
        );
        let mut out = vec![T::zero(); bsz * cout * lout];
        let bias = b.map(|bv| self.data(bv));
        for co in 0..cout {
            let bv = bias.map(|bd| bd[co]).unwrap_or_else(T::zero);
            for bi in 0..bsz {
                let src = &ymat[co * ncols + bi * lout..co * ncols + (bi + 1) * lout];
                let dst = &mut out[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }
        let value = Tensor::new(&[bsz, cout, lout], out).expect("shape");
        let ng = self.ng(x) || self.ng(w) || b.map(|bv| self.ng(bv)).unwrap_or(false);
        let cols = if ng && self.record { cols } else { Vec::new() };
        self.push(value, Op::Conv1d { x, w, b, stride, pad, cols }, ng)
    }

    /// Dense layer: `x (N,in)`, `w (out,in)`, optional `b (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 2, "linear input rank");
        assert_eq!(xs[1], ws[1], "linear feature mismatch");
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * fout];
        if let Some(bv) = b {
            let bd = self.data(bv);
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bd);
            }
        }
        gemm(
            T::one(),
            MatRef::new(self.data(x), n, fin),
            MatRef::t(self.data(w), fout, fin),
            T::one(),
            &mut out,
        );
        let value = Tensor::new(&[n, fout], out).expect("shape");
        let ng = self.ng(x) || self.ng(w) || b.map(|bv| self.ng(bv)).unwrap_or(false);
        self.push(value, Op::Linear { x, w, b }, ng)
    }

    /// Group normalisation over `(channels-in-group, frames)` for `x (B,C,L)`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3);
        let (bsz, c, l) = (s[0], s[1], s[2]);
        assert!(groups > 0 && c % groups == 0, "groups must divide channels");
        let cpg = c / groups;
        let gs = cpg * l;
        let eps = T::lit(1e-5);
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); bsz * groups];
        let mut out = vec![T::zero(); xd.len()];
        let n = T::of_usize(gs);
        for bi in 0..bsz {
            for g in 0..groups {
                let off = (bi * c + g * cpg) * l;
                let seg = &xd[off..off + gs];
                let mean = seg.iter().copied().sum::<T>() / n;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let is = T::one() / (var + eps).sqrt();
                inv_std[bi * groups + g] = is;
                for (j, &v) in seg.iter().enumerate() {
                    let ch = g * cpg + j / l;
                    let xh = (v - mean) * is;
                    xhat[off + j] = xh;
                    out[off + j] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let value = Tensor::new(&s, out).expect("shape");
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let (xhat, inv_std) = if ng && self.record { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        self.push(value, Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std }, ng)
    }

    /// Batched product `op(a) · op(b)` where `op` optionally transposes the
    /// trailing two axes. `a` is `(B,M,K)` (or `(B,K,M)` when `ta`), `b` is
    /// `(B,K,N)` (or `(B,N,K)` when `tb`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        assert_eq!(as_.len(), 3);
        assert_eq!(bs.len(), 3);
        assert_eq!(as_[0], bs[0], "batch mismatch");
        let bsz = as_[0];
        let (m, k) = if ta { (as_[2], as_[1]) } else { (as_[1], as_[2]) };
        let (kb, n) = if tb { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        assert_eq!(k, kb, "inner dimension mismatch");
        let ad = self.data(a);
        let bd = self.data(b);
        let mut out = vec![T::zero(); bsz * m * n];
        for bi in 0..bsz {
            let asl = &ad[bi * m * k..(bi + 1) * m * k];
            let bsl = &bd[bi * k * n..(bi + 1) * k * n];
            let am = if ta { MatRef::t(asl, k, m) } else { MatRef::new(asl, m, k) };
            let bm = if tb { MatRef::t(bsl, n, k) } else { MatRef::new(bsl, k, n) };
            gemm(T::one(), am, bm, T::zero(), &mut out[bi * m * n..(bi + 1) * m * n]);
        }
        let value = Tensor::new(&[bsz, m, n], out).expect("shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::BatchMatMul { a, b, ta, tb, dims: [bsz, m, k, n] }, ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let last = *s.last().expect("rank >= 1");
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(last) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let value = Tensor::new(&s, out).expect("shape");
        self.unary(a, value, Op::Softmax(a))
    }

    /// Concatenation of `(B,Ci,L)` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let s0 = self.shape(parts[0]).to_vec();
        assert_eq!(s0.len(), 3);
        let (bsz, l) = (s0[0], s0[2]);
        let mut ctot = 0;
        for &p in parts {
            let s = self.shape(p);
            assert!(s.len() == 3 && s[0] == bsz && s[2] == l, "concat shape mismatch");
            ctot += s[1];
        }
        let mut out = Vec::with_capacity(bsz * ctot * l);
        for bi in 0..bsz {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.data(p)[bi * c * l..(bi + 1) * c * l]);
            }
        }
        let value = Tensor::new(&[bsz, ctot, l], out).expect("shape");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::Concat(parts.to_vec()), ng)
    }

    /// Nearest-neighbour doubling along frames.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 3);
        let out: Vec<T> = self.data(a).iter().flat_map(|&v| [v, v]).collect();
        let value = Tensor::new(&[s[0], s[1], s[2] * 2], out).expect("shape");
        self.unary(a, value, Op::Upsample2(a))
    }

    /// Mean over frames: `(B,C,L) -> (B,C)`.
    pub fn mean_time(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 3);
        let l = T::of_usize(s[2]);
        let out = self.data(a).chunks(s[2]).map(|r| r.iter().copied().sum::<T>() / l).collect();
        let value = Tensor::new(&[s[0], s[1]], out).expect("shape");
        self.unary(a, value, Op::MeanTime(a))
    }

    /// Forward difference along the last axis: `y[..,i] = x[..,i+1] - x[..,i]`.
    pub fn time_diff(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let l = *s.last().expect("rank >= 1");
        assert!(l >= 2, "need at least two frames");
        let out = self
            .data(a)
            .chunks(l)
            .flat_map(|r| r.windows(2).map(|w| w[1] - w[0]).collect::<Vec<_>>())
            .collect();
        let mut ns = s.clone();
        *ns.last_mut().unwrap() = l - 1;
        let value = Tensor::new(&ns, out).expect("shape");
        self.unary(a, value, Op::TimeDiff(a))
    }

    /// Mean softmax cross-entropy of `logits (N,C)` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let s = self.shape(logits).to_vec();
        assert_eq!(s.len(), 2);
        let (n, c) = (s[0], s[1]);
        assert_eq!(targets.len(), n);
        let mut probs = self.data(logits).to_vec();
        let mut loss = T::zero();
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            assert!(t < c, "target class out of range");
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
            loss -= row[t].max(T::min_positive_value()).ln();
        }
        let value = Tensor::scalar(loss / T::of_usize(n));
        let ng = self.ng(logits);
        let probs = if ng { probs } else { Vec::new() };
        self.push(value, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, ng)
    }

    /// Reverse pass from a one-element node.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.ng(root) {
            return Grads { grads };
        }
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Grads { grads }
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.ng(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(bd) {
                        *d += s * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((d, &s), &x) in gb.iter_mut().zip(g).zip(ad) {
                        *d += s * x;
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d += s * *k;
                    }
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::ScaleRows(a, coefs) => {
                let rl = g.len() / coefs.len();
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, (d, &s)) in ga.iter_mut().zip(g).enumerate() {
                        *d += s * coefs[i / rl];
                    }
                }
            }
            Op::AddChannelBias(x, bias) => {
                let l = self.shape(*x)[2];
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for (d, row) in gb.iter_mut().zip(g.chunks(l)) {
                        *d += row.iter().copied().sum::<T>();
                    }
                }
            }
            Op::ModulateChannels(x, scale) => {
                let l = self.shape(*x)[2];
                let (xd, sd) = (self.data(*x), self.data(*scale));
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, (d, &s)) in gx.iter_mut().zip(g).enumerate() {
                        *d += s * (T::one() + sd[i / l]);
                    }
                }
                if let Some(gs) = self.acc(grads, *scale) {
                    for (k, d) in gs.iter_mut().enumerate() {
                        let r = k * l..(k + 1) * l;
                        *d += g[r.clone()].iter().zip(&xd[r]).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
            }
            Op::Silu(a) => {
                let ad = self.data(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, &s), &x) in ga.iter_mut().zip(g).zip(ad) {
                        let sg = sigmoid(x);
                        *d += s * sg * (T::one() + x * (T::one() - sg));
                    }
                }
            }
            Op::Sigmoid(a) => {
                let yd = node.value.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(yd) {
                        *d += s * y * (T::one() - y);
                    }
                }
            }
            Op::Relu(a) => {
                let ad = self.data(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, &s), &x) in ga.iter_mut().zip(g).zip(ad) {
                        if x > T::zero() {
                            *d += s;
                        }
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let ad = self.data(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, &s), &x) in ga.iter_mut().zip(g).zip(ad) {
                        *d += if x > T::zero() { s } else { s * *slope };
                    }
                }
            }
            Op::Square(a) => {
                let ad = self.data(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, &s), &x) in ga.iter_mut().zip(g).zip(ad) {
                        *d += s * (x + x);
                    }
                }
            }
            Op::Mean(a) => {
                let n = T::of_usize(self.value(*a).len());
                if let Some(ga) = self.acc(grads, *a) {
                    let v = g[0] / n;
                    for d in ga.iter_mut() {
                        *d += v;
                    }
                }
            }
            Op::Conv1d { x, w, b, stride, pad, cols } => {
                self.conv1d_backward(*x, *w, *b, *stride, *pad, cols, &node.value, g, grads)
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, fin) = (xs[0], xs[1]);
                let fout = self.shape(*w)[0];
                if let Some(gx) = self.acc(grads, *x) {
                    gemm(T::one(), MatRef::new(g, n, fout), MatRef::new(self.data(*w), fout, fin), T::one(), gx);
                }
                if let Some(gw) = self.acc(grads, *w) {
                    gemm(T::one(), MatRef::t(g, n, fout), MatRef::new(self.data(*x), n, fin), T::one(), gw);
                }
                if let Some(bv) = b {
                    if let Some(gb) = self.acc(grads, *bv) {
                        for row in g.chunks(fout) {
                            add_into(gb, row);
                        }
                    }
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std } => {
                let s = self.shape(*x);
                let (bsz, c, l) = (s[0], s[1], s[2]);
                let cpg = c / groups;
                let gs = cpg * l;
                let gd = self.data(*gamma);
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (i, (&gi, &xh)) in g.iter().zip(xhat).enumerate() {
                        gg[(i / l) % c] += gi * xh;
                    }
                }
                if let Some(gbeta) = self.acc(grads, *beta) {
                    for (i, &gi) in g.iter().enumerate() {
                        gbeta[(i / l) % c] += gi;
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let n = T::of_usize(gs);
                    for bi in 0..bsz {
                        for gr in 0..*groups {
                            let off = (bi * c + gr * cpg) * l;
                            let is = inv_std[bi * groups + gr];
                            let mut sum_d = T::zero();
                            let mut sum_dx = T::zero();
                            for j in 0..gs {
                                let ch = gr * cpg + j / l;
                                let dxh = g[off + j] * gd[ch];
                                sum_d += dxh;
                                sum_dx += dxh * xhat[off + j];
                            }
                            for j in 0..gs {
                                let ch = gr * cpg + j / l;
                                let dxh = g[off + j] * gd[ch];
                                gx[off + j] += is / n * (n * dxh - sum_d - xhat[off + j] * sum_dx);
                            }
                        }
                    }
                }
            }
            Op::BatchMatMul { a, b, ta, tb, dims } => {
                let [bsz, m, k, n] = *dims;
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for bi in 0..bsz {
                        let gsl = &g[bi * m * n..(bi + 1) * m * n];
                        let bsl = &bd[bi * k * n..(bi + 1) * k * n];
                        let dst = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if *ta {
                            // dA_phys (K×M) = op(B) · dCᵀ
                            let opb = if *tb { MatRef::t(bsl, n, k) } else { MatRef::new(bsl, k, n) };
                            gemm(T::one(), opb, MatRef::t(gsl, m, n), T::one(), dst);
                        } else {
                            // dA (M×K) = dC · op(B)ᵀ
                            let opbt = if *tb { MatRef::new(bsl, n, k) } else { MatRef::t(bsl, k, n) };
                            gemm(T::one(), MatRef::new(gsl, m, n), opbt, T::one(), dst);
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for bi in 0..bsz {
                        let gsl = &g[bi * m * n..(bi + 1) * m * n];
                        let asl = &ad[bi * m * k..(bi + 1) * m * k];
                        let dst = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *tb {
                            // dB_phys (N×K) = dCᵀ · op(A)
                            let opa = if *ta { MatRef::t(asl, k, m) } else { MatRef::new(asl, m, k) };
                            gemm(T::one(), MatRef::t(gsl, m, n), opa, T::one(), dst);
                        } else {
                            // dB (K×N) = op(A)ᵀ · dC
                            let opat = if *ta { MatRef::new(asl, k, m) } else { MatRef::t(asl, m, k) };
                            gemm(T::one(), opat, MatRef::new(gsl, m, n), T::one(), dst);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let last = *self.shape(*a).last().unwrap();
                let yd = node.value.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((dr, gr), yr) in ga.chunks_mut(last).zip(g.chunks(last)).zip(yd.chunks(last)) {
                        let dot: T = gr.iter().zip(yr).map(|(&gi, &yi)| gi * yi).sum();
                        for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let s = node.value.shape();
                let (bsz, ctot, l) = (s[0], s[1], s[2]);
                let mut c0 = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if let Some(gp) = self.acc(grads, p) {
                        for bi in 0..bsz {
                            let src = &g[(bi * ctot + c0) * l..(bi * ctot + c0 + c) * l];
                            add_into(&mut gp[bi * c * l..(bi + 1) * c * l], src);
                        }
                    }
                    c0 += c;
                }
            }
            Op::Upsample2(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (d, pair) in ga.iter_mut().zip(g.chunks(2)) {
                        *d += pair[0] + pair[1];
                    }
                }
            }
            Op::MeanTime(a) => {
                let l = self.shape(*a)[2];
                let lt = T::of_usize(l);
                if let Some(ga) = self.acc(grads, *a) {
                    for (row, &gi) in ga.chunks_mut(l).zip(g) {
                        for d in row.iter_mut() {
                            *d += gi / lt;
                        }
                    }
                }
            }
            Op::TimeDiff(a) => {
                let l = *self.shape(*a).last().unwrap();
                if let Some(ga) = self.acc(grads, *a) {
                    for (row, gr) in ga.chunks_mut(l).zip(g.chunks(l - 1)) {
                        for (i, &gi) in gr.iter().enumerate() {
                            row[i + 1] += gi;
                            row[i] -= gi;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.shape(*logits)[1];
                let n = T::of_usize(targets.len());
                if let Some(gl) = self.acc(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gl[r * c + j] += g[0] * (probs[r * c + j] - onehot) / n;
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv1d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: &[T],
        out: &Tensor<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let xs = self.shape(x);
        let (bsz, cin, l) = (xs[0], xs[1], xs[2]);
        let ws = self.shape(w);
        let (cout, k) = (ws[0], ws[2]);
        let lout = out.shape()[2];
        let ck = cin * k;
        let ncols = bsz * lout;
        // dY rearranged to (Cout, B·Lout)
        let mut gmat = vec![T::zero(); cout * ncols];
        for bi in 0..bsz {
            for co in 0..cout {
                gmat[co * ncols + bi * lout..co * ncols + (bi + 1) * lout]
                    .copy_from_slice(&g[(bi * cout + co) * lout..(bi * cout + co + 1) * lout]);
            }
        }
        if let Some(bv) = b {
            if let Some(gb) = self.acc(grads, bv) {
                for (co, d) in gb.iter_mut().enumerate() {
                    *d += gmat[co * ncols..(co + 1) * ncols].iter().copied().sum::<T>();
                }
            }
        }
        if let Some(gw) = self.acc(grads, w) {
            gemm(T::one(), MatRef::new(&gmat, cout, ncols), MatRef::t(cols, ck, ncols), T::one(), gw);
        }
        if self.ng(x) {
            let mut dcols = vec![T::zero(); ck * ncols];
            gemm(
                T::one(),
                MatRef::t(self.data(w), cout, ck),
                MatRef::new(&gmat, cout, ncols),
                T::zero(),
                &mut dcols,
            );
            let gx = self.acc(grads, x).expect("needs grad");
            for bi in 0..bsz {
                for ci in 0..cin {
                    let xrow = &mut gx[(bi * cin + ci) * l..(bi * cin + ci + 1) * l];
                    for kk in 0..k {
                        let crow = &dcols[(ci * k + kk) * ncols + bi * lout..(ci * k + kk) * ncols + (bi + 1) * lout];
                        for (lo, &c) in crow.iter().enumerate() {
                            let pos = (lo * stride + kk) as isize - pad as isize;
                            if pos >= 0 && (pos as usize) < l {
                                xrow[pos as usize] += c;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(sum(w ⊙ f(inputs)))/d(inputs).
    fn check<F>(inputs: Vec<Tensor<f64>>, f: F)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe = {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vars);
            Tensor::<f64>::randn(g.shape(out), &mut rng)
        };
        let objective = |g: &mut Graph<f64>, vars: &[Var]| {
            let out = f(g, vars);
            let w = g.constant(probe.clone());
            let prod = g.mul(out, w);
            let m = g.mean(prod);
            g.scale(m, probe.len() as f64)
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = objective(&mut g, &vars);
        let grads = g.backward(loss);
        let h = 1e-6;
        for (idx, inp) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[idx], inp.len());
            for j in 0..inp.len() {
                let eval = |delta: f64| {
                    let mut shifted = inputs.clone();
                    shifted[idx].data_mut()[j] += delta;
                    let mut g = Graph::new();
                    let vs: Vec<Var> = shifted.into_iter().map(|t| g.constant(t)).collect();
                    let l = objective(&mut g, &vs);
                    g.value(l).data()[0]
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let err = (fd - analytic[j]).abs() / fd.abs().max(analytic[j].abs()).max(1e-4);
                assert!(err < 1e-5, "input {idx} elem {j}: fd {fd} analytic {}", analytic[j]);
            }
        }
    }

    fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn conv1d_gradients() {
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (2, 1, 4), (1, 0, 1)] {
            check(vec![rnd(&[2, 3, 8], 1), rnd(&[4, 3, k], 2), rnd(&[4], 3)], |g, v| {
                g.conv1d(v[0], v[1], Some(v[2]), stride, pad)
            });
        }
    }

    #[test]
    fn linear_and_activations() {
        check(vec![rnd(&[3, 5], 4), rnd(&[2, 5], 5), rnd(&[2], 6)], |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]));
            let a = g.silu(y);
            let b = g.sigmoid(a);
            let c = g.leaky_relu(b, 0.2);
            g.square(c)
        });
    }

    #[test]
    fn group_norm_gradients() {
        check(vec![rnd(&[2, 4, 5], 7), rnd(&[4], 8), rnd(&[4], 9)], |g, v| {
            g.group_norm(v[0], v[1], v[2], 2)
        });
    }

    #[test]
    fn batch_matmul_all_transposes() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta { rnd(&[2, 4, 3], 10) } else { rnd(&[2, 3, 4], 10) };
            let b = if tb { rnd(&[2, 5, 4], 11) } else { rnd(&[2, 4, 5], 11) };
            check(vec![a, b], |g, v| g.batch_matmul(v[0], v[1], ta, tb));
        }
    }

    #[test]
    fn shape_ops_gradients() {
        check(vec![rnd(&[2, 3, 4], 12), rnd(&[2, 2, 4], 13), rnd(&[2, 5], 14), rnd(&[2, 5], 15)], |g, v| {
            let c = g.concat_channels(&[v[0], v[1]]);
            let c = g.add_channel_bias(c, v[2]);
            let c = g.modulate_channels(c, v[3]);
            let u = g.upsample2(c);
            let s = g.softmax(u);
            let d = g.time_diff(s);
            let m = g.mean_time(d);
            let r = g.reshape(m, &[10]);
            g.scale_rows(r, vec![0.5, -2.0])
        });
    }

    #[test]
    fn cross_entropy_gradient() {
        check(vec![rnd(&[4, 3], 15)], |g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]));
    }

    #[test]
    fn inference_graph_keeps_no_gradients() {
        let mut g = Graph::<f32>::inference();
        let a = g.param(Tensor::full(&[2], 1.0));
        let b = g.square(a);
        let m = g.mean(b);
        let grads = g.backward(m);
        assert!(grads.get(a).is_none());
    }
}
