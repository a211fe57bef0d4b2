//! Tape-based reverse-mode automatic differentiation.
//!
//! Every forward operation appends one node holding its output values and a
//! backward rule. `backward` replays the tape in reverse, visiting each node
//! exactly once, and leaves `d loss / d node` on every reached node. The whole
//! engine is single-threaded and deterministic: identical inputs produce
//! bit-identical outputs and gradients.

use crate::conv::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    /// Input node; `requires_grad` marks trainable leaves.
    Leaf { requires_grad: bool },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: T },
    /// `[N,C,H,W] + bias[C]`, bias broadcast over batch and space.
    AddBiasChannel { x: NodeId, bias: NodeId },
    /// `[N,M] + bias[M]`, bias broadcast over rows.
    AddBiasRow { x: NodeId, bias: NodeId },
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Conv2d { x: NodeId, w: NodeId, geom: ConvGeom, n: usize },
    ConvTranspose2d { x: NodeId, w: NodeId, geom: ConvGeom, n: usize },
    GroupNorm { x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, eps: T },
    LeakyRelu { x: NodeId, slope: T },
    Sigmoid { x: NodeId },
    Sqrt { x: NodeId },
    Recip { x: NodeId },
    /// `ln(max(x, floor))`; zero gradient below the floor.
    LogClamped { x: NodeId, floor: T },
    /// Row-wise softmax on `[N,C]`.
    Softmax { x: NodeId },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    /// `[N,C,H,W] -> [N,C]` spatial mean.
    GlobalAvgPool { x: NodeId },
    Reshape { x: NodeId },
    /// Multiply every element of `x` by the single-element node `s`.
    MulScalar { x: NodeId, s: NodeId },
    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
    /// Rows of `codebook[K,d]` gathered into `[N,d,h,w]` by per-position indices.
    CodebookLookup { codebook: NodeId, indices: Vec<usize> },
    /// Identity forward, zero backward.
    Detach { x: NodeId },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    data: Vec<T>,
    shape: Vec<usize>,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// Recorded computation graph (topological by construction).
#[derive(Debug)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Copies a tensor onto the tape as an input node.
    pub fn leaf(&mut self, t: &Tensor<T>) -> NodeId {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            Op::Leaf { requires_grad: t.requires_grad() },
        )
    }

    /// Input node that never receives a gradient.
    pub fn constant(&mut self, data: Vec<T>, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "constant shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(self.push(data, shape, Op::Leaf { requires_grad: false }))
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Gradient of the last `backward` loss with respect to this node.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> T {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    fn push(&mut self, data: Vec<T>, shape: Vec<usize>, op: Op<T>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { data, shape, grad: None, op });
        NodeId(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x + y);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(data, shape, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x - y);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(data, shape, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x * y);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(data, shape, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let data = self.nodes[a.0].data.iter().map(|&x| x * factor).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(data, shape, Op::Scale { a, factor })
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -T::one())
    }

    pub fn add_bias_channel(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x.0].shape.clone();
        let bs = &self.nodes[x.0].shape;
        if xs.len() != 4 {
            return Err(Error::Dimension(format!("add_bias_channel expects 4-D input, got {:?}", bs)));
        }
        if self.nodes[bias.0].shape != [xs[1]] {
            return Err(Error::Dimension(format!(
                "bias shape {:?} does not match {} channels",
                self.nodes[bias.0].shape, xs[1]
            )));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let mut data = self.nodes[x.0].data.clone();
        let b = &self.nodes[bias.0].data;
        for i in 0..n {
            for j in 0..c {
                let base = (i * c + j) * hw;
                for v in &mut data[base..base + hw] {
                    *v += b[j];
                }
            }
        }
        Ok(self.push(data, xs, Op::AddBiasChannel { x, bias }))
    }

    pub fn add_bias_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 2 {
            return Err(Error::Dimension(format!("add_bias_row expects 2-D input, got {:?}", xs)));
        }
        if self.nodes[bias.0].shape != [xs[1]] {
            return Err(Error::Dimension(format!(
                "bias shape {:?} does not match {} columns",
                self.nodes[bias.0].shape, xs[1]
            )));
        }
        let (n, m) = (xs[0], xs[1]);
        let mut data = self.nodes[x.0].data.clone();
        let b = &self.nodes[bias.0].data;
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] += b[j];
            }
        }
        Ok(self.push(data, xs, Op::AddBiasRow { x, bias }))
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!("matmul: {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![T::zero(); m * n];
        T::gemm(m, k, n, &self.nodes[a.0].data, false, &self.nodes[b.0].data, false, T::zero(), &mut data);
        Ok(self.push(data, vec![m, n], Op::MatMul { a, b, m, k, n }))
    }

    // ---- convolutions ----------------------------------------------------

    /// Cross-correlation of `x [N,C,H,W]` with `w [F,C,kh,kw]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Dimension("conv2d expects 4-D input and kernel".into()));
        }
        if xs[1] != ws[1] {
            return Err(Error::Dimension(format!(
                "conv2d: input has {} channels, kernel expects {}",
                xs[1], ws[1]
            )));
        }
        let geom = ConvGeom::forward(xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], stride, pad)?;
        let n = xs[0];
        let mut data = vec![T::zero(); n * geom.small_len()];
        conv::conv_forward(&self.nodes[x.0].data, &self.nodes[w.0].data, &geom, n, &mut data);
        let shape = vec![n, geom.ch_small, geom.h_small, geom.w_small];
        Ok(self.push(data, shape, Op::Conv2d { x, w, geom, n }))
    }

    /// Transposed convolution of `x [N,C,h,w]` with `w [C,F,kh,kw]`; the
    /// adjoint of `conv2d` applied as a forward map.
    pub fn conv2d_transpose(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Dimension("conv2d_transpose expects 4-D input and kernel".into()));
        }
        if xs[1] != ws[0] {
            return Err(Error::Dimension(format!(
                "conv2d_transpose: input has {} channels, kernel expects {}",
                xs[1], ws[0]
            )));
        }
        let geom = ConvGeom::transpose(xs[1], xs[2], xs[3], ws[1], ws[2], ws[3], stride, pad)?;
        let n = xs[0];
        let mut data = vec![T::zero(); n * geom.big_len()];
        conv::conv_transpose_forward(&self.nodes[x.0].data, &self.nodes[w.0].data, &geom, n, &mut data);
        let shape = vec![n, geom.ch_big, geom.h_big, geom.w_big];
        Ok(self.push(data, shape, Op::ConvTranspose2d { x, w, geom, n }))
    }

    // ---- normalization and activations ------------------------------------

    /// Per-sample, per-group normalization followed by a per-channel affine map.
    pub fn group_norm(
        &mut self,
        x: NodeId,
        groups: usize,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    ) -> Result<NodeId> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 {
            return Err(Error::Dimension("group_norm expects 4-D input".into()));
        }
        let c = xs[1];
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!(
                "group_norm: {} channels not divisible by {} groups",
                c, groups
            )));
        }
        if self.nodes[gamma.0].shape != [c] || self.nodes[beta.0].shape != [c] {
            return Err(Error::Dimension("group_norm: gamma/beta must have shape [C]".into()));
        }
        let (n, hw) = (xs[0], xs[2] * xs[3]);
        let cg = c / groups; // channels per group
        let m = cg * hw; // elements per group
        let xd = &self.nodes[x.0].data;
        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        let mut data = vec![T::zero(); xd.len()];
        let m_t = T::from_f64(m as f64);
        for i in 0..n {
            for gi in 0..groups {
                let start = (i * c + gi * cg) * hw;
                let slice = &xd[start..start + m];
                let mean = slice.iter().copied().sum::<T>() / m_t;
                let var = slice.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m_t;
                let inv_std = T::one() / (var + eps).sqrt();
                for j in 0..m {
                    let ch = gi * cg + j / hw;
                    data[start + j] = (slice[j] - mean) * inv_std * g[ch] + b[ch];
                }
            }
        }
        Ok(self.push(data, xs, Op::GroupNorm { x, gamma, beta, groups, eps }))
    }

    /// Elementwise `max(x, slope * x)` with `slope` in `[0, 1)`.
    pub fn leaky_relu(&mut self, x: NodeId, slope: T) -> Result<NodeId> {
        if slope < T::zero() || slope >= T::one() {
            return Err(Error::Config(format!("leaky_relu slope {} outside [0,1)", slope)));
        }
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| if v > T::zero() { v } else { slope * v })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(data, shape, Op::LeakyRelu { x, slope }))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(data, shape, Op::Sigmoid { x })
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let data = self.nodes[x.0].data.iter().map(|&v| v.sqrt()).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(data, shape, Op::Sqrt { x })
    }

    pub fn recip(&mut self, x: NodeId) -> NodeId {
        let data = self.nodes[x.0].data.iter().map(|&v| T::one() / v).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(data, shape, Op::Recip { x })
    }

    /// `ln(max(x, floor))`; the floor keeps GAN losses finite.
    pub fn log_clamped(&mut self, x: NodeId, floor: T) -> NodeId {
        let data = self.nodes[x.0].data.iter().map(|&v| v.max(floor).ln()).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(data, shape, Op::LogClamped { x, floor })
    }

    /// Row-wise softmax over `[N,C]` logits (numerically stabilized).
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 2 {
            return Err(Error::Dimension("softmax expects 2-D logits".into()));
        }
        let (n, c) = (xs[0], xs[1]);
        let xd = &self.nodes[x.0].data;
        let mut data = vec![T::zero(); xd.len()];
        for i in 0..n {
            let row = &xd[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..c {
                let e = (row[j] - max).exp();
                data[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                data[i * c + j] = data[i * c + j] / sum;
            }
        }
        Ok(self.push(data, xs, Op::Softmax { x }))
    }

    // ---- reductions and shape --------------------------------------------

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].data.iter().copied().sum();
        self.push(vec![s], vec![1], Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = T::from_f64(self.nodes[x.0].data.len() as f64);
        let s = self.nodes[x.0].data.iter().copied().sum::<T>() / n;
        self.push(vec![s], vec![1], Op::MeanAll { x })
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 {
            return Err(Error::Dimension("global_avg_pool expects 4-D input".into()));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let hw_t = T::from_f64(hw as f64);
        let xd = &self.nodes[x.0].data;
        let mut data = vec![T::zero(); n * c];
        for i in 0..n {
            for j in 0..c {
                let base = (i * c + j) * hw;
                data[i * c + j] = xd[base..base + hw].iter().copied().sum::<T>() / hw_t;
            }
        }
        Ok(self.push(data, vec![n, c], Op::GlobalAvgPool { x }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(Error::Dimension(format!(
                "reshape to {:?} changes element count from {}",
                shape,
                self.nodes[x.0].data.len()
            )));
        }
        let data = self.nodes[x.0].data.clone();
        Ok(self.push(data, shape, Op::Reshape { x }))
    }

    /// Multiplies every element of `x` by the single-element node `s`.
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.nodes[s.0].data.len() != 1 {
            return Err(Error::Dimension("mul_scalar: scale node must hold one element".into()));
        }
        let sv = self.nodes[s.0].data[0];
        let data = self.nodes[x.0].data.iter().map(|&v| v * sv).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(data, shape, Op::MulScalar { x, s }))
    }

    // ---- losses and lookups ------------------------------------------------

    /// Mean cross-entropy of integer `labels` under row-wise softmax of `logits [N,C]`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let xs = self.nodes[logits.0].shape.clone();
        if xs.len() != 2 {
            return Err(Error::Dimension("cross_entropy expects 2-D logits".into()));
        }
        let (n, c) = (xs[0], xs[1]);
        if labels.len() != n {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} labels for {} rows",
                labels.len(),
                n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {} out of range for {} classes", bad, c)));
        }
        let xd = &self.nodes[logits.0].data;
        let mut total = T::zero();
        for i in 0..n {
            let row = &xd[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - row[labels[i]];
        }
        let mean = total / T::from_f64(n as f64);
        Ok(self.push(vec![mean], vec![1], Op::CrossEntropy { logits, labels: labels.to_vec() }))
    }

    /// Gathers codebook rows into `[N,d,h,w]`; `indices` is row-major over
    /// `(n, h, w)`. Gradients scatter-add back into the codebook.
    pub fn codebook_lookup(
        &mut self,
        codebook: NodeId,
        indices: &[usize],
        n: usize,
        h: usize,
        w: usize,
    ) -> Result<NodeId> {
        let cs = self.nodes[codebook.0].shape.clone();
        if cs.len() != 2 {
            return Err(Error::Dimension("codebook_lookup expects a 2-D codebook".into()));
        }
        let (k, d) = (cs[0], cs[1]);
        if indices.len() != n * h * w {
            return Err(Error::Dimension(format!(
                "codebook_lookup: {} indices for {}x{}x{} positions",
                indices.len(),
                n,
                h,
                w
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::Data(format!("code index {} out of range for K={}", bad, k)));
        }
        let cb = &self.nodes[codebook.0].data;
        let hw = h * w;
        let mut data = vec![T::zero(); n * d * hw];
        for i in 0..n {
            for p in 0..hw {
                let row = indices[i * hw + p];
                for c in 0..d {
                    data[(i * d + c) * hw + p] = cb[row * d + c];
                }
            }
        }
        Ok(self.push(data, vec![n, d, h, w], Op::CodebookLookup { codebook, indices: indices.to_vec() }))
    }

    /// Identity forward; gradients stop here.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let data = self.nodes[x.0].data.clone();
        let shape = self.nodes[x.0].shape.clone();
        self.push(data, shape, Op::Detach { x })
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss node. Populates gradients on every
    /// reached node; a second invocation without a fresh tape is rejected.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already invoked on this tape; build a new tape or reset".into(),
            ));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![T::one()]);

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf { .. } => {}
                Op::Detach { .. } => {}
                Op::Add { a, b } => {
                    self.acc(a, &g);
                    self.acc(b, &g);
                }
                Op::Sub { a, b } => {
                    self.acc(a, &g);
                    self.acc_scaled(b, &g, -T::one());
                }
                Op::Mul { a, b } => {
                    let da = zip_map(&g, &self.nodes[b.0].data, |gv, bv| gv * bv);
                    let db = zip_map(&g, &self.nodes[a.0].data, |gv, av| gv * av);
                    self.acc(a, &da);
                    self.acc(b, &db);
                }
                Op::Scale { a, factor } => {
                    self.acc_scaled(a, &g, factor);
                }
                Op::AddBiasChannel { x, bias } => {
                    let xs = &self.nodes[i].shape;
                    let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    let mut gb = vec![T::zero(); c];
                    for ni in 0..n {
                        for j in 0..c {
                            let base = (ni * c + j) * hw;
                            gb[j] += g[base..base + hw].iter().copied().sum::<T>();
                        }
                    }
                    self.acc(x, &g);
                    self.acc(bias, &gb);
                }
                Op::AddBiasRow { x, bias } => {
                    let xs = &self.nodes[i].shape;
                    let (n, m) = (xs[0], xs[1]);
                    let mut gb = vec![T::zero(); m];
                    for ni in 0..n {
                        for j in 0..m {
                            gb[j] += g[ni * m + j];
                        }
                    }
                    self.acc(x, &g);
                    self.acc(bias, &gb);
                }
                Op::MatMul { a, b, m, k, n } => {
                    // dA = g * B^T, dB = A^T * g
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, &g, false, &self.nodes[b.0].data, true, T::zero(), &mut da);
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, &self.nodes[a.0].data, true, &g, false, T::zero(), &mut db);
                    self.acc(a, &da);
                    self.acc(b, &db);
                }
                Op::Conv2d { x, w, geom, n } => {
                    let mut gx = vec![T::zero(); self.nodes[x.0].data.len()];
                    let mut gw = vec![T::zero(); self.nodes[w.0].data.len()];
                    conv::conv_backward(
                        &self.nodes[x.0].data,
                        &self.nodes[w.0].data,
                        &g,
                        &geom,
                        n,
                        &mut gx,
                        &mut gw,
                    );
                    self.acc(x, &gx);
                    self.acc(w, &gw);
                }
                Op::ConvTranspose2d { x, w, geom, n } => {
                    let mut gx = vec![T::zero(); self.nodes[x.0].data.len()];
                    let mut gw = vec![T::zero(); self.nodes[w.0].data.len()];
                    conv::conv_transpose_backward(
                        &self.nodes[x.0].data,
                        &self.nodes[w.0].data,
                        &g,
                        &geom,
                        n,
                        &mut gx,
                        &mut gw,
                    );
                    self.acc(x, &gx);
                    self.acc(w, &gw);
                }
                Op::GroupNorm { x, gamma, beta, groups, eps } => {
                    let (gx, ggamma, gbeta) = self.group_norm_backward(i, x, gamma, groups, eps, &g);
                    self.acc(x, &gx);
                    self.acc(gamma, &ggamma);
                    self.acc(beta, &gbeta);
                }
                Op::LeakyRelu { x, slope } => {
                    let dx = zip_map(&g, &self.nodes[x.0].data, |gv, xv| {
                        if xv > T::zero() {
                            gv
                        } else {
                            gv * slope
                        }
                    });
                    self.acc(x, &dx);
                }
                Op::Sigmoid { x } => {
                    let dx = zip_map(&g, &self.nodes[i].data, |gv, yv| gv * yv * (T::one() - yv));
                    self.acc(x, &dx);
                }
                Op::Sqrt { x } => {
                    let two = T::from_f64(2.0);
                    let dx = zip_map(&g, &self.nodes[i].data, |gv, yv| gv / (two * yv));
                    self.acc(x, &dx);
                }
                Op::Recip { x } => {
                    let dx = zip_map(&g, &self.nodes[i].data, |gv, yv| -gv * yv * yv);
                    self.acc(x, &dx);
                }
                Op::LogClamped { x, floor } => {
                    let dx = zip_map(&g, &self.nodes[x.0].data, |gv, xv| {
                        if xv > floor {
                            gv / xv
                        } else {
                            T::zero()
                        }
                    });
                    self.acc(x, &dx);
                }
                Op::Softmax { x } => {
                    let shape = &self.nodes[i].shape;
                    let (n, c) = (shape[0], shape[1]);
                    let y = &self.nodes[i].data;
                    let mut dx = vec![T::zero(); y.len()];
                    for r in 0..n {
                        let base = r * c;
                        let mut dot = T::zero();
                        for j in 0..c {
                            dot += g[base + j] * y[base + j];
                        }
                        for j in 0..c {
                            dx[base + j] = y[base + j] * (g[base + j] - dot);
                        }
                    }
                    self.acc(x, &dx);
                }
                Op::SumAll { x } => {
                    let len = self.nodes[x.0].data.len();
                    self.acc_fill(x, g[0], len);
                }
                Op::MeanAll { x } => {
                    let len = self.nodes[x.0].data.len();
                    self.acc_fill(x, g[0] / T::from_f64(len as f64), len);
                }
                Op::GlobalAvgPool { x } => {
                    let xs = &self.nodes[x.0].shape;
                    let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    let hw_t = T::from_f64(hw as f64);
                    let mut dx = vec![T::zero(); n * c * hw];
                    for ni in 0..n {
                        for j in 0..c {
                            let gv = g[ni * c + j] / hw_t;
                            let base = (ni * c + j) * hw;
                            dx[base..base + hw].fill(gv);
                        }
                    }
                    self.acc(x, &dx);
                }
                Op::Reshape { x } => {
                    self.acc(x, &g);
                }
                Op::MulScalar { x, s } => {
                    let sv = self.nodes[s.0].data[0];
                    let dx = g.iter().map(|&gv| gv * sv).collect::<Vec<_>>();
                    let ds = g
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(&gv, &xv)| gv * xv)
                        .sum::<T>();
                    self.acc(x, &dx);
                    self.acc(s, &[ds]);
                }
                Op::CrossEntropy { logits, labels } => {
                    let xs = &self.nodes[logits.0].shape;
                    let (n, c) = (xs[0], xs[1]);
                    let xd = &self.nodes[logits.0].data;
                    let n_t = T::from_f64(n as f64);
                    let mut dx = vec![T::zero(); n * c];
                    for r in 0..n {
                        let row = &xd[r * c..(r + 1) * c];
                        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                        let mut sum = T::zero();
                        for j in 0..c {
                            let e = (row[j] - max).exp();
                            dx[r * c + j] = e;
                            sum += e;
                        }
                        for j in 0..c {
                            let p = dx[r * c + j] / sum;
                            let y = if labels[r] == j { T::one() } else { T::zero() };
                            dx[r * c + j] = g[0] * (p - y) / n_t;
                        }
                    }
                    self.acc(logits, &dx);
                }
                Op::CodebookLookup { codebook, indices } => {
                    let cs = &self.nodes[codebook.0].shape;
                    let d = cs[1];
                    let out_shape = &self.nodes[i].shape;
                    let (n, hw) = (out_shape[0], out_shape[2] * out_shape[3]);
                    let mut gcb = vec![T::zero(); self.nodes[codebook.0].data.len()];
                    for ni in 0..n {
                        for p in 0..hw {
                            let row = indices[ni * hw + p];
                            for ch in 0..d {
                                gcb[row * d + ch] += g[(ni * d + ch) * hw + p];
                            }
                        }
                    }
                    self.acc(codebook, &gcb);
                }
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn group_norm_backward(
        &self,
        out: usize,
        x: NodeId,
        gamma: NodeId,
        groups: usize,
        eps: T,
        g: &[T],
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let xs = &self.nodes[out].shape;
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let cg = c / groups;
        let m = cg * hw;
        let m_t = T::from_f64(m as f64);
        let xd = &self.nodes[x.0].data;
        let gamma_d = &self.nodes[gamma.0].data;
        let mut gx = vec![T::zero(); xd.len()];
        let mut ggamma = vec![T::zero(); c];
        let mut gbeta = vec![T::zero(); c];
        let mut xhat = vec![T::zero(); m];
        let mut dxhat = vec![T::zero(); m];
        for i in 0..n {
            for gi in 0..groups {
                let start = (i * c + gi * cg) * hw;
                let slice = &xd[start..start + m];
                let mean = slice.iter().copied().sum::<T>() / m_t;
                let var = slice.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m_t;
                let inv_std = T::one() / (var + eps).sqrt();
                let mut sum1 = T::zero();
                let mut sum2 = T::zero();
                for j in 0..m {
                    let ch = gi * cg + j / hw;
                    xhat[j] = (slice[j] - mean) * inv_std;
                    dxhat[j] = g[start + j] * gamma_d[ch];
                    ggamma[ch] += g[start + j] * xhat[j];
                    gbeta[ch] += g[start + j];
                    sum1 += dxhat[j];
                    sum2 += dxhat[j] * xhat[j];
                }
                let inv_m = T::one() / m_t;
                for j in 0..m {
                    gx[start + j] = inv_std * (dxhat[j] - sum1 * inv_m - xhat[j] * sum2 * inv_m);
                }
            }
        }
        (gx, ggamma, gbeta)
    }

    fn acc(&mut self, id: NodeId, src: &[T]) {
        let node = &mut self.nodes[id.0];
        debug_assert_eq!(src.len(), node.data.len());
        match &mut node.grad {
            Some(gr) => {
                for (a, b) in gr.iter_mut().zip(src) {
                    *a += *b;
                }
            }
            None => node.grad = Some(src.to_vec()),
        }
    }

    fn acc_scaled(&mut self, id: NodeId, src: &[T], factor: T) {
        let node = &mut self.nodes[id.0];
        let gr = node.grad.get_or_insert_with(|| vec![T::zero(); node.data.len()]);
        for (a, b) in gr.iter_mut().zip(src) {
            *a += *b * factor;
        }
    }

    fn acc_fill(&mut self, id: NodeId, value: T, len: usize) {
        let node = &mut self.nodes[id.0];
        let gr = node.grad.get_or_insert_with(|| vec![T::zero(); len]);
        for a in gr.iter_mut() {
            *a += value;
        }
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Forward-pass helper that records which tape nodes correspond to the
/// parameters a network bound, in binding order.
pub struct Fwd<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    bound: Vec<NodeId>,
}

impl<'a, T: Scalar> Fwd<'a, T> {
    pub fn new(tape: &'a mut Tape<T>) -> Self {
        Fwd { tape, bound: Vec::new() }
    }

    /// Places a parameter tensor on the tape and remembers its node.
    pub fn bind(&mut self, p: &Tensor<T>) -> NodeId {
        let id = self.tape.leaf(p);
        self.bound.push(id);
        id
    }

    pub fn bound(&self) -> &[NodeId] {
        &self.bound
    }

    pub fn into_bound(self) -> Vec<NodeId> {
        self.bound
    }
}

/// Copies gradients from bound tape nodes back into parameter tensors.
/// `params` must be in the same order the network bound them.
pub fn pull_grads<T: Scalar>(tape: &Tape<T>, bound: &[NodeId], params: &mut [&mut Tensor<T>]) -> Result<()> {
    if bound.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} bound nodes for {} parameters",
            bound.len(),
            params.len()
        )));
    }
    for (id, p) in bound.iter().zip(params.iter_mut()) {
        match tape.grad(*id) {
            Some(g) => p.accumulate_grad(g),
            None => {
                // Parameter unreachable from the loss: gradient is zero.
                p.zero_grad();
            }
        }
    }
    Ok(())
}
