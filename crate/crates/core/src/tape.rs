//! Tape-based reverse-mode automatic differentiation.
//!
//! A `Tape` records every primitive op in execution order; `backward` walks
//! the record once in reverse and accumulates gradients for every
//! `requires_grad` node. Values are immutable after creation; only gradient
//! buffers mutate. A tape and its nodes stay on one logical thread.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum BackOp<T: Scalar> {
    Leaf,
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: T,
    },
    Relu {
        x: NodeId,
    },
    /// x: [m, n] + bias[n] broadcast over rows
    BiasAdd {
        x: NodeId,
        bias: NodeId,
    },
    /// x: [c, d, h, w] + bias[c] broadcast over the volume
    ChannelBiasAdd {
        x: NodeId,
        bias: NodeId,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        x: NodeId,
    },
    /// saves its own output for the backward rule
    Softmax {
        x: NodeId,
        axis: usize,
    },
    StackConcat {
        parts: Vec<NodeId>,
    },
    MeanAxis {
        x: NodeId,
        axis: usize,
    },
    Reshape {
        x: NodeId,
    },
    Conv3d {
        x: NodeId,
        k: NodeId,
        stride: [usize; 3],
        pad: [usize; 3],
    },
    MaxPool3d {
        x: NodeId,
        argmax: Vec<u32>,
    },
    /// mask entries are 0 or 1/(1-p)
    Dropout {
        x: NodeId,
        mask: Vec<T>,
    },
    CrossEntropy {
        probs: NodeId,
        labels: Vec<usize>,
    },
    /// scalar = dot(flatten(x), weights); used to reduce vector outputs
    WeightedSum {
        x: NodeId,
        weights: Vec<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: BackOp<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

const CE_CLAMP: f64 = 1e-12;

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: BackOp<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn out_of(&self, ids: &[NodeId], shape: Vec<usize>, data: Vec<T>, op: BackOp<T>) -> Node<T> {
        let requires = ids.iter().any(|id| self.nodes[id.0].value.requires_grad);
        let mut value = Tensor::new(shape, data).expect("op produced consistent shape");
        value.requires_grad = requires;
        Node { value, op }
    }

    fn push_op(&mut self, ids: &[NodeId], shape: Vec<usize>, data: Vec<T>, op: BackOp<T>) -> NodeId {
        let node = self.out_of(ids, shape, data, op);
        self.nodes.push(node);
        NodeId(self.nodes.len() - 1)
    }

    /// Record a copy of `t` as a leaf.
    pub fn leaf(&mut self, t: &Tensor<T>) -> NodeId {
        self.push(t.clone(), BackOp::Leaf)
    }

    /// Leaf from raw parts.
    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Result<NodeId> {
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = requires_grad;
        Ok(self.push(t, BackOp::Leaf))
    }

    /// Copy of an existing node's value with the gradient path cut.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let mut value = self.nodes[x.0].value.clone();
        value.requires_grad = false;
        value.grad = None;
        self.push(value, BackOp::Leaf)
    }

    pub fn tensor(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn data(&self, id: NodeId) -> &[T] {
        self.nodes[id.0].value.data()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    // ---- primitive ops -------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x + *y).collect();
        Ok(self.push_op(&[a, b], ta.shape().to_vec(), data, BackOp::Add { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x * *y).collect();
        Ok(self.push_op(&[a, b], ta.shape().to_vec(), data, BackOp::Mul { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|v| *v * factor).collect();
        self.push_op(&[x], tx.shape().to_vec(), data, BackOp::Scale { x, factor })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let data = tx
            .data()
            .iter()
            .map(|v| if *v > T::zero() { *v } else { T::zero() })
            .collect();
        self.push_op(&[x], tx.shape().to_vec(), data, BackOp::Relu { x })
    }

    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let xs = tx.shape();
        if xs.len() != 2 || tb.shape() != [xs[1]] {
            return Err(Error::ShapeMismatch {
                op: "bias_add",
                lhs: xs.to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, n) = (xs[0], xs[1]);
        let mut data = tx.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += tb.data()[j];
            }
        }
        Ok(self.push_op(&[x, bias], vec![m, n], data, BackOp::BiasAdd { x, bias }))
    }

    pub fn channel_bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let xs = tx.shape();
        if xs.len() != 4 || tb.shape() != [xs[0]] {
            return Err(Error::ShapeMismatch {
                op: "channel_bias_add",
                lhs: xs.to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let c = xs[0];
        let vol = xs[1] * xs[2] * xs[3];
        let mut data = tx.data().to_vec();
        for ci in 0..c {
            let bv = tb.data()[ci];
            for v in &mut data[ci * vol..(ci + 1) * vol] {
                *v += bv;
            }
        }
        Ok(self.push_op(&[x, bias], xs.to_vec(), data, BackOp::ChannelBiasAdd { x, bias }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(ta.data(), tb.data(), m, k, n);
        Ok(self.push_op(&[a, b], vec![m, n], data, BackOp::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let s = tx.shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("transpose expects 2-D, got {s:?}")));
        }
        let data = kernels::transpose(tx.data(), s[0], s[1]);
        Ok(self.push_op(&[x], vec![s[1], s[0]], data, BackOp::Transpose { x }))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let s = tx.shape().to_vec();
        if axis >= s.len() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} out of range for shape {s:?}"
            )));
        }
        let mut data = tx.data().to_vec();
        for_each_lane(&s, axis, |base, stride, len| {
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(data[base + j * stride]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (data[base + j * stride] - max).exp();
                data[base + j * stride] = e;
                sum += e;
            }
            for j in 0..len {
                data[base + j * stride] /= sum;
            }
        });
        Ok(self.push_op(&[x], s, data, BackOp::Softmax { x, axis }))
    }

    /// Stack M vectors of width d into an [M, d] matrix.
    pub fn stack_concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Dimension("stack_concat of zero parts".into()));
        }
        let d = {
            let first = self.nodes[parts[0].0].value.shape();
            if first.len() != 1 {
                return Err(Error::Dimension(format!(
                    "stack_concat expects vectors, got {first:?}"
                )));
            }
            first[0]
        };
        let mut data = Vec::with_capacity(parts.len() * d);
        for p in parts {
            let tp = &self.nodes[p.0].value;
            if tp.shape() != [d] {
                return Err(Error::ShapeMismatch {
                    op: "stack_concat",
                    lhs: vec![d],
                    rhs: tp.shape().to_vec(),
                });
            }
            data.extend_from_slice(tp.data());
        }
        Ok(self.push_op(
            parts,
            vec![parts.len(), d],
            data,
            BackOp::StackConcat { parts: parts.to_vec() },
        ))
    }

    /// Mean-reduce along `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let s = tx.shape().to_vec();
        if axis >= s.len() {
            return Err(Error::Dimension(format!(
                "mean_axis {axis} out of range for shape {s:?}"
            )));
        }
        let mut out_shape: Vec<usize> = s.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out_len: usize = out_shape.iter().product();
        let mut data = vec![T::zero(); out_len];
        let inv = T::from_f64(1.0 / s[axis] as f64);
        let src = tx.data();
        let mut lane = 0usize;
        for_each_lane(&s, axis, |base, stride, len| {
            let mut acc = T::zero();
            for j in 0..len {
                acc += src[base + j * stride];
            }
            data[lane] = acc * inv;
            lane += 1;
        });
        Ok(self.push_op(&[x], out_shape, data, BackOp::MeanAxis { x, axis }))
    }

    /// Mean over the K columns of a [d, K] matrix -> [d].
    pub fn global_average_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.nodes[x.0].value.shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!(
                "global_average_pool expects [d, K], got {s:?}"
            )));
        }
        self.mean_axis(x, 1)
    }

    pub fn reshape(&mut self, x: NodeId, new_shape: Vec<usize>) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let numel: usize = new_shape.iter().product();
        if numel != tx.numel() || new_shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: tx.shape().to_vec(),
                rhs: new_shape,
            });
        }
        let data = tx.data().to_vec();
        Ok(self.push_op(&[x], new_shape, data, BackOp::Reshape { x }))
    }

    /// 3-D cross-correlation of x: [c_in, D, H, W] with k: [c_out, c_in, kD, kH, kW].
    pub fn conv3d(
        &mut self,
        x: NodeId,
        k: NodeId,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<NodeId> {
        let (tx, tk) = (&self.nodes[x.0].value, &self.nodes[k.0].value);
        let (sx, sk) = (tx.shape(), tk.shape());
        if sx.len() != 4 || sk.len() != 5 || sx[0] != sk[1] {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                lhs: sx.to_vec(),
                rhs: sk.to_vec(),
            });
        }
        if stride.iter().any(|&s| s == 0) {
            return Err(Error::Parameter("conv3d stride must be >= 1".into()));
        }
        let in_dims = [sx[1], sx[2], sx[3]];
        let kernel = [sk[2], sk[3], sk[4]];
        let out_dims = kernels::conv3d_out_dims(in_dims, kernel, stride, pad).ok_or_else(|| {
            Error::Dimension(format!(
                "conv3d kernel {kernel:?} larger than padded input {in_dims:?} (pad {pad:?})"
            ))
        })?;
        let (c_in, c_out) = (sx[0], sk[0]);
        let data = kernels::conv3d_forward(tx.data(), c_in, in_dims, tk.data(), c_out, kernel, stride, pad);
        Ok(self.push_op(
            &[x, k],
            vec![c_out, out_dims[0], out_dims[1], out_dims[2]],
            data,
            BackOp::Conv3d { x, k, stride, pad },
        ))
    }

    /// Non-overlapping max-pool; window == stride. Axes with extent 1 must
    /// use window 1.
    pub fn maxpool3d(&mut self, x: NodeId, window: [usize; 3]) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let s = tx.shape();
        if s.len() != 4 {
            return Err(Error::Dimension(format!("maxpool3d expects 4-D, got {s:?}")));
        }
        let in_dims = [s[1], s[2], s[3]];
        for a in 0..3 {
            if window[a] == 0 || window[a] > in_dims[a] {
                return Err(Error::Dimension(format!(
                    "maxpool3d window {window:?} invalid for input dims {in_dims:?}"
                )));
            }
        }
        let c = s[0];
        let (data, argmax, out_dims) = kernels::maxpool3d_forward(tx.data(), c, in_dims, window);
        Ok(self.push_op(
            &[x],
            vec![c, out_dims[0], out_dims[1], out_dims[2]],
            data,
            BackOp::MaxPool3d { x, argmax },
        ))
    }

    /// Inverted dropout: in training each element is zeroed with
    /// probability `p` and survivors are scaled by 1/(1-p); in eval mode the
    /// input node is returned untouched.
    pub fn dropout<R: Rng>(
        &mut self,
        x: NodeId,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!(
                "dropout probability must satisfy 0 <= p < 1, got {p}"
            )));
        }
        if !training {
            return Ok(x);
        }
        let tx = &self.nodes[x.0].value;
        let keep_scale = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..tx.numel())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(v, m)| *v * *m).collect();
        let shape = tx.shape().to_vec();
        Ok(self.push_op(&[x], shape, data, BackOp::Dropout { x, mask }))
    }

    /// Mean negative log-likelihood of `labels` under `probs` [B, C];
    /// probabilities are clamped at 1e-12 before the log.
    pub fn cross_entropy(&mut self, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
        let tp = &self.nodes[probs.0].value;
        let s = tp.shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!(
                "cross_entropy expects [B, C] probabilities, got {s:?}"
            )));
        }
        let (b, c) = (s[0], s[1]);
        if labels.len() != b {
            return Err(Error::Contract(format!(
                "cross_entropy: {b} rows but {} labels",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Contract(format!(
                "cross_entropy: label {bad} out of range for {c} classes"
            )));
        }
        let clamp = T::from_f64(CE_CLAMP);
        let mut acc = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let p = tp.data()[i * c + y].max(clamp);
            acc += -p.ln();
        }
        let loss = acc / T::from_f64(b as f64);
        Ok(self.push_op(
            &[probs],
            vec![1],
            vec![loss],
            BackOp::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// dot(flatten(x), weights) -> scalar; reduces any output to a scalar
    /// loss for gradient checks.
    pub fn weighted_sum(&mut self, x: NodeId, weights: &[T]) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        if weights.len() != tx.numel() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                lhs: tx.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let v = tx
            .data()
            .iter()
            .zip(weights)
            .map(|(a, w)| *a * *w)
            .sum::<T>();
        Ok(self.push_op(
            &[x],
            vec![1],
            vec![v],
            BackOp::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients accumulate into each
    /// requires_grad node's `grad` buffer; calling backward again without
    /// zeroing adds another copy of the gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let n = self.nodes.len();
        // fresh sweep buffers so repeated calls accumulate exactly one
        // gradient copy each
        let mut sweep: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        sweep[loss.0] = Some(vec![T::one()]);

        for i in (0..n).rev() {
            let Some(gout) = sweep[i].take() else { continue };
            self.apply_backward(i, &gout, &mut sweep);
            // persist for inspection / accumulation semantics
            if self.nodes[i].value.requires_grad {
                self.nodes[i].value.accumulate_grad(&gout);
            }
        }
        // leaves never reached by the sweep still get a (zero) gradient
        for node in &mut self.nodes {
            if node.value.requires_grad && node.value.grad.is_none() {
                node.value.zero_grad();
            }
        }
        Ok(())
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].value.requires_grad
    }

    fn accumulate(sweep: &mut [Option<Vec<T>>], id: NodeId, delta: Vec<T>) {
        match &mut sweep[id.0] {
            Some(buf) => {
                for (b, d) in buf.iter_mut().zip(&delta) {
                    *b += *d;
                }
            }
            None => sweep[id.0] = Some(delta),
        }
    }

    fn accumulate_slice(sweep: &mut [Option<Vec<T>>], id: NodeId, len: usize, write: impl FnOnce(&mut [T])) {
        let buf = sweep[id.0].get_or_insert_with(|| vec![T::zero(); len]);
        write(buf);
    }

    fn apply_backward(&self, i: usize, gout: &[T], sweep: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            BackOp::Leaf => {}
            BackOp::Add { a, b } => {
                if self.requires(*a) {
                    Self::accumulate(sweep, *a, gout.to_vec());
                }
                if self.requires(*b) {
                    Self::accumulate(sweep, *b, gout.to_vec());
                }
            }
            BackOp::Mul { a, b } => {
                if self.requires(*a) {
                    let db = self.nodes[b.0].value.data();
                    let delta = gout.iter().zip(db).map(|(g, v)| *g * *v).collect();
                    Self::accumulate(sweep, *a, delta);
                }
                if self.requires(*b) {
                    let da = self.nodes[a.0].value.data();
                    let delta = gout.iter().zip(da).map(|(g, v)| *g * *v).collect();
                    Self::accumulate(sweep, *b, delta);
                }
            }
            BackOp::Scale { x, factor } => {
                if self.requires(*x) {
                    let delta = gout.iter().map(|g| *g * *factor).collect();
                    Self::accumulate(sweep, *x, delta);
                }
            }
            BackOp::Relu { x } => {
                if self.requires(*x) {
                    let dx = self.nodes[x.0].value.data();
                    let delta = gout
                        .iter()
                        .zip(dx)
                        .map(|(g, v)| if *v > T::zero() { *g } else { T::zero() })
                        .collect();
                    Self::accumulate(sweep, *x, delta);
                }
            }
            BackOp::BiasAdd { x, bias } => {
                let s = node.value.shape();
                let (m, n) = (s[0], s[1]);
                if self.requires(*x) {
                    Self::accumulate(sweep, *x, gout.to_vec());
                }
                if self.requires(*bias) {
                    Self::accumulate_slice(sweep, *bias, n, |buf| {
                        for i in 0..m {
                            for j in 0..n {
                                buf[j] += gout[i * n + j];
                            }
                        }
                    });
                }
            }
            BackOp::ChannelBiasAdd { x, bias } => {
                let s = node.value.shape();
                let c = s[0];
                let vol = s[1] * s[2] * s[3];
                if self.requires(*x) {
                    Self::accumulate(sweep, *x, gout.to_vec());
                }
                if self.requires(*bias) {
                    Self::accumulate_slice(sweep, *bias, c, |buf| {
                        for ci in 0..c {
                            let mut acc = T::zero();
                            for v in &gout[ci * vol..(ci + 1) * vol] {
                                acc += *v;
                            }
                            buf[ci] += acc;
                        }
                    });
                }
            }
            BackOp::Matmul { a, b } => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires(*a) {
                    // grad_a = g . b^T
                    let bt = kernels::transpose(self.nodes[b.0].value.data(), k, n);
                    let delta = kernels::matmul(gout, &bt, m, n, k);
                    Self::accumulate(sweep, *a, delta);
                }
                if self.requires(*b) {
                    // grad_b = a^T . g
                    let at = kernels::transpose(self.nodes[a.0].value.data(), m, k);
                    let delta = kernels::matmul(&at, gout, k, m, n);
                    Self::accumulate(sweep, *b, delta);
                }
            }
            BackOp::Transpose { x } => {
                if self.requires(*x) {
                    let s = node.value.shape();
                    let delta = kernels::transpose(gout, s[0], s[1]);
                    Self::accumulate(sweep, *x, delta);
                }
            }
            BackOp::Softmax { x, axis } => {
                if self.requires(*x) {
                    let s = node.value.shape().to_vec();
                    let out = node.value.data();
                    let mut delta = vec![T::zero(); out.len()];
                    for_each_lane(&s, *axis, |base, stride, len| {
                        let mut dot = T::zero();
                        for j in 0..len {
                            let idx = base + j * stride;
                            dot += gout[idx] * out[idx];
                        }
                        for j in 0..len {
                            let idx = base + j * stride;
                            delta[idx] = out[idx] * (gout[idx] - dot);
                        }
                    });
                    Self::accumulate(sweep, *x, delta);
                }
            }
            BackOp::StackConcat { parts } => {
                let d = node.value.shape()[1];
                for (row, p) in parts.iter().enumerate() {
                    if self.requires(*p) {
                        Self::accumulate(sweep, *p, gout[row * d..(row + 1) * d].to_vec());
                    }
                }
            }
            BackOp::MeanAxis { x, axis } => {
                if self.requires(*x) {
                    let s = self.nodes[x.0].value.shape().to_vec();
                    let len = self.nodes[x.0].value.numel();
                    let inv = T::from_f64(1.0 / s[*axis] as f64);
                    let mut delta = vec![T::zero(); len];
                    let mut lane = 0usize;
                    for_each_lane(&s, *axis, |base, stride, l| {
                        let g = gout[lane] * inv;
                        for j in 0..l {
                            delta[base + j * stride] += g;
                        }
                        lane += 1;
                    });
                    Self::accumulate(sweep, *x, delta);
                }
            }
            BackOp::Reshape { x } => {
                if self.requires(*x) {
                    Self::accumulate(sweep, *x, gout.to_vec());
                }
            }
            BackOp::Conv3d { x, k, stride, pad } => {
                let sx = self.nodes[x.0].value.shape();
                let sk = self.nodes[k.0].value.shape();
                let (c_in, c_out) = (sx[0], sk[0]);
                let in_dims = [sx[1], sx[2], sx[3]];
                let kernel = [sk[2], sk[3], sk[4]];
                if self.requires(*k) {
                    let delta = kernels::conv3d_backward_kernels(
                        self.nodes[x.0].value.data(),
                        c_in,
                        in_dims,
                        gout,
                        c_out,
                        kernel,
                        *stride,
                        *pad,
                    );
                    Self::accumulate(sweep, *k, delta);
                }
                if self.requires(*x) {
                    let delta = kernels::conv3d_backward_input(
                        c_in,
                        in_dims,
                        self.nodes[k.0].value.data(),
                        c_out,
                        kernel,
                        *stride,
                        *pad,
                        gout,
                    );
                    Self::accumulate(sweep, *x, delta);
                }
            }
            BackOp::MaxPool3d { x, argmax } => {
                if self.requires(*x) {
                    let len = self.nodes[x.0].value.numel();
                    let delta = kernels::maxpool3d_backward(gout, argmax, len);
                    Self::accumulate(sweep, *x, delta);
                }
            }
            BackOp::Dropout { x, mask } => {
                if self.requires(*x) {
                    let delta = gout.iter().zip(mask).map(|(g, m)| *g * *m).collect();
                    Self::accumulate(sweep, *x, delta);
                }
            }
            BackOp::CrossEntropy { probs, labels } => {
                if self.requires(*probs) {
                    let tp = &self.nodes[probs.0].value;
                    let c = tp.shape()[1];
                    let b = labels.len();
                    let clamp = T::from_f64(CE_CLAMP);
                    let inv_b = T::from_f64(1.0 / b as f64);
                    let g = gout[0];
                    let mut delta = vec![T::zero(); tp.numel()];
                    for (i, &y) in labels.iter().enumerate() {
                        let p = tp.data()[i * c + y];
                        if p >= clamp {
                            delta[i * c + y] = -g * inv_b / p;
                        }
                    }
                    Self::accumulate(sweep, *probs, delta);
                }
            }
            BackOp::WeightedSum { x, weights } => {
                if self.requires(*x) {
                    let g = gout[0];
                    let delta = weights.iter().map(|w| *w * g).collect();
                    Self::accumulate(sweep, *x, delta);
                }
            }
        }
    }
}

/// Visit every 1-D lane along `axis` of a row-major tensor with shape `s`.
/// The callback receives (base offset, stride, lane length).
fn for_each_lane(s: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let len = s[axis];
    let inner: usize = s[axis + 1..].iter().product();
    let outer: usize = s[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, inner, len);
        }
    }
}
