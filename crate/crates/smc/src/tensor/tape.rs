//! Gradient tape: forward operations are recorded in topological order and
//! replayed once, in reverse, to accumulate leaf gradients.

use rayon::prelude::*;

use super::kernels;
use super::{Elem, Tensor, TensorError};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Deliberate backward-rule corruptions for negative-control gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Scales the relu backward rule by 1.5.
    ReluBackward,
}

impl std::str::FromStr for Fault {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu-backward" => Ok(Fault::ReluBackward),
            other => Err(format!("unknown fault {other:?} (expected relu-backward)")),
        }
    }
}

enum Op<E: Elem> {
    Leaf,
    /// `a (m,k) @ b (k,n)`, or `a (m,k) @ b^T` with `b` stored `(n,k)`.
    Matmul {
        a: NodeId,
        b: NodeId,
        b_transposed: bool,
    },
    /// Row broadcast: `x (n,m) + bias (m)`.
    AddBias { x: NodeId, bias: NodeId },
    /// Channel broadcast: `x (n,c,..) + bias (c)`.
    BiasChannel { x: NodeId, bias: NodeId },
    /// Stride-1 convolution with symmetric zero padding.
    Conv2d {
        x: NodeId,
        w: NodeId,
        pad: usize,
        /// Per-sample im2col blocks, saved only while tracing gradients.
        cols: Option<Vec<E>>,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Relu { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: E },
    Reshape { x: NodeId },
    /// Log-softmax over the last (class) axis.
    LogSoftmax { x: NodeId },
    Sum { x: NodeId },
    /// Mean negative log-likelihood of hard labels, from log-probabilities.
    NllMean { logp: NodeId, labels: Vec<usize> },
    /// Mean cross-entropy against dense target rows (label smoothing path).
    SoftCeMean { logp: NodeId, targets: Tensor<E> },
    /// Mean KL(teacher || student). The teacher node is read as detached
    /// values: no gradient ever flows to it.
    KlTeacherMean { student_logp: NodeId, teacher: NodeId },
    ConcatRows { a: NodeId, b: NodeId },
    SliceRows { x: NodeId, start: usize },
}

struct Node<E: Elem> {
    value: Tensor<E>,
    op: Op<E>,
    needs_grad: bool,
}

/// Leaf gradients produced by one backward pass.
pub struct Gradients<E: Elem> {
    grads: Vec<Option<Tensor<E>>>,
    shapes: Vec<Vec<usize>>,
}

impl<E: Elem> Gradients<E> {
    /// Gradient for a node; unreachable leaves yield zeros of the right shape.
    pub fn wrt(&self, id: NodeId) -> Tensor<E> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor<E> {
        match self.grads[id.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }
}

/// A forward trace. One backward pass per trace; build a new tape per step.
pub struct Tape<E: Elem> {
    nodes: Vec<Node<E>>,
    grad_enabled: bool,
    checked: bool,
    used: bool,
    fault: Option<Fault>,
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            checked: false,
            used: false,
            fault: None,
        }
    }

    /// A tape that computes identical forward values but saves no backward
    /// state; `backward` on it is an error.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Enables NaN/Inf detection after every operation.
    pub fn checked(mut self) -> Self {
        self.checked = true;
        self
    }

    /// Installs a deliberate backward-rule fault (negative controls only).
    pub fn with_fault(mut self, fault: Fault) -> Self {
        self.fault = Some(fault);
        self
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check_id(&self, id: NodeId) -> Result<(), TensorError> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::DanglingNode { id: id.0 })
        }
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<E>,
        op: Op<E>,
        needs_grad: bool,
    ) -> Result<NodeId, TensorError> {
        if self.checked {
            value.assert_finite(op_name)?;
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A trainable leaf (parameter).
    pub fn leaf(&mut self, value: Tensor<E>) -> Result<NodeId, TensorError> {
        if self.checked {
            value.assert_finite("leaf")?;
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: self.grad_enabled,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A non-trainable leaf (input data, stored soft labels, constants).
    pub fn constant(&mut self, value: Tensor<E>) -> Result<NodeId, TensorError> {
        if self.checked {
            value.assert_finite("constant")?;
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// `a (m,k) @ b (k,n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// `a (m,k) @ b^T` with `b` stored `(n,k)`; the affine-layer orientation.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(
        &mut self,
        a: NodeId,
        b: NodeId,
        b_transposed: bool,
    ) -> Result<NodeId, TensorError> {
        self.check_id(a)?;
        self.check_id(b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ashape, bshape) = (av.shape(), bv.shape());
        let compatible = ashape.len() == 2
            && bshape.len() == 2
            && if b_transposed {
                ashape[1] == bshape[1]
            } else {
                ashape[1] == bshape[0]
            };
        if !compatible {
            return Err(TensorError::ShapeMismatch {
                op: if b_transposed { "matmul_bt" } else { "matmul" },
                lhs: ashape.to_vec(),
                rhs: bshape.to_vec(),
            });
        }
        let (m, k) = (ashape[0], ashape[1]);
        let n = if b_transposed { bshape[0] } else { bshape[1] };
        let mut out = Tensor::zeros(&[m, n]);
        kernels::gemm(
            m,
            k,
            n,
            E::ONE,
            av.data(),
            false,
            bv.data(),
            b_transposed,
            E::ZERO,
            out.data_mut(),
        );
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", out, Op::Matmul { a, b, b_transposed }, needs)
    }

    /// Row-broadcast bias add onto a 2-d tensor.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        self.check_id(x)?;
        self.check_id(bias)?;
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if xv.shape().len() != 2 || bv.shape() != [xv.shape()[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let cols = xv.shape()[1];
        let mut out = xv.clone();
        for row in out.data_mut().chunks_exact_mut(cols) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        self.push("add_bias", out, Op::AddBias { x, bias }, needs)
    }

    /// Channel-broadcast bias add: `x (n,c,..) + bias (c)`.
    pub fn bias_channel(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        self.check_id(x)?;
        self.check_id(bias)?;
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if xv.shape().len() < 2 || bv.shape() != [xv.shape()[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "bias_channel",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let c = xv.shape()[1];
        let inner: usize = xv.shape()[2..].iter().product();
        let mut out = xv.clone();
        for sample in out.data_mut().chunks_exact_mut(c * inner) {
            for (ch, plane) in sample.chunks_exact_mut(inner).enumerate() {
                let b = bv.data()[ch];
                for o in plane {
                    *o += b;
                }
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        self.push("bias_channel", out, Op::BiasChannel { x, bias }, needs)
    }

    /// Affine layer: `x (n,in) @ w^T (in,out) + bias (out)`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let y = self.matmul_bt(x, w)?;
        self.add_bias(y, bias)
    }

    /// Stride-1 conv: `x (n,c,h,w)` with kernel `w (oc,c,kh,kw)` and
    /// symmetric zero padding `pad`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, pad: usize) -> Result<NodeId, TensorError> {
        self.check_id(x)?;
        self.check_id(w)?;
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (xs, ws) = (xv.shape(), wv.shape());
        let ok = xs.len() == 4
            && ws.len() == 4
            && xs[1] == ws[1]
            && xs[2] + 2 * pad + 1 > ws[2]
            && xs[3] + 2 * pad + 1 > ws[3];
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
        let ho = kernels::conv_out_extent(h, kh, pad);
        let wo = kernels::conv_out_extent(wd, kw, pad);
        let col_rows = c * kh * kw;
        let col_len = col_rows * ho * wo;

        // Samples are independent: each task owns one output block, so the
        // result is bit-identical at any thread count.
        let mut out = Tensor::zeros(&[n, oc, ho, wo]);
        let cols = if self.grad_enabled {
            let mut cols = vec![E::ZERO; n * col_len];
            out.data_mut()
                .par_chunks_mut(oc * ho * wo)
                .zip(cols.par_chunks_mut(col_len))
                .enumerate()
                .for_each(|(s, (out_block, col))| {
                    kernels::im2col(
                        &xv.data()[s * c * h * wd..(s + 1) * c * h * wd],
                        c,
                        h,
                        wd,
                        kh,
                        kw,
                        pad,
                        col,
                    );
                    kernels::gemm(
                        oc,
                        col_rows,
                        ho * wo,
                        E::ONE,
                        wv.data(),
                        false,
                        col,
                        false,
                        E::ZERO,
                        out_block,
                    );
                });
            cols
        } else {
            out.data_mut()
                .par_chunks_mut(oc * ho * wo)
                .enumerate()
                .for_each(|(s, out_block)| {
                    let mut col = vec![E::ZERO; col_len];
                    kernels::im2col(
                        &xv.data()[s * c * h * wd..(s + 1) * c * h * wd],
                        c,
                        h,
                        wd,
                        kh,
                        kw,
                        pad,
                        &mut col,
                    );
                    kernels::gemm(
                        oc,
                        col_rows,
                        ho * wo,
                        E::ONE,
                        wv.data(),
                        false,
                        &col,
                        false,
                        E::ZERO,
                        out_block,
                    );
                });
            Vec::new()
        };
        let needs = self.needs(x) || self.needs(w);
        let saved = if self.grad_enabled && needs {
            Some(cols)
        } else {
            None
        };
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                x,
                w,
                pad,
                cols: saved,
            },
            needs,
        )
    }

    /// 2x2/stride-2 max pooling on `(n,c,h,w)`.
    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.check_id(x)?;
        let xv = &self.nodes[x.0].value;
        let xs = xv.shape();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "maxpool2",
                lhs: xs.to_vec(),
                rhs: vec![2, 2],
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut argmax = vec![0u32; n * c * ho * wo];
        out.data_mut()
            .par_chunks_mut(c * ho * wo)
            .zip(argmax.par_chunks_mut(c * ho * wo))
            .enumerate()
            .for_each(|(s, (out_block, arg_block))| {
                kernels::maxpool2(
                    &xv.data()[s * c * h * w..(s + 1) * c * h * w],
                    c,
                    h,
                    w,
                    out_block,
                    arg_block,
                );
            });
        let needs = self.needs(x);
        self.push("maxpool2", out, Op::MaxPool2 { x, argmax }, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.check_id(x)?;
        let xv = &self.nodes[x.0].value;
        let mut out = xv.clone();
        for v in out.data_mut() {
            *v = v.maximum(E::ZERO);
        }
        let needs = self.needs(x);
        self.push("relu", out, Op::Relu { x }, needs)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check_id(a)?;
        self.check_id(b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = av.clone();
        for (o, &b) in out.data_mut().iter_mut().zip(bv.data()) {
            *o += b;
        }
        let needs = self.needs(a) || self.needs(b);
        self.push("add", out, Op::Add { a, b }, needs)
    }

    /// Elementwise (Hadamard) product of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check_id(a)?;
        self.check_id(b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = av.clone();
        for (o, &b) in out.data_mut().iter_mut().zip(bv.data()) {
            *o = *o * b;
        }
        let needs = self.needs(a) || self.needs(b);
        self.push("mul", out, Op::Mul { a, b }, needs)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId, TensorError> {
        self.check_id(x)?;
        let factor = E::from_f64(factor);
        let xv = &self.nodes[x.0].value;
        let mut out = xv.clone();
        for v in out.data_mut() {
            *v = *v * factor;
        }
        let needs = self.needs(x);
        self.push("scale", out, Op::Scale { x, factor }, needs)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        self.check_id(x)?;
        let out = self.nodes[x.0].value.clone().reshaped(shape)?;
        let needs = self.needs(x);
        self.push("reshape", out, Op::Reshape { x }, needs)
    }

    /// Collapses all axes after the first into one: `(n, ...) -> (n, prod)`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.check_id(x)?;
        let xs = self.nodes[x.0].value.shape();
        if xs.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "flatten",
                lhs: xs.to_vec(),
                rhs: vec![],
            });
        }
        let n = xs[0];
        let rest: usize = xs[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Log-softmax over the last (class) axis.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.check_id(x)?;
        let xv = &self.nodes[x.0].value;
        let xs = xv.shape();
        if xs.is_empty() || *xs.last().unwrap() == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "log_softmax",
                lhs: xs.to_vec(),
                rhs: vec![],
            });
        }
        let cols = *xs.last().unwrap();
        let mut out = Tensor::zeros(xs);
        kernels::log_softmax_rows(xv.data(), cols, out.data_mut());
        let needs = self.needs(x);
        self.push("log_softmax", out, Op::LogSoftmax { x }, needs)
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.check_id(x)?;
        let mut acc = E::ZERO;
        for &v in self.nodes[x.0].value.data() {
            acc += v;
        }
        let needs = self.needs(x);
        self.push("sum", Tensor::scalar(acc), Op::Sum { x }, needs)
    }

    /// Mean negative log-likelihood `-(1/n) sum_i logp[i, y_i]`.
    pub fn nll_mean(&mut self, logp: NodeId, labels: &[usize]) -> Result<NodeId, TensorError> {
        self.check_id(logp)?;
        let lv = &self.nodes[logp.0].value;
        let ls = lv.shape();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "nll_mean",
                lhs: ls.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let classes = ls[1];
        let n = ls[0];
        let mut acc = E::ZERO;
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(TensorError::LabelOutOfRange { label: y, classes });
            }
            acc += lv.data()[i * classes + y];
        }
        let value = Tensor::scalar(-acc * E::from_f64(1.0 / n as f64));
        let needs = self.needs(logp);
        self.push(
            "nll_mean",
            value,
            Op::NllMean {
                logp,
                labels: labels.to_vec(),
            },
            needs,
        )
    }

    /// Mean cross-entropy against dense target rows.
    pub fn soft_ce_mean(&mut self, logp: NodeId, targets: Tensor<E>) -> Result<NodeId, TensorError> {
        self.check_id(logp)?;
        let lv = &self.nodes[logp.0].value;
        if lv.shape().len() != 2 || lv.shape() != targets.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "soft_ce_mean",
                lhs: lv.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let n = lv.shape()[0];
        let mut acc = E::ZERO;
        for (&t, &lp) in targets.data().iter().zip(lv.data()) {
            acc += t * lp;
        }
        let value = Tensor::scalar(-acc * E::from_f64(1.0 / n as f64));
        let needs = self.needs(logp);
        self.push("soft_ce_mean", value, Op::SoftCeMean { logp, targets }, needs)
    }

    /// Mean `KL(teacher || student)` over rows, with `0 ln 0 := 0`.
    ///
    /// `teacher` holds probability rows and is treated as detached: the
    /// backward pass writes gradient only through `student_logp`.
    pub fn kl_teacher_mean(
        &mut self,
        student_logp: NodeId,
        teacher: NodeId,
    ) -> Result<NodeId, TensorError> {
        self.check_id(student_logp)?;
        self.check_id(teacher)?;
        let (sv, tv) = (
            &self.nodes[student_logp.0].value,
            &self.nodes[teacher.0].value,
        );
        if sv.shape().len() != 2 || sv.shape() != tv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "kl_teacher_mean",
                lhs: tv.shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        let n = sv.shape()[0];
        let mut acc = E::ZERO;
        for (&t, &lp) in tv.data().iter().zip(sv.data()) {
            if t > E::ZERO {
                acc += t * (t.ln() - lp);
            }
        }
        let value = Tensor::scalar(acc * E::from_f64(1.0 / n as f64));
        // Gradient intentionally flows only through the student side.
        let needs = self.needs(student_logp);
        self.push(
            "kl_teacher_mean",
            value,
            Op::KlTeacherMean {
                student_logp,
                teacher,
            },
            needs,
        )
    }

    /// Concatenation along axis 0.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check_id(a)?;
        self.check_id(b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ashape, bshape) = (av.shape(), bv.shape());
        if ashape.is_empty() || bshape.len() != ashape.len() || ashape[1..] != bshape[1..] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                lhs: ashape.to_vec(),
                rhs: bshape.to_vec(),
            });
        }
        let mut shape = ashape.to_vec();
        shape[0] += bshape[0];
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let out = Tensor::from_vec(&shape, data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push("concat_rows", out, Op::ConcatRows { a, b }, needs)
    }

    /// Contiguous slice `[start, start+len)` along axis 0.
    pub fn slice_rows(
        &mut self,
        x: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        self.check_id(x)?;
        let xv = &self.nodes[x.0].value;
        let xs = xv.shape();
        if xs.is_empty() || start + len > xs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "slice_rows",
                lhs: xs.to_vec(),
                rhs: vec![start, len],
            });
        }
        let inner: usize = xs[1..].iter().product();
        let mut shape = xs.to_vec();
        shape[0] = len;
        let data = xv.data()[start * inner..(start + len) * inner].to_vec();
        let out = Tensor::from_vec(&shape, data)?;
        let needs = self.needs(x);
        self.push("slice_rows", out, Op::SliceRows { x, start }, needs)
    }

    /// Distance of this trace from the nearest relu/maxpool nondifferentiable
    /// point: the minimum over relu input magnitudes and max-pool
    /// first-vs-second gaps. Finite-difference checks demand a healthy margin
    /// here, so samplers retry until it clears their threshold.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for &v in self.nodes[x.0].value.data() {
                        margin = margin.min(v.to_f64().abs());
                    }
                }
                Op::MaxPool2 { x, .. } => {
                    let xv = &self.nodes[x.0].value;
                    let xs = xv.shape();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    for s in 0..n {
                        for ch in 0..c {
                            let plane = &xv.data()[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                            for oy in 0..h / 2 {
                                for ox in 0..w / 2 {
                                    let base = oy * 2 * w + ox * 2;
                                    let mut vals = [
                                        plane[base].to_f64(),
                                        plane[base + 1].to_f64(),
                                        plane[base + w].to_f64(),
                                        plane[base + w + 1].to_f64(),
                                    ];
                                    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                                    margin = margin.min(vals[0] - vals[1]);
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse pass from a scalar loss node. Consumes the trace: a second
    /// call errors, and inference tapes reject it outright.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<E>, TensorError> {
        if !self.grad_enabled {
            return Err(TensorError::GradDisabled);
        }
        if self.used {
            return Err(TensorError::BackwardReplayed);
        }
        self.check_id(loss)?;
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        self.used = true;

        let shapes: Vec<Vec<usize>> = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(&shapes[loss.0], E::ONE));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &gout, &mut grads);
        }

        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<E>>], id: NodeId, contribution: Tensor<E>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                    *e += *c;
                }
            }
            slot => *slot = Some(contribution),
        }
    }

    fn backprop_node(&self, id: usize, gout: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b, b_transposed } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = gout.shape()[1];
                if self.needs(*a) {
                    // dA = dC @ B^T, or dC @ B when b was transposed.
                    let mut da = Tensor::zeros(av.shape());
                    kernels::gemm(
                        m,
                        n,
                        k,
                        E::ONE,
                        gout.data(),
                        false,
                        bv.data(),
                        !b_transposed,
                        E::ZERO,
                        da.data_mut(),
                    );
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(bv.shape());
                    if *b_transposed {
                        // C = A @ B^T with B (n,k): dB = dC^T @ A.
                        kernels::gemm(
                            n,
                            m,
                            k,
                            E::ONE,
                            gout.data(),
                            true,
                            av.data(),
                            false,
                            E::ZERO,
                            db.data_mut(),
                        );
                    } else {
                        // dB = A^T @ dC.
                        kernels::gemm(
                            k,
                            m,
                            n,
                            E::ONE,
                            av.data(),
                            true,
                            gout.data(),
                            false,
                            E::ZERO,
                            db.data_mut(),
                        );
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddBias { x, bias } => {
                if self.needs(*x) {
                    self.accumulate(grads, *x, gout.clone());
                }
                if self.needs(*bias) {
                    let cols = gout.shape()[1];
                    let mut db = Tensor::zeros(&[cols]);
                    for row in gout.data().chunks_exact(cols) {
                        for (d, &g) in db.data_mut().iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::BiasChannel { x, bias } => {
                if self.needs(*x) {
                    self.accumulate(grads, *x, gout.clone());
                }
                if self.needs(*bias) {
                    let c = gout.shape()[1];
                    let inner: usize = gout.shape()[2..].iter().product();
                    let mut db = Tensor::zeros(&[c]);
                    for sample in gout.data().chunks_exact(c * inner) {
                        for (ch, plane) in sample.chunks_exact(inner).enumerate() {
                            let mut acc = E::ZERO;
                            for &g in plane {
                                acc += g;
                            }
                            db.data_mut()[ch] += acc;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Conv2d { x, w, pad, cols } => {
                let cols = cols
                    .as_ref()
                    .expect("conv2d backward requires saved im2col state");
                let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let xs = xv.shape();
                let ws = wv.shape();
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
                let ho = kernels::conv_out_extent(h, kh, *pad);
                let wo = kernels::conv_out_extent(wd, kw, *pad);
                let col_rows = c * kh * kw;
                let col_len = col_rows * ho * wo;
                if self.needs(*w) {
                    let mut dw = Tensor::zeros(ws);
                    for s in 0..n {
                        // dW += dY_s @ col_s^T, accumulated sample by sample.
                        kernels::gemm(
                            oc,
                            ho * wo,
                            col_rows,
                            E::ONE,
                            &gout.data()[s * oc * ho * wo..(s + 1) * oc * ho * wo],
                            false,
                            &cols[s * col_len..(s + 1) * col_len],
                            true,
                            E::ONE,
                            dw.data_mut(),
                        );
                    }
                    self.accumulate(grads, *w, dw);
                }
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(xs);
                    dx.data_mut()
                        .par_chunks_mut(c * h * wd)
                        .enumerate()
                        .for_each(|(s, dx_block)| {
                            let mut dcol = vec![E::ZERO; col_len];
                            kernels::gemm(
                                col_rows,
                                oc,
                                ho * wo,
                                E::ONE,
                                wv.data(),
                                true,
                                &gout.data()[s * oc * ho * wo..(s + 1) * oc * ho * wo],
                                false,
                                E::ZERO,
                                &mut dcol,
                            );
                            kernels::col2im_add(&dcol, c, h, wd, kh, kw, *pad, dx_block);
                        });
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if !self.needs(*x) {
                    return;
                }
                let xs = self.nodes[x.0].value.shape();
                let sample = xs[1] * xs[2] * xs[3];
                let per_out = gout.numel() / xs[0];
                let mut dx = Tensor::zeros(xs);
                for s in 0..xs[0] {
                    let base = s * sample;
                    for (o, &arg) in argmax[s * per_out..(s + 1) * per_out].iter().enumerate() {
                        dx.data_mut()[base + arg as usize] += gout.data()[s * per_out + o];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Relu { x } => {
                if !self.needs(*x) {
                    return;
                }
                let fault = if self.fault == Some(Fault::ReluBackward) {
                    E::from_f64(1.5)
                } else {
                    E::ONE
                };
                let xv = &self.nodes[x.0].value;
                let mut dx = Tensor::zeros(xv.shape());
                for ((d, &v), &g) in dx.data_mut().iter_mut().zip(xv.data()).zip(gout.data()) {
                    if v > E::ZERO {
                        *d = g * fault;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, gout.clone());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, gout.clone());
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.needs(*a) {
                    let mut da = gout.clone();
                    for (d, &v) in da.data_mut().iter_mut().zip(bv.data()) {
                        *d = *d * v;
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = gout.clone();
                    for (d, &v) in db.data_mut().iter_mut().zip(av.data()) {
                        *d = *d * v;
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale { x, factor } => {
                if !self.needs(*x) {
                    return;
                }
                let mut dx = gout.clone();
                for d in dx.data_mut() {
                    *d = *d * *factor;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape { x } => {
                if !self.needs(*x) {
                    return;
                }
                let shape = self.nodes[x.0].value.shape().to_vec();
                let dx = gout.clone().reshaped(&shape).expect("reshape backward");
                self.accumulate(grads, *x, dx);
            }
            Op::LogSoftmax { x } => {
                if !self.needs(*x) {
                    return;
                }
                let out = &self.nodes[id].value;
                let cols = *out.shape().last().unwrap();
                let mut dx = Tensor::zeros(out.shape());
                for ((drow, orow), grow) in dx
                    .data_mut()
                    .chunks_exact_mut(cols)
                    .zip(out.data().chunks_exact(cols))
                    .zip(gout.data().chunks_exact(cols))
                {
                    let mut gsum = E::ZERO;
                    for &g in grow {
                        gsum += g;
                    }
                    for ((d, &o), &g) in drow.iter_mut().zip(orow).zip(grow) {
                        *d = g - o.exp() * gsum;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum { x } => {
                if !self.needs(*x) {
                    return;
                }
                let shape = self.nodes[x.0].value.shape();
                self.accumulate(grads, *x, Tensor::filled(shape, gout.item()));
            }
            Op::NllMean { logp, labels } => {
                if !self.needs(*logp) {
                    return;
                }
                let shape = self.nodes[logp.0].value.shape();
                let classes = shape[1];
                let scale = -gout.item() * E::from_f64(1.0 / labels.len() as f64);
                let mut dl = Tensor::zeros(shape);
                for (i, &y) in labels.iter().enumerate() {
                    dl.data_mut()[i * classes + y] = scale;
                }
                self.accumulate(grads, *logp, dl);
            }
            Op::SoftCeMean { logp, targets } => {
                if !self.needs(*logp) {
                    return;
                }
                let n = targets.shape()[0];
                let scale = -gout.item() * E::from_f64(1.0 / n as f64);
                let mut dl = Tensor::zeros(targets.shape());
                for (d, &t) in dl.data_mut().iter_mut().zip(targets.data()) {
                    *d = scale * t;
                }
                self.accumulate(grads, *logp, dl);
            }
            Op::KlTeacherMean {
                student_logp,
                teacher,
            } => {
                if !self.needs(*student_logp) {
                    return;
                }
                let tv = &self.nodes[teacher.0].value;
                let n = tv.shape()[0];
                let scale = -gout.item() * E::from_f64(1.0 / n as f64);
                let mut dl = Tensor::zeros(tv.shape());
                for (d, &t) in dl.data_mut().iter_mut().zip(tv.data()) {
                    *d = scale * t;
                }
                self.accumulate(grads, *student_logp, dl);
            }
            Op::ConcatRows { a, b } => {
                let an = self.nodes[a.0].value.numel();
                if self.needs(*a) {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let da = Tensor::from_vec(&shape, gout.data()[..an].to_vec()).unwrap();
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let shape = self.nodes[b.0].value.shape().to_vec();
                    let db = Tensor::from_vec(&shape, gout.data()[an..].to_vec()).unwrap();
                    self.accumulate(grads, *b, db);
                }
            }
            Op::SliceRows { x, start } => {
                if !self.needs(*x) {
                    return;
                }
                let xs = self.nodes[x.0].value.shape();
                let inner: usize = xs[1..].iter().product();
                let mut dx = Tensor::zeros(xs);
                let off = start * inner;
                for (d, &g) in dx.data_mut()[off..off + gout.numel()]
                    .iter_mut()
                    .zip(gout.data())
                {
                    *d = g;
                }
                self.accumulate(grads, *x, dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, vals.to_vec()).unwrap()
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(tensor(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let w = tape.leaf(tensor(&[2, 2], &[1.0, -2.0, 3.0, 0.5])).unwrap();
        let loss = tape.sum(w).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(tensor(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn conv_all_ones_kernel_sums_input() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let x = tape.constant(tensor(&[1, 1, 3, 3], &vals)).unwrap();
        let w = tape.constant(Tensor::filled(&[1, 1, 3, 3], 1.0)).unwrap();
        let y = tape.conv2d(x, w, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).item(), 45.0);
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(tensor(&[2], &[1.0, 2.0])).unwrap();
        let unused = tape.leaf(tensor(&[3], &[5.0, 6.0, 7.0])).unwrap();
        let loss = tape.sum(w).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_replay() {
        let mut tape = Tape::new();
        let w = tape.leaf(tensor(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(
            tape.backward(w),
            Err(TensorError::NonScalarLoss { .. })
        ));
        let loss = tape.sum(w).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(
            tape.backward(loss),
            Err(TensorError::BackwardReplayed)
        ));
    }

    #[test]
    fn backward_rejects_dangling_node() {
        let mut tape: Tape<f64> = Tape::new();
        assert!(matches!(
            tape.backward(NodeId(99)),
            Err(TensorError::DanglingNode { id: 99 })
        ));
    }

    #[test]
    fn inference_tape_rejects_backward() {
        let mut tape = Tape::inference();
        let w = tape.leaf(tensor(&[1], &[2.0])).unwrap();
        let loss = tape.sum(w).unwrap();
        assert!(matches!(
            tape.backward(loss),
            Err(TensorError::GradDisabled)
        ));
    }

    #[test]
    fn inference_matches_training_forward() {
        let vals: Vec<f64> = (0..16).map(|v| v as f64 * 0.3 - 2.0).collect();
        let run = |mut tape: Tape<f64>| {
            let x = tape.constant(tensor(&[1, 1, 4, 4], &vals)).unwrap();
            let w = tape
                .leaf(tensor(&[1, 1, 3, 3], &[0.1, -0.2, 0.3, 0.0, 0.5, -0.5, 0.7, 0.9, -1.0]))
                .unwrap();
            let y = tape.conv2d(x, w, 1).unwrap();
            let p = tape.maxpool2(y).unwrap();
            let r = tape.relu(p).unwrap();
            tape.value(r).clone()
        };
        assert_eq!(run(Tape::new()), run(Tape::inference()));
    }

    #[test]
    fn checked_mode_flags_non_finite() {
        let mut tape = Tape::new().checked();
        let x = tape.constant(tensor(&[1], &[1e308])).unwrap();
        // 1e308 + 1e308 overflows to inf.
        assert!(matches!(
            tape.add(x, x),
            Err(TensorError::NonFinite { op: "add" })
        ));
        assert!(matches!(
            Tape::new().checked().constant(tensor(&[1], &[f64::NAN])),
            Err(TensorError::NonFinite { op: "constant" })
        ));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[4, 5])).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 5]"));
    }

    #[test]
    fn nll_rejects_out_of_range_label() {
        let mut tape: Tape<f64> = Tape::new();
        let lp = tape.constant(Tensor::zeros(&[1, 3])).unwrap();
        assert!(matches!(
            tape.nll_mean(lp, &[3]),
            Err(TensorError::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn kl_teacher_gets_no_gradient() {
        let mut tape = Tape::new();
        let teacher = tape.leaf(tensor(&[1, 2], &[0.75, 0.25])).unwrap();
        let logits = tape.leaf(tensor(&[1, 2], &[0.3, -0.1])).unwrap();
        let logp = tape.log_softmax(logits).unwrap();
        let kl = tape.kl_teacher_mean(logp, teacher).unwrap();
        let grads = tape.backward(kl).unwrap();
        assert_eq!(grads.wrt(teacher).data(), &[0.0, 0.0]);
        assert!(grads.wrt(logits).data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn concat_slice_roundtrip_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(tensor(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.leaf(tensor(&[1, 2], &[5.0, 6.0])).unwrap();
        let cat = tape.concat_rows(a, b).unwrap();
        assert_eq!(tape.shape(cat), &[3, 2]);
        let tail = tape.slice_rows(cat, 1, 2).unwrap();
        let loss = tape.sum(tail).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(a).data(), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(grads.wrt(b).data(), &[1.0, 1.0]);
    }
}
