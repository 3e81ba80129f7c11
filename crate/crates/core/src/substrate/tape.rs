//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Every operation is evaluated eagerly when it is recorded; the tape keeps
//! the result together with enough context to run the adjoint later.
//! Handles ([`Var`]) are plain indices, so they are `Copy` and cheap to pass
//! around while building a model.
//!
//! ```
//! use wedepth_core::substrate::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.var(Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0]);
//! ```

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use super::kernels::{self, ConvGeom, PadMode, Tap};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean attend/block matrix for attention; `true` means the query row
/// may attend to the key column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != rows * cols {
            return Err(Error::shape(
                "mask",
                format!("{rows}x{cols} mask needs {} entries, got {}", rows * cols, allow.len()),
            ));
        }
        Ok(Self { rows, cols, allow })
    }

    pub fn all(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allow: vec![true; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.allow[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.allow[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Scale(Var, T),
    Shift(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: T,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Resize {
        x: Var,
        ys: Vec<Tap>,
        xs: Vec<Tap>,
    },
    Gather(Var, Arc<Vec<usize>>),
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    tracked: bool,
}

/// Records operations and runs reverse-mode accumulation.
///
/// A tape is single-writer (interior mutability, not `Sync`); independent
/// tapes can run on separate threads.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<BTreeMap<Var, Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A gradient-tracked leaf.
    pub fn var(&self, t: Tensor<T>) -> Var {
        self.leaf(Arc::new(t), true)
    }

    /// An untracked leaf; it never appears in the gradient map.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.leaf(Arc::new(t), false)
    }

    pub fn leaf(&self, t: Arc<Tensor<T>>, tracked: bool) -> Var {
        self.push_node(t, Op::Leaf, tracked)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].tracked
    }

    /// Accumulated gradient of a tracked leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads.borrow().get(&v).cloned()
    }

    pub fn take_grads(&self) -> BTreeMap<Var, Tensor<T>> {
        std::mem::take(&mut *self.grads.borrow_mut())
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    fn push_node(&self, value: Arc<Tensor<T>>, op: Op<T>, tracked: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var(nodes.len() - 1)
    }

    fn push(&self, op_name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let tracked = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].tracked)
        };
        Ok(self.push_node(Arc::new(value), op, tracked))
    }

    fn binary_same(&self, op: &'static str, a: Var, b: Var) -> Result<(Arc<Tensor<T>>, Arc<Tensor<T>>)> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(op, va.shape(), vb.shape()));
        }
        Ok((va, vb))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = self.binary_same("add", a, b)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        self.push("add", Tensor::raw(va.shape().to_vec(), data), Op::Add(a, b), &[a, b])
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = self.binary_same("sub", a, b)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        self.push("sub", Tensor::raw(va.shape().to_vec(), data), Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = self.binary_same("mul", a, b)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        self.push("mul", Tensor::raw(va.shape().to_vec(), data), Op::Mul(a, b), &[a, b])
    }

    /// `x[..., j] + bias[j]` for a rank-1 `bias` matching the last extent.
    pub fn add_row_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let n = *vx.shape().last().unwrap_or(&1);
        if vb.shape() != [n] {
            return Err(Error::dim("add_row_bias", vx.shape(), vb.shape()));
        }
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb.data()[i % n])
            .collect();
        self.push(
            "add_row_bias",
            Tensor::raw(vx.shape().to_vec(), data),
            Op::AddRowBias(x, bias),
            &[x, bias],
        )
    }

    /// `x[c, h, w] + bias[c]`.
    pub fn add_channel_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vx.rank() != 3 || vb.shape() != [vx.shape()[0]] {
            return Err(Error::dim("add_channel_bias", vx.shape(), vb.shape()));
        }
        let plane = vx.shape()[1] * vx.shape()[2];
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb.data()[i / plane])
            .collect();
        self.push(
            "add_channel_bias",
            Tensor::raw(vx.shape().to_vec(), data),
            Op::AddChannelBias(x, bias),
            &[x, bias],
        )
    }

    pub fn scale(&self, x: Var, s: T) -> Result<Var> {
        let vx = self.value(x);
        self.push("scale", vx.map(|v| v * s), Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&self, x: Var, s: T) -> Result<Var> {
        let vx = self.value(x);
        self.push("add_scalar", vx.map(|v| v + s), Op::Shift(x), &[x])
    }

    /// Matrix product of rank-2 or rank-3 operands. A rank-3 operand carries
    /// a leading batch extent; a rank-2 operand broadcasts across it.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (ba, m, k) = mat_dims(va.shape()).ok_or_else(|| Error::dim("matmul", va.shape(), vb.shape()))?;
        let (bb, k2, n) = mat_dims(vb.shape()).ok_or_else(|| Error::dim("matmul", va.shape(), vb.shape()))?;
        if k != k2 || (ba != bb && ba != 1 && bb != 1) {
            return Err(Error::dim("matmul", va.shape(), vb.shape()));
        }
        let batch = ba.max(bb);
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let ao = if ba == 1 { 0 } else { i * m * k };
            let bo = if bb == 1 { 0 } else { i * k * n };
            kernels::gemm(
                m,
                k,
                n,
                &va.data()[ao..ao + m * k],
                false,
                &vb.data()[bo..bo + k * n],
                false,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let shape = if va.rank() == 3 || vb.rank() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        self.push("matmul", Tensor::raw(shape, out), Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 2 {
            return Err(Error::shape("transpose", format!("rank-2 input required, got {:?}", vx.shape())));
        }
        let (r, c) = (vx.shape()[0], vx.shape()[1]);
        let out = transpose2(vx.data(), r, c);
        self.push("transpose", Tensor::raw(vec![c, r], out), Op::Transpose(x), &[x])
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let out = vx.reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Concatenates along the first axis; trailing extents must agree.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat_rows of zero tensors".into()))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let vp = self.value(p);
            if vp.rank() == 0 || vp.shape()[1..] != tail[..] {
                return Err(Error::dim("concat_rows", &self.value(*first).shape().to_vec(), vp.shape()));
            }
            rows += vp.shape()[0];
            data.extend_from_slice(vp.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        self.push("concat_rows", Tensor::raw(shape, data), Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Rows `start..end` along the first axis.
    pub fn slice_rows(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() == 0 || start >= end || end > vx.shape()[0] {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{end} out of {:?}", vx.shape()),
            ));
        }
        let row: usize = vx.shape()[1..].iter().product();
        let mut shape = vx.shape().to_vec();
        shape[0] = end - start;
        let data = vx.data()[start * row..end * row].to_vec();
        self.push("slice_rows", Tensor::raw(shape, data), Op::SliceRows(x, start), &[x])
    }

    /// Cross-correlation of `x` (`C_in×H×W`) with `kernel`
    /// (`C_out×C_in×k×k`).
    pub fn conv2d(&self, x: Var, kernel: Var, stride: usize, pad: usize, mode: PadMode) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(kernel));
        if vx.rank() != 3 || vw.rank() != 4 || vw.shape()[1] != vx.shape()[0] || vw.shape()[2] != vw.shape()[3] {
            return Err(Error::dim("conv2d", vx.shape(), vw.shape()));
        }
        let (c_in, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (c_out, k) = (vw.shape()[0], vw.shape()[2]);
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::dim("conv2d", vx.shape(), vw.shape()));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            mode,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let col = kernels::im2col(vx.data(), &geom);
        let mut out = vec![T::zero(); c_out * oh * ow];
        kernels::gemm(c_out, c_in * k * k, oh * ow, vw.data(), false, &col, false, T::zero(), &mut out);
        self.push(
            "conv2d",
            Tensor::raw(vec![c_out, oh, ow], out),
            Op::Conv2d { x, w: kernel, geom },
            &[x, kernel],
        )
    }

    /// Per-sample normalization over all of `C×H×W`, followed by a
    /// per-channel affine map.
    pub fn group_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vx.rank() != 3 || vg.shape() != [vx.shape()[0]] || vb.shape() != vg.shape() {
            return Err(Error::dim("group_norm", vx.shape(), vg.shape()));
        }
        let (xhat, rstd) = kernels::layer_norm_rows(vx.data(), vx.numel());
        let plane = vx.shape()[1] * vx.shape()[2];
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * vg.data()[i / plane] + vb.data()[i / plane])
            .collect();
        self.push(
            "group_norm",
            Tensor::raw(vx.shape().to_vec(), out),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd: rstd[0],
            },
            &[x, gamma, beta],
        )
    }

    /// Normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let (vg, vb) = (self.value(gamma), self.value(beta));
        let n = *vx.shape().last().unwrap_or(&1);
        if vg.shape() != [n] || vb.shape() != [n] {
            return Err(Error::dim("layer_norm", vx.shape(), vg.shape()));
        }
        let (xhat, rstd) = kernels::layer_norm_rows(vx.data(), n);
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * vg.data()[i % n] + vb.data()[i % n])
            .collect();
        self.push(
            "layer_norm",
            Tensor::raw(vx.shape().to_vec(), out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub fn gelu(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        self.push("gelu", vx.map(kernels::gelu), Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        self.push("sigmoid", vx.map(kernels::sigmoid), Op::Sigmoid(x), &[x])
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        self.push("exp", vx.map(|v| v.exp()), Op::Exp(x), &[x])
    }

    pub fn ln(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::Numeric("ln of a non-positive value".into()));
        }
        self.push("ln", vx.map(|v| v.ln()), Op::Ln(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if !vx.all_finite() {
            return Err(Error::Numeric("softmax of non-finite input".into()));
        }
        let n = *vx.shape().last().unwrap_or(&1);
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(n) {
            kernels::softmax_row(row, None);
        }
        self.push("softmax", Tensor::raw(vx.shape().to_vec(), out), Op::Softmax(x), &[x])
    }

    /// Multi-head scaled dot-product attention over projected `q` (`Mq×D`),
    /// `k` and `v` (`Mk×D`). Blocked logits are excluded before the softmax.
    /// Returns the heads concatenated back to `Mq×D`.
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&AttnMask>) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        if vq.rank() != 2 || vk.rank() != 2 || vq.shape()[1] != vk.shape()[1] {
            return Err(Error::dim("attention", vq.shape(), vk.shape()));
        }
        if vk.shape() != vv.shape() {
            return Err(Error::dim("attention", vk.shape(), vv.shape()));
        }
        let (mq, d) = (vq.shape()[0], vq.shape()[1]);
        let mk = vk.shape()[0];
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        if let Some(m) = mask {
            if m.rows() != mq || m.cols() != mk {
                return Err(Error::dim("attention mask", &[m.rows(), m.cols()], &[mq, mk]));
            }
            if let Some(r) = (0..mq).find(|&r| !m.row(r).iter().any(|&a| a)) {
                return Err(Error::Config(format!("attention mask blocks every key for query row {r}")));
            }
        }
        let (out, probs) = kernels::attention_forward(
            vq.data(),
            vk.data(),
            vv.data(),
            mq,
            mk,
            d,
            heads,
            mask.map(|m| m.as_slice()),
        );
        self.push(
            "attention",
            Tensor::raw(vec![mq, d], out),
            Op::Attention { q, k, v, heads, probs },
            &[q, k, v],
        )
    }

    /// Corner-aligned bilinear resampling of a `C×H×W` map.
    pub fn resize(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 3 || out_h == 0 || out_w == 0 {
            return Err(Error::shape(
                "bilinear_resize",
                format!("{:?} -> {out_h}x{out_w}", vx.shape()),
            ));
        }
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let ys = kernels::resize_taps(h, out_h);
        let xs = kernels::resize_taps(w, out_w);
        let out = kernels::resize_forward(vx.data(), c, h, w, &ys, &xs);
        self.push(
            "bilinear_resize",
            Tensor::raw(vec![c, out_h, out_w], out),
            Op::Resize { x, ys, xs },
            &[x],
        )
    }

    /// Flat-index selection into a rank-1 result.
    pub fn gather(&self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let vx = self.value(x);
        if idx.is_empty() {
            return Err(Error::Usage("gather with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= vx.numel()) {
            return Err(Error::shape("gather", format!("index {bad} out of {} elements", vx.numel())));
        }
        let data = idx.iter().map(|&i| vx.data()[i]).collect();
        self.push("gather", Tensor::raw(vec![idx.len()], data), Op::Gather(x, idx), &[x])
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.data().iter().fold(T::zero(), |a, &b| a + b);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.data().iter().fold(T::zero(), |a, &b| a + b) / T::of(vx.numel() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Runs reverse accumulation from a one-element `loss`, adding the
    /// result into the gradient buffers of every tracked leaf. Calling it
    /// again without [`Tape::zero_grad`] accumulates additively.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.tracked {
            return Ok(());
        }
        let mut adj: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::ones(root.value.shape()));
        let mut leaf_grads = self.grads.borrow_mut();

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            if !node.tracked {
                continue;
            }
            let need = |v: Var| nodes[v.0].tracked;
            let val = |v: Var| nodes[v.0].value.clone();
            let mut send = |v: Var, t: Tensor<T>| {
                if !need(v) {
                    return;
                }
                match &mut adj[v.0] {
                    Some(acc) => acc.add_assign(&t).expect("adjoint shape"),
                    slot => *slot = Some(t),
                }
            };
            let shape = node.value.shape().to_vec();
            match &node.op {
                Op::Leaf => match leaf_grads.get_mut(&Var(i)) {
                    Some(acc) => acc.add_assign(&g)?,
                    None => {
                        leaf_grads.insert(Var(i), g);
                    }
                },
                Op::Add(a, b) => {
                    if need(*b) {
                        send(*b, g.clone());
                    }
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    if need(*b) {
                        send(*b, g.map(|v| -v));
                    }
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if need(*a) {
                        send(*a, zip(&g, &vb, |x, y| x * y));
                    }
                    if need(*b) {
                        send(*b, zip(&g, &va, |x, y| x * y));
                    }
                }
                Op::AddRowBias(x, b) => {
                    if need(*b) {
                        let n = val(*b).numel();
                        let mut db = vec![T::zero(); n];
                        for (j, &v) in g.data().iter().enumerate() {
                            db[j % n] = db[j % n] + v;
                        }
                        send(*b, Tensor::raw(vec![n], db));
                    }
                    send(*x, g);
                }
                Op::AddChannelBias(x, b) => {
                    if need(*b) {
                        let c = shape[0];
                        let plane = shape[1] * shape[2];
                        let db = (0..c)
                            .map(|ch| g.data()[ch * plane..(ch + 1) * plane].iter().fold(T::zero(), |a, &v| a + v))
                            .collect();
                        send(*b, Tensor::raw(vec![c], db));
                    }
                    send(*x, g);
                }
                Op::Scale(x, s) => send(*x, g.map(|v| v * *s)),
                Op::Shift(x) => send(*x, g),
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (ba, m, k) = mat_dims(va.shape()).expect("matmul lhs");
                    let (bb, _, n) = mat_dims(vb.shape()).expect("matmul rhs");
                    let batch = ba.max(bb);
                    if need(*a) {
                        let mut da = vec![T::zero(); ba * m * k];
                        for i in 0..batch {
                            let ao = if ba == 1 { 0 } else { i * m * k };
                            let bo = if bb == 1 { 0 } else { i * k * n };
                            kernels::gemm(
                                m,
                                n,
                                k,
                                &g.data()[i * m * n..(i + 1) * m * n],
                                false,
                                &vb.data()[bo..bo + k * n],
                                true,
                                T::one(),
                                &mut da[ao..ao + m * k],
                            );
                        }
                        send(*a, Tensor::raw(va.shape().to_vec(), da));
                    }
                    if need(*b) {
                        let mut db = vec![T::zero(); bb * k * n];
                        for i in 0..batch {
                            let ao = if ba == 1 { 0 } else { i * m * k };
                            let bo = if bb == 1 { 0 } else { i * k * n };
                            kernels::gemm(
                                k,
                                m,
                                n,
                                &va.data()[ao..ao + m * k],
                                true,
                                &g.data()[i * m * n..(i + 1) * m * n],
                                false,
                                T::one(),
                                &mut db[bo..bo + k * n],
                            );
                        }
                        send(*b, Tensor::raw(vb.shape().to_vec(), db));
                    }
                }
                Op::Transpose(x) => {
                    let (r, c) = (shape[0], shape[1]);
                    send(*x, Tensor::raw(vec![c, r], transpose2(g.data(), r, c)));
                }
                Op::Reshape(x) => {
                    let s = val(*x).shape().to_vec();
                    send(*x, Tensor::raw(s, g.into_data()));
                }
                Op::ConcatRows(parts) => {
                    let row: usize = shape[1..].iter().product();
                    let mut off = 0;
                    for &p in parts {
                        let vp = val(p);
                        let len = vp.shape()[0] * row;
                        if need(p) {
                            send(p, Tensor::raw(vp.shape().to_vec(), g.data()[off..off + len].to_vec()));
                        }
                        off += len;
                    }
                }
                Op::SliceRows(x, start) => {
                    let vx = val(*x);
                    let row: usize = vx.shape()[1..].iter().product();
                    let mut dx = vec![T::zero(); vx.numel()];
                    dx[start * row..start * row + g.numel()].copy_from_slice(g.data());
                    send(*x, Tensor::raw(vx.shape().to_vec(), dx));
                }
                Op::Conv2d { x, w, geom } => {
                    let (vx, vw) = (val(*x), val(*w));
                    let c_out = vw.shape()[0];
                    let kk = geom.c_in * geom.k * geom.k;
                    let cols = geom.out_h() * geom.out_w();
                    if need(*w) {
                        let col = kernels::im2col(vx.data(), geom);
                        let mut dw = vec![T::zero(); c_out * kk];
                        kernels::gemm(c_out, cols, kk, g.data(), false, &col, true, T::zero(), &mut dw);
                        send(*w, Tensor::raw(vw.shape().to_vec(), dw));
                    }
                    if need(*x) {
                        let mut dcol = vec![T::zero(); kk * cols];
                        kernels::gemm(kk, c_out, cols, vw.data(), true, g.data(), false, T::zero(), &mut dcol);
                        let mut dx = vec![T::zero(); vx.numel()];
                        kernels::col2im(&dcol, geom, &mut dx);
                        send(*x, Tensor::raw(vx.shape().to_vec(), dx));
                    }
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let c = shape[0];
                    let plane = shape[1] * shape[2];
                    let vg = val(*gamma);
                    if need(*gamma) {
                        let dg = (0..c)
                            .map(|ch| {
                                (ch * plane..(ch + 1) * plane).fold(T::zero(), |a, i| a + g.data()[i] * xhat[i])
                            })
                            .collect();
                        send(*gamma, Tensor::raw(vec![c], dg));
                    }
                    if need(*beta) {
                        let db = (0..c)
                            .map(|ch| g.data()[ch * plane..(ch + 1) * plane].iter().fold(T::zero(), |a, &v| a + v))
                            .collect();
                        send(*beta, Tensor::raw(vec![c], db));
                    }
                    if need(*x) {
                        let dxhat: Vec<T> = g
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(i, &v)| v * vg.data()[i / plane])
                            .collect();
                        let mut dx = vec![T::zero(); g.numel()];
                        kernels::standardize_backward(&dxhat, xhat, *rstd, &mut dx);
                        send(*x, Tensor::raw(shape.clone(), dx));
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let n = *shape.last().unwrap_or(&1);
                    let vg = val(*gamma);
                    if need(*gamma) {
                        let mut dg = vec![T::zero(); n];
                        for (i, &v) in g.data().iter().enumerate() {
                            dg[i % n] = dg[i % n] + v * xhat[i];
                        }
                        send(*gamma, Tensor::raw(vec![n], dg));
                    }
                    if need(*beta) {
                        let mut db = vec![T::zero(); n];
                        for (i, &v) in g.data().iter().enumerate() {
                            db[i % n] = db[i % n] + v;
                        }
                        send(*beta, Tensor::raw(vec![n], db));
                    }
                    if need(*x) {
                        let mut dx = vec![T::zero(); g.numel()];
                        let mut dxhat = vec![T::zero(); n];
                        for (r, &rs) in rstd.iter().enumerate() {
                            for j in 0..n {
                                dxhat[j] = g.data()[r * n + j] * vg.data()[j];
                            }
                            kernels::standardize_backward(
                                &dxhat,
                                &xhat[r * n..(r + 1) * n],
                                rs,
                                &mut dx[r * n..(r + 1) * n],
                            );
                        }
                        send(*x, Tensor::raw(shape.clone(), dx));
                    }
                }
                Op::Gelu(x) => {
                    let vx = val(*x);
                    send(*x, zip(&g, &vx, |gv, xv| gv * kernels::gelu_grad(xv)));
                }
                Op::Sigmoid(x) => {
                    send(*x, zip(&g, &node.value, |gv, s| gv * s * (T::one() - s)));
                }
                Op::Exp(x) => send(*x, zip(&g, &node.value, |gv, e| gv * e)),
                Op::Ln(x) => {
                    let vx = val(*x);
                    send(*x, zip(&g, &vx, |gv, xv| gv / xv));
                }
                Op::Softmax(x) => {
                    let n = *shape.last().unwrap_or(&1);
                    let mut dx = g.into_data();
                    for (p, gr) in node.value.data().chunks(n).zip(dx.chunks_mut(n)) {
                        kernels::softmax_row_backward(p, gr);
                    }
                    send(*x, Tensor::raw(shape.clone(), dx));
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (vq, vk, vv) = (val(*q), val(*k), val(*v));
                    let (mq, d) = (vq.shape()[0], vq.shape()[1]);
                    let mk = vk.shape()[0];
                    let grads =
                        kernels::attention_backward(g.data(), vq.data(), vk.data(), vv.data(), probs, mq, mk, d, *heads);
                    send(*q, Tensor::raw(vec![mq, d], grads.dq));
                    send(*k, Tensor::raw(vec![mk, d], grads.dk));
                    send(*v, Tensor::raw(vec![mk, d], grads.dv));
                }
                Op::Resize { x, ys, xs } => {
                    let vx = val(*x);
                    let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                    let mut dx = vec![T::zero(); vx.numel()];
                    kernels::resize_backward(g.data(), c, h, w, ys, xs, &mut dx);
                    send(*x, Tensor::raw(vx.shape().to_vec(), dx));
                }
                Op::Gather(x, idx) => {
                    let vx = val(*x);
                    let mut dx = vec![T::zero(); vx.numel()];
                    for (&i, &gv) in idx.iter().zip(g.data()) {
                        dx[i] = dx[i] + gv;
                    }
                    send(*x, Tensor::raw(vx.shape().to_vec(), dx));
                }
                Op::Sum(x) => {
                    let vx = val(*x);
                    send(*x, Tensor::full(vx.shape(), g.item()));
                }
                Op::Mean(x) => {
                    let vx = val(*x);
                    let s = g.item() / T::of(vx.numel() as f64);
                    send(*x, Tensor::full(vx.shape(), s));
                }
            }
        }
        Ok(())
    }
}

fn mat_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [m, n] => Some((1, m, n)),
        [b, m, n] => Some((b, m, n)),
        _ => None,
    }
}

fn transpose2<T: Scalar>(data: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    out
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::raw(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}
