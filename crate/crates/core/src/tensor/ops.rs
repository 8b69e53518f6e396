//! Forward definitions of every differentiable operation.

use super::kernels::{self, broadcast_index, broadcast_shape, gemm_nn, BroadcastMap, ConvGeom};
use super::{numel, Op, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Per-channel running mean and (unbiased) variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Scalar> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Moves data laid out as `shape` into the order given by `perm`.
pub(crate) fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    if rank == 0 {
        return data.to_vec();
    }
    let in_strides = kernels::strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_stride: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    // Innermost output axis is copied in a tight loop.
    let last = rank - 1;
    let inner_len = out_shape[last];
    let inner_stride = src_stride[last];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    while out.len() < n {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner_len]);
        } else {
            out.extend((0..inner_len).map(|j| data[base + j * inner_stride]));
        }
        // Advance the outer odometer.
        let mut ax = last;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            base += src_stride[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_stride[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

impl<T: Scalar> Tensor<T> {
    fn binary(&self, other: &Tensor<T>, kind: BinKind, name: &'static str) -> Result<Tensor<T>> {
        let out_shape = broadcast_shape(self.shape(), other.shape())
            .ok_or_else(|| Error::shape(name, self.shape(), other.shape()))?;
        let n = numel(&out_shape);
        let ma = broadcast_index(&out_shape, self.shape());
        let mb = broadcast_index(&out_shape, other.shape());
        let (a, b) = (self.data(), other.data());
        let data: Vec<T> = match (&ma, &mb) {
            (BroadcastMap::Identity, BroadcastMap::Identity) => match kind {
                BinKind::Add => a.iter().zip(b).map(|(&x, &y)| x + y).collect(),
                BinKind::Sub => a.iter().zip(b).map(|(&x, &y)| x - y).collect(),
                BinKind::Mul => a.iter().zip(b).map(|(&x, &y)| x * y).collect(),
            },
            _ => (0..n)
                .map(|i| {
                    let (x, y) = (a[ma.get(i)], b[mb.get(i)]);
                    match kind {
                        BinKind::Add => x + y,
                        BinKind::Sub => x - y,
                        BinKind::Mul => x * y,
                    }
                })
                .collect(),
        };
        let op = match kind {
            BinKind::Add => Op::Add { a: ma, b: mb },
            BinKind::Sub => Op::Sub { a: ma, b: mb },
            BinKind::Mul => Op::Mul { a: ma, b: mb },
        };
        Ok(Tensor::from_op(out_shape, data, op, vec![self.clone(), other.clone()]))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinKind::Add, "add")
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinKind::Sub, "sub")
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinKind::Mul, "mul")
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Scale(c), vec![self.clone()])
    }

    /// Batched matrix product `[..., m, k] × [..., k, n] → [..., m, n]`;
    /// leading dimensions broadcast.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (ra, rb) = (self.rank(), other.rank());
        if ra < 2 || rb < 2 {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let (m, k) = (self.shape()[ra - 2], self.shape()[ra - 1]);
        let (k2, n) = (other.shape()[rb - 2], other.shape()[rb - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let batch_a = &self.shape()[..ra - 2];
        let batch_b = &other.shape()[..rb - 2];
        let batch = broadcast_shape(batch_a, batch_b)
            .ok_or_else(|| Error::shape("matmul", self.shape(), other.shape()))?;
        let nb = numel(&batch);
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); nb * m * n];
        let (a, b) = (self.data(), other.data());
        let b_is_matrix = rb == 2;
        if b_is_matrix {
            gemm_nn(a, b, &mut out, nb * m, k, n);
        } else {
            let ma = broadcast_index(&batch, batch_a);
            let mb = broadcast_index(&batch, batch_b);
            for bi in 0..nb {
                let ia = ma.get(bi);
                let ib = mb.get(bi);
                gemm_nn(
                    &a[ia * m * k..(ia + 1) * m * k],
                    &b[ib * k * n..(ib + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let op = Op::Matmul {
            batch,
            m,
            k,
            n,
            b_is_matrix,
        };
        Ok(Tensor::from_op(out_shape, out, op, vec![self.clone(), other.clone()]))
    }

    /// `x · W + b` with `W: [in, out]`, `b: [out]`.
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        if weight.rank() != 2 || self.rank() == 0 || self.shape()[self.rank() - 1] != weight.dim(0) {
            return Err(Error::shape("linear", self.shape(), weight.shape()));
        }
        if self.rank() == 1 {
            let y = self.reshape([1, self.numel()])?.linear(weight, bias)?;
            return y.reshape([weight.dim(1)]);
        }
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => {
                if b.shape() != [weight.dim(1)] {
                    return Err(Error::shape("linear bias", b.shape(), &[weight.dim(1)]));
                }
                y.add(b)
            }
            None => Ok(y),
        }
    }

    pub fn sum(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        let op = Op::SumAxis {
            outer: 1,
            len: self.numel(),
            inner: 1,
            scale: T::one(),
        };
        Tensor::from_op(Vec::new(), vec![s], op, vec![self.clone()])
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel();
        let scale = T::one() / T::from_count(n.max(1));
        let s: T = self.data().iter().copied().sum::<T>() * scale;
        let op = Op::SumAxis {
            outer: 1,
            len: n,
            inner: 1,
            scale,
        };
        Tensor::from_op(Vec::new(), vec![s], op, vec![self.clone()])
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::invalid("reduce", format!("axis {axis} for shape {:?}", self.shape())));
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let scale = if mean {
            T::one() / T::from_count(len.max(1))
        } else {
            T::one()
        };
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            if mean {
                dst.iter_mut().for_each(|d| *d *= scale);
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        let op = Op::SumAxis {
            outer,
            len,
            inner,
            scale,
        };
        Ok(Tensor::from_op(shape, out, op, vec![self.clone()]))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        self.reduce_axis(axis, false)
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<T>> {
        self.reduce_axis(axis, true)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor<T>> {
        let shape = shape.into();
        if numel(&shape) != self.numel() {
            return Err(Error::shape("reshape", self.shape(), &shape));
        }
        Ok(Tensor::from_op(shape, self.data().to_vec(), Op::Reshape, vec![self.clone()]))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", format!("{perm:?} for shape {:?}", self.shape())));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let data = permute_data(self.data(), self.shape(), perm);
        let op = Op::Permute { perm: perm.to_vec() };
        Ok(Tensor::from_op(shape, data, op, vec![self.clone()]))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor<T>> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::invalid("transpose_last", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() || start + len > self.shape()[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("axis {axis} range {start}..{} of shape {:?}", start + len, self.shape()),
            ));
        }
        let (outer, len_in, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * len_in + start) * inner;
            out.extend_from_slice(&x[from..from + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let op = Op::Narrow {
            outer,
            len_in,
            start,
            len,
            inner,
        };
        Ok(Tensor::from_op(shape, out, op, vec![self.clone()]))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        if axis >= first.rank() {
            return Err(Error::invalid("concat", format!("axis {axis} for shape {:?}", first.shape())));
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&sizes) {
                out.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let op = Op::Concat {
            sizes,
            outer,
            inner,
        };
        Ok(Tensor::from_op(shape, out, op, parts.to_vec()))
    }

    /// Materializes a broadcast of this tensor to `shape`.
    pub fn broadcast_to(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor<T>> {
        let shape = shape.into();
        match broadcast_shape(self.shape(), &shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::shape("broadcast_to", self.shape(), &shape)),
        }
        let map = broadcast_index(&shape, self.shape());
        let x = self.data();
        let data = (0..numel(&shape)).map(|i| x[map.get(i)]).collect();
        Ok(Tensor::from_op(shape, data, Op::BroadcastTo { map }, vec![self.clone()]))
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax_lastdim(&self) -> Result<Tensor<T>> {
        let d = *self
            .shape()
            .last()
            .filter(|&&d| d >= 1)
            .ok_or_else(|| Error::invalid("softmax", format!("shape {:?}", self.shape())))?;
        let mut out = self.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            let inv = T::one() / z;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::Softmax, vec![self.clone()]))
    }

    /// Normalizes each last-axis slice to zero mean and unit (population)
    /// variance, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let d = *self.shape().last().unwrap_or(&0);
        if d == 0 || gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::shape("layer_norm", self.shape(), gain.shape()));
        }
        let rows = self.numel() / d;
        let (g, b) = (gain.data(), bias.data());
        let mut xhat = vec![T::zero(); self.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); self.numel()];
        let inv_d = T::one() / T::from_count(d);
        for r in 0..rows {
            let x = &self.data()[r * d..(r + 1) * d];
            let mean = x.iter().copied().sum::<T>() * inv_d;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (x[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm { xhat, rstd, dim: d };
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            op,
            vec![self.clone(), gain.clone(), bias.clone()],
        ))
    }

    /// Batch normalization of `[rows, channels]` over the row axis.
    ///
    /// Train mode normalizes with the batch mean and population variance and
    /// updates `running` as `r ← (1 − momentum)·r + momentum·batch`, where the
    /// running variance uses the unbiased batch variance. Eval mode
    /// normalizes with `running`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &self,
        gain: &Tensor<T>,
        bias: &Tensor<T>,
        running: &mut RunningStats<T>,
        mode: BatchNormMode,
        momentum: T,
        eps: T,
    ) -> Result<Tensor<T>> {
        if self.rank() != 2 {
            return Err(Error::invalid("batch_norm", format!("expected [rows, channels], got {:?}", self.shape())));
        }
        let (rows, c) = (self.dim(0), self.dim(1));
        if gain.shape() != [c] || bias.shape() != [c] || running.mean.len() != c || running.var.len() != c {
            return Err(Error::shape("batch_norm", self.shape(), gain.shape()));
        }
        let x = self.data();
        let (mean, inv_std): (Vec<T>, Vec<T>) = match mode {
            BatchNormMode::Train => {
                if rows < 2 {
                    return Err(Error::DegenerateBatch(rows));
                }
                let inv_n = T::one() / T::from_count(rows);
                let mut mean = vec![T::zero(); c];
                for r in 0..rows {
                    for j in 0..c {
                        mean[j] += x[r * c + j];
                    }
                }
                mean.iter_mut().for_each(|m| *m *= inv_n);
                let mut var = vec![T::zero(); c];
                for r in 0..rows {
                    for j in 0..c {
                        let d = x[r * c + j] - mean[j];
                        var[j] += d * d;
                    }
                }
                let unbias = T::from_count(rows) / T::from_count(rows - 1);
                let inv_std = var
                    .iter()
                    .map(|&v| T::one() / (v * inv_n + eps).sqrt())
                    .collect();
                for j in 0..c {
                    running.mean[j] = (T::one() - momentum) * running.mean[j] + momentum * mean[j];
                    running.var[j] =
                        (T::one() - momentum) * running.var[j] + momentum * var[j] * inv_n * unbias;
                }
                (mean, inv_std)
            }
            BatchNormMode::Eval => (
                running.mean.clone(),
                running.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect(),
            ),
        };
        let (g, b) = (gain.data(), bias.data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            for j in 0..c {
                let h = (x[r * c + j] - mean[j]) * inv_std[j];
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let op = Op::BatchNorm {
            xhat,
            inv_std,
            channels: c,
            train: mode == BatchNormMode::Train,
        };
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            op,
            vec![self.clone(), gain.clone(), bias.clone()],
        ))
    }

    /// 2-D cross-correlation of `[n,c,h,w]` with `[c_out,c,kh,kw]`.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        if self.rank() != 4 || weight.rank() != 4 || self.dim(1) != weight.dim(1) {
            return Err(Error::shape("conv2d", self.shape(), weight.shape()));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be >= 1"));
        }
        let (n, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let (co, kh, kw) = (weight.dim(0), weight.dim(2), weight.dim(3));
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * padding, w + 2 * padding),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(Error::shape("conv2d bias", b.shape(), &[co]));
            }
        }
        let geom = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![T::zero(); n * co * cols];
        let mut col = vec![T::zero(); rows * cols];
        let x = self.data();
        for img in 0..n {
            kernels::im2col(&x[img * c * h * w..(img + 1) * c * h * w], &geom, &mut col);
            let dst = &mut out[img * co * cols..(img + 1) * co * cols];
            if let Some(b) = bias {
                for (o, &bo) in b.data().iter().enumerate() {
                    dst[o * cols..(o + 1) * cols].iter_mut().for_each(|v| *v = bo);
                }
            }
            gemm_nn(weight.data(), &col, dst, co, rows, cols);
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        let op = Op::Conv2d { geom, batch: n, c_out: co };
        Ok(Tensor::from_op(vec![n, co, geom.oh, geom.ow], out, op, inputs))
    }

    /// Max pooling over `kernel×kernel` windows of `[n,c,h,w]`, no padding.
    /// Ties resolve to the row-major earliest element.
    pub fn maxpool2d(&self, kernel: usize, stride: usize) -> Result<Tensor<T>> {
        if self.rank() != 4 || kernel == 0 || stride == 0 {
            return Err(Error::invalid("maxpool2d", format!("shape {:?} kernel {kernel} stride {stride}", self.shape())));
        }
        let (n, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        if kernel > h || kernel > w {
            return Err(Error::invalid("maxpool2d", format!("kernel {kernel} larger than input {h}x{w}")));
        }
        let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let x = self.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let i = base + (oy * stride + ky) * w + ox * stride + kx;
                            if x[i] > x[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(Tensor::from_op(vec![n, c, oh, ow], out, Op::MaxPool { argmax }, vec![self.clone()]))
    }

    pub fn relu(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x.max(T::zero())).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Relu, vec![self.clone()])
    }

    /// GELU, tanh approximation: `½x(1 + tanh(√(2/π)(x + 0.044715x³)))`.
    pub fn gelu(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&x| gelu_value(x)).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Gelu, vec![self.clone()])
    }

    /// Mean over the batch of `−log softmax(logits)[label]` for `[n, K]` logits.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Tensor<T>> {
        if self.rank() != 2 || self.dim(0) != labels.len() {
            return Err(Error::invalid(
                "cross_entropy",
                format!("logits {:?} with {} labels", self.shape(), labels.len()),
            ));
        }
        let (n, k) = (self.dim(0), self.dim(1));
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &self.data()[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[label];
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
        }
        let loss = if n == 0 { T::zero() } else { total / T::from_count(n) };
        let op = Op::CrossEntropy {
            probs,
            labels: labels.to_vec(),
            classes: k,
        };
        Ok(Tensor::from_op(Vec::new(), vec![loss], op, vec![self.clone()]))
    }
}

const GELU_C: f64 = 0.044_715;

pub(crate) fn gelu_value<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(GELU_C);
    T::lit(0.5) * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

pub(crate) fn gelu_derivative<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(GELU_C);
    let t = (k * (x + c * x * x * x)).tanh();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}
