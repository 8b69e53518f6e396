//! Graph node payloads and the reverse-mode sweep.

use std::collections::{HashMap, HashSet};

use super::kernels::{self, broadcast_index, gemm_nt, gemm_tn, BroadcastMap, ConvGeom};
use super::ops::{gelu_derivative, permute_data};
use super::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Operation tag plus the values cached for its backward rule.
pub(crate) enum Op<T: Scalar> {
    Add { a: BroadcastMap, b: BroadcastMap },
    Sub { a: BroadcastMap, b: BroadcastMap },
    Mul { a: BroadcastMap, b: BroadcastMap },
    Scale(T),
    Matmul {
        batch: Vec<usize>,
        m: usize,
        k: usize,
        n: usize,
        b_is_matrix: bool,
    },
    SumAxis {
        outer: usize,
        len: usize,
        inner: usize,
        scale: T,
    },
    Reshape,
    Permute { perm: Vec<usize> },
    Narrow {
        outer: usize,
        len_in: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Concat {
        sizes: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    BroadcastTo { map: BroadcastMap },
    Softmax,
    LayerNorm {
        xhat: Vec<T>,
        rstd: Vec<T>,
        dim: usize,
    },
    BatchNorm {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        channels: usize,
        train: bool,
    },
    Conv2d {
        geom: ConvGeom,
        batch: usize,
        c_out: usize,
    },
    MaxPool { argmax: Vec<usize> },
    Relu,
    Gelu,
    CrossEntropy {
        probs: Vec<T>,
        labels: Vec<usize>,
        classes: usize,
    },
}

impl<T: Scalar> Tensor<T> {
    /// Back-propagates from this scalar, adding into the `grad` of every
    /// trainable leaf reachable through the recorded graph.
    pub fn backward(&self) -> Result<()> {
        self.backward_impl(true)
    }

    /// Like [`Tensor::backward`] but refuses to run when any reachable leaf
    /// already holds a gradient.
    pub fn backward_fresh(&self) -> Result<()> {
        self.backward_impl(false)
    }

    fn backward_impl(&self, accumulate: bool) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        if !accumulate && order.iter().any(|t| t.is_leaf() && t.grad().is_some()) {
            return Err(Error::GradientNotReset);
        }
        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            let Some(node) = t.node() else {
                t.accumulate_grad(&g);
                continue;
            };
            let input_grads = backward_op(&node.op, &node.inputs, t, &g);
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match grads.get_mut(&inp.id()) {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                    None => {
                        grads.insert(inp.id(), ig);
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over tracked nodes; every node appears exactly once.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = t.node() {
                for inp in &node.inputs {
                    if inp.requires_grad() && !visited.contains(&inp.id()) {
                        stack.push((inp.clone(), false));
                    }
                }
            }
        }
        order
    }
}

fn want<T: Scalar>(inputs: &[Tensor<T>], i: usize) -> bool {
    inputs.get(i).is_some_and(Tensor::requires_grad)
}

fn backward_op<T: Scalar>(op: &Op<T>, inputs: &[Tensor<T>], out: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
    let zero = T::zero();
    match op {
        Op::Add { a, b } => vec![
            want(inputs, 0).then(|| a.reduce(g, inputs[0].numel())),
            want(inputs, 1).then(|| b.reduce(g, inputs[1].numel())),
        ],
        Op::Sub { a, b } => vec![
            want(inputs, 0).then(|| a.reduce(g, inputs[0].numel())),
            want(inputs, 1).then(|| {
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                b.reduce(&neg, inputs[1].numel())
            }),
        ],
        Op::Mul { a, b } => {
            let (xa, xb) = (inputs[0].data(), inputs[1].data());
            vec![
                want(inputs, 0).then(|| {
                    let prod: Vec<T> = g.iter().enumerate().map(|(i, &gi)| gi * xb[b.get(i)]).collect();
                    a.reduce(&prod, xa.len())
                }),
                want(inputs, 1).then(|| {
                    let prod: Vec<T> = g.iter().enumerate().map(|(i, &gi)| gi * xa[a.get(i)]).collect();
                    b.reduce(&prod, xb.len())
                }),
            ]
        }
        Op::Scale(c) => vec![Some(g.iter().map(|&v| v * *c).collect())],
        Op::Matmul {
            batch,
            m,
            k,
            n,
            b_is_matrix,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let (a, b) = (inputs[0].data(), inputs[1].data());
            let mut ga = want(inputs, 0).then(|| vec![zero; a.len()]);
            let mut gb = want(inputs, 1).then(|| vec![zero; b.len()]);
            if *b_is_matrix {
                let rows = a.len() / k;
                if let Some(ga) = ga.as_mut() {
                    gemm_nt(g, b, ga, rows, n, k);
                }
                if let Some(gb) = gb.as_mut() {
                    gemm_tn(a, g, gb, k, rows, n);
                }
            } else {
                let ra = inputs[0].rank();
                let rb = inputs[1].rank();
                let ma = broadcast_index(batch, &inputs[0].shape()[..ra - 2]);
                let mb = broadcast_index(batch, &inputs[1].shape()[..rb - 2]);
                for bi in 0..numel(batch) {
                    let (ia, ib) = (ma.get(bi), mb.get(bi));
                    let gc = &g[bi * m * n..(bi + 1) * m * n];
                    if let Some(ga) = ga.as_mut() {
                        gemm_nt(gc, &b[ib * k * n..(ib + 1) * k * n], &mut ga[ia * m * k..(ia + 1) * m * k], m, n, k);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gemm_tn(&a[ia * m * k..(ia + 1) * m * k], gc, &mut gb[ib * k * n..(ib + 1) * k * n], k, m, n);
                    }
                }
            }
            vec![ga, gb]
        }
        Op::SumAxis {
            outer,
            len,
            inner,
            scale,
        } => {
            let mut gx = Vec::with_capacity(outer * len * inner);
            for o in 0..*outer {
                let src = &g[o * inner..(o + 1) * inner];
                for _ in 0..*len {
                    gx.extend(src.iter().map(|&v| v * *scale));
                }
            }
            vec![Some(gx)]
        }
        Op::Reshape => vec![Some(g.to_vec())],
        Op::Permute { perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            vec![Some(permute_data(g, out.shape(), &inv))]
        }
        Op::Narrow {
            outer,
            len_in,
            start,
            len,
            inner,
        } => {
            let mut gx = vec![zero; outer * len_in * inner];
            for o in 0..*outer {
                let to = (o * len_in + start) * inner;
                gx[to..to + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }
        Op::Concat { sizes, outer, inner } => {
            let total: usize = sizes.iter().sum();
            let mut offset = 0;
            sizes
                .iter()
                .enumerate()
                .map(|(i, &len)| {
                    let r = want(inputs, i).then(|| {
                        let mut gx = Vec::with_capacity(outer * len * inner);
                        for o in 0..*outer {
                            let from = (o * total + offset) * inner;
                            gx.extend_from_slice(&g[from..from + len * inner]);
                        }
                        gx
                    });
                    offset += len;
                    r
                })
                .collect()
        }
        Op::BroadcastTo { map } => vec![Some(map.reduce(g, inputs[0].numel()))],
        Op::Softmax => {
            let y = out.data();
            let d = *out.shape().last().expect("softmax rank >= 1");
            let mut gx = vec![zero; y.len()];
            for ((yr, gr), dst) in y.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..d {
                    dst[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(gx)]
        }
        Op::LayerNorm { xhat, rstd, dim } => {
            let d = *dim;
            let gain = inputs[1].data();
            let inv_d = T::one() / T::from_count(d);
            let mut gx = want(inputs, 0).then(|| vec![zero; xhat.len()]);
            let mut gg = vec![zero; d];
            let mut gb = vec![zero; d];
            for (r, &rs) in rstd.iter().enumerate() {
                let xh = &xhat[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let mut sum_dxh = zero;
                let mut sum_dxh_xh = zero;
                for j in 0..d {
                    gg[j] += gr[j] * xh[j];
                    gb[j] += gr[j];
                    let dxh = gr[j] * gain[j];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh[j];
                }
                if let Some(gx) = gx.as_mut() {
                    let (m1, m2) = (sum_dxh * inv_d, sum_dxh_xh * inv_d);
                    for j in 0..d {
                        gx[r * d + j] = rs * (gr[j] * gain[j] - m1 - xh[j] * m2);
                    }
                }
            }
            vec![gx, want(inputs, 1).then_some(gg), want(inputs, 2).then_some(gb)]
        }
        Op::BatchNorm {
            xhat,
            inv_std,
            channels,
            train,
        } => {
            let c = *channels;
            let rows = xhat.len() / c;
            let gain = inputs[1].data();
            let mut gg = vec![zero; c];
            let mut gb = vec![zero; c];
            for r in 0..rows {
                for j in 0..c {
                    gg[j] += g[r * c + j] * xhat[r * c + j];
                    gb[j] += g[r * c + j];
                }
            }
            let gx = want(inputs, 0).then(|| {
                let mut gx = vec![zero; xhat.len()];
                let inv_n = T::one() / T::from_count(rows);
                for r in 0..rows {
                    for j in 0..c {
                        let i = r * c + j;
                        gx[i] = if *train {
                            gain[j] * inv_std[j] * (g[i] - gb[j] * inv_n - xhat[i] * gg[j] * inv_n)
                        } else {
                            gain[j] * inv_std[j] * g[i]
                        };
                    }
                }
                gx
            });
            vec![gx, want(inputs, 1).then_some(gg), want(inputs, 2).then_some(gb)]
        }
        Op::Conv2d { geom, batch, c_out } => {
            let (rows, cols) = (geom.col_rows(), geom.col_cols());
            let co = *c_out;
            let x = inputs[0].data();
            let w = inputs[1].data();
            let plane = geom.c * geom.h * geom.w;
            let mut gx = want(inputs, 0).then(|| vec![zero; x.len()]);
            let mut gw = want(inputs, 1).then(|| vec![zero; w.len()]);
            let mut gbias = want(inputs, 2).then(|| vec![zero; co]);
            let mut col = vec![zero; rows * cols];
            let mut gcol = vec![zero; rows * cols];
            for img in 0..*batch {
                let go = &g[img * co * cols..(img + 1) * co * cols];
                if let Some(gw) = gw.as_mut() {
                    kernels::im2col(&x[img * plane..(img + 1) * plane], geom, &mut col);
                    gemm_nt(go, &col, gw, co, cols, rows);
                }
                if let Some(gx) = gx.as_mut() {
                    gcol.iter_mut().for_each(|v| *v = zero);
                    gemm_tn(w, go, &mut gcol, rows, co, cols);
                    kernels::col2im(&gcol, geom, &mut gx[img * plane..(img + 1) * plane]);
                }
                if let Some(gb) = gbias.as_mut() {
                    for o in 0..co {
                        gb[o] += go[o * cols..(o + 1) * cols].iter().copied().sum::<T>();
                    }
                }
            }
            vec![gx, gw, gbias]
        }
        Op::MaxPool { argmax } => {
            let mut gx = vec![zero; inputs[0].numel()];
            for (&src, &gv) in argmax.iter().zip(g) {
                gx[src] += gv;
            }
            vec![Some(gx)]
        }
        Op::Relu => {
            let y = out.data();
            vec![Some(g.iter().zip(y).map(|(&gv, &yv)| if yv > zero { gv } else { zero }).collect())]
        }
        Op::Gelu => {
            let x = inputs[0].data();
            vec![Some(g.iter().zip(x).map(|(&gv, &xv)| gv * gelu_derivative(xv)).collect())]
        }
        Op::CrossEntropy { probs, labels, classes } => {
            let n = labels.len();
            let scale = g[0] / T::from_count(n.max(1));
            let mut gx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (r, &l) in labels.iter().enumerate() {
                gx[r * classes + l] -= scale;
            }
            vec![Some(gx)]
        }
    }
}
