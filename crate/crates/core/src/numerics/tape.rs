//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its value and, when any input
//! requires a gradient, the inputs and cached intermediates needed to
//! propagate gradients back. Nodes are appended in evaluation order, so the
//! node list is already a topological order and `backward` is a single
//! reverse sweep.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::activation;
use super::attention::{self, AttentionCache};
use super::conv;
use super::linalg::{gemm, Mat};
use super::norm::{self, GroupNormStats};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        x: Var,
        k: Var,
        b: Var,
        stride: usize,
        padding: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: GroupNormStats,
    },
    Silu {
        x: Var,
    },
    Attention {
        x: Var,
        w: [Var; 4],
        cache: AttentionCache,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    AddChannelBias {
        x: Var,
        bias: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    Mse {
        pred: Var,
        target: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for later differentiation.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never retains backward state; for inference.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let (op, requires_grad) = if requires_grad && self.grad_enabled {
            (op, true)
        } else {
            (Op::Leaf, false)
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Consumes the tape, returning one recorded value.
    pub fn into_value(mut self, v: Var) -> Tensor {
        self.nodes.swap_remove(v.0).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let y = conv::conv2d(self.value(x), self.value(k), self.value(b), stride, padding)?;
        let rg = self.rg(&[x, k, b]);
        Ok(self.push(
            y,
            Op::Conv2d {
                x,
                k,
                b,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn conv_transpose2d(&mut self, x: Var, k: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let y = conv::conv_transpose2d(self.value(x), self.value(k), self.value(b), stride, padding)?;
        let rg = self.rg(&[x, k, b]);
        Ok(self.push(
            y,
            Op::ConvTranspose2d {
                x,
                k,
                b,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (y, stats) = norm::group_norm(self.value(x), groups, self.value(gamma), self.value(beta), eps)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            y,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            rg,
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = activation::silu(self.value(x));
        let rg = self.rg(&[x]);
        self.push(y, Op::Silu { x }, rg)
    }

    /// Residual single-head self-attention over spatial positions.
    pub fn self_attention(&mut self, x: Var, wq: Var, wk: Var, wv: Var, wo: Var) -> Result<Var> {
        let rg = self.grad_enabled && self.rg(&[x, wq, wk, wv, wo]);
        let (y, cache) = attention::self_attention(
            self.value(x),
            self.value(wq),
            self.value(wk),
            self.value(wv),
            self.value(wo),
            rg,
        )?;
        let op = match cache {
            Some(cache) => Op::Attention {
                x,
                w: [wq, wk, wv, wo],
                cache,
            },
            None => Op::Leaf,
        };
        Ok(self.push(y, op, rg))
    }

    /// `y = x W^T + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, fin, fout) = match (xv.shape(), wv.shape()) {
            (&[n, fin], &[fout, fin2]) if fin == fin2 && bv.shape() == [fout] => (n, fin, fout),
            _ => {
                return Err(shape_err(
                    "linear",
                    &[1],
                    format!("x {:?}, w {:?}, b {:?}", xv.shape(), wv.shape(), bv.shape()),
                ))
            }
        };
        let mut out = Vec::with_capacity(n * fout);
        for _ in 0..n {
            out.extend_from_slice(bv.data());
        }
        gemm(
            Mat::new(xv.data(), n, fin),
            Mat::new(wv.data(), fout, fin).t(),
            &mut out,
            1.0,
        );
        let y = Tensor::new(&[n, fout], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(y, Op::Linear { x, w, b }, rg))
    }

    /// Adds a per-sample, per-channel bias `[N, C]` to `x: [N, C, H, W]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.dims4("add_channel_bias")?;
        let bv = self.value(bias);
        if bv.shape() != [n, c] {
            return Err(shape_err(
                "add_channel_bias",
                &[0, 1],
                format!("bias {:?} for input {:?}", bv.shape(), xv.shape()),
            ));
        }
        let mut y = xv.clone();
        for (plane, &b) in y.data_mut().chunks_mut(h * w).zip(bv.data()) {
            plane.iter_mut().for_each(|v| *v += b);
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(y, Op::AddChannelBias { x, bias }, rg))
    }

    /// Concatenates two `[N, *, H, W]` tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let [n, ca, h, w] = av.dims4("concat_channels")?;
        let [nb, cb, hb, wb] = bv.dims4("concat_channels")?;
        if n != nb || h != hb || w != wb {
            let axes: Vec<usize> = [(0, n, nb), (2, h, hb), (3, w, wb)]
                .iter()
                .filter(|(_, p, q)| p != q)
                .map(|&(ax, _, _)| ax)
                .collect();
            return Err(shape_err(
                "concat_channels",
                &axes,
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity((ca + cb) * plane * n);
        for i in 0..n {
            out.extend_from_slice(av.outer(i));
            out.extend_from_slice(bv.outer(i));
        }
        let y = Tensor::new(&[n, ca + cb, h, w], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Concat { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Mul { a, b }, rg))
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum() as f32);
        let rg = self.rg(&[x]);
        self.push(y, Op::Sum { x }, rg)
    }

    /// Scalar mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        pv.expect_same_shape(target, "mse")?;
        let sq: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let d = (p - t) as f64;
                d * d
            })
            .sum();
        let y = Tensor::scalar((sq / pv.len() as f64) as f32).check_finite("mse")?;
        let rg = self.rg(&[pred]);
        let target = if rg { target.clone() } else { Tensor::zeros(&[0]) };
        Ok(self.push(y, Op::Mse { pred, target }, rg))
    }

    /// Back-propagates from a scalar `loss` through every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        let need = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                x,
                k,
                b,
                stride,
                padding,
            } => {
                let (dx, dk, db) = conv::conv2d_backward(self.value(x), self.value(k), g, stride, padding, need(x))?;
                if let Some(dx) = dx {
                    acc(x, dx)?;
                }
                if need(k) {
                    acc(k, dk)?;
                }
                if need(b) {
                    acc(b, db)?;
                }
            }
            &Op::ConvTranspose2d {
                x,
                k,
                b,
                stride,
                padding,
            } => {
                let (dx, dk, db) =
                    conv::conv_transpose2d_backward(self.value(x), self.value(k), g, stride, padding, need(x))?;
                if let Some(dx) = dx {
                    acc(x, dx)?;
                }
                if need(k) {
                    acc(k, dk)?;
                }
                if need(b) {
                    acc(b, db)?;
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let (dx, dg, db) = norm::group_norm_backward(self.value(*x), *groups, self.value(*gamma), stats, g)?;
                if need(*x) {
                    acc(*x, dx)?;
                }
                if need(*gamma) {
                    acc(*gamma, dg)?;
                }
                if need(*beta) {
                    acc(*beta, db)?;
                }
            }
            &Op::Silu { x } => acc(x, activation::silu_backward(self.value(x), g))?,
            Op::Attention { x, w, cache } => {
                let ws = [self.value(w[0]), self.value(w[1]), self.value(w[2]), self.value(w[3])];
                let gr = attention::self_attention_backward(self.value(*x), ws, cache, g)?;
                for (v, t) in [
                    (*x, gr.input),
                    (w[0], gr.wq),
                    (w[1], gr.wk),
                    (w[2], gr.wv),
                    (w[3], gr.wo),
                ] {
                    if need(v) {
                        acc(v, t)?;
                    }
                }
            }
            &Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(x), self.value(w));
                let (n, fin) = (xv.shape()[0], xv.shape()[1]);
                let fout = wv.shape()[0];
                if need(x) {
                    let mut dx = vec![0.0f32; n * fin];
                    gemm(
                        Mat::new(g.data(), n, fout),
                        Mat::new(wv.data(), fout, fin),
                        &mut dx,
                        0.0,
                    );
                    acc(x, Tensor::new(&[n, fin], dx)?)?;
                }
                if need(w) {
                    let mut dw = vec![0.0f32; fout * fin];
                    gemm(
                        Mat::new(g.data(), n, fout).t(),
                        Mat::new(xv.data(), n, fin),
                        &mut dw,
                        0.0,
                    );
                    acc(w, Tensor::new(&[fout, fin], dw)?)?;
                }
                if need(b) {
                    let mut db = vec![0.0f32; fout];
                    for row in g.data().chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    acc(b, Tensor::new(&[fout], db)?)?;
                }
            }
            &Op::AddChannelBias { x, bias } => {
                if need(bias) {
                    let [n, c, h, w] = g.dims4("add_channel_bias")?;
                    let db: Vec<f32> = g.data().chunks(h * w).map(|p| p.iter().sum()).collect();
                    acc(bias, Tensor::new(&[n, c], db)?)?;
                }
                if need(x) {
                    acc(x, g.clone())?;
                }
            }
            &Op::Concat { a, b } => {
                let [n, _, h, w] = g.dims4("concat_channels")?;
                let ca = self.value(a).shape()[1];
                let cb = self.value(b).shape()[1];
                let (sa, sb) = (ca * h * w, cb * h * w);
                if need(a) {
                    let mut da = Vec::with_capacity(n * sa);
                    for i in 0..n {
                        da.extend_from_slice(&g.outer(i)[..sa]);
                    }
                    acc(a, Tensor::new(&[n, ca, h, w], da)?)?;
                }
                if need(b) {
                    let mut db = Vec::with_capacity(n * sb);
                    for i in 0..n {
                        db.extend_from_slice(&g.outer(i)[sa..]);
                    }
                    acc(b, Tensor::new(&[n, cb, h, w], db)?)?;
                }
            }
            &Op::Add { a, b } => {
                if need(a) {
                    acc(a, g.clone())?;
                }
                if need(b) {
                    acc(b, g.clone())?;
                }
            }
            &Op::Mul { a, b } => {
                if need(a) {
                    acc(a, g.zip_map(self.value(b), |p, q| p * q)?)?;
                }
                if need(b) {
                    acc(b, g.zip_map(self.value(a), |p, q| p * q)?)?;
                }
            }
            &Op::Sum { x } => {
                let s = g.data()[0];
                acc(x, Tensor::full(self.value(x).shape(), s))?;
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred);
                let k = 2.0 * g.data()[0] / pv.len() as f32;
                acc(*pred, pv.zip_map(target, |p, t| k * (p - t))?)?;
            }
        }
        Ok(())
    }
}

/// Gradient buffers produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[2, 3], |i| i as f32 - 2.0));
        let l = tape.sum(x);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient_is_twice_input() {
        let mut tape = Tape::new();
        let xv = Tensor::from_fn(&[4], |i| i as f32 * 0.5 - 1.0);
        let x = tape.param(xv.clone());
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &xv.scale(2.0));
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[3]));
        let y = tape.add(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let l = tape.sum(z);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0; 3]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let mut tape = Tape::inference();
        let x = tape.param(Tensor::ones(&[3]));
        let l = tape.sum(x);
        assert!(!tape.requires_grad(l));
        assert!(tape.backward(l).unwrap().get(x).is_none());
    }
}
