//! Single-head spatial self-attention with a residual connection.
//!
//! For one sample with features `X` laid out `[C, L]` (`L = H*W`):
//! `Q = Wq X`, `K = Wk X`, `V = Wv X`, `A = softmax_rows(Q^T K / sqrt(C))`,
//! `O = V A^T`, and the output is `X + Wo O`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::linalg::{gemm, Mat};
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

/// Intermediates retained for the backward pass, one block per sample.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub q: Vec<f32>,
    pub k: Vec<f32>,
    pub v: Vec<f32>,
    pub o: Vec<f32>,
    /// Row-stochastic attention weights, `[N, L, L]`.
    pub weights: Vec<f32>,
}

fn check(input: &Tensor, ws: [&Tensor; 4]) -> Result<[usize; 4]> {
    let dims = input.dims4("self_attention")?;
    let c = dims[1];
    for w in ws {
        if w.shape() != [c, c] {
            return Err(shape_err(
                "self_attention",
                &[1],
                format!("projection {:?} for {c} channels", w.shape()),
            ));
        }
    }
    Ok(dims)
}

fn softmax_rows(s: &mut [f32], l: usize) {
    for row in s.chunks_mut(l) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0f32;
        for v in row.iter_mut() {
            *v = super::fmath::expf(*v - m);
            z += *v;
        }
        let inv = 1.0 / z;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

pub fn self_attention(
    input: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    keep_cache: bool,
) -> Result<(Tensor, Option<AttentionCache>)> {
    let [n, c, h, w] = check(input, [wq, wk, wv, wo])?;
    let l = h * w;
    let cl = c * l;
    let scale = 1.0 / libm::sqrtf(c as f32);
    let mut out = input.data().to_vec();
    let alloc_len = |per: usize| if keep_cache { n * per } else { per };
    let mut q = vec![0.0f32; alloc_len(cl)];
    let mut k = vec![0.0f32; alloc_len(cl)];
    let mut v = vec![0.0f32; alloc_len(cl)];
    let mut o = vec![0.0f32; alloc_len(cl)];
    let mut a = vec![0.0f32; alloc_len(l * l)];
    for i in 0..n {
        let off = if keep_cache { i } else { 0 };
        let x = Mat::new(input.outer(i), c, l);
        let qi = &mut q[off * cl..(off + 1) * cl];
        gemm(Mat::new(wq.data(), c, c), x, qi, 0.0);
        let ki = &mut k[off * cl..(off + 1) * cl];
        gemm(Mat::new(wk.data(), c, c), x, ki, 0.0);
        let vi = &mut v[off * cl..(off + 1) * cl];
        gemm(Mat::new(wv.data(), c, c), x, vi, 0.0);
        let ai = &mut a[off * l * l..(off + 1) * l * l];
        gemm(
            Mat::new(&q[off * cl..(off + 1) * cl], c, l).t(),
            Mat::new(&k[off * cl..(off + 1) * cl], c, l),
            ai,
            0.0,
        );
        ai.iter_mut().for_each(|s| *s *= scale);
        softmax_rows(ai, l);
        let oi = &mut o[off * cl..(off + 1) * cl];
        gemm(
            Mat::new(&v[off * cl..(off + 1) * cl], c, l),
            Mat::new(&a[off * l * l..(off + 1) * l * l], l, l).t(),
            oi,
            0.0,
        );
        gemm(
            Mat::new(wo.data(), c, c),
            Mat::new(&o[off * cl..(off + 1) * cl], c, l),
            &mut out[i * cl..(i + 1) * cl],
            1.0,
        );
    }
    let cache = keep_cache.then_some(AttentionCache { q, k, v, o, weights: a });
    Ok((Tensor::new(input.shape(), out)?.check_finite("self_attention")?, cache))
}

/// Attention weights `[N, L, L]` for inspection.
pub fn attention_weights(input: &Tensor, wq: &Tensor, wk: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = check(input, [wq, wk, wq, wk])?;
    let l = h * w;
    let zero = Tensor::zeros(&[c, c]);
    let (_, cache) = self_attention(input, wq, wk, &zero, &zero, true)?;
    let cache = cache.expect("cache requested");
    Tensor::new(&[n, l, l], cache.weights)
}

pub struct AttentionGrads {
    pub input: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

pub fn self_attention_backward(
    input: &Tensor,
    ws: [&Tensor; 4],
    cache: &AttentionCache,
    grad_out: &Tensor,
) -> Result<AttentionGrads> {
    let [wq, wk, wv, wo] = ws;
    let [n, c, h, w] = check(input, ws)?;
    let l = h * w;
    let cl = c * l;
    let scale = 1.0 / libm::sqrtf(c as f32);
    let mut dx = grad_out.data().to_vec();
    let mut dwq = vec![0.0f32; c * c];
    let mut dwk = vec![0.0f32; c * c];
    let mut dwv = vec![0.0f32; c * c];
    let mut dwo = vec![0.0f32; c * c];
    let mut d_o = vec![0.0f32; cl];
    let mut dv = vec![0.0f32; cl];
    let mut dq = vec![0.0f32; cl];
    let mut dk = vec![0.0f32; cl];
    let mut da = vec![0.0f32; l * l];
    for i in 0..n {
        let x = Mat::new(input.outer(i), c, l);
        let dy = Mat::new(grad_out.outer(i), c, l);
        let qi = Mat::new(&cache.q[i * cl..(i + 1) * cl], c, l);
        let ki = Mat::new(&cache.k[i * cl..(i + 1) * cl], c, l);
        let vi = Mat::new(&cache.v[i * cl..(i + 1) * cl], c, l);
        let oi = Mat::new(&cache.o[i * cl..(i + 1) * cl], c, l);
        let ai = &cache.weights[i * l * l..(i + 1) * l * l];

        gemm(dy, oi.t(), &mut dwo, 1.0);
        gemm(Mat::new(wo.data(), c, c).t(), dy, &mut d_o, 0.0);
        // O = V A^T
        gemm(Mat::new(&d_o, c, l), Mat::new(ai, l, l), &mut dv, 0.0);
        gemm(Mat::new(&d_o, c, l).t(), vi, &mut da, 0.0);
        // softmax backward, folded with the logit scale
        for (drow, arow) in da.chunks_mut(l).zip(ai.chunks(l)) {
            let dot: f32 = drow.iter().zip(arow).map(|(d, a)| d * a).sum();
            for (d, &a) in drow.iter_mut().zip(arow) {
                *d = a * (*d - dot) * scale;
            }
        }
        // S = Q^T K: dQ = K dS^T, dK = Q dS
        gemm(ki, Mat::new(&da, l, l).t(), &mut dq, 0.0);
        gemm(qi, Mat::new(&da, l, l), &mut dk, 0.0);

        let dxi = &mut dx[i * cl..(i + 1) * cl];
        for (wmat, dproj, dw) in [(wq, &dq, &mut dwq), (wk, &dk, &mut dwk), (wv, &dv, &mut dwv)] {
            let dp = Mat::new(dproj, c, l);
            gemm(dp, x.t(), dw, 1.0);
            gemm(Mat::new(wmat.data(), c, c).t(), dp, dxi, 1.0);
        }
    }
    Ok(AttentionGrads {
        input: Tensor::new(&[n, c, h, w], dx)?,
        wq: Tensor::new(&[c, c], dwq)?,
        wk: Tensor::new(&[c, c], dwk)?,
        wv: Tensor::new(&[c, c], dwv)?,
        wo: Tensor::new(&[c, c], dwo)?,
    })
}
