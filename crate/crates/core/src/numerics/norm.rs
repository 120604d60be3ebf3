//! Group normalization.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Per-(sample, group) statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GroupNormStats {
    pub mean: Vec<f32>,
    pub rstd: Vec<f32>,
}

fn check(input: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<[usize; 4]> {
    let dims = input.dims4("group_norm")?;
    let c = dims[1];
    if groups == 0 || c % groups != 0 {
        return Err(Error::Config(format!(
            "group_norm: {c} channels not divisible into {groups} groups"
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::Config("group_norm: eps must be positive".into()));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err(
            "group_norm",
            &[1],
            format!("affine params {:?}/{:?} for {c} channels", gamma.shape(), beta.shape()),
        ));
    }
    Ok(dims)
}

pub fn group_norm(
    input: &Tensor,
    groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
) -> Result<(Tensor, GroupNormStats)> {
    let [n, c, h, w] = check(input, groups, gamma, beta, eps)?;
    let cpg = c / groups;
    let span = cpg * h * w;
    let plane = h * w;
    let x = input.data();
    let mut out = vec![0.0f32; x.len()];
    let mut mean = Vec::with_capacity(n * groups);
    let mut rstd = Vec::with_capacity(n * groups);
    for i in 0..n {
        for g in 0..groups {
            let base = (i * c + g * cpg) * plane;
            let xs = &x[base..base + span];
            let mu = xs.iter().map(|&v| v as f64).sum::<f64>() / span as f64;
            let var = xs
                .iter()
                .map(|&v| {
                    let d = v as f64 - mu;
                    d * d
                })
                .sum::<f64>()
                / span as f64;
            let r = 1.0 / libm::sqrt(var + eps as f64);
            for (k, chunk) in xs.chunks(plane).enumerate() {
                let ch = g * cpg + k;
                let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
                let dst = &mut out[base + k * plane..base + (k + 1) * plane];
                for (d, &v) in dst.iter_mut().zip(chunk) {
                    *d = ((v as f64 - mu) * r) as f32 * ga + be;
                }
            }
            mean.push(mu as f32);
            rstd.push(r as f32);
        }
    }
    Ok((Tensor::new(input.shape(), out)?, GroupNormStats { mean, rstd }))
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn group_norm_backward(
    input: &Tensor,
    groups: usize,
    gamma: &Tensor,
    stats: &GroupNormStats,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [n, c, h, w] = input.dims4("group_norm")?;
    let cpg = c / groups;
    let plane = h * w;
    let span = cpg * plane;
    let x = input.data();
    let dy = grad_out.data();
    let mut dx = vec![0.0f32; x.len()];
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    let mut xhat = vec![0.0f32; span];
    let mut dxhat = vec![0.0f32; span];
    for i in 0..n {
        for g in 0..groups {
            let base = (i * c + g * cpg) * plane;
            let (mu, r) = (stats.mean[i * groups + g], stats.rstd[i * groups + g]);
            let (mut sum_d, mut sum_dx) = (0.0f64, 0.0f64);
            for k in 0..cpg {
                let ch = g * cpg + k;
                let ga = gamma.data()[ch];
                let (mut dg, mut db) = (0.0f64, 0.0f64);
                for p in 0..plane {
                    let j = k * plane + p;
                    let xh = (x[base + j] - mu) * r;
                    let d = dy[base + j];
                    xhat[j] = xh;
                    dxhat[j] = d * ga;
                    dg += (d * xh) as f64;
                    db += d as f64;
                    sum_d += dxhat[j] as f64;
                    sum_dx += (dxhat[j] * xh) as f64;
                }
                dgamma[ch] += dg as f32;
                dbeta[ch] += db as f32;
            }
            let m = span as f64;
            let (mean_d, mean_dx) = ((sum_d / m) as f32, (sum_dx / m) as f32);
            for j in 0..span {
                dx[base + j] = r * (dxhat[j] - mean_d - xhat[j] * mean_dx);
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), dx)?,
        Tensor::new(&[c], dgamma)?,
        Tensor::new(&[c], dbeta)?,
    ))
}
