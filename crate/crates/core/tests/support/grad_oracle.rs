//! Finite-difference oracles: tape gradients of every differentiable
//! primitive against central differences of an independent double-precision
//! reference implementation.

#![allow(dead_code)]

use diffad_core::numerics::{conv, Tape, Tensor, Var};
use diffad_core::rng::{normal_vec, rng_from_seed, DetRng};
use rand::Rng;

pub const H: f64 = 1e-3;
pub const TOL: f64 = 1e-3;
pub const INSTANCES: u64 = 20;

// ---- double-precision reference implementations --------------------------

pub fn conv2d_ref(x: &[f64], xs: [usize; 4], k: &[f64], ks: [usize; 4], b: &[f64], s: usize, p: usize) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let [o, _, kh, kw] = ks;
    let oh = (h + 2 * p - kh) / s + 1;
    let ow = (w + 2 * p - kw) / s + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for i in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[oc];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x[((i * c + ci) * h + iy as usize) * w + ix as usize]
                                        * k[((oc * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    out[((i * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Scatter definition: every input pixel stamps the kernel onto the output.
pub fn conv_t_ref(x: &[f64], xs: [usize; 4], k: &[f64], ks: [usize; 4], b: &[f64], s: usize, p: usize) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let [_, o, kh, kw] = ks;
    let oh = (h - 1) * s + kh - 2 * p;
    let ow = (w - 1) * s + kw - 2 * p;
    let mut out = vec![0.0; n * o * oh * ow];
    for i in 0..n {
        for oc in 0..o {
            for v in &mut out[(i * o + oc) * oh * ow..(i * o + oc + 1) * oh * ow] {
                *v = b[oc];
            }
        }
        for ci in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    let xv = x[((i * c + ci) * h + iy) * w + ix];
                    for oc in 0..o {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (iy * s + ky) as isize - p as isize;
                                let xx = (ix * s + kx) as isize - p as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < oh && (xx as usize) < ow {
                                    out[((i * o + oc) * oh + y as usize) * ow + xx as usize] +=
                                        xv * k[((ci * o + oc) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn group_norm_ref(x: &[f64], xs: [usize; 4], groups: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let span = c / groups * h * w;
    let mut out = vec![0.0; x.len()];
    for i in 0..n {
        for g in 0..groups {
            let base = (i * c) * h * w + g * span;
            let seg = &x[base..base + span];
            let mu = seg.iter().sum::<f64>() / span as f64;
            let var = seg.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / span as f64;
            for j in 0..span {
                let ch = (base + j) / (h * w) % c;
                out[base + j] = (seg[j] - mu) / (var + eps).sqrt() * gamma[ch] + beta[ch];
            }
        }
    }
    out
}

pub fn silu_ref(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v / (1.0 + (-v).exp())).collect()
}

pub fn matvec(w: &[f64], c: usize, v: &[f64]) -> Vec<f64> {
    (0..c).map(|r| (0..c).map(|j| w[r * c + j] * v[j]).sum()).collect()
}

pub fn attention_ref(x: &[f64], xs: [usize; 4], ws: [&[f64]; 4]) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let l = h * w;
    let mut out = x.to_vec();
    for i in 0..n {
        let tok = |p: usize| -> Vec<f64> { (0..c).map(|ch| x[(i * c + ch) * l + p]).collect() };
        let q: Vec<Vec<f64>> = (0..l).map(|p| matvec(ws[0], c, &tok(p))).collect();
        let k: Vec<Vec<f64>> = (0..l).map(|p| matvec(ws[1], c, &tok(p))).collect();
        let v: Vec<Vec<f64>> = (0..l).map(|p| matvec(ws[2], c, &tok(p))).collect();
        for a in 0..l {
            let logits: Vec<f64> = (0..l)
                .map(|b| q[a].iter().zip(&k[b]).map(|(p, r)| p * r).sum::<f64>() / (c as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut o = vec![0.0; c];
            for b in 0..l {
                for ch in 0..c {
                    o[ch] += e[b] / z * v[b][ch];
                }
            }
            let proj = matvec(ws[3], c, &o);
            for ch in 0..c {
                out[(i * c + ch) * l + a] += proj[ch];
            }
        }
    }
    out
}

pub fn linear_ref(x: &[f64], n: usize, fin: usize, w: &[f64], fout: usize, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * fout];
    for i in 0..n {
        for o in 0..fout {
            out[i * fout + o] = b[o] + (0..fin).map(|j| x[i * fin + j] * w[o * fin + j]).sum::<f64>();
        }
    }
    out
}

// ---- harness --------------------------------------------------------------

pub fn rand_tensor(rng: &mut DetRng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, normal_vec(rng, n).into_iter().map(|v| v * scale).collect()).unwrap()
}

pub fn to64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

pub fn max_rel(analytic: &[f32], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = analytic
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (&a, &b)| m.max((a as f64 - b).abs()));
    if scale == 0.0 {
        err
    } else {
        err / scale
    }
}

/// Checks one primitive: forward values against the reference and the tape
/// gradient of `sum(w * f(inputs))` against central differences of the
/// reference. Returns the worst relative gradient error.
pub fn check(
    inputs: &[Tensor],
    forward: impl Fn(&mut Tape, &[Var]) -> Var,
    reference: impl Fn(&[Vec<f64>]) -> Vec<f64>,
    rng: &mut DetRng,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let y = forward(&mut tape, &vars);
    let out_shape = tape.value(y).shape().to_vec();
    let weights = rand_tensor(rng, &out_shape, 1.0);
    let wv = tape.constant(weights.clone());
    let prod = tape.mul(y, wv).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();

    let base: Vec<Vec<f64>> = inputs.iter().map(to64).collect();
    let fwd_ref = reference(&base);
    let fwd_err = max_rel(tape.value(y).data(), &fwd_ref);
    assert!(fwd_err < 1e-4, "forward mismatch {fwd_err}");

    let w64 = to64(&weights);
    let objective = |args: &[Vec<f64>]| -> f64 { reference(args).iter().zip(&w64).map(|(a, b)| a * b).sum() };
    let mut worst = 0.0f64;
    for (which, var) in vars.iter().enumerate() {
        let mut fd = vec![0.0; base[which].len()];
        let mut args = base.clone();
        for j in 0..fd.len() {
            let orig = args[which][j];
            args[which][j] = orig + H;
            let up = objective(&args);
            args[which][j] = orig - H;
            let down = objective(&args);
            args[which][j] = orig;
            fd[j] = (up - down) / (2.0 * H);
        }
        let g = grads.get(*var).expect("gradient present for every input");
        worst = worst.max(max_rel(g.data(), &fd));
    }
    worst
}

pub fn run_suite(name: &str, mut case: impl FnMut(&mut DetRng) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = rng_from_seed(1000 + seed);
        let e = case(&mut rng);
        assert!(e <= TOL, "{name} seed {seed}: relative gradient error {e:.2e}");
        worst = worst.max(e);
    }
    println!("{name}: worst relative error over {INSTANCES} instances {worst:.2e}");
    worst
}

// ---- suites -----------------------------------------------------------------

pub fn case_conv2d(rng: &mut DetRng) -> f64 {
    let (stride, pad, k) = [(1, 1, 3), (2, 1, 4), (1, 0, 1), (2, 0, 3)][rng.random_range(0..4)];
    let (n, c, o) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..3));
    let hw = if k == 4 { 4 } else { 3 };
    let xs = [n, c, hw, hw];
    let ks = [o, c, k, k];
    let inputs = [
        rand_tensor(rng, &xs, 1.0),
        rand_tensor(rng, &ks, 0.5),
        rand_tensor(rng, &[o], 0.5),
    ];
    check(
        &inputs,
        |t, v| t.conv2d(v[0], v[1], v[2], stride, pad).unwrap(),
        |a| conv2d_ref(&a[0], xs, &a[1], ks, &a[2], stride, pad),
        rng,
    )
}

pub fn case_conv_transpose2d(rng: &mut DetRng) -> f64 {
    let (stride, pad, k) = [(2, 1, 4), (1, 1, 3), (1, 0, 1), (2, 0, 2)][rng.random_range(0..4)];
    let (n, c, o) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..3));
    let xs = [n, c, 3, 3];
    let ks = [c, o, k, k];
    let inputs = [
        rand_tensor(rng, &xs, 1.0),
        rand_tensor(rng, &ks, 0.5),
        rand_tensor(rng, &[o], 0.5),
    ];
    check(
        &inputs,
        |t, v| t.conv_transpose2d(v[0], v[1], v[2], stride, pad).unwrap(),
        |a| conv_t_ref(&a[0], xs, &a[1], ks, &a[2], stride, pad),
        rng,
    )
}

pub fn case_group_norm(rng: &mut DetRng) -> f64 {
    let groups = rng.random_range(1..3);
    let c = groups * rng.random_range(1..3);
    let xs = [rng.random_range(1..3), c, 3, 3];
    let inputs = [
        rand_tensor(rng, &xs, 1.0),
        rand_tensor(rng, &[c], 1.0),
        rand_tensor(rng, &[c], 1.0),
    ];
    check(
        &inputs,
        |t, v| t.group_norm(v[0], groups, v[1], v[2], 1e-5).unwrap(),
        |a| group_norm_ref(&a[0], xs, groups, &a[1], &a[2], 1e-5),
        rng,
    )
}

pub fn case_silu(rng: &mut DetRng) -> f64 {
    let inputs = [rand_tensor(rng, &[2, 3, 3], 2.0)];
    check(&inputs, |t, v| t.silu(v[0]), |a| silu_ref(&a[0]), rng)
}

pub fn case_self_attention(rng: &mut DetRng) -> f64 {
    let c = rng.random_range(1..4);
    let xs = [rng.random_range(1..3), c, 3, 3];
    let inputs = [
        rand_tensor(rng, &xs, 1.0),
        rand_tensor(rng, &[c, c], 0.5),
        rand_tensor(rng, &[c, c], 0.5),
        rand_tensor(rng, &[c, c], 0.5),
        rand_tensor(rng, &[c, c], 0.5),
    ];
    check(
        &inputs,
        |t, v| t.self_attention(v[0], v[1], v[2], v[3], v[4]).unwrap(),
        |a| attention_ref(&a[0], xs, [&a[1], &a[2], &a[3], &a[4]]),
        rng,
    )
}

pub fn case_linear(rng: &mut DetRng) -> f64 {
    let (n, fin, fout) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5));
    let inputs = [
        rand_tensor(rng, &[n, fin], 1.0),
        rand_tensor(rng, &[fout, fin], 1.0),
        rand_tensor(rng, &[fout], 1.0),
    ];
    check(
        &inputs,
        |t, v| t.linear(v[0], v[1], v[2]).unwrap(),
        |a| linear_ref(&a[0], n, fin, &a[1], fout, &a[2]),
        rng,
    )
}

pub fn case_structural_op(rng: &mut DetRng) -> f64 {
    let xs = [2, 2, 3, 3];
    let inputs = [
        rand_tensor(rng, &xs, 1.0),
        rand_tensor(rng, &[2, 2], 1.0),
        rand_tensor(rng, &[2, 1, 3, 3], 1.0),
    ];
    check(
        &inputs,
        |t, v| {
            let a = t.add_channel_bias(v[0], v[1]).unwrap();
            t.concat_channels(a, v[2]).unwrap()
        },
        |a| {
            let mut out = Vec::new();
            for i in 0..2 {
                for ch in 0..2 {
                    for p in 0..9 {
                        out.push(a[0][(i * 2 + ch) * 9 + p] + a[1][i * 2 + ch]);
                    }
                }
                out.extend_from_slice(&a[2][i * 9..(i + 1) * 9]);
            }
            out
        },
        rng,
    )
}

pub fn case_mse(rng: &mut DetRng) -> f64 {
    let target = rand_tensor(rng, &[2, 1, 3, 3], 1.0);
    let t64 = to64(&target);
    let inputs = [rand_tensor(rng, &[2, 1, 3, 3], 1.0)];
    check(
        &inputs,
        |t, v| t.mse(v[0], &target).unwrap(),
        |a| vec![a[0].iter().zip(&t64).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / 18.0],
        rng,
    )
}

/// Every primitive suite, by name.
pub type Case = fn(&mut DetRng) -> f64;

pub const SUITES: &[(&str, Case)] = &[
    ("conv2d", case_conv2d),
    ("conv_transpose2d", case_conv_transpose2d),
    ("group_norm", case_group_norm),
    ("silu", case_silu),
    ("self_attention", case_self_attention),
    ("linear", case_linear),
    ("add_channel_bias+concat+mse", case_structural_op),
    ("mse", case_mse),
];

/// Relative gap in the adjoint identity `<conv(x), y> = <x, conv_t(y)>` for one seeded instance.
pub fn adjoint_gap(seed: u64) -> f64 {
    let mut rng = rng_from_seed(7000 + seed);
    let (stride, pad, k) = [(1, 1, 3), (2, 1, 4), (1, 0, 2)][seed as usize % 3];
    let (c, o) = (rng.random_range(1..4), rng.random_range(1..4));
    let x = rand_tensor(&mut rng, &[1, c, 6, 6], 1.0);
    let kernel = rand_tensor(&mut rng, &[o, c, k, k], 1.0);
    let y0 = conv::conv2d(&x, &kernel, &Tensor::zeros(&[o]), stride, pad).unwrap();
    let y = rand_tensor(&mut rng, y0.shape(), 1.0);
    let xt = conv::conv_transpose2d(&y, &kernel, &Tensor::zeros(&[c]), stride, pad).unwrap();
    // The transposed output may be smaller when the forward stride
    // dropped trailing rows; compare over the overlapping region.
    let lhs: f64 = y0.data().iter().zip(y.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
    let [_, _, th, tw] = xt.dims4("t").unwrap();
    let mut rhs = 0.0f64;
    for ch in 0..c {
        for r in 0..th.min(6) {
            for q in 0..tw.min(6) {
                rhs += x.data()[(ch * 6 + r) * 6 + q] as f64 * xt.data()[(ch * th + r) * tw + q] as f64;
            }
        }
    }
    (lhs - rhs).abs() / lhs.abs().max(1.0)
}

/// Relative gap between the tape directional derivative of the
/// noise-matching loss through a whole (small) U-Net and a central
/// difference along the same random unit direction in parameter space.
pub fn loss_directional_gap(seed: u64) -> f64 {
    use diffad_core::diffusion::{make_schedule, noised_batch};
    use diffad_core::unet::{UNetConfig, UNetModel};

    let cfg = UNetConfig {
        base_channels: 4,
        groups: 2,
        time_embed_dim: 8,
        patch_size: 16,
        ..UNetConfig::default()
    };
    let mut model = UNetModel::new(cfg, seed).unwrap();
    let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
    let mut rng = rng_from_seed(9000 + seed);
    let x0 = rand_tensor(&mut rng, &[1, 1, 16, 16], 0.5);
    let batch = noised_batch(&x0, &sched, &mut rng).unwrap();

    let mut tape = Tape::new();
    let params = model.bind(&mut tape);
    let x = tape.constant(batch.x_t.clone());
    let pred = model.forward(&mut tape, &params, x, &batch.t).unwrap();
    let loss = tape.mse(pred, &batch.eps).unwrap();
    let grads = tape.backward(loss).unwrap();

    // Probe along an even blend of the tape gradient direction and a random
    // direction: a purely random direction in a few-thousand-dimensional
    // space has a directional derivative near the f32 noise floor of the loss.
    let g: Vec<Vec<f64>> = params
        .iter()
        .map(|&v| {
            grads
                .get(v)
                .expect("every parameter receives a gradient")
                .data()
                .iter()
                .map(|&x| x as f64)
                .collect()
        })
        .collect();
    let r: Vec<Vec<f64>> = model
        .parameters()
        .iter()
        .map(|p| normal_vec(&mut rng, p.len()).into_iter().map(f64::from).collect())
        .collect();
    let l2 = |v: &[Vec<f64>]| v.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    let (gn, rn) = (l2(&g), l2(&r));
    let dirs: Vec<Vec<f64>> = g
        .iter()
        .zip(&r)
        .map(|(g, r)| g.iter().zip(r).map(|(a, b)| a / gn + b / rn).collect())
        .collect();
    let norm = l2(&dirs);
    let analytic: f64 = g
        .iter()
        .zip(&dirs)
        .map(|(g, d)| g.iter().zip(d).map(|(a, b)| a * b / norm).sum::<f64>())
        .sum();

    let base: Vec<Tensor> = model.parameters().to_vec();
    let mut loss_at = |h: f64| -> f64 {
        for ((p, b), d) in model.parameters_mut().iter_mut().zip(&base).zip(&dirs) {
            for ((v, &b), &d) in p.data_mut().iter_mut().zip(b.data()).zip(d) {
                *v = (b as f64 + h * d / norm) as f32;
            }
        }
        let out = model.predict(&batch.x_t, &batch.t).unwrap();
        out.data()
            .iter()
            .zip(batch.eps.data())
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            / out.len() as f64
    };
    let step = H;
    let numeric = (loss_at(step) - loss_at(-step)) / (2.0 * step);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}
