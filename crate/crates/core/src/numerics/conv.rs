//! 2-D convolution and transposed convolution via im2col + GEMM.
//!
//! Kernels are laid out `[O, C, kh, kw]` for `conv2d` and `[C, O, kh, kw]`
//! for `conv_transpose2d`, so a `conv2d` kernel reused as a transposed
//! kernel yields the adjoint operator.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::linalg::{gemm, Mat};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Spatial geometry shared by a convolution and its transpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Output extent of a convolution over an input of extent `n`.
    pub fn conv_out(&self, n: usize, k: usize) -> Option<usize> {
        let padded = n + 2 * self.padding;
        if k > padded || self.stride == 0 {
            return None;
        }
        Some((padded - k) / self.stride + 1)
    }

    /// Output extent of a transposed convolution over an input of extent `n`.
    pub fn transposed_out(&self, n: usize, k: usize) -> Option<usize> {
        if n == 0 || self.stride == 0 {
            return None;
        }
        ((n - 1) * self.stride + k).checked_sub(2 * self.padding)
    }
}

/// Unfolds one `[C, H, W]` image into `[C*kh*kw, oh*ow]` columns.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f32], c: usize, h: usize, w: usize, g: ConvGeometry, oh: usize, ow: usize, cols: &mut [f32]) {
    let p = g.padding as isize;
    let s = g.stride as isize;
    let plane = oh * ow;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = oy as isize * s - p + ky as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kx as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds `[C*kh*kw, oh*ow]` columns back onto a `[C, H, W]` image, accumulating.
#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f32], c: usize, h: usize, w: usize, g: ConvGeometry, oh: usize, ow: usize, x: &mut [f32]) {
    let p = g.padding as isize;
    let s = g.stride as isize;
    let plane = oh * ow;
    for ci in 0..c {
        let xc = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = oy as isize * s - p + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = ox as isize * s - p + kx as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: ConvGeometry) -> bool {
    g.kh == 1 && g.kw == 1 && g.stride == 1 && g.padding == 0
}

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    oh: usize,
    ow: usize,
    g: ConvGeometry,
}

fn conv_dims(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<ConvDims> {
    let [n, c, h, w] = input.dims4("conv2d")?;
    let [o, kc, kh, kw] = kernel.dims4("conv2d")?;
    if kc != c {
        return Err(shape_err(
            "conv2d",
            &[1],
            format!("input has {c} channels, kernel expects {kc}"),
        ));
    }
    if bias.shape() != [o] {
        return Err(shape_err(
            "conv2d",
            &[0],
            format!("bias {:?} for {o} output channels", bias.shape()),
        ));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d: stride must be >= 1".into()));
    }
    let g = ConvGeometry {
        kh,
        kw,
        stride,
        padding,
    };
    let oh = g.conv_out(h, kh).ok_or_else(|| {
        shape_err(
            "conv2d",
            &[2],
            format!("kernel height {kh} exceeds padded height {}", h + 2 * padding),
        )
    })?;
    let ow = g.conv_out(w, kw).ok_or_else(|| {
        shape_err(
            "conv2d",
            &[3],
            format!("kernel width {kw} exceeds padded width {}", w + 2 * padding),
        )
    })?;
    Ok(ConvDims {
        n,
        c,
        h,
        w,
        o,
        oh,
        ow,
        g,
    })
}

pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let d = conv_dims(input, kernel, bias, stride, padding)?;
    let ck = d.c * d.g.kh * d.g.kw;
    let plane = d.oh * d.ow;
    let mut out = vec![0.0f32; d.n * d.o * plane];
    let mut cols = if is_pointwise(d.g) {
        Vec::new()
    } else {
        vec![0.0f32; ck * plane]
    };
    let kmat = Mat::new(kernel.data(), d.o, ck);
    for i in 0..d.n {
        let xi = input.outer(i);
        let dst = &mut out[i * d.o * plane..(i + 1) * d.o * plane];
        for (oc, chunk) in dst.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias.data()[oc]);
        }
        if is_pointwise(d.g) {
            gemm(kmat, Mat::new(xi, ck, plane), dst, 1.0);
        } else {
            im2col(xi, d.c, d.h, d.w, d.g, d.oh, d.ow, &mut cols);
            gemm(kmat, Mat::new(&cols, ck, plane), dst, 1.0);
        }
    }
    Tensor::new(&[d.n, d.o, d.oh, d.ow], out)
}

/// Gradients of `conv2d` with respect to input, kernel and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let bias = Tensor::zeros(&[kernel.shape()[0]]);
    let d = conv_dims(input, kernel, &bias, stride, padding)?;
    let ck = d.c * d.g.kh * d.g.kw;
    let plane = d.oh * d.ow;
    let pointwise = is_pointwise(d.g);
    let mut dk = vec![0.0f32; d.o * ck];
    let mut db = vec![0.0f32; d.o];
    let mut dx = if need_input {
        vec![0.0f32; input.len()]
    } else {
        Vec::new()
    };
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![0.0f32; ck * plane]
    };
    let mut dcols = if need_input && !pointwise {
        vec![0.0f32; ck * plane]
    } else {
        Vec::new()
    };
    let kmat = Mat::new(kernel.data(), d.o, ck);
    for i in 0..d.n {
        let gi = grad_out.outer(i);
        for (oc, chunk) in gi.chunks(plane).enumerate() {
            db[oc] += chunk.iter().sum::<f32>();
        }
        let xi = input.outer(i);
        let xcols: &[f32] = if pointwise {
            xi
        } else {
            im2col(xi, d.c, d.h, d.w, d.g, d.oh, d.ow, &mut cols);
            &cols
        };
        gemm(Mat::new(gi, d.o, plane), Mat::new(xcols, ck, plane).t(), &mut dk, 1.0);
        if need_input {
            let dxi = &mut dx[i * d.c * d.h * d.w..(i + 1) * d.c * d.h * d.w];
            if pointwise {
                gemm(kmat.t(), Mat::new(gi, d.o, plane), dxi, 0.0);
            } else {
                gemm(kmat.t(), Mat::new(gi, d.o, plane), &mut dcols, 0.0);
                col2im(&dcols, d.c, d.h, d.w, d.g, d.oh, d.ow, dxi);
            }
        }
    }
    let dx = if need_input {
        Some(Tensor::new(input.shape(), dx)?)
    } else {
        None
    };
    Ok((dx, Tensor::new(kernel.shape(), dk)?, Tensor::new(&[d.o], db)?))
}

fn conv_t_dims(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<ConvDims> {
    let [n, c, h, w] = input.dims4("conv_transpose2d")?;
    let [kc, o, kh, kw] = kernel.dims4("conv_transpose2d")?;
    if kc != c {
        return Err(shape_err(
            "conv_transpose2d",
            &[1],
            format!("input has {c} channels, kernel expects {kc}"),
        ));
    }
    if bias.shape() != [o] {
        return Err(shape_err(
            "conv_transpose2d",
            &[0],
            format!("bias {:?} for {o} output channels", bias.shape()),
        ));
    }
    if stride == 0 {
        return Err(Error::Config("conv_transpose2d: stride must be >= 1".into()));
    }
    let g = ConvGeometry {
        kh,
        kw,
        stride,
        padding,
    };
    let oh = g.transposed_out(h, kh).filter(|&v| v > 0).ok_or_else(|| {
        shape_err(
            "conv_transpose2d",
            &[2],
            format!("padding {padding} too large for height {h}"),
        )
    })?;
    let ow = g.transposed_out(w, kw).filter(|&v| v > 0).ok_or_else(|| {
        shape_err(
            "conv_transpose2d",
            &[3],
            format!("padding {padding} too large for width {w}"),
        )
    })?;
    // `oh`/`ow` here are the transposed-conv *output* extents.
    Ok(ConvDims {
        n,
        c,
        h,
        w,
        o,
        oh,
        ow,
        g,
    })
}

pub fn conv_transpose2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let d = conv_t_dims(input, kernel, bias, stride, padding)?;
    let okk = d.o * d.g.kh * d.g.kw;
    let in_plane = d.h * d.w;
    let out_plane = d.oh * d.ow;
    let mut out = vec![0.0f32; d.n * d.o * out_plane];
    let mut cols = vec![0.0f32; okk * in_plane];
    let kmat = Mat::new(kernel.data(), d.c, okk);
    for i in 0..d.n {
        gemm(kmat.t(), Mat::new(input.outer(i), d.c, in_plane), &mut cols, 0.0);
        let dst = &mut out[i * d.o * out_plane..(i + 1) * d.o * out_plane];
        for (oc, chunk) in dst.chunks_mut(out_plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias.data()[oc]);
        }
        // The transposed conv's output is the forward conv's input image.
        col2im(&cols, d.o, d.oh, d.ow, d.g, d.h, d.w, dst);
    }
    Tensor::new(&[d.n, d.o, d.oh, d.ow], out)
}

/// Gradients of `conv_transpose2d` with respect to input, kernel and bias.
pub fn conv_transpose2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let bias = Tensor::zeros(&[kernel.shape()[1]]);
    let d = conv_t_dims(input, kernel, &bias, stride, padding)?;
    let okk = d.o * d.g.kh * d.g.kw;
    let in_plane = d.h * d.w;
    let out_plane = d.oh * d.ow;
    let mut dk = vec![0.0f32; d.c * okk];
    let mut db = vec![0.0f32; d.o];
    let mut dx = if need_input {
        vec![0.0f32; input.len()]
    } else {
        Vec::new()
    };
    let mut gcols = vec![0.0f32; okk * in_plane];
    let kmat = Mat::new(kernel.data(), d.c, okk);
    for i in 0..d.n {
        let gi = grad_out.outer(i);
        for (oc, chunk) in gi.chunks(out_plane).enumerate() {
            db[oc] += chunk.iter().sum::<f32>();
        }
        im2col(gi, d.o, d.oh, d.ow, d.g, d.h, d.w, &mut gcols);
        let xi = Mat::new(input.outer(i), d.c, in_plane);
        gemm(xi, Mat::new(&gcols, okk, in_plane).t(), &mut dk, 1.0);
        if need_input {
            let dxi = &mut dx[i * d.c * in_plane..(i + 1) * d.c * in_plane];
            gemm(kmat, Mat::new(&gcols, okk, in_plane), dxi, 0.0);
        }
    }
    let dx = if need_input {
        Some(Tensor::new(input.shape(), dx)?)
    } else {
        None
    };
    Ok((dx, Tensor::new(kernel.shape(), dk)?, Tensor::new(&[d.o], db)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(shape: [usize; 4], data: &[f32]) -> Tensor {
        Tensor::new(&shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let y = conv2d(
            &t4([1, 1, 1, 1], &[5.0]),
            &t4([1, 1, 1, 1], &[1.0]),
            &Tensor::zeros(&[1]),
            1,
            0,
        )
        .unwrap();
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn ones_sum() {
        let y = conv2d(
            &Tensor::ones(&[1, 1, 2, 2]),
            &Tensor::ones(&[1, 1, 2, 2]),
            &Tensor::zeros(&[1]),
            1,
            0,
        )
        .unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn stride_two_halves_resolution() {
        let y = conv2d(
            &Tensor::ones(&[1, 1, 4, 4]),
            &Tensor::ones(&[1, 1, 4, 4]),
            &Tensor::zeros(&[1]),
            2,
            1,
        )
        .unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        let y = conv2d(
            &Tensor::ones(&[2, 3, 28, 28]),
            &Tensor::ones(&[5, 3, 4, 4]),
            &Tensor::zeros(&[5]),
            2,
            1,
        )
        .unwrap();
        assert_eq!(y.shape(), &[2, 5, 14, 14]);
    }

    #[test]
    fn transpose_doubles_resolution() {
        let y = conv_transpose2d(
            &Tensor::ones(&[1, 1, 2, 2]),
            &Tensor::ones(&[1, 1, 4, 4]),
            &Tensor::zeros(&[1]),
            2,
            1,
        )
        .unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        let y = conv_transpose2d(
            &Tensor::ones(&[1, 4, 7, 7]),
            &Tensor::ones(&[4, 2, 4, 4]),
            &Tensor::zeros(&[2]),
            2,
            1,
        )
        .unwrap();
        assert_eq!(y.shape(), &[1, 2, 14, 14]);
    }

    #[test]
    fn transpose_identity_case() {
        let y = conv_transpose2d(
            &t4([1, 1, 1, 1], &[-2.5]),
            &Tensor::ones(&[1, 1, 1, 1]),
            &Tensor::zeros(&[1]),
            1,
            0,
        )
        .unwrap();
        assert_eq!(y.data(), &[-2.5]);
    }

    #[test]
    fn mismatched_channels_report_axis() {
        let err = conv2d(
            &Tensor::ones(&[1, 2, 4, 4]),
            &Tensor::ones(&[1, 3, 3, 3]),
            &Tensor::zeros(&[1]),
            1,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Shape { ref axes, .. } if axes == &[1]));
        let err = conv2d(
            &Tensor::ones(&[1, 1, 2, 2]),
            &Tensor::ones(&[1, 1, 5, 5]),
            &Tensor::zeros(&[1]),
            1,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Shape { ref axes, .. } if axes == &[2]));
    }
}
