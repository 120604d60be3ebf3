//! Edge-energy features of a stitched noise map: blur, Sobel magnitude,
//! and global plus windowed L2 norms; also the pixel-level heatmap.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::patching::StitchedMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlurKind {
    Gaussian,
    Uniform,
}

/// Index into `0..n` with symmetric reflection (`.. b a | a b ..`) at both ends.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

fn dims2(map: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let [h, w] = map.dims2(op)?;
    Ok((h, w))
}

/// Normalized 1-D kernel of length `2 * radius + 1`.
pub fn blur_kernel(kind: BlurKind, radius: usize, sigma: f64) -> Result<Vec<f64>> {
    if radius == 0 {
        return Err(Error::Config("blur radius must be at least 1".into()));
    }
    let raw: Vec<f64> = match kind {
        BlurKind::Uniform => vec![1.0; 2 * radius + 1],
        BlurKind::Gaussian => {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::Config(format!(
                    "gaussian blur sigma must be positive, got {sigma}"
                )));
            }
            (0..=2 * radius)
                .map(|i| {
                    let k = i as f64 - radius as f64;
                    libm::exp(-k * k / (2.0 * sigma * sigma))
                })
                .collect()
        }
    };
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Separable blur with reflect padding.
pub fn blur(map: &Tensor, kind: BlurKind, radius: usize, sigma: f64) -> Result<Tensor> {
    let (h, w) = dims2(map, "blur")?;
    let kernel = blur_kernel(kind, radius, sigma)?;
    let r = radius as isize;
    let src = map.data();
    let mut rows = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kw)| kw * src[y * w + reflect(x as isize + k as isize - r, w)] as f64)
                .sum();
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let v: f64 = kernel
                .iter()
                .enumerate()
                .map(|(k, &kw)| kw * rows[reflect(y as isize + k as isize - r, h) * w + x])
                .sum();
            out[y * w + x] = v as f32;
        }
    }
    Tensor::new(&[h, w], out)
}

/// Gradient magnitude `sqrt(Gx^2 + Gy^2)` with the 3x3 Sobel kernels and
/// reflect padding.
pub fn sobel(map: &Tensor) -> Result<Tensor> {
    let (h, w) = dims2(map, "sobel")?;
    if h < 3 || w < 3 {
        return Err(Error::Contract(format!(
            "sobel needs a map of at least 3x3, got {h}x{w}"
        )));
    }
    let src = map.data();
    let at = |y: isize, x: isize| src[reflect(y, h) * w + reflect(x, w)] as f64;
    let mut out = vec![0.0f32; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out[y as usize * w + x as usize] = libm::sqrt(gx * gx + gy * gy) as f32;
        }
    }
    Tensor::new(&[h, w], out)
}

/// `sqrt(sum v^2)` over the whole map.
pub fn global_l2(map: &Tensor) -> f64 {
    libm::sqrt(map.data().iter().map(|&v| (v as f64) * (v as f64)).sum())
}

/// Window anchors `0, s, 2s, ..` plus a final anchor flush with the border.
fn anchors(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    let last = extent - window;
    let mut a: Vec<usize> = (0..=last).step_by(stride).collect();
    if a.last() != Some(&last) {
        a.push(last);
    }
    a
}

/// Largest L2 norm over `window x window` sub-blocks at the given stride.
/// A final row and column of anchors flush with the border is always
/// included so that every pixel lies in some window.
pub fn local_max_l2(map: &Tensor, window: usize, stride: usize) -> Result<f64> {
    let (h, w) = dims2(map, "local_max_l2")?;
    if window == 0 || window > h.min(w) {
        return Err(Error::Config(format!(
            "window {window} must lie in 1..={} for a {h}x{w} map",
            h.min(w)
        )));
    }
    if stride == 0 {
        return Err(Error::Config("window stride must be at least 1".into()));
    }
    let src = map.data();
    let mut best = 0.0f64;
    for &r in &anchors(h, window, stride) {
        for &c in &anchors(w, window, stride) {
            let mut e = 0.0f64;
            for y in r..r + window {
                for &v in &src[y * w + c..y * w + c + window] {
                    e += (v as f64) * (v as f64);
                }
            }
            best = best.max(e);
        }
    }
    Ok(libm::sqrt(best))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureParams {
    pub blur: BlurKind,
    pub blur_radius: usize,
    pub blur_sigma: f64,
    pub window: usize,
    pub window_stride: usize,
}

impl Default for FeatureParams {
    fn default() -> Self {
        FeatureParams {
            blur: BlurKind::Gaussian,
            blur_radius: 2,
            blur_sigma: 1.0,
            window: 20,
            window_stride: 5,
        }
    }
}

/// Per-image descriptor `(global, local)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector {
    pub global_l2: f64,
    pub local_max_l2: f64,
}

impl FeatureVector {
    pub fn to_array(self) -> [f64; 2] {
        [self.global_l2, self.local_max_l2]
    }
}

/// `sobel(blur(map))`.
pub fn edge_map(map: &Tensor, params: &FeatureParams) -> Result<Tensor> {
    sobel(&blur(map, params.blur, params.blur_radius, params.blur_sigma)?)
}

pub fn features_of(map: &Tensor, params: &FeatureParams) -> Result<FeatureVector> {
    let edges = edge_map(map, params)?;
    Ok(FeatureVector {
        global_l2: global_l2(&edges),
        local_max_l2: local_max_l2(&edges, params.window, params.window_stride)?,
    })
}

pub fn extract_feature_vector(noise_map: &StitchedMap, params: &FeatureParams) -> Result<FeatureVector> {
    features_of(&noise_map.values, params)
}

/// Pixel-level anomaly map with the range used for display scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    pub values: Tensor,
    pub min: f32,
    pub max: f32,
}

impl HeatMap {
    /// Values linearly rescaled from `[min, max]` to `0..=255`; a flat map is all zeros.
    pub fn to_gray8(&self) -> Vec<u8> {
        let span = self.max - self.min;
        self.values
            .data()
            .iter()
            .map(|&v| {
                if span > 0.0 {
                    libm::roundf(((v - self.min) / span * 255.0).clamp(0.0, 255.0)) as u8
                } else {
                    0
                }
            })
            .collect()
    }
}

pub fn pixel_heatmap(noise_map: &StitchedMap, params: &FeatureParams) -> Result<HeatMap> {
    let values = edge_map(&noise_map.values, params)?.check_finite("pixel_heatmap")?;
    let (min, max) = values
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    Ok(HeatMap { values, min, max })
}
