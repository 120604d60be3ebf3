//! Seeded synthetic textures (diagonal stripes and smoothed noise) with
//! injected defects and ground-truth masks. Intensities live in `[0, 1]`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::{blur, BlurKind};
use crate::numerics::Tensor;
use crate::rng::{child_rng, derive_seed, normal_vec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureKind {
    /// Stripes along the anti-diagonal, phase `x + y`.
    Stripes45,
    /// Horizontal mirror image of [`TextureKind::Stripes45`].
    Stripes135,
    /// Gaussian noise smoothed by a Gaussian blur.
    Stochastic,
}

impl TextureKind {
    pub fn name(self) -> &'static str {
        match self {
            TextureKind::Stripes45 => "stripes45",
            TextureKind::Stripes135 => "stripes135",
            TextureKind::Stochastic => "stochastic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureSpec {
    pub kind: TextureKind,
    /// Stripe period in pixels; for stochastic textures, four times the smoothing sigma.
    pub wavelength: f64,
    pub amplitude: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl TextureSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.wavelength >= 2.0) {
            return Err(Error::Config(format!(
                "texture wavelength must be at least 2, got {}",
                self.wavelength
            )));
        }
        if !(self.amplitude >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "texture amplitude and noise sigma must be nonnegative (got {}, {})",
                self.amplitude, self.noise_sigma
            )));
        }
        Ok(())
    }
}

fn clip01(v: f64) -> f32 {
    v.clamp(0.0, 1.0) as f32
}

/// Deterministic `[h, w]` texture for `spec`.
pub fn gen_texture(spec: &TextureSpec, h: usize, w: usize) -> Result<Tensor> {
    spec.validate()?;
    let mut rng = child_rng(spec.seed, &[0]);
    let noise = normal_vec(&mut rng, h * w);
    let tau = 2.0 * core::f64::consts::PI;
    let data = match spec.kind {
        TextureKind::Stripes45 | TextureKind::Stripes135 => {
            let mut img = vec![0.0f32; h * w];
            for y in 0..h {
                for x in 0..w {
                    let v = 0.5
                        + spec.amplitude * libm::sin(tau * (x + y) as f64 / spec.wavelength)
                        + spec.noise_sigma * noise[y * w + x] as f64;
                    img[y * w + x] = clip01(v);
                }
            }
            if spec.kind == TextureKind::Stripes135 {
                img.chunks_mut(w).for_each(|row| row.reverse());
            }
            img
        }
        TextureKind::Stochastic => {
            let sigma = spec.wavelength / 4.0;
            let radius = (libm::ceil(3.0 * sigma) as usize).max(1);
            let field = normal_vec(&mut rng, h * w);
            let smooth = blur(&Tensor::new(&[h, w], field)?, BlurKind::Gaussian, radius, sigma)?;
            let n = smooth.len() as f64;
            let mean = smooth.data().iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = smooth
                .data()
                .iter()
                .map(|&v| (v as f64 - mean) * (v as f64 - mean))
                .sum::<f64>()
                / n;
            let scale = if var > 0.0 { 1.0 / libm::sqrt(var) } else { 0.0 };
            smooth
                .data()
                .iter()
                .zip(&noise)
                .map(|(&s, &e)| clip01(0.5 + spec.amplitude * (s as f64 - mean) * scale + spec.noise_sigma * e as f64))
                .collect()
        }
    };
    Tensor::new(&[h, w], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefectKind {
    /// Disk inscribed in the `size x size` box, shifted by the delta.
    Blob,
    /// Thin line segment of length `size` at a random angle, shifted by the delta.
    Scratch,
    /// The whole box replaced by the flat value `0.5 + delta`.
    MissingRegion,
}

impl DefectKind {
    pub fn name(self) -> &'static str {
        match self {
            DefectKind::Blob => "blob",
            DefectKind::Scratch => "scratch",
            DefectKind::MissingRegion => "missing_region",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DefectSpec {
    pub kind: DefectKind,
    /// Side of the bounding box in pixels.
    pub size: usize,
    pub intensity_delta: f64,
    /// Top-left corner of the bounding box; drawn from the seed when `None`.
    pub position: Option<(usize, usize)>,
}

/// An injected defect: the altered image, its `{0, 1}` mask, and the
/// bounding box actually used.
#[derive(Debug, Clone, PartialEq)]
pub struct Defected {
    pub image: Tensor,
    pub mask: Tensor,
    pub position: (usize, usize),
}

/// Applies `spec` to `image` (`[H, W]` in `[0, 1]`). The mask covers the
/// defect footprint; results are clipped to `[0, 1]`.
pub fn inject_defect(image: &Tensor, spec: &DefectSpec, seed: u64) -> Result<Defected> {
    let [h, w] = image.dims2("inject_defect")?;
    let s = spec.size;
    if s < 2 || s > h || s > w {
        return Err(Error::Config(format!("defect size {s} must lie in 2..={}", h.min(w))));
    }
    let mut rng = child_rng(seed, &[1]);
    let (r0, c0) = match spec.position {
        Some((r, c)) => {
            if r + s > h || c + s > w {
                return Err(Error::Config(format!(
                    "defect box at ({r}, {c}) of size {s} leaves the {h}x{w} image"
                )));
            }
            (r, c)
        }
        None => (rng.random_range(0..=h - s), rng.random_range(0..=w - s)),
    };
    let mut out = image.data().to_vec();
    let mut mask = vec![0.0f32; h * w];
    let mid = (s as f64 - 1.0) / 2.0;
    let theta: f64 = rng.random_range(0.0..core::f64::consts::PI);
    let (dir_y, dir_x) = (libm::sin(theta), libm::cos(theta));
    let half = s as f64 / 2.0;
    for i in 0..s {
        for j in 0..s {
            let (dy, dx) = (i as f64 - mid, j as f64 - mid);
            let inside = match spec.kind {
                DefectKind::Blob => dy * dy + dx * dx <= half * half,
                DefectKind::Scratch => {
                    let along = dy * dir_y + dx * dir_x;
                    let across = dy * dir_x - dx * dir_y;
                    along.abs() <= half && across.abs() <= 0.75
                }
                DefectKind::MissingRegion => true,
            };
            if !inside {
                continue;
            }
            let k = (r0 + i) * w + c0 + j;
            out[k] = match spec.kind {
                DefectKind::MissingRegion => clip01(0.5 + spec.intensity_delta),
                _ => clip01(out[k] as f64 + spec.intensity_delta),
            };
            mask[k] = 1.0;
        }
    }
    Ok(Defected {
        image: Tensor::new(&[h, w], out)?,
        mask: Tensor::new(&[h, w], mask)?,
        position: (r0, c0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    TrainNormal,
    TestNormal,
    TestAnomalous,
}

impl Split {
    pub fn is_anomalous(self) -> bool {
        self == Split::TestAnomalous
    }

    fn stream(self) -> u64 {
        match self {
            Split::TrainNormal => 10,
            Split::TestNormal => 11,
            Split::TestAnomalous => 12,
        }
    }
}

/// Everything needed to regenerate a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub image_h: usize,
    pub image_w: usize,
    /// Texture templates assigned round-robin within each split; their seeds
    /// are replaced by per-image derived seeds.
    pub textures: Vec<TextureSpec>,
    pub defect: DefectSpec,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    pub seed: u64,
}

impl CorpusSpec {
    /// Two stripe orientations with blob defects at `0.3 * amplitude`.
    pub fn stripes(n_train: usize, n_test_normal: usize, n_test_anomalous: usize, seed: u64) -> Self {
        let base = TextureSpec {
            kind: TextureKind::Stripes45,
            wavelength: 8.0,
            amplitude: 0.25,
            noise_sigma: 0.005,
            seed: 0,
        };
        CorpusSpec {
            image_h: 100,
            image_w: 100,
            textures: vec![
                base,
                TextureSpec {
                    kind: TextureKind::Stripes135,
                    ..base
                },
            ],
            defect: DefectSpec {
                kind: DefectKind::Blob,
                size: 12,
                intensity_delta: 0.3 * base.amplitude,
                position: None,
            },
            n_train,
            n_test_normal,
            n_test_anomalous,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.textures.is_empty() {
            return Err(Error::Config("corpus needs at least one texture".into()));
        }
        for t in &self.textures {
            t.validate()?;
        }
        if self.defect.size < 2 || self.defect.size > self.image_h.min(self.image_w) {
            return Err(Error::Config(format!(
                "defect size {} must lie in 2..={}",
                self.defect.size,
                self.image_h.min(self.image_w)
            )));
        }
        if self.n_test_anomalous > 0
            && self.defect.intensity_delta == 0.0
            && self.defect.kind != DefectKind::MissingRegion
        {
            return Err(Error::Config(
                "anomalous images need a nonzero defect intensity_delta".into(),
            ));
        }
        Ok(())
    }
}

/// One generated image with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub split: Split,
    pub index: usize,
    pub image: Tensor,
    /// All zeros for normal images.
    pub mask: Tensor,
    pub texture: TextureSpec,
    /// The defect actually injected, with its resolved position.
    pub defect: Option<DefectSpec>,
    pub seed: u64,
}

/// Generates one image of a split; independent of every other image.
pub fn gen_sample(spec: &CorpusSpec, split: Split, index: usize) -> Result<Sample> {
    let seed = derive_seed(spec.seed, &[split.stream(), index as u64]);
    let mut texture = spec.textures[index % spec.textures.len()];
    texture.seed = seed;
    let image = gen_texture(&texture, spec.image_h, spec.image_w)?;
    if !split.is_anomalous() {
        return Ok(Sample {
            split,
            index,
            mask: Tensor::zeros(image.shape()),
            image,
            texture,
            defect: None,
            seed,
        });
    }
    let d = inject_defect(&image, &spec.defect, seed)?;
    Ok(Sample {
        split,
        index,
        image: d.image,
        mask: d.mask,
        texture,
        defect: Some(DefectSpec {
            position: Some(d.position),
            ..spec.defect
        }),
        seed,
    })
}

/// All splits, in order train / test-normal / test-anomalous.
pub fn gen_corpus(spec: &CorpusSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let plan = [
        (Split::TrainNormal, spec.n_train),
        (Split::TestNormal, spec.n_test_normal),
        (Split::TestAnomalous, spec.n_test_anomalous),
    ];
    plan.iter()
        .flat_map(|&(split, n)| (0..n).map(move |i| (split, i)))
        .map(|(split, i)| gen_sample(spec, split, i))
        .collect()
}
