//! Overlapping square patches over a 2-D image and the inverse averaging
//! step that folds per-patch maps back onto the image plane.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Top-left anchors of every patch, enumerated row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    image_h: usize,
    image_w: usize,
    patch_size: usize,
    stride: usize,
    positions: Vec<(usize, usize)>,
}

impl PatchGrid {
    /// Builds the grid of valid anchors `0, s, 2s, ..` along each axis.
    ///
    /// The stride must tile each axis exactly, i.e. `(H - p) % s == 0`, so
    /// that the last anchor touches the border, and may not exceed the patch
    /// size, so that every pixel is covered.
    pub fn new(image_h: usize, image_w: usize, patch_size: usize, stride: usize) -> Result<Self> {
        if patch_size == 0 || stride == 0 {
            return Err(Error::Config(format!(
                "patch size and stride must be positive (got {patch_size} and {stride})"
            )));
        }
        if stride > patch_size {
            return Err(Error::Config(format!(
                "stride {stride} exceeds patch size {patch_size} and would leave pixels uncovered"
            )));
        }
        if patch_size > image_h || patch_size > image_w {
            return Err(Error::Config(format!(
                "patch size {patch_size} exceeds image {image_h}x{image_w}"
            )));
        }
        for (axis, extent) in [("height", image_h), ("width", image_w)] {
            if !(extent - patch_size).is_multiple_of(stride) {
                return Err(Error::Config(format!(
                    "stride {stride} does not tile image {axis} {extent} with patch size {patch_size}; \
                     ({extent} - {patch_size}) must be a multiple of the stride"
                )));
            }
        }
        let rows = (image_h - patch_size) / stride + 1;
        let cols = (image_w - patch_size) / stride + 1;
        let positions = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r * stride, c * stride)))
            .collect();
        Ok(PatchGrid {
            image_h,
            image_w,
            patch_size,
            stride,
            positions,
        })
    }

    pub fn image_h(&self) -> usize {
        self.image_h
    }

    pub fn image_w(&self) -> usize {
        self.image_w
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn positions(&self) -> &[(usize, usize)] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Anchors per axis, `(rows, cols)`.
    pub fn dims(&self) -> (usize, usize) {
        (
            (self.image_h - self.patch_size) / self.stride + 1,
            (self.image_w - self.patch_size) / self.stride + 1,
        )
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        if image.shape() != [self.image_h, self.image_w] {
            return Err(Error::Contract(format!(
                "image of shape {:?} does not match a {}x{} patch grid",
                image.shape(),
                self.image_h,
                self.image_w
            )));
        }
        Ok(())
    }

    /// Copies patch `index` of a `[H, W]` image into `out` (length `p*p`).
    pub fn copy_patch(&self, image: &Tensor, index: usize, out: &mut [f32]) -> Result<()> {
        self.check_image(image)?;
        let p = self.patch_size;
        let &(r, c) = self
            .positions
            .get(index)
            .ok_or_else(|| Error::Contract(format!("patch index {index} out of range ({})", self.len())))?;
        if out.len() != p * p {
            return Err(Error::Contract(format!(
                "patch buffer has {} values, expected {}",
                out.len(),
                p * p
            )));
        }
        let src = image.data();
        for (i, row) in out.chunks_mut(p).enumerate() {
            let start = (r + i) * self.image_w + c;
            row.copy_from_slice(&src[start..start + p]);
        }
        Ok(())
    }

    /// All patches of an image as a `[n, 1, p, p]` tensor.
    pub fn extract(&self, image: &Tensor) -> Result<Tensor> {
        self.extract_range(image, 0..self.len())
    }

    /// Patches `range` of an image as a `[len, 1, p, p]` tensor.
    pub fn extract_range(&self, image: &Tensor, range: core::ops::Range<usize>) -> Result<Tensor> {
        self.check_image(image)?;
        if range.end > self.len() || range.start > range.end {
            return Err(Error::Contract(format!(
                "patch range {range:?} out of bounds ({})",
                self.len()
            )));
        }
        let p = self.patch_size;
        let n = range.len();
        let mut data = vec![0.0f32; n * p * p];
        for (chunk, idx) in data.chunks_mut(p * p).zip(range) {
            self.copy_patch(image, idx, chunk)?;
        }
        Tensor::new(&[n, 1, p, p], data)
    }
}

/// A full-image map assembled from overlapping patch maps.
#[derive(Debug, Clone, PartialEq)]
pub struct StitchedMap {
    pub values: Tensor,
    /// Number of patches covering each pixel, row-major `[H, W]`.
    pub coverage: Vec<u32>,
}

/// Running per-pixel sums for stitching patch maps that arrive in batches.
#[derive(Debug, Clone)]
pub struct StitchAccumulator<'g> {
    grid: &'g PatchGrid,
    sums: Vec<f64>,
    coverage: Vec<u32>,
    added: usize,
}

impl<'g> StitchAccumulator<'g> {
    pub fn new(grid: &'g PatchGrid) -> Self {
        let n = grid.image_h * grid.image_w;
        StitchAccumulator {
            grid,
            sums: vec![0.0; n],
            coverage: vec![0; n],
            added: 0,
        }
    }

    /// Adds consecutive patch maps starting at grid position `first`;
    /// `maps` holds `k * p * p` values.
    pub fn add(&mut self, first: usize, maps: &[f32]) -> Result<()> {
        let p = self.grid.patch_size;
        let k = maps.len() / (p * p);
        if !maps.len().is_multiple_of(p * p) || first + k > self.grid.len() {
            return Err(Error::Contract(format!(
                "{} values starting at patch {first} do not fit {} patches of {p}x{p}",
                maps.len(),
                self.grid.len()
            )));
        }
        let w = self.grid.image_w;
        for (j, map) in maps.chunks(p * p).enumerate() {
            let (r, c) = self.grid.positions[first + j];
            for (i, row) in map.chunks(p).enumerate() {
                let base = (r + i) * w + c;
                for (x, &v) in row.iter().enumerate() {
                    self.sums[base + x] += v as f64;
                    self.coverage[base + x] += 1;
                }
            }
        }
        self.added += k;
        Ok(())
    }

    /// Divides the sums by coverage; every grid position must have been added once.
    pub fn finish(self) -> Result<StitchedMap> {
        if self.added != self.grid.len() {
            return Err(Error::Contract(format!(
                "stitching received {} patch maps for a grid of {}",
                self.added,
                self.grid.len()
            )));
        }
        let values = self
            .sums
            .iter()
            .zip(&self.coverage)
            .map(|(&s, &n)| (s / n as f64) as f32)
            .collect();
        Ok(StitchedMap {
            values: Tensor::new(&[self.grid.image_h, self.grid.image_w], values)?,
            coverage: self.coverage,
        })
    }
}

/// Averages `[n, p*p]` patch maps (any leading layout with `n*p*p` values)
/// back onto the image plane.
pub fn stitch(grid: &PatchGrid, patch_maps: &[f32]) -> Result<StitchedMap> {
    let p = grid.patch_size;
    if patch_maps.len() != grid.len() * p * p {
        return Err(Error::Contract(format!(
            "expected {} patch maps of {p}x{p}, got {} values",
            grid.len(),
            patch_maps.len()
        )));
    }
    let mut acc = StitchAccumulator::new(grid);
    acc.add(0, patch_maps)?;
    acc.finish()
}
