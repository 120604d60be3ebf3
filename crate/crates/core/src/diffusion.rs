//! DDPM machinery: the linear variance schedule, closed-form forward
//! noising, the noise-matching training objective and loop, single-step
//! noise prediction for scoring, and iterative reverse sampling.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Tape, Tensor};
use crate::patching::{PatchGrid, StitchAccumulator, StitchedMap};
use crate::rng::{child_rng, normal_vec};
use crate::unet::UNetModel;

/// Per-step variances and their cumulative products, indexed by `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linearly spaced `beta_t` from `beta_start` (t = 1) to `beta_end` (t = T).
pub fn make_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::Config("schedule needs at least one timestep".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "schedule bounds must satisfy 0 < beta_start <= beta_end < 1 (got {beta_start}, {beta_end})"
        )));
    }
    let span = (timesteps - 1).max(1) as f64;
    let beta: Vec<f64> = (0..timesteps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0f64, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::Contract(format!(
                "timestep {t} outside 1..={}",
                self.timesteps()
            )));
        }
        Ok(())
    }

    /// `beta_t`; panics if `t` is outside `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }
}

/// Maps pixel intensities from `[0, 1]` to the model range `[-1, 1]`.
pub fn to_model_range(image: &Tensor) -> Tensor {
    image.map(|v| 2.0 * v - 1.0)
}

/// `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    x0.expect_same_shape(eps, "q_sample")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (libm::sqrt(ab) as f32, libm::sqrt(1.0 - ab) as f32);
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// [`q_sample`] with one timestep per leading-axis item.
pub fn q_sample_batch(x0: &Tensor, t: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    x0.expect_same_shape(eps, "q_sample")?;
    let n = x0.shape().first().copied().unwrap_or(0);
    if t.len() != n {
        return Err(Error::Contract(format!("{} timesteps for a batch of {n}", t.len())));
    }
    let per = x0.len().checked_div(n).unwrap_or(0);
    let mut out = Vec::with_capacity(x0.len());
    for (i, &ti) in t.iter().enumerate() {
        sched.check_t(ti)?;
        let ab = sched.alpha_bar(ti);
        let (a, b) = (libm::sqrt(ab) as f32, libm::sqrt(1.0 - ab) as f32);
        let xs = &x0.data()[i * per..(i + 1) * per];
        let es = &eps.data()[i * per..(i + 1) * per];
        out.extend(xs.iter().zip(es).map(|(&x, &e)| a * x + b * e));
    }
    Tensor::new(x0.shape(), out)
}

/// Anything that maps `(x_t, t)` to a noise estimate of the same shape.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor>;
}

impl NoisePredictor for UNetModel {
    fn predict_noise(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        self.predict(x_t, t)
    }
}

/// One noised training batch: inputs, per-item timesteps and the target noise.
#[derive(Debug, Clone)]
pub struct NoisedBatch {
    pub x_t: Tensor,
    pub t: Vec<usize>,
    pub eps: Tensor,
}

/// Draws `t ~ U{1..T}` and `eps ~ N(0, I)` per item and noises `x0`.
pub fn noised_batch<R: Rng + ?Sized>(x0: &Tensor, sched: &NoiseSchedule, rng: &mut R) -> Result<NoisedBatch> {
    let n = x0.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Contract("empty training batch".into()));
    }
    let t: Vec<usize> = (0..n).map(|_| rng.random_range(1..=sched.timesteps())).collect();
    let eps = Tensor::new(x0.shape(), normal_vec(rng, x0.len()))?;
    let x_t = q_sample_batch(x0, &t, &eps, sched)?;
    Ok(NoisedBatch { x_t, t, eps })
}

/// Mean squared error between the drawn noise and its prediction.
pub fn loss_simple<P, R>(model: &P, x0: &Tensor, sched: &NoiseSchedule, rng: &mut R) -> Result<f32>
where
    P: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    let batch = noised_batch(x0, sched, rng)?;
    let pred = model.predict_noise(&batch.x_t, &batch.t)?;
    pred.expect_same_shape(&batch.eps, "loss_simple")?;
    let sse: f64 = pred
        .data()
        .iter()
        .zip(batch.eps.data())
        .map(|(&p, &e)| {
            let d = (p - e) as f64;
            d * d
        })
        .sum();
    Ok((sse / pred.len() as f64) as f32)
}

/// Training images with their patch grid; patches are cut on demand.
#[derive(Debug, Clone)]
pub struct PatchDataset {
    images: Vec<Tensor>,
    grid: PatchGrid,
}

impl PatchDataset {
    /// Every image must be `[H, W]` matching the grid.
    pub fn new(images: Vec<Tensor>, grid: PatchGrid) -> Result<Self> {
        for (i, img) in images.iter().enumerate() {
            if img.shape() != [grid.image_h(), grid.image_w()] {
                return Err(Error::Config(format!(
                    "training image {i} has shape {:?}, expected [{}, {}]",
                    img.shape(),
                    grid.image_h(),
                    grid.image_w()
                )));
            }
        }
        Ok(PatchDataset { images, grid })
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len() * self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gathers the given flat patch indices into a `[n, 1, p, p]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let p = self.grid.patch_size();
        let per = self.grid.len();
        let mut data = vec![0.0f32; indices.len() * p * p];
        for (chunk, &idx) in data.chunks_mut(p * p).zip(indices) {
            let img = self
                .images
                .get(idx / per)
                .ok_or_else(|| Error::Contract(format!("patch index {idx} out of range ({})", self.len())))?;
            self.grid.copy_patch(img, idx % per, chunk)?;
        }
        Tensor::new(&[indices.len(), 1, p, p], data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    /// Emit a checkpoint every this many optimizer steps; 0 disables.
    pub checkpoint_interval: u64,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 64,
            learning_rate: 1e-4,
            seed: 0,
            checkpoint_interval: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Batch loss after every optimizer step.
    pub loss_history: Vec<f32>,
    pub steps: u64,
    pub epochs_completed: usize,
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_STEP: u64 = 2;

/// Minimizes the noise-matching loss with Adam over seeded shuffles of the
/// dataset. `on_checkpoint(step, model)` runs every `checkpoint_interval` steps.
pub fn train<F>(
    model: &mut UNetModel,
    data: &PatchDataset,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    mut on_checkpoint: F,
) -> Result<TrainReport>
where
    F: FnMut(u64, &UNetModel) -> Result<()>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training dataset contains no patches".into()));
    }
    if sched.timesteps() != model.config().timesteps {
        return Err(Error::Config(format!(
            "schedule has {} steps but the model was configured for {}",
            sched.timesteps(),
            model.config().timesteps
        )));
    }
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.learning_rate), model.parameters())?;
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut child_rng(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                return Ok(report);
            }
            let mut rng = child_rng(cfg.seed, &[STREAM_STEP, report.steps]);
            let x0 = data.batch(chunk)?;
            let loss = train_step(model, &mut adam, &x0, sched, &mut rng)?;
            report.loss_history.push(loss);
            report.steps += 1;
            if cfg.checkpoint_interval > 0 && report.steps % cfg.checkpoint_interval == 0 {
                on_checkpoint(report.steps, model)?;
            }
        }
        report.epochs_completed = epoch + 1;
    }
    Ok(report)
}

/// One Adam step on a batch of clean patches; returns the batch loss.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut UNetModel,
    adam: &mut AdamState,
    x0: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<f32> {
    let batch = noised_batch(x0, sched, rng)?;
    let mut tape = Tape::new();
    let params = model.bind(&mut tape);
    let x = tape.constant(batch.x_t);
    let pred = model.forward(&mut tape, &params, x, &batch.t)?;
    let loss = tape.mse(pred, &batch.eps)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let mut grads = tape.backward(loss)?;
    let grads: Vec<Tensor> = params
        .iter()
        .zip(model.parameters())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    adam.step(model.parameters_mut(), &grads)?;
    Ok(value)
}

/// Noise estimate after a single forward noising step at `t_star`:
/// `eps_theta(q_sample(x, t_star, eps), t_star)` for one draw of `eps`.
pub fn predict_noise_single_step<P, R>(
    model: &P,
    x: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut R,
    t_star: usize,
) -> Result<Tensor>
where
    P: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    let eps = Tensor::new(x.shape(), normal_vec(rng, x.len()))?;
    let x_t = q_sample(x, t_star, &eps, sched)?;
    let n = x.shape().first().copied().unwrap_or(0);
    model.predict_noise(&x_t, &vec![t_star; n])
}

/// Settings for turning an image into a stitched noise map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SingleStepConfig {
    pub t_star: usize,
    /// Independent noise draws averaged per patch.
    pub draws: usize,
    /// Patches per model call.
    pub batch_size: usize,
}

impl Default for SingleStepConfig {
    fn default() -> Self {
        SingleStepConfig {
            t_star: 1,
            draws: 1,
            batch_size: 256,
        }
    }
}

impl SingleStepConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        sched.check_t(self.t_star)?;
        if self.draws == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "noise draws and inference batch size must be positive (got {} and {})",
                self.draws, self.batch_size
            )));
        }
        Ok(())
    }
}

/// Predicted-noise maps for patches `range` of `image`, flattened
/// `[len, p, p]`. The noise for patch `i`, draw `k`, comes from a stream
/// derived from `(seed, i, k)`, so results do not depend on batching.
pub fn patch_noise_maps<P>(
    model: &P,
    image: &Tensor,
    grid: &PatchGrid,
    range: Range<usize>,
    sched: &NoiseSchedule,
    cfg: &SingleStepConfig,
    seed: u64,
) -> Result<Vec<f32>>
where
    P: NoisePredictor + ?Sized,
{
    cfg.validate(sched)?;
    let x = grid.extract_range(image, range.clone())?;
    let per = grid.patch_size() * grid.patch_size();
    let mut acc = vec![0.0f32; x.len()];
    for draw in 0..cfg.draws {
        let mut eps = Vec::with_capacity(x.len());
        for i in range.clone() {
            let mut rng = child_rng(seed, &[i as u64, draw as u64]);
            eps.extend(normal_vec(&mut rng, per));
        }
        let eps = Tensor::new(x.shape(), eps)?;
        let x_t = q_sample(&x, cfg.t_star, &eps, sched)?;
        let pred = model.predict_noise(&x_t, &vec![cfg.t_star; range.len()])?;
        for (a, p) in acc.iter_mut().zip(pred.data()) {
            *a += p;
        }
    }
    if cfg.draws > 1 {
        let inv = 1.0 / cfg.draws as f32;
        acc.iter_mut().for_each(|a| *a *= inv);
    }
    Ok(acc)
}

/// Batch ranges covering `0..n` in steps of `batch_size`.
pub fn batch_ranges(n: usize, batch_size: usize) -> impl Iterator<Item = Range<usize>> {
    let bs = batch_size.max(1);
    (0..n.div_ceil(bs)).map(move |b| b * bs..((b + 1) * bs).min(n))
}

/// Full-image noise map: single-step prediction on every patch, stitched by
/// averaging. `image` is `[H, W]` in the model range.
pub fn image_noise_map<P>(
    model: &P,
    image: &Tensor,
    grid: &PatchGrid,
    sched: &NoiseSchedule,
    cfg: &SingleStepConfig,
    seed: u64,
) -> Result<StitchedMap>
where
    P: NoisePredictor + ?Sized,
{
    let mut acc = StitchAccumulator::new(grid);
    for range in batch_ranges(grid.len(), cfg.batch_size) {
        let start = range.start;
        let maps = patch_noise_maps(model, image, grid, range, sched, cfg, seed)?;
        acc.add(start, &maps)?;
    }
    acc.finish()
}

/// Iterates `x_{t-1} = mu_theta(x_t, t) + sigma_t z` from `t_start` down to
/// 1 with `sigma_t^2 = beta_t`; the final step adds no noise.
pub fn reverse_sample<P, R>(
    model: &P,
    x_start: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut R,
    t_start: usize,
) -> Result<Tensor>
where
    P: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    sched.check_t(t_start)?;
    let n = x_start.shape().first().copied().unwrap_or(0);
    let mut x = x_start.clone();
    for t in (1..=t_start).rev() {
        let eps = model.predict_noise(&x, &vec![t; n])?;
        x.expect_same_shape(&eps, "reverse_sample")?;
        let beta = sched.beta(t);
        let coef = (beta / libm::sqrt(1.0 - sched.alpha_bar(t))) as f32;
        let inv_sqrt_alpha = (1.0 / libm::sqrt(sched.alpha(t))) as f32;
        x = x.zip_map(&eps, |xv, ev| (xv - coef * ev) * inv_sqrt_alpha)?;
        if t > 1 {
            let sigma = libm::sqrt(beta) as f32;
            let z = normal_vec(rng, x.len());
            x.data_mut().iter_mut().zip(z).for_each(|(v, z)| *v += sigma * z);
        }
    }
    Ok(x)
}

/// Reconstruction baseline: noise every patch to `t_start`, denoise it back
/// with [`reverse_sample`], and stitch the reconstructions.
pub fn image_reconstruction<P>(
    model: &P,
    image: &Tensor,
    grid: &PatchGrid,
    sched: &NoiseSchedule,
    t_start: usize,
    batch_size: usize,
    seed: u64,
) -> Result<StitchedMap>
where
    P: NoisePredictor + ?Sized,
{
    sched.check_t(t_start)?;
    let mut acc = StitchAccumulator::new(grid);
    for range in batch_ranges(grid.len(), batch_size) {
        let start = range.start;
        let mut rng = child_rng(seed, &[start as u64]);
        let x0 = grid.extract_range(image, range)?;
        let eps = Tensor::new(x0.shape(), normal_vec(&mut rng, x0.len()))?;
        let x_t = q_sample(&x0, t_start, &eps, sched)?;
        let rec = reverse_sample(model, &x_t, sched, &mut rng, t_start)?;
        acc.add(start, rec.data())?;
    }
    acc.finish()
}
