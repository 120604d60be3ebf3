//! The run configuration file: one TOML document whose sections mirror the
//! pipeline stages. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use diffad_core::datagen::{CorpusSpec, DefectKind, DefectSpec, TextureKind, TextureSpec};
use diffad_core::diffusion::{make_schedule, NoiseSchedule, SingleStepConfig, TrainConfig};
use diffad_core::eval::linear_grid;
use diffad_core::features::{blur_kernel, BlurKind, FeatureParams};
use diffad_core::iforest::ForestConfig;
use diffad_core::patching::PatchGrid;
use diffad_core::rng::derive_seed;
use diffad_core::unet::UNetConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    pub data: DataSection,
    pub synth: SynthSection,
    pub patch: PatchSection,
    pub schedule: ScheduleSection,
    pub unet: UNetSection,
    pub train: TrainSection,
    pub inference: InferenceSection,
    pub features: FeatureSection,
    pub forest: ForestSection,
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory of normal training images for `train` and `fit-detector`.
    pub train_dir: Option<PathBuf>,
    pub image_height: usize,
    pub image_width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureName {
    Stripes45,
    Stripes135,
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectName {
    Blob,
    Scratch,
    MissingRegion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    /// Texture kinds assigned round-robin within each split.
    pub textures: Vec<TextureName>,
    pub wavelength: f64,
    pub amplitude: f64,
    pub noise_sigma: f64,
    pub defect: DefectName,
    pub defect_size: usize,
    /// Defect intensity shift as a multiple of the texture amplitude.
    pub defect_delta_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchSection {
    pub size: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetSection {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub time_embed_dim: usize,
    pub groups: usize,
    pub attention_levels: Vec<bool>,
    pub mid_attention: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_interval: u64,
    pub max_steps: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSection {
    pub t_star: usize,
    pub draws: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlurName {
    Gaussian,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSection {
    pub blur: BlurName,
    pub blur_radius: usize,
    pub blur_sigma: f64,
    pub window: usize,
    pub window_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestSection {
    pub n_estimators: usize,
    pub subsample: usize,
    pub contamination: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub start: f64,
    pub end: f64,
    pub step: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train_dir: None,
            image_height: 100,
            image_width: 100,
        }
    }
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            n_train: 81,
            n_test_normal: 20,
            n_test_anomalous: 20,
            textures: vec![TextureName::Stripes45, TextureName::Stripes135],
            wavelength: 8.0,
            amplitude: 0.25,
            noise_sigma: 0.005,
            defect: DefectName::Blob,
            defect_size: 12,
            defect_delta_factor: 0.3,
        }
    }
}

impl Default for PatchSection {
    fn default() -> Self {
        PatchSection { size: 28, stride: 1 }
    }
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl Default for UNetSection {
    fn default() -> Self {
        let d = UNetConfig::default();
        UNetSection {
            base_channels: d.base_channels,
            channel_multipliers: d.channel_multipliers,
            time_embed_dim: d.time_embed_dim,
            groups: d.groups,
            attention_levels: d.attention_levels,
            mid_attention: d.mid_attention,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            checkpoint_interval: 0,
            max_steps: None,
        }
    }
}

impl Default for InferenceSection {
    fn default() -> Self {
        let d = SingleStepConfig::default();
        InferenceSection {
            t_star: d.t_star,
            draws: d.draws,
            batch_size: d.batch_size,
        }
    }
}

impl Default for FeatureSection {
    fn default() -> Self {
        let d = FeatureParams::default();
        FeatureSection {
            blur: BlurName::Gaussian,
            blur_radius: d.blur_radius,
            blur_sigma: d.blur_sigma,
            window: d.window,
            window_stride: d.window_stride,
        }
    }
}

impl Default for ForestSection {
    fn default() -> Self {
        let d = ForestConfig::default();
        ForestSection {
            n_estimators: d.n_estimators,
            subsample: d.subsample,
            contamination: d.contamination,
        }
    }
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            start: 0.0,
            end: 0.5,
            step: 0.05,
        }
    }
}

/// Per-stage seeds derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub synth: u64,
    pub model_init: u64,
    pub train: u64,
    /// Base of the per-image noise seeds used by fit-detector and detect.
    pub inference: u64,
    pub forest: u64,
}

fn invalid(field: &str, detail: impl std::fmt::Display) -> CliError {
    CliError::Invalid(format!("config field `{field}`: {detail}"))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Invalid(msg) => CliError::Invalid(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Invalid(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn stage_seeds(&self) -> StageSeeds {
        StageSeeds {
            synth: derive_seed(self.seed, &[1]),
            model_init: derive_seed(self.seed, &[2]),
            train: derive_seed(self.seed, &[3]),
            inference: derive_seed(self.seed, &[4]),
            forest: derive_seed(self.seed, &[5]),
        }
    }

    /// Checks every section against the preconditions of the stage that uses it.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.data.image_height, self.data.image_width);
        if h == 0 || w == 0 {
            return Err(invalid("data.image_height/image_width", "must be positive"));
        }
        let counts = [
            ("patch.size", self.patch.size),
            ("patch.stride", self.patch.stride),
            ("schedule.timesteps", self.schedule.timesteps),
            ("unet.base_channels", self.unet.base_channels),
            ("train.batch_size", self.train.batch_size),
            ("inference.t_star", self.inference.t_star),
            ("inference.draws", self.inference.draws),
            ("inference.batch_size", self.inference.batch_size),
        ];
        if let Some((field, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(field, "must be at least 1"));
        }
        self.grid().map_err(|e| invalid("patch", e))?;
        self.schedule().map_err(|e| invalid("schedule", e))?;
        self.unet_config().validate().map_err(|e| invalid("unet", e))?;
        self.train_config().validate().map_err(|e| invalid("train", e))?;
        if self.train.epochs == 0 {
            return Err(invalid("train.epochs", "must be at least 1"));
        }
        let sched = self.schedule()?;
        self.single_step()
            .validate(&sched)
            .map_err(|e| invalid("inference", e))?;
        let fp = self.feature_params();
        blur_kernel(fp.blur, fp.blur_radius, fp.blur_sigma).map_err(|e| invalid("features.blur", e))?;
        if fp.window == 0 || fp.window > h.min(w) {
            return Err(invalid(
                "features.window",
                format!("{} must lie in 1..={}", fp.window, h.min(w)),
            ));
        }
        if fp.window_stride == 0 {
            return Err(invalid("features.window_stride", "must be at least 1"));
        }
        if self.forest.n_estimators == 0 {
            return Err(invalid("forest.n_estimators", "must be at least 1"));
        }
        if self.forest.subsample < 2 {
            return Err(invalid("forest.subsample", "must be at least 2"));
        }
        if !(0.0..=0.5).contains(&self.forest.contamination) {
            return Err(invalid(
                "forest.contamination",
                format!("{} is outside [0, 0.5]", self.forest.contamination),
            ));
        }
        let s = &self.sweep;
        if !(0.0 <= s.start && s.start <= s.end && s.end <= 0.5 && s.step > 0.0) {
            return Err(invalid("sweep", "need 0 <= start <= end <= 0.5 and step > 0"));
        }
        self.validate_synth()
    }

    fn validate_synth(&self) -> Result<()> {
        let s = &self.synth;
        if s.n_train + s.n_test_normal + s.n_test_anomalous == 0 {
            return Err(invalid("synth.n_train", "all image counts are zero"));
        }
        if s.textures.is_empty() {
            return Err(invalid("synth.textures", "list at least one texture"));
        }
        self.corpus_spec().validate().map_err(|e| invalid("synth", e))
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        Ok(PatchGrid::new(
            self.data.image_height,
            self.data.image_width,
            self.patch.size,
            self.patch.stride,
        )?)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(make_schedule(
            self.schedule.timesteps,
            self.schedule.beta_start,
            self.schedule.beta_end,
        )?)
    }

    pub fn unet_config(&self) -> UNetConfig {
        let u = &self.unet;
        UNetConfig {
            base_channels: u.base_channels,
            channel_multipliers: u.channel_multipliers.clone(),
            time_embed_dim: u.time_embed_dim,
            groups: u.groups,
            attention_levels: u.attention_levels.clone(),
            mid_attention: u.mid_attention,
            patch_size: self.patch.size,
            timesteps: self.schedule.timesteps,
            ..UNetConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            seed: self.stage_seeds().train,
            checkpoint_interval: self.train.checkpoint_interval,
            max_steps: self.train.max_steps,
        }
    }

    pub fn single_step(&self) -> SingleStepConfig {
        SingleStepConfig {
            t_star: self.inference.t_star,
            draws: self.inference.draws,
            batch_size: self.inference.batch_size,
        }
    }

    pub fn feature_params(&self) -> FeatureParams {
        FeatureParams {
            blur: match self.features.blur {
                BlurName::Gaussian => BlurKind::Gaussian,
                BlurName::Uniform => BlurKind::Uniform,
            },
            blur_radius: self.features.blur_radius,
            blur_sigma: self.features.blur_sigma,
            window: self.features.window,
            window_stride: self.features.window_stride,
        }
    }

    pub fn forest_config(&self) -> ForestConfig {
        ForestConfig {
            n_estimators: self.forest.n_estimators,
            subsample: self.forest.subsample,
            contamination: self.forest.contamination,
            seed: self.stage_seeds().forest,
        }
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        let s = &self.synth;
        let textures = s
            .textures
            .iter()
            .map(|t| TextureSpec {
                kind: match t {
                    TextureName::Stripes45 => TextureKind::Stripes45,
                    TextureName::Stripes135 => TextureKind::Stripes135,
                    TextureName::Stochastic => TextureKind::Stochastic,
                },
                wavelength: s.wavelength,
                amplitude: s.amplitude,
                noise_sigma: s.noise_sigma,
                seed: 0,
            })
            .collect();
        CorpusSpec {
            image_h: self.data.image_height,
            image_w: self.data.image_width,
            textures,
            defect: DefectSpec {
                kind: match s.defect {
                    DefectName::Blob => DefectKind::Blob,
                    DefectName::Scratch => DefectKind::Scratch,
                    DefectName::MissingRegion => DefectKind::MissingRegion,
                },
                size: s.defect_size,
                intensity_delta: s.defect_delta_factor * s.amplitude,
                position: None,
            },
            n_train: s.n_train,
            n_test_normal: s.n_test_normal,
            n_test_anomalous: s.n_test_anomalous,
            seed: self.stage_seeds().synth,
        }
    }

    /// Contamination values `start, start + step, ..` up to `end` inclusive.
    pub fn sweep_grid(&self) -> Vec<f64> {
        let s = &self.sweep;
        let n = ((s.end - s.start) / s.step + 1e-9).floor() as usize + 1;
        let last = s.start + s.step * (n - 1) as f64;
        linear_grid(s.start, last, n)
    }
}
