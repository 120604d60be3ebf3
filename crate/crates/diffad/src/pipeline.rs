//! The six pipeline commands. Each writes its outputs plus a run manifest
//! into the output directory and returns the manifest.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use diffad_core::diffusion::{image_noise_map, to_model_range, train, NoiseSchedule, PatchDataset, SingleStepConfig};
use diffad_core::eval::{compute_metrics, sensitivity_sweep, MetricsReport};
use diffad_core::features::{extract_feature_vector, pixel_heatmap, FeatureParams, FeatureVector};
use diffad_core::iforest::{fit, IsolationForestModel};
use diffad_core::numerics::Tensor;
use diffad_core::patching::{PatchGrid, StitchedMap};
use diffad_core::rng::derive_seed;
use diffad_core::unet::UNetModel;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointHeader};
use crate::config::RunConfig;
use crate::corpus::{self, label};
use crate::error::{require_exists, CliError, Result};
use crate::forest;
use crate::fsutil::{create_dir, display_rel, id_key, list_images, write_atomic};
use crate::imageio::{load_gray, save_f32_raw, save_gray8};
use crate::manifest::{ImageTiming, RunManifest};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const FOREST_FILE: &str = "forest.json";
pub const TRAIN_FEATURES_FILE: &str = "train_features.csv";
pub const VERDICTS_FILE: &str = "verdicts.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const HEATMAP_DIR: &str = "heatmaps";
pub const FEATURE_NAMES: [&str; 2] = ["global_l2", "local_max_l2"];

/// Settings shared by every command.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    /// Worker threads for per-image work; 0 uses the available parallelism.
    pub threads: usize,
}

impl Context {
    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| CliError::Invalid(format!("cannot start {} worker threads: {e}", self.threads)))
    }

    fn manifest(&self, command: &str) -> Result<RunManifest> {
        let threads = self.pool()?.current_num_threads();
        Ok(RunManifest::new(command, &self.config, threads))
    }

    fn finish(&self, manifest: RunManifest) -> Result<RunManifest> {
        manifest.write(&self.out)?;
        Ok(manifest)
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for r in rows {
        wtr.serialize(r).map_err(|e| CliError::csv(path, e))?;
    }
    let bytes = wtr.into_inner().map_err(|e| CliError::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::csv(path, e))?;
    rdr.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CliError::csv(path, e))
}

pub fn synth(ctx: &Context) -> Result<RunManifest> {
    let mut m = ctx.manifest("synth")?;
    let spec = ctx.config.corpus_spec();
    let rows = m.timed("generate", || corpus::write_corpus(&spec, &ctx.out))?;
    m.count("images", rows.len() as u64);
    m.count("train_normal", spec.n_train as u64);
    m.count("test_normal", spec.n_test_normal as u64);
    m.count("test_anomalous", spec.n_test_anomalous as u64);
    m.artifact(&ctx.out, &ctx.out.join(corpus::MANIFEST_FILE))?;
    ctx.finish(m)
}

/// Readable images of a directory as `(id, [H, W] in [0, 1])`; unreadable
/// files are skipped and reported in the manifest.
fn load_image_dir(dir: &Path, cfg: &RunConfig, m: &mut RunManifest) -> Result<Vec<(String, Tensor)>> {
    require_exists(dir, "image directory")?;
    let (h, w) = (cfg.data.image_height, cfg.data.image_width);
    let mut images = Vec::new();
    let mut skipped = 0u64;
    for path in list_images(dir)? {
        match load_gray(&path, h, w) {
            Ok(img) => images.push((display_rel(&path, dir), img)),
            Err(e) => {
                eprintln!("warning: skipping unreadable image {e}");
                m.warnings.push(format!("skipped unreadable image: {e}"));
                skipped += 1;
            }
        }
    }
    m.count("images", images.len() as u64);
    m.count("skipped_images", skipped);
    if images.is_empty() {
        return Err(CliError::Invalid(format!("no readable images in {}", dir.display())));
    }
    Ok(images)
}

fn train_dir(cfg: &RunConfig, arg: Option<&Path>) -> Result<PathBuf> {
    arg.map(Path::to_path_buf)
        .or_else(|| cfg.data.train_dir.clone())
        .ok_or_else(|| CliError::Invalid("no training directory: pass --train-dir or set data.train_dir".into()))
}

#[derive(Debug, Serialize, Deserialize)]
struct LossRow {
    step: u64,
    loss: f32,
}

pub fn train_model(ctx: &Context, train_dir_arg: Option<&Path>) -> Result<RunManifest> {
    let cfg = &ctx.config;
    let mut m = ctx.manifest("train")?;
    let dir = train_dir(cfg, train_dir_arg)?;
    m.input("train_dir", &dir);
    let start = Instant::now();
    let images = load_image_dir(&dir, cfg, &mut m)?;
    m.record_stage("load", start);
    let grid = cfg.grid()?;
    let data = PatchDataset::new(images.iter().map(|(_, t)| to_model_range(t)).collect(), grid)?;
    m.count("patches", data.len() as u64);
    let sched = cfg.schedule()?;
    let seeds = cfg.stage_seeds();
    let mut model = UNetModel::new(cfg.unet_config(), seeds.model_init)?;
    m.count("parameters", model.parameter_count() as u64);
    let header = |steps: u64, epochs_completed: usize| CheckpointHeader {
        unet: (&cfg.unet_config()).into(),
        beta_start: cfg.schedule.beta_start,
        beta_end: cfg.schedule.beta_end,
        init_seed: seeds.model_init,
        train_seed: seeds.train,
        steps,
        epochs_completed,
    };
    let ckpt_dir = ctx.out.join("checkpoints");
    let mut intermediate = Vec::new();
    let report = m.timed("train", || {
        let steps_per_epoch = data.len().div_ceil(cfg.train.batch_size) as u64;
        let r = train(&mut model, &data, &cfg.train_config(), &sched, |step, model| {
            let path = ckpt_dir.join(format!("step-{step:08}.ckpt"));
            checkpoint::save(&path, &header(step, (step / steps_per_epoch) as usize), model)
                .map_err(|e| diffad_core::Error::State(e.to_string()))?;
            intermediate.push(path);
            Ok(())
        })?;
        Ok(r)
    })?;
    m.count("steps", report.steps);
    m.count("epochs_completed", report.epochs_completed as u64);
    let ckpt = ctx.out.join(CHECKPOINT_FILE);
    checkpoint::save(&ckpt, &header(report.steps, report.epochs_completed), &model)?;
    let loss = ctx.out.join(LOSS_FILE);
    let rows: Vec<LossRow> = report
        .loss_history
        .iter()
        .enumerate()
        .map(|(i, &loss)| LossRow {
            step: i as u64 + 1,
            loss,
        })
        .collect();
    write_csv(&loss, &rows)?;
    for path in intermediate.iter().chain([&ckpt, &loss]) {
        m.artifact(&ctx.out, path)?;
    }
    ctx.finish(m)
}

/// Loads a checkpoint and checks it against the configured geometry and schedule.
pub fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<(CheckpointHeader, UNetModel)> {
    require_exists(path, "checkpoint")?;
    let (header, model) = checkpoint::load(path)?;
    let mismatch = |what: &str, stored: String, configured: String| {
        CliError::Invalid(format!(
            "checkpoint {} has {what} {stored} but the configuration has {configured}",
            path.display()
        ))
    };
    if header.unet.patch_size != cfg.patch.size {
        return Err(mismatch(
            "patch size",
            header.unet.patch_size.to_string(),
            cfg.patch.size.to_string(),
        ));
    }
    if header.unet.timesteps != cfg.schedule.timesteps {
        return Err(mismatch(
            "timesteps",
            header.unet.timesteps.to_string(),
            cfg.schedule.timesteps.to_string(),
        ));
    }
    if (header.beta_start, header.beta_end) != (cfg.schedule.beta_start, cfg.schedule.beta_end) {
        return Err(mismatch(
            "beta range",
            format!("{}..{}", header.beta_start, header.beta_end),
            format!("{}..{}", cfg.schedule.beta_start, cfg.schedule.beta_end),
        ));
    }
    Ok((header, model))
}

/// Model plus everything the per-image analysis needs.
pub struct Detector<'a> {
    pub model: &'a UNetModel,
    pub sched: NoiseSchedule,
    pub grid: PatchGrid,
    pub single_step: SingleStepConfig,
    pub features: FeatureParams,
    /// Base seed for the per-image noise streams.
    pub seed: u64,
}

impl<'a> Detector<'a> {
    pub fn new(cfg: &RunConfig, model: &'a UNetModel) -> Result<Self> {
        Ok(Detector {
            model,
            sched: cfg.schedule()?,
            grid: cfg.grid()?,
            single_step: cfg.single_step(),
            features: cfg.feature_params(),
            seed: cfg.stage_seeds().inference,
        })
    }

    /// Noise seed of the image with this id.
    pub fn image_seed(&self, id: &str) -> u64 {
        derive_seed(self.seed, &[id_key(id)])
    }

    /// Single-step noise map and feature vector of a `[H, W]` image in `[0, 1]`.
    pub fn analyze(&self, id: &str, image: &Tensor) -> Result<(StitchedMap, FeatureVector)> {
        let map = image_noise_map(
            self.model,
            &to_model_range(image),
            &self.grid,
            &self.sched,
            &self.single_step,
            self.image_seed(id),
        )?;
        let f = extract_feature_vector(&map, &self.features)?;
        Ok((map, f))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub id: String,
    pub global_l2: f64,
    pub local_max_l2: f64,
    pub score: f64,
}

pub fn fit_detector(ctx: &Context, checkpoint: &Path, train_dir_arg: Option<&Path>) -> Result<RunManifest> {
    let cfg = &ctx.config;
    let mut m = ctx.manifest("fit-detector")?;
    let (_, model) = load_checkpoint(cfg, checkpoint)?;
    m.input("checkpoint", checkpoint);
    let dir = train_dir(cfg, train_dir_arg)?;
    m.input("train_dir", &dir);
    let start = Instant::now();
    let images = load_image_dir(&dir, cfg, &mut m)?;
    m.record_stage("load", start);
    let det = Detector::new(cfg, &model)?;
    let pool = ctx.pool()?;
    let features: Vec<FeatureVector> = m.timed("features", || {
        pool.install(|| {
            images
                .par_iter()
                .map(|(id, img)| det.analyze(id, img).map(|(_, f)| f))
                .collect()
        })
    })?;
    let rows: Vec<[f64; 2]> = features.iter().map(|f| f.to_array()).collect();
    let forest_model = m.timed("fit", || Ok(fit(&rows, &cfg.forest_config())?))?;
    m.count("trees", forest_model.trees.len() as u64);
    let forest_path = ctx.out.join(FOREST_FILE);
    forest::save(&forest_path, &forest_model, &FEATURE_NAMES)?;
    let feature_rows: Vec<FeatureRow> = images
        .iter()
        .zip(&features)
        .zip(&forest_model.training_scores)
        .map(|(((id, _), f), &score)| FeatureRow {
            id: id.clone(),
            global_l2: f.global_l2,
            local_max_l2: f.local_max_l2,
            score,
        })
        .collect();
    let feature_path = ctx.out.join(TRAIN_FEATURES_FILE);
    write_csv(&feature_path, &feature_rows)?;
    m.artifact(&ctx.out, &forest_path)?;
    m.artifact(&ctx.out, &feature_path)?;
    ctx.finish(m)
}

pub fn load_forest(path: &Path) -> Result<IsolationForestModel> {
    require_exists(path, "forest file")?;
    let model = forest::load(path)?;
    if model.dims != FEATURE_NAMES.len() {
        return Err(CliError::format(
            path,
            format!(
                "forest expects {} features, detector produces {}",
                model.dims,
                FEATURE_NAMES.len()
            ),
        ));
    }
    Ok(model)
}

/// Where `detect` reads its images from.
#[derive(Debug, Clone)]
pub enum DetectInput {
    /// Test split of a synthetic corpus; labels come from its manifest.
    Corpus(PathBuf),
    /// Every image in a directory, unlabeled.
    Images(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRow {
    pub id: String,
    pub global_l2: f64,
    pub local_max_l2: f64,
    pub score: f64,
    pub predicted: String,
    /// Ground truth when known.
    pub actual: Option<String>,
}

struct Job {
    id: String,
    path: PathBuf,
    actual: Option<bool>,
}

fn heatmap_stem(id: &str) -> String {
    let stem = id.strip_suffix(".png").unwrap_or(id);
    stem.replace(['/', '\\'], "_")
}

pub fn detect(
    ctx: &Context,
    checkpoint: &Path,
    forest_path: &Path,
    input: &DetectInput,
    all_heatmaps: bool,
) -> Result<RunManifest> {
    let cfg = &ctx.config;
    let mut m = ctx.manifest("detect")?;
    let (_, model) = load_checkpoint(cfg, checkpoint)?;
    let forest_model = load_forest(forest_path)?;
    m.input("checkpoint", checkpoint);
    m.input("forest", forest_path);
    let jobs: Vec<Job> = match input {
        DetectInput::Corpus(root) => {
            require_exists(root, "corpus")?;
            m.input("corpus", root);
            corpus::test_images(root)?
                .into_iter()
                .map(|l| Job {
                    id: l.id,
                    path: l.path,
                    actual: Some(l.anomalous),
                })
                .collect()
        }
        DetectInput::Images(dir) => {
            require_exists(dir, "image directory")?;
            m.input("images", dir);
            list_images(dir)?
                .into_iter()
                .map(|p| Job {
                    id: display_rel(&p, dir),
                    path: p,
                    actual: None,
                })
                .collect()
        }
    };
    if jobs.is_empty() {
        return Err(CliError::Invalid("no images to run detection on".into()));
    }
    let det = Detector::new(cfg, &model)?;
    let (h, w) = (cfg.data.image_height, cfg.data.image_width);
    let heat_dir = ctx.out.join(HEATMAP_DIR);
    model.reset_forward_evaluations();
    let pool = ctx.pool()?;
    let results: Vec<(VerdictRow, Option<PathBuf>, f64)> = m.timed("detect", || {
        pool.install(|| {
            jobs.par_iter()
                .map(|job| {
                    let start = Instant::now();
                    let img = load_gray(&job.path, h, w)?;
                    let (map, f) = det.analyze(&job.id, &img)?;
                    let score = forest_model.score(&f.to_array())?;
                    let flagged = forest_model.verdict_for(score).is_anomalous();
                    let heatmap = if flagged || all_heatmaps {
                        Some(pixel_heatmap(&map, &det.features)?)
                    } else {
                        None
                    };
                    let seconds = start.elapsed().as_secs_f64();
                    let heat_path = match heatmap {
                        Some(hm) => {
                            let stem = heatmap_stem(&job.id);
                            let png = heat_dir.join(format!("{stem}.png"));
                            save_gray8(&png, hm.to_gray8(), h, w)?;
                            save_f32_raw(&heat_dir.join(format!("{stem}.f32")), &hm.values)?;
                            Some(png)
                        }
                        None => None,
                    };
                    let row = VerdictRow {
                        id: job.id.clone(),
                        global_l2: f.global_l2,
                        local_max_l2: f.local_max_l2,
                        score,
                        predicted: label(flagged).into(),
                        actual: job.actual.map(|a| label(a).into()),
                    };
                    Ok((row, heat_path, seconds))
                })
                .collect::<Result<Vec<_>>>()
        })
    })?;
    let evaluations = model.forward_evaluations();
    let expected = (jobs.len() * det.grid.len() * det.single_step.draws) as u64;
    if evaluations != expected {
        return Err(CliError::Core(diffad_core::Error::State(format!(
            "detect ran {evaluations} U-Net evaluations, expected one per patch per draw ({expected})"
        ))));
    }
    m.count("unet_forward_evaluations", evaluations);
    m.count("images", jobs.len() as u64);
    m.count("patches_per_image", det.grid.len() as u64);
    let mut rows = Vec::with_capacity(results.len());
    let mut heatmaps = 0u64;
    for (row, heat, seconds) in results {
        m.per_image_seconds.push(ImageTiming {
            id: row.id.clone(),
            seconds,
        });
        if heat.is_some() {
            heatmaps += 1;
        }
        rows.push(row);
    }
    m.count(
        "flagged",
        rows.iter().filter(|r| r.predicted == "anomalous").count() as u64,
    );
    m.count("heatmaps", heatmaps);
    let verdicts = ctx.out.join(VERDICTS_FILE);
    write_csv(&verdicts, &rows)?;
    m.artifact(&ctx.out, &verdicts)?;
    ctx.finish(m)
}

/// Verdict rows with ground truth resolved from `labels` (a corpus root)
/// or, failing that, from the rows' own `actual` column.
fn labeled_verdicts(verdicts: &Path, labels: Option<&Path>) -> Result<Vec<(VerdictRow, bool)>> {
    require_exists(verdicts, "verdicts file")?;
    let rows: Vec<VerdictRow> = read_csv(verdicts)?;
    let truth: Option<HashMap<String, bool>> = match labels {
        Some(root) => {
            require_exists(root, "labels corpus")?;
            Some(
                corpus::test_images(root)?
                    .into_iter()
                    .map(|l| (l.id, l.anomalous))
                    .collect(),
            )
        }
        None => None,
    };
    rows.into_iter()
        .map(|r| {
            let actual = match &truth {
                Some(t) => t.get(&r.id).copied(),
                None => r.actual.as_deref().map(|a| a == "anomalous"),
            };
            let actual =
                actual.ok_or_else(|| CliError::Invalid(format!("no ground-truth label for image {}", r.id)))?;
            Ok((r, actual))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub images: usize,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub warnings: String,
}

impl From<&MetricsReport> for MetricsRow {
    fn from(r: &MetricsReport) -> Self {
        MetricsRow {
            images: r.counts.total(),
            tp: r.counts.tp,
            fp: r.counts.fp,
            tn: r.counts.tn,
            fn_: r.counts.fn_,
            accuracy: r.accuracy,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            warnings: r
                .warnings
                .iter()
                .map(|w| format!("{w:?}"))
                .collect::<Vec<_>>()
                .join(";"),
        }
    }
}

pub fn evaluate(ctx: &Context, verdicts: &Path, labels: Option<&Path>) -> Result<RunManifest> {
    let mut m = ctx.manifest("eval")?;
    m.input("verdicts", verdicts);
    let rows = labeled_verdicts(verdicts, labels)?;
    let pairs: Vec<(bool, bool)> = rows.iter().map(|(r, a)| (r.predicted == "anomalous", *a)).collect();
    let report = compute_metrics(&pairs)?;
    let path = ctx.out.join(METRICS_FILE);
    write_csv(&path, &[MetricsRow::from(&report)])?;
    m.count("images", pairs.len() as u64);
    m.artifact(&ctx.out, &path)?;
    ctx.finish(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCsvRow {
    pub contamination: f64,
    pub threshold: f64,
    pub flagged: usize,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn sweep(ctx: &Context, forest_path: &Path, verdicts: &Path, labels: Option<&Path>) -> Result<RunManifest> {
    let mut m = ctx.manifest("sweep")?;
    m.input("forest", forest_path);
    m.input("verdicts", verdicts);
    let forest_model = load_forest(forest_path)?;
    let scored: Vec<(f64, bool)> = labeled_verdicts(verdicts, labels)?
        .into_iter()
        .map(|(r, a)| (r.score, a))
        .collect();
    let grid = ctx.config.sweep_grid();
    let table = sensitivity_sweep(&scored, &grid, &forest_model.training_scores)?;
    let rows: Vec<SweepCsvRow> = table
        .iter()
        .map(|s| SweepCsvRow {
            contamination: s.contamination,
            threshold: s.threshold,
            flagged: s.report.counts.flagged(),
            tp: s.report.counts.tp,
            fp: s.report.counts.fp,
            tn: s.report.counts.tn,
            fn_: s.report.counts.fn_,
            accuracy: s.report.accuracy,
            precision: s.report.precision,
            recall: s.report.recall,
            f1: s.report.f1,
        })
        .collect();
    let path = ctx.out.join(SWEEP_FILE);
    write_csv(&path, &rows)?;
    m.count("grid_points", rows.len() as u64);
    m.artifact(&ctx.out, &path)?;
    ctx.finish(m)
}

/// Creates the output directory before a command runs.
pub fn prepare_out(ctx: &Context) -> Result<()> {
    create_dir(&ctx.out)
}
