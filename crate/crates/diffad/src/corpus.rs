//! On-disk synthetic corpus:
//! `root/{train/normal, test/normal, test/anomalous, test/masks}/NNNN.png`
//! plus `root/manifest.csv`.

use std::path::{Path, PathBuf};

use diffad_core::datagen::{gen_sample, CorpusSpec, Sample, Split};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::fsutil::{create_dir, write_atomic};
use crate::imageio::{save_gray8, to_gray8};

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    /// Image path relative to the corpus root.
    pub path: String,
    pub label: String,
    pub split: String,
    pub index: usize,
    pub texture: String,
    pub wavelength: f64,
    pub amplitude: f64,
    pub noise_sigma: f64,
    pub defect: Option<String>,
    pub defect_size: Option<usize>,
    pub defect_delta: Option<f64>,
    pub defect_row: Option<usize>,
    pub defect_col: Option<usize>,
    pub mask_path: Option<String>,
    pub seed: u64,
}

fn split_dir(split: Split) -> &'static str {
    match split {
        Split::TrainNormal => "train/normal",
        Split::TestNormal => "test/normal",
        Split::TestAnomalous => "test/anomalous",
    }
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::TrainNormal => "train",
        Split::TestNormal | Split::TestAnomalous => "test",
    }
}

pub fn label(anomalous: bool) -> &'static str {
    if anomalous {
        "anomalous"
    } else {
        "normal"
    }
}

fn manifest_row(s: &Sample) -> ManifestRow {
    let path = format!("{}/{:04}.png", split_dir(s.split), s.index);
    let mask_path = s.split.is_anomalous().then(|| format!("test/masks/{:04}.png", s.index));
    ManifestRow {
        path,
        label: label(s.split.is_anomalous()).into(),
        split: split_name(s.split).into(),
        index: s.index,
        texture: s.texture.kind.name().into(),
        wavelength: s.texture.wavelength,
        amplitude: s.texture.amplitude,
        noise_sigma: s.texture.noise_sigma,
        defect: s.defect.map(|d| d.kind.name().into()),
        defect_size: s.defect.map(|d| d.size),
        defect_delta: s.defect.map(|d| d.intensity_delta),
        defect_row: s.defect.and_then(|d| d.position).map(|p| p.0),
        defect_col: s.defect.and_then(|d| d.position).map(|p| p.1),
        mask_path,
        seed: s.seed,
    }
}

/// Generates and writes every image, mask and the manifest; returns the
/// manifest rows in generation order.
pub fn write_corpus(spec: &CorpusSpec, root: &Path) -> Result<Vec<ManifestRow>> {
    spec.validate()?;
    for dir in ["train/normal", "test/normal", "test/anomalous", "test/masks"] {
        create_dir(&root.join(dir))?;
    }
    let plan = [
        (Split::TrainNormal, spec.n_train),
        (Split::TestNormal, spec.n_test_normal),
        (Split::TestAnomalous, spec.n_test_anomalous),
    ];
    let (h, w) = (spec.image_h, spec.image_w);
    let mut rows = Vec::new();
    for (split, n) in plan {
        for i in 0..n {
            let s = gen_sample(spec, split, i)?;
            let row = manifest_row(&s);
            save_gray8(&root.join(&row.path), to_gray8(&s.image), h, w)?;
            if let Some(mask) = &row.mask_path {
                save_gray8(&root.join(mask), to_gray8(&s.mask), h, w)?;
            }
            rows.push(row);
        }
    }
    let manifest = root.join(MANIFEST_FILE);
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        wtr.serialize(r).map_err(|e| CliError::csv(&manifest, e))?;
    }
    let bytes = wtr.into_inner().map_err(|e| CliError::io(&manifest, e.into_error()))?;
    write_atomic(&manifest, &bytes)?;
    Ok(rows)
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRow>> {
    let path = root.join(MANIFEST_FILE);
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| CliError::csv(&path, e))?;
    rdr.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CliError::csv(&path, e))
}

/// A test image with its ground-truth label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// Path relative to the corpus root; also the image id.
    pub id: String,
    pub path: PathBuf,
    pub anomalous: bool,
}

/// The test split of a corpus in manifest order.
pub fn test_images(root: &Path) -> Result<Vec<LabeledImage>> {
    let manifest = root.join(MANIFEST_FILE);
    read_manifest(root)?
        .into_iter()
        .filter(|r| r.split == "test")
        .map(|r| {
            let anomalous = match r.label.as_str() {
                "anomalous" => true,
                "normal" => false,
                other => {
                    return Err(CliError::format(
                        &manifest,
                        format!("unknown label `{other}` for {}", r.path),
                    ))
                }
            };
            Ok(LabeledImage {
                path: root.join(&r.path),
                id: r.path,
                anomalous,
            })
        })
        .collect()
}
