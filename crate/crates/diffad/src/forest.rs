//! Self-describing JSON file for a fitted isolation forest. Floats are
//! written in shortest round-trip form, so a save/load cycle is exact.

use std::path::Path;

use diffad_core::iforest::{IsolationForestModel, IsolationTree, Node};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::fsutil::write_atomic;

pub const FOREST_FORMAT: &str = "diffad-isolation-forest";
pub const FOREST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NodeRecord {
    Split { dim: usize, value: f64, right: usize },
    Leaf { size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestFile {
    pub format: String,
    pub version: u32,
    pub feature_names: Vec<String>,
    pub dims: usize,
    pub n_estimators: usize,
    pub subsample_size: usize,
    pub contamination: f64,
    pub score_threshold: f64,
    pub seed: u64,
    pub training_scores: Vec<f64>,
    /// Each tree's nodes in preorder.
    pub trees: Vec<Vec<NodeRecord>>,
}

impl ForestFile {
    pub fn from_model(m: &IsolationForestModel, feature_names: &[&str]) -> Self {
        let trees = m
            .trees
            .iter()
            .map(|t| {
                t.nodes()
                    .iter()
                    .map(|n| match *n {
                        Node::Split { dim, value, right } => NodeRecord::Split { dim, value, right },
                        Node::Leaf { size } => NodeRecord::Leaf { size },
                    })
                    .collect()
            })
            .collect();
        ForestFile {
            format: FOREST_FORMAT.into(),
            version: FOREST_VERSION,
            feature_names: feature_names.iter().map(|s| s.to_string()).collect(),
            dims: m.dims,
            n_estimators: m.n_estimators,
            subsample_size: m.subsample_size,
            contamination: m.contamination,
            score_threshold: m.score_threshold,
            seed: m.seed,
            training_scores: m.training_scores.clone(),
            trees,
        }
    }

    pub fn to_model(&self) -> std::result::Result<IsolationForestModel, String> {
        if self.format != FOREST_FORMAT || self.version != FOREST_VERSION {
            return Err(format!(
                "unsupported forest file {} v{} (expected {FOREST_FORMAT} v{FOREST_VERSION})",
                self.format, self.version
            ));
        }
        if self.trees.len() != self.n_estimators {
            return Err(format!(
                "{} trees stored but n_estimators is {}",
                self.trees.len(),
                self.n_estimators
            ));
        }
        let trees = self
            .trees
            .iter()
            .map(|nodes| {
                let nodes = nodes
                    .iter()
                    .map(|n| match *n {
                        NodeRecord::Split { dim, value, right } => Node::Split { dim, value, right },
                        NodeRecord::Leaf { size } => Node::Leaf { size },
                    })
                    .collect();
                IsolationTree::from_nodes(nodes).map_err(|e| e.to_string())
            })
            .collect::<std::result::Result<_, _>>()?;
        Ok(IsolationForestModel {
            trees,
            dims: self.dims,
            n_estimators: self.n_estimators,
            subsample_size: self.subsample_size,
            contamination: self.contamination,
            score_threshold: self.score_threshold,
            seed: self.seed,
            training_scores: self.training_scores.clone(),
        })
    }
}

pub fn save(path: &Path, model: &IsolationForestModel, feature_names: &[&str]) -> Result<()> {
    let file = ForestFile::from_model(model, feature_names);
    let mut bytes = serde_json::to_vec_pretty(&file).map_err(|e| CliError::format(path, e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn load(path: &Path) -> Result<IsolationForestModel> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let file: ForestFile = serde_json::from_slice(&bytes).map_err(|e| CliError::format(path, e.to_string()))?;
    file.to_model().map_err(|m| CliError::format(path, m))
}
