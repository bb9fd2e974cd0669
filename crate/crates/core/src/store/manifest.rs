use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_header_only, Split, StoreError};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerForm {
    /// N×C×H×W feature maps.
    Conv,
    /// N×C vectors.
    Vector,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    /// Path relative to the run directory.
    pub file: String,
    pub shape: Vec<usize>,
    pub form: LayerForm,
}

/// Index of one capture run: what was dumped, from which architecture, and how
/// well the model did on the captured split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: String,
    pub arch: String,
    pub dsl_hash: String,
    pub input_size: usize,
    pub split: Split,
    pub layers: Vec<LayerEntry>,
    pub labels: String,
    pub num_classes: usize,
    pub model_accuracy: f64,
    pub seed: u64,
    pub threads: usize,
}

impl RunManifest {
    pub fn load(run_dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let text = std::fs::read_to_string(run_dir.as_ref().join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, run_dir: impl AsRef<Path>) -> Result<(), StoreError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(run_dir.as_ref().join(MANIFEST_FILE), text)?;
        Ok(())
    }

    /// Checks that every listed file exists with the recorded shape and that all
    /// dumps agree on the sample count.
    pub fn validate(&self, run_dir: impl AsRef<Path>) -> Result<(), StoreError> {
        let dir = run_dir.as_ref();
        if !(0.0..=1.0).contains(&self.model_accuracy) {
            return Err(StoreError::Manifest(format!(
                "model accuracy {} outside [0, 1]",
                self.model_accuracy
            )));
        }
        let labels = read_header_only(dir.join(&self.labels))?;
        if labels.shape.len() != 1 {
            return Err(StoreError::Manifest(format!(
                "labels must be one-dimensional, found {:?}",
                labels.shape
            )));
        }
        let n = labels.shape[0];
        for layer in &self.layers {
            let h = read_header_only(dir.join(&layer.file))?;
            if h.shape != layer.shape {
                return Err(StoreError::Manifest(format!(
                    "{}: shape {:?} on disk, {:?} in manifest",
                    layer.name, h.shape, layer.shape
                )));
            }
            let rank = match layer.form {
                LayerForm::Conv => 4,
                LayerForm::Vector => 2,
            };
            if h.shape.len() != rank || h.shape[0] != n {
                return Err(StoreError::Manifest(format!(
                    "{}: shape {:?} inconsistent with {n} labelled samples",
                    layer.name, h.shape
                )));
            }
        }
        Ok(())
    }
}
