//! Self-describing model files written by `train` and read by `predict`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use loogp::classify::ClassifierState;
use loogp::harness::data::Normalizer;
use loogp::harness::experiment::Task;
use loogp::{GpError, Hyperparams, KernelKind, TrainConfig};

pub const FORMAT: &str = "loogp-model";
pub const VERSION: u32 = 1;

/// Location and content hash of the training CSV. Prediction conditions on
/// the training points, so the same file must be available at test time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingData {
    pub path: PathBuf,
    pub sha256: String,
    pub rows: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub task: Task,
    pub kernel: KernelKind,
    pub k: usize,
    pub feature_names: Vec<String>,
    /// Fitted on the training CSV; predictions are reported in original units.
    pub normalizer: Normalizer,
    /// Regression hyperparameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyperparams: Option<Hyperparams>,
    /// Classification heads with their variational factors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier: Option<ClassifierState>,
    /// Class names in head order (multi-class), or the ±1 label set (binary).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<String>>,
    pub train_config: TrainConfig,
    pub final_objective: Option<f64>,
    pub training_data: TrainingData,
}

impl ModelFile {
    pub fn load(path: &Path) -> Result<Self, GpError> {
        let text = std::fs::read_to_string(path).map_err(|e| GpError::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.format != FORMAT || m.version != VERSION {
            return Err(GpError::Format(format!(
                "{}: not a {FORMAT} v{VERSION} file",
                path.display()
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), GpError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| GpError::io(path, e))
    }
}

pub fn sha256_file(path: &Path) -> Result<String, GpError> {
    let bytes = std::fs::read(path).map_err(|e| GpError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
