//! Run reports: a self-describing record of one training run. The
//! `metrics` section is the part the determinism contract covers — two
//! runs of the same configuration and seed serialize it byte-identically.

use serde::{Deserialize, Serialize};

use crate::accountant::{FlopCount, GradientAudit, MemoryLedger};
use crate::backbones::BackboneSpec;
use crate::error::{Error, Result};
use crate::harness::{Strategy, TaskSpec, TrainConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfigEcho {
    pub backbone: BackboneSpec,
    pub task: TaskSpec,
    pub strategy: Strategy,
    pub train: TrainConfig,
    /// Which domain split the run trained on ("source" or "target").
    pub domain: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_batch_loss: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsSection {
    pub per_epoch: Vec<EpochMetrics>,
    pub final_test_accuracy: f64,
    pub final_test_loss: f64,
    /// Full-train-split loss before the first update.
    pub initial_train_loss: f64,
    /// Full-train-split loss after the last epoch.
    pub final_train_loss: f64,
    pub trainable_scalars: usize,
    pub steps: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfigEcho,
    pub metrics: MetricsSection,
    pub memory: MemoryLedger,
    pub gradient_audit: GradientAudit,
    pub flops: Option<FlopCount>,
    /// Excluded from the determinism contract.
    pub wall_time_secs: f64,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<RunReport> {
        serde_json::from_str(s).map_err(|e| Error::Contract(format!("report parse: {e}")))
    }

    /// Canonical bytes of the metrics section (the reproducibility unit).
    pub fn metrics_json(&self) -> String {
        serde_json::to_string(&self.metrics).expect("metrics serialize")
    }
}
