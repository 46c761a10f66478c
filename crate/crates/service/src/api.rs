//! Request and response bodies.

use invexnet::classifier::RegionReport;
use invexnet::morph::MorphOp;
use invexnet::nn::Activation;
use invexnet::verify::GridRaster;
use serde::{Deserialize, Serialize};

pub const DEFAULT_SEED: u64 = 147;
pub const DEFAULT_GRID: usize = 100;
pub const MAX_GRID: usize = 400;
pub const MAX_TRAIN_STEPS: usize = 50_000;

/// A generated dataset by name, or CSV text with a header row.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
pub enum DatasetSpec {
    Name(String),
    Inline {
        csv: String,
        #[serde(default = "default_label_column")]
        label_column: String,
    },
}

fn default_label_column() -> String {
    "label".into()
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub regions: usize,
    pub blocks: usize,
    pub hidden: usize,
    /// Layers per residual subnet.
    pub depth: usize,
    pub activation: Activation,
    pub coeff: f64,
    pub batch_norm: bool,
    /// Initial logit of each region's majority class.
    pub init_logit: f64,
    /// Training steps before the session opens; 0 leaves the model cold.
    pub train_steps: usize,
    pub lr: f64,
    pub finetune_lr: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            regions: 5,
            blocks: 6,
            hidden: 16,
            depth: 3,
            activation: Activation::LeakyRelu,
            coeff: 0.97,
            batch_norm: false,
            init_logit: 2.0,
            train_steps: 2000,
            lr: 5e-3,
            finetune_lr: 2e-3,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Raster resolution of the returned state.
    #[serde(default)]
    pub grid: Option<usize>,
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
    pub state: State,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub label: usize,
}

/// One consistent snapshot of a session.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct State {
    pub session_id: String,
    pub revision: u64,
    pub regions: usize,
    pub num_classes: usize,
    /// Region centers pulled back to input space.
    pub centers: Vec<[f64; 2]>,
    pub region_classes: Vec<usize>,
    /// Hard-assignment accuracy on the session data.
    pub accuracy: f64,
    pub soft_accuracy: f64,
    pub reports: Vec<RegionReport>,
    pub region_raster: GridRaster,
    pub class_raster: GridRaster,
    pub points: Vec<Point>,
    pub log: Vec<MorphOp>,
    /// Unix seconds.
    pub created: u64,
    pub updated: u64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct MorphRequest {
    #[serde(flatten)]
    pub op: MorphOp,
    pub expected_revision: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MorphResponse {
    pub revision: u64,
    pub regions: usize,
    pub accuracy_before: f64,
    pub accuracy: f64,
    /// Data points whose hard region changed.
    pub reassigned: usize,
    /// Id of the region created by an add.
    pub added_region: Option<usize>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRequest {
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainResponse {
    pub steps: usize,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub revision: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub current_revision: Option<u64>,
}
