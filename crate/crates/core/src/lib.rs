//! Collaborative space supervision for semi-supervised segmentation: a small
//! autodiff engine, a synthetic shapes dataset, a two-head segmentation
//! model, pseudo-labels from both the logit and representation spaces, and
//! a training loop that combines them.

pub mod config;
pub mod data;
pub mod error;
pub mod grad;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod proto;
pub mod sampling;
pub mod seeds;
pub mod supervision;
pub mod trainer;

pub use config::{DataSettings, RunConfig};
pub use data::{DataConfig, DatasetSplit, LabelMap, Mask, SegSample};
pub use error::{Error, Result};
pub use grad::{NodeId, Tape, Tensor};
pub use losses::LossReport;
pub use metrics::{ConfusionMatrix, IouScore};
pub use model::{ModelConfig, ModelParams, TeacherState};
pub use proto::PrototypeBank;
pub use sampling::SamplingConfig;
pub use supervision::PseudoLabelBundle;
pub use trainer::{GridEntry, IndicatorMode, MetricsRecord, RunOutcome, RunState, Strategy, TrainConfig};
