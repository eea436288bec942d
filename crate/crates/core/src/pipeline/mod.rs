//! Training, inference and the experiment harness around the segmentation
//! models: per-view stack U-Nets, fusion, refinement, cross-validation and
//! hyper-parameter sweeps.

mod config;
mod cv;
mod experiments;
mod infer;
mod train;

pub use config::{derive_seed, TrainConfig};
pub use cv::{cross_validate, fold_partition, CvOutcome, CvPlan, RepetitionResult};
pub use experiments::{lambda_float_settings, sweep, sweep_csv, sweep_settings, SweepAxis, SweepRow, Variant};
pub use infer::{evaluate, predict, run_pipeline, train_mdsnet, PipelineOutput, TrainedModels, ViewModel};
pub use train::{history_csv, prepare_view, train_refiner_on, train_unet, EpochRecord, TrainOutcome, ViewData};
