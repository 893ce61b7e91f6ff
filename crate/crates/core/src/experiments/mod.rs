//! Config-driven training runs, evaluation, density grids and the
//! verification report.

pub mod config;
pub mod grid;
pub mod optim;
pub mod train;
pub mod verify;

pub use config::{
    DatasetConfig, DiffusionConfig, DiffusionKind, EvalConfig, ExperimentConfig, LaplacianKind, LossConfig,
    LossKind, ModelConfig, OptimizerConfig, RunConfig, SamplerConfig, TimeFeatureKind,
};
pub use grid::{export_grid, DensityGrid};
pub use optim::Adam;
pub use train::{
    denoise_rmse, denoise_sweep, init_model, load_dataset, mean_row_rmse, run_eval, run_train, train_model,
    write_outputs, Dataset, DenoisePoint, EvalMetrics, IterRecord, RunRecord, SmEvaluator, TrainOutcome,
};
pub use verify::{run_verify, VerifyLine};
