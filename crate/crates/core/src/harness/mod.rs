//! Configuration, loss assembly, training, evaluation and ablation runs.

mod ablation;
mod config;
mod eval;
mod gradsuite;
mod model;
mod train;

pub use ablation::{grid_cells, run_ablation, AblationTable, Cell, CellSummary, Grid, RunResult};
pub use config::{Config, Schedule};
pub use gradsuite::{gradient_suite, suite_model_config, SuiteConfig, SuiteEntry};
pub use eval::{evaluate, rec_hit, EvalReport, PairRecord, REC_IOU_THRESHOLD};
pub use model::{is_trainable, FeatureCache, Forward, LossBundle, Model, PairFeatures, PairStep, PseudoMasks};
pub use train::{describe, log_csv, train, EpochLog, RunOutput, TrainOutcome, LOG_HEADER};
