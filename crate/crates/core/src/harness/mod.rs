//! Synthetic-data experiments: data generation, training, retrieval
//! evaluation and histogram export.

pub mod config;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod optim;
pub mod train;

pub use config::{EvalProtocol, Stages, TrainConfig};
pub use data::{generate_synthetic, Dataset, QueryGallery, SyntheticSpec};
pub use eval::{evaluate_retrieval, positive_pair_histogram, EvalResult, PairHistogram};
pub use experiment::{load_dataset, run_config, run_experiment};
pub use model::{Encoder, EncoderKind, Model};
pub use train::{evaluate, train, train_from, EpochRecord, TrainOutcome};
