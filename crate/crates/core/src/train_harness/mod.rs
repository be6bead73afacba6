//! Synthetic training harness: data generation, a linear-embedder trainer,
//! finite-difference gradient checks and cosine histograms.

mod augment;
mod data;
mod gradcheck;
mod histogram;
mod trainer;

pub use augment::{augment_with_renders, CHANNELS as AUGMENT_CHANNELS, EXTRA_DIMS as AUGMENT_DIMS};
pub use data::{generate_dataset, Dataset, SyntheticSpec};
pub use gradcheck::{grad_check, grad_check_with, GradCheckReport, GradCheckRow, GRAD_CHECK_OPS};
pub use histogram::{histogram_dump, CosineHistograms, HIST_BINS};
pub use trainer::{
    build_dataset, load_checkpoint, model_input_dim, proxy_config, train, train_on, TrainOutcome, TrainState,
};
