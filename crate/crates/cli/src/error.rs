use std::path::PathBuf;

use mts_core::augment::AugmentError;
use mts_core::autodiff::AutodiffError;
use mts_core::config::ConfigError;
use mts_core::dataset::DatasetError;
use mts_core::models::ModelError;
use mts_core::run::RunError;
use mts_core::train::TrainError;
use thiserror::Error;

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_IO: u8 = 4;
pub const EXIT_DATA: u8 = 5;
pub const EXIT_TRAIN: u8 = 6;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("output directory {0} is not empty; pass --overwrite to reuse it")]
    OutputExists(PathBuf),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Run(#[from] RunError),
}

pub type Result<T> = std::result::Result<T, CliError>;

pub fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}

fn dataset_code(e: &DatasetError) -> u8 {
    if e.is_io() {
        EXIT_IO
    } else {
        EXIT_DATA
    }
}

fn autodiff_code(e: &AutodiffError) -> u8 {
    match e {
        AutodiffError::Io(_) => EXIT_IO,
        AutodiffError::Checkpoint(_) => EXIT_DATA,
        _ => EXIT_TRAIN,
    }
}

fn model_code(e: &ModelError) -> u8 {
    match e {
        ModelError::Io { .. } => EXIT_IO,
        ModelError::Config(_) | ModelError::NotClassifier(_) | ModelError::NotVae(_) => EXIT_CONFIG,
        ModelError::Autodiff(a) => autodiff_code(a),
        _ => EXIT_DATA,
    }
}

fn config_code(e: &ConfigError) -> u8 {
    match e {
        ConfigError::Io { .. } => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

fn augment_code(e: &AugmentError) -> u8 {
    match e {
        AugmentError::Policy(_) => EXIT_CONFIG,
        AugmentError::ShapeMismatch { .. } => EXIT_DATA,
    }
}

fn train_code(e: &TrainError) -> u8 {
    match e {
        TrainError::Dataset(d) => dataset_code(d),
        TrainError::Model(m) => model_code(m),
        TrainError::Autodiff(a) => autodiff_code(a),
        TrainError::Augment(a) => augment_code(a),
        TrainError::Config(_) => EXIT_CONFIG,
        TrainError::Io { .. } => EXIT_IO,
        TrainError::VaeLabel(_) => EXIT_DATA,
        _ => EXIT_TRAIN,
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io { .. } | CliError::OutputExists(_) => EXIT_IO,
            CliError::Config(c) => config_code(c),
            CliError::Dataset(d) => dataset_code(d),
            CliError::Train(t) => train_code(t),
            CliError::Model(m) => model_code(m),
            CliError::Augment(a) => augment_code(a),
            CliError::Autodiff(a) => autodiff_code(a),
            CliError::Run(r) => match r {
                RunError::Config(c) => config_code(c),
                RunError::Dataset(d) => dataset_code(d),
                RunError::Model(m) => model_code(m),
                RunError::Train(t) => train_code(t),
                RunError::Autodiff(a) => autodiff_code(a),
                RunError::Checkpoint { .. } => EXIT_DATA,
            },
        }
    }
}
