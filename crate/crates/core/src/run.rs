//! Persisted models and dataset loading shared by the command-line tool.

use std::path::{Path, PathBuf};

use ndarray::Axis;
use thiserror::Error;

use crate::autodiff::{checkpoint, AutodiffError};
use crate::config::{self, ConfigError, RunConfig};
use crate::dataset::{self, DatasetError, DatasetManifest, FlightSeries, IngestOptions, NormalizationStats};
use crate::models::{build, Architecture, Model, ModelError};
use crate::train::{self, Sample, TrainError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, RunError>;

pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// A trained model with the configuration and statistics it was trained under.
#[derive(Debug, Clone)]
pub struct SavedModel {
    pub model: Model<f32>,
    pub config: RunConfig,
    pub stats: NormalizationStats,
}

/// Writes `path` (parameters) and its `.cfg` sidecar.
pub fn save_model(path: &Path, model: &Model<f32>, cfg: &RunConfig, stats: &NormalizationStats) -> Result<()> {
    checkpoint::save(&model.params, path)?;
    config::save_sidecar(&config::sidecar_path(path), cfg, stats)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<SavedModel> {
    let (config, stats) = config::load_sidecar(&config::sidecar_path(path))?;
    let mut model = build::<f32>(&config.model, 0)?;
    let stored = checkpoint::load::<f32>(path)?;
    checkpoint::restore_into(&mut model.params, &stored).map_err(|e| RunError::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(SavedModel { model, config, stats })
}

impl SavedModel {
    pub fn is_vae(&self) -> bool {
        self.model.config.arch == Architecture::VaeConvGru
    }

    pub fn sample(&self, flight: &FlightSeries) -> Result<Sample> {
        Ok(train::prepare_sample(flight, &self.config.data, &self.stats)?)
    }

    /// Reads a bare flight CSV; the flight id is the file stem.
    pub fn sample_from_csv(&self, path: &Path) -> Result<Sample> {
        let opts = IngestOptions {
            impute: self.config.data.impute,
        };
        let (values, names) = dataset::read_flight_csv(path, opts)?;
        let id = path
            .file_stem()
            .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        let flight = FlightSeries {
            flight_id: id.clone(),
            tail_id: id,
            cluster: dataset::Cluster::C28,
            label: 0,
            day_offset: 0,
            values,
            channel_names: names,
        };
        self.sample(&flight)
    }

    /// Probability of "before maintenance" for classifiers, reconstruction
    /// MSE for the VAE.
    pub fn score(&self, samples: &[Sample]) -> Result<Vec<f64>> {
        let chunk = self.config.train.eval_batch_size;
        if self.is_vae() {
            Ok(train::anomaly_scores(&self.model, samples, chunk)?)
        } else {
            Ok(train::predict_samples(&self.model, samples, self.config.train.seed, chunk)?)
        }
    }

    /// Attention maps `[heads, T', T']` per layer for one sample.
    pub fn attention(&self, sample: &Sample) -> Result<Vec<ndarray::Array3<f32>>> {
        Ok(self.model.attention_maps(sample.x.view())?)
    }

    /// Reconstruction of one sample in normalized units.
    pub fn reconstruct(&self, sample: &Sample) -> Result<ndarray::Array2<f32>> {
        let x = sample.x.view().insert_axis(Axis(0));
        let tape = crate::autodiff::Tape::inference();
        let xv = tape.constant(x.to_owned().into_dyn());
        let out = self.model.forward_vae(&tape, xv, Default::default())?;
        let r = out.recon.value();
        let t = sample.x.nrows();
        Ok(r
            .view()
            .into_shape_with_order((t, sample.x.ncols()))
            .map_err(|e| ModelError::Shape(e.to_string()))?
            .to_owned())
    }
}

/// Loads every flight listed in `dir`'s manifest, restricted to the configured cluster.
pub fn load_dataset(dir: &Path, data: &train::DataConfig) -> Result<(DatasetManifest, Vec<FlightSeries>)> {
    let opts = IngestOptions { impute: data.impute };
    let mut manifest = dataset::ingest(dir, opts)?;
    if let Some(c) = data.cluster {
        manifest = manifest.cluster(c);
    }
    let flights = dataset::load_all(&manifest, opts)?;
    Ok((manifest, flights))
}
