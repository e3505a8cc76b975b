//! Training loops, per-epoch evaluation, cross-validation and run records.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{apply_pipeline, sample_rng, stream_key, AugmentError, AugmentationPolicy};

use crate::autodiff::{AdamConfig, AdamState, AutodiffError, CosineDecay, LrSchedule, Tape, BCE_EPS};
use crate::dataset::{self, Cluster, DatasetError, FlightSeries, FoldPlan, NormalizationStats};
use crate::metrics;
use crate::models::{self, build, Architecture, ForwardOptions, Model, ModelConfig, ModelError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error("non-finite loss at epoch {epoch}, step {step} (lr {lr:e}); batch: {}", batch.join(","))]
    NonFinite {
        epoch: usize,
        step: usize,
        lr: f64,
        batch: Vec<String>,
    },
    #[error("variational autoencoder trains on post-maintenance flights only; {0} has label 1")]
    VaeLabel(String),
    #[error("training set is empty")]
    EmptyTrain,
    #[error("expected {expected} fold reports, got {found}")]
    MissingFold { expected: usize, found: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub lr0: f64,
    /// Final learning rate as a fraction of `lr0`.
    pub final_lr_ratio: f64,
    pub augment: bool,
    pub seed: u64,
    /// VAE: weight of the mixture KL term after warm-up.
    pub kld_weight: f64,
    pub kld_warmup_epochs: usize,
    pub eval_batch_size: usize,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            steps_per_epoch: 250,
            lr0: 1e-5,
            final_lr_ratio: 0.1,
            augment: false,
            seed: 0,
            kld_weight: 1e-3,
            kld_warmup_epochs: 5,
            eval_batch_size: 32,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    /// Defaults matching a model preset name.
    pub fn for_model(name: &str) -> Self {
        let mut c = Self::default();
        let small = name.ends_with("-small");
        if name.starts_with("vae") {
            c.lr0 = 1e-4;
            c.steps_per_epoch = 1000;
        } else if name.starts_with("conv-mhsa") {
            c.lr0 = 1e-5;
        } else {
            c.lr0 = 2e-5;
            if name.contains("-plus") {
                c.steps_per_epoch = 500;
            }
        }
        if small {
            c.epochs = 20;
            c.steps_per_epoch = 40;
            c.lr0 = 1e-3;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(TrainError::Config("batch sizes must be positive".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(TrainError::Config(format!("lr0 = {} must be positive", self.lr0)));
        }
        if !(0.0..=1.0).contains(&self.final_lr_ratio) {
            return Err(TrainError::Config("final_lr_ratio outside [0, 1]".into()));
        }
        if self.kld_weight < 0.0 {
            return Err(TrainError::Config("kld_weight must be non-negative".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> CosineDecay {
        CosineDecay {
            lr0: self.lr0,
            final_ratio: self.final_lr_ratio,
            total_steps: self.epochs * self.steps_per_epoch,
        }
    }
}

/// Windowing and normalization settings shared by training and inference.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub window: usize,
    pub folds: usize,
    pub fold_seed: u64,
    /// Keep padded rows at zero after normalization.
    pub pad_mask: bool,
    pub impute: bool,
    /// Restrict to one engine cluster; `None` keeps both.
    pub cluster: Option<Cluster>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            window: dataset::DEFAULT_WINDOW,
            folds: 5,
            fold_seed: 0,
            pad_mask: false,
            impute: false,
            cluster: None,
        }
    }
}

/// A windowed, normalized training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub flight_id: String,
    pub tail_id: String,
    pub label: u8,
    pub x: Array2<f32>,
    pub pad: usize,
}

pub fn prepare_sample(f: &FlightSeries, data: &DataConfig, stats: &NormalizationStats) -> Result<Sample> {
    let (w, pad) = dataset::window(f.values.view(), data.window);
    let z = dataset::apply_normalization(w.view(), stats, data.pad_mask.then_some(pad))?;
    Ok(Sample {
        flight_id: f.flight_id.clone(),
        tail_id: f.tail_id.clone(),
        label: f.label,
        x: z.mapv(|v| v as f32),
        pad,
    })
}

pub fn prepare_samples(flights: &[&FlightSeries], data: &DataConfig, stats: &NormalizationStats) -> Result<Vec<Sample>> {
    flights.iter().map(|f| prepare_sample(f, data, stats)).collect()
}

/// Normalization statistics fitted on `flights` after windowing.
pub fn fit_stats(flights: &[&FlightSeries], window: usize) -> Result<NormalizationStats> {
    let windows: Vec<(Array2<f64>, usize)> = flights
        .iter()
        .map(|f| dataset::window(f.values.view(), window))
        .collect();
    Ok(dataset::fit_normalization(windows.iter().map(|(w, p)| (w.view(), *p)))?)
}

/// Train and validation samples for one fold, normalized with train-only statistics.
#[derive(Debug, Clone)]
pub struct FoldData {
    pub fold: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub stats: NormalizationStats,
}

pub fn fold_data(flights: &[FlightSeries], plan: &FoldPlan, fold: usize, data: &DataConfig) -> Result<FoldData> {
    let (train, val) = plan.split(flights, fold)?;
    let stats = fit_stats(&train, data.window)?;
    Ok(FoldData {
        fold,
        train: prepare_samples(&train, data, &stats)?,
        val: prepare_samples(&val, data, &stats)?,
        stats,
    })
}

/// One line of a run record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub model: String,
    pub fold: usize,
    /// 0 is the evaluation before any update.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: Option<f64>,
    /// Validation BCE for classifiers, validation reconstruction MSE for the VAE.
    pub loss: Option<f64>,
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub accuracy: Option<f64>,
    /// VAE: reconstruction MSE of the training set, mixture mean latent.
    pub recon_mse: Option<f64>,
    pub rmse: Option<f64>,
    pub kld: Option<f64>,
    pub step_ms: f64,
}

impl EpochRecord {
    fn blank(model: &str, fold: usize, epoch: usize, lr: f64) -> Self {
        Self {
            model: model.to_string(),
            fold,
            epoch,
            lr,
            train_loss: None,
            loss: None,
            roc_auc: None,
            pr_auc: None,
            accuracy: None,
            recon_mse: None,
            rmse: None,
            kld: None,
            step_ms: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Best {
    pub epoch: usize,
    pub value: f64,
}

/// Best epoch of each metric, chosen independently.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BestMetrics {
    pub loss: Option<Best>,
    pub roc_auc: Option<Best>,
    pub pr_auc: Option<Best>,
    pub accuracy: Option<Best>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub fold: usize,
    pub records: Vec<EpochRecord>,
}

fn best_of<F: Fn(&EpochRecord) -> Option<f64>>(records: &[&EpochRecord], get: F, lower: bool) -> Option<Best> {
    records
        .iter()
        .filter_map(|r| get(r).filter(|v| v.is_finite()).map(|v| Best { epoch: r.epoch, value: v }))
        .reduce(|a, b| {
            let better = if lower { b.value < a.value } else { b.value > a.value };
            if better {
                b
            } else {
                a
            }
        })
}

impl EvalReport {
    /// Per-metric best over trained epochs (the initial evaluation only
    /// counts when no epoch was trained).
    pub fn best(&self) -> BestMetrics {
        let trained: Vec<&EpochRecord> = self.records.iter().filter(|r| r.epoch > 0).collect();
        let pool = if trained.is_empty() {
            self.records.iter().collect()
        } else {
            trained
        };
        BestMetrics {
            loss: best_of(&pool, |r| r.loss, true),
            roc_auc: best_of(&pool, |r| r.roc_auc, false),
            pr_auc: best_of(&pool, |r| r.pr_auc, false),
            accuracy: best_of(&pool, |r| r.accuracy, false),
        }
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Flight ids whose data reached the optimizer, as gradient samples or donors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataTrace {
    pub gradient: BTreeSet<String>,
    pub donors: BTreeSet<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: EvalReport,
    pub trace: DataTrace,
}

fn eval_slice_start(seed: u64, s: &Sample, window: usize, slice: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_key(&[&seed.to_le_bytes(), s.flight_id.as_bytes(), b"eval"]));
    models::slice_start(window, s.pad, slice, &mut rng)
}

/// Network input for one sample: the full window, or a deterministic
/// per-flight slice for the Short-LSTM.
fn eval_input(model: &Model<f32>, s: &Sample, seed: u64) -> Array2<f32> {
    if model.config.arch == Architecture::ShortLstm {
        let len = model.config.slice_len;
        let start = eval_slice_start(seed, s, s.x.nrows(), len);
        models::slice_rows(s.x.view(), start.min(s.x.nrows().saturating_sub(len)), len.min(s.x.nrows()))
    } else {
        s.x.clone()
    }
}

fn stack(rows: &[ArrayView2<'_, f32>]) -> Array3<f32> {
    ndarray::stack(Axis(0), rows).expect("samples share one shape")
}

/// Probabilities for `samples`.
pub fn predict_samples(model: &Model<f32>, samples: &[Sample], seed: u64, chunk: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for part in samples.chunks(chunk.max(1)) {
        let inputs: Vec<Array2<f32>> = part.iter().map(|s| eval_input(model, s, seed)).collect();
        let views: Vec<_> = inputs.iter().map(|a| a.view()).collect();
        out.extend(model.predict(stack(&views).view(), chunk)?.into_iter().map(f64::from));
    }
    Ok(out)
}

/// Validation metrics of a classifier on `samples`.
pub fn evaluate(model: &Model<f32>, samples: &[Sample], cfg: &TrainConfig, rec: &mut EpochRecord) -> Result<Vec<f64>> {
    let probs = predict_samples(model, samples, cfg.seed, cfg.eval_batch_size)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    if !probs.is_empty() {
        rec.loss = Some(metrics::bce(&probs, &labels, BCE_EPS));
        rec.accuracy = Some(metrics::accuracy(&probs, &labels, cfg.threshold));
    }
    rec.roc_auc = metrics::roc_auc(&probs, &labels).ok();
    rec.pr_auc = metrics::pr_auc(&probs, &labels).ok();
    Ok(probs)
}

fn draw_batch<'a>(
    model: &Model<f32>,
    train: &'a [Sample],
    cfg: &TrainConfig,
    policy: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
    epoch: usize,
    step: usize,
    trace: &mut DataTrace,
) -> Result<(Array3<f32>, Vec<&'a Sample>)> {
    let picks: Vec<&Sample> = (0..cfg.batch_size)
        .map(|_| &train[rng.random_range(0..train.len())])
        .collect();
    let mut inputs = Vec::with_capacity(picks.len());
    for (slot, s) in picks.iter().enumerate() {
        trace.gradient.insert(s.flight_id.clone());
        let mut srng = sample_rng(cfg.seed, &s.flight_id, epoch, step * cfg.batch_size + slot);
        let mut x = if cfg.augment {
            let mut donors = Vec::new();
            let (y, _) = apply_pipeline(
                s.x.view(),
                |r: &mut ChaCha8Rng| {
                    let d = &train[r.random_range(0..train.len())];
                    donors.push(d.flight_id.clone());
                    d.x.view()
                },
                policy,
                &mut srng,
            )?;
            trace.donors.extend(donors);
            y
        } else {
            s.x.clone()
        };
        if model.config.arch == Architecture::ShortLstm {
            let len = model.config.slice_len.min(x.nrows());
            let start = models::slice_start(x.nrows(), s.pad, len, &mut srng);
            x = models::slice_rows(x.view(), start, len);
        }
        inputs.push(x);
    }
    let views: Vec<_> = inputs.iter().map(|a| a.view()).collect();
    Ok((stack(&views), picks))
}

/// Trains a classifier and evaluates it on `val` before training and after every epoch.
pub fn train(
    model: &mut Model<f32>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    policy: &AugmentationPolicy,
    fold: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.augment {
        policy.validate()?;
    }
    if !model.config.arch.is_classifier() {
        return Err(ModelError::NotClassifier(model.config.arch).into());
    }
    if train.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    let name = model.config.name.clone();
    let schedule = cfg.schedule();
    let mut adam = AdamState::new(AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ stream_key(&[&(fold as u64).to_le_bytes(), b"batches"]));
    let mut trace = DataTrace::default();
    let mut records = Vec::with_capacity(cfg.epochs + 1);
    let mut initial = EpochRecord::blank(&name, fold, 0, schedule.lr(0));
    evaluate(model, val, cfg, &mut initial)?;
    records.push(initial);
    if cfg.steps_per_epoch == 0 {
        return Ok(TrainOutcome {
            report: EvalReport { model: name, fold, records },
            trace,
        });
    }
    let mut global = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut step_time = 0.0;
        let mut lr = schedule.lr(global);
        for step in 0..cfg.steps_per_epoch {
            let (x, picks) = draw_batch(model, train, cfg, policy, &mut rng, epoch, step, &mut trace)?;
            let labels: Vec<f32> = picks.iter().map(|s| f32::from(s.label)).collect();
            lr = schedule.lr(global);
            let t0 = Instant::now();
            let tape = Tape::new();
            let xv = tape.constant(x.into_dyn());
            let out = model.forward_classifier(
                &tape,
                xv,
                ForwardOptions {
                    attention: false,
                    rng: Some(&mut rng as &mut dyn RngCore),
                },
            )?;
            let loss = out.probs.bce(&labels);
            let lv = f64::from(loss.scalar());
            if !lv.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    step,
                    lr,
                    batch: picks.iter().map(|s| s.flight_id.clone()).collect(),
                });
            }
            let grads = tape.backward(loss)?;
            adam.step(&mut model.params, grads.param_grads(), lr);
            step_time += t0.elapsed().as_secs_f64() * 1e3;
            loss_sum += lv;
            global += 1;
        }
        let mut rec = EpochRecord::blank(&name, fold, epoch, lr);
        rec.train_loss = Some(loss_sum / cfg.steps_per_epoch as f64);
        rec.step_ms = step_time / cfg.steps_per_epoch as f64;
        evaluate(model, val, cfg, &mut rec)?;
        records.push(rec);
    }
    Ok(TrainOutcome {
        report: EvalReport { model: name, fold, records },
        trace,
    })
}

fn stack_windows(samples: &[Sample]) -> Array3<f32> {
    let views: Vec<_> = samples.iter().map(|s| s.x.view()).collect();
    stack(&views)
}

/// Reconstruction MSE per sample (mixture mean latent).
pub fn anomaly_scores(model: &Model<f32>, samples: &[Sample], chunk: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for part in samples.chunks(chunk.max(1)) {
        out.extend(model.anomaly_score(stack_windows(part).view(), chunk)?);
    }
    Ok(out)
}

/// Exceedance curves per class over a shared threshold grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExceedanceCurves {
    pub thresholds: Vec<f64>,
    /// Label 1.
    pub pre: Vec<f64>,
    /// Label 0.
    pub post: Vec<f64>,
}

impl ExceedanceCurves {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = BufWriter::new(File::create(path).map_err(io)?);
        writeln!(f, "threshold,pre_fraction,post_fraction").map_err(io)?;
        for i in 0..self.thresholds.len() {
            writeln!(f, "{},{},{}", self.thresholds[i], self.pre[i], self.post[i]).map_err(io)?;
        }
        f.flush().map_err(io)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeEval {
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub curves: ExceedanceCurves,
}

pub fn exceedance_curves(scores: &[f64], labels: &[u8], points: usize) -> ExceedanceCurves {
    let thresholds = metrics::threshold_grid(scores, points);
    let pick = |l: u8| -> Vec<f64> {
        scores
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y == l)
            .map(|(&s, _)| s)
            .collect()
    };
    ExceedanceCurves {
        pre: metrics::exceedance_curve(&pick(1), &thresholds),
        post: metrics::exceedance_curve(&pick(0), &thresholds),
        thresholds,
    }
}

/// Scores validation flights by reconstruction error; higher means "pre-maintenance".
pub fn vae_classify_eval(model: &Model<f32>, val: &[Sample], chunk: usize, points: usize) -> Result<VaeEval> {
    let scores = anomaly_scores(model, val, chunk)?;
    let labels: Vec<u8> = val.iter().map(|s| s.label).collect();
    Ok(VaeEval {
        roc_auc: metrics::roc_auc(&scores, &labels).ok(),
        pr_auc: metrics::pr_auc(&scores, &labels).ok(),
        curves: exceedance_curves(&scores, &labels, points),
        scores,
        labels,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Trains the VAE on label-0 samples, minimizing reconstruction MSE plus a
/// warmed-up KL weight times the mixture KL term. When `val` is given, each
/// epoch also scores it.
pub fn train_vae(
    model: &mut Model<f32>,
    train: &[Sample],
    val: Option<&[Sample]>,
    cfg: &TrainConfig,
    fold: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.config.arch != Architecture::VaeConvGru {
        return Err(ModelError::NotVae(model.config.arch).into());
    }
    if let Some(s) = train.iter().find(|s| s.label != 0) {
        return Err(TrainError::VaeLabel(s.flight_id.clone()));
    }
    if train.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    let name = model.config.name.clone();
    let schedule = cfg.schedule();
    let mut adam = AdamState::new(AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ stream_key(&[&(fold as u64).to_le_bytes(), b"vae"]));
    let mut trace = DataTrace::default();
    let warm = (cfg.kld_warmup_epochs * cfg.steps_per_epoch) as f64;
    let epoch_record = |model: &Model<f32>, epoch: usize, lr: f64| -> Result<EpochRecord> {
        let mut rec = EpochRecord::blank(&name, fold, epoch, lr);
        let mse = mean(&anomaly_scores(model, train, cfg.eval_batch_size)?);
        rec.recon_mse = Some(mse);
        rec.rmse = Some(mse.sqrt());
        if let Some(val) = val {
            let ev = vae_classify_eval(model, val, cfg.eval_batch_size, 2)?;
            rec.loss = Some(mean(&ev.scores));
            rec.roc_auc = ev.roc_auc;
            rec.pr_auc = ev.pr_auc;
        }
        Ok(rec)
    };
    let mut records = vec![epoch_record(model, 0, schedule.lr(0))?];
    let mut global = 0usize;
    for epoch in 1..=cfg.epochs {
        if cfg.steps_per_epoch == 0 {
            break;
        }
        let (mut loss_sum, mut kld_sum, mut step_time) = (0.0, 0.0, 0.0);
        let mut lr = schedule.lr(global);
        for step in 0..cfg.steps_per_epoch {
            let picks: Vec<&Sample> = (0..cfg.batch_size)
                .map(|_| &train[rng.random_range(0..train.len())])
                .collect();
            for s in &picks {
                trace.gradient.insert(s.flight_id.clone());
            }
            let views: Vec<_> = picks.iter().map(|s| s.x.view()).collect();
            let x = stack(&views).into_dyn();
            lr = schedule.lr(global);
            let beta = if warm > 0.0 {
                cfg.kld_weight * ((global + 1) as f64 / warm).min(1.0)
            } else {
                cfg.kld_weight
            };
            let t0 = Instant::now();
            let tape = Tape::new();
            let xv = tape.constant(x);
            let out = model.forward_vae(
                &tape,
                xv,
                ForwardOptions {
                    attention: false,
                    rng: Some(&mut rng as &mut dyn RngCore),
                },
            )?;
            let recon = out.recon.mse(xv);
            let kld = out.mix_logits.kld_mixture(out.mu, out.logvar)?;
            let loss = recon.add(kld.scale(beta));
            let lv = f64::from(loss.scalar());
            if !lv.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    step,
                    lr,
                    batch: picks.iter().map(|s| s.flight_id.clone()).collect(),
                });
            }
            let grads = tape.backward(loss)?;
            adam.step(&mut model.params, grads.param_grads(), lr);
            step_time += t0.elapsed().as_secs_f64() * 1e3;
            loss_sum += lv;
            kld_sum += f64::from(kld.scalar());
            global += 1;
        }
        let mut rec = epoch_record(model, epoch, lr)?;
        rec.train_loss = Some(loss_sum / cfg.steps_per_epoch as f64);
        rec.kld = Some(kld_sum / cfg.steps_per_epoch as f64);
        rec.step_ms = step_time / cfg.steps_per_epoch as f64;
        records.push(rec);
    }
    Ok(TrainOutcome {
        report: EvalReport { model: name, fold, records },
        trace,
    })
}

/// Mean over folds of each metric's per-fold best value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub model: String,
    pub folds: usize,
    pub loss: Option<f64>,
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub accuracy: Option<f64>,
}

pub fn summarize(reports: &[EvalReport], fold_count: usize) -> Result<CvSummary> {
    if reports.len() != fold_count || fold_count == 0 {
        return Err(TrainError::MissingFold {
            expected: fold_count,
            found: reports.len(),
        });
    }
    let bests: Vec<BestMetrics> = reports.iter().map(EvalReport::best).collect();
    let avg = |get: &dyn Fn(&BestMetrics) -> Option<Best>| -> Option<f64> {
        let vals: Option<Vec<f64>> = bests.iter().map(|b| get(b).map(|x| x.value)).collect();
        vals.map(|v| mean(&v))
    };
    Ok(CvSummary {
        model: reports[0].model.clone(),
        folds: fold_count,
        loss: avg(&|b| b.loss),
        roc_auc: avg(&|b| b.roc_auc),
        pr_auc: avg(&|b| b.pr_auc),
        accuracy: avg(&|b| b.accuracy),
    })
}

impl CvSummary {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        };
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut f = BufWriter::new(File::create(path).map_err(io)?);
        writeln!(f, "model,folds,loss,roc_auc,pr_auc,accuracy").map_err(io)?;
        writeln!(
            f,
            "{},{},{},{},{},{}",
            self.model,
            self.folds,
            fmt(self.loss),
            fmt(self.roc_auc),
            fmt(self.pr_auc),
            fmt(self.accuracy)
        )
        .map_err(io)?;
        f.flush().map_err(io)
    }
}

pub fn write_records(records: &[EpochRecord], path: &Path) -> Result<()> {
    let io = |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = BufWriter::new(File::create(path).map_err(io)?);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn read_records(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| TrainError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            })
        })
        .collect()
}

/// Per-fold result of cross-validation.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub model: Model<f32>,
    pub stats: NormalizationStats,
    pub outcome: TrainOutcome,
}

/// Trains one fold from scratch: train-only statistics, fresh parameters.
pub fn train_fold(
    flights: &[FlightSeries],
    plan: &FoldPlan,
    fold: usize,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    policy: &AugmentationPolicy,
    data: &DataConfig,
) -> Result<FoldOutcome> {
    let fd = fold_data(flights, plan, fold, data)?;
    let mut model = build::<f32>(model_cfg, cfg.seed.wrapping_add(fold as u64))?;
    let outcome = if model_cfg.arch == Architecture::VaeConvGru {
        let post: Vec<Sample> = fd.train.iter().filter(|s| s.label == 0).cloned().collect();
        train_vae(&mut model, &post, Some(&fd.val), cfg, fold)?
    } else {
        train(&mut model, &fd.train, &fd.val, cfg, policy, fold)?
    };
    Ok(FoldOutcome {
        fold,
        model,
        stats: fd.stats,
        outcome,
    })
}

/// Runs every fold of `plan` (up to `jobs` at a time) and summarizes.
pub fn cross_validate(
    flights: &[FlightSeries],
    plan: &FoldPlan,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    policy: &AugmentationPolicy,
    data: &DataConfig,
    jobs: usize,
) -> Result<(Vec<FoldOutcome>, CvSummary)> {
    let folds: Vec<usize> = (0..plan.fold_count).collect();
    let mut results: Vec<Option<Result<FoldOutcome>>> = (0..folds.len()).map(|_| None).collect();
    for batch in folds.chunks(jobs.max(1)) {
        let done: Vec<(usize, Result<FoldOutcome>)> = std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .iter()
                .map(|&f| {
                    (
                        f,
                        scope.spawn(move || train_fold(flights, plan, f, model_cfg, cfg, policy, data)),
                    )
                })
                .collect();
            handles
                .into_iter()
                .map(|(f, h)| (f, h.join().expect("fold worker panicked")))
                .collect()
        });
        for (f, r) in done {
            results[f] = Some(r);
        }
    }
    let outcomes: Vec<FoldOutcome> = results
        .into_iter()
        .map(|r| r.expect("every fold ran"))
        .collect::<Result<_>>()?;
    let reports: Vec<EvalReport> = outcomes.iter().map(|o| o.outcome.report.clone()).collect();
    let summary = summarize(&reports, plan.fold_count)?;
    Ok((outcomes, summary))
}
