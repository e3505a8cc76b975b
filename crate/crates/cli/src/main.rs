//! `mtsc`: ingest, split, train, evaluate and export plot data for flight
//! maintenance classification.

mod error;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mts_core::augment::{apply_pipeline, sample_rng};
use mts_core::config::{parse_overrides, RunConfig};
use mts_core::dataset::{
    self, synth_longrange, write_dataset, DatasetManifest, FlightSeries, FoldPlan, IngestOptions,
};
use mts_core::metrics;
use mts_core::models::{export_attention, Architecture};
use mts_core::run::{self, SavedModel, CHECKPOINT_FILE};
use mts_core::autodiff::BCE_EPS;
use mts_core::train::{self, CvSummary, EpochRecord, FoldOutcome, Sample};
use serde_json::json;

use error::{io_err, CliError, Result, EXIT_OTHER};

#[derive(Parser, Debug)]
#[command(name = "mtsc", version, about = "Flight time-series maintenance classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a dataset directory and write the eligible-flight manifest.
    Ingest(IngestArgs),
    /// Assign tails to cross-validation folds.
    Folds(FoldsArgs),
    /// Train one fold and write its run record and checkpoint.
    Train(TrainArgs),
    /// Train every fold and write the cross-validation summary.
    Cv(CvArgs),
    /// Score a checkpoint on a dataset (or one fold's validation flights).
    Eval(EvalArgs),
    /// Print `flight_id,score` for flight CSV files.
    Predict(PredictArgs),
    /// Apply the augmentation pipeline to one flight and write the result.
    AugmentPreview(AugmentArgs),
    /// Write per-layer, per-head attention matrices for one flight.
    AttentionExport(AttentionArgs),
    /// Generate the synthetic long-range dataset.
    Synth(SynthArgs),
    /// Write VAE reconstruction-error exceedance curves per class.
    VaeCurves(VaeCurveArgs),
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr0=1e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Model preset (same as `--set model.name=...`).
    #[arg(long)]
    model: Option<String>,
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Enable the augmentation pipeline.
    #[arg(long)]
    augment: bool,
    /// Restrict to one engine cluster (c28 or c37).
    #[arg(long)]
    cluster: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut items = Vec::new();
        if let Some(m) = &self.model {
            items.push(format!("model.name={m}"));
        }
        if let Some(s) = self.seed {
            items.push(format!("train.seed={s}"));
        }
        if let Some(e) = self.epochs {
            items.push(format!("train.epochs={e}"));
        }
        if self.augment {
            items.push("train.augment=true".to_string());
        }
        if let Some(c) = &self.cluster {
            items.push(format!("data.cluster={c}"));
        }
        items.extend(self.set.iter().cloned());
        let overrides = parse_overrides(&items)?;
        Ok(RunConfig::load(self.config.as_deref(), &overrides)?)
    }
}

#[derive(Args, Debug, Clone)]
struct OutArgs {
    /// Output directory; must be empty unless `--overwrite` is given.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Directory holding `manifest.csv` and the flight CSVs it lists.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    out: OutArgs,
    /// Forward-fill non-numeric cells instead of rejecting the file.
    #[arg(long)]
    impute: bool,
    /// Keep flights that fail the duration or maintenance-distance filter.
    #[arg(long)]
    keep_ineligible: bool,
}

#[derive(Args, Debug)]
struct FoldsArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    out: OutArgs,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    cluster: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    out: OutArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Fold assignment from `mtsc folds`; generated from the config when absent.
    #[arg(long)]
    folds: Option<PathBuf>,
    /// Validation fold index.
    #[arg(long, default_value_t = 0)]
    fold: usize,
}

#[derive(Args, Debug)]
struct CvArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    out: OutArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    folds: Option<PathBuf>,
    /// Folds trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// With `--fold`, evaluate only that fold's validation flights.
    #[arg(long)]
    folds: Option<PathBuf>,
    #[arg(long)]
    fold: Option<usize>,
    /// Also write `eval.json` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Flight CSV; repeatable.
    #[arg(long, required = true, num_args = 1..)]
    flight: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[arg(long)]
    flight: PathBuf,
    /// Donor flight for cutmix and mixup; defaults to the flight itself.
    #[arg(long)]
    donor: Option<PathBuf>,
    /// Output CSV for the augmented window (normalized units).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    draw: usize,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct AttentionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    flight: PathBuf,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 512)]
    n: usize,
    #[arg(long, default_value_t = 1024)]
    length: usize,
    #[arg(long, default_value_t = 512)]
    gap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct VaeCurveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    folds: Option<PathBuf>,
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long, default_value_t = 101)]
    points: usize,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        })
    }
}

fn prepare_out(out: &OutArgs) -> Result<()> {
    let dir = &out.out;
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(io_err(dir))?.next().is_some();
        if non_empty && !out.overwrite {
            return Err(CliError::OutputExists(dir.clone()));
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn cluster_arg(s: &Option<String>) -> Result<Option<dataset::Cluster>> {
    match s.as_deref() {
        None | Some("all") => Ok(None),
        Some(c) => c.parse().map(Some).map_err(CliError::Usage),
    }
}

fn ingest(a: IngestArgs) -> Result<()> {
    let manifest_path = a.data.join(dataset::MANIFEST_FILE);
    require(&manifest_path)?;
    prepare_out(&a.out)?;
    let opts = IngestOptions { impute: a.impute };
    let all = dataset::ingest_manifest(&manifest_path, opts)?;
    let kept = if a.keep_ineligible { all.clone() } else { all.eligible() };
    kept.write_csv(&a.out.out.join(dataset::MANIFEST_FILE))?;
    kept.write_counts_csv(&a.out.out.join("counts.csv"))?;
    println!("ingested {} flights, kept {}", all.len(), kept.len());
    for ((cluster, label), n) in kept.counts() {
        println!("  {cluster} label {label}: {n}");
    }
    Ok(())
}

fn load_manifest(dir: &Path, cluster: Option<dataset::Cluster>) -> Result<DatasetManifest> {
    require(&dir.join(dataset::MANIFEST_FILE))?;
    let m = dataset::ingest(dir, IngestOptions::default())?;
    Ok(match cluster {
        Some(c) => m.cluster(c),
        None => m,
    })
}

fn folds(a: FoldsArgs) -> Result<()> {
    let manifest = load_manifest(&a.data, cluster_arg(&a.cluster)?)?;
    prepare_out(&a.out)?;
    let plan = dataset::make_folds(&manifest, a.k, a.seed)?;
    plan.write_csv(&a.out.out.join("folds.csv"))?;
    for f in 0..plan.fold_count {
        println!("fold {f}: {} flights", plan.val_ids(f).len());
    }
    Ok(())
}

fn fold_plan(path: Option<&Path>, manifest: &DatasetManifest, cfg: &RunConfig) -> Result<FoldPlan> {
    match path {
        Some(p) => {
            require(p)?;
            Ok(FoldPlan::read_csv(p)?)
        }
        None => Ok(dataset::make_folds(manifest, cfg.data.folds, cfg.data.fold_seed)?),
    }
}

fn write_loss_curve(records: &[EpochRecord], path: &Path) -> Result<()> {
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut s = String::from("epoch,lr,train_loss,val_loss\n");
    for r in records {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.lr, fmt(r.train_loss), fmt(r.loss)));
    }
    write_text(path, &s)
}

fn write_fold(dir: &Path, cfg: &RunConfig, o: &FoldOutcome, val: Option<&[Sample]>) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    train::write_records(&o.outcome.report.records, &dir.join("run.jsonl"))?;
    write_loss_curve(&o.outcome.report.records, &dir.join("loss_curve.csv"))?;
    run::save_model(&dir.join(CHECKPOINT_FILE), &o.model, cfg, &o.stats)?;
    if let Some(val) = val {
        let ev = train::vae_classify_eval(&o.model, val, cfg.train.eval_batch_size, 101)?;
        ev.curves.write_csv(&dir.join("exceedance.csv"))?;
    }
    Ok(())
}

fn report_line(o: &FoldOutcome) -> String {
    let b = o.outcome.report.best();
    let f = |x: Option<train::Best>| x.map_or("n/a".to_string(), |b| format!("{:.4}@{}", b.value, b.epoch));
    format!(
        "fold {}: loss {} roc_auc {} pr_auc {} accuracy {}",
        o.fold,
        f(b.loss),
        f(b.roc_auc),
        f(b.pr_auc),
        f(b.accuracy)
    )
}

fn vae_val(cfg: &RunConfig, flights: &[FlightSeries], plan: &FoldPlan, fold: usize, o: &FoldOutcome) -> Result<Option<Vec<Sample>>> {
    if cfg.model.arch != Architecture::VaeConvGru {
        return Ok(None);
    }
    let (_, val) = plan.split(flights, fold)?;
    Ok(Some(train::prepare_samples(&val, &cfg.data, &o.stats)?))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let (manifest, flights) = run::load_dataset(&a.data, &cfg.data)?;
    let plan = fold_plan(a.folds.as_deref(), &manifest, &cfg)?;
    if a.fold >= plan.fold_count {
        return Err(CliError::Usage(format!("--fold {} but plan has {} folds", a.fold, plan.fold_count)));
    }
    prepare_out(&a.out)?;
    cfg.save(&a.out.out.join("config.cfg"))?;
    let o = train::train_fold(&flights, &plan, a.fold, &cfg.model, &cfg.train, &cfg.augment, &cfg.data)?;
    let val = vae_val(&cfg, &flights, &plan, a.fold, &o)?;
    write_fold(&a.out.out, &cfg, &o, val.as_deref())?;
    println!("{}", report_line(&o));
    Ok(())
}

fn cv_cmd(a: CvArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let (manifest, flights) = run::load_dataset(&a.data, &cfg.data)?;
    let plan = fold_plan(a.folds.as_deref(), &manifest, &cfg)?;
    prepare_out(&a.out)?;
    cfg.save(&a.out.out.join("config.cfg"))?;
    plan.write_csv(&a.out.out.join("folds.csv"))?;
    let (outcomes, summary): (Vec<FoldOutcome>, CvSummary) =
        train::cross_validate(&flights, &plan, &cfg.model, &cfg.train, &cfg.augment, &cfg.data, a.jobs)?;
    for o in &outcomes {
        let val = vae_val(&cfg, &flights, &plan, o.fold, o)?;
        write_fold(&a.out.out.join(format!("fold{}", o.fold)), &cfg, o, val.as_deref())?;
        println!("{}", report_line(o));
    }
    summary.write_csv(&a.out.out.join("summary.csv"))?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "mean of per-fold bests: loss {} roc_auc {} pr_auc {} accuracy {}",
        fmt(summary.loss),
        fmt(summary.roc_auc),
        fmt(summary.pr_auc),
        fmt(summary.accuracy)
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<SavedModel> {
    require(path)?;
    Ok(run::load_model(path)?)
}

/// Flights to evaluate: one fold's validation set, or everything.
fn eval_samples(
    saved: &SavedModel,
    data: &Path,
    folds: Option<&Path>,
    fold: Option<usize>,
) -> Result<Vec<Sample>> {
    let (manifest, flights) = run::load_dataset(data, &saved.config.data)?;
    let chosen: Vec<&FlightSeries> = match fold {
        Some(f) => {
            let plan = fold_plan(folds, &manifest, &saved.config)?;
            plan.split(&flights, f)?.1
        }
        None => flights.iter().collect(),
    };
    Ok(chosen.into_iter().map(|f| saved.sample(f)).collect::<std::result::Result<_, _>>()?)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let saved = load_checkpoint(&a.checkpoint)?;
    let samples = eval_samples(&saved, &a.data, a.folds.as_deref(), a.fold)?;
    let scores = saved.score(&samples)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let record = if saved.is_vae() {
        json!({
            "model": saved.model.config.name,
            "flights": samples.len(),
            "mean_mse": scores.iter().sum::<f64>() / scores.len().max(1) as f64,
            "roc_auc": metrics::roc_auc(&scores, &labels).ok(),
            "pr_auc": metrics::pr_auc(&scores, &labels).ok(),
        })
    } else {
        json!({
            "model": saved.model.config.name,
            "flights": samples.len(),
            "loss": metrics::bce(&scores, &labels, BCE_EPS),
            "roc_auc": metrics::roc_auc(&scores, &labels).ok(),
            "pr_auc": metrics::pr_auc(&scores, &labels).ok(),
            "accuracy": metrics::accuracy(&scores, &labels, saved.config.train.threshold),
        })
    };
    let line = record.to_string();
    println!("{line}");
    if let Some(dir) = a.out {
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        write_text(&dir.join("eval.json"), &format!("{line}\n"))?;
    }
    Ok(())
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let saved = load_checkpoint(&a.checkpoint)?;
    let mut samples = Vec::with_capacity(a.flight.len());
    for f in &a.flight {
        require(f)?;
        samples.push(saved.sample_from_csv(f)?);
    }
    let scores = saved.score(&samples)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (s, p) in samples.iter().zip(scores) {
        writeln!(out, "{},{}", s.flight_id, p).map_err(io_err("stdout"))?;
    }
    Ok(())
}

fn augment_cmd(a: AugmentArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    require(&a.flight)?;
    let donor_path = a.donor.clone().unwrap_or_else(|| a.flight.clone());
    require(&donor_path)?;
    let opts = IngestOptions { impute: cfg.data.impute };
    let (x, names) = dataset::read_flight_csv(&a.flight, opts)?;
    let (d, _) = dataset::read_flight_csv(&donor_path, opts)?;
    let (xw, xp) = dataset::window(x.view(), cfg.data.window);
    let (dw, dp) = dataset::window(d.view(), cfg.data.window);
    let stats = dataset::fit_normalization([(xw.view(), xp), (dw.view(), dp)])?;
    let xn = dataset::apply_normalization(xw.view(), &stats, None)?;
    let dn = dataset::apply_normalization(dw.view(), &stats, None)?;
    let id = a.flight.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let mut rng = sample_rng(cfg.train.seed, &id, 0, a.draw);
    let (y, record) = apply_pipeline(xn.view(), |_: &mut _| dn.view(), &cfg.augment, &mut rng)?;
    dataset::write_flight_csv(&a.out, &names, y.view())?;
    println!("{}", serde_json::to_string(&record).map_err(|e| CliError::Usage(e.to_string()))?);
    Ok(())
}

fn attention_cmd(a: AttentionArgs) -> Result<()> {
    let saved = load_checkpoint(&a.checkpoint)?;
    if saved.model.config.arch != Architecture::ConvMhsa {
        return Err(CliError::Usage(format!(
            "attention export needs a conv-mhsa checkpoint, got {}",
            saved.model.config.name
        )));
    }
    require(&a.flight)?;
    let sample = saved.sample_from_csv(&a.flight)?;
    prepare_out(&a.out)?;
    let maps = saved.attention(&sample)?;
    let files = export_attention(&maps, &a.out.out)?;
    println!("wrote {} attention matrices to {}", files.len(), a.out.out.display());
    Ok(())
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    let flights = synth_longrange(a.n, a.length, a.gap, a.seed)?;
    prepare_out(&a.out)?;
    let series: Vec<FlightSeries> = flights.iter().map(|f| f.series.clone()).collect();
    write_dataset(&a.out.out, &series)?;
    let mut s = String::from("flight_id,label,first,second\n");
    for f in &flights {
        s.push_str(&format!(
            "{},{},{},{}\n",
            f.series.flight_id, f.series.label, f.markers[0], f.markers[1]
        ));
    }
    write_text(&a.out.out.join("markers.csv"), &s)?;
    println!("wrote {} synthetic flights to {}", flights.len(), a.out.out.display());
    Ok(())
}

fn vae_curves_cmd(a: VaeCurveArgs) -> Result<()> {
    let saved = load_checkpoint(&a.checkpoint)?;
    if !saved.is_vae() {
        return Err(CliError::Usage(format!(
            "vae-curves needs a VAE checkpoint, got {}",
            saved.model.config.name
        )));
    }
    let samples = eval_samples(&saved, &a.data, a.folds.as_deref(), a.fold)?;
    let ev = train::vae_classify_eval(&saved.model, &samples, saved.config.train.eval_batch_size, a.points)?;
    ev.curves.write_csv(&a.out)?;
    println!(
        "{}",
        json!({ "roc_auc": ev.roc_auc, "pr_auc": ev.pr_auc, "flights": samples.len() })
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Folds(a) => folds(a),
        Command::Train(a) => train_cmd(a),
        Command::Cv(a) => cv_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::AugmentPreview(a) => augment_cmd(a),
        Command::AttentionExport(a) => attention_cmd(a),
        Command::Synth(a) => synth_cmd(a),
        Command::VaeCurves(a) => vae_curves_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = std::panic::catch_unwind(|| dispatch(cli));
    match result {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("mtsc: {e}");
            ExitCode::from(e.exit_code())
        }
        Err(_) => ExitCode::from(EXIT_OTHER),
    }
}
