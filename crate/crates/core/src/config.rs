//! Flat `key = value` run configuration with dotted namespaces.
//!
//! ```text
//! # comments and blank lines are ignored
//! model.name = conv-mhsa-small
//! train.lr0 = 0.001
//! augment.p_apply = 0.4
//! data.window = 1024
//! ```
//!
//! `model.name` picks a preset and its training defaults; every other key
//! then overrides a single field. Resolution order is defaults, then file,
//! then command-line overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::augment::AugmentationPolicy;
use crate::dataset::{Cluster, NormalizationStats};
use crate::models::{format_conv_list, parse_conv_list, ConvLayer, ModelConfig};
use crate::train::{DataConfig, TrainConfig};

pub const DEFAULT_MODEL: &str = "conv-mhsa";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{origin}:{line}: expected `key = value`, got {text:?}")]
    Syntax { origin: String, line: usize, text: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("`{key}` set twice in {origin}")]
    Duplicate { key: String, origin: String },
    #[error("`{key} = {value}`: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("unknown model preset `{0}`")]
    Preset(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentationPolicy,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_model(DEFAULT_MODEL).expect("default preset exists")
    }
}

/// `key = value` pairs in source order.
pub type Pairs = Vec<(String, String)>;

/// Parses `key = value` lines; `origin` names the source in errors.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Pairs> {
    let mut out: Pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                origin: origin.to_string(),
                line: i + 1,
                text: raw.to_string(),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                origin: origin.to_string(),
                line: i + 1,
                text: raw.to_string(),
            });
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(ConfigError::Duplicate {
                key: k.to_string(),
                origin: origin.to_string(),
            });
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Parses command-line overrides of the form `key=value`.
pub fn parse_overrides<S: AsRef<str>>(items: &[S]) -> Result<Pairs> {
    items
        .iter()
        .map(|s| {
            let s = s.as_ref();
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .filter(|(k, _)| !k.is_empty())
                .ok_or_else(|| ConfigError::Syntax {
                    origin: "override".into(),
                    line: 0,
                    text: s.to_string(),
                })
        })
        .collect()
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| ConfigError::Value {
        key: key.to_string(),
        value: v.to_string(),
        reason: e.to_string(),
    })
}

fn optional_cluster(key: &str, v: &str) -> Result<Option<Cluster>> {
    if v.eq_ignore_ascii_case("all") {
        Ok(None)
    } else {
        value::<Cluster>(key, v).map(Some)
    }
}

fn float_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| value::<f64>(key, s.trim()))
        .collect()
}

impl RunConfig {
    /// Preset defaults for `name`.
    pub fn for_model(name: &str) -> Result<Self> {
        let model = ModelConfig::preset(name).ok_or_else(|| ConfigError::Preset(name.to_string()))?;
        let mut data = DataConfig::default();
        if name.ends_with("-small") {
            data.window = 1024;
        }
        Ok(Self {
            train: TrainConfig::for_model(&model.name),
            model,
            augment: AugmentationPolicy::default(),
            data,
        })
    }

    /// Defaults, then `file`, then `overrides`. `model.name` is read first
    /// from whichever layer sets it last.
    pub fn resolve(file: &[(String, String)], overrides: &[(String, String)]) -> Result<Self> {
        let name = overrides
            .iter()
            .chain(file)
            .find(|(k, _)| k == "model.name")
            .map_or(DEFAULT_MODEL, |(_, v)| v.as_str());
        let mut cfg = Self::for_model(name)?;
        for (k, v) in file.iter().chain(overrides) {
            if k != "model.name" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; `None` yields defaults plus overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                parse_pairs(&text, &p.display().to_string())?
            }
            None => Vec::new(),
        };
        Self::resolve(&file, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.augment.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.data.window == 0 {
            return Err(ConfigError::Invalid("data.window must be positive".into()));
        }
        if self.data.folds < 2 {
            return Err(ConfigError::Invalid("data.folds must be at least 2".into()));
        }
        Ok(())
    }

    /// Sets one field. `model.name` is rejected here because it selects the
    /// preset that the other keys refine.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let a = &mut self.augment;
        let d = &mut self.data;
        match key {
            "model.name" => {
                return Err(ConfigError::Invalid(
                    "model.name selects the preset and cannot be set on a resolved config".into(),
                ))
            }
            "model.in_channels" => m.in_channels = value(key, v)?,
            "model.conv" => {
                m.conv = parse_conv_list(v).map_err(|reason| ConfigError::Value {
                    key: key.into(),
                    value: v.into(),
                    reason,
                })?
            }
            "model.layers" => m.layers = value(key, v)?,
            "model.heads" => m.heads = value(key, v)?,
            "model.head_dim" => m.head_dim = value(key, v)?,
            "model.ffn_dim" => m.ffn_dim = value(key, v)?,
            "model.positional" => m.positional = value(key, v)?,
            "model.units" => m.units = value(key, v)?,
            "model.slice_len" => m.slice_len = value(key, v)?,
            "model.dropout" => m.dropout = value(key, v)?,
            "model.low_units" => m.low_units = value(key, v)?,
            "model.mid_conv" => m.mid_conv = value::<ConvLayer>(key, v)?,
            "model.bottleneck" => m.bottleneck = value(key, v)?,
            "model.latent_dim" => m.latent_dim = value(key, v)?,
            "model.mixtures" => m.mixtures = value(key, v)?,
            "model.decoder_width" => m.decoder_width = value(key, v)?,
            "train.epochs" => t.epochs = value(key, v)?,
            "train.batch_size" => t.batch_size = value(key, v)?,
            "train.steps_per_epoch" => t.steps_per_epoch = value(key, v)?,
            "train.lr0" => t.lr0 = value(key, v)?,
            "train.final_lr_ratio" => t.final_lr_ratio = value(key, v)?,
            "train.augment" => t.augment = value(key, v)?,
            "train.seed" => t.seed = value(key, v)?,
            "train.kld_weight" => t.kld_weight = value(key, v)?,
            "train.kld_warmup_epochs" => t.kld_warmup_epochs = value(key, v)?,
            "train.eval_batch_size" => t.eval_batch_size = value(key, v)?,
            "train.threshold" => t.threshold = value(key, v)?,
            "augment.p_apply" => a.p_apply = value(key, v)?,
            "augment.seg_min" => a.seg_min = value(key, v)?,
            "augment.seg_max" => a.seg_max = value(key, v)?,
            "augment.p_channel_cut" => a.p_channel_cut = value(key, v)?,
            "augment.m_min" => a.m_min = value(key, v)?,
            "augment.m_max" => a.m_max = value(key, v)?,
            "augment.p_channel_mix" => a.p_channel_mix = value(key, v)?,
            "data.window" => d.window = value(key, v)?,
            "data.folds" => d.folds = value(key, v)?,
            "data.fold_seed" => d.fold_seed = value(key, v)?,
            "data.pad_mask" => d.pad_mask = value(key, v)?,
            "data.impute" => d.impute = value(key, v)?,
            "data.cluster" => d.cluster = optional_cluster(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Every key in a fixed order; `resolve(parse(to_pairs))` reproduces `self`.
    pub fn to_pairs(&self) -> Pairs {
        let (m, t, a, d) = (&self.model, &self.train, &self.augment, &self.data);
        let kv = |k: &str, v: String| (k.to_string(), v);
        vec![
            kv("model.name", m.name.clone()),
            kv("model.in_channels", m.in_channels.to_string()),
            kv("model.conv", format_conv_list(&m.conv)),
            kv("model.layers", m.layers.to_string()),
            kv("model.heads", m.heads.to_string()),
            kv("model.head_dim", m.head_dim.to_string()),
            kv("model.ffn_dim", m.ffn_dim.to_string()),
            kv("model.positional", m.positional.to_string()),
            kv("model.units", m.units.to_string()),
            kv("model.slice_len", m.slice_len.to_string()),
            kv("model.dropout", m.dropout.to_string()),
            kv("model.low_units", m.low_units.to_string()),
            kv("model.mid_conv", m.mid_conv.to_string()),
            kv("model.bottleneck", m.bottleneck.to_string()),
            kv("model.latent_dim", m.latent_dim.to_string()),
            kv("model.mixtures", m.mixtures.to_string()),
            kv("model.decoder_width", m.decoder_width.to_string()),
            kv("train.epochs", t.epochs.to_string()),
            kv("train.batch_size", t.batch_size.to_string()),
            kv("train.steps_per_epoch", t.steps_per_epoch.to_string()),
            kv("train.lr0", t.lr0.to_string()),
            kv("train.final_lr_ratio", t.final_lr_ratio.to_string()),
            kv("train.augment", t.augment.to_string()),
            kv("train.seed", t.seed.to_string()),
            kv("train.kld_weight", t.kld_weight.to_string()),
            kv("train.kld_warmup_epochs", t.kld_warmup_epochs.to_string()),
            kv("train.eval_batch_size", t.eval_batch_size.to_string()),
            kv("train.threshold", t.threshold.to_string()),
            kv("augment.p_apply", a.p_apply.to_string()),
            kv("augment.seg_min", a.seg_min.to_string()),
            kv("augment.seg_max", a.seg_max.to_string()),
            kv("augment.p_channel_cut", a.p_channel_cut.to_string()),
            kv("augment.m_min", a.m_min.to_string()),
            kv("augment.m_max", a.m_max.to_string()),
            kv("augment.p_channel_mix", a.p_channel_mix.to_string()),
            kv("data.window", d.window.to_string()),
            kv("data.folds", d.folds.to_string()),
            kv("data.fold_seed", d.fold_seed.to_string()),
            kv("data.pad_mask", d.pad_mask.to_string()),
            kv("data.impute", d.impute.to_string()),
            kv(
                "data.cluster",
                d.cluster.map_or_else(|| "all".to_string(), |c| c.to_string()),
            ),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

/// Config plus normalization statistics, stored next to a checkpoint.
pub fn sidecar_text(cfg: &RunConfig, stats: &NormalizationStats) -> String {
    let mut s = cfg.to_text();
    let _ = writeln!(s, "norm.mean = {}", join(&stats.mean));
    let _ = writeln!(s, "norm.std = {}", join(&stats.std));
    s
}

pub fn parse_sidecar(text: &str, origin: &str) -> Result<(RunConfig, NormalizationStats)> {
    let pairs = parse_pairs(text, origin)?;
    let mut mean = None;
    let mut std = None;
    let mut rest = Vec::with_capacity(pairs.len());
    for (k, v) in pairs {
        match k.as_str() {
            "norm.mean" => mean = Some(float_list(&k, &v)?),
            "norm.std" => std = Some(float_list(&k, &v)?),
            _ => rest.push((k, v)),
        }
    }
    let cfg = RunConfig::resolve(&rest, &[])?;
    let (Some(mean), Some(std)) = (mean, std) else {
        return Err(ConfigError::Invalid(format!("{origin}: missing norm.mean or norm.std")));
    };
    let channels = cfg.model.in_channels;
    if mean.len() != channels || std.len() != channels {
        return Err(ConfigError::Invalid(format!(
            "{origin}: normalization has {}/{} entries, model expects {channels}",
            mean.len(),
            std.len()
        )));
    }
    Ok((cfg, NormalizationStats { mean, std }))
}

pub fn save_sidecar(path: &Path, cfg: &RunConfig, stats: &NormalizationStats) -> Result<()> {
    std::fs::write(path, sidecar_text(cfg, stats)).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_sidecar(path: &Path) -> Result<(RunConfig, NormalizationStats)> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_sidecar(&text, &path.display().to_string())
}

/// Sidecar path for a checkpoint: `model.ckpt` → `model.cfg`.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("cfg")
}
