//! The five architectures: Conv-MHSA, Conv-LSTM, EX-Conv-LSTM, Short-LSTM
//! and VAE-Conv-GRU, built from a [`ModelConfig`] into a named
//! [`ParamStore`].

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array2, Array3, Array4, ArrayD, ArrayView2, ArrayView3, Axis, IxDyn};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::{AutodiffError, InitSpec, LatentMode, ParamStore, Real, Tape, Var};
use crate::dataset::CHANNELS;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input shape: {0}")]
    Shape(String),
    #[error("{0} is not a classifier")]
    NotClassifier(Architecture),
    #[error("{0} is not a variational autoencoder")]
    NotVae(Architecture),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    ConvMhsa,
    ConvLstm,
    ExConvLstm,
    ShortLstm,
    VaeConvGru,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::ConvMhsa => "conv-mhsa",
            Architecture::ConvLstm => "conv-lstm",
            Architecture::ExConvLstm => "ex-conv-lstm",
            Architecture::ShortLstm => "short-lstm",
            Architecture::VaeConvGru => "vae-conv-gru",
        }
    }

    pub fn is_classifier(self) -> bool {
        self != Architecture::VaeConvGru
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s.trim() {
            "conv-mhsa" => Architecture::ConvMhsa,
            "conv-lstm" => Architecture::ConvLstm,
            "ex-conv-lstm" => Architecture::ExConvLstm,
            "short-lstm" => Architecture::ShortLstm,
            "vae-conv-gru" => Architecture::VaeConvGru,
            other => return Err(format!("unknown architecture {other:?}")),
        })
    }
}

/// One strided convolution: kernel width, stride, output channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

impl ConvLayer {
    pub const fn new(kernel: usize, stride: usize, channels: usize) -> Self {
        Self {
            kernel,
            stride,
            channels,
        }
    }
}

impl fmt::Display for ConvLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.kernel, self.stride, self.channels)
    }
}

impl FromStr for ConvLayer {
    type Err = String;

    /// `kernel:stride:channels`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<usize> = s
            .trim()
            .split(':')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| format!("conv layer {s:?} is not kernel:stride:channels"))?;
        match parts[..] {
            [k, st, c] => Ok(Self::new(k, st, c)),
            _ => Err(format!("conv layer {s:?} is not kernel:stride:channels")),
        }
    }
}

pub fn format_conv_list(layers: &[ConvLayer]) -> String {
    layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
}

pub fn parse_conv_list(s: &str) -> std::result::Result<Vec<ConvLayer>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(str::parse).collect()
}

/// Hyperparameters of every architecture. Fields irrelevant to `arch` are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Preset name used for reporting, e.g. `conv-lstm-plus`.
    pub name: String,
    pub arch: Architecture,
    pub in_channels: usize,
    /// Encoder conv stack (all but Short-LSTM).
    pub conv: Vec<ConvLayer>,
    /// Encoder layers (Conv-MHSA) or stacked bidirectional LSTMs.
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub positional: bool,
    /// Units per direction: LSTMs, or the second encoder GRU of the VAE.
    pub units: usize,
    /// Short-LSTM input length.
    pub slice_len: usize,
    /// Attention and feed-forward dropout during training.
    pub dropout: f64,
    /// VAE: units per direction of the first encoder GRU.
    pub low_units: usize,
    /// VAE: convolution between the two encoder GRUs.
    pub mid_conv: ConvLayer,
    pub bottleneck: usize,
    pub latent_dim: usize,
    pub mixtures: usize,
    pub decoder_width: usize,
}

impl ModelConfig {
    fn base(name: &str, arch: Architecture) -> Self {
        Self {
            name: name.to_string(),
            arch,
            in_channels: CHANNELS,
            conv: Vec::new(),
            layers: 4,
            heads: 8,
            head_dim: 64,
            ffn_dim: 512,
            positional: true,
            units: 512,
            slice_len: 128,
            dropout: 0.0,
            low_units: 256,
            mid_conv: ConvLayer::new(4, 2, 512),
            bottleneck: 512,
            latent_dim: 512,
            mixtures: 8,
            decoder_width: 512,
        }
    }

    /// Named preset. Full-size names, `-small` variants for desk-scale runs,
    /// and `-plus` aliases for the extended-training LSTM runs.
    pub fn preset(name: &str) -> Option<Self> {
        let trimmed = name.trim();
        let (core, small) = match trimmed.strip_suffix("-small") {
            Some(c) => (c, true),
            None => (trimmed, false),
        };
        let core = core.strip_suffix("-plus").unwrap_or(core);
        let arch: Architecture = core.parse().ok()?;
        if trimmed.contains("-plus") && !matches!(arch, Architecture::ConvLstm | Architecture::ExConvLstm) {
            return None;
        }
        let mut c = Self::base(trimmed, arch);
        let mhsa_conv = if small {
            vec![ConvLayer::new(8, 4, 32), ConvLayer::new(8, 4, 64), ConvLayer::new(4, 2, 64)]
        } else {
            vec![ConvLayer::new(4, 2, 256), ConvLayer::new(4, 2, 512), ConvLayer::new(4, 2, 512)]
        };
        let width = mhsa_conv.last().map_or(0, |l| l.channels);
        match arch {
            Architecture::ConvMhsa => {
                c.conv = mhsa_conv;
                if small {
                    c.layers = 2;
                    c.heads = 4;
                    c.head_dim = 16;
                    c.ffn_dim = 128;
                }
            }
            Architecture::ConvLstm | Architecture::ExConvLstm => {
                c.conv = mhsa_conv;
                if arch == Architecture::ExConvLstm {
                    c.conv.push(ConvLayer::new(8, 2, width));
                    c.conv.push(ConvLayer::new(8, 2, width));
                }
                if small {
                    c.layers = 2;
                    c.units = 32;
                }
            }
            Architecture::ShortLstm => {
                if small {
                    c.layers = 2;
                    c.units = 32;
                }
            }
            Architecture::VaeConvGru => {
                if small {
                    c.conv = vec![
                        ConvLayer::new(4, 2, 16),
                        ConvLayer::new(4, 2, 32),
                        ConvLayer::new(4, 2, 32),
                        ConvLayer::new(4, 2, 32),
                    ];
                    c.low_units = 16;
                    c.mid_conv = ConvLayer::new(4, 2, 32);
                    c.units = 32;
                    c.bottleneck = 32;
                    c.latent_dim = 16;
                    c.mixtures = 4;
                    c.decoder_width = 32;
                } else {
                    c.conv = vec![
                        ConvLayer::new(4, 2, 64),
                        ConvLayer::new(4, 2, 128),
                        ConvLayer::new(4, 2, 256),
                        ConvLayer::new(4, 2, 256),
                    ];
                }
            }
        }
        Some(c)
    }

    pub fn preset_names() -> Vec<&'static str> {
        vec![
            "conv-mhsa",
            "conv-lstm",
            "conv-lstm-plus",
            "ex-conv-lstm",
            "ex-conv-lstm-plus",
            "short-lstm",
            "vae-conv-gru",
            "conv-mhsa-small",
            "conv-lstm-small",
            "ex-conv-lstm-small",
            "short-lstm-small",
            "vae-conv-gru-small",
        ]
    }

    pub fn d_model(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Product of the encoder's temporal strides.
    pub fn reduction(&self) -> usize {
        let conv: usize = self.conv.iter().map(|l| l.stride).product();
        match self.arch {
            Architecture::ShortLstm => 1,
            Architecture::VaeConvGru => conv * self.mid_conv.stride,
            _ => conv,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        let needs_conv = self.arch != Architecture::ShortLstm;
        if needs_conv && self.conv.is_empty() {
            return bad(format!("{} needs at least one conv layer", self.arch));
        }
        for l in self.conv.iter().chain(std::iter::once(&self.mid_conv)) {
            if l.kernel == 0 || l.stride == 0 || l.channels == 0 {
                return bad(format!("conv layer {l} has a zero extent"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        match self.arch {
            Architecture::ConvMhsa => {
                if self.heads == 0 || self.head_dim == 0 || self.layers == 0 || self.ffn_dim == 0 {
                    return bad("heads, head_dim, layers and ffn_dim must be positive".into());
                }
                let last = self.conv.last().map_or(0, |l| l.channels);
                if last != self.d_model() {
                    return bad(format!(
                        "conv output width {last} must equal heads × head_dim = {}",
                        self.d_model()
                    ));
                }
            }
            Architecture::ConvLstm | Architecture::ExConvLstm | Architecture::ShortLstm => {
                if self.layers == 0 || self.units == 0 {
                    return bad("layers and units must be positive".into());
                }
                if self.arch == Architecture::ShortLstm && self.slice_len == 0 {
                    return bad("slice_len must be positive".into());
                }
            }
            Architecture::VaeConvGru => {
                if self.low_units == 0
                    || self.units == 0
                    || self.bottleneck == 0
                    || self.latent_dim == 0
                    || self.mixtures == 0
                    || self.decoder_width == 0
                {
                    return bad("VAE widths must be positive".into());
                }
            }
        }
        Ok(())
    }
}

/// Resolves layer parameters by name.
pub trait ParamSource<'t, T: Real> {
    fn var(&self, name: &str) -> Var<'t, T>;
}

/// Binds parameters of a store onto a tape.
pub struct Bound<'t, 's, T: Real> {
    pub tape: &'t Tape<T>,
    pub store: &'s ParamStore<T>,
}

impl<'t, T: Real> ParamSource<'t, T> for Bound<'t, '_, T> {
    fn var(&self, name: &str) -> Var<'t, T> {
        let id = self
            .store
            .id_of(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from store"));
        self.tape.param(self.store, id)
    }
}

impl<'t, T: Real> ParamSource<'t, T> for HashMap<String, Var<'t, T>> {
    fn var(&self, name: &str) -> Var<'t, T> {
        *self
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }
}

/// Training-time options for a forward pass.
#[derive(Default)]
pub struct ForwardOptions<'r> {
    /// Keep attention maps.
    pub attention: bool,
    /// Enables dropout and, for the VAE, latent sampling.
    pub rng: Option<&'r mut dyn RngCore>,
}

pub struct ClassifierOutput<'t, T: Real> {
    /// `B` probabilities.
    pub probs: Var<'t, T>,
    /// Per encoder layer, `B×H×S×S` (query rows, key columns).
    pub attention: Vec<Array4<T>>,
}

pub struct VaeOutput<'t, T: Real> {
    pub recon: Var<'t, T>,
    pub mix_logits: Var<'t, T>,
    pub mu: Var<'t, T>,
    pub logvar: Var<'t, T>,
}

fn add_conv<T: Real, R: Rng>(store: &mut ParamStore<T>, prefix: &str, k: usize, cin: usize, cout: usize, rng: &mut R) {
    store.add(&format!("{prefix}/kernel"), &[k, cin, cout], InitSpec::UniformFanIn, rng);
    store.add(&format!("{prefix}/bias"), &[cout], InitSpec::Zeros, rng);
}

/// Transposed kernels are stored `K×Cout×Cin`.
fn add_tconv<T: Real, R: Rng>(store: &mut ParamStore<T>, prefix: &str, k: usize, cin: usize, cout: usize, rng: &mut R) {
    store.add(&format!("{prefix}/kernel"), &[k, cout, cin], InitSpec::UniformFanIn, rng);
    store.add(&format!("{prefix}/bias"), &[cout], InitSpec::Zeros, rng);
}

fn add_dense<T: Real, R: Rng>(store: &mut ParamStore<T>, prefix: &str, din: usize, dout: usize, init: InitSpec, rng: &mut R) {
    store.add(&format!("{prefix}/w"), &[din, dout], init, rng);
    store.add(&format!("{prefix}/b"), &[dout], InitSpec::Zeros, rng);
}

fn add_lstm<T: Real, R: Rng>(store: &mut ParamStore<T>, prefix: &str, cin: usize, units: usize, rng: &mut R) {
    for dir in ["fw", "bw"] {
        store.add(&format!("{prefix}/{dir}/w_in"), &[cin, 4 * units], InitSpec::UniformFanIn, rng);
        store.add(&format!("{prefix}/{dir}/w_rec"), &[units, 4 * units], InitSpec::UniformFanIn, rng);
        store.add(&format!("{prefix}/{dir}/bias"), &[4 * units], InitSpec::Zeros, rng);
    }
}

fn add_gru<T: Real, R: Rng>(store: &mut ParamStore<T>, prefix: &str, cin: usize, units: usize, rng: &mut R) {
    for dir in ["fw", "bw"] {
        store.add(&format!("{prefix}/{dir}/w_in"), &[cin, 3 * units], InitSpec::UniformFanIn, rng);
        store.add(&format!("{prefix}/{dir}/w_rec"), &[units, 3 * units], InitSpec::UniformFanIn, rng);
        store.add(&format!("{prefix}/{dir}/b_in"), &[3 * units], InitSpec::Zeros, rng);
        store.add(&format!("{prefix}/{dir}/b_rec"), &[3 * units], InitSpec::Zeros, rng);
    }
}

/// Allocates the parameters of one post-norm encoder layer of width `d`.
pub fn add_encoder_layer<T: Real, R: Rng>(store: &mut ParamStore<T>, prefix: &str, d: usize, ffn: usize, rng: &mut R) {
    for proj in ["q", "k", "v", "o"] {
        add_dense(store, &format!("{prefix}/attn_{proj}"), d, d, InitSpec::UniformFanIn, rng);
    }
    store.add(&format!("{prefix}/ln1/gain"), &[d], InitSpec::Ones, rng);
    store.add(&format!("{prefix}/ln1/bias"), &[d], InitSpec::Zeros, rng);
    add_dense(store, &format!("{prefix}/ffn1"), d, ffn, InitSpec::UniformFanIn, rng);
    add_dense(store, &format!("{prefix}/ffn2"), ffn, d, InitSpec::UniformFanIn, rng);
    store.add(&format!("{prefix}/ln2/gain"), &[d], InitSpec::Ones, rng);
    store.add(&format!("{prefix}/ln2/bias"), &[d], InitSpec::Zeros, rng);
}

fn dense<'t, T: Real, P: ParamSource<'t, T>>(p: &P, prefix: &str, x: Var<'t, T>) -> Var<'t, T> {
    x.dense(p.var(&format!("{prefix}/w")), Some(p.var(&format!("{prefix}/b"))))
}

fn maybe_dropout<'t, T: Real>(x: Var<'t, T>, rate: f64, rng: &mut Option<&mut dyn RngCore>) -> Var<'t, T> {
    match rng {
        Some(r) if rate > 0.0 => x.dropout(rate, r),
        _ => x,
    }
}

pub fn conv_block<'t, T: Real, P: ParamSource<'t, T>>(
    p: &P,
    prefix: &str,
    x: Var<'t, T>,
    stride: usize,
    relu: bool,
) -> Result<Var<'t, T>> {
    let y = x.conv1d(
        p.var(&format!("{prefix}/kernel")),
        Some(p.var(&format!("{prefix}/bias"))),
        stride,
    )?;
    Ok(if relu { y.relu() } else { y })
}

fn tconv_block<'t, T: Real, P: ParamSource<'t, T>>(
    p: &P,
    prefix: &str,
    x: Var<'t, T>,
    stride: usize,
    relu: bool,
) -> Result<Var<'t, T>> {
    let y = x.conv1d_transpose(
        p.var(&format!("{prefix}/kernel")),
        Some(p.var(&format!("{prefix}/bias"))),
        stride,
    )?;
    Ok(if relu { y.relu() } else { y })
}

/// Post-norm encoder layer: attention, residual, norm, then a ReLU
/// feed-forward, residual, norm. Returns the output and the `B×H×S×S` maps.
pub fn mhsa_encoder_layer<'t, T: Real, P: ParamSource<'t, T>>(
    p: &P,
    prefix: &str,
    x: Var<'t, T>,
    heads: usize,
    dropout: f64,
    rng: &mut Option<&mut dyn RngCore>,
) -> Result<(Var<'t, T>, Array4<T>)> {
    let q = dense(p, &format!("{prefix}/attn_q"), x);
    let k = dense(p, &format!("{prefix}/attn_k"), x);
    let v = dense(p, &format!("{prefix}/attn_v"), x);
    let att = q.multi_head_attention(k, v, heads)?;
    let a = dense(p, &format!("{prefix}/attn_o"), att.context);
    let a = maybe_dropout(a, dropout, rng);
    let h = x.add(a).layer_norm(
        p.var(&format!("{prefix}/ln1/gain")),
        p.var(&format!("{prefix}/ln1/bias")),
        LAYER_NORM_EPS,
    );
    let f = dense(p, &format!("{prefix}/ffn1"), h).relu();
    let f = dense(p, &format!("{prefix}/ffn2"), f);
    let f = maybe_dropout(f, dropout, rng);
    let out = h.add(f).layer_norm(
        p.var(&format!("{prefix}/ln2/gain")),
        p.var(&format!("{prefix}/ln2/bias")),
        LAYER_NORM_EPS,
    );
    Ok((out, att.weights))
}

/// Bidirectional LSTM; output `[forward; backward]` per step.
pub fn bi_lstm<'t, T: Real, P: ParamSource<'t, T>>(p: &P, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let run = |dir: &str, reverse| {
        x.lstm(
            p.var(&format!("{prefix}/{dir}/w_in")),
            p.var(&format!("{prefix}/{dir}/w_rec")),
            p.var(&format!("{prefix}/{dir}/bias")),
            reverse,
        )
    };
    Ok(run("fw", false)?.concat_last(run("bw", true)?))
}

/// Bidirectional GRU; output `[forward; backward]` per step.
pub fn bi_gru<'t, T: Real, P: ParamSource<'t, T>>(p: &P, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let run = |dir: &str, reverse| {
        x.gru(
            p.var(&format!("{prefix}/{dir}/w_in")),
            p.var(&format!("{prefix}/{dir}/w_rec")),
            p.var(&format!("{prefix}/{dir}/b_in")),
            p.var(&format!("{prefix}/{dir}/b_rec")),
            reverse,
        )
    };
    Ok(run("fw", false)?.concat_last(run("bw", true)?))
}

/// Fixed sinusoidal table `S×D`: sine on even features, cosine on odd.
pub fn sinusoidal_encoding<T: Real>(steps: usize, width: usize) -> Array2<T> {
    Array2::from_shape_fn((steps, width), |(pos, i)| {
        let pair = (i / 2) as f64 * 2.0;
        let angle = pos as f64 / 10000f64.powf(pair / width as f64);
        T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// A built model: configuration plus parameters.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

pub fn build<T: Real>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let c = config;
    let mut width = c.in_channels;
    let conv = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, layers: &[ConvLayer], width: &mut usize| {
        for (i, l) in layers.iter().enumerate() {
            add_conv(store, &format!("conv{i}"), l.kernel, *width, l.channels, rng);
            *width = l.channels;
        }
    };
    match c.arch {
        Architecture::ConvMhsa => {
            conv(&mut store, &mut rng, &c.conv, &mut width);
            for l in 0..c.layers {
                add_encoder_layer(&mut store, &format!("enc{l}"), width, c.ffn_dim, &mut rng);
            }
            add_dense(&mut store, "head", width, 1, InitSpec::UniformFanIn, &mut rng);
        }
        Architecture::ConvLstm | Architecture::ExConvLstm | Architecture::ShortLstm => {
            conv(&mut store, &mut rng, &c.conv, &mut width);
            for l in 0..c.layers {
                add_lstm(&mut store, &format!("lstm{l}"), width, c.units, &mut rng);
                width = 2 * c.units;
            }
            add_dense(&mut store, "head", width, 1, InitSpec::UniformFanIn, &mut rng);
        }
        Architecture::VaeConvGru => {
            conv(&mut store, &mut rng, &c.conv, &mut width);
            add_gru(&mut store, "enc_gru0", width, c.low_units, &mut rng);
            add_conv(&mut store, "enc_mid", c.mid_conv.kernel, 2 * c.low_units, c.mid_conv.channels, &mut rng);
            add_gru(&mut store, "enc_gru1", c.mid_conv.channels, c.units, &mut rng);
            add_dense(&mut store, "bottleneck", 2 * c.units, c.bottleneck, InitSpec::UniformFanIn, &mut rng);
            let heads = c.latent_dim * c.mixtures;
            for h in ["mix_logits", "mu", "logvar"] {
                add_dense(&mut store, h, c.bottleneck, heads, InitSpec::Zeros, &mut rng);
            }
            add_dense(&mut store, "dec_in", c.latent_dim, c.decoder_width, InitSpec::UniformFanIn, &mut rng);
            add_gru(&mut store, "dec_gru1", c.decoder_width, c.units, &mut rng);
            add_tconv(&mut store, "dec_mid", c.mid_conv.kernel, 2 * c.units, 2 * c.low_units, &mut rng);
            add_gru(&mut store, "dec_gru0", 2 * c.low_units, c.low_units, &mut rng);
            let n = c.conv.len();
            for i in (0..n).rev() {
                let cin = if i == n - 1 { 2 * c.low_units } else { c.conv[i].channels };
                let cout = if i == 0 { c.in_channels } else { c.conv[i - 1].channels };
                add_tconv(&mut store, &format!("dec_conv{i}"), c.conv[i].kernel, cin, cout, &mut rng);
            }
        }
    }
    Ok(Model {
        config: config.clone(),
        params: store,
    })
}

fn check_input<T: Real>(config: &ModelConfig, x: &Var<'_, T>) -> Result<(usize, usize)> {
    let shape = x.shape();
    if shape.len() != 3 || shape[2] != config.in_channels {
        return Err(ModelError::Shape(format!(
            "expected B×T×{}, got {:?}",
            config.in_channels, shape
        )));
    }
    Ok((shape[0], shape[1]))
}

impl<T: Real> Model<T> {
    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Input length the network consumes for windows of `window` steps.
    pub fn input_len(&self, window: usize) -> usize {
        match self.config.arch {
            Architecture::ShortLstm => self.config.slice_len,
            _ => window,
        }
    }

    pub fn forward_classifier<'t>(
        &self,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
        mut opts: ForwardOptions<'_>,
    ) -> Result<ClassifierOutput<'t, T>> {
        let c = &self.config;
        if !c.arch.is_classifier() {
            return Err(ModelError::NotClassifier(c.arch));
        }
        let (b, t) = check_input(c, &x)?;
        if c.arch == Architecture::ShortLstm && t != c.slice_len {
            return Err(ModelError::Shape(format!(
                "short-lstm takes {}-step slices, got {t}",
                c.slice_len
            )));
        }
        let p = Bound { tape, store: &self.params };
        let mut h = x;
        for (i, l) in c.conv.iter().enumerate() {
            h = conv_block(&p, &format!("conv{i}"), h, l.stride, true)?;
        }
        let mut attention = Vec::new();
        match c.arch {
            Architecture::ConvMhsa => {
                if c.positional {
                    let shape = h.shape();
                    h = h.add_table(&sinusoidal_encoding(shape[1], shape[2]));
                }
                for l in 0..c.layers {
                    let (y, w) = mhsa_encoder_layer(&p, &format!("enc{l}"), h, c.heads, c.dropout, &mut opts.rng)?;
                    h = y;
                    if opts.attention {
                        attention.push(w);
                    }
                }
            }
            _ => {
                for l in 0..c.layers {
                    h = bi_lstm(&p, &format!("lstm{l}"), h)?;
                }
            }
        }
        let pooled = h.global_avg_pool();
        let probs = dense(&p, "head", pooled).sigmoid().reshape(&[b]);
        Ok(ClassifierOutput { probs, attention })
    }

    pub fn forward_vae<'t>(
        &self,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
        opts: ForwardOptions<'_>,
    ) -> Result<VaeOutput<'t, T>> {
        let c = &self.config;
        if c.arch != Architecture::VaeConvGru {
            return Err(ModelError::NotVae(c.arch));
        }
        let (b, t) = check_input(c, &x)?;
        let red = c.reduction();
        if t % red != 0 {
            return Err(ModelError::Shape(format!(
                "sequence length {t} must be a multiple of {red}"
            )));
        }
        let p = Bound { tape, store: &self.params };
        let mut h = x;
        for (i, l) in c.conv.iter().enumerate() {
            h = conv_block(&p, &format!("conv{i}"), h, l.stride, true)?;
        }
        h = bi_gru(&p, "enc_gru0", h)?;
        h = conv_block(&p, "enc_mid", h, c.mid_conv.stride, true)?;
        h = bi_gru(&p, "enc_gru1", h)?;
        let steps = h.shape()[1];
        let hb = dense(&p, "bottleneck", h.global_avg_pool()).relu();
        let lat = [b, c.latent_dim, c.mixtures];
        let mix_logits = dense(&p, "mix_logits", hb).reshape(&lat);
        let mu = dense(&p, "mu", hb).reshape(&lat);
        let logvar = dense(&p, "logvar", hb).reshape(&lat);
        let mode = match opts.rng {
            None => LatentMode::Mean,
            Some(rng) => sample_latent_mode(&mix_logits.value(), rng),
        };
        let z = mix_logits.mixture_latent(mu, logvar, &mode)?;
        let mut d = dense(&p, "dec_in", z).relu().repeat_time(steps);
        d = bi_gru(&p, "dec_gru1", d)?;
        d = tconv_block(&p, "dec_mid", d, c.mid_conv.stride, true)?;
        d = bi_gru(&p, "dec_gru0", d)?;
        for i in (0..c.conv.len()).rev() {
            d = tconv_block(&p, &format!("dec_conv{i}"), d, c.conv[i].stride, i != 0)?;
        }
        Ok(VaeOutput {
            recon: d,
            mix_logits,
            mu,
            logvar,
        })
    }

    /// Class-1 probabilities for a `B×T×C` batch, evaluated in chunks.
    pub fn predict(&self, x: ArrayView3<'_, T>, chunk: usize) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(x.shape()[0]);
        for part in x.axis_chunks_iter(Axis(0), chunk.max(1)) {
            let tape = Tape::inference();
            let xv = tape.constant(part.to_owned().into_dyn());
            let o = self.forward_classifier(&tape, xv, ForwardOptions::default())?;
            out.extend(o.probs.value().iter().copied());
        }
        Ok(out)
    }

    /// Attention maps of one `T×C` sample: per layer, `H×S×S`.
    pub fn attention_maps(&self, x: ArrayView2<'_, T>) -> Result<Vec<Array3<T>>> {
        if self.config.arch != Architecture::ConvMhsa {
            return Err(ModelError::Config(format!("{} has no attention", self.config.arch)));
        }
        let tape = Tape::inference();
        let xv = tape.constant(x.to_owned().insert_axis(Axis(0)).into_dyn());
        let o = self.forward_classifier(
            &tape,
            xv,
            ForwardOptions {
                attention: true,
                rng: None,
            },
        )?;
        Ok(o.attention
            .into_iter()
            .map(|w| w.index_axis(Axis(0), 0).to_owned())
            .collect())
    }

    /// Mean squared reconstruction error per sample, using the mixture mean.
    pub fn anomaly_score(&self, x: ArrayView3<'_, T>, chunk: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(x.shape()[0]);
        for part in x.axis_chunks_iter(Axis(0), chunk.max(1)) {
            let tape = Tape::inference();
            let xv = tape.constant(part.to_owned().into_dyn());
            let o = self.forward_vae(&tape, xv, ForwardOptions::default())?;
            out.extend(reconstruction_mse(part, &o.recon.value()));
        }
        Ok(out)
    }
}

/// Per-sample mean of squared residuals over all cells.
pub fn reconstruction_mse<T: Real>(x: ArrayView3<'_, T>, recon: &ArrayD<T>) -> Vec<f64> {
    let recon = recon
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("reconstruction is B×T×C");
    x.outer_iter()
        .zip(recon.outer_iter())
        .map(|(a, b)| {
            let n = a.len().max(1) as f64;
            a.iter()
                .zip(b.iter())
                .map(|(&u, &v)| {
                    let d = (u - v).to_f64().unwrap_or(f64::NAN);
                    d * d
                })
                .sum::<f64>()
                / n
        })
        .collect()
}

/// Draws one component per latent dimension from `softmax(logits)` plus
/// standard normal noise for every component.
pub fn sample_latent_mode<T: Real>(logits: &ArrayD<T>, rng: &mut dyn RngCore) -> LatentMode<T> {
    let k = *logits.shape().last().expect("B×D×K");
    let mut choice = Vec::with_capacity(logits.len() / k.max(1));
    for lane in logits.lanes(Axis(logits.ndim() - 1)) {
        let max = lane.fold(T::neg_infinity(), |m, &v| m.max(v));
        let w: Vec<f64> = lane
            .iter()
            .map(|&v| (v - max).to_f64().unwrap_or(0.0).exp())
            .collect();
        let total: f64 = w.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = k - 1;
        for (i, wi) in w.iter().enumerate() {
            if u < *wi {
                pick = i;
                break;
            }
            u -= wi;
        }
        choice.push(pick);
    }
    let eps = ArrayD::from_shape_fn(IxDyn(logits.shape()), |_| T::of(rng.sample::<f64, _>(StandardNormal)));
    LatentMode::Sample { choice, eps }
}

/// Uniform start of a `slice_len` window inside the non-padded region of a
/// `window`-step sample; falls back to the last `slice_len` steps.
pub fn slice_start<R: Rng + ?Sized>(window: usize, pad: usize, slice_len: usize, rng: &mut R) -> usize {
    let last = window.saturating_sub(slice_len);
    if pad >= last {
        last
    } else {
        rng.random_range(pad..=last)
    }
}

pub fn slice_rows<T: Real>(x: ArrayView2<'_, T>, start: usize, len: usize) -> Array2<T> {
    x.slice(s![start..start + len, ..]).to_owned()
}

/// Writes `layer{l}_head{h}.csv` matrices (query rows, key columns) and an `index.csv`.
pub fn export_attention<T: Real>(maps: &[Array3<T>], dir: &Path) -> Result<Vec<PathBuf>> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ModelError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let index_path = dir.join("index.csv");
    let mut index = BufWriter::new(File::create(&index_path).map_err(io(&index_path))?);
    writeln!(index, "layer,head,file,rows,cols").map_err(io(&index_path))?;
    let mut files = Vec::new();
    for (l, layer) in maps.iter().enumerate() {
        for (h, m) in layer.outer_iter().enumerate() {
            let name = format!("layer{l}_head{h}.csv");
            let path = dir.join(&name);
            let mut f = BufWriter::new(File::create(&path).map_err(io(&path))?);
            for row in m.rows() {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(f, "{}", line.join(",")).map_err(io(&path))?;
            }
            f.flush().map_err(io(&path))?;
            writeln!(index, "{l},{h},{name},{},{}", m.nrows(), m.ncols()).map_err(io(&index_path))?;
            files.push(path);
        }
    }
    index.flush().map_err(io(&index_path))?;
    Ok(files)
}

/// Reads back an [`export_attention`] directory as per-layer `H×S×S` arrays.
pub fn import_attention(dir: &Path) -> Result<Vec<Array3<f64>>> {
    let parse_err = |path: &Path, reason: String| ModelError::Parse {
        path: path.to_path_buf(),
        reason,
    };
    let index_path = dir.join("index.csv");
    let text = std::fs::read_to_string(&index_path).map_err(|source| ModelError::Io {
        path: index_path.clone(),
        source,
    })?;
    let mut entries: Vec<(usize, usize, String)> = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(parse_err(&index_path, format!("bad index line {line:?}")));
        }
        let l = f[0].parse().map_err(|_| parse_err(&index_path, format!("layer {:?}", f[0])))?;
        let h = f[1].parse().map_err(|_| parse_err(&index_path, format!("head {:?}", f[1])))?;
        entries.push((l, h, f[2].to_string()));
    }
    let layers = entries.iter().map(|e| e.0 + 1).max().unwrap_or(0);
    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        let mut heads: Vec<(usize, Array2<f64>)> = Vec::new();
        for (_, h, name) in entries.iter().filter(|e| e.0 == l) {
            let path = dir.join(name);
            let body = std::fs::read_to_string(&path).map_err(|source| ModelError::Io {
                path: path.clone(),
                source,
            })?;
            let rows: Vec<Vec<f64>> = body
                .lines()
                .filter(|r| !r.trim().is_empty())
                .map(|r| r.split(',').map(|v| v.trim().parse::<f64>()).collect())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| parse_err(&path, e.to_string()))?;
            let n = rows.len();
            let m = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != m) {
                return Err(parse_err(&path, "ragged rows".into()));
            }
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            heads.push((*h, Array2::from_shape_vec((n, m), flat).expect("n×m")));
        }
        heads.sort_by_key(|(h, _)| *h);
        let views: Vec<_> = heads.iter().map(|(_, m)| m.view()).collect();
        let stacked = ndarray::stack(Axis(0), &views).map_err(|e| parse_err(dir, e.to_string()))?;
        out.push(stacked);
    }
    Ok(out)
}
