#![allow(dead_code)]

use std::path::Path;

use mts_core::dataset::{self, Cluster, FlightSeries, CHANNELS};
use mts_core::models::{Architecture, ModelConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn conv(k: usize, cin: usize, cout: usize) -> usize {
    k * cin * cout + cout
}

fn dense(i: usize, o: usize) -> usize {
    i * o + o
}

fn lstm(cin: usize, u: usize) -> usize {
    2 * (cin * 4 * u + u * 4 * u + 4 * u)
}

fn gru(cin: usize, u: usize) -> usize {
    2 * (cin * 3 * u + u * 3 * u + 2 * 3 * u)
}

fn encoder(d: usize, f: usize) -> usize {
    4 * dense(d, d) + dense(d, f) + dense(f, d) + 4 * d
}

/// Parameter count written out layer by layer from the architecture description.
pub fn param_oracle(c: &ModelConfig) -> usize {
    let mut n = 0;
    let mut w = c.in_channels;
    for l in &c.conv {
        n += conv(l.kernel, w, l.channels);
        w = l.channels;
    }
    match c.arch {
        Architecture::ConvMhsa => n + c.layers * encoder(w, c.ffn_dim) + dense(w, 1),
        Architecture::ConvLstm | Architecture::ExConvLstm | Architecture::ShortLstm => {
            for _ in 0..c.layers {
                n += lstm(w, c.units);
                w = 2 * c.units;
            }
            n + dense(w, 1)
        }
        Architecture::VaeConvGru => {
            let lo = c.low_units;
            let mid = c.mid_conv;
            n += gru(w, lo) + conv(mid.kernel, 2 * lo, mid.channels) + gru(mid.channels, c.units);
            n += dense(2 * c.units, c.bottleneck);
            n += 3 * dense(c.bottleneck, c.latent_dim * c.mixtures);
            n += dense(c.latent_dim, c.decoder_width) + gru(c.decoder_width, c.units);
            n += conv(mid.kernel, 2 * c.units, 2 * lo) + gru(2 * lo, lo);
            let mut cin = 2 * lo;
            for i in (0..c.conv.len()).rev() {
                let cout = if i == 0 { c.in_channels } else { c.conv[i - 1].channels };
                n += conv(c.conv[i].kernel, cin, cout);
                cin = cout;
            }
            n
        }
    }
}

/// Flight in the documented on-disk layout: `rows` seconds of 23 channels,
/// with a class-dependent mean shift on channel 3.
pub fn real_flight(id: &str, tail: &str, label: u8, day_offset: i64, rows: usize, rng: &mut ChaCha8Rng) -> FlightSeries {
    let shift = if label == 1 { 0.8 } else { 0.0 };
    let values = Array2::from_shape_fn((rows, CHANNELS), |(t, c)| {
        let base = (t as f64 / 50.0 + c as f64).sin();
        let bump = if c == 3 { shift } else { 0.0 };
        100.0 + 10.0 * c as f64 + base + bump + rng.random_range(-0.5..0.5)
    });
    FlightSeries {
        flight_id: id.to_string(),
        tail_id: tail.to_string(),
        cluster: Cluster::C28,
        label,
        day_offset,
        values,
        channel_names: (0..CHANNELS).map(|c| format!("sensor_{c:02}")).collect(),
    }
}

/// `tails` tails, each with two pre and two post flights of `rows` seconds.
pub fn real_fixture(tails: usize, rows: usize, seed: u64) -> Vec<FlightSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for t in 0..tails {
        let tail = format!("T{t:03}");
        for (j, (label, day)) in [(1, -2), (1, -1), (0, 1), (0, 2)].into_iter().enumerate() {
            let id = format!("{tail}-F{j}");
            out.push(real_flight(&id, &tail, label, day, rows, &mut rng));
        }
    }
    out
}

pub fn write_fixture(dir: &Path, flights: &[FlightSeries]) {
    dataset::write_dataset(dir, flights).unwrap();
}

/// Empirical augmentation statistics over `n` pipeline invocations on
/// `T×23` inputs, with per-invocation streams from `sample_rng`.
pub struct AugmentStats {
    pub n: usize,
    pub gate_rates: [f64; 3],
    pub cut_channel_rate: f64,
    pub mix_channel_rate: f64,
    pub segment_lengths: Vec<usize>,
    pub mix_weights: Vec<f64>,
    pub seconds: f64,
}

pub fn augment_stats(n: usize, rows: usize, seed: u64) -> AugmentStats {
    use mts_core::augment::{apply_pipeline, sample_rng, AugmentationPolicy};
    let policy = AugmentationPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((rows, CHANNELS), |_| rng.random_range(-1.0..1.0f64));
    let donor = Array2::from_shape_fn((rows, CHANNELS), |_| rng.random_range(-1.0..1.0f64));
    let start = std::time::Instant::now();
    let mut gates = [0usize; 3];
    let (mut cut_on, mut cut_total, mut mix_on, mut mix_total) = (0, 0, 0, 0);
    let mut segment_lengths = Vec::new();
    let mut mix_weights = Vec::new();
    for i in 0..n {
        let mut r = sample_rng(seed, "stats", 0, i);
        let (_, rec) = apply_pipeline(x.view(), |_: &mut ChaCha8Rng| donor.view(), &policy, &mut r).unwrap();
        for (g, d) in [&rec.cutout, &rec.cutmix].into_iter().enumerate() {
            if let Some(d) = d {
                gates[g] += 1;
                cut_on += d.channels.len();
                cut_total += CHANNELS;
                segment_lengths.push(d.len);
            }
        }
        if let Some(m) = &rec.mixup {
            gates[2] += 1;
            mix_on += m.channels.len();
            mix_total += CHANNELS;
            mix_weights.push(m.m);
        }
    }
    AugmentStats {
        n,
        gate_rates: gates.map(|g| g as f64 / n as f64),
        cut_channel_rate: cut_on as f64 / cut_total as f64,
        mix_channel_rate: mix_on as f64 / mix_total as f64,
        segment_lengths,
        mix_weights,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Pearson chi-square p-value of `counts` against equal expected counts.
pub fn chi_square_uniform(counts: &[usize]) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let total: usize = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    ChiSquared::new((counts.len() - 1) as f64).unwrap().sf(stat)
}

/// Segment lengths in 64..512 binned into 7 bins of 64 values. The endpoint
/// 512 is dropped so that every bin has the same expected count.
pub fn segment_length_bins(lengths: &[usize]) -> Vec<usize> {
    let mut bins = vec![0usize; 7];
    for &l in lengths {
        if (64..512).contains(&l) {
            bins[(l - 64) / 64] += 1;
        }
    }
    bins
}

pub fn mix_weight_bins(ms: &[f64], bins: usize) -> Vec<usize> {
    let mut out = vec![0usize; bins];
    for &m in ms {
        let i = (((m - 0.6) / 0.3) * bins as f64).floor() as usize;
        out[i.min(bins - 1)] += 1;
    }
    out
}

/// Pairwise ROC AUC: share of (positive, negative) pairs ranked correctly, ties half.
pub fn brute_roc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

/// Trapezoidal area under the (FPR, TPR) polyline over every distinct threshold.
pub fn trapezoid_roc(scores: &[f64], labels: &[u8]) -> f64 {
    let p = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n = labels.len() as f64 - p;
    let mut ts: Vec<f64> = scores.to_vec();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    let mut prev = (0.0, 0.0);
    let mut area = 0.0;
    for t in ts {
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l == 1).count() as f64;
        let fp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l == 0).count() as f64;
        let cur = (fp / n, tp / p);
        area += (cur.0 - prev.0) * (cur.1 + prev.1) / 2.0;
        prev = cur;
    }
    area
}

/// Average precision recomputed from scratch at each distinct threshold.
pub fn brute_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let p = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut ts: Vec<f64> = scores.to_vec();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    let mut ap = 0.0;
    for t in ts {
        let selected: Vec<u8> = scores.iter().zip(labels).filter(|(&s, _)| s >= t).map(|(_, &l)| l).collect();
        let precision = selected.iter().filter(|&&l| l == 1).count() as f64 / selected.len() as f64;
        let gained = scores.iter().zip(labels).filter(|(&s, &l)| s == t && l == 1).count() as f64;
        ap += precision * gained / p;
    }
    ap
}

/// Random scoring instances: size in 2..=200 with both classes, scores
/// quantized on some instances to force ties.
pub fn metric_instances(count: usize, seed: u64) -> Vec<(Vec<f64>, Vec<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let n = rng.random_range(2..=200);
            let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
            labels[0] = 1;
            labels[1] = 0;
            let levels = if i % 3 == 0 { 5.0 } else { 1e9 };
            let scores = (0..n)
                .map(|_| (rng.random_range(0.0..1.0f64) * levels).floor() / levels)
                .collect();
            (scores, labels)
        })
        .collect()
}

/// Largest disagreement between the library metrics and the oracles above.
pub fn metric_oracle_error(count: usize, seed: u64) -> f64 {
    use mts_core::metrics;
    let mut worst = 0.0f64;
    for (s, l) in metric_instances(count, seed) {
        let roc = metrics::roc_auc(&s, &l).unwrap();
        let ap = metrics::pr_auc(&s, &l).unwrap();
        worst = worst
            .max((roc - brute_roc(&s, &l)).abs())
            .max((roc - trapezoid_roc(&s, &l)).abs())
            .max((ap - brute_ap(&s, &l)).abs());
    }
    worst
}

/// `n` samples of `t×23` uniform noise with alternating labels, already in network units.
pub fn noise_samples(n: usize, t: usize, seed: u64) -> Vec<mts_core::train::Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| mts_core::train::Sample {
            flight_id: format!("n{i:03}"),
            tail_id: format!("tail{i:03}"),
            label: (i % 2) as u8,
            x: Array2::from_shape_fn((t, CHANNELS), |_| rng.random_range(-1.0..1.0f32)),
            pad: 0,
        })
        .collect()
}

/// Trains `conv-mhsa-small` on 32 noise samples for 200 steps and returns
/// the training-set BCE after each 20-step epoch.
pub fn overfit_curve(seed: u64) -> Vec<f64> {
    use mts_core::augment::AugmentationPolicy;
    use mts_core::models::build;
    use mts_core::train::{self, TrainConfig};
    let samples = noise_samples(32, 256, seed);
    let mut model = build::<f32>(&ModelConfig::preset("conv-mhsa-small").unwrap(), seed).unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        steps_per_epoch: 20,
        batch_size: 32,
        seed,
        ..TrainConfig::for_model("conv-mhsa-small")
    };
    let out = train::train(&mut model, &samples, &samples, &cfg, &AugmentationPolicy::default(), 0).unwrap();
    out.report.records.iter().skip(1).map(|r| r.loss.unwrap()).collect()
}

/// Trains `vae-conv-gru-small` on label-0 samples (a shared slow sine plus a
/// per-sample offset and noise). Returns the per-epoch records, the model and
/// the training samples.
pub fn vae_run(
    epochs: usize,
    seed: u64,
) -> (
    Vec<mts_core::train::EpochRecord>,
    mts_core::models::Model<f32>,
    Vec<mts_core::train::Sample>,
) {
    use mts_core::models::build;
    use mts_core::train::{self, TrainConfig};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<mts_core::train::Sample> = (0..32)
        .map(|i| {
            let offset = rng.random_range(-0.5..0.5f32);
            mts_core::train::Sample {
                flight_id: format!("v{i:03}"),
                tail_id: format!("vt{i:03}"),
                label: 0,
                x: Array2::from_shape_fn((256, CHANNELS), |(t, c)| {
                    (t as f32 / 64.0 + c as f32).sin() + offset + 0.1 * rng.random_range(-1.0..1.0f32)
                }),
                pad: 0,
            }
        })
        .collect();
    let mut model = build::<f32>(&ModelConfig::preset("vae-conv-gru-small").unwrap(), seed).unwrap();
    let cfg = TrainConfig {
        epochs,
        steps_per_epoch: 10,
        batch_size: 16,
        seed,
        ..TrainConfig::for_model("vae-conv-gru-small")
    };
    let records = train::train_vae(&mut model, &samples, None, &cfg, 0).unwrap().report.records;
    (records, model, samples)
}

/// Trailing moving average with window `w` (only full windows).
pub fn moving_average(v: &[f64], w: usize) -> Vec<f64> {
    v.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
}
