mod common;

use std::collections::HashMap;

use mts_core::autodiff::{grad_check, AdamConfig, AdamState, GradCheckOptions, ParamStore, Tape, Var};
use mts_core::models::{
    add_encoder_layer, build, export_attention, import_attention, mhsa_encoder_layer, Architecture, ForwardOptions,
    Model, ModelConfig,
};
use ndarray::{Array3, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::param_oracle;

fn random_batch(b: usize, t: usize, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((b, t, 23), |_| rng.random_range(-1.0..1.0))
}

#[test]
fn param_counts_match_closed_form_for_every_preset() {
    for name in ModelConfig::preset_names() {
        let cfg = ModelConfig::preset(name).unwrap();
        let m = build::<f32>(&cfg, 0).unwrap();
        assert_eq!(m.param_count(), param_oracle(&cfg), "{name}");
    }
}

#[test]
fn full_preset_counts() {
    let count = |n: &str| param_oracle(&ModelConfig::preset(n).unwrap());
    assert_eq!(count("conv-mhsa"), 7_910_145);
    assert_eq!(count("conv-lstm"), 24_683_777);
    assert_eq!(count("ex-conv-lstm"), 28_879_105);
    assert_eq!(count("conv-lstm-plus"), count("conv-lstm"));
}

fn check_layer<F>(f: F, inputs: &[ArrayD<f64>]) -> mts_core::autodiff::GradCheckReport
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    grad_check(f, inputs, &GradCheckOptions::with_tolerance(1e-4)).unwrap()
}

#[test]
fn encoder_layer_gradients() {
    let (d, ffn, heads, s) = (8, 6, 2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::<f64>::new();
    add_encoder_layer(&mut store, "enc", d, ffn, &mut rng);
    let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
    let mut inputs = vec![ArrayD::from_shape_fn(IxDyn(&[2, s, d]), |_| rng.random_range(-1.0..1.0))];
    for (_, p) in store.iter() {
        // Perturb gains and zero biases so no coordinate sits at a symmetric point.
        inputs.push(p.value.mapv(|v| v + rng.random_range(-0.3..0.3)));
    }
    let r = ArrayD::from_shape_fn(IxDyn(&[2, s, d]), |_| rng.random_range(-1.0..1.0));
    let report = check_layer(
        |_, v| {
            let map: HashMap<String, Var<'_, f64>> = names.iter().cloned().zip(v[1..].iter().copied()).collect();
            let (out, _) = mhsa_encoder_layer(&map, "enc", v[0], heads, 0.0, &mut None).unwrap();
            out.dot_const(&r)
        },
        &inputs,
    );
    assert!(report.pass, "{report:?}");
}

fn predict(m: &Model<f64>, x: &Array3<f64>) -> Vec<f64> {
    m.predict(x.view(), 64).unwrap()
}

#[test]
fn predictions_follow_batch_permutation() {
    for name in ["conv-mhsa-small", "conv-lstm-small", "ex-conv-lstm-small", "short-lstm-small"] {
        let m = build::<f64>(&ModelConfig::preset(name).unwrap(), 3).unwrap();
        let t = m.input_len(256);
        let x = random_batch(4, t, 5);
        let perm = [2usize, 0, 3, 1];
        let xp = x.select(Axis(0), &perm);
        let a = predict(&m, &x);
        let b = predict(&m, &xp);
        for (i, &p) in perm.iter().enumerate() {
            assert!((b[i] - a[p]).abs() < 1e-12, "{name}");
        }
        // Chunked evaluation agrees with one batch.
        let c = m.predict(x.view(), 1).unwrap();
        for (u, v) in a.iter().zip(&c) {
            assert!((u - v).abs() < 1e-12, "{name}");
        }
    }
}

fn classifier_loss(m: &Model<f64>, x: &Array3<f64>, labels: &[f64]) -> f64 {
    let tape = Tape::inference();
    let xv = tape.constant(x.clone().into_dyn());
    let out = m.forward_classifier(&tape, xv, ForwardOptions::default()).unwrap();
    out.probs.bce(labels).scalar()
}

fn vae_loss(m: &Model<f64>, x: &Array3<f64>) -> f64 {
    let tape = Tape::inference();
    let xv = tape.constant(x.clone().into_dyn());
    let out = m.forward_vae(&tape, xv, ForwardOptions::default()).unwrap();
    out.recon.mse(xv).scalar()
}

#[test]
fn one_adam_step_lowers_the_loss_for_every_architecture() {
    let names = [
        "conv-mhsa-small",
        "conv-lstm-small",
        "ex-conv-lstm-small",
        "short-lstm-small",
        "vae-conv-gru-small",
    ];
    for name in names {
        let cfg = ModelConfig::preset(name).unwrap();
        let mut m = build::<f64>(&cfg, 1).unwrap();
        let t = m.input_len(256);
        let x = random_batch(4, t, 9);
        let labels = [1.0, 0.0, 1.0, 0.0];
        let mut adam = AdamState::new(AdamConfig::default());
        let before;
        {
            let tape = Tape::new();
            let xv = tape.constant(x.clone().into_dyn());
            let loss = if cfg.arch == Architecture::VaeConvGru {
                let out = m.forward_vae(&tape, xv, ForwardOptions::default()).unwrap();
                out.recon.mse(xv)
            } else {
                let out = m.forward_classifier(&tape, xv, ForwardOptions::default()).unwrap();
                out.probs.bce(&labels)
            };
            before = loss.scalar();
            let grads = tape.backward(loss).unwrap();
            adam.step(&mut m.params, grads.param_grads(), 1e-5);
        }
        let after = if cfg.arch == Architecture::VaeConvGru {
            vae_loss(&m, &x)
        } else {
            classifier_loss(&m, &x, &labels)
        };
        assert!(after < before, "{name}: {before} -> {after}");
    }
}

#[test]
fn attention_rows_are_distributions_and_export_round_trips() {
    let m = build::<f64>(&ModelConfig::preset("conv-mhsa-small").unwrap(), 2).unwrap();
    let x = random_batch(1, 256, 4);
    let maps = m.attention_maps(x.index_axis(Axis(0), 0)).unwrap();
    assert_eq!(maps.len(), m.config.layers);
    let s = 256 / m.config.reduction();
    for layer in &maps {
        assert_eq!(layer.dim(), (m.config.heads, s, s));
        for row in layer.lanes(Axis(2)) {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let files = export_attention(&maps, dir.path()).unwrap();
    assert_eq!(files.len(), m.config.layers * m.config.heads);
    let back = import_attention(dir.path()).unwrap();
    assert_eq!(back.len(), maps.len());
    for (a, b) in maps.iter().zip(&back) {
        assert_eq!(a.dim(), b.dim());
        for (u, v) in a.iter().zip(b.iter()) {
            assert_eq!(*u, *v);
        }
    }
}

#[test]
fn vae_output_matches_input_shape() {
    let m = build::<f64>(&ModelConfig::preset("vae-conv-gru-small").unwrap(), 0).unwrap();
    let x = random_batch(2, 128, 1);
    let tape = Tape::inference();
    let xv = tape.constant(x.clone().into_dyn());
    let out = m.forward_vae(&tape, xv, ForwardOptions::default()).unwrap();
    assert_eq!(out.recon.shape(), x.shape());
    let kld = out.mix_logits.kld_mixture(out.mu, out.logvar).unwrap().scalar();
    assert!(kld >= 0.0);
}
