mod common;

use common::*;
use tomopick::coords::{rasterize_heatmap, CoordConvention};
use tomopick::net::{Net, NetConfig, Tensor4};
use tomopick::synth::{generate_tomogram, SceneSpec};
use tomopick::train::{
    ema_update, sample_windows, standardize, train_with, Sample, TrainConfig, TrainError,
};

fn toy_net() -> NetConfig {
    NetConfig {
        in_depth: 16,
        window_hw: 32,
        widths: vec![4, 8, 16],
        seed: 1,
        ..NetConfig::variant_a(1)
    }
}

/// 32 windows of 16×32×32 from four one-class scenes.
fn toy_windows() -> Vec<Sample> {
    let classes = vec![single_class("particle", 60.0, 3.0, 0.4)];
    let conv = CoordConvention::default();
    let mut out = Vec::new();
    for s in 0..4u64 {
        let spec = SceneSpec {
            dims: [64, 64, 64],
            classes: classes.clone(),
            counts: vec![4],
            noise_sigma: 0.1,
            min_separation: 150.0,
            seed: 200 + s,
            conv,
        };
        let (vol, picks) = generate_tomogram(&spec).unwrap();
        let target = rasterize_heatmap(&picks, &classes, vol.dims(), conv)
            .unwrap()
            .heatmap;
        out.extend(
            sample_windows(
                &standardize(&vol),
                &target,
                &picks,
                conv,
                [16, 32, 32],
                8,
                0.7,
                s,
            )
            .unwrap(),
        );
    }
    out
}

fn toy_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        warmup_epochs: if epochs > 1 { 1 } else { 0 },
        batch_size: 8,
        base_lr: 1e-3,
        ema_decay: 0.99,
        ..TrainConfig::variant_a_preset()
    }
}

fn flat(net: &Net<f32>) -> Vec<u32> {
    net.params()
        .params()
        .iter()
        .flat_map(|p| p.data.iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn toy_training_halves_the_loss() {
    let data = toy_windows();
    assert_eq!(data.len(), 32);
    let out = train_with(&data, Net::new(toy_net()).unwrap(), &toy_train(25), |_| {}).unwrap();
    assert_eq!(out.history.len(), 25);
    assert!(
        out.final_loss < 0.5 * out.initial_loss,
        "{} -> {}",
        out.initial_loss,
        out.final_loss
    );
}

#[test]
fn zero_epochs_leave_initial_weights() {
    let data = toy_windows();
    let init = Net::new(toy_net()).unwrap();
    let out = train_with(&data, init.clone(), &toy_train(0), |_| {}).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(flat(&out.net), flat(&init));
    assert_eq!(flat(&out.ema), flat(&init));
    assert_eq!(out.initial_loss, out.final_loss);
}

#[test]
fn same_seed_gives_identical_runs() {
    let data = toy_windows();
    let run = || train_with(&data, Net::new(toy_net()).unwrap(), &toy_train(2), |_| {}).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(flat(&a.net), flat(&b.net));
    assert_eq!(flat(&a.ema), flat(&b.ema));
}

#[test]
fn non_finite_loss_aborts() {
    let mut data = toy_windows();
    let shape = data[0].input.shape();
    data[0].input = Tensor4::from_fn(shape, |_| f32::NAN);
    let err = train_with(&data, Net::new(toy_net()).unwrap(), &toy_train(1), |_| {}).unwrap_err();
    assert!(matches!(err, TrainError::Diverged { .. }), "{err:?}");
}

#[test]
fn ema_fixed_point() {
    let params: Vec<f32> = (0..100).map(|i| (i as f32 * 0.37).sin()).collect();
    let mut ema = params.clone();
    for decay in [0.0, 0.5, 0.99, 0.999] {
        ema_update(&mut ema, &params, decay).unwrap();
        assert_eq!(ema, params);
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    for cfg in [
        NetConfig {
            in_depth: 8,
            window_hw: 16,
            widths: vec![2, 4, 4],
            ..NetConfig::variant_a(2)
        },
        NetConfig {
            in_depth: 8,
            window_hw: 16,
            widths: vec![2, 3, 4, 4, 4],
            ..NetConfig::variant_b(2)
        },
    ] {
        let net = Net::<f64>::new(cfg.clone()).unwrap();
        let mut r = rng(4);
        let x = Tensor4::from_fn(cfg.input_shape(), |_| unit(&mut r) - 0.5);
        let zero = Tensor4::from_fn(cfg.output_shape(), |_| 0.0);
        let grads = net.forward_pass(&x).unwrap().backward(&net, &zero).unwrap();
        for (name, g) in grads.iter() {
            if let Some(g) = g {
                assert!(g.iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }
}
