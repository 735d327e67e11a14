use rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use tomopick::net::{
    check_directional, check_param_gradients, Downsample, Net, NetConfig, Tensor4,
};

fn uniform(rng: &mut Xoshiro256PlusPlus) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor4<f64> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    Tensor4::from_fn(shape, |_| uniform(&mut rng) * 2.0 - 1.0)
}

fn tiny_a(classes: usize) -> NetConfig {
    NetConfig {
        in_depth: 8,
        window_hw: 16,
        widths: vec![2, 4, 4],
        seed: 11,
        ..NetConfig::variant_a(classes)
    }
}

fn tiny_b(classes: usize) -> NetConfig {
    NetConfig {
        in_depth: 8,
        window_hw: 16,
        widths: vec![2, 3, 4, 4, 4],
        seed: 12,
        ..NetConfig::variant_b(classes)
    }
}

/// `tolerance` is the worst per-element relative error allowed. Variant B's
/// scSE gate weights carry gradients near 1e-6, where finite-difference
/// roundoff alone is about 1e-10, so it gets a looser bound.
fn full_check(cfg: NetConfig, tolerance: f64) {
    let net = Net::<f64>::new(cfg.clone()).unwrap();
    assert!(net.param_count() <= 10_000, "{} params", net.param_count());
    let x = random_tensor(cfg.input_shape(), 1);
    let up = random_tensor(cfg.output_shape(), 2);
    let report = check_param_gradients(&net, &x, &up, 3e-3, 1e-7).unwrap();
    assert_eq!(report.checked, net.param_count());
    assert!(report.max_rel_error < tolerance, "{report:?}");
}

#[test]
fn variant_a_gradients_match_finite_differences() {
    full_check(tiny_a(2), 1e-5);
}

#[test]
fn variant_a_strided_gradients_match_finite_differences() {
    full_check(
        NetConfig {
            downsample: Downsample::StridedConv3d,
            ..tiny_a(1)
        },
        1e-5,
    );
}

#[test]
fn variant_b_gradients_match_finite_differences() {
    full_check(tiny_b(2), 1e-4);
}

#[test]
fn f32_directional_check() {
    for cfg in [tiny_a(1), tiny_b(1)] {
        let net = Net::<f32>::new(cfg.clone()).unwrap();
        let x = random_tensor(cfg.input_shape(), 3).cast::<f32>();
        let up = random_tensor(cfg.output_shape(), 4).cast::<f32>();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
        let dir: Vec<Vec<f64>> = net
            .params()
            .params()
            .iter()
            .map(|p| p.data.iter().map(|_| uniform(&mut rng) - 0.5).collect())
            .collect();
        let rel = check_directional(&net, &x, &up, &dir, 1e-2).unwrap();
        assert!(rel < 1e-3, "{rel}");
    }
}

#[test]
fn frozen_groups_get_no_gradient() {
    let cfg = tiny_b(1);
    let mut net = Net::<f64>::new(cfg.clone()).unwrap();
    net.freeze("stem");
    net.freeze("fusion");
    let x = random_tensor(cfg.input_shape(), 6);
    net.forward_cached(&x).unwrap();
    let grads = net.backward(&random_tensor(cfg.output_shape(), 7)).unwrap();
    for (name, g) in grads.iter() {
        let frozen = name.starts_with("stem.") || name.starts_with("fusion.");
        assert_eq!(g.is_none(), frozen, "{name}");
    }
    assert!(net.backward(&random_tensor(cfg.output_shape(), 7)).is_err());
}

#[test]
fn output_shapes_and_range() {
    for cfg in [
        NetConfig::variant_a(3),
        NetConfig {
            window_hw: 64,
            in_depth: 16,
            ..NetConfig::variant_b(2)
        },
    ] {
        let net = Net::<f32>::new(NetConfig {
            widths: cfg.widths.iter().map(|_| 2).collect(),
            ..cfg.clone()
        })
        .unwrap();
        let x = random_tensor(cfg.input_shape(), 8).cast::<f32>();
        let y = net.forward(&x).unwrap();
        assert_eq!(y.shape(), cfg.output_shape());
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn seeded_init_is_deterministic() {
    let a = Net::<f32>::new(tiny_b(1)).unwrap();
    let b = Net::<f32>::new(tiny_b(1)).unwrap();
    assert_eq!(a.params(), b.params());
    let c = Net::<f32>::new(NetConfig {
        seed: 99,
        ..tiny_b(1)
    })
    .unwrap();
    assert_ne!(a.params(), c.params());
}
