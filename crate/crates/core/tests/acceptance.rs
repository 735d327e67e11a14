//! Acceptance suite: runs every criterion in order and prints one
//! PASS/FAIL line each. Exits non-zero if any criterion fails.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use tomopick::coords::{
    pixel_to_phys, rasterize_heatmap, CoordConvention, ParticleClassSpec, Pick, PickSet,
};
use tomopick::losses::{heatmap_weighted, pos_neg_balanced};
use tomopick::metric::{evaluate, fbeta, match_class, EvalOptions};
use tomopick::net::{check_param_gradients, write_checkpoint, Net, NetConfig, Tensor4};
use tomopick::postproc::{extract_picks, local_maxima};
use tomopick::synth::{generate_tomogram, SceneSpec};
use tomopick::tiler::{
    aggregate, plan_axis, AggregateOptions, BlendMask, ConstantPredictor, HeatmapCropPredictor,
    NetPredictor, TileGeometry, WindowPlan,
};
use tomopick::train::{sample_windows, standardize, train_with, TrainConfig};
use tomopick::volgrid::{Heatmap, Volume3D};

type Outcome = Result<String, String>;

/// Name, time budget and check.
type Criterion<'a> = (&'static str, Duration, Box<dyn Fn() -> Outcome + 'a>);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !($cond) {
            return Err(format!($($msg)+));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// Window plans.

fn plans() -> Outcome {
    let plan = WindowPlan::new([184, 630, 630], TileGeometry::default()).map_err(err)?;
    ensure!(
        plan.padded_dims() == [184, 656, 656],
        "padded dims {:?}",
        plan.padded_dims()
    );
    ensure!(plan.pad_before == [0, 13, 13], "pads {:?}", plan.pad_before);
    let [_, cy, cx] = plan.counts();
    ensure!((cy, cx) == (12, 12), "xy windows {cy} x {cx}");
    let xy = plan_axis(656, 128, 48, true).map_err(err)?;
    ensure!(xy.origins.len() == 12 && !xy.clamped_last, "xy axis {xy:?}");
    let z16 = plan_axis(184, 16, 8, true).map_err(err)?;
    ensure!(z16.origins.len() == 22 && !z16.clamped_last, "z16 {z16:?}");
    let z32 = plan_axis(184, 32, 16, true).map_err(err)?;
    ensure!(
        z32.origins.len() == 11 && z32.clamped_last && z32.origins[10] == 152,
        "z32 {z32:?}"
    );
    Ok("xy 12 x 12, z 22 and 11 (last clamped to 152)".into())
}

// Coordinate round trip.

fn coordinate_round_trip() -> Outcome {
    let conv = CoordConvention::default();
    let dims = [64usize; 3];
    let class = single_class("c", 50.0, 2.0, 0.5);
    let classes = [class];
    let mut worst = 0.0f64;
    let mut total = 0;
    let mut seen = [[false; 64]; 3];
    // Eight interleaved lattices with pitch 8 put a pick on every
    // coordinate value of every axis while keeping neighbors apart.
    for shift in 0..8usize {
        let idx: Vec<usize> = (shift..64).step_by(8).collect();
        let mut records = Vec::new();
        for &z in &idx {
            for &y in &idx {
                for &x in &idx {
                    let phys = |i: usize| conv.pixel_to_phys(i as i64);
                    records.push(Pick::new(0, phys(x), phys(y), phys(z)));
                    for (a, i) in [z, y, x].into_iter().enumerate() {
                        seen[a][i] = true;
                    }
                }
            }
        }
        let truth = PickSet::new(records);
        let hm = rasterize_heatmap(&truth, &classes, dims, conv)
            .map_err(err)?
            .heatmap;
        let found = extract_picks(&hm, &classes, 7, conv).map_err(err)?;
        ensure!(
            found.len() == truth.len(),
            "shift {shift}: {} picks recovered of {}",
            found.len(),
            truth.len()
        );
        for (a, b) in sorted_coords(&found.records)
            .iter()
            .zip(sorted_coords(&truth.records))
        {
            ensure!(a.0 == b.0, "class mismatch");
            worst = worst
                .max((a.1 - b.1).abs())
                .max((a.2 - b.2).abs())
                .max((a.3 - b.3).abs());
        }
        total += truth.len();
    }
    ensure!(
        seen.iter().flatten().all(|&s| s),
        "lattice missed a coordinate"
    );
    for i in 0..64i64 {
        let back = conv.phys_to_pixel(pixel_to_phys(i, conv.spacing));
        ensure!(back.floor() as i64 == i, "voxel {i} maps back to {back}");
    }
    ensure!(worst <= 1e-3, "max coordinate error {worst:e}");
    Ok(format!("{total} picks, max error {worst:e}"))
}

// Losses.

fn losses() -> Outcome {
    let n = 64;
    let zeros = vec![0.0f64; n];
    let ones = vec![1.0f64; n];
    let eps = 1e-6;
    let cases = [
        (
            "weighted y=0 p=1",
            heatmap_weighted(&ones, &zeros, 0.1).map_err(err)?.0,
            0.1,
        ),
        (
            "weighted y=1 p=0",
            heatmap_weighted(&zeros, &ones, 0.1).map_err(err)?.0,
            1.1,
        ),
        (
            "balanced y=1 p=0",
            pos_neg_balanced(&zeros, &ones, eps).map_err(err)?.0,
            n as f64 / (n as f64 + eps),
        ),
        (
            "balanced y=0 p=1",
            pos_neg_balanced(&ones, &zeros, eps).map_err(err)?.0,
            n as f64 / (n as f64 + eps),
        ),
        (
            "weighted mixed",
            heatmap_weighted(&[0.5, 0.0], &[1.0, 0.0], 0.1)
                .map_err(err)?
                .0,
            0.1375,
        ),
        (
            "balanced mixed",
            pos_neg_balanced(&[0.5, 0.0], &[1.0, 0.0], eps)
                .map_err(err)?
                .0,
            0.25 / (1.0 + eps),
        ),
    ];
    for (name, got, want) in cases {
        ensure!((got - want).abs() <= 1e-9, "{name}: {got} vs {want}");
    }

    let mut rng = rng(3);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let y: Vec<f64> = (0..n)
            .map(|_| {
                if unit(&mut rng) < 0.3 {
                    0.0
                } else {
                    unit(&mut rng)
                }
            })
            .collect();
        let p: Vec<f64> = (0..n).map(|_| unit(&mut rng)).collect();
        let alpha = 0.1;
        let weighted = |q: &[f64]| heatmap_weighted(q, &y, alpha).unwrap().0;
        let balanced = |q: &[f64]| pos_neg_balanced(q, &y, eps).unwrap().0;
        let gw = heatmap_weighted(&p, &y, alpha).map_err(err)?.1;
        let gb = pos_neg_balanced(&p, &y, eps).map_err(err)?.1;
        for i in 0..n {
            for (f, g) in [(&weighted as &dyn Fn(&[f64]) -> f64, &gw), (&balanced, &gb)] {
                let num = central_diff(f, &p, i, 1e-3);
                let rel = (g[i] - num).abs() / g[i].abs().max(num.abs()).max(1e-8);
                ensure!(rel < 1e-5, "case {case} element {i}: {} vs {num}", g[i]);
                worst = worst.max(rel);
            }
        }
    }
    Ok(format!(
        "6 hand cases, 100 random 4x4x4 gradients, max rel error {worst:.1e}"
    ))
}

// Network gradient check.

fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor4<f64> {
    let mut r = rng(seed);
    Tensor4::from_fn(shape, |_| unit(&mut r) * 2.0 - 1.0)
}

fn network_gradients() -> Outcome {
    let a = NetConfig {
        in_depth: 8,
        window_hw: 16,
        widths: vec![2, 4, 4],
        seed: 11,
        ..NetConfig::variant_a(2)
    };
    let b = NetConfig {
        in_depth: 8,
        window_hw: 16,
        widths: vec![2, 3, 4, 4, 4],
        seed: 12,
        ..NetConfig::variant_b(2)
    };
    let mut parts = Vec::new();
    for (name, cfg) in [("A", a), ("B", b)] {
        let net = Net::<f64>::new(cfg.clone()).map_err(err)?;
        ensure!(
            net.param_count() <= 10_000,
            "{name}: {} params",
            net.param_count()
        );
        let x = random_tensor(cfg.input_shape(), 1);
        let up = random_tensor(cfg.output_shape(), 2);
        let report = check_param_gradients(&net, &x, &up, 3e-3, 1e-7).map_err(err)?;
        ensure!(
            report.checked == net.param_count(),
            "{name}: only {} checked",
            report.checked
        );
        ensure!(report.max_rel_error < 1e-3, "{name}: {report:?}");
        parts.push(format!(
            "{name} {} params rel {:.1e}",
            net.param_count(),
            report.max_rel_error
        ));
    }
    Ok(parts.join(", "))
}

// NMS against brute force.

fn nms_oracle() -> Outcome {
    let dims = [32usize; 3];
    let n = 32 * 32 * 32;
    let mut rng = rng(5);
    let mut compared = 0;
    for vol in 0..50 {
        // Every other volume is quantized to a few levels to force plateaus.
        let quantized = vol % 2 == 1;
        let values: Vec<f32> = (0..n)
            .map(|_| {
                let u = unit(&mut rng) as f32;
                if quantized {
                    (u * 4.0).floor() / 4.0
                } else {
                    u
                }
            })
            .collect();
        for k in [1, 3, 7] {
            let fast = local_maxima(&values, dims, k).map_err(err)?;
            let slow = brute_force_peaks(&values, dims, k);
            ensure!(
                fast == slow,
                "volume {vol} kernel {k}: {} vs {} peaks",
                fast.len(),
                slow.len()
            );
            compared += 1;
        }
    }
    Ok(format!("{compared} volume/kernel pairs, zero mismatches"))
}

// Aggregation.

fn random_heatmap(classes: usize, dims: [usize; 3], seed: u64) -> Heatmap {
    let mut r = rng(seed);
    let n = classes * dims.iter().product::<usize>();
    let values = (0..n).map(|_| unit(&mut r) as f32).collect();
    Heatmap::new(classes, dims, values, 10.012).unwrap()
}

fn aggregation() -> Outcome {
    let dims = [40, 90, 90];
    let vol = Volume3D::zeros(dims, 10.012).map_err(err)?;
    let geometry = TileGeometry {
        window: [16, 32, 32],
        stride: [8, 12, 12],
        pad_to_xy: 96,
    };
    let plan = WindowPlan::new(dims, geometry).map_err(err)?;
    let masks = [
        ("tent", BlendMask::tent(plan.window(), 0.01).map_err(err)?),
        ("tent0", BlendMask::tent(plan.window(), 0.0).map_err(err)?),
        ("uniform", BlendMask::uniform(plan.window())),
    ];
    let source = random_heatmap(2, dims, 9);
    let oracle = HeatmapCropPredictor::new(&source, &plan).map_err(err)?;
    let constant = ConstantPredictor {
        classes: 2,
        value: 0.37,
    };
    let mut worst = 0.0f64;
    for (name, mask) in &masks {
        let run = |workers: usize, p: &dyn tomopick::tiler::Predictor| {
            aggregate(p, &vol, &plan, mask, AggregateOptions { workers }).map_err(err)
        };
        let flat = run(1, &constant)?;
        for &v in flat.values() {
            worst = worst.max((v as f64 - 0.37f32 as f64).abs());
        }
        let one = run(1, &oracle)?;
        for (a, b) in one.values().iter().zip(source.values()) {
            worst = worst.max((a - b).abs() as f64);
        }
        for workers in [2, 8] {
            let other = run(workers, &oracle)?;
            let same = one
                .values()
                .iter()
                .zip(other.values())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            ensure!(same, "{name}: {workers} workers differ from 1");
        }
    }
    ensure!(worst <= 1e-6, "max deviation {worst:e}");
    Ok(format!(
        "{} windows, 3 masks, max deviation {worst:.1e}, 1/2/8 workers bit-identical",
        plan.window_count()
    ))
}

// Metric.

fn metric() -> Outcome {
    let hand = [
        (fbeta(1, 1, 0, 4.0), 8.5 / 9.0),
        (fbeta(1, 0, 1, 4.0), 8.5 / 16.5),
    ];
    for (got, want) in hand {
        ensure!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
    let gt = [Pick::new(0, 0.0, 0.0, 0.0)];
    let preds = [Pick::new(0, 2.0, 0.0, 0.0), Pick::new(0, 1.0, 0.0, 0.0)];
    let m = match_class(&preds, &gt, 10.0).map_err(err)?;
    ensure!(
        (m.true_pos, m.false_pos, m.false_neg) == (1, 1, 0) && m.pairs[0].0 == 1,
        "two-near-one case {m:?}"
    );

    let mut r = rng(7);
    let tau = 10.0;
    for case in 0..200 {
        let (preds, gts) = single_candidate_instance(&mut r, 8, tau);
        let greedy = match_class(&preds, &gts, tau).map_err(err)?;
        let (tp, dist) = optimal_match(&preds, &gts, tau);
        let greedy_dist: f64 = greedy.pairs.iter().map(|p| p.2).sum();
        ensure!(
            greedy.true_pos == tp && (greedy_dist - dist).abs() < 1e-9,
            "case {case}: greedy {} ({greedy_dist}) vs optimal {tp} ({dist})",
            greedy.true_pos
        );
        ensure!(
            greedy.false_pos == preds.len() - tp && greedy.false_neg == gts.len() - tp,
            "case {case}: bookkeeping"
        );
    }
    Ok("hand cases exact, 200 random instances agree with the optimal matcher".into())
}

// CLI helpers.

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(bin()).args(args).output().map_err(err)?;
    if !out.status.success() {
        return Err(format!(
            "`{}` failed ({}): {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn score_of(report: &str) -> Result<f64, String> {
    report
        .lines()
        .find_map(|l| l.strip_prefix("score="))
        .ok_or("no score line")?
        .parse()
        .map_err(err)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

// Oracle pipeline through the command line.

fn oracle_pipeline(dir: &Path) -> Outcome {
    let cfg = dir.join("oracle.cfg");
    std::fs::write(
        &cfg,
        "scene.dims = 128,128,128\n\
         scene.counts = 5,5,5,5,5,5\n\
         scene.noise_sigma = 0\n\
         tiling.window_hw = 64\n\
         tiling.xy_stride = 32\n\
         tiling.pad_to = 0\n",
    )
    .map_err(err)?;
    let c = p(&cfg);
    let (vol, truth, target, pred, picks, report) = (
        dir.join("scene.vol"),
        dir.join("truth.csv"),
        dir.join("target.hmc"),
        dir.join("pred.hmc"),
        dir.join("picks.csv"),
        dir.join("report.txt"),
    );
    cli(&[
        "--config",
        c,
        "--seed",
        "8",
        "gen",
        "--out-volume",
        p(&vol),
        "--out-picks",
        p(&truth),
    ])?;
    cli(&[
        "--config",
        c,
        "rasterize",
        "--picks",
        p(&truth),
        "--volume",
        p(&vol),
        "--out",
        p(&target),
    ])?;
    cli(&[
        "--config",
        c,
        "infer",
        "--volume",
        p(&vol),
        "--oracle",
        p(&target),
        "--out",
        p(&pred),
    ])?;
    cli(&[
        "--config",
        c,
        "pick",
        "--heatmap",
        p(&pred),
        "--out",
        p(&picks),
    ])?;
    let text = cli(&[
        "--config",
        c,
        "eval",
        "--pred",
        p(&picks),
        "--truth",
        p(&truth),
        "--out",
        p(&report),
    ])?;
    let score = score_of(&text)?;
    ensure!(score == 1.0, "score {score}\n{text}");
    Ok("6 classes x 5 particles at 128^3, score exactly 1".into())
}

// Learned pipeline.

const TOY_WINDOW: [usize; 3] = [16, 32, 32];

fn toy_classes() -> Vec<ParticleClassSpec> {
    vec![single_class("particle", 60.0, 3.0, 0.4)]
}

fn toy_scene(seed: u64) -> Result<(Volume3D, PickSet), String> {
    let spec = SceneSpec {
        dims: [64, 64, 64],
        classes: toy_classes(),
        counts: vec![4],
        noise_sigma: 0.1,
        min_separation: 150.0,
        seed,
        conv: CoordConvention::default(),
    };
    generate_tomogram(&spec).map_err(err)
}

fn toy_geometry() -> TileGeometry {
    TileGeometry {
        window: TOY_WINDOW,
        stride: [8, 16, 16],
        pad_to_xy: 0,
    }
}

fn learned_pipeline(checkpoint: &Path) -> Outcome {
    let conv = CoordConvention::default();
    let classes = toy_classes();
    let mut data = Vec::new();
    for s in 0..32u64 {
        let (vol, picks) = toy_scene(1000 + s)?;
        let target = rasterize_heatmap(&picks, &classes, vol.dims(), conv)
            .map_err(err)?
            .heatmap;
        data.extend(
            sample_windows(
                &standardize(&vol),
                &target,
                &picks,
                conv,
                TOY_WINDOW,
                8,
                0.7,
                s,
            )
            .map_err(err)?,
        );
    }
    let net_cfg = NetConfig {
        in_depth: TOY_WINDOW[0],
        window_hw: TOY_WINDOW[1],
        widths: vec![4, 8, 16],
        seed: 1,
        ..NetConfig::variant_a(classes.len())
    };
    let train_cfg = TrainConfig {
        epochs: 14,
        warmup_epochs: 1,
        batch_size: 8,
        base_lr: 1e-3,
        ema_decay: 0.99,
        ..TrainConfig::variant_a_preset()
    };
    let net = Net::new(net_cfg).map_err(err)?;
    let outcome = train_with(&data, net, &train_cfg, |_| {}).map_err(err)?;
    write_checkpoint(checkpoint, &outcome.ema).map_err(err)?;

    let predictor = NetPredictor::new(outcome.ema.clone());
    let mut scores = Vec::new();
    for s in 0..8u64 {
        let (vol, truth) = toy_scene(5000 + s)?;
        let plan = WindowPlan::new(vol.dims(), toy_geometry()).map_err(err)?;
        let mask = BlendMask::tent(plan.window(), 0.01).map_err(err)?;
        let hm = aggregate(
            &predictor,
            &standardize(&vol),
            &plan,
            &mask,
            AggregateOptions::default(),
        )
        .map_err(err)?;
        let picks = extract_picks(&hm, &classes, 7, conv).map_err(err)?;
        scores.push(
            evaluate(&picks, &truth, &classes, EvalOptions::default())
                .map_err(err)?
                .weighted,
        );
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let ratio = outcome.final_loss / outcome.initial_loss;
    let detail = format!(
        "held-out F-beta {mean:.4}, loss {:.5} -> {:.5} (ratio {ratio:.3})",
        outcome.initial_loss, outcome.final_loss
    );
    ensure!(mean >= 0.8, "{detail}");
    ensure!(ratio < 0.5, "{detail}");
    Ok(detail)
}

// Ablation flags.

fn ablations(dir: &Path, checkpoint: &Path) -> Outcome {
    let plan = cli(&["--xy-stride", "76", "plan", "--dims", "184,630,630"])?;
    ensure!(plan.contains("xy windows: 8 x 8"), "coarse plan:\n{plan}");

    let cfg = dir.join("toy.cfg");
    std::fs::write(
        &cfg,
        "class.particle.radius = 60\n\
         class.particle.sigma_vox = 3\n\
         class.particle.threshold = 0.4\n\
         class.particle.tau = 60\n\
         class.particle.weight = 1\n\
         tiling.window_depth = 16\n\
         tiling.window_hw = 32\n\
         tiling.xy_stride = 16\n\
         tiling.pad_to = 0\n",
    )
    .map_err(err)?;
    let c = p(&cfg);
    let (vol, truth) = toy_scene(5000)?;
    let (vol_path, truth_path) = (dir.join("held.vol"), dir.join("held.csv"));
    tomopick::volgrid::write_volume(&vol, &vol_path).map_err(err)?;
    std::fs::write(&truth_path, truth.to_text(&toy_classes())).map_err(err)?;

    let mut parts = Vec::new();
    for (name, flags) in [
        ("baseline", vec![]),
        ("coarse stride", vec!["--xy-stride", "32"]),
        ("no blend weight", vec!["--no-blend-weight"]),
    ] {
        let hm = dir.join(format!("{}.hmc", name.replace(' ', "_")));
        let picks = dir.join(format!("{}.csv", name.replace(' ', "_")));
        let mut args = vec!["--config", c];
        args.extend(&flags);
        let mut infer = args.clone();
        infer.extend([
            "infer",
            "--volume",
            p(&vol_path),
            "--checkpoint",
            p(checkpoint),
            "--out",
            p(&hm),
        ]);
        cli(&infer)?;
        let mut pick = args.clone();
        pick.extend(["pick", "--heatmap", p(&hm), "--out", p(&picks)]);
        cli(&pick)?;
        let mut eval = args.clone();
        eval.extend(["eval", "--pred", p(&picks), "--truth", p(&truth_path)]);
        let score = score_of(&cli(&eval)?)?;
        ensure!(score.is_finite(), "{name}: score {score}");
        parts.push(format!("{name} {score:.4}"));
    }
    Ok(format!("8 x 8 coarse plan; {}", parts.join(", ")))
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let checkpoint: PathBuf = dir.path().join("toy.wts");
    let criteria: Vec<Criterion> = vec![
        ("window plans", Duration::from_secs(1), Box::new(plans)),
        (
            "coordinate round trip",
            Duration::from_secs(10),
            Box::new(coordinate_round_trip),
        ),
        (
            "loss values and gradients",
            Duration::from_secs(30),
            Box::new(losses),
        ),
        (
            "network gradient check",
            Duration::from_secs(120),
            Box::new(network_gradients),
        ),
        (
            "NMS oracle equivalence",
            Duration::from_secs(30),
            Box::new(nms_oracle),
        ),
        (
            "aggregation unbiasedness",
            Duration::from_secs(30),
            Box::new(aggregation),
        ),
        (
            "metric correctness",
            Duration::from_secs(30),
            Box::new(metric),
        ),
        (
            "oracle pipeline",
            Duration::from_secs(120),
            Box::new(|| oracle_pipeline(dir.path())),
        ),
        (
            "learned pipeline",
            Duration::from_secs(1200),
            Box::new(|| learned_pipeline(&checkpoint)),
        ),
        (
            "ablation flags",
            Duration::from_secs(300),
            Box::new(|| ablations(dir.path(), &checkpoint)),
        ),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let (verdict, detail) = match result {
            Ok(d) if elapsed <= *budget => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; over the {budget:?} budget")),
            Err(e) => ("FAIL", e),
        };
        if verdict == "FAIL" {
            failed += 1;
        }
        println!(
            "criterion {:>2} {verdict} {name} [{:.2}s]: {detail}",
            i + 1,
            elapsed.as_secs_f64()
        );
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
