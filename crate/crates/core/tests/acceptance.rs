//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! nonzero if any criterion fails.
//!
//! ```text
//! cargo test --test acceptance            # all criteria
//! cargo test --test acceptance -- 2 4     # selected criteria
//! GHL_EXTENDED=1 cargo test --release --test acceptance -- 8
//! ```

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ghl::autodiff::{forward_pass, gradient_check, HebbianTrace, Network};
use ghl::datasets::{data_dir, mnist_paths, synthetic_blobs_split, Split};
use ghl::layers::{ActivationKind, LayerSpec, NetworkSpec};
use ghl::plasticity::{swta_update, unit_norms, RuleKind, UpdateRule};
use ghl::rng::SeededRng;
use ghl::tensor::Tensor;
use ghl::trainer::ablation::{run_ablation, AblationPlan};
use ghl::trainer::checkpoint::Checkpoint;
use ghl::trainer::metrics::{to_csv, MetricsLayout};
use ghl::trainer::{compute_step, init_network, train_on, train_step, DataSplits, TrainConfig};

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Verdict,
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

// ---------------------------------------------------------------- 1

fn random_net(rng: &mut SeededRng, conv: bool) -> NetworkSpec {
    let act = |rng: &mut SeededRng| match rng.below(4) {
        0 => ActivationKind::Relu,
        1 => ActivationKind::Identity,
        2 => ActivationKind::Triangle { p: 1.0 },
        _ => ActivationKind::Triangle { p: 2.0 },
    };
    let classes = 2 + rng.below(7);
    let weighted = 1 + rng.below(3);
    if !conv {
        let mut width = 1 + rng.below(8);
        let input_shape = vec![width];
        let mut layers = Vec::new();
        for i in 0..weighted {
            let out = if i + 1 == weighted { classes } else { 1 + rng.below(8) };
            layers.push(LayerSpec::dense(width, out, rng.below(2) == 0));
            if i + 1 < weighted {
                layers.push(LayerSpec::act(act(rng)));
            }
            width = out;
        }
        return NetworkSpec { input_shape, layers };
    }
    let c = 1 + rng.below(3);
    let side = 3 + rng.below(4);
    let input_shape = vec![c, side, side];
    let mut layers = Vec::new();
    let (mut ch, mut h) = (c, side);
    for _ in 0..weighted.max(2) - 1 {
        let out = 1 + rng.below(8);
        let kernel = 1 + rng.below(3.min(h));
        let pad = rng.below(2);
        let stride = 1 + rng.below(2);
        layers.push(LayerSpec::Conv2d {
            in_channels: ch,
            out_channels: out,
            kernel,
            stride,
            pad,
            plastic: true,
        });
        layers.push(LayerSpec::act(act(rng)));
        h = (h + 2 * pad - kernel) / stride + 1;
        ch = out;
        if h >= 2 && rng.below(3) == 0 {
            layers.push(if rng.below(2) == 0 {
                LayerSpec::MaxPool { size: 2, stride: 2 }
            } else {
                LayerSpec::AvgPool { size: 2, stride: 2 }
            });
            h = (h - 2) / 2 + 1;
        }
    }
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::dense(ch * h * h, classes, false));
    NetworkSpec { input_shape, layers }
}

fn gradient_oracle() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut worst_net = 0;
    let (mut convs, mut triangles) = (0, 0);
    for i in 0..100u64 {
        let mut rng = SeededRng::derived(2024, i);
        let spec = random_net(&mut rng, i % 2 == 0);
        convs += spec.layers.iter().any(|l| matches!(l, LayerSpec::Conv2d { .. })) as usize;
        triangles += spec
            .layers
            .iter()
            .any(|l| matches!(l, LayerSpec::Activation { activation: ActivationKind::Triangle { .. } })) as usize;
        let net = init_network(&spec, i).unwrap();
        let batch = 1 + rng.below(4);
        let per: usize = spec.input_shape.iter().product();
        let mut shape = vec![batch];
        shape.extend(&spec.input_shape);
        let x = Tensor::new(shape, (0..batch * per).map(|_| rng.normal()).collect()).unwrap();
        let classes = spec.output_shape().unwrap()[0];
        let labels: Vec<usize> = (0..batch).map(|_| rng.below(classes)).collect();
        for check in gradient_check(&net, &x, &labels, 1e-5).unwrap() {
            if check.max_relative_error > worst {
                worst = check.max_relative_error;
                worst_net = i;
            }
        }
    }
    verdict(
        worst < 1e-5 && convs > 0 && triangles > 0,
        format!("max relative error {worst:.2e} (net {worst_net}) over 100 nets, {convs} with conv, {triangles} with triangle"),
    )
}

// ---------------------------------------------------------------- 2

fn ghl_identities() -> Verdict {
    let (train, _) = synthetic_blobs_split(5, 200, 0, 16, 3, 0.3).unwrap();
    let spec = NetworkSpec {
        input_shape: vec![16],
        layers: vec![
            LayerSpec::dense(16, 12, true),
            LayerSpec::act(ActivationKind::triangle()),
            LayerSpec::dense(12, 8, true),
            LayerSpec::act(ActivationKind::Relu),
            LayerSpec::dense(8, 3, false),
        ],
    };
    let mut net = init_network(&spec, 1).unwrap();
    let ghl = UpdateRule::new(RuleKind::Ghl);
    let swta = UpdateRule::new(RuleKind::HebbSwta);
    let mut rng = SeededRng::new(9);
    let (mut checked, mut active) = (0usize, 0usize);
    let mut failures = Vec::new();
    for step in 0..200 {
        let idx: Vec<usize> = (0..8).map(|_| rng.below(train.len())).collect();
        let (x, labels) = train.batch(&idx);
        let g = compute_step(&net, &x, &labels, &ghl, 1.0).unwrap();
        let h = compute_step(&net, &x, &labels, &swta, 1.0).unwrap();
        let scaled: Vec<_> = [0.5, 3.0]
            .iter()
            .map(|&c| compute_step(&net, &x, &labels, &ghl, c).unwrap())
            .collect();
        for layer in g.layers.iter().filter(|l| l.plastic) {
            let hebb = &h.layer(layer.layer).unwrap().update.delta;
            let d = layer.update.delta.data();
            let inner: f64 = d.iter().zip(layer.grad.data()).map(|(a, b)| a * b).sum();
            if inner > 0.0 {
                failures.push(format!("step {step} layer {}: <dW, G> = {inner}", layer.layer));
            }
            for (k, (&gv, &dv)) in layer.grad.data().iter().zip(d).enumerate() {
                checked += 1;
                if gv == 0.0 {
                    continue;
                }
                let hv = hebb.data()[k];
                if dv.abs().to_bits() != hv.abs().to_bits() {
                    failures.push(format!("step {step} layer {} entry {k}: |dW| {dv} vs |hebb| {hv}", layer.layer));
                }
                if hv != 0.0 {
                    active += 1;
                    if dv.signum() != -gv.signum() {
                        failures.push(format!("step {step} layer {} entry {k}: sign mismatch", layer.layer));
                    }
                }
                for s in &scaled {
                    let sd = s.layer(layer.layer).unwrap().update.delta.data()[k];
                    if sd.to_bits() != dv.to_bits() {
                        failures.push(format!("step {step} layer {} entry {k}: loss scaling changed {dv} to {sd}", layer.layer));
                    }
                }
            }
        }
        ghl::trainer::apply_step(&mut net, &g, &ghl, 0.05, 0.1).unwrap();
    }
    let detail = format!("{checked} weight-steps checked, {active} with both factors nonzero");
    match failures.first() {
        None => verdict(active > 0, detail),
        Some(first) => Verdict::Fail(format!("{} violations, first: {first}; {detail}", failures.len())),
    }
}

// ---------------------------------------------------------------- 3

fn orthonormal_basis(rng: &mut SeededRng, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            v.iter_mut().zip(b).for_each(|(a, c)| *a -= p * c);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= n);
        basis.push(v);
    }
    basis
}

fn oja_behavior() -> Verdict {
    let d = 6;
    let mut rng = SeededRng::new(31);
    let basis = orthonormal_basis(&mut rng, d);
    let variances = [4.0, 1.0, 0.5, 0.25, 0.1, 0.05];
    let spec = NetworkSpec {
        input_shape: vec![d],
        layers: vec![LayerSpec::dense(d, 3, true)],
    };
    let mut net = init_network(&spec, 3).unwrap();
    let rule = UpdateRule::new(RuleKind::HebbOja);
    let mut max_norm: f64 = 0.0;
    for _ in 0..1000 {
        let batch = 4;
        let mut x = Vec::with_capacity(batch * d);
        for _ in 0..batch {
            let z: Vec<f64> = variances.iter().map(|v: &f64| v.sqrt() * rng.normal()).collect();
            x.extend((0..d).map(|i| (0..d).map(|j| basis[j][i] * z[j]).sum::<f64>()));
        }
        let x = Tensor::new(vec![batch, d], x).unwrap();
        train_step(&mut net, &x, &[0; 4], &rule, 0.01, 0.01).unwrap();
        max_norm = max_norm.max(unit_norms(net.weight(0).unwrap()).into_iter().fold(0.0, f64::max));
    }
    let w = net.weight(0).unwrap();
    // top unit: largest output variance wᵀCw
    let col = |k: usize| -> Vec<f64> { (0..d).map(|i| w.data()[i * 3 + k]).collect() };
    let variance = |v: &[f64]| -> f64 {
        (0..d)
            .map(|j| variances[j] * v.iter().zip(&basis[j]).map(|(a, b)| a * b).sum::<f64>().powi(2))
            .sum()
    };
    let top = (0..3).max_by(|&a, &b| variance(&col(a)).total_cmp(&variance(&col(b)))).unwrap();
    let v = col(top);
    let cos = v.iter().zip(&basis[0]).map(|(a, b)| a * b).sum::<f64>() / v.iter().map(|a| a * a).sum::<f64>().sqrt();
    verdict(
        cos.abs() >= 0.95 && max_norm <= 2.0,
        format!("top unit {top}: |cos| to first PC {:.4}, max unit norm {max_norm:.4}", cos.abs()),
    )
}

// ---------------------------------------------------------------- 4

fn conv_dense_equivalence() -> Verdict {
    let mut worst: f64 = 0.0;
    for case in 0..50u64 {
        let mut rng = SeededRng::derived(77, case);
        let c = 1 + rng.below(3);
        let side = 1 + rng.below(4);
        let pad = rng.below(2);
        let kernel = side + 2 * pad;
        let oc = 1 + rng.below(5);
        let batch = 1 + rng.below(4);
        let spec = NetworkSpec {
            input_shape: vec![c, side, side],
            layers: vec![LayerSpec::conv(c, oc, kernel, pad, true)],
        };
        let net = init_network(&spec, case).unwrap();
        let x = Tensor::new(vec![batch, c, side, side], (0..batch * c * side * side).map(|_| rng.normal()).collect()).unwrap();
        let tau = 0.25 + rng.uniform();
        let trace = &forward_pass(&net, &x, Some(tau)).unwrap().traces[0];
        let w = net.weight(0).unwrap();
        let conv_delta = swta_update(trace, w).unwrap().delta;

        // dense oracle on zero-padded, flattened patches
        let fan_in = c * kernel * kernel;
        let mut patches = vec![0.0; batch * fan_in];
        for b in 0..batch {
            for ch in 0..c {
                for i in 0..side {
                    for j in 0..side {
                        patches[b * fan_in + (ch * kernel + i + pad) * kernel + j + pad] = x.data()[((b * c + ch) * side + i) * side + j];
                    }
                }
            }
        }
        let mut dense_w = vec![0.0; fan_in * oc];
        for o in 0..oc {
            for f in 0..fan_in {
                dense_w[f * oc + o] = w.data()[o * fan_in + f];
            }
        }
        let dense_w = Tensor::new(vec![fan_in, oc], dense_w).unwrap();
        let patches = Tensor::new(vec![batch, fan_in], patches).unwrap();
        let y = patches.matmul(&dense_w).unwrap();
        let dense_trace = HebbianTrace::from_dense(0, &patches, &y, tau).unwrap();
        let dense_delta = swta_update(&dense_trace, &dense_w).unwrap().delta;
        for o in 0..oc {
            for f in 0..fan_in {
                worst = worst.max((conv_delta.data()[o * fan_in + f] - dense_delta.data()[f * oc + o]).abs());
            }
        }
    }
    verdict(worst <= 1e-12, format!("max abs difference {worst:.2e} over 50 layers"))
}

// ---------------------------------------------------------------- 5

fn ablation_ordering() -> Verdict {
    let base = TrainConfig::named("blobs_ghl").unwrap();
    let data = DataSplits::load(&base, Path::new(".")).unwrap();
    let rules = vec![RuleKind::Ghl, RuleKind::SignOnly, RuleKind::HebbSwta, RuleKind::BackpropSgd];
    let plan = AblationPlan::new(base, rules.clone(), (0..5).collect());
    let report = run_ablation(&plan, &data).unwrap();
    let mean = |r| report.summary(r).map_or(0.0, |(m, _)| m);
    let diverged = report.runs.iter().filter(|r| r.error.is_some()).count();
    let mut table: Vec<String> = rules
        .iter()
        .map(|&r| match (report.summary(r), report.selected.get(&r)) {
            (Some((m, s)), Some(eta)) => format!("{r} {m:.4}±{s:.4} (eta {eta})"),
            _ => format!("{r} diverged at every rate"),
        })
        .collect();
    table.push(format!("{diverged} of {} runs diverged", report.runs.len()));
    verdict(
        mean(RuleKind::Ghl) >= mean(RuleKind::SignOnly)
            && mean(RuleKind::Ghl) >= mean(RuleKind::HebbSwta)
            && mean(RuleKind::BackpropSgd) >= 0.95,
        table.join("; "),
    )
}

// ---------------------------------------------------------------- 6

fn mnist_smoke() -> Verdict {
    let root = data_dir();
    let (images, _) = mnist_paths(&root, Split::Train);
    if !images.exists() {
        return Verdict::Skip(format!(
            "MNIST not found at {}; place the four IDX files in $GHL_DATA_DIR/mnist",
            images.display()
        ));
    }
    let ghl_cfg = TrainConfig::named("mnist_mlp_ghl").unwrap();
    let data = DataSplits::load(&ghl_cfg, &root).unwrap();
    let ghl = train_on(&ghl_cfg, &data, None, &mut |_| Ok(())).unwrap();
    let sgd_cfg = TrainConfig::named("mnist_mlp_sgd").unwrap();
    let sgd = train_on(&sgd_cfg, &data, None, &mut |_| Ok(())).unwrap();
    let (g, s) = (ghl.records.last().unwrap().test_acc, sgd.records.last().unwrap().test_acc);
    verdict(g >= 0.90 && s >= 0.95, format!("GHL test acc {g:.4}, SGD test acc {s:.4}"))
}

// ---------------------------------------------------------------- 7

fn determinism() -> Verdict {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        let mut cfg = TrainConfig::named("blobs_ghl").unwrap();
        cfg.epochs = 4;
        let data = DataSplits::load(&cfg, Path::new(".")).unwrap();
        let run = |c: &TrainConfig| train_on(c, &data, None, &mut |_| Ok(())).unwrap();
        let a = run(&cfg);
        let b = run(&cfg);
        let layout = MetricsLayout {
            layers: a.network.weighted_layer_ids(),
            wall_clock: false,
        };
        let csv_equal = to_csv(&a.records, &layout).unwrap() == to_csv(&b.records, &layout).unwrap();

        // interrupted after 2 epochs and resumed from the checkpoint file
        let dir = tempfile::tempdir().unwrap();
        let mut first_half = cfg.clone();
        first_half.checkpoint_path = Some(dir.path().join("run.ckpt"));
        let mut half = first_half.clone();
        half.epochs = 2;
        train_on(&half, &data, None, &mut |_| Ok(())).unwrap();
        let mut ckpt = Checkpoint::load(&dir.path().join("run.ckpt")).unwrap();
        ckpt.config = first_half.clone();
        let resumed = train_on(&first_half, &data, Some(ckpt), &mut |_| Ok(())).unwrap();
        let resume_equal = resumed.network == a.network
            && to_csv(&resumed.records, &layout).unwrap() == to_csv(&a.records[2..], &layout).unwrap();

        // save → load → one step equals one step without the round trip
        let saved = Checkpoint::load(&dir.path().join("run.ckpt")).unwrap();
        let mut direct = saved.network.clone();
        let bytes = Checkpoint { network: direct.clone(), ..saved.clone() }.to_bytes().unwrap();
        let mut reloaded = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap().network;
        let (x, labels) = data.train.batch(&[0, 1, 2, 3, 4, 5, 6, 7]);
        let rule = cfg.update_rule();
        train_step(&mut direct, &x, &labels, &rule, cfg.eta, cfg.head_eta()).unwrap();
        train_step(&mut reloaded, &x, &labels, &rule, cfg.eta, cfg.head_eta()).unwrap();
        let bits = |n: &Network| -> Vec<u64> {
            n.weights().iter().flatten().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
        };
        let step_equal = bits(&direct) == bits(&reloaded);

        verdict(
            csv_equal && resume_equal && step_equal,
            format!("metrics.csv identical: {csv_equal}; resume identical: {resume_equal}; one-step round trip identical: {step_equal}"),
        )
    })
}

// ---------------------------------------------------------------- 8

fn deephebb_cifar() -> Verdict {
    if std::env::var("GHL_EXTENDED").as_deref() != Ok("1") {
        return Verdict::Skip("extended run; set GHL_EXTENDED=1 to enable".into());
    }
    let cfg = TrainConfig::named("deephebb_cifar10").unwrap();
    let data = match DataSplits::load(&cfg, &data_dir()) {
        Ok(d) => d,
        Err(e) => return Verdict::Skip(format!("CIFAR-10 unavailable: {e}")),
    };
    let out = train_on(&cfg, &data, None, &mut |r| {
        eprintln!("  epoch {} test acc {:.4}", r.epoch, r.test_acc);
        Ok(())
    })
    .unwrap();
    let acc = out.records.last().unwrap().test_acc;
    verdict(acc >= 0.80, format!("test accuracy {acc:.4}"))
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "gradient oracle", limit: Some(Duration::from_secs(60)), run: gradient_oracle },
        Criterion { id: 2, name: "GHL algebraic identities", limit: Some(Duration::from_secs(60)), run: ghl_identities },
        Criterion { id: 3, name: "Oja behavior", limit: Some(Duration::from_secs(30)), run: oja_behavior },
        Criterion { id: 4, name: "conv/dense Hebbian equivalence", limit: Some(Duration::from_secs(10)), run: conv_dense_equivalence },
        Criterion { id: 5, name: "ablation ordering", limit: Some(Duration::from_secs(600)), run: ablation_ordering },
        Criterion { id: 6, name: "MNIST smoke", limit: Some(Duration::from_secs(900)), run: mnist_smoke },
        Criterion { id: 7, name: "determinism", limit: None, run: determinism },
        Criterion { id: 8, name: "DeepHebb replica on CIFAR-10", limit: None, run: deephebb_cifar },
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| selected.is_empty() || selected.contains(&c.id)) {
        let start = Instant::now();
        let v = (c.run)();
        let took = start.elapsed();
        let over = c.limit.is_some_and(|l| took > l);
        let (status, detail) = match v {
            Verdict::Pass(d) if over => ("FAIL", format!("{d}; exceeded {:?}", c.limit.unwrap())),
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => ("FAIL", d),
            Verdict::Skip(d) => ("SKIP", d),
        };
        failed += (status == "FAIL") as usize;
        println!("criterion {} [{}]: {status} ({detail}; {:.1}s)", c.id, c.name, took.as_secs_f64());
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
