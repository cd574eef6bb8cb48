use ghl::arch::ArchSpec;
use ghl::autodiff::Network;
use ghl::datasets::{synthetic_blobs, synthetic_blobs_split, DatasetSpec, LabeledDataset};
use ghl::layers::{LayerSpec, NetworkSpec};
use ghl::plasticity::{unit_norms, RuleKind, UpdateRule};
use ghl::rng::SeededRng;
use ghl::trainer::{compute_step, init_network, train_on, train_step, DataSplits, TrainConfig};

fn blobs(n_train: usize, spread: f64) -> DataSplits {
    let (train, test) = synthetic_blobs_split(7, n_train, 300, 16, 3, spread).unwrap();
    DataSplits::new(train, test.unwrap(), None).unwrap()
}

fn blobs_spec(spread: f64) -> DatasetSpec {
    DatasetSpec::Blobs {
        seed: 7,
        n_train: 300,
        n_test: 300,
        dim: 16,
        classes: 3,
        spread,
    }
}

#[test]
fn rules_share_forward_loss_and_gradients() {
    let data = synthetic_blobs(3, 8, 16, 3, 0.3).unwrap();
    let spec = ArchSpec::Named("mlp:16-12-8-3:triangle".into()).resolve(&[16], 3).unwrap();
    let net = init_network(&spec, 9).unwrap();
    let idx: Vec<usize> = (0..8).collect();
    let (x, labels) = data.batch(&idx);
    let reports: Vec<_> = [RuleKind::Ghl, RuleKind::HebbSwta, RuleKind::SignOnly, RuleKind::BackpropSgd]
        .into_iter()
        .map(|k| compute_step(&net, &x, &labels, &UpdateRule::new(k), 1.0).unwrap())
        .collect();
    for r in &reports[1..] {
        assert_eq!(r.fingerprint, reports[0].fingerprint);
        assert_eq!(r.loss.to_bits(), reports[0].loss.to_bits());
        for (a, b) in r.layers.iter().zip(&reports[0].layers) {
            assert_eq!(a.grad, b.grad);
        }
    }
    // ... while the updates of plastic layers differ
    assert_ne!(reports[0].layers[0].update.delta, reports[3].layers[0].update.delta);
    // the classifier is trained by gradient descent under every rule
    for r in &reports[1..] {
        let last = r.layers.last().unwrap();
        assert!(!last.plastic);
        assert_eq!(last.update.delta, reports[0].layers.last().unwrap().update.delta);
    }
}

#[test]
fn ghl_unit_norms_stay_bounded() {
    let data = synthetic_blobs(5, 400, 16, 3, 0.3).unwrap();
    let spec = ArchSpec::Named("mlp:16-32-3".into()).resolve(&[16], 3).unwrap();
    let mut net = init_network(&spec, 1).unwrap();
    let initial = unit_norms(net.weight(0).unwrap());
    let rule = UpdateRule::new(RuleKind::Ghl);
    let mut rng = SeededRng::new(2);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    while step < 2000 {
        rng.shuffle(&mut order);
        for idx in order.chunks(16) {
            let (x, labels) = data.batch(idx);
            train_step(&mut net, &x, &labels, &rule, 0.01, 0.1).unwrap();
            for (now, start) in unit_norms(net.weight(0).unwrap()).iter().zip(&initial) {
                assert!(*now < 10.0 * start, "step {step}: norm {now} from {start}");
            }
            step += 1;
        }
    }
}

#[test]
fn swta_units_specialize_on_distinct_clusters() {
    let d = 8;
    let data = synthetic_blobs(4, 400, d, 2, 0.1).unwrap();
    let means = class_means(&data);
    let spec = NetworkSpec {
        input_shape: vec![d],
        layers: vec![LayerSpec::dense(d, 2, true)],
    };
    let mut net = init_network(&spec, 6).unwrap();
    let rule = UpdateRule::new(RuleKind::HebbSwta).with_tau(0.1);
    let mut rng = SeededRng::new(8);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..30 {
        rng.shuffle(&mut order);
        for idx in order.chunks(10) {
            let (x, labels) = data.batch(idx);
            train_step(&mut net, &x, &labels, &rule, 0.1, 0.1).unwrap();
        }
    }
    let closest: Vec<usize> = unit_vectors(&net)
        .iter()
        .map(|w| {
            let dist: Vec<f64> = means.iter().map(|m| m.iter().zip(w).map(|(a, b)| (a - b).powi(2)).sum()).collect();
            usize::from(dist[1] < dist[0])
        })
        .collect();
    assert_ne!(closest[0], closest[1], "both units settled on cluster {}", closest[0]);
}

fn class_means(ds: &LabeledDataset) -> Vec<Vec<f64>> {
    let d = ds.sample_shape()[0];
    let mut sums = vec![vec![0.0; d]; ds.classes];
    let mut counts = vec![0.0; ds.classes];
    for (n, &y) in ds.labels.iter().enumerate() {
        for (s, v) in sums[y].iter_mut().zip(ds.images.row(n)) {
            *s += v;
        }
        counts[y] += 1.0;
    }
    sums.into_iter().zip(counts).map(|(s, c)| s.into_iter().map(|v| v / c).collect()).collect()
}

/// Columns of a dense `fan_in × units` weight matrix.
fn unit_vectors(net: &Network) -> Vec<Vec<f64>> {
    let w = net.weight(0).unwrap();
    let units = w.shape()[1];
    (0..units).map(|k| w.data().iter().skip(k).step_by(units).copied().collect()).collect()
}

fn final_train_acc(rule: RuleKind, data: &DataSplits) -> f64 {
    let mut cfg = TrainConfig::named("blobs_ghl").unwrap();
    cfg.rule = rule;
    cfg.eta = ghl::trainer::default_eta(rule);
    cfg.val_fraction = None;
    let out = train_on(&cfg, data, None, &mut |_| Ok(())).unwrap();
    assert_eq!(out.records.len(), 30);
    out.records.last().unwrap().train_acc
}

#[test]
fn sgd_baseline_then_ghl_reach_95_percent_on_blobs() {
    let data = blobs(300, 0.3);
    let sgd = final_train_acc(RuleKind::BackpropSgd, &data);
    assert!(sgd >= 0.95, "gradient-descent baseline {sgd}");
    let ghl = final_train_acc(RuleKind::Ghl, &data);
    assert!(ghl >= 0.95, "GHL {ghl}");
}

#[test]
fn linear_classifier_separates_tight_blobs() {
    let data = blobs(300, 0.1);
    let mut cfg = TrainConfig::new(RuleKind::BackpropSgd, ArchSpec::Named("mlp:16-3".into()), blobs_spec(0.1));
    cfg.eta = 0.1;
    cfg.epochs = 20;
    cfg.batch_size = 16;
    let out = train_on(&cfg, &data, None, &mut |_| Ok(())).unwrap();
    let acc = out.records.last().unwrap().test_acc;
    assert!(acc >= 0.95, "test accuracy {acc}");
}

#[test]
fn same_seed_gives_identical_records() {
    let data = blobs(120, 0.3);
    let mut cfg = TrainConfig::named("blobs_ghl").unwrap();
    cfg.epochs = 3;
    cfg.val_fraction = None;
    let run = |cfg: &TrainConfig| {
        let mut out = train_on(cfg, &data, None, &mut |_| Ok(())).unwrap();
        out.records.iter_mut().for_each(|r| r.wall_seconds = 0.0);
        (out.records, out.network)
    };
    let first = run(&cfg);
    assert_eq!(first, run(&cfg));
    cfg.seed += 1;
    assert_ne!(first.0, run(&cfg).0);
}
