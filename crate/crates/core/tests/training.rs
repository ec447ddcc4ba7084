use rand::Rng;
use rowleak_core::bitprofile::LeakProfile;
use rowleak_core::hammerleak::LeakLedger;
use rowleak_core::seeds;
use rowleak_core::subtrain::{
    accuracy, evaluate, fidelity, pgd_attack, train_plain, train_substitute, Dataset, PgdConfig,
    RangeTensors, SyntheticTask, TinyNet, TrainConfig,
};
use rowleak_core::victim_runtime::{QuantizedLayer, QuantizedModel, WeightBit};

fn quantize(net: &TinyNet, seed: u64) -> QuantizedModel {
    QuantizedModel {
        layers: net
            .layers
            .iter()
            .map(|l| QuantizedLayer::quantize(l.inputs, l.outputs, &l.weights).unwrap())
            .collect(),
        biases: net.layers.iter().map(|l| l.bias.clone()).collect(),
        seed,
    }
}

fn scales(m: &QuantizedModel) -> Vec<f64> {
    m.layers.iter().map(|l| l.scale).collect()
}

fn dims_of(m: &QuantizedModel) -> Vec<(usize, usize)> {
    m.layers.iter().map(|l| (l.rows, l.cols)).collect()
}

fn two_class_task(seed: u64) -> SyntheticTask {
    SyntheticTask {
        dim: 16,
        classes: 2,
        clusters_per_class: 3,
        center_spread: 0.2,
        noise: 0.2,
        seed,
    }
}

fn victim_for(task: &SyntheticTask, dims: &[usize]) -> (QuantizedModel, Dataset, Dataset) {
    let train = task.sample(2000, "train").unwrap();
    let test = task.sample(1000, "test").unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        finetune_epochs: 0,
        lr: 0.05,
        seed: task.seed,
        ..TrainConfig::default()
    };
    let net = train_plain(dims, &train, &cfg).unwrap();
    (quantize(&net, task.seed), train, test)
}

#[test]
fn identical_nets_have_full_fidelity() {
    let task = two_class_task(1);
    let (victim, _, test) = victim_for(&task, &[16, 12, 2]);
    let v = TinyNet::from_quantized(&victim);
    let m = evaluate(&v, &v, &test, &PgdConfig::default()).unwrap();
    assert_eq!(m.fidelity, 100.0);
    assert!(m.accuracy_under_attack <= m.accuracy);
}

#[test]
fn random_nets_agree_about_one_in_c() {
    let mut rng = seeds::rng(5);
    let data = Dataset {
        dim: 6,
        classes: 4,
        x: (0..400 * 6).map(|_| rng.random_range(0.0..1.0)).collect(),
        y: vec![0; 400],
    };
    let mut total = 0.0;
    let pairs = 300;
    for i in 0..pairs {
        let a = TinyNet::init_uniform(&[6, 8, 4], &mut seeds::rng(2 * i));
        let b = TinyNet::init_uniform(&[6, 8, 4], &mut seeds::rng(2 * i + 1));
        total += fidelity(&a, &b, &data);
    }
    let mean = total / pairs as f64;
    assert!((mean - 25.0).abs() < 4.0, "{mean}");
}

#[test]
fn full_leak_reproduces_victim_weights_exactly() {
    let task = two_class_task(2);
    let dims = [16, 12, 2];
    let (victim, train, test) = victim_for(&task, &dims);
    let full = LeakLedger::fully_known(&victim);
    let ranges = RangeTensors::from_profile(&LeakProfile::from_ledger(&full, &scales(&victim)));
    let subset = train.subset(0.08, 1);
    let cfg = TrainConfig {
        epochs: 10,
        finetune_epochs: 4,
        seed: 3,
        ..TrainConfig::default()
    };
    let v = TinyNet::from_quantized(&victim);

    // biases trained
    let sub = train_substitute(&dims, &ranges, &subset, &cfg, None).unwrap();
    for (a, b) in sub.layers.iter().zip(&v.layers) {
        assert!(a.weights.iter().zip(&b.weights).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    // biases copied too
    let sub = train_substitute(&dims, &ranges, &subset, &cfg, Some(&victim.biases)).unwrap();
    assert_eq!(sub, v);
    assert_eq!(fidelity(&v, &sub, &test), 100.0);
}

#[test]
fn zero_leak_equals_architecture_only_training() {
    let task = two_class_task(3);
    let dims = [16, 12, 2];
    let (victim, train, _) = victim_for(&task, &dims);
    let empty = LeakLedger::new(&dims_of(&victim));
    let from_ledger = RangeTensors::from_profile(&LeakProfile::from_ledger(&empty, &scales(&victim)));
    let subset = train.subset(0.08, 1);
    let cfg = TrainConfig {
        epochs: 12,
        finetune_epochs: 4,
        seed: 8,
        ..TrainConfig::default()
    };
    let a = train_substitute(&dims, &from_ledger, &subset, &cfg, None).unwrap();
    let b = train_substitute(&dims, &RangeTensors::unknown(&dims), &subset, &cfg, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn leaked_msbs_beat_the_baseline_on_two_classes() {
    let dims = [16, 24, 2];
    let (mut leaked_total, mut base_total) = (0.0, 0.0);
    for seed in 1..=5u64 {
        let task = two_class_task(100 + seed);
        let (victim, train, test) = victim_for(&task, &dims);
        let mut ledger = LeakLedger::new(&dims_of(&victim));
        let mut rng = seeds::rng(seed);
        for (l, layer) in victim.layers.iter().enumerate() {
            for r in 0..layer.rows {
                for c in 0..layer.cols {
                    if rng.random_bool(0.9) {
                        let bit = WeightBit { layer: l, row: r, col: c, bit: 7 };
                        ledger.record(bit, layer.code(r, c) < 0, 1).unwrap();
                    }
                }
            }
        }
        let ranges = RangeTensors::from_profile(&LeakProfile::from_ledger(&ledger, &scales(&victim)));
        let subset = train.subset(0.08, seed);
        let cfg = TrainConfig { seed, ..TrainConfig::default() };
        let leaked = train_substitute(&dims, &ranges, &subset, &cfg, None).unwrap();
        let base = train_substitute(&dims, &RangeTensors::unknown(&dims), &subset, &cfg, None).unwrap();
        leaked_total += accuracy(&leaked, &test);
        base_total += accuracy(&base, &test);
    }
    assert!(leaked_total > base_total, "leaked {} baseline {}", leaked_total / 5.0, base_total / 5.0);
}

#[test]
fn pgd_stays_in_the_ball_and_the_unit_box() {
    let net = TinyNet::init_uniform(&[5, 7, 3], &mut seeds::rng(4));
    let mut rng = seeds::rng(9);
    let n = 1000;
    let x: Vec<f64> = (0..n * 5)
        .map(|i| match i % 7 {
            0 => 0.0,
            1 => 1.0,
            2 => 0.01,
            _ => rng.random_range(0.0..1.0),
        })
        .collect();
    let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
    for eps in [0.031, 0.1, 0.5] {
        let cfg = PgdConfig::with_epsilon(eps, 7);
        let adv = pgd_attack(&net, &x, &y, &cfg).unwrap();
        for (a, o) in adv.iter().zip(&x) {
            assert!((a - o).abs() <= eps, "{a} vs {o}");
            assert!((0.0..=1.0).contains(a));
        }
    }
}

#[test]
fn pgd_lowers_accuracy_of_the_attacked_net() {
    let task = two_class_task(4);
    let (victim, _, test) = victim_for(&task, &[16, 12, 2]);
    let v = TinyNet::from_quantized(&victim);
    let adv = pgd_attack(&v, &test.x, &test.y, &PgdConfig::with_epsilon(0.1, 7)).unwrap();
    let adv_set = Dataset { x: adv, ..test.clone() };
    assert!(accuracy(&v, &adv_set) < accuracy(&v, &test));
}
