mod common;

use std::fs;

use common::symmetry::{small_arch, small_phantom};
use reglat::regnet::load_checkpoint;
use reglat::trainer::*;
use reglat::volgrid::Split;
use reglat::Error;

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 2,
        epochs,
        augment: AugmentConfig::none(),
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn run_directory_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_phantom(&dir.path().join("data"), 1);
    let run = dir.path().join("run");
    let c = TrainConfig {
        eval_every: 1,
        ..cfg(2)
    };
    let out = train(&m, &c, &small_arch(false), &run).unwrap();
    for f in [
        CONFIG_FILE,
        ARCH_FILE,
        LOSS_FILE,
        EVAL_FILE,
        "checkpoint_0001.bin",
        "checkpoint_0002.bin",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(latest_checkpoint(&run).unwrap(), run.join("checkpoint_0002.bin"));
    assert_eq!(out.checkpoint, run.join("checkpoint_0002.bin"));
    // four training subjects, batches of two: two steps per epoch
    let csv = fs::read_to_string(run.join(LOSS_FILE)).unwrap();
    assert_eq!(csv.lines().next().unwrap(), reglat::losses::LOSS_CSV_HEADER);
    assert_eq!(csv.lines().count(), 1 + 4);
    assert_eq!(out.step_losses.len(), 4);
    let ck = load_checkpoint(&out.checkpoint, Some(&small_arch(false))).unwrap();
    assert_eq!(ck.epoch, 2);
    assert_eq!(ck.net.params(), out.net.params());
    let eval: EvalReport = serde_json::from_slice(&fs::read(run.join(EVAL_FILE)).unwrap()).unwrap();
    assert_eq!(Some(eval), out.eval);
    let cfg_json: serde_json::Value = serde_json::from_slice(&fs::read(run.join(CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!(cfg_json["train"]["lr"], 1e-3);
    assert_eq!(cfg_json["arch"]["base_channels"], 2);
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_phantom(&dir.path().join("data"), 2);
    let a = train(&m, &cfg(1), &small_arch(false), &dir.path().join("a")).unwrap();
    let b = train(&m, &cfg(1), &small_arch(false), &dir.path().join("b")).unwrap();
    assert_eq!(a.net.params(), b.net.params());
    assert_eq!(
        fs::read(dir.path().join("a").join(LOSS_FILE)).unwrap(),
        fs::read(dir.path().join("b").join(LOSS_FILE)).unwrap()
    );
    let c = train(
        &m,
        &TrainConfig { seed: 4, ..cfg(1) },
        &small_arch(false),
        &dir.path().join("c"),
    )
    .unwrap();
    assert_ne!(a.net.params(), c.net.params());
}

#[test]
fn augmented_training_runs() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_phantom(&dir.path().join("data"), 2);
    let c = TrainConfig {
        augment: AugmentConfig::default(),
        ..cfg(1)
    };
    let out = train(&m, &c, &small_arch(true), &dir.path().join("run")).unwrap();
    assert!(out.step_losses.iter().all(|l| l.total.is_finite()));
}

#[test]
fn divergence_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_phantom(&dir.path().join("data"), 2);
    let c = TrainConfig { lr: 1e300, ..cfg(3) };
    match train(&m, &c, &small_arch(false), &dir.path().join("run")) {
        Err(Error::Diverged { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|o| o.step_losses.len())),
    }
}

fn dice_oracle(a: &[u8], b: &[u8], labels: u8) -> f64 {
    let mut sum = 0.0;
    for l in 1..=labels {
        let sa = a.iter().filter(|&&x| x == l).count();
        let sb = b.iter().filter(|&&x| x == l).count();
        let both = a.iter().zip(b).filter(|(x, y)| **x == l && **y == l).count();
        sum += if sa + sb == 0 {
            1.0
        } else {
            2.0 * both as f64 / (sa + sb) as f64
        };
    }
    sum / labels as f64
}

#[test]
fn evaluation_matches_dice_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_phantom(&dir.path().join("data"), 3);
    let out = train(&m, &cfg(0), &small_arch(false), &dir.path().join("run")).unwrap();
    let r = out.eval.unwrap();
    // two validation subjects: both ordered pairs
    assert_eq!(r.pairs.len(), 2);
    for p in &r.pairs {
        let (_, a) = m.load_subject(m.get(&p.moving).unwrap()).unwrap();
        let (_, b) = m.load_subject(m.get(&p.fixed).unwrap()).unwrap();
        assert!((p.dice_before - dice_oracle(a.labels(), b.labels(), 3)).abs() < 1e-12);
        // the untrained model is the identity
        assert_eq!(p.dice_after, p.dice_before);
        assert_eq!(p.fold_fraction, 0.0);
    }
    let (mean, std) = mean_std(&r.pairs.iter().map(|p| p.dice_before).collect::<Vec<_>>());
    assert_eq!((r.mean_before, r.std_before), (mean, std));
    assert!(evaluate(&out.net, &m, Split::Train).unwrap().pairs.len() == 12);
}

#[test]
fn sampled_pairs_are_distinct_training_subjects() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_phantom(&dir.path().join("data"), 4);
    let train_ids: Vec<String> = m.split(Split::Train).iter().map(|e| e.id.clone()).collect();
    let pairs = sample_pairs(&m, 9, 500).unwrap();
    assert_eq!(pairs, sample_pairs(&m, 9, 500).unwrap());
    for (a, b) in pairs {
        assert_ne!(a, b);
        assert!(train_ids.contains(&a) && train_ids.contains(&b));
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_phantom(&dir.path().join("data"), 5);
    for c in [
        TrainConfig { lr: 0.0, ..cfg(1) },
        TrainConfig {
            batch_size: 0,
            ..cfg(1)
        },
        TrainConfig {
            augment: AugmentConfig {
                zoom_range: [1.2, 0.8],
                ..AugmentConfig::none()
            },
            ..cfg(1)
        },
    ] {
        assert!(train(&m, &c, &small_arch(false), &dir.path().join("x")).is_err());
    }
    let mut wrong = small_arch(false);
    wrong.in_shape = [8, 8, 8];
    assert!(train(&m, &cfg(1), &wrong, &dir.path().join("y")).is_err());
}
