mod common;

use kinemetric::dataset::Dataset;
use kinemetric::geomcam::RootMode;
use kinemetric::learn::*;
use kinemetric::synth::{generate, SynthSpec};
use kinemetric::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_data() -> Dataset {
    let spec = SynthSpec {
        duration_s: 0.2,
        amplitude_deg: 40.0,
        frequency_hz: 1.0,
        root_amplitude_mm: 0.0,
        seed: 2,
        ..SynthSpec::default()
    };
    generate(&common::arm(), &spec).unwrap().dataset
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        side: 8,
        side_mm: 1500.0,
        hidden: 16,
        epochs: 3,
        anneal_epoch: 2,
        batch_size: 4,
        root_mode: RootMode::Global,
        seed: 7,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic_in_the_seed() {
    let data = tiny_data();
    let a = train_split(&data, &tiny_config(), None).unwrap();
    let b = train_split(&data, &tiny_config(), None).unwrap();
    assert_eq!(a.network.params, b.network.params);
    assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
    let c = train_split(&data, &TrainConfig { seed: 8, ..tiny_config() }, None).unwrap();
    assert_ne!(a.network.params, c.network.params);
}

#[test]
fn frozen_encoder_keeps_its_parameters() {
    let data = tiny_data();
    let cfg = tiny_config();
    let init = Network::init(architecture_for(&data, &cfg), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let enc = init.encoder_len();
    let out = train_split(&data, &TrainConfig { freeze_encoder: true, ..cfg }, Some(init.clone())).unwrap();
    assert_eq!(out.network.params[..enc], init.params[..enc]);
    assert_ne!(out.network.params[enc..], init.params[enc..]);
}

#[test]
fn zero_learning_rate_changes_no_parameter() {
    let data = tiny_data();
    let cfg = TrainConfig { lr: 0.0, ..tiny_config() };
    let init = Network::init(architecture_for(&data, &cfg), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let out = train_split(&data, &cfg, Some(init.clone())).unwrap();
    assert_eq!(out.network.params, init.params);
}

#[test]
fn divergence_returns_the_last_good_checkpoint() {
    let data = tiny_data();
    let cfg = TrainConfig {
        lr: 1e200,
        representation: Representation::Euler,
        supervision: Supervision::Direct,
        batch_norm: false,
        ..tiny_config()
    };
    match train_split(&data, &cfg, None) {
        Err(Error::Diverged { epoch, last_good }) => {
            assert!(last_good.epoch < epoch);
            let net = last_good.network().unwrap();
            assert!(net.params.iter().all(|v| v.is_finite()));
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.metrics.len())),
    }
}

#[test]
fn checkpoint_reloads_to_identical_predictions() {
    let data = tiny_data();
    let cfg = tiny_config();
    let out = train_split(&data, &cfg, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    out.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, out.checkpoint);
    let net = back.network().unwrap();
    assert_eq!(predict(&net, &data, &cfg).unwrap(), predict(&out.network, &data, &cfg).unwrap());
}

#[test]
fn metrics_csv_round_trips() {
    let data = tiny_data();
    let out = train_split(&data, &tiny_config(), None).unwrap();
    let csv = metrics_csv(&out.metrics);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,loss,mpjae_train,mpjae_val,lr"));
    for (line, m) in lines.zip(&out.metrics) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[0].parse::<usize>().unwrap(), m.epoch);
        assert_eq!(f[1].parse::<f64>().unwrap(), m.loss);
        assert_eq!(f[2].parse::<f64>().unwrap(), m.mpjae_train);
        assert_eq!(f[3].parse::<f64>().unwrap(), m.mpjae_val);
        assert_eq!(f[4].parse::<f64>().unwrap(), m.lr);
    }
    assert_eq!(out.metrics.len(), 3);
    assert_eq!(out.metrics[2].lr, 1e-3 * 0.1);
}

#[test]
fn invalid_configs_are_rejected() {
    let data = tiny_data();
    for cfg in [
        TrainConfig { side: 12, ..tiny_config() },
        TrainConfig { anneal_epoch: 3, ..tiny_config() },
        TrainConfig { val_fraction: 1.0, ..tiny_config() },
        TrainConfig { batch_size: 0, ..tiny_config() },
    ] {
        assert!(matches!(train_split(&data, &cfg, None), Err(Error::InvalidArgument(_))));
    }
}
