use proptest::prelude::*;

use r2mf::checkpoint::Checkpoint;
use r2mf::data::synth::generate_sample;
use r2mf::data::{Quality, SegmentationSample, View};
use r2mf::model::{Model, ModelConfig};
use r2mf::optim::{PlateauConfig, PlateauController};
use r2mf::trainer::{train, Control, TrainConfig};

fn tiny() -> ModelConfig {
    ModelConfig { levels: 2, channels: vec![4, 8], recurrence: vec![2, 1], input_size: 32, ..ModelConfig::desk() }
}

fn samples() -> Vec<SegmentationSample> {
    View::ALL.iter().map(|&v| generate_sample(21, v, 32, Quality::High).unwrap()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn plateau_schedule_invariants(losses in prop::collection::vec(0.0f64..2.0, 1..80), lr0 in 1e-6f64..1e-2) {
        let cfg = PlateauConfig::default();
        let mut c = PlateauController::new(cfg, lr0);
        let mut prev = c.lr();
        let mut best = f64::INFINITY;
        for (k, &l) in losses.iter().enumerate() {
            let d = c.observe(l);
            prop_assert!(d.lr <= prev && d.lr >= cfg.floor);
            prop_assert_eq!(d.improved, l < best - cfg.min_delta);
            if d.improved {
                best = l;
            }
            if d.stop {
                prop_assert!(k + 1 > cfg.early_stop_patience);
                break;
            }
            prev = d.lr;
        }
    }
}

#[test]
fn flat_validation_loss_stops_exactly_after_patience() {
    let mut c = PlateauController::new(PlateauConfig::default(), 1e-4);
    let stop = (1..=100).find(|_| c.observe(0.5).stop);
    assert_eq!(stop, Some(16));
}

#[test]
fn retained_model_is_the_best_validation_epoch() {
    let s = samples();
    let cfg = TrainConfig { max_epochs: 5, seed: 3, lr0: 1e-3, ..TrainConfig::default() };
    let out = train(Model::<f32>::build(&tiny()).unwrap(), &s, &s, &cfg, |_, _| Control::Continue).unwrap();
    let mut best = (0, f64::INFINITY);
    for r in &out.history {
        if r.val_loss < best.1 - cfg.plateau.min_delta {
            best = (r.epoch, r.val_loss);
        }
    }
    assert_eq!(out.best_epoch, best.0);
    let reloaded = Checkpoint::from_bytes(&out.best_checkpoint().to_bytes()).unwrap().to_model::<f32>().unwrap();
    let val = r2mf::trainer::validation_loss(&reloaded, &s, cfg.weights).unwrap();
    assert_eq!(val.to_bits(), best.1.to_bits());
    assert!(out.history.windows(2).all(|w| w[1].lr <= w[0].lr));
}

#[test]
fn empty_splits_are_rejected() {
    let s = samples();
    let cfg = TrainConfig { max_epochs: 1, ..TrainConfig::default() };
    let m = || Model::<f32>::build(&tiny()).unwrap();
    assert!(train(m(), &[], &s, &cfg, |_, _| Control::Continue).is_err());
    assert!(train(m(), &s, &[], &cfg, |_, _| Control::Continue).is_err());
}

#[test]
fn damaged_checkpoints_are_refused() {
    let model = Model::<f32>::build(&tiny()).unwrap();
    let bytes = Checkpoint::from_model(&model, None, &[]).to_bytes();
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    assert!(Checkpoint::from_bytes(&bad_magic).is_err());
    let mut bad_version = bytes.clone();
    bad_version[4] = 99;
    assert!(Checkpoint::from_bytes(&bad_version).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());

    let mut wrong_dims = Checkpoint::from_bytes(&bytes).unwrap();
    wrong_dims.config.channels = vec![4, 16];
    assert!(wrong_dims.to_model::<f32>().is_err());
}
