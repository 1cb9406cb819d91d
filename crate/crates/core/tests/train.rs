use proptest::prelude::*;

use tt_core::attention::AttentionMask;
use tt_core::frontend::FrontendConfig;
use tt_core::model::{ModelConfig, TransducerModel};
use tt_core::tasks::{gen_synthetic, SyntheticTaskConfig, Utterance};
use tt_core::tensor::{Rng, Tensor};
use tt_core::train::{
    apply_weight_noise, clip_global_norm, global_norm, load_checkpoint, lr_at, read_checkpoint_from, save_checkpoint,
    write_checkpoint_to, Adam, AdamConfig, ScheduleConfig, TrainConfig, Trainer,
};
use tt_core::Error;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

#[test]
fn schedule_matches_reference_points() {
    let s = ScheduleConfig::large();
    assert_eq!(lr_at(0, &s), 0.0);
    assert!(rel(lr_at(4_000, &s), 2.5e-4) < 1e-12);
    assert!(rel(lr_at(30_000, &s), 2.5e-4) < 1e-12);
    assert!(rel(lr_at(200_000, &s), 2.5e-6) < 1e-12);
    assert!(rel(lr_at(115_000, &s), 2.5e-4 * 0.01f64.sqrt()) < 1e-12);
    assert!(rel(lr_at(2_000, &s), 1.25e-4) < 1e-12);
    assert_eq!(lr_at(10_000_000, &s), 2.5e-6);
}

#[test]
fn schedule_is_continuous_at_boundaries() {
    let s = ScheduleConfig::large();
    for b in [s.warmup_steps, s.hold_until, s.decay_until] {
        for step in b - 2..b + 2 {
            assert!((lr_at(step + 1, &s) - lr_at(step, &s)).abs() < s.peak_lr * 1e-3, "step {step}");
        }
    }
}

#[test]
fn schedule_validation_names_keys() {
    let good = ScheduleConfig::large();
    let cases = [
        ("warmup_steps", ScheduleConfig { warmup_steps: 0, ..good }),
        ("warmup_steps", ScheduleConfig { warmup_steps: 40_000, ..good }),
        ("hold_until", ScheduleConfig { decay_until: 30_000, ..good }),
        ("peak_lr", ScheduleConfig { peak_lr: 0.0, ..good }),
        ("final_lr", ScheduleConfig { final_lr: 1.0, ..good }),
    ];
    for (key, s) in cases {
        let err = s.validate("schedule").unwrap_err().to_string();
        assert!(err.contains(&format!("schedule.{key}")), "{err}");
    }
}

#[test]
fn weight_noise_identity_cases() {
    let params = vec![Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()];
    let mut rng = Rng::new(0);
    assert_eq!(apply_weight_noise(&params, 0.01, 9_999, 10_000, &mut rng), params);
    assert_eq!(apply_weight_noise(&params, 0.0, 50_000, 10_000, &mut rng), params);
    let noisy = apply_weight_noise(&params, 0.01, 10_000, 10_000, &mut rng);
    assert_ne!(noisy, params);
    assert_eq!(noisy[0].shape(), params[0].shape());
}

#[test]
fn weight_noise_mean_is_within_clt_bound() {
    let n = 100_000;
    let sigma = 0.01;
    let params = vec![Tensor::zeros([n])];
    let noisy = apply_weight_noise(&params, sigma, 1, 0, &mut Rng::new(42));
    let mean = noisy[0].data().iter().sum::<f64>() / n as f64;
    assert!(mean.abs() < 3.0 * sigma / (n as f64).sqrt(), "{mean}");
    let var = noisy[0].data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!(rel(var.sqrt(), sigma) < 0.02);
}

proptest! {
    #[test]
    fn clipping_shrinks_and_keeps_direction(
        xs in prop::collection::vec(-10.0f64..10.0, 1..20),
        max in 0.01f64..20.0,
    ) {
        let split = xs.len() / 2;
        let orig = vec![Tensor::vector(xs[..split].to_vec()), Tensor::vector(xs[split..].to_vec())];
        let mut g = orig.clone();
        let before = clip_global_norm(&mut g, max);
        let after = global_norm(&g);
        prop_assert!((before - global_norm(&orig)).abs() < 1e-12);
        prop_assert!(after <= before + 1e-12);
        prop_assert!(after <= max * (1.0 + 1e-12));
        if before > 0.0 {
            let cos: f64 = orig.iter().zip(&g).flat_map(|(a, b)| a.data().iter().zip(b.data())).map(|(a, b)| a * b).sum::<f64>()
                / (before * after.max(f64::MIN_POSITIVE));
            prop_assert!((cos - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn adam_solves_quadratic() {
    // Minimize (w - 3)^2 + 2(v + 1)^2; optimum (3, -1).
    let mut params = vec![Tensor::vector(vec![0.0, 0.0])];
    let mut adam = Adam::new(AdamConfig::default(), &params);
    let s = ScheduleConfig {
        peak_lr: 0.1,
        warmup_steps: 1,
        hold_until: 300,
        decay_until: 1_500,
        final_lr: 1e-6,
    };
    for step in 0..2_000 {
        let p = params[0].data();
        let g = vec![Tensor::vector(vec![2.0 * (p[0] - 3.0), 4.0 * (p[1] + 1.0)])];
        adam.update(&mut params, &g, lr_at(step, &s)).unwrap();
    }
    let p = params[0].data();
    assert!((p[0] - 3.0).abs() < 1e-6 && (p[1] + 1.0).abs() < 1e-6, "{p:?}");
}

#[test]
fn adam_rejects_mismatched_state() {
    let mut params = vec![Tensor::zeros([2])];
    let mut adam = Adam::new(AdamConfig::default(), &params);
    assert!(adam.update(&mut params, &[Tensor::zeros([3])], 0.1).is_err());
    assert!(adam.update(&mut params, &[], 0.1).is_err());
}

fn small_setup(mask: AttentionMask, seed: u64) -> (Trainer, Vec<Utterance>) {
    let task = SyntheticTaskConfig::toy(16, seed);
    let data = gen_synthetic(&task).unwrap();
    let model = TransducerModel::new(ModelConfig::toy(task.feature_dim, task.symbols, mask, 2), seed).unwrap();
    let mut cfg = TrainConfig::new(4, 6, seed);
    cfg.weight_noise_sigma = 0.01;
    cfg.weight_noise_start = 2;
    let frontend = FrontendConfig {
        freq_mask_width: 2,
        freq_mask_count: 1,
        time_mask_width: 2,
        time_mask_count: 1,
        augment: true,
        ..FrontendConfig::default()
    };
    let schedule = ScheduleConfig {
        peak_lr: 3e-3,
        warmup_steps: 1,
        hold_until: 100,
        decay_until: 200,
        final_lr: 1e-4,
    };
    (Trainer::new(model, frontend, schedule, cfg).unwrap(), data.utterances)
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (mut trainer, data) = small_setup(AttentionMask::new(2, 0), 1);
    let before = trainer.model.store.clone();
    let batch: Vec<&Utterance> = data.iter().take(4).collect();
    let report = trainer.train_step(&batch).unwrap();
    assert_eq!(report.lr, 0.0);
    assert!(report.loss > 0.0 && report.grad_norm > 0.0);
    assert_eq!(trainer.model.store, before);
    trainer.train_step(&batch).unwrap();
    assert_ne!(trainer.model.store, before);
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let (mut trainer, data) = small_setup(AttentionMask::FULL, 2);
        let mut losses = Vec::new();
        trainer
            .fit(&data, |_, r| {
                losses.push(r.loss);
                Ok(())
            })
            .unwrap();
        let mut bytes = Vec::new();
        write_checkpoint_to(&trainer.model, &trainer.frontend, &mut bytes).unwrap();
        (losses, bytes)
    };
    let (l1, b1) = run();
    let (l2, b2) = run();
    assert_eq!(l1.len(), 6);
    assert_eq!(l1, l2);
    assert_eq!(b1, b2);
}

#[test]
fn loss_falls_on_a_fixed_batch() {
    let mut improved = 0;
    for seed in 0..5 {
        let (mut trainer, data) = small_setup(AttentionMask::new(3, 1), seed);
        trainer.frontend.augment = false;
        trainer.config.weight_noise_sigma = 0.0;
        let batch: Vec<&Utterance> = data.iter().take(4).collect();
        let first = trainer.train_step(&batch).unwrap().loss;
        let mut last = first;
        for _ in 0..30 {
            last = trainer.train_step(&batch).unwrap().loss;
        }
        if last < first {
            improved += 1;
        }
    }
    assert!(improved >= 4, "{improved}");
}

#[test]
fn divergence_reports_step_and_ids() {
    let (mut trainer, data) = small_setup(AttentionMask::FULL, 3);
    let id = trainer.model.joint.output;
    trainer.model.store.get_mut(id).data_mut()[0] = 1e308;
    let batch: Vec<&Utterance> = data.iter().take(2).collect();
    match trainer.train_step(&batch) {
        Err(Error::Diverged { step, ids }) => {
            assert_eq!(step, 0);
            assert_eq!(ids, vec![data[0].id.clone(), data[1].id.clone()]);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let (trainer, _) = small_setup(AttentionMask::new(10, 2), 4);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ttck"), dir.path().join("b.ttck"));
    save_checkpoint(&trainer.model, &trainer.frontend, &a).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    assert_eq!(loaded.model.config, trainer.model.config);
    assert_eq!(loaded.model.store, trainer.model.store);
    assert_eq!(loaded.frontend, trainer.frontend);
    save_checkpoint(&loaded.model, &loaded.frontend, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn checkpoint_header_layout() {
    let (trainer, _) = small_setup(AttentionMask::FULL, 5);
    let mut bytes = Vec::new();
    write_checkpoint_to(&trainer.model, &trainer.frontend, &mut bytes).unwrap();
    assert_eq!(&bytes[..4], b"TTCK");
    assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let doc = std::str::from_utf8(&bytes[16..16 + n]).unwrap();
    assert!(doc.contains("vocab_size = 7"));
    let count = u64::from_le_bytes(bytes[16 + n..24 + n].try_into().unwrap());
    assert_eq!(count as usize, trainer.model.store.len());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let (trainer, _) = small_setup(AttentionMask::FULL, 6);
    let mut good = Vec::new();
    write_checkpoint_to(&trainer.model, &trainer.frontend, &mut good).unwrap();
    let mut bad = good.clone();
    bad[1] = b'X';
    assert!(matches!(read_checkpoint_from(bad.as_slice()), Err(Error::Format(m)) if m.contains("magic")));
    let mut bad = good.clone();
    bad[4] = 2;
    assert!(matches!(read_checkpoint_from(bad.as_slice()), Err(Error::Format(m)) if m.contains("version")));
    assert!(matches!(read_checkpoint_from(&good[..good.len() - 3]), Err(Error::Format(m)) if m.contains("truncated")));
    assert!(matches!(read_checkpoint_from(&good[..20]), Err(Error::Format(m)) if m.contains("truncated")));
}

#[test]
fn mismatched_joint_width_is_a_shape_error() {
    let (trainer, _) = small_setup(AttentionMask::FULL, 7);
    let mut model = trainer.model.clone();
    model.config.joint.joint_dim = 48;
    let mut bytes = Vec::new();
    write_checkpoint_to(&model, &trainer.frontend, &mut bytes).unwrap();
    assert!(matches!(read_checkpoint_from(bytes.as_slice()), Err(Error::Shape { .. })));
}

#[test]
fn train_config_validation() {
    let good = TrainConfig::new(4, 10, 0);
    assert!(good.validate("train").is_ok());
    let err = TrainConfig { batch_size: 0, ..good }.validate("train").unwrap_err();
    assert!(err.to_string().contains("train.batch_size"));
    let err = TrainConfig { weight_noise_sigma: -0.1, ..good }.validate("train").unwrap_err();
    assert!(err.to_string().contains("train.weight_noise_sigma"));
    let toml_doc = "batch_size = 8\nsteps = 100\nseed = 3\n";
    let parsed: TrainConfig = toml::from_str(toml_doc).unwrap();
    assert_eq!(parsed.clip_norm, 5.0);
    assert!(toml::from_str::<TrainConfig>("batch_size = 8\nsteps = 1\nseed = 0\nlearning_rate = 1.0\n").is_err());
}
