use cinemotion::image::{Image, ImageSequence};
use cinemotion::networks::ModelConfig;
use cinemotion::synthetic::{generate_sequence, AnnulusSpec};
use cinemotion::training::{TrainConfig, Trainer, LOG_HEADER};
use cinemotion::Error;

fn cfg32() -> ModelConfig {
    ModelConfig {
        d: 8,
        height: 32,
        width: 32,
        ..ModelConfig::default()
    }
}

fn spec32() -> AnnulusSpec {
    AnnulusSpec {
        cx: 16.0,
        cy: 16.0,
        r_inner: 6.0,
        r_outer: 10.0,
        a: 0.3,
        ..AnnulusSpec::default()
    }
}

fn seq32(t: usize, seed: u64) -> ImageSequence<f32> {
    generate_sequence(&spec32(), 32, 32, t, seed).unwrap().sequence
}

fn plain(seed: u64) -> TrainConfig {
    TrainConfig {
        delta: 0.0,
        lr: 1e-3,
        augment: None,
        seed,
        ..TrainConfig::default()
    }
}

// Total loss is bounded below by −λ·T (perfect correlation, zero KL), so
// progress is measured on the gap to that bound.
#[test]
fn single_sequence_overfits_steadily() {
    let data = vec![generate_sequence(&AnnulusSpec::default(), 64, 64, 8, 1).unwrap().sequence];
    let cfg = plain(1);
    let floor = -cfg.lambda * 8.0;
    let mut tr = Trainer::new(ModelConfig::default(), cfg).unwrap();
    let gaps: Vec<f64> = (0..200).map(|_| tr.step(&data).unwrap().loss - floor).collect();
    assert!(gaps.iter().all(|&g| g > 0.0));
    let mean = |c: &[f64]| c.iter().sum::<f64>() / c.len() as f64;
    let early: Vec<f64> = gaps[..50].chunks(10).map(mean).collect();
    assert!(early.windows(2).all(|w| w[1] < w[0]), "first 50 steps {early:?}");
    let windows: Vec<f64> = gaps.chunks(50).map(mean).collect();
    for w in windows.windows(2) {
        assert!(w[1] <= 0.99 * w[0], "windows {windows:?}");
    }
}

#[test]
fn resume_continues_bit_exactly() {
    let data = vec![seq32(6, 2), seq32(7, 3)];
    let cfg = TrainConfig {
        augment: Some(Default::default()),
        delta: 0.5,
        ..plain(5)
    };
    let mut straight = Trainer::new(cfg32(), cfg.clone()).unwrap();
    for _ in 0..6 {
        straight.step(&data).unwrap();
    }
    let mut first = Trainer::new(cfg32(), cfg.clone()).unwrap();
    for _ in 0..3 {
        first.step(&data).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    first.save(dir.path()).unwrap();
    let mut resumed = Trainer::resume(dir.path(), cfg).unwrap();
    assert_eq!(resumed.step_count(), 3);
    for _ in 0..3 {
        resumed.step(&data).unwrap();
    }
    assert_eq!(resumed.model.params, straight.model.params);
}

#[test]
fn logged_loss_decomposes_into_reconstruction_and_kl() {
    let data = vec![seq32(6, 4)];
    let dir = tempfile::tempdir().unwrap();
    let log_path = dir.path().join("log.csv");
    let cfg = TrainConfig {
        epochs: 3,
        steps_per_epoch: Some(2),
        log_path: Some(log_path.clone()),
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..plain(6)
    };
    let mut tr = Trainer::new(cfg32(), cfg.clone()).unwrap();
    let r = tr.step(&data).unwrap();
    assert!(((r.recon + r.kl) - r.loss).abs() <= 1e-5 * r.loss.abs().max(1.0));
    assert!((r.recon + cfg.lambda * 6.0 * r.lcc_mean).abs() <= 1e-4 * r.recon.abs());

    let mut tr = Trainer::new(cfg32(), cfg).unwrap();
    let log = tr.run(&data).unwrap();
    assert_eq!(log.epochs.len(), 3);
    let text = std::fs::read_to_string(&log_path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(LOG_HEADER));
    for (line, rec) in lines.zip(&log.epochs) {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(v.len(), 7);
        // loss = recon_mean + kl_mean per epoch
        assert!((v[2] - (v[6] + v[4])).abs() <= 1e-5 * v[2].abs().max(1.0), "{line}");
        assert_eq!(v[0] as u64, rec.step);
    }
    assert!(dir.path().join("best/params.bin").exists());
    assert!(dir.path().join("last/params.bin").exists());
}

#[test]
fn variable_sequence_lengths_train() {
    let data: Vec<_> = (8..=20).step_by(4).map(|t| seq32(t, t as u64)).collect();
    let mut tr = Trainer::new(cfg32(), plain(7)).unwrap();
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..12 {
        let r = tr.step(&data).unwrap();
        assert!(r.applied && r.loss.is_finite());
        seen.insert(data[r.sequence].len_t());
    }
    assert!(seen.len() >= 2, "{seen:?}");
}

#[test]
fn repeated_non_finite_steps_abort() {
    let mut frames = seq32(6, 8).frames;
    frames[2] = Image::from_fn(32, 32, |_, _| f32::NAN);
    let data = vec![ImageSequence::new(frames, 1.5).unwrap()];
    let mut tr = Trainer::new(cfg32(), plain(9)).unwrap();
    let before = tr.model.params.clone();
    assert!(!tr.step(&data).unwrap().applied);
    assert!(!tr.step(&data).unwrap().applied);
    let err = tr.step(&data).unwrap_err();
    assert!(matches!(err, Error::Numerical(_)), "{err}");
    assert_eq!(tr.model.params, before);
}

#[test]
fn mismatched_training_extent_is_rejected() {
    let data = vec![generate_sequence(&AnnulusSpec::default(), 64, 64, 5, 0).unwrap().sequence];
    let mut tr = Trainer::new(cfg32(), TrainConfig { epochs: 1, ..plain(0) }).unwrap();
    assert!(tr.run(&data).is_err());
}

#[test]
fn cosine_schedule_endpoints() {
    let cfg = TrainConfig {
        lr_decay: Some((1e-5, 4)),
        ..plain(0)
    };
    let data = vec![seq32(4, 0)];
    let mut tr = Trainer::new(cfg32(), cfg).unwrap();
    assert!((tr.current_lr() - 1e-3).abs() < 1e-15);
    for _ in 0..4 {
        tr.step(&data).unwrap();
    }
    assert!((tr.current_lr() - 1e-5).abs() < 1e-15);
}
