use cinemotion::applications::{reconstruct, reconstruct_frames, simulate, track, transport, ReconMode};
use cinemotion::autodiff::Graph;
use cinemotion::image::{Image, ImageSequence};
use cinemotion::networks::{BoundParams, LatentSource, ModelConfig, MotionMatrix, MotionModel, SamplingPolicy};
use cinemotion::synthetic::{generate_sequence, AnnulusSpec};
use cinemotion::training::{load_model, loss_graph, save_model, temporal_dropout_sample, DropoutMask};
use cinemotion::{selftest, Error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        height: 32,
        width: 32,
        ..ModelConfig::default()
    }
}

fn small_model(seed: u64) -> MotionModel<f32> {
    let mut m = MotionModel::new(small_config(), seed).unwrap();
    m.allow_untrained = true;
    m
}

fn small_sequence(t: usize, seed: u64) -> ImageSequence<f32> {
    let spec = AnnulusSpec {
        cx: 16.0,
        cy: 16.0,
        r_inner: 6.0,
        r_outer: 10.0,
        ..AnnulusSpec::default()
    };
    generate_sequence(&spec, 32, 32, t, seed).unwrap().sequence
}

fn same_fields(a: &[cinemotion::deformation::DeformationField<f32>], b: &[cinemotion::deformation::DeformationField<f32>]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.data == y.data)
}

#[test]
fn encoder_emits_d_dimensional_posterior() {
    let m = small_model(1);
    let seq = small_sequence(6, 1);
    let q = m.encode(seq.moving(), &seq.frames[3]).unwrap();
    assert_eq!(q.mean.len(), 8);
    assert_eq!(q.log_var.len(), 8);
    let fr = m.forward(&seq, &SamplingPolicy::mean(6), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!((fr.ztilde.d, fr.ztilde.t), (8, 6));
    assert_eq!((fr.motion.d, fr.motion.t), (8, 6));
    assert_eq!(fr.velocities.len(), 6);
    assert_eq!((fr.velocities[0].h, fr.velocities[0].w), (32, 32));
}

#[test]
fn dropped_steps_pass_no_reconstruction_gradient_to_encoder() {
    let m = small_model(2);
    let seq = small_sequence(5, 2);
    let encoder_grad = |mask: DropoutMask| -> f64 {
        let mut g = Graph::new();
        let p = BoundParams::bind(&mut g, &m.params, true);
        let lg = loss_graph(&mut g, &p, &m.config, 6e4, &seq, &mask, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let grads = g.backward(lg.recon).params(&g);
        grads
            .iter()
            .filter(|(k, _)| k.starts_with("enc."))
            .map(|(_, t)| t.data().iter().map(|x| x.abs() as f64).sum::<f64>())
            .sum()
    };
    assert_eq!(encoder_grad(DropoutMask::all(5, true)), 0.0);
    assert!(encoder_grad(DropoutMask::all(5, false)) > 0.0);
}

#[test]
fn full_dropout_output_ignores_the_frames() {
    let m = small_model(4);
    let seq = small_sequence(6, 4);
    // same moving frame, unrelated fixed frames
    let mut other = vec![seq.frames[0].clone()];
    other.extend((1..=6).map(|k| Image::from_fn(32, 32, |y, x| ((x * 7 + y * 3 + k) % 11) as f32 / 11.0)));
    let other = ImageSequence::new(other, seq.spacing_mm).unwrap();
    let policy = SamplingPolicy::dropout(&[true; 6]);
    let a = m.forward(&seq, &policy, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = m.forward(&other, &policy, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert!(same_fields(&a.deformations, &b.deformations));
    assert!(a.posteriors.iter().all(Option::is_none));
}

#[test]
fn unobserved_frames_are_never_read() {
    let m = small_model(3);
    let seq = small_sequence(8, 3);
    let nan = Image::from_fn(32, 32, |_, _| f32::NAN);
    let mut poisoned = seq.frames.clone();
    for i in [2, 3, 5, 6, 7, 8] {
        poisoned[i] = nan.clone();
    }
    let poisoned = ImageSequence::new(poisoned, seq.spacing_mm).unwrap();
    let a = reconstruct(&poisoned, &[0, 1, 4], &m, ReconMode::Mean, 0).unwrap();
    let b = reconstruct(&seq, &[0, 1, 4], &m, ReconMode::Mean, 0).unwrap();
    assert!(a.deformations.iter().all(|d| d.all_finite()));
    assert!(same_fields(&a.deformations, &b.deformations));

    let frames: Vec<Option<&Image<f32>>> = vec![None; 8];
    let sim = reconstruct_frames(seq.moving(), &frames, &m, ReconMode::Mean, 0, 1.5).unwrap();
    let only0 = reconstruct(&poisoned, &[0], &m, ReconMode::Mean, 0).unwrap();
    assert!(same_fields(&sim.deformations, &only0.deformations));
}

#[test]
fn tracking_is_deterministic_and_equals_full_reconstruction() {
    let m = small_model(4);
    let seq = small_sequence(7, 4);
    let a = track(&seq, &m).unwrap();
    let b = track(&seq, &m).unwrap();
    assert!(same_fields(&a.deformations, &b.deformations));
    let all: Vec<usize> = (0..=7).collect();
    let r = reconstruct(&seq, &all, &m, ReconMode::Stochastic, 99).unwrap();
    assert!(same_fields(&a.deformations, &r.deformations));
    assert_eq!(a.motion, r.motion);
}

#[test]
fn transport_to_own_moving_frame_reproduces_tracking() {
    let m = small_model(5);
    let seq = small_sequence(6, 5);
    let tr = track(&seq, &m).unwrap();
    let back = transport(&tr.motion, seq.moving(), &m, seq.spacing_mm).unwrap();
    assert!(same_fields(&tr.deformations, &back.deformations));
}

#[test]
fn stochastic_simulation_depends_on_seed_only() {
    let m = small_model(6);
    let seq = small_sequence(6, 6);
    let a = simulate(seq.moving(), 6, &m, ReconMode::Stochastic, 1, 1.5).unwrap();
    let b = simulate(seq.moving(), 6, &m, ReconMode::Stochastic, 1, 1.5).unwrap();
    let c = simulate(seq.moving(), 6, &m, ReconMode::Stochastic, 2, 1.5).unwrap();
    assert!(same_fields(&a.deformations, &b.deformations));
    assert!(!same_fields(&a.deformations, &c.deformations));
    // mean mode ignores the seed
    let d = simulate(seq.moving(), 6, &m, ReconMode::Mean, 1, 1.5).unwrap();
    let e = simulate(seq.moving(), 6, &m, ReconMode::Mean, 2, 1.5).unwrap();
    assert!(same_fields(&d.deformations, &e.deformations));
}

#[test]
fn mismatched_latent_dimension_is_rejected() {
    let m = small_model(7);
    let seq = small_sequence(4, 7);
    let wrong = MotionMatrix {
        d: 6,
        t: 4,
        data: vec![0.0f32; 24],
    };
    assert!(matches!(transport(&wrong, seq.moving(), &m, 1.5), Err(Error::Shape { .. })));
    assert!(m.decode(&[0.0; 5], seq.moving()).is_err());
    assert!(m.temporal_regularize(&wrong).is_err());
}

#[test]
fn untrained_parameters_are_refused_by_default() {
    let mut m = MotionModel::<f32>::new(small_config(), 8).unwrap();
    let seq = small_sequence(4, 8);
    assert!(!m.is_trained());
    let err = track(&seq, &m).unwrap_err();
    assert!(err.to_string().contains("untrained"), "{err}");
    assert!(simulate(seq.moving(), 4, &m, ReconMode::Mean, 0, 1.5).is_err());
    m.allow_untrained = true;
    assert!(track(&seq, &m).is_ok());
}

#[test]
fn wrong_extent_is_rejected() {
    let m = small_model(9);
    let spec = AnnulusSpec::default();
    let seq = generate_sequence(&spec, 64, 64, 4, 0).unwrap().sequence;
    assert!(track(&seq, &m).is_err());
}

#[test]
fn plain_dropout_sampling_matches_forward_pass_draws() {
    let m = small_model(10);
    let seq = small_sequence(6, 10);
    let mask = DropoutMask {
        r: vec![false, true, true, false, false, true],
    };
    let fr = m
        .forward(&seq, &SamplingPolicy::dropout(&mask.r), &mut ChaCha8Rng::seed_from_u64(42))
        .unwrap();
    // posteriors of the dropped steps were not computed, so encode them directly
    let q: Vec<_> = (1..=6).map(|i| m.encode(seq.moving(), &seq.frames[i]).unwrap()).collect();
    let plain = temporal_dropout_sample(&q, &mask, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    assert_eq!((plain.d, plain.t), (fr.ztilde.d, fr.ztilde.t));
    for (a, b) in plain.data.iter().zip(&fr.ztilde.data) {
        assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
    }
    assert!(fr.posteriors[1].is_none() && fr.posteriors[0].is_some());
}

#[test]
fn policy_sources() {
    let p = SamplingPolicy::observed(&[true, false], false);
    assert_eq!(p.0, vec![LatentSource::PosteriorMean, LatentSource::PriorMean]);
    assert!(!LatentSource::PriorSample.reads_frame());
}

#[test]
fn model_round_trips_through_checkpoint() {
    let cfg = small_config();
    assert_eq!(ModelConfig::from_meta(&cfg.to_meta()).unwrap(), cfg);
    let m = MotionModel::<f32>::new(cfg, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_model(&m, dir.path()).unwrap();
    let back = load_model(dir.path()).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(back.params, m.params);
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        ModelConfig { d: 0, ..small_config() },
        ModelConfig { height: 30, ..small_config() },
        ModelConfig { tcn_dilations: vec![2, 1], ..small_config() },
        ModelConfig { lcc_window: 8, ..small_config() },
    ] {
        assert!(MotionModel::<f32>::new(cfg, 0).is_err());
    }
}

#[test]
fn self_checks_all_pass() {
    let out = selftest::run_all(0).unwrap();
    assert!(!out.is_empty());
    for c in &out {
        assert!(c.passed, "{c}");
    }
}
