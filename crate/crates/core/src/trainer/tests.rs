use super::*;
use crate::data::make_sample;

fn tiny() -> TrainConfig {
    TrainConfig {
        n_sets: 3,
        n_per_set: 6,
        res: 16,
        width: 2,
        patch: 4,
        pool_k: 2,
        iters: 4,
        log_every: 1,
        ..TrainConfig::default()
    }
}

fn fixture(cfg: &TrainConfig) -> (Generator, Discriminator, Vec<IdentitySet>) {
    let sets = generate_sets(cfg.n_sets, cfg.n_per_set, cfg.res, 5).unwrap();
    let (g, d) = init_params(cfg.seed, cfg.net()).unwrap();
    (g, d, sets)
}

fn msq(t: &Tensor, target: f64) -> f64 {
    t.data().iter().map(|v| (v - target).powi(2)).sum::<f64>() / t.numel() as f64
}

#[test]
fn recorded_discriminator_loss_matches_pre_update_snapshot() {
    let cfg = tiny();
    let (mut g, mut d, sets) = fixture(&cfg);
    let (g0, d0) = (g.clone(), d.clone());
    let s = make_sample(&sets, 0, 1, 2, 3).unwrap();
    let x_hat = sets[0].instances[4].image.clone();
    let l = train_step_phase1(&mut g, &mut d, &s, &x_hat, &cfg, 1).unwrap();
    let fake = g0.forward(&s.x, &s.y).unwrap();
    let expected = msq(&d0.forward(&s.x, &x_hat).unwrap(), 1.0) + msq(&d0.forward(&s.x, &fake).unwrap(), 0.0);
    assert!((l.identity_d - expected).abs() < 1e-12, "{} vs {expected}", l.identity_d);
    assert_ne!(g.params(), g0.params());
    assert_ne!(d.params(), d0.params());
}

#[test]
fn disabled_cycle_terms_make_step_three_a_no_op() {
    let off = TrainConfig {
        use_s2a: false,
        use_s2b: false,
        ..tiny()
    };
    let zero_alpha = TrainConfig { alpha: 0.0, ..tiny() };
    let (g0, d0, sets) = fixture(&off);
    let s = make_sample(&sets, 1, 0, 0, 2).unwrap();
    let x_hat = sets[1].instances[3].image.clone();

    let (mut g1, mut d1) = (g0.clone(), d0.clone());
    let a = train_step_phase1(&mut g1, &mut d1, &s, &x_hat, &off, 1).unwrap();
    assert_eq!((a.s2a, a.s2b), (None, None));

    let (mut g2, mut d2) = (g0.clone(), d0.clone());
    let b = train_step_phase1(&mut g2, &mut d2, &s, &x_hat, &zero_alpha, 1).unwrap();
    assert!(b.s2a.is_some() && b.s2b.is_some());
    assert_eq!(g1.params(), g2.params());
    assert_eq!(d1.params(), d2.params());
}

#[test]
fn zero_learning_rates_leave_parameters_untouched() {
    let cfg = TrainConfig {
        lr_g: 0.0,
        lr_d: 0.0,
        ..tiny()
    };
    let (mut g, mut d, sets) = fixture(&cfg);
    let (g0, d0) = (g.clone(), d.clone());
    let s = make_sample(&sets, 0, 0, 1, 1).unwrap();
    let l = train_step_phase1(&mut g, &mut d, &s, &sets[0].instances[2].image, &cfg, 1).unwrap();
    assert!(l.identity_g > 0.0 && l.identity_d > 0.0);
    let same = make_sample(&sets, 2, 0, 2, 1).unwrap();
    assert!(train_step_phase2(&mut g, &same, &cfg, 1).unwrap().unwrap() > 0.0);
    assert_eq!(g.params().tensors(), g0.params().tensors());
    assert_eq!(d.params().tensors(), d0.params().tensors());
}

#[test]
fn updates_are_isolated_between_networks() {
    let cfg = TrainConfig {
        lr_g: 0.0,
        ..tiny()
    };
    let (mut g, mut d, sets) = fixture(&cfg);
    let (g0, d0) = (g.clone(), d.clone());
    let s = make_sample(&sets, 0, 0, 1, 1).unwrap();
    train_step_phase1(&mut g, &mut d, &s, &sets[0].instances[2].image, &cfg, 1).unwrap();
    assert_eq!(g.params().tensors(), g0.params().tensors());
    assert_ne!(d.params().tensors(), d0.params().tensors());

    let cfg = TrainConfig { lr_d: 0.0, ..tiny() };
    let (mut g, mut d) = (g0.clone(), d0.clone());
    train_step_phase1(&mut g, &mut d, &s, &sets[0].instances[2].image, &cfg, 1).unwrap();
    assert_ne!(g.params().tensors(), g0.params().tensors());
    assert_eq!(d.params().tensors(), d0.params().tensors());
}

#[test]
fn phase_identity_contracts() {
    let cfg = tiny();
    let (mut g, mut d, sets) = fixture(&cfg);
    let same = make_sample(&sets, 0, 0, 0, 1).unwrap();
    let cross = make_sample(&sets, 0, 0, 1, 1).unwrap();
    assert!(matches!(
        train_step_phase1(&mut g, &mut d, &same, &same.x, &cfg, 1),
        Err(Error::Contract(_))
    ));
    assert!(matches!(train_step_phase2(&mut g, &cross, &cfg, 1), Err(Error::Contract(_))));
}

#[test]
fn zero_beta_freezes_phase_two() {
    let cfg = TrainConfig { beta: 0.0, ..tiny() };
    let (mut g, _, sets) = fixture(&cfg);
    let g0 = g.clone();
    let same = make_sample(&sets, 1, 0, 1, 1).unwrap();
    assert!(train_step_phase2(&mut g, &same, &cfg, 1).unwrap().is_some());
    assert_eq!(g.params().tensors(), g0.params().tensors());
}

#[test]
fn phase_two_alone_halves_reconstruction_loss() {
    let cfg = TrainConfig {
        width: 4,
        lr_g: 2e-3,
        ..tiny()
    };
    let (mut g, _, sets) = fixture(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let probe: Vec<_> = (0..12).map(|_| sample_pair(&sets, true, &mut rng).unwrap()).collect();
    let mean_s1 = |g: &Generator| {
        probe
            .iter()
            .map(|s| g.forward(&s.x, &s.y).unwrap().mean_abs_diff(&s.y))
            .sum::<f64>()
            / probe.len() as f64
    };
    let before = mean_s1(&g);
    for it in 1..=500 {
        let s = sample_pair(&sets, true, &mut rng).unwrap();
        train_step_phase2(&mut g, &s, &cfg, it).unwrap();
    }
    let after = mean_s1(&g);
    assert!(after <= 0.5 * before, "L_S1 {before:.4} -> {after:.4}");
}

#[test]
fn smoke_run_writes_history_and_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { iters: 2, ..tiny() };
    let (_, run) = train(&cfg, Some(tmp.path())).unwrap();
    assert_eq!(run.history.len(), 2);
    let lines = read_history(&tmp.path().join("history.jsonl")).unwrap();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![1, 2]);
    assert_eq!(run.checkpoints, vec![checkpoint_path(tmp.path(), 2)]);
    assert!(run.checkpoints[0].exists());
}

#[test]
fn disabled_terms_log_null() {
    let cfg = TrainConfig {
        iters: 1,
        use_s1: false,
        use_s2b: false,
        ..tiny()
    };
    let (_, run) = train(&cfg, None).unwrap();
    let json = serde_json::to_value(&run.history[0]).unwrap();
    assert!(json["s1"].is_null() && json["s2b"].is_null());
    assert!(json["s2a"].is_f64());
}

#[test]
fn reruns_are_bit_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 2,
        ..tiny()
    };
    let (_, ra) = train(&cfg, Some(a.path())).unwrap();
    let (_, rb) = train(&cfg, Some(b.path())).unwrap();
    assert_eq!(ra.checkpoints.len(), 2);
    for (pa, pb) in ra.checkpoints.iter().zip(&rb.checkpoints) {
        assert_eq!(fs::read(pa).unwrap(), fs::read(pb).unwrap());
    }
    assert!(ra.history.iter().zip(&rb.history).all(|(x, y)| x.same_values(y)));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let full_dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        iters: 12,
        checkpoint_every: 6,
        ..tiny()
    };
    let (full, full_run) = train(&cfg, Some(full_dir.path())).unwrap();

    let half_dir = tempfile::tempdir().unwrap();
    let half_cfg = TrainConfig { iters: 6, ..cfg.clone() };
    let (_, half_run) = train(&half_cfg, Some(half_dir.path())).unwrap();
    let ck = Checkpoint::load(&half_run.checkpoints[0]).unwrap();
    let sets = generate_sets(cfg.n_sets, cfg.n_per_set, cfg.res, cfg.seed).unwrap();
    let mut resumed = Trainer::resume(ck, sets, Some(cfg.clone())).unwrap();
    let tail = resumed.run(Some(half_dir.path())).unwrap();

    assert_eq!(tail.history.len(), 6);
    for (a, b) in tail.history.iter().zip(&full_run.history[6..]) {
        assert!(a.same_values(b), "{a:?} vs {b:?}");
    }
    assert_eq!(resumed.checkpoint().to_bytes(), full.checkpoint().to_bytes());
    let merged = read_history(&half_dir.path().join("history.jsonl")).unwrap();
    assert_eq!(merged.len(), 12);
}

#[test]
fn non_finite_input_aborts_naming_the_term() {
    let cfg = tiny();
    let mut sets = generate_sets(cfg.n_sets, cfg.n_per_set, cfg.res, 0).unwrap();
    for set in &mut sets {
        for inst in &mut set.instances {
            inst.image = inst.image.map(|_| f64::NAN);
        }
    }
    let mut t = Trainer::new(cfg, sets).unwrap();
    match t.run(None) {
        Err(Error::NonFinite { term, iteration }) => {
            assert_eq!(term, "identity_g");
            assert_eq!(iteration, 1);
        }
        other => panic!("expected abort, got {:?}", other.map(|r| r.history.len())),
    }
}

#[test]
fn eval_records_metrics_on_schedule() {
    let cfg = TrainConfig {
        iters: 2,
        eval_every: 2,
        log_every: 10,
        ..tiny()
    };
    let sets = generate_sets(cfg.n_sets, cfg.n_per_set, cfg.res, cfg.seed).unwrap();
    let held = crate::data::generate_holdout(cfg.n_sets, 3, cfg.res, cfg.seed).unwrap();
    let mut t = Trainer::new(cfg, sets).unwrap();
    t.set_eval_samples(crate::eval::eval_samples(&held, 4, 0).unwrap());
    let run = t.run(None).unwrap();
    assert_eq!(run.history.len(), 1);
    assert_eq!(run.history[0].metrics.as_ref().unwrap().iteration, 2);
}
