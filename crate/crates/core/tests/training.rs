use dapnet::data::{iterate_batches, make_synthetic, BatchPlan, LabeledImageSet, SyntheticSpec};
use dapnet::train::{evaluate, load_checkpoint, metrics_csv, save_checkpoint, train, OptimConfig, TrainConfig, TrainRun};
use dapnet::{BackboneConfig, Error, HeadConfig, HeadKind, Model, ModelConfig};

fn config(kind: HeadKind, classes: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig { in_channels: 1, resolution: 8, widths: vec![4, 8], blocks: vec![1, 1], strides: vec![1, 2] },
        head: HeadConfig::new(kind, classes),
    }
}

fn two_class(per_class: usize, noise: f64, seed: u64) -> LabeledImageSet<f64> {
    make_synthetic(&SyntheticSpec { noise, ..SyntheticSpec::new(2, per_class, 8, seed) }).unwrap()
}

fn run(kind: HeadKind, seed: u64, batch_size: usize) -> TrainRun<f64> {
    let model = Model::new(&config(kind, 2), seed).unwrap();
    TrainRun::new(model, TrainConfig { batch_size, seed, ..TrainConfig::default() }).unwrap()
}

/// Steps until full-set training accuracy first reaches `target`, or `None`
/// within `budget` steps.
fn steps_to_accuracy(run: &mut TrainRun<f64>, data: &LabeledImageSet<f64>, target: f64, budget: usize) -> Option<usize> {
    let plan = BatchPlan::new(run.config.seed, run.config.batch_size).unwrap();
    let mut steps = 0;
    for epoch in 0.. {
        for batch in iterate_batches(data, &plan, epoch) {
            run.step(&batch.images, &batch.labels).unwrap();
            steps += 1;
            if evaluate(&run.model, data, 64).unwrap().top1 >= target {
                return Some(steps);
            }
            if steps >= budget {
                return None;
            }
        }
    }
    unreachable!()
}

#[test]
fn every_head_fits_noise_free_patterns_within_200_steps() {
    let data = two_class(16, 0.0, 11);
    for kind in HeadKind::ALL {
        let mut r = run(kind, 1, 8);
        let steps = steps_to_accuracy(&mut r, &data, 1.0, 200);
        assert!(steps.is_some(), "{kind} did not reach 100% train accuracy in 200 steps");
    }
}

#[test]
fn every_head_reaches_99_percent_on_noisy_patterns_within_300_steps() {
    let data = two_class(64, 0.1, 12);
    for kind in HeadKind::ALL {
        let mut r = run(kind, 2, 16);
        let steps = steps_to_accuracy(&mut r, &data, 0.99, 300);
        assert!(steps.is_some(), "{kind} stayed below 99% train accuracy for 300 steps");
    }
}

#[test]
fn a_memorised_set_evaluates_to_one() {
    let data = two_class(5, 0.0, 13);
    let mut r = run(HeadKind::Dap, 3, 10);
    assert!(steps_to_accuracy(&mut r, &data, 1.0, 300).is_some());
    assert_eq!(evaluate(&r.model, &data, 3).unwrap().top1, 1.0);
}

#[test]
fn identical_seeds_give_identical_histories() {
    let data = two_class(16, 0.2, 14);
    let go = || {
        let model = Model::new(&config(HeadKind::Dap, 2), 4).unwrap();
        let cfg = TrainConfig { epochs: 3, batch_size: 8, seed: 4, ..TrainConfig::default() };
        let mut losses = Vec::new();
        let mut r = TrainRun::new(model, cfg).unwrap();
        let plan = BatchPlan::new(4, 8).unwrap();
        for epoch in 0..3 {
            for batch in iterate_batches(&data, &plan, epoch) {
                losses.push(r.step(&batch.images, &batch.labels).unwrap().routed_loss.to_bits());
            }
        }
        let history = train(Model::new(&config(HeadKind::Dap, 2), 4).unwrap(), &data, Some(&data), r.config.clone(), |_| Ok(()))
            .unwrap()
            .history;
        (losses, metrics_csv(&history))
    };
    assert_eq!(go(), go());
}

#[test]
fn lambda_history_stays_on_the_simplex() {
    let data = two_class(16, 0.2, 15);
    let model = Model::new(&config(HeadKind::Dap, 2), 5).unwrap();
    let cfg = TrainConfig { epochs: 4, batch_size: 8, seed: 5, ..TrainConfig::default() };
    let r = train(model, &data, None, cfg, |_| Ok(())).unwrap();
    assert_eq!(r.history.len(), 4);
    for m in &r.history {
        assert_eq!(m.lambdas.len(), 4);
        assert!((m.lambdas.iter().sum::<f64>() - 1.0).abs() <= 1e-12, "{:?}", m.lambdas);
        assert!(m.lambdas.iter().all(|&l| l >= 1e-4));
        assert_eq!(m.routed.iter().sum::<usize>(), 4);
    }
}

#[test]
fn small_steps_on_a_frozen_batch_never_raise_the_loss() {
    let data = two_class(8, 0.2, 16);
    let mut lr = 1e-4;
    loop {
        assert!(lr >= 1e-8, "no learning rate down to 1e-8 gave a monotone loss");
        let model = Model::new(&config(HeadKind::Dap, 2), 6).unwrap();
        let optim = OptimConfig { base_lr: lr, ..OptimConfig::desk() };
        let mut r = TrainRun::new(model, TrainConfig { optim, ..TrainConfig::default() }).unwrap();
        let losses: Vec<f64> = (0..21).map(|_| r.step(&data.images, &data.labels).unwrap().routed_loss).collect();
        if losses.windows(2).all(|w| w[1] <= w[0] + 1e-6) {
            assert!(losses[20] < losses[0], "{losses:?}");
            break;
        }
        lr /= 2.0;
    }
}

#[test]
fn checkpoints_restore_accuracy_and_the_next_gradient() {
    let data = two_class(16, 0.2, 17);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        seed: 7,
        optim: OptimConfig { momentum: 0.9, weight_decay: 1e-4, ..OptimConfig::desk() },
        ..TrainConfig::default()
    };
    let mut a = train(Model::new(&config(HeadKind::Dap, 2), 7).unwrap(), &data, None, cfg.clone(), |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&a, dir.path(), "cafe").unwrap();

    let mut b = TrainRun::new(Model::new(&config(HeadKind::Dap, 2), 99).unwrap(), cfg).unwrap();
    let meta = load_checkpoint(&mut b, dir.path()).unwrap();
    assert_eq!((meta.epoch, meta.seed, meta.config_hash.as_str()), (2, 7, "cafe"));
    assert_eq!(b.epoch, 2);
    assert_eq!(a.model.checksum(), b.model.checksum());
    assert_eq!(evaluate(&a.model, &data, 64).unwrap(), evaluate(&b.model, &data, 64).unwrap());

    let ra = a.step(&data.images, &data.labels).unwrap();
    let rb = b.step(&data.images, &data.labels).unwrap();
    assert_eq!(ra, rb);
    for (ea, eb) in a.model.store.entries().iter().zip(b.model.store.entries()) {
        assert_eq!(ea.grad, eb.grad, "{}", ea.name);
    }
    assert_eq!(a.model.checksum(), b.model.checksum());
}

#[test]
fn f32_checkpoints_round_trip_bit_exactly() {
    let data: LabeledImageSet<f32> = make_synthetic(&SyntheticSpec::new(2, 8, 8, 18)).unwrap();
    let model = Model::<f32>::new(&config(HeadKind::GapGmp, 2), 8).unwrap();
    let cfg = TrainConfig { epochs: 1, batch_size: 4, seed: 8, ..TrainConfig::default() };
    let a = train(model, &data, None, cfg.clone(), |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&a, dir.path(), "x").unwrap();
    let mut b = TrainRun::new(Model::<f32>::new(&config(HeadKind::GapGmp, 2), 0).unwrap(), cfg).unwrap();
    load_checkpoint(&mut b, &dir.path().join("checkpoint.manifest")).unwrap();
    assert_eq!(a.model.checksum(), b.model.checksum());
}

#[test]
fn checkpoints_refuse_a_different_architecture() {
    let data = two_class(4, 0.2, 19);
    let cfg = TrainConfig { epochs: 1, batch_size: 4, ..TrainConfig::default() };
    let a = train(Model::new(&config(HeadKind::Dap, 2), 0).unwrap(), &data, None, cfg.clone(), |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&a, dir.path(), "x").unwrap();
    let mut b: TrainRun<f64> = TrainRun::new(Model::new(&config(HeadKind::Gap, 2), 0).unwrap(), cfg).unwrap();
    assert!(load_checkpoint(&mut b, dir.path()).is_err());
}

#[test]
fn evaluation_does_not_depend_on_batch_size() {
    let data = two_class(32, 0.3, 20);
    let model = Model::new(&config(HeadKind::Dap, 2), 9).unwrap();
    let cfg = TrainConfig { epochs: 1, batch_size: 16, seed: 9, ..TrainConfig::default() };
    let r = train(model, &data, None, cfg, |_| Ok(())).unwrap();
    assert_eq!(evaluate(&r.model, &data, 1).unwrap(), evaluate(&r.model, &data, 64).unwrap());
}

#[test]
fn mismatched_data_is_rejected_before_the_first_step() {
    let data: LabeledImageSet<f64> = make_synthetic(&SyntheticSpec::new(2, 4, 10, 21)).unwrap();
    let model = Model::new(&config(HeadKind::Dap, 2), 0).unwrap();
    let mut epochs_seen = 0;
    let err = train(model, &data, None, TrainConfig::default(), |_| {
        epochs_seen += 1;
        Ok(())
    })
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert_eq!(epochs_seen, 0);

    let three: LabeledImageSet<f64> = make_synthetic(&SyntheticSpec::new(3, 4, 8, 21)).unwrap();
    let model = Model::new(&config(HeadKind::Gap, 2), 0).unwrap();
    assert!(matches!(train(model, &three, None, TrainConfig::default(), |_| Ok(())), Err(Error::Config(_))));
}
