use milpath::bagio::LabelLevel;
use milpath::evalstat::{replicate_plans, BootstrapConfig, Dataset};
use milpath::milnet::{checkpoint, MilMode, MilModel, ModelConfig};
use milpath::tiler::{synth_cohort, SyntheticBagSpec};
use milpath::trainer::{cosine_lr, fit, TrainConfig};

fn cohort(separation: f64) -> Dataset {
    cohort_of(separation, 20)
}

fn cohort_of(separation: f64, per_class: usize) -> Dataset {
    let spec = SyntheticBagSpec {
        separation,
        ..Default::default()
    };
    let c = synth_cohort(&spec, per_class, &["A".to_string(), "B".to_string()]).unwrap();
    Dataset::from_synthetic(&c, LabelLevel::Category).unwrap()
}

fn small(mode: MilMode, seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::new(mode, 64, 3);
    cfg.hidden_dim = 32;
    cfg.attn_dim = 16;
    cfg.init_seed = seed;
    cfg
}

#[test]
fn separable_cohort_train_loss_falls_below_threshold() {
    // 75 training bags: 1,500 optimizer steps over 20 epochs
    let ds = cohort_of(6.0, 50);
    let plan = &replicate_plans(&ds, &BootstrapConfig { n_replicates: 1, ..Default::default() }).unwrap()[0];
    let train = ds.samples(&plan.train).unwrap();
    let val = ds.samples(&plan.val).unwrap();
    let model = MilModel::new(ModelConfig::new(MilMode::Abmil, 64, 3)).unwrap();
    let cfg = TrainConfig {
        min_epochs: 20,
        ..Default::default()
    };
    let (m, log) = fit(model, &train, &val, &cfg).unwrap();
    let last = log.epochs.last().unwrap();
    assert_eq!(last.epoch, 20);
    assert!(last.train_loss < 0.1, "final epoch train loss {}", last.train_loss);
    let eval = milpath::trainer::evaluate_loss(&m, &train, false).unwrap();
    assert!(eval < 0.1, "train loss without dropout {eval}");
}

#[test]
fn fit_is_deterministic_and_follows_the_schedule() {
    let ds = cohort(6.0);
    let plan = &replicate_plans(&ds, &BootstrapConfig { n_replicates: 1, ..Default::default() }).unwrap()[0];
    let train = ds.samples(&plan.train).unwrap();
    let val = ds.samples(&plan.val).unwrap();
    let cfg = TrainConfig {
        seed: 17,
        ..Default::default()
    };
    for mode in [MilMode::Abmil, MilMode::Clam] {
        let run = || fit(MilModel::new(small(mode, 3)).unwrap(), &train, &val, &cfg).unwrap();
        let (m1, log1) = run();
        let (m2, log2) = run();
        assert_eq!(log1.to_jsonl().unwrap(), log2.to_jsonl().unwrap());
        assert_eq!(checkpoint::to_bytes(&m1).unwrap(), checkpoint::to_bytes(&m2).unwrap());

        assert!(log1.epochs.len() >= cfg.min_epochs && log1.epochs.len() <= cfg.max_epochs);
        for e in &log1.epochs {
            assert_eq!(e.lr, cosine_lr(e.epoch - 1, cfg.max_epochs, cfg.lr0, cfg.eta_min));
        }
        let min_val = log1.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(log1.best_val_loss, min_val);
        let best = milpath::trainer::evaluate_loss(&m1, &val, false).unwrap();
        assert!((best - min_val).abs() < 1e-12, "{best} vs {min_val}");
    }
}

#[test]
fn different_seeds_give_different_models() {
    let ds = cohort(6.0);
    let plan = &replicate_plans(&ds, &BootstrapConfig { n_replicates: 1, ..Default::default() }).unwrap()[0];
    let train = ds.samples(&plan.train).unwrap();
    let val = ds.samples(&plan.val).unwrap();
    let run = |seed| {
        let cfg = TrainConfig {
            seed,
            max_epochs: 2,
            min_epochs: 2,
            ..Default::default()
        };
        fit(MilModel::new(small(MilMode::Abmil, 1)).unwrap(), &train, &val, &cfg).unwrap().1
    };
    assert_ne!(run(1).to_jsonl().unwrap(), run(2).to_jsonl().unwrap());
}

#[test]
fn checkpoint_file_round_trip_after_training() {
    let ds = cohort(6.0);
    let plan = &replicate_plans(&ds, &BootstrapConfig { n_replicates: 1, ..Default::default() }).unwrap()[0];
    let train = ds.samples(&plan.train).unwrap();
    let val = ds.samples(&plan.val).unwrap();
    let cfg = TrainConfig {
        max_epochs: 2,
        min_epochs: 2,
        ..Default::default()
    };
    let (m, _) = fit(MilModel::new(small(MilMode::Clam, 5)).unwrap(), &train, &val, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&m, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(checkpoint::to_bytes(&back).unwrap(), std::fs::read(&path).unwrap());
    // f32 storage: predictions agree to single precision
    for (bag, _) in &val {
        let a = milpath::milnet::predict(&m, bag).unwrap();
        let b = milpath::milnet::predict(&back, bag).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-4);
        }
    }
}
