use super::*;
use crate::data::synthetic::SyntheticSpec;
use crate::data::{generate_synthetic, CategoryDef, TaskDef};
use crate::model::{ModelConfig, ProjectionKind};

fn two_task_spec() -> TaskSpec {
    let task = |name: &str, terms: &[&str]| TaskDef {
        name: name.into(),
        categories: terms
            .iter()
            .enumerate()
            .map(|(i, t)| CategoryDef {
                name: format!("c{i}"),
                term: (*t).into(),
            })
            .collect(),
    };
    TaskSpec::new(vec![
        task("breast", &["ductal carcinoma", "lobular carcinoma"]),
        task("lymph", &["normal", "tumor"]),
    ])
    .unwrap()
}

fn tiny_data(seed: u64, bags_per_class: usize) -> (TaskSpec, Vec<FeatureBag>) {
    let spec = SyntheticSpec {
        d_f: 8,
        signal_fraction: 0.5,
        noise_std: 0.3,
        bags_per_class,
        min_patches: 4,
        max_patches: 8,
        ..SyntheticSpec::benchmark(two_task_spec(), seed)
    };
    (spec.tasks.clone(), generate_synthetic(&spec).unwrap())
}

fn tiny_model(task_spec: &TaskSpec, seed: u64) -> Mecformer {
    let cfg = ModelConfig {
        d_f: 8,
        d_model: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        tasks: task_spec.task_count(),
        vocab_size: task_spec.vocab().len(),
        categories: task_spec.total_categories(),
        num_landmarks: 4,
        pwff_hidden: 32,
        projection: ProjectionKind::Ecn,
        ..ModelConfig::default()
    };
    Mecformer::new(cfg, seed).unwrap()
}

fn fast_cfg() -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        epochs: 50,
        patience: 50,
        ..TrainConfig::default()
    }
}

#[test]
fn tiny_two_task_run_fits_training_set() {
    let (spec, bags) = tiny_data(1, 5);
    let data = examples(&bags, &spec, true).unwrap();
    let mut model = tiny_model(&spec, 2);
    let out = train(&mut model, &data, &data, &fast_cfg(), |_, _| Ok(())).unwrap();
    let reached = out.history.iter().position(|r| r.train_loss < 0.1);
    assert!(reached.is_some(), "{:?}", out.history.last());
}

#[test]
fn overfit_single_slide_decodes_its_term() {
    let (spec, bags) = tiny_data(3, 3);
    let bag = bags.iter().find(|b| b.label_term == "ductal carcinoma").unwrap();
    let data = examples([bag], &spec, true).unwrap();
    let mut model = tiny_model(&spec, 4);
    let cfg = TrainConfig {
        lr: 1e-2,
        epochs: 150,
        ..fast_cfg()
    };
    train(&mut model, &data, &data, &cfg, |_, _| Ok(())).unwrap();
    let g = model.generate(&data[0].x, data[0].task).unwrap();
    assert_eq!(spec.detokenize(&g.tokens).unwrap(), "ductal carcinoma");
    assert!(!g.truncated);
}

#[test]
fn identical_seeds_give_identical_histories() {
    let (spec, bags) = tiny_data(5, 3);
    let data = examples(&bags, &spec, true).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        ..fast_cfg()
    };
    let run = || {
        let mut model = tiny_model(&spec, 6);
        let out = train(&mut model, &data, &data, &cfg, |_, _| Ok(())).unwrap();
        out.history
            .iter()
            .map(|r| (r.train_loss.to_bits(), r.val_loss.to_bits()))
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
    let other = TrainConfig { seed: 1, ..cfg.clone() };
    let mut model = tiny_model(&spec, 6);
    let shuffled = train(&mut model, &data, &data, &other, |_, _| Ok(())).unwrap();
    assert_ne!(shuffled.history[0].train_loss.to_bits(), run()[0].0);
}

#[test]
fn patience_one_stops_after_first_worse_epoch() {
    let mut rule = EarlyStopping::new(1);
    assert_eq!(rule.observe(1.0), (true, false));
    assert_eq!(rule.observe(1.5), (false, true));

    let mut rule = EarlyStopping::new(3);
    let decisions: Vec<_> = [3.0, 2.0, 2.5, 2.0, 1.0, 1.1, 1.2, 1.3].iter().map(|&v| rule.observe(v)).collect();
    assert_eq!(decisions.iter().position(|d| d.1), Some(7));
    assert_eq!(decisions.iter().filter(|d| d.0).count(), 3);
}

#[test]
fn training_keeps_best_epoch_weights() {
    let (spec, bags) = tiny_data(7, 3);
    let train_set = examples(&bags, &spec, true).unwrap();
    // The other category of each task as label: fitting the training labels
    // eventually raises this loss.
    let mut flipped: Vec<FeatureBag> = bags.clone();
    for b in &mut flipped {
        let task = &spec.tasks()[b.task_id];
        let cat = spec.resolve(b.task_id, &b.label_term).unwrap();
        b.label_term = task.categories[1 - cat].term.clone();
    }
    let val_set = examples(&flipped, &spec, true).unwrap();
    let cfg = TrainConfig {
        lr: 2e-2,
        patience: 2,
        epochs: 40,
        ..fast_cfg()
    };
    let mut model = tiny_model(&spec, 8);
    let out = train(&mut model, &train_set, &val_set, &cfg, |_, _| Ok(())).unwrap();
    assert!(out.stopped_early, "{:?}", out.history);
    assert_eq!(out.history.len(), out.best_epoch + 2);
    let best = out.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(best, out.best_val_loss);
    assert_eq!(model.params(), &out.best_params);
    assert_eq!(mean_loss(&model, &val_set).unwrap(), out.best_val_loss);
}

#[test]
fn run_dir_persists_history_and_best_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (spec, bags) = tiny_data(9, 3);
    let data = examples(&bags, &spec, true).unwrap();
    let run = RunDir::create(dir.path(), "{}").unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        ..fast_cfg()
    };
    let mut model = tiny_model(&spec, 10);
    let meta = spec.to_json();
    let out = train(&mut model, &data, &data, &cfg, |rec, m| run.record_epoch(rec, m, &meta)).unwrap();
    assert_eq!(run.history().unwrap(), out.history);
    for e in 1..=3 {
        assert!(dir.path().join(RunDir::epoch_checkpoint(e)).exists());
    }
    let best = run.load_best().unwrap();
    assert_eq!(TaskSpec::from_json(&best.metadata).unwrap(), spec);
    let restored = best.into_model().unwrap();
    assert_eq!(
        mean_loss(&restored, &data).unwrap().to_bits(),
        out.best_val_loss.to_bits()
    );
}

#[test]
fn headonly_examples_use_global_categories() {
    let (spec, bags) = tiny_data(11, 3);
    let data = examples(&bags, &spec, false).unwrap();
    let cats: std::collections::BTreeSet<_> = data
        .iter()
        .map(|e| match e.target {
            TargetSeq::Category(c) => c,
            TargetSeq::Tokens(_) => unreachable!(),
        })
        .collect();
    assert_eq!(cats.into_iter().collect::<Vec<_>>(), vec![0, 1, 2, 3]);
}

#[test]
fn invalid_config_lists_every_problem() {
    let cfg = TrainConfig {
        lr: 0.0,
        patience: 0,
        accumulate: 0,
        ..TrainConfig::default()
    };
    assert_eq!(cfg.problems().len(), 3);
}

#[test]
fn gradient_accumulation_changes_step_count_only() {
    let (spec, bags) = tiny_data(12, 3);
    let data = examples(&bags, &spec, true).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        accumulate: 4,
        optimizer: OptimizerKind::Adam,
        ..fast_cfg()
    };
    let mut model = tiny_model(&spec, 13);
    let out = train(&mut model, &data, &data, &cfg, |_, _| Ok(())).unwrap();
    assert!(out.history.iter().all(|r| r.train_loss.is_finite()));
}
