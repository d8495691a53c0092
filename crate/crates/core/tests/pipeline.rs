//! End-to-end behavior of the training loop on the synthetic dataset:
//! descent, determinism, freezing, abort diagnostics, checkpoint round-trips
//! and resume.

use reid_core::autodiff::Tape;
use reid_core::checkpoint::{load_checkpoint, restore_model, restore_optimizer, save_checkpoint};
use reid_core::data::{synth_dataset, PkBatchSpec, PkSampler, SynthSpec};
use reid_core::evaluation::EvalOptions;
use reid_core::losses::{id_loss, total_loss, triplet_loss_batch_hard, BranchLossTerms};
use reid_core::model::{ModelConfig, RegConfig, ReidModel};
use reid_core::nn::Session;
use reid_core::training::{
    evaluate_splits, fit, load_training_batch, train_step, Adam, FitConfig, LossConfig,
    OptimConfig, TrainAbort,
};
use reid_core::types::{BranchId, Split};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn quick_fit_config(epochs: usize, max_steps: u64) -> FitConfig {
    FitConfig {
        optim: OptimConfig { epochs, ..OptimConfig::default() },
        batch: PkBatchSpec { p: 4, k: 4 },
        augment: None,
        max_steps,
        ..FitConfig::default()
    }
}

fn setup(branches: &[BranchId]) -> (ReidModel, reid_core::data::Dataset, reid_core::data::MemoryProvider) {
    let (dataset, provider) = synth_dataset(&SynthSpec::default()).unwrap();
    let model = ReidModel::new(&ModelConfig::tiny(branches), 8).unwrap();
    (model, dataset, provider)
}

#[test]
fn loss_descends_within_fifty_steps() {
    let (mut model, dataset, provider) = setup(&[BranchId::Local, BranchId::Global]);
    let sampler = PkSampler::new(&dataset, PkBatchSpec { p: 4, k: 4 }).unwrap();
    let losses = LossConfig::default();
    let mut opt = Adam::new(&OptimConfig::default());
    opt.lr = 1e-3;
    let mut first = None;
    let mut last = 0.0;
    let mut step = 0;
    'outer: for epoch in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch);
        for batch in sampler.epoch_batches(&dataset, &mut rng) {
            let images = load_training_batch(&dataset, &provider, &batch, None, &mut rng).unwrap();
            let breakdown = train_step(
                &mut model,
                &images,
                &batch.labels,
                &losses,
                &RegConfig::default(),
                &mut opt,
                &mut rng,
            )
            .unwrap();
            first.get_or_insert(breakdown.total);
            last = breakdown.total;
            step += 1;
            if step == 50 {
                break 'outer;
            }
        }
    }
    let first = first.unwrap();
    assert!(last < first, "loss after 50 steps ({last}) must undercut step 1 ({first})");
}

#[test]
fn identical_seeds_produce_identical_parameter_deltas() {
    let run = || {
        let (mut model, dataset, provider) = setup(&[BranchId::Local, BranchId::Gcp]);
        let sampler = PkSampler::new(&dataset, PkBatchSpec { p: 4, k: 4 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let batch = &sampler.epoch_batches(&dataset, &mut rng)[0];
        let images = load_training_batch(&dataset, &provider, batch, None, &mut rng).unwrap();
        let mut opt = Adam::new(&OptimConfig::default());
        let mut reg_rng = ChaCha8Rng::seed_from_u64(7);
        train_step(
            &mut model,
            &images,
            &batch.labels,
            &LossConfig::default(),
            &RegConfig::default(),
            &mut opt,
            &mut reg_rng,
        )
        .unwrap();
        model
    };
    let a = run();
    let b = run();
    for ((_, name, va, _), (_, _, vb, _)) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(va, vb, "parameter {name} diverged between identical runs");
    }
}

#[test]
fn frozen_trunk_with_id_only_loss_leaves_trunk_and_centers_untouched() {
    let (mut model, dataset, provider) = setup(&[BranchId::Local, BranchId::Global]);
    let params: Vec<_> = model.store.iter().map(|(p, n, _, _)| (p, n.to_string())).collect();
    for (p, name) in &params {
        if name.starts_with("trunk.") {
            model.store.set_trainable(*p, false);
        }
    }
    let before: Vec<_> = model.store.iter().map(|(_, n, v, _)| (n.to_string(), v.clone())).collect();

    let sampler = PkSampler::new(&dataset, PkBatchSpec { p: 4, k: 4 }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = &sampler.epoch_batches(&dataset, &mut rng)[0];
    let images = load_training_batch(&dataset, &provider, batch, None, &mut rng).unwrap();
    let mut losses = LossConfig::default();
    losses.weights.triplet = 0.0;
    losses.weights.center = 0.0;
    let mut opt = Adam::new(&OptimConfig::default());
    train_step(
        &mut model,
        &images,
        &batch.labels,
        &losses,
        &RegConfig::default(),
        &mut opt,
        &mut rng,
    )
    .unwrap();

    let mut heads_changed = false;
    let mut tails_changed = false;
    for ((name, old), (_, _, new, _)) in before.iter().zip(model.store.iter()) {
        // Frozen weights stay put; BN running stats are buffers and may
        // still track batch statistics.
        if (name.starts_with("trunk.") && !name.contains("running_"))
            || name.starts_with("centers.")
        {
            assert_eq!(old, new, "{name} must not move");
        } else if name.starts_with("head.") && old != new {
            heads_changed = true;
        } else if name.starts_with("tail.") && old != new {
            tails_changed = true;
        }
    }
    assert!(heads_changed && tails_changed, "heads and branch tails must update");
}

#[test]
fn non_finite_loss_aborts_naming_the_component() {
    let (mut model, dataset, provider) = setup(&[BranchId::Local, BranchId::Global]);
    // Poison the global head so only its ID loss blows up.
    let weight = model.heads[&BranchId::Global].linear.weight;
    model.store.value_mut(weight)[[0, 0]] = f64::NAN;

    let sampler = PkSampler::new(&dataset, PkBatchSpec { p: 4, k: 4 }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = &sampler.epoch_batches(&dataset, &mut rng)[0];
    let images = load_training_batch(&dataset, &provider, batch, None, &mut rng).unwrap();
    let err = train_step(
        &mut model,
        &images,
        &batch.labels,
        &LossConfig::default(),
        &RegConfig::default(),
        &mut Adam::new(&OptimConfig::default()),
        &mut rng,
    )
    .unwrap_err();
    let abort = err.downcast_ref::<TrainAbort>().expect("abort carries a typed diagnostic");
    assert_eq!(abort.component, "global.id");
}

#[test]
fn every_trainable_parameter_receives_gradient() {
    let (model, dataset, provider) = setup(&BranchId::ALL);
    let sampler = PkSampler::new(&dataset, PkBatchSpec { p: 4, k: 4 }).unwrap();
    let losses = LossConfig::default();

    let mut touched: std::collections::HashSet<String> = std::collections::HashSet::new();
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = &sampler.epoch_batches(&dataset, &mut rng)[0];
        let images = load_training_batch(&dataset, &provider, batch, None, &mut rng).unwrap();
        let tape = Tape::new();
        let sess = Session::new(&tape, &model.store, true);
        let out = model
            .forward(&sess, &images, &RegConfig::default(), Some(&mut rng))
            .unwrap();
        let mut parts = Vec::new();
        for bf in &out.branches {
            parts.push(BranchLossTerms {
                branch: bf.branch,
                id: Some(id_loss(&sess, bf.clf_input, &batch.labels, &model.heads[&bf.branch]).unwrap()),
                triplet: Some(
                    triplet_loss_batch_hard(bf.embedding, &batch.labels, &losses.triplet).unwrap(),
                ),
                center: None,
            });
        }
        let (total, _) = total_loss(&parts, &losses.weights).unwrap();
        let grads = tape.backward(total);
        let (bindings, _) = sess.finish();
        for (param, node) in bindings {
            if let Some(g) = grads.get_by_id(node) {
                if g.iter().any(|&v| v != 0.0) {
                    touched.insert(model.store.name(param).to_string());
                }
            }
        }
    }
    for (_, name, _, trainable) in model.store.iter() {
        if trainable {
            assert!(
                touched.contains(name),
                "trainable parameter {name} never received a nonzero gradient"
            );
        }
    }
}

#[test]
fn checkpoint_roundtrip_reproduces_metrics_exactly() {
    let (mut model, dataset, provider) = setup(&[BranchId::Local, BranchId::Gcp]);
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_fit_config(2, 0);
    fit(&mut model, &dataset, &provider, &cfg, None, 1).unwrap();
    let metrics = evaluate_splits(&model, &dataset, &provider, &EvalOptions::default()).unwrap();

    let path = tmp.path().join("model.ckpt");
    save_checkpoint(&path, &model, None, 2).unwrap();
    let mut fresh = ReidModel::new(&ModelConfig::tiny(&[BranchId::Local, BranchId::Gcp]), 8).unwrap();
    restore_model(&mut fresh, &load_checkpoint(&path).unwrap()).unwrap();
    let again = evaluate_splits(&fresh, &dataset, &provider, &EvalOptions::default()).unwrap();
    assert_eq!(metrics.map, again.map);
    assert_eq!(metrics.cmc, again.cmc);
}

#[test]
fn fit_writes_logs_and_resumes_on_schedule() {
    let (mut model, dataset, provider) = setup(&[BranchId::Local, BranchId::Global]);
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = quick_fit_config(2, 0);
    cfg.checkpoint_every = 1;
    let report = fit(&mut model, &dataset, &provider, &cfg, Some(tmp.path()), 1).unwrap();
    assert_eq!(report.epochs_run, 2);
    assert_eq!(report.steps, 4, "8 ids / P=4 gives 2 batches per epoch");

    // One JSON line per step carrying every loss component.
    let log = std::fs::read_to_string(tmp.path().join("log.jsonl")).unwrap();
    let step_lines: Vec<serde_json::Value> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .filter(|v: &serde_json::Value| v.get("step").is_some())
        .collect();
    assert_eq!(step_lines.len(), 4);
    for line in &step_lines {
        assert!(line.get("total").is_some());
        let branches = line["per_branch"].as_array().unwrap();
        assert_eq!(branches.len(), 2);
        for b in branches {
            for key in ["id", "triplet", "center"] {
                assert!(b.get(key).is_some(), "missing {key} in {b}");
            }
        }
    }

    // Resume from the last checkpoint: schedule must match a fresh run.
    let last = tmp.path().join("checkpoints").join("last.ckpt");
    let data = load_checkpoint(&last).unwrap();
    assert_eq!(data.epoch, 2);
    let mut resumed = ReidModel::new(&ModelConfig::tiny(&[BranchId::Local, BranchId::Global]), 8).unwrap();
    restore_model(&mut resumed, &data).unwrap();
    let mut opt = Adam::new(&cfg.optim);
    restore_optimizer(&mut opt, &data);
    assert_eq!(opt.step_count, 4);

    let mut cfg2 = quick_fit_config(3, 0);
    cfg2.checkpoint_every = 1;
    let sampler = PkSampler::new(&dataset, cfg2.batch).unwrap();
    let mut opt_holder = Some(opt);
    let report = reid_core::training::fit_with_optimizer(
        &mut resumed,
        &dataset,
        &provider,
        &cfg2,
        None,
        data.epoch + 1,
        &sampler,
        &mut opt_holder,
    )
    .unwrap();
    assert_eq!(report.epochs_run, 3);
    let expected_lr = reid_core::training::lr_at(3, &cfg2.optim).unwrap();
    assert_eq!(opt_holder.unwrap().lr, expected_lr, "resumed run follows the pure schedule");
}

#[test]
fn eval_mode_retrieval_is_deterministic() {
    let (model, dataset, provider) = setup(&BranchId::ALL);
    let a = evaluate_splits(&model, &dataset, &provider, &EvalOptions::default()).unwrap();
    let b = evaluate_splits(&model, &dataset, &provider, &EvalOptions::default()).unwrap();
    assert_eq!(a.map, b.map);
    assert_eq!(a.cmc, b.cmc);
    assert_eq!(dataset.split(Split::Query).count(), a.num_query);
}
