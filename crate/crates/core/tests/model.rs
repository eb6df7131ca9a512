use std::collections::BTreeMap;
use std::sync::Arc;

use fatigue_rec_core::data::{
    build_instances, generate_synthetic, prepare_splits, ItemCatalog, ItemSequence, Split, SplitRatios, SyntheticConfig, TrainingInstance,
};
use fatigue_rec_core::longterm::CrossMode;
use fatigue_rec_core::model::*;
use fatigue_rec_core::numerics::{Graph, ParamId, ParamKind, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        dim: 4,
        interests: 2,
        cross_layers: 2,
        kernel_width: 2,
        window: 3,
        conv_channels: vec![3, 2],
        score_hidden: vec![5, 4],
        ..ModelConfig::default()
    }
}

/// History of three items, target 4, negatives 5..8, eight-item catalog.
fn toy() -> (TrainingInstance, ItemCatalog) {
    let catalog = ItemCatalog::from_pairs((1..=8).map(|i| (i, i % 3)));
    let items = vec![1, 2, 3, 4];
    let seq = ItemSequence {
        user: 7,
        categories: items.iter().map(|i| i % 3).collect(),
        timestamps: vec![0, 60, 120, 180],
        items,
    };
    let inst = TrainingInstance {
        user: 7,
        sequence: Arc::new(seq),
        position: 3,
        negatives: vec![5, 6, 7, 8],
        split: Split::Train,
    };
    (inst, catalog)
}

fn corpus(users: usize, seed: u64) -> (Vec<TrainingInstance>, Vec<TrainingInstance>, ItemCatalog) {
    let cfg = SyntheticConfig {
        n_users: users,
        n_items: 60,
        n_categories: 6,
        steps_per_user: 80,
        seed,
        ..SyntheticConfig::default()
    };
    let log = generate_synthetic(&cfg).unwrap();
    let seqs = prepare_splits(&log, 2, 60, SplitRatios::default());
    let catalog = ItemCatalog::from_sequences(&seqs);
    let all = build_instances(&seqs, &catalog, seed).unwrap();
    let (train, rest): (Vec<_>, Vec<_>) = all.into_iter().partition(|i| i.split == Split::Train);
    let valid = rest.into_iter().filter(|i| i.split == Split::Valid).collect();
    (train, valid, catalog)
}

fn small_model_config() -> ModelConfig {
    ModelConfig {
        dim: 8,
        window: 6,
        conv_channels: vec![4, 4],
        score_hidden: vec![16, 8],
        ..ModelConfig::default()
    }
}

#[test]
fn score_examples() {
    assert_eq!(score(0.37, 0.0), 0.37);
    assert!((score(0.5, 1e3) + 0.5).abs() < 1e-12);
    assert!((score(0.2, 0.5) - (-0.262117)).abs() < 1e-6);
}

#[test]
fn score_decreases_in_fatigue() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let f: f64 = rand::Rng::gen_range(&mut rng, -3.0..3.0);
        let h = 1e-6;
        let slope = (score(0.3, f + h) - score(0.3, f - h)) / (2.0 * h);
        assert!(slope < 0.0);
        assert!((slope + (1.0 - f.tanh().powi(2))).abs() < 1e-6);
    }
}

#[test]
fn rec_loss_examples() {
    assert!((rec_loss(0.3, &[0.3; 4]).unwrap() - 5f64.ln()).abs() < 1e-12);
    assert!((rec_loss(1.0, &[0.0; 4]).unwrap() - 0.90483).abs() < 1e-5);
    assert!(rec_loss(800.0, &[0.0; 4]).unwrap() < 1e-300);
    assert!(rec_loss(f64::NAN, &[0.0; 4]).is_err());
}

#[test]
fn total_loss_examples() {
    assert!((total_loss(1.0, 2.0, 0.4).unwrap() - 1.8).abs() < 1e-15);
    assert_eq!(total_loss(1.3, 2.0, 0.0).unwrap(), 1.3);
    assert!(total_loss(1.0, 1.0, -0.1).is_err());
}

#[test]
fn toy_instance_is_finite_and_deterministic() {
    let (inst, catalog) = toy();
    let model = FRec::new(tiny_config(), catalog.len(), 3).unwrap();
    let a = forward_instance(&model, &inst, &catalog, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = forward_instance(&model, &inst, &catalog, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a, b);
    assert!(a.loss.is_finite());
    assert_eq!(a.y_negs.len(), 4);
    assert!((a.rec_loss - rec_loss(a.y_pos, &a.y_negs).unwrap()).abs() < 1e-12);
    assert!((a.loss - total_loss(a.rec_loss, a.con_loss, 0.4).unwrap()).abs() < 1e-12);
}

#[test]
fn single_item_history_runs() {
    let (mut inst, catalog) = toy();
    inst.position = 1;
    let model = FRec::new(tiny_config(), catalog.len(), 3).unwrap();
    let out = forward_instance(&model, &inst, &catalog, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(out.loss.is_finite());
}

#[test]
fn full_loss_gradient() {
    let (inst, catalog) = toy();
    for ablations in [Ablations::default(), Ablations::all()] {
        let config = ModelConfig {
            ablations,
            ..tiny_config()
        };
        let model = FRec::new(config, catalog.len(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let augment = (!ablations.no_cl).then_some(&mut rng as &mut dyn rand::RngCore);
        let ex = Example::new(&inst, &catalog, 3, augment).unwrap();
        let report = loss_gradient_check(&model, &[ex], 1e-6, None, 0).unwrap();
        assert!(report.max_rel_error <= 1e-4, "{ablations}: {report:?}");
        assert!(report.checked > 300);
    }
}

fn fatigue_params(model: &FRec) -> Vec<ParamId> {
    let store = &model.store;
    store
        .ids()
        .filter(|&id| {
            let name = store.name(id);
            ["row_cross", "col_cross", "mlp2", "conv"].iter().any(|p| name.starts_with(p))
        })
        .collect()
}

#[test]
fn ablation_isolation() {
    let (inst, catalog) = toy();
    let config = ModelConfig {
        alpha: 0.0,
        ..tiny_config()
    };
    let mut model = FRec::new(config, catalog.len(), 5).unwrap();
    model.row_cross.mode = CrossMode::Identity;
    model.col_cross.mode = CrossMode::Identity;
    model.fusion.uniform = true;
    for id in model.fru.v.unwrap() {
        let shape = model.store.get(id).shape();
        model.store.set(id, Tensor::zeros(shape[0], shape[1])).unwrap();
    }
    let ex = Example::new(&inst, &catalog, 3, Some(&mut ChaCha8Rng::seed_from_u64(6))).unwrap();
    let mut g = Graph::new();
    let out = model.forward_batch(&mut g, &[ex], Mode::Train).unwrap();
    let grads = g.backward(out.loss).unwrap();
    let ids = fatigue_params(&model);
    assert!(ids.len() >= 5);
    for id in ids {
        if let Some(t) = grads.param(id) {
            assert!(t.data().iter().all(|&v| v == 0.0), "{}", model.store.name(id));
        }
    }
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut store = ParamStore::new();
    let id = store.add("w", ParamKind::Weight, Tensor::from_vec(2, 2, vec![0.5, -1.0, 2.0, 0.0]).unwrap());
    let before = store.get(id).clone();
    let mut adam = Adam::new(0.1);
    let grads = BTreeMap::from([(id, Tensor::zeros(2, 2))]);
    for _ in 0..5 {
        adam.step(&mut store, &grads).unwrap();
    }
    assert_eq!(store.get(id), &before);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut store = ParamStore::new();
    let id = store.add("w", ParamKind::Weight, Tensor::row(vec![1.0, 1.0]));
    let mut adam = Adam::new(0.01);
    adam.step(&mut store, &BTreeMap::from([(id, Tensor::row(vec![3.0, -0.2]))])).unwrap();
    let v = store.get(id).data();
    assert!((v[0] - 0.99).abs() < 1e-9 && (v[1] - 1.01).abs() < 1e-9);
}

#[test]
fn l2_and_clipping() {
    let mut store = ParamStore::new();
    let w = store.add("w", ParamKind::Weight, Tensor::row(vec![2.0, -4.0]));
    let b = store.add("b", ParamKind::Bias, Tensor::row(vec![3.0]));
    let e = store.add("e", ParamKind::Embedding, Tensor::row(vec![5.0]));
    let mut grads = BTreeMap::from([(b, Tensor::row(vec![0.0]))]);
    add_l2(&store, &mut grads, 0.5);
    assert_eq!(grads[&w].data(), &[1.0, -2.0]);
    assert_eq!(grads[&b].data(), &[0.0]);
    assert!(!grads.contains_key(&e));
    let mut grads = BTreeMap::from([(w, Tensor::row(vec![3.0, 4.0]))]);
    assert_eq!(clip_global_norm(&mut grads, 1.0), 5.0);
    assert!((grads[&w].data()[0] - 0.6).abs() < 1e-15);
    assert_eq!(clip_global_norm(&mut grads, 10.0), 1.0);
    assert!((grads[&w].data()[1] - 0.8).abs() < 1e-15);
}

#[test]
fn descent_sanity() {
    let (inst, catalog) = toy();
    let cfg = TrainConfig {
        learning_rate: 1e-4,
        l2: 0.0,
        ..TrainConfig::default()
    };
    for seed in 0..20 {
        let mut model = FRec::new(tiny_config(), catalog.len(), seed).unwrap();
        let ex = Example::new(&inst, &catalog, 3, Some(&mut ChaCha8Rng::seed_from_u64(seed))).unwrap();
        let loss = |m: &FRec| {
            let mut g = Graph::new();
            let out = m.forward_batch(&mut g, std::slice::from_ref(&ex), Mode::Train).unwrap();
            g.value(out.loss).item().unwrap()
        };
        let before = loss(&model);
        train_step(&mut model, &mut Adam::new(cfg.learning_rate), std::slice::from_ref(&ex), &cfg, 1, 1).unwrap();
        let after = loss(&model);
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn early_stopping_rule() {
    let mut stop = EarlyStopping::default();
    let decisions: Vec<StopDecision> = [0.60, 0.61, 0.60, 0.59]
        .iter()
        .enumerate()
        .map(|(e, &g)| stop.observe(e + 1, g))
        .collect();
    assert_eq!(decisions.iter().map(|d| d.stop).collect::<Vec<_>>(), vec![false, false, false, true]);
    assert_eq!(stop.best, Some((2, 0.61)));

    let mut stop = EarlyStopping::default();
    let stops: Vec<bool> = [0.5, 0.49, 0.52, 0.51, 0.53].iter().enumerate().map(|(e, &g)| stop.observe(e + 1, g).stop).collect();
    assert!(stops.iter().all(|s| !s));
    assert_eq!(stop.best, Some((5, 0.53)));
}

#[test]
fn ablations_share_initialisation() {
    let full = FRec::new(small_model_config(), 30, 9).unwrap();
    let ablated = FRec::new(
        ModelConfig {
            ablations: Ablations::all(),
            ..small_model_config()
        },
        30,
        9,
    )
    .unwrap();
    let mut shared = 0;
    for id in ablated.store.ids() {
        let name = ablated.store.name(id);
        let other = full.store.id_of(name).unwrap();
        assert_eq!(ablated.store.get(id), full.store.get(other), "{name}");
        shared += 1;
    }
    assert!(full.store.id_of("fru.v_z").is_some() && ablated.store.id_of("fru.v_z").is_none());
    assert!(shared > 20);
}

#[test]
fn checkpoint_round_trip() {
    let (train_set, valid, catalog) = corpus(20, 1);
    let model = FRec::new(small_model_config(), catalog.len(), 2).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&model, &catalog, &mut bytes).unwrap();
    let (loaded, cat2) = read_checkpoint(bytes.as_slice()).unwrap();
    assert_eq!(cat2, catalog);
    assert_eq!(loaded.config, model.config);
    let a = score_instances(&model, &valid, &catalog, 16, false).unwrap();
    let b = score_instances(&loaded, &valid, &catalog, 16, false).unwrap();
    assert_eq!(a, b);
    let mut again = Vec::new();
    write_checkpoint(&loaded, &cat2, &mut again).unwrap();
    assert_eq!(bytes, again);
    assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    assert!(!train_set.is_empty());
}

#[test]
fn eval_scores_use_running_statistics() {
    let (_, valid, catalog) = corpus(20, 3);
    let model = FRec::new(small_model_config(), catalog.len(), 2).unwrap();
    let all = score_instances(&model, &valid, &catalog, 64, false).unwrap();
    let one_by_one = score_instances(&model, &valid, &catalog, 1, false).unwrap();
    for (a, b) in all.iter().zip(&one_by_one) {
        assert!((a.positive - b.positive).abs() < 1e-12);
    }
}

fn fixed_batch_loss(model: &FRec, batch: &[Example]) -> f64 {
    let mut g = Graph::new();
    let out = model.forward_batch(&mut g, batch, Mode::Train).unwrap();
    g.value(out.loss).item().unwrap()
}

#[test]
fn training_reduces_loss() {
    let (train_set, _, catalog) = corpus(200, 11);
    assert!(train_set.len() > 6000, "{}", train_set.len());
    let mut model = FRec::new(small_model_config(), catalog.len(), 4).unwrap();
    let probe: Vec<&TrainingInstance> = train_set.iter().step_by(train_set.len() / 256).collect();
    let probe = training_examples(&model, &probe, &catalog, 99, 0).unwrap();
    let initial = fixed_batch_loss(&model, &probe);
    let cfg = TrainConfig {
        batch_size: 32,
        ..TrainConfig::default()
    };
    let mut adam = Adam::new(cfg.learning_rate);
    for step in 0..200 {
        let batch: Vec<&TrainingInstance> = (0..32).map(|i| &train_set[(step * 32 + i) % train_set.len()]).collect();
        let examples = training_examples(&model, &batch, &catalog, 1, 1).unwrap();
        train_step(&mut model, &mut adam, &examples, &cfg, 1, step).unwrap();
    }
    let last = fixed_batch_loss(&model, &probe);
    assert!(last < initial, "{initial} -> {last}");
}

#[test]
fn training_is_deterministic_and_keeps_best_epoch() {
    let (train_set, valid, catalog) = corpus(40, 5);
    let cfg = TrainConfig {
        batch_size: 64,
        max_epochs: 3,
        seed: 8,
        ..TrainConfig::default()
    };
    let run = || {
        let mut model = FRec::new(small_model_config(), catalog.len(), 1).unwrap();
        let mut history = Vec::new();
        let outcome = train(&mut model, &train_set, &valid, &catalog, &cfg, |r| {
            history.push(r.clone());
            Ok(())
        })
        .unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&model, &catalog, &mut bytes).unwrap();
        (outcome, history, bytes, model)
    };
    let (o1, h1, b1, model) = run();
    let (o2, h2, b2, _) = run();
    assert_eq!(o1, o2);
    assert_eq!(h1, h2);
    assert_eq!(b1, b2);
    let epochs: Vec<&HistoryRecord> = h1.iter().filter(|r| r.kind == RecordKind::Epoch).collect();
    assert_eq!(epochs.len(), o1.epochs_run);
    let best = epochs.iter().map(|r| r.valid_gauc.unwrap()).fold(f64::MIN, f64::max);
    assert_eq!(best, o1.best_gauc);
    let scored = score_instances(&model, &valid, &catalog, cfg.eval_batch_size, false).unwrap();
    let gauc = fatigue_rec_core::eval::evaluate(&scored).unwrap().gauc;
    assert!((gauc - o1.best_gauc).abs() < 1e-12);
    assert!(h1.iter().all(|r| r.con_weight == 0.4));
}

#[test]
fn no_cl_logs_zero_contrastive_weight() {
    let (train_set, valid, catalog) = corpus(15, 6);
    let config = ModelConfig {
        ablations: "no_cl".parse().unwrap(),
        ..small_model_config()
    };
    let mut model = FRec::new(config, catalog.len(), 1).unwrap();
    let cfg = TrainConfig {
        batch_size: 64,
        max_epochs: 1,
        ..TrainConfig::default()
    };
    let mut history = Vec::new();
    train(&mut model, &train_set, &valid, &catalog, &cfg, |r| {
        history.push(r.clone());
        Ok(())
    })
    .unwrap();
    assert!(history.iter().all(|r| r.con_weight == 0.0 && r.con_loss == 0.0 && r.loss == r.rec_loss));
}

#[test]
fn rejects_empty_splits() {
    let (train_set, _, catalog) = corpus(10, 7);
    let mut model = FRec::new(small_model_config(), catalog.len(), 1).unwrap();
    assert!(train(&mut model, &train_set, &[], &catalog, &TrainConfig::default(), |_| Ok(())).is_err());
}

