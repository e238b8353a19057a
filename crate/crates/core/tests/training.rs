use std::collections::BTreeMap;

use crossrecon::autodiff::Graph;
use crossrecon::data::{sample_seed, Sample, SceneSpec};
use crossrecon::model::{forward_infer, model_param_specs, Batch, ModelConfig};
use crossrecon::params::{Binder, ParamStore};
use crossrecon::tensor::Tensor;
use crossrecon::train::ablation::{grid, parse_axes, run_cells, Axis, Splits, Variant};
use crossrecon::train::{
    evaluate_samples, infer_pixels, init_checkpoint, train_on, Adam, Checkpoint, RunConfig,
    Schedule, LAST_GOOD_DIR,
};
use crossrecon::Error;

fn samples(n: usize, offset: u64) -> Vec<Sample> {
    (0..n as u64)
        .map(|i| Sample::from_scene(format!("{i:05}"), &SceneSpec::generate(sample_seed(7, offset + i))))
        .collect()
}

fn tiny_run() -> RunConfig {
    RunConfig {
        epochs: 2,
        batch_size: 8,
        learning_rate: 1e-3,
        recon_layers: 1,
        ..RunConfig::default()
    }
}

#[test]
fn adam_first_step_moves_by_the_learning_rate() {
    let mut store = ParamStore::<f32>::new();
    store.insert("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
    let mut adam = Adam::for_store(&store);
    let grads = BTreeMap::from([("w".to_string(), Tensor::new(&[3], vec![0.5, -4.0, 0.0]).unwrap())]);
    adam.update(&mut store, &grads, 0.1).unwrap();
    // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε)
    let w = store.get("w").unwrap().data().to_vec();
    let expect = [1.0 - 0.1 * 0.5 / (0.5 + 1e-8), -2.0 + 0.1 * 4.0 / (4.0 + 1e-8), 0.5];
    for (a, b) in w.iter().zip(expect) {
        assert!((*a as f64 - b).abs() < 1e-6, "{w:?}");
    }
    let (m, v) = adam.moments("w").unwrap();
    assert!((m[1] + 0.4).abs() < 1e-6 && (v[1] - 0.016).abs() < 1e-6);
}

#[test]
fn cosine_schedule_endpoints() {
    let run = RunConfig::default();
    let total = 3751;
    assert_eq!(run.lr_at(0, total), run.learning_rate);
    assert!(run.lr_at(total - 1, total) <= 1e-9 * run.learning_rate);
    assert!((run.lr_at((total - 1) / 2, total) - 0.5 * run.learning_rate).abs() < 1e-12);
    let constant = RunConfig {
        schedule: Schedule::Constant,
        ..run
    };
    assert_eq!(constant.lr_at(total - 1, total), constant.learning_rate);
}

#[test]
fn run_config_json() {
    let cfg = RunConfig::default();
    assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    let partial = RunConfig::from_json(r#"{"epochs": 3, "mask_strategy": "random"}"#).unwrap();
    assert_eq!(partial.epochs, 3);
    assert!(matches!(
        RunConfig::from_json(r#"{"epochs": 3, "warmup": 10}"#),
        Err(Error::Json(_))
    ));
    assert!(matches!(RunConfig::from_json(r#"{"tau": 0}"#), Err(Error::Config(_))));
    assert!(RunConfig::from_json(r#"{"lambda": [1, 1, 0.2]}"#).is_err());
    let attention = RunConfig::from_json(r#"{"attention": "self"}"#).unwrap();
    assert_eq!(attention.attention, crossrecon::interaction::AttentionKind::SelfAttention);
}

fn probe_logits(ck: &Checkpoint, probe: &[Sample]) -> Vec<f32> {
    let refs: Vec<&Sample> = probe.iter().collect();
    let b = Batch::<f32>::from_samples(&refs, &ck.vocab, &ck.model).unwrap();
    let g = Graph::new();
    let p = Binder::frozen(&g, &ck.params);
    let out = forward_infer(&p, &ck.model, ck.run.attention, &b.images, &b.tokens, false).unwrap();
    g.value(out.logits).data().to_vec()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = samples(16, 0);
    let summary = train_on(&ModelConfig::default(), &tiny_run(), &data[..12], &data[12..], None).unwrap();
    let ck = summary.best;
    ck.save(dir.path()).unwrap();
    let loaded = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(loaded, ck);
    assert!(loaded.optimizer.step > 0);
    assert_eq!(probe_logits(&loaded, &data[..4]), probe_logits(&ck, &data[..4]));

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    let params = manifest["params"].as_array().unwrap();
    assert_eq!(params.len(), ck.params.len());
    assert!(params.iter().all(|p| p["offset"].as_u64().unwrap() % 4 == 0));
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ck = init_checkpoint(&ModelConfig::default(), &tiny_run()).unwrap();
    ck.save(dir.path()).unwrap();
    let payload = dir.path().join("params.bin");
    let mut bytes = std::fs::read(&payload).unwrap();
    bytes.truncate(bytes.len() - 4);
    std::fs::write(&payload, bytes).unwrap();
    assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Config(_))));
    assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn identical_seeds_give_identical_runs() {
    let data = samples(20, 100);
    let run = || train_on(&ModelConfig::default(), &tiny_run(), &data[..16], &data[16..], None).unwrap();
    let (a, b) = (run(), run());
    let losses = |s: &crossrecon::train::TrainSummary| -> Vec<f64> {
        s.history.iter().flat_map(|h| [h.loss, h.l_v2t, h.l_t2v, h.l_ccl, h.l_dice, h.l_ce]).collect()
    };
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(a.best.params, b.best.params);
    let other = train_on(
        &ModelConfig::default(),
        &RunConfig {
            master_seed: 1,
            ..tiny_run()
        },
        &data[..16],
        &data[16..],
        None,
    )
    .unwrap();
    assert_ne!(losses(&a), losses(&other));
}

#[test]
fn training_writes_log_and_best_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = samples(20, 200);
    let s = train_on(&ModelConfig::default(), &tiny_run(), &data[..16], &data[16..], Some(dir.path())).unwrap();
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,lr,loss,l_v2t,l_t2v,l_ccl,l_dice,l_ce,val_dice,val_miou,val_dice_fg,val_miou_fg,seconds"
    );
    assert_eq!(lines.count(), 2);
    let best = Checkpoint::load(&dir.path().join("best")).unwrap();
    assert_eq!(best.epoch, s.best_epoch);
    let best_miou = s.history.iter().map(|h| h.val_miou).fold(f64::MIN, f64::max);
    assert_eq!(s.history[s.best_epoch - 1].val_miou, best_miou);
}

#[test]
fn divergence_aborts_and_keeps_last_good_state() {
    let dir = tempfile::tempdir().unwrap();
    let data = samples(20, 300);
    let run = RunConfig {
        learning_rate: 1e30,
        schedule: Schedule::Constant,
        ..tiny_run()
    };
    let err = train_on(&ModelConfig::default(), &run, &data[..16], &data[16..], Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
    let last = Checkpoint::load(&dir.path().join(LAST_GOOD_DIR)).unwrap();
    assert!(last.params.iter().all(|(_, t)| t.all_finite()));
}

#[test]
fn evaluation_is_deterministic_and_untrained_model_is_near_chance() {
    let data = samples(24, 400);
    let ck = init_checkpoint(&ModelConfig::default(), &RunConfig::default()).unwrap();
    let a = evaluate_samples(&ck, &data).unwrap();
    assert_eq!(a, evaluate_samples(&ck, &data).unwrap());
    assert!(a.miou_fg < 0.2, "{}", a.miou_fg);
    assert_eq!(a.per_sample.len(), 24);
}

#[test]
fn inference_flags_unknown_prompts_and_emits_heatmaps() {
    let ck = init_checkpoint(&ModelConfig::default(), &RunConfig::default()).unwrap();
    let scene = SceneSpec::generate(5);
    let px = scene.render();
    let ok = infer_pixels(&ck, &px, &scene.prompt, true).unwrap();
    assert!(ok.warning.is_none());
    assert_eq!(ok.mask.len(), 64 * 64);
    let poi = ok.w_poi.as_ref().unwrap();
    assert_eq!(poi.shape(), &[8, 8]);
    assert!((poi.data().iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs() < 1e-5);
    let woi = ok.w_woi.as_ref().unwrap();
    assert!((woi.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs() < 1e-5);

    let odd = infer_pixels(&ck, &px, "zzz qqq circle", false).unwrap();
    assert!(odd.warning.is_some() && odd.w_poi.is_none());
    let empty = infer_pixels(&ck, &px, "", false).unwrap();
    assert!(empty.warning.is_some());
    assert!(infer_pixels(&ck, &px[..100], "circle", false).is_err());

    let dir = tempfile::tempdir().unwrap();
    ok.save_mask(&dir.path().join("m.png")).unwrap();
    assert!(ok.save_heatmap(&dir.path().join("h.png")).unwrap().is_some());
    let heat = image::open(dir.path().join("h.png")).unwrap().to_luma8();
    assert_eq!((heat.width(), heat.height()), (8, 8));
    assert_eq!(*heat.iter().max().unwrap(), 255);
}

#[test]
fn ablation_grid_shapes() {
    let base = tiny_run();
    let cells = grid(&base, &parse_axes("cvr,clr").unwrap()).unwrap();
    let labels: Vec<_> = cells.iter().map(|c| c.label.as_str()).collect();
    assert_eq!(
        labels,
        ["cvr=on clr=on", "cvr=on clr=off", "cvr=off clr=on", "cvr=off clr=off"]
    );
    assert!(!cells[3].config.use_cvr && !cells[3].config.use_clr);
    assert_eq!(grid(&base, &[Axis::Mask, Axis::AlphaV(vec![0.1, 0.3, 0.5])]).unwrap().len(), 6);
    assert_eq!(grid(&base, &[Axis::Variant]).unwrap().len(), Variant::ALL.len());
    assert!(parse_axes("cvr,bogus").is_err());
    assert!(parse_axes("alpha_v:x").is_err());
    assert!(grid(&base, &[Axis::AlphaT(vec![1.5])]).is_err());

    let data = samples(14, 500);
    let split = Splits {
        train: &data[..8],
        val: &data[8..11],
        test: &data[11..],
    };
    let mask_cells = grid(&RunConfig { epochs: 1, ..base }, &[Axis::Mask]).unwrap();
    let rows = run_cells(&ModelConfig::default(), &mask_cells, 3, &split).unwrap();
    assert_eq!(rows.len(), 2 * 3);
    assert_eq!(rows.iter().map(|r| r.seed).collect::<Vec<_>>(), [0, 1, 2, 0, 1, 2]);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.test_miou)));
}

#[test]
fn every_parameter_is_saved() {
    let cfg = ModelConfig::default();
    let ck = init_checkpoint(&cfg, &RunConfig::default()).unwrap();
    assert_eq!(ck.params.len(), model_param_specs(&cfg, 3).len());
}
