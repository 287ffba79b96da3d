use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use tempfile::TempDir;

use petl_core::checkpoint::load_checkpoint;
use petl_core::data::{export_toy_dataset, synthesize_toy_dataset, Split, ToyDatasetConfig};
use petl_core::petl::{PetlStrategy, StrategyKind};
use petl_core::retrieval::evaluate_retrieval;
use petl_core::runner::{
    build_model, emit_report, export_checkpoint_embeddings, lr_schedule, prepare_data, run_benchmark, run_single,
    train, train_on, DatasetSource, RunConfig, ScheduleConfig,
};
use petl_core::PetlError;

fn quick(strategy: PetlStrategy, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::toy(strategy);
    cfg.epochs = epochs;
    cfg
}

#[test]
fn zero_shot_takes_no_steps_and_reports_the_frozen_model() {
    let cfg = quick(PetlStrategy::zero_shot(), 5);
    let data = prepare_data(&cfg, cfg.seed).unwrap();
    let run = train_on(&cfg, &data, cfg.seed).unwrap();
    let r = &run.result;
    assert_eq!((r.steps, r.best_epoch, r.params.trainable), (0, 0, 0));
    assert!(r.loss_curve.is_empty() && r.val_curve.is_empty());
    assert_eq!(r.test, r.initial_test);
    let frozen = build_model(&cfg, cfg.seed).unwrap();
    assert_eq!(evaluate_retrieval(&frozen, &data.test).unwrap(), r.test);
}

#[test]
fn lr_curve_follows_schedule_and_max_steps_stops_early() {
    let mut cfg = quick(PetlStrategy::linear_probe(), 4);
    cfg.schedule = ScheduleConfig {
        decay_factor: 0.5,
        decay_every: 2,
    };
    let r = train(&cfg).unwrap();
    let lr = cfg.optimizer.lr;
    assert_eq!(r.lr_curve, vec![lr, lr, lr * 0.5, lr * 0.5]);
    assert_eq!(r.loss_curve.len(), 4);
    assert_eq!(r.val_curve.len(), 4);
    assert_eq!(r.steps, 4 * (160 / 16));
    for e in 0..4 {
        assert_eq!(lr_schedule(e, lr, &cfg.schedule), r.lr_curve[e]);
    }

    cfg.max_steps = Some(15);
    let r = train(&cfg).unwrap();
    assert_eq!(r.steps, 15);
    assert_eq!(r.loss_curve.len(), 2);
}

#[test]
fn best_checkpoint_is_reported_and_backbone_stays_frozen() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(PetlStrategy::mrs_adapter(16, 8), 3);
    cfg.output_dir = dir.path().join("run");
    cfg.export_embeddings = true;
    let art = run_single(&cfg).unwrap();
    let ckpt = load_checkpoint(&art.checkpoint).unwrap();
    let data = prepare_data(&cfg, cfg.seed).unwrap();
    assert_eq!(evaluate_retrieval(&ckpt.model, &data.test).unwrap(), art.result.test);
    assert_eq!(ckpt.vocab.as_ref(), Some(&data.vocab));

    let init = build_model(&cfg, cfg.seed).unwrap();
    let mut adapter_moved = false;
    for (name, p) in ckpt.model.params().iter() {
        let before = &init.params().get(name).unwrap().value;
        if name.starts_with("petl.") {
            assert!(p.trainable);
            adapter_moved |= p.value != *before;
        } else {
            assert!(!p.trainable);
            assert_eq!(p.value, *before, "{name} moved");
        }
    }
    assert_eq!(adapter_moved, art.result.best_epoch > 0);

    let emb = cfg.output_dir.join("embeddings");
    let mut images = 0;
    let mut captions = 0;
    for split in ["train", "val", "test"] {
        let v: Array2<f64> = ndarray_npy::read_npy(emb.join(format!("{split}_images.npy"))).unwrap();
        let t: Array2<f64> = ndarray_npy::read_npy(emb.join(format!("{split}_captions.npy"))).unwrap();
        let idx: Array1<i64> = ndarray_npy::read_npy(emb.join(format!("{split}_caption_to_image.npy"))).unwrap();
        assert_eq!((v.ncols(), t.ncols()), (16, 16));
        assert_eq!(idx.len(), t.nrows());
        images += v.nrows();
        captions += t.nrows();
    }
    assert_eq!((images, captions), (200, 1000));
}

#[test]
fn rerunning_versions_previous_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(PetlStrategy::linear_probe(), 1);
    cfg.output_dir = dir.path().to_path_buf();
    run_single(&cfg).unwrap();
    run_single(&cfg).unwrap();
    for name in [
        "results.csv",
        "results.v1.csv",
        "run_result.json",
        "run_result.v1.json",
        "best.safetensors",
        "best.v1.safetensors",
    ] {
        assert!(dir.path().join(name).is_file(), "{name} missing");
    }
}

#[test]
fn checkpoint_embeddings_export_one_split() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(PetlStrategy::linear_probe(), 1);
    cfg.output_dir = dir.path().join("run");
    let art = run_single(&cfg).unwrap();
    let out = dir.path().join("emb");
    let files = export_checkpoint_embeddings(&art.checkpoint, Split::Test, &out).unwrap();
    assert_eq!(files.len(), 3);
    let v: Array2<f64> = ndarray_npy::read_npy(out.join("test_images.npy")).unwrap();
    let t: Array2<f64> = ndarray_npy::read_npy(out.join("test_captions.npy")).unwrap();
    assert_eq!((v.dim(), t.dim()), ((20, 16), (100, 16)));
    for row in v.rows() {
        assert!((row.dot(&row) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn benchmark_averages_folds_and_reports_rows() {
    let mut zs = quick(PetlStrategy::zero_shot(), 1);
    zs.k_folds = 2;
    let mut mrs = quick(PetlStrategy::mrs_adapter(16, 8), 6);
    mrs.k_folds = 2;
    let table = run_benchmark(&[zs, mrs]).unwrap();
    assert!(table.failures.is_empty());
    assert_eq!(table.rows.len(), 2);
    let (z, m) = (&table.rows[0], &table.rows[1]);
    assert_eq!(
        (z.strategy, m.strategy),
        (StrategyKind::ZeroShot, StrategyKind::MrsAdapter)
    );
    assert_eq!(m.folds, 2);
    assert_ne!(m.runs[0].seed, m.runs[1].seed);
    let mean = (m.runs[0].test.mr + m.runs[1].test.mr) / 2.0;
    assert!((m.metrics.mr - mean).abs() < 1e-12);
    assert!(
        m.metrics.mr > z.metrics.mr + 10.0,
        "{} vs {}",
        m.metrics.mr,
        z.metrics.mr
    );

    let dir = tempfile::tempdir().unwrap();
    emit_report(&table, &[], dir.path()).unwrap();
    let csv = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0].split(',').count(), 10);
    assert!(lines[2].starts_with("mrs_adapter,"));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("results.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 2);
    assert_eq!(json["rows"][1]["metrics"]["params_trainable"], 1664);
    assert!(dir.path().join("params_vs_mr.csv").is_file());
}

fn broken_manifest_config(dir: &TempDir) -> RunConfig {
    let mut cfg = quick(PetlStrategy::linear_probe(), 1);
    cfg.label = Some("broken".into());
    cfg.dataset = DatasetSource::Manifest {
        path: dir.path().join("absent.json"),
        vocab: None,
        normalization: None,
    };
    cfg
}

#[test]
fn benchmark_records_failures_without_aborting() {
    let dir = tempfile::tempdir().unwrap();
    let table = run_benchmark(&[broken_manifest_config(&dir), quick(PetlStrategy::zero_shot(), 1)]).unwrap();
    assert_eq!(table.rows.len(), 1);
    assert_eq!(table.failures.len(), 1);
    assert_eq!(table.failures[0].label, "broken");
    let out = dir.path().join("report");
    emit_report(&table, &[], &out).unwrap();
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("results.json")).unwrap()).unwrap();
    assert_eq!(json["failures"][0]["label"], "broken");
}

#[test]
fn manifest_dataset_prepares_like_the_in_memory_one() {
    let dir = tempfile::tempdir().unwrap();
    let toy = ToyDatasetConfig::default();
    let manifest = export_toy_dataset(&synthesize_toy_dataset(&toy).unwrap(), &dir.path().join("toy")).unwrap();
    let text = r#"
epochs = 2
[encoder]
image_size = 16
patch_size = 4
layers = 2
vision_width = 32
text_width = 24
vision_heads = 2
text_heads = 2
embed_dim = 16
context_length = 16
vocab_size = 64
init_std = 0.2
[strategy]
kind = "linear_probe"
[dataset]
kind = "manifest"
path = "toy/manifest.json"
vocab = "toy/vocab.json"
normalization = { mean = [0.0, 0.0, 0.0], std = [1.0, 1.0, 1.0] }
"#;
    let path = dir.path().join("cfg.toml");
    fs::write(&path, text).unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    match &cfg.dataset {
        DatasetSource::Manifest { path, .. } => assert_eq!(path, &manifest),
        other => panic!("{other:?}"),
    }
    assert_eq!(cfg.output_dir, dir.path().join("runs"));
    let disk = prepare_data(&cfg, 0).unwrap();
    let mem = prepare_data(&RunConfig::toy(PetlStrategy::linear_probe()), 0).unwrap();
    assert_eq!(disk.test, mem.test);
    assert_eq!(disk.vocab, mem.vocab);
}

#[test]
fn config_errors_are_categorized() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, text: &str| {
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        p
    };
    let unknown = write(
        "a.toml",
        "bogus = 1\n[strategy]\nkind = \"zero_shot\"\n[dataset]\nkind = \"toy\"\n",
    );
    let missing = write("b.toml", "[dataset]\nkind = \"toy\"\n");
    let bad_lr = write(
        "c.json",
        r#"{"strategy": {"kind": "zero_shot"}, "dataset": {"kind": "toy"}, "optimizer.lr": -1}"#,
    );
    let wrong_ext = write("d.yaml", "strategy: x\n");
    for p in [&unknown, &missing, &bad_lr, &wrong_ext] {
        assert!(
            matches!(RunConfig::load(p), Err(PetlError::Config(_))),
            "{}",
            p.display()
        );
    }
    assert!(matches!(
        RunConfig::load(Path::new("/nonexistent/cfg.toml")),
        Err(PetlError::Config(_))
    ));
}

#[test]
fn shipped_toy_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy");
    let mut kinds = Vec::new();
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            kinds.push(RunConfig::load(&path).unwrap().strategy.kind);
        }
    }
    kinds.sort_by_key(|k| k.name());
    let mut all = StrategyKind::ALL.to_vec();
    all.sort_by_key(|k| k.name());
    assert_eq!(kinds, all);
}
