use std::fs;
use std::path::Path;

use swax_core::io::{
    checkpoint_load, checkpoint_load_for, checkpoint_save, evaluate, load_experiment, load_sweep, read_metrics,
    read_results, run_experiment, to_toml, write_results, EvalGrid, ExperimentConfig, ResultRow, SweepCell,
    SweepConfig, Validation, RESULTS_HEADER, TENSORS,
};
use swax_core::model::Architecture;
use swax_core::tasks::{CorpusSpec, NiahKind};
use swax_core::train::{AdamWConfig, LrConfig, TrainConfig, Trainer, WindowSchedule};
use swax_core::{build_model, ForwardOptions, Model, ModelConfig, Tensor};

fn bits(ts: &[Tensor<f32>]) -> Vec<u32> {
    ts.iter().flat_map(|t| t.data().iter().map(|x| x.to_bits())).collect()
}

fn experiment(steps: usize) -> ExperimentConfig {
    ExperimentConfig {
        tag: None,
        train: TrainConfig {
            model: ModelConfig::swax(2, 16, 2, 32, 8),
            corpus: CorpusSpec {
                vocab_size: 32,
                seed: 3,
                local_order: 2,
                copy_rate: 0.05,
                copy_distance_range: [8, 24],
                copy_span: [8, 32],
                record_rate: 0.02,
                key_len: 2,
                value_len: 4,
            },
            lr: LrConfig {
                peak: 3e-3,
                min: 3e-5,
                warmup_steps: None,
            },
            windows: WindowSchedule::Stochastic {
                w_short: 4,
                w_long: 8,
                p_short: 0.5,
                anneal_fraction: 0.8,
            },
            batch_tokens: 64,
            seq_len: 32,
            total_steps: steps,
            seed: 9,
            optimizer: AdamWConfig::default(),
            wall_clock: false,
        },
        eval: EvalGrid {
            kinds: vec![NiahKind::Single],
            seq_lens: vec![48],
            n_samples: 8,
            ppl_tokens: 256,
            ..EvalGrid::default()
        },
    }
}

fn trained() -> (Model<f32>, swax_core::train::OptimizerState) {
    let mut t = Trainer::new(experiment(6).train).unwrap();
    t.run(&mut |_| Ok(())).unwrap();
    let (model, opt, _) = t.into_parts();
    (model, opt)
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let (model, opt) = trained();
    let dir = tempfile::tempdir().unwrap();
    checkpoint_save(&model, Some(&opt), 9, 6, dir.path()).unwrap();
    let ck = checkpoint_load(dir.path()).unwrap();
    assert_eq!(ck.seed, 9);
    assert_eq!(ck.step, 6);
    assert_eq!(&ck.config, model.config());
    assert_eq!(bits(ck.model.params()), bits(model.params()));
    let back = ck.optimizer.unwrap();
    assert_eq!(back.updates, opt.updates);
    assert_eq!(bits(&back.m), bits(&opt.m));
    assert_eq!(bits(&back.v), bits(&opt.v));
}

#[test]
fn save_load_save_gives_identical_bytes() {
    let (model, opt) = trained();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    checkpoint_save(&model, Some(&opt), 1, 2, a.path()).unwrap();
    let ck = checkpoint_load(a.path()).unwrap();
    checkpoint_save(&ck.model, ck.optimizer.as_ref(), ck.seed, ck.step, b.path()).unwrap();
    for f in ["manifest.txt", TENSORS] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn reloaded_model_computes_the_same_logits() {
    let (model, _) = trained();
    let dir = tempfile::tempdir().unwrap();
    checkpoint_save(&model, None, 0, 0, dir.path()).unwrap();
    let ck = checkpoint_load(dir.path()).unwrap();
    assert!(ck.optimizer.is_none());
    let tokens: Vec<usize> = (0..40).map(|i| (i * 7) % 32).collect();
    let a = model.forward(&tokens, ForwardOptions::default()).unwrap();
    let b = ck.model.forward(&tokens, ForwardOptions::default()).unwrap();
    assert_eq!(bits(&[a]), bits(&[b]));
}

#[test]
fn truncated_tensor_file_is_an_error() {
    let model = build_model::<f32>(&ModelConfig::swax(2, 8, 2, 16, 4), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint_save(&model, None, 0, 0, dir.path()).unwrap();
    let path = dir.path().join(TENSORS);
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    let err = checkpoint_load(dir.path()).unwrap_err().to_string();
    assert!(err.contains(&format!("expected {}", bytes.len())), "{err}");
}

#[test]
fn loading_for_another_config_names_the_parameter() {
    let model = build_model::<f32>(&ModelConfig::swax(2, 8, 2, 16, 4), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint_save(&model, None, 0, 0, dir.path()).unwrap();
    let err = checkpoint_load_for(dir.path(), &ModelConfig::swax(2, 8, 2, 24, 4))
        .unwrap_err()
        .to_string();
    assert!(err.contains("embed"), "{err}");
    assert!(checkpoint_load_for(dir.path(), &ModelConfig::swax(2, 8, 2, 16, 4)).is_ok());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let good = to_toml(&experiment(3)).unwrap();
    let path = dir.path().join("exp.toml");
    fs::write(&path, &good).unwrap();
    assert_eq!(load_experiment(&path).unwrap(), experiment(3));

    let bad = good.replace("[train.model]", "[train.model]\ndropout = 0.1");
    fs::write(&path, bad).unwrap();
    let err = load_experiment(&path).unwrap_err().to_string();
    assert!(err.contains("dropout"), "{err}");
}

#[test]
fn sweep_cells_get_distinct_stable_seeds() {
    let sweep = SweepConfig {
        base: experiment(3),
        cells: vec![
            SweepCell {
                tag: "xlstm".into(),
                architecture: Some(Architecture::Xlstm),
                windows: None,
            },
            SweepCell {
                tag: "swa-w4".into(),
                architecture: Some(Architecture::Swa),
                windows: Some(WindowSchedule::Fixed { window: 4 }),
            },
        ],
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.toml");
    fs::write(&path, to_toml(&sweep).unwrap()).unwrap();
    let loaded = load_sweep(&path).unwrap();
    let (a, b) = (loaded.cell(0), loaded.cell(1));
    assert_ne!(a.train.seed, b.train.seed);
    assert_eq!(a.train.seed, sweep.cell(0).train.seed);
    assert_eq!(b.train.model.default_window, 4);
    assert_eq!(b.train.model.architecture, Architecture::Swa);
}

#[test]
fn results_table_has_the_exact_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.csv");
    write_results(&path, &[]).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(
        text,
        "task_kind,seq_len,test_window,train_tag,accuracy,n_samples,seed\n"
    );
    assert_eq!(RESULTS_HEADER.join(","), text.trim_end());
    assert!(read_results(&path).unwrap().is_empty());

    let row = ResultRow {
        task_kind: "multikey".into(),
        seq_len: 512,
        test_window: 16,
        train_tag: "swax-w16/128-p0.5-a0.9".into(),
        accuracy: 0.625,
        n_samples: 64,
        seed: 7,
    };
    write_results(&path, std::slice::from_ref(&row)).unwrap();
    assert_eq!(read_results(&path).unwrap(), vec![row]);
}

fn run_twice(exp: &ExperimentConfig) -> (tempfile::TempDir, tempfile::TempDir) {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(exp, a.path()).unwrap();
    run_experiment(exp, b.path()).unwrap();
    (a, b)
}

fn read(dir: &Path, rel: &str) -> Vec<u8> {
    fs::read(dir.join(rel)).unwrap()
}

#[test]
fn run_directory_replays_bitwise() {
    let exp = experiment(10);
    let (a, b) = run_twice(&exp);
    let log = read_metrics(&a.path().join("metrics.jsonl")).unwrap();
    assert_eq!(log.len(), 10);
    assert_eq!(log.last().unwrap().tokens_seen, 10 * 64);
    for rel in [
        "metrics.jsonl",
        "results.csv",
        "validation.json",
        "config.toml",
        "checkpoints/step-000010/tensors.bin",
    ] {
        assert_eq!(read(a.path(), rel), read(b.path(), rel), "{rel}");
    }
}

#[test]
fn metrics_lines_carry_exactly_the_logged_fields() {
    let a = tempfile::tempdir().unwrap();
    run_experiment(&experiment(2), a.path()).unwrap();
    let text = fs::read_to_string(a.path().join("metrics.jsonl")).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(keys, ["loss", "lr", "sampled_window", "step", "tokens_seen", "wall_ms"]);
    }
}

#[test]
fn evaluating_a_checkpoint_reproduces_validation_loss() {
    let exp = experiment(8);
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&exp, dir.path()).unwrap();
    let stored: Validation = serde_json::from_slice(&read(dir.path(), "validation.json")).unwrap();
    let ck = checkpoint_load(&dir.path().join("checkpoints/step-000008")).unwrap();
    let (again, rows) = evaluate(&ck.model, &exp, &[]).unwrap();
    assert!((again.unwrap().loss - stored.loss).abs() < 1e-6);
    assert_eq!(rows, read_results(&dir.path().join("results.csv")).unwrap());
}

#[test]
fn empty_grid_writes_a_header_only_table() {
    let mut exp = experiment(1);
    exp.eval = EvalGrid::default();
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&exp, dir.path()).unwrap();
    assert!(read_results(&dir.path().join("results.csv")).unwrap().is_empty());
    assert!(!dir.path().join("validation.json").exists());
}
