use std::path::{Path, PathBuf};
use std::process::Command;

use rpp::checkpoint::{
    check_pattern_consistent, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
};
use rpp::experiment::{compare_runs, run_experiment, ExperimentConfig, OutputLock, Pipeline, OUTPUT_ROOT_ENV};
use rpp::model::ModelConfig;
use rpp::optim::{AdamWConfig, OptimizerState, ScheduleConfig};
use rpp::pattern::{extract_sparse_pattern, hard_threshold_prune, PruneScope};
use rpp::protocols::pretrain_run;
use rpp::prox::{ExponentMode, ReweightState};
use rpp::report::{read_csv, RowKind};
use rpp::{ParamSet, Tensor};

const TINY: &str = r#"
seed = 3
protocol = "rpp"
tasks = ["majority-token", "pair-order"]

[model]
layers = 1
hidden = 16
heads = 2
vocab = 32
seq_len = 8
ffn = 32
seed = 1

[data]
corpus_size = 300
batch_size = 8
task_train = 64
task_eval = 64
eval_batches = 1
eval_batch_size = 16

[pretrain]
steps = 5

[rpp]
gamma = 0.05
outer_iters = 2
inner_steps = 4

[nip]
step_ratio = 0.25
iterations = 2
retrain_steps = 2

[finetune]
steps = 3
batch_size = 8
"#;

fn tiny(overrides: &[&str]) -> ExperimentConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::from_toml_with_overrides(TINY, &o).unwrap()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn rerun_is_byte_identical() {
    let root = tempfile::tempdir().unwrap();
    for protocol in ["rpp", "nip", "penalty"] {
        let a = run_experiment(&tiny(&[&format!("protocol={protocol}"), "output_dir=a"]), Some(root.path())).unwrap();
        let b = run_experiment(&tiny(&[&format!("protocol={protocol}"), "output_dir=b"]), Some(root.path())).unwrap();
        let mut files = vec![PathBuf::from("metrics.csv"), "pruned.ckpt".into(), "pretrain.ckpt".into(), "analysis/structure.csv".into()];
        for entry in std::fs::read_dir(a.output_dir.join("analysis")).unwrap() {
            files.push(Path::new("analysis").join(entry.unwrap().file_name()));
        }
        if protocol == "penalty" {
            files.push("loss_curves.csv".into());
        }
        for f in &files {
            assert_eq!(read(&a.output_dir.join(f)), read(&b.output_dir.join(f)), "{protocol}: {}", f.display());
        }
        std::fs::remove_dir_all(&a.output_dir).unwrap();
        std::fs::remove_dir_all(&b.output_dir).unwrap();
    }
}

#[test]
fn plain_run_has_one_row_per_step() {
    let root = tempfile::tempdir().unwrap();
    let s = run_experiment(&tiny(&["protocol=plain", "pretrain.steps=10", "tasks=[]"]), Some(root.path())).unwrap();
    let train: Vec<_> = s.rows.iter().filter(|r| r.kind == RowKind::Train).collect();
    assert_eq!(train.len(), 10);
    assert_eq!(train.iter().map(|r| r.step).collect::<Vec<_>>(), (0..10).collect::<Vec<_>>());
    let (header, records) = read_csv(&s.output_dir.join("metrics.csv")).unwrap();
    let kind = header.iter().position(|h| h == "kind").unwrap();
    assert_eq!(records.iter().filter(|r| r[kind] == "train").count(), 10);
}

#[test]
fn rpp_without_penalty_matches_plain_training() {
    let root = tempfile::tempdir().unwrap();
    let plain = run_experiment(&tiny(&["protocol=plain", "output_dir=plain", "tasks=[]"]), Some(root.path())).unwrap();
    let cfg = tiny(&["rpp.gamma=0.0", "rpp.outer_iters=1", "output_dir=rpp", "tasks=[]"]);
    let rpp = run_experiment(&cfg, Some(root.path())).unwrap();
    assert!(rpp.pattern.is_empty());
    assert!(rpp.rows.iter().all(|r| r.sparsity_prunable == 0.0 && r.sparsity_all == 0.0));
    let phase = |rows: &[rpp::report::MetricRow], p: &str| -> Vec<u64> {
        rows.iter().filter(|r| r.phase == p && r.kind == RowKind::Train).map(|r| r.loss.to_bits()).collect()
    };
    assert_eq!(phase(&plain.rows, "pretrain"), phase(&rpp.rows, "pretrain"));

    // the pruning phase is one more AdamW phase from the pre-trained weights
    let mut params = load_checkpoint(&rpp.output_dir.join("pretrain.ckpt")).unwrap().params;
    let pipe = Pipeline::new(cfg.clone()).unwrap();
    let cont = pretrain_run(&mut params, &pipe.data, cfg.rpp.inner_steps, &cfg.optim, cfg.pretrain.steps).unwrap();
    let want: Vec<u64> = cont.train_losses().iter().map(|v| v.to_bits()).collect();
    assert_eq!(phase(&rpp.rows, "rpp.t1"), want);
    assert!(load_checkpoint(&rpp.output_dir.join("pruned.ckpt")).unwrap().params.bit_eq(&params));
}

#[test]
fn checkpoint_round_trips_every_section() {
    let root = tempfile::tempdir().unwrap();
    let s = run_experiment(&tiny(&["tasks=[]"]), Some(root.path())).unwrap();
    let path = s.output_dir.join("pruned.ckpt");
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.pattern.as_ref(), Some(&s.pattern));
    assert!(ck.reweight.is_some());
    check_pattern_consistent(&ck).unwrap();
    let mut from_weights = extract_sparse_pattern(&ck.params);
    from_weights.param_total = s.pattern.param_total;
    assert_eq!(from_weights, s.pattern);

    let with_optim = Checkpoint {
        optimizer: Some(OptimizerState::new(AdamWConfig::with_schedule(ScheduleConfig::new(2, 9).unwrap()), &ck.params).unwrap()),
        ..ck.clone()
    };
    let back = decode_checkpoint(&encode_checkpoint(&with_optim), &path).unwrap();
    assert_eq!(back, with_optim);
    assert!(back.params.bit_eq(&with_optim.params));
    assert_eq!(encode_checkpoint(&back), encode_checkpoint(&with_optim));
}

/// Built from exact arithmetic only, so the bytes do not depend on libm.
fn golden() -> Checkpoint {
    let config = ModelConfig { layers: 1, hidden: 4, heads: 2, vocab: 8, seq_len: 8, ffn: 8, seed: 7 };
    let mut params = ParamSet::new();
    let w: Vec<f64> = (0..12).map(|i| (i as f64 - 5.5) * 0.125).collect();
    params.insert("layer0.w", Tensor::matrix(3, 4, w).unwrap(), true);
    params.insert("layer0.b", Tensor::vector(vec![-0.0, 1.5, f64::MIN_POSITIVE / 4.0]), false);
    let pattern = hard_threshold_prune(&params, 0.5, PruneScope::Global).unwrap();
    rpp::pattern::apply_pattern(&mut params, &pattern).unwrap();
    let mut optimizer = OptimizerState::new(AdamWConfig::with_schedule(ScheduleConfig::new(1, 20).unwrap()), &params).unwrap();
    optimizer.k = 7;
    optimizer.m.insert("layer0.b".into(), Tensor::vector(vec![0.25, -0.5, 0.0]));
    let mut reweight = ReweightState::new(&params, 0.125, 1e-9, ExponentMode::Candes).unwrap();
    reweight.t = 3;
    Checkpoint { config, params, optimizer: Some(optimizer), reweight: Some(reweight), pattern: Some(pattern) }
}

#[test]
fn golden_checkpoint_still_loads() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_v1.ckpt");
    if std::env::var_os("RPP_BLESS").is_some() {
        save_checkpoint(&path, &golden()).unwrap();
    }
    let bytes = read(&path);
    let ck = decode_checkpoint(&bytes, &path).unwrap();
    assert_eq!(ck, golden());
    assert_eq!(ck.params.tensor("layer0.b").unwrap().data()[0].to_bits(), (-0.0f64).to_bits());
    assert_eq!(encode_checkpoint(&ck), bytes);
}

#[test]
fn held_lock_blocks_a_second_run() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny(&["tasks=[]", "pretrain.steps=1"]);
    let lock = OutputLock::acquire(&cfg.resolve_output(Some(root.path()))).unwrap();
    let err = run_experiment(&cfg, Some(root.path())).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    drop(lock);
    run_experiment(&cfg, Some(root.path())).unwrap();
}

#[test]
fn compare_against_itself_is_all_zero() {
    let root = tempfile::tempdir().unwrap();
    let s = run_experiment(&tiny(&[]), Some(root.path())).unwrap();
    let m = s.output_dir.join("metrics.csv");
    let table = compare_runs(&[m.clone(), m]).unwrap();
    let mut lines = table.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header[..2], ["prune_bucket", "metric"]);
    let delta = header.iter().position(|h| h.starts_with("delta")).unwrap();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r[delta].parse::<f64>().unwrap() == 0.0), "{table}");
}

fn cli(args: &[&str], root: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_rpp")).args(args).env(OUTPUT_ROOT_ENV, root).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn cli_exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let config = r.join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    let c = config.to_str().unwrap();

    let (code, err) = cli(&["run", "--config", c, "--set", "rpp.gama=1"], r);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("gama"), "{err}");
    assert_eq!(cli(&["run", "--config", c, "--set", "model.heads=3"], r).0, 2);
    assert_eq!(cli(&["prune-nip", "--config", c, "--from", "missing.ckpt"], r).0, 3);

    let (code, err) = cli(&["pretrain", "--config", c, "--out", "pre", "--set", "pretrain.steps=2"], r);
    assert_eq!(code, 0, "{err}");
    let pre = r.join("pre/pretrain.ckpt");
    assert!(pre.exists(), "--out resolves under the output root");
    let p = pre.to_str().unwrap();
    for (cmd, dir) in [("prune-rpp", "rpp"), ("prune-nip", "nip"), ("prune-penalty", "pen")] {
        let (code, err) = cli(&[cmd, "--config", c, "--from", p, "--out", dir], r);
        assert_eq!(code, 0, "{cmd}: {err}");
    }
    let pruned = r.join("rpp/pruned.ckpt");
    let (code, err) = cli(&["finetune", "--config", c, "--from", pruned.to_str().unwrap(), "--out", "ft"], r);
    assert_eq!(code, 0, "{err}");
    let an = r.join("an");
    let (code, err) = cli(&["analyze", "--checkpoint", pruned.to_str().unwrap(), "--reference", p, "--out", an.to_str().unwrap()], r);
    assert_eq!(code, 0, "{err}");
    assert!(an.join("structure.csv").exists() && an.join("neighbors.csv").exists());
    let pgm = r.join("q.pgm");
    let export = |t: &str| cli(&["export-pattern", "--checkpoint", pruned.to_str().unwrap(), "--tensor", t, "--out", pgm.to_str().unwrap()], r);
    assert_eq!(export("layer0.attn.q.w").0, 2);
    let (code, err) = export("layer0.attn.query.w");
    assert_eq!(code, 0, "{err}");
    assert!(read(&pgm).starts_with(b"P5\n16 16\n255\n"));

    // a stored pattern that disagrees with the stored weights
    let mut ck = load_checkpoint(&pruned).unwrap();
    let name = ck.pattern.as_ref().unwrap().zeros.keys().next().unwrap().clone();
    let idx = ck.pattern.as_ref().unwrap().zeros[&name][0];
    ck.params.tensor_mut(&name).unwrap().data_mut()[idx] = 0.5;
    let bad = r.join("bad.ckpt");
    save_checkpoint(&bad, &ck).unwrap();
    let (code, err) = cli(&["analyze", "--checkpoint", bad.to_str().unwrap(), "--out", an.to_str().unwrap()], r);
    assert_eq!(code, 4, "{err}");

    let m = r.join("ft/finetune.metrics.csv");
    let (code, err) = cli(&["compare", m.to_str().unwrap(), m.to_str().unwrap()], r);
    assert_eq!(code, 0, "{err}");
    std::fs::write(r.join("junk.csv"), "a,b\n1,2\n").unwrap();
    let (code, err) = cli(&["compare", m.to_str().unwrap(), r.join("junk.csv").to_str().unwrap()], r);
    assert_eq!(code, 2);
    assert!(err.contains("missing columns"), "{err}");
}
