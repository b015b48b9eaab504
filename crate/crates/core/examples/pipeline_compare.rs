//! Runs the full pipeline under two protocols from one config and lines up
//! their eval metrics by prune ratio.

use rpp::experiment::{compare_runs, run_experiment, ExperimentConfig};

const CONFIG: &str = r#"
seed = 1
tasks = ["majority-token"]

[model]
layers = 1
hidden = 32
heads = 2
ffn = 64

[data]
corpus_size = 5000
task_train = 500
task_eval = 500

[pretrain]
steps = 150

[rpp]
gamma = 1e-3
outer_iters = 2
inner_steps = 50
trim_target = 0.5

[nip]
step_ratio = 0.1
iterations = 5
retrain_steps = 20

[finetune]
steps = 60
"#;

fn main() -> rpp::Result<()> {
    let root = std::env::temp_dir().join("rpp-pipeline-example");
    let mut reports = Vec::new();
    for protocol in ["rpp", "nip"] {
        let cfg = ExperimentConfig::from_toml_with_overrides(CONFIG, &[format!("protocol={protocol}"), format!("output_dir={protocol}")])?;
        let _ = std::fs::remove_dir_all(cfg.resolve_output(Some(&root)));
        let s = run_experiment(&cfg, Some(&root))?;
        println!("{protocol}: sparsity {}, {:?}", s.pattern.ratio(), s.task_accuracy);
        reports.push(s.output_dir.join("metrics.csv"));
    }
    print!("{}", compare_runs(&reports)?);
    Ok(())
}
