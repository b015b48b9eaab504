//! Prunes a pre-trained encoder once and fine-tunes it on every task with
//! the same zero set held fixed.

use rpp::data::{gen_downstream_task, gen_pretrain_corpus, Task};
use rpp::experiment::check_universal;
use rpp::model::{build_head, build_model, ModelConfig};
use rpp::pattern::{apply_pattern, hard_threshold_prune, PruneScope};
use rpp::protocols::{finetune_with_mask, pretrain_run, FinetuneSettings, OptimSettings, PretrainData, TaskSplit};

fn main() -> rpp::Result<()> {
    let cfg = ModelConfig { layers: 1, hidden: 32, heads: 2, ffn: 64, ..Default::default() };
    let data = PretrainData { corpus: gen_pretrain_corpus(0, 5000, &cfg)?, config: cfg, batch_size: 32, mask_prob: 0.15, seed: 1 };
    let mut params = build_model(cfg)?.params;
    pretrain_run(&mut params, &data, 800, &OptimSettings::default(), 0)?;

    let pattern = hard_threshold_prune(&params, 0.5, PruneScope::Global)?;
    apply_pattern(&mut params, &pattern)?;
    println!("universal pattern {}", pattern.ratio());

    let settings = FinetuneSettings { steps: 100, ..Default::default() };
    let mut models = Vec::new();
    for task in Task::ALL {
        let split = TaskSplit { train: gen_downstream_task(task, 3, 1000, &cfg)?, eval: gen_downstream_task(task, 4, 500, &cfg)? };
        let head = build_head(&cfg, task.classes(), 5);
        let out = finetune_with_mask(&params, &cfg, &pattern, head, &split, &settings, 0)?;
        println!("{task}: eval accuracy {:.3}", out.eval_accuracy);
        models.push(out.params);
    }
    check_universal(&pattern, models.iter())?;
    println!("every task model keeps exactly the universal zero set");
    Ok(())
}
