//! Iterative magnitude pruning: 10% more weights per iteration, retraining
//! with the zero set frozen in between.

use rpp::data::gen_pretrain_corpus;
use rpp::model::{build_model, evaluate_pretrain, ModelConfig};
use rpp::pattern::PruneScope;
use rpp::protocols::{nip_run, pretrain_run, FinetuneSettings, OptimSettings, PretrainData, PruneSchedule};

fn main() -> rpp::Result<()> {
    let cfg = ModelConfig { layers: 1, hidden: 32, heads: 2, ffn: 64, ..Default::default() };
    let data = PretrainData { corpus: gen_pretrain_corpus(0, 5000, &cfg)?, config: cfg, batch_size: 32, mask_prob: 0.15, seed: 1 };
    let eval = data.eval_batches(2, 128)?;
    let optim = OptimSettings::default();
    let mut params = build_model(cfg)?.params;
    pretrain_run(&mut params, &data, 800, &optim, 0)?;

    let schedule = PruneSchedule { step_ratio: 0.1, iterations: 9, retrain_steps: 20, scope: PruneScope::Global };
    for it in nip_run(params, &data, &schedule, &optim, &[], &FinetuneSettings::default(), 800)? {
        let m = evaluate_pretrain(&it.params, &cfg, &eval)?;
        println!("t={} sparsity {} mlm accuracy {:.4}", it.t, it.pattern.ratio(), m.mlm_accuracy);
    }
    Ok(())
}
