//! Reweighted proximal pruning over a γ sweep. Sparsity emerges from the
//! prox step; no threshold is chosen by hand.

use rpp::data::gen_pretrain_corpus;
use rpp::model::{build_model, evaluate_pretrain, ModelConfig};
use rpp::protocols::{pretrain_run, rpp_run, OptimSettings, PretrainData, RppConfig};

fn main() -> rpp::Result<()> {
    let cfg = ModelConfig { layers: 1, hidden: 32, heads: 2, ffn: 64, ..Default::default() };
    let data = PretrainData { corpus: gen_pretrain_corpus(0, 5000, &cfg)?, config: cfg, batch_size: 32, mask_prob: 0.15, seed: 1 };
    let eval = data.eval_batches(2, 128)?;
    let optim = OptimSettings::default();
    let mut dense = build_model(cfg)?.params;
    pretrain_run(&mut dense, &data, 800, &optim, 0)?;
    println!("dense mlm accuracy {:.4}", evaluate_pretrain(&dense, &cfg, &eval)?.mlm_accuracy);

    for gamma in [1e-4, 1e-3, 1e-2] {
        let rc = RppConfig { gamma, outer_iters: 3, inner_steps: 60, ..Default::default() };
        let out = rpp_run(dense.clone(), &data, &rc, &optim, 800)?;
        for note in &out.report.notes {
            println!("  γ={gamma:e} {note}");
        }
        let m = evaluate_pretrain(&out.params, &cfg, &eval)?;
        println!("γ={gamma:e}: sparsity {}, mlm accuracy {:.4}", out.pattern.ratio(), m.mlm_accuracy);
    }
    Ok(())
}
