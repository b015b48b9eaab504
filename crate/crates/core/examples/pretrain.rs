//! Short masked-token pre-training run on a small encoder.

use rpp::data::gen_pretrain_corpus;
use rpp::model::{build_model, evaluate_pretrain, ModelConfig};
use rpp::protocols::{pretrain_run, OptimSettings, PretrainData};

fn main() -> rpp::Result<()> {
    let cfg = ModelConfig { layers: 1, hidden: 32, heads: 2, ffn: 64, ..Default::default() };
    let data = PretrainData { corpus: gen_pretrain_corpus(0, 5000, &cfg)?, config: cfg, batch_size: 32, mask_prob: 0.15, seed: 1 };
    let eval = data.eval_batches(2, 128)?;
    let mut params = build_model(cfg)?.params;

    let before = evaluate_pretrain(&params, &cfg, &eval)?;
    let report = pretrain_run(&mut params, &data, 1500, &OptimSettings::default(), 0)?;
    let after = evaluate_pretrain(&params, &cfg, &eval)?;
    let losses = report.train_losses();
    for (i, chunk) in losses.chunks(250).enumerate() {
        println!("steps {:>3}..{:>3}: mean loss {:.4}", i * 250, i * 250 + chunk.len(), chunk.iter().sum::<f64>() / chunk.len() as f64);
    }
    println!("mlm accuracy {:.4} -> {:.4}, nsp accuracy {:.4} -> {:.4}", before.mlm_accuracy, after.mlm_accuracy, before.nsp_accuracy, after.nsp_accuracy);
    Ok(())
}
