//! ℓ1 as a plain penalty (subgradient through AdamW) against the proximal
//! step with the same γ. Only the prox produces exact zeros.

use rpp::data::gen_pretrain_corpus;
use rpp::model::{build_model, ModelConfig};
use rpp::pattern::{sparsity_ratio, SparsityScope};
use rpp::protocols::{penalty_baseline_run, train_pretrain, OptimSettings, PretrainData, StepRule};
use rpp::prox::{ExponentMode, ReweightState};

fn main() -> rpp::Result<()> {
    let cfg = ModelConfig { layers: 1, hidden: 32, heads: 2, ffn: 64, ..Default::default() };
    let data = PretrainData { corpus: gen_pretrain_corpus(0, 5000, &cfg)?, config: cfg, batch_size: 16, mask_prob: 0.15, seed: 1 };
    let optim = OptimSettings::default();
    let init = build_model(cfg)?.params;
    let gamma = 5e-2;

    let (sub, sub_report) = penalty_baseline_run(init.clone(), &data, gamma, 300, &optim, 0)?;
    let mut prox = init;
    let rw = ReweightState::new(&prox, gamma, 1e-9, ExponentMode::Power)?;
    let prox_report = train_pretrain(&mut prox, &data, 300, &optim, 0, "prox", StepRule::Prox(&rw))?;

    println!("step  penalty   prox");
    for (i, (a, b)) in sub_report.train_losses().iter().zip(prox_report.train_losses()).enumerate().step_by(50) {
        println!("{i:>4}  {a:.4}  {b:.4}");
    }
    println!("exact zeros: penalty {}, prox {}", sparsity_ratio(&sub, SparsityScope::Prunable), sparsity_ratio(&prox, SparsityScope::Prunable));
    Ok(())
}
