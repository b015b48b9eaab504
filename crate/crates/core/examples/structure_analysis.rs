//! Row/column structure of pruned query and key matrices, their PGM images,
//! and embedding-neighbourhood overlap before and after pruning.

use rpp::analysis::{neighbor_overlap, random_overlap_baseline, write_analysis};
use rpp::data::gen_pretrain_corpus;
use rpp::model::{build_model, ModelConfig};
use rpp::protocols::{pretrain_run, rpp_run, OptimSettings, PretrainData, RppConfig};

fn main() -> rpp::Result<()> {
    let cfg = ModelConfig { layers: 1, hidden: 32, heads: 2, ffn: 64, ..Default::default() };
    let data = PretrainData { corpus: gen_pretrain_corpus(0, 5000, &cfg)?, config: cfg, batch_size: 32, mask_prob: 0.15, seed: 1 };
    let optim = OptimSettings::default();
    let mut dense = build_model(cfg)?.params;
    pretrain_run(&mut dense, &data, 800, &optim, 0)?;
    let rc = RppConfig { gamma: 1e-3, outer_iters: 3, inner_steps: 60, ..Default::default() };
    let out = rpp_run(dense.clone(), &data, &rc, &optim, 800)?;

    let dir = std::env::temp_dir().join("rpp-structure-example");
    for (name, p) in write_analysis(&out.params, &out.pattern, "rpp", &dir)? {
        println!("{name}: density {:.3}, column score {:.3}, row score {:.3}", p.density, p.column_score, p.row_score);
    }
    println!("CSV and PGM files in {}", dir.display());

    let k = 5;
    let o = neighbor_overlap(&dense, &out.params, k)?;
    println!("neighbour overlap {:.3} (random {:.3})", o.mean, random_overlap_baseline(cfg.vocab, k));
    Ok(())
}
