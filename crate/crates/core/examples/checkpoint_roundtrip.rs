//! Saves a checkpoint with every optional section, loads it back and shows
//! that corruption is caught.

use rpp::checkpoint::{checkpoint_summary, load_checkpoint, save_checkpoint, Checkpoint};
use rpp::model::{build_model, ModelConfig};
use rpp::optim::{AdamWConfig, OptimizerState, ScheduleConfig};
use rpp::pattern::{apply_pattern, hard_threshold_prune, PruneScope};
use rpp::prox::{ExponentMode, ReweightState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ModelConfig { layers: 1, hidden: 16, heads: 2, ffn: 32, ..Default::default() };
    let mut params = build_model(cfg)?.params;
    let pattern = hard_threshold_prune(&params, 0.3, PruneScope::PerTensor)?;
    apply_pattern(&mut params, &pattern)?;
    let ck = Checkpoint {
        optimizer: Some(OptimizerState::new(AdamWConfig::with_schedule(ScheduleConfig::new(10, 100)?), &params)?),
        reweight: Some(ReweightState::new(&params, 1e-3, 1e-9, ExponentMode::Power)?),
        pattern: Some(pattern),
        ..Checkpoint::new(cfg, params)
    };

    let path = std::env::temp_dir().join("rpp-example.ckpt");
    save_checkpoint(&path, &ck)?;
    let back = load_checkpoint(&path)?;
    println!("{} tensors, round trip exact: {}", checkpoint_summary(&back).len(), back == ck);

    let mut bytes = std::fs::read(&path)?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    std::fs::write(&path, &bytes)?;
    match load_checkpoint(&path) {
        Err(e) => println!("corrupted file: {e} (exit code {})", e.exit_code()),
        Ok(_) => println!("corruption went unnoticed"),
    }
    Ok(())
}
