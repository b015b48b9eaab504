//! Samples from the synthetic pre-training corpus and the three downstream
//! tasks.

use rpp::data::{gen_downstream_task, gen_pretrain_corpus, pretrain_batch, Task};
use rpp::model::ModelConfig;

fn main() -> rpp::Result<()> {
    let cfg = ModelConfig::default();
    let corpus = gen_pretrain_corpus(0, 1000, &cfg)?;
    let head: Vec<u32> = corpus.stream().take(24).collect();
    println!("corpus: {} segments, first tokens {head:?}", corpus.len());

    let batch = pretrain_batch(&corpus, 4, 0.15, 1)?;
    for i in 0..2 {
        println!("masked {:?} at {:?} (was {:?}), is_next={}", batch.tokens[i], batch.positions[i], batch.originals[i], batch.is_next[i]);
    }
    println!("{} masks over {} sequences", batch.masked_count(), batch.len());

    for task in Task::ALL {
        let d = gen_downstream_task(task, 2, 4, &cfg)?;
        println!("\n{task}");
        for (s, y) in d.sequences.iter().zip(&d.labels) {
            println!("  {s:?} -> {}", task.label_name(*y));
        }
    }
    Ok(())
}
