//! Trains a model to copy Zipf-distributed sequences and reports greedy
//! token accuracy on held-out sequences.
//!
//! Settings come from environment variables, e.g.
//! `TAU=1000 EPOCHS=8 BATCH=4 cargo run --release --example copy_task`.

use std::time::Instant;

use lvsoftmax::model::{init_params, train_from, LayerDims, TrainConfig};
use lvsoftmax::synth::{copy_task, greedy_accuracy};

fn var<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> lvsoftmax::Result<()> {
    let vocab_size: usize = var("VOCAB", 10_000);
    let n_train: usize = var("TRAIN", 100_000);
    let config = TrainConfig {
        tau: var("TAU", 1000),
        epochs: var("EPOCHS", 8),
        batch_size: var("BATCH", 4),
        learning_rate: var("LR", 1.0),
        clip_norm: var("CLIP", 1.0),
        seed: var("SEED", 1),
        reshuffle: var("RESHUFFLE", true),
        dims: LayerDims { e: 32, n_enc: 64, n_dec: 64, n_a: 32, d: 32 },
    };
    let task = copy_task(vocab_size, n_train, 500, 8, config.seed)?;
    let corpus = &task.train;
    eprintln!("vocabulary {} types, {} training pairs", corpus.tgt_vocab().len(), corpus.len());

    let dims = config.dims.with_vocab(corpus.src_vocab().len(), corpus.tgt_vocab().len());
    let params = init_params(dims, config.seed)?;
    let start = Instant::now();
    let trained = train_from(params, corpus, &config, |log| {
        eprintln!(
            "epoch {} mean token loss {:.4} ({} partitions, {:.0}s)",
            log.epoch,
            log.mean_token_loss(),
            log.partitions,
            start.elapsed().as_secs_f64()
        );
    })?;
    let accuracy = greedy_accuracy(&trained.params, &task.held_out)?;
    println!("accuracy {accuracy:.4} after {:.0}s", start.elapsed().as_secs_f64());
    Ok(())
}
