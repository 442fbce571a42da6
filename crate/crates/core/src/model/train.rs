use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_loss_and_grads, init_params, LayerDims, ModelParams};
use crate::corpus::{ParallelCorpus, SentencePair};
use crate::error::{Error, Result};
use crate::partition::{partition_corpus, reshuffle_and_repartition, Partitioning};
use crate::softmax::Subset;

/// Training configuration, read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Unique target words per partition. A value at or above the target
    /// vocabulary size trains with the exact softmax.
    pub tau: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub reshuffle: bool,
    pub dims: LayerDims,
}

fn default_clip() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("tau, epochs and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive and finite"));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::invalid("clip_norm must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Summed token loss over the epoch, each term measured before its update.
    pub loss: f64,
    pub tokens: usize,
    pub partitions: usize,
    pub updates: usize,
}

impl EpochLog {
    pub fn mean_token_loss(&self) -> f64 {
        self.loss / self.tokens.max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
}

/// One SGD update on a batch: gradients averaged over sentences, clipped to
/// a global norm of `clip_norm`. Returns the summed token loss.
pub fn train_step(
    params: &mut ModelParams,
    batch: &[&SentencePair],
    subset: &Subset,
    learning_rate: f64,
    clip_norm: f64,
) -> Result<f64> {
    let (loss, mut grads) = batch_loss_and_grads(params, batch, subset)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    grads.scale(1.0 / batch.len() as f64);
    let norm = grads.norm();
    if norm > clip_norm {
        grads.scale(clip_norm / norm);
    }
    grads.apply_sgd(params, learning_rate);
    Ok(loss)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn epoch_partitions(corpus: &ParallelCorpus, config: &TrainConfig, epoch: usize) -> Result<Partitioning> {
    if config.reshuffle {
        reshuffle_and_repartition(corpus, config.tau, epoch_seed(config.seed, epoch))
    } else {
        partition_corpus(corpus, config.tau, (0..corpus.len()).collect())
    }
}

/// Splits a partition's pairs into length-sorted batches, then shuffles the
/// batch order.
fn batches(corpus: &ParallelCorpus, pairs: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut sorted = pairs.to_vec();
    sorted.sort_by_key(|&i| (corpus.pairs()[i].target().len(), corpus.pairs()[i].source().len()));
    let mut out: Vec<Vec<usize>> = sorted.chunks(batch_size).map(<[usize]>::to_vec).collect();
    out.shuffle(rng);
    out
}

pub fn train(corpus: &ParallelCorpus, config: &TrainConfig) -> Result<Trained> {
    config.validate()?;
    let dims = config.dims.with_vocab(corpus.src_vocab().len(), corpus.tgt_vocab().len());
    let params = init_params(dims, config.seed)?;
    train_from(params, corpus, config, |_| {})
}

/// Trains `params` in place of a fresh initialization, reporting each epoch.
pub fn train_from(
    mut params: ModelParams,
    corpus: &ParallelCorpus,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Trained> {
    config.validate()?;
    if params.dims.v_src != corpus.src_vocab().len() || params.dims.v_tgt != corpus.tgt_vocab().len() {
        return Err(Error::Shape("model vocabulary sizes differ from the corpus".into()));
    }
    let v_tgt = params.dims.v_tgt;
    let exact = config.tau >= v_tgt;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let partitioning = epoch_partitions(corpus, config, epoch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(config.seed.wrapping_add(1), epoch));
        let mut entry = EpochLog { epoch, loss: 0.0, tokens: 0, partitions: partitioning.partitions.len(), updates: 0 };
        for partition in &partitioning.partitions {
            let full;
            let subset = if exact {
                full = Subset::full(v_tgt);
                &full
            } else {
                &partition.subset
            };
            for batch in batches(corpus, partitioning.pairs_of(partition), config.batch_size, &mut rng) {
                let pairs: Vec<&SentencePair> = batch.iter().map(|&i| &corpus.pairs()[i]).collect();
                entry.loss += train_step(&mut params, &pairs, subset, config.learning_rate, config.clip_norm)?;
                entry.tokens += pairs.iter().map(|p| p.target().len()).sum::<usize>();
                entry.updates += 1;
            }
        }
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(Trained { params, log })
}
