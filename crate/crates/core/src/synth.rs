//! Seeded synthetic data with Zipfian word frequencies.
//!
//! Word of rank `r` (1-based) is the token `w{r}`, so token names follow the
//! generating distribution, not the order a [`Vocabulary`](crate::corpus::Vocabulary)
//! assigns from observed counts.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::align::Dictionary;
use crate::corpus::{ParallelCorpus, Vocabulary, WordId, N_SPECIALS};
use crate::decode::greedy_decode;
use crate::error::{Error, Result};
use crate::eval::token_accuracy;
use crate::model::ModelParams;

#[derive(Debug, Clone)]
pub struct ZipfSampler {
    zipf: Zipf<f64>,
}

impl ZipfSampler {
    pub fn new(vocab_size: usize, exponent: f64) -> Result<Self> {
        let zipf = Zipf::new(vocab_size as f64, exponent)
            .map_err(|e| Error::invalid(format!("Zipf({vocab_size}, {exponent}): {e}")))?;
        Ok(ZipfSampler { zipf })
    }

    /// A 1-based rank.
    pub fn rank(&self, rng: &mut impl Rng) -> usize {
        self.zipf.sample(rng) as usize
    }
}

pub fn token(rank: usize) -> String {
    format!("w{rank}")
}

/// `count` sentences with lengths uniform in `1..=max_len`.
pub fn zipf_sentences(
    vocab_size: usize,
    count: usize,
    max_len: usize,
    exponent: f64,
    seed: u64,
) -> Result<Vec<Vec<String>>> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let sampler = ZipfSampler::new(vocab_size, exponent)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            (0..len).map(|_| token(sampler.rank(&mut rng))).collect()
        })
        .collect())
}

/// Id sequences drawn directly over a vocabulary of `vocab_size` ids, where
/// id `N_SPECIALS + r - 1` has Zipf rank `r`.
pub fn zipf_id_sentences(vocab_size: usize, count: usize, len: usize, seed: u64) -> Result<Vec<Vec<WordId>>> {
    if vocab_size <= N_SPECIALS {
        return Err(Error::invalid("vocabulary holds only special tokens"));
    }
    let sampler = ZipfSampler::new(vocab_size - N_SPECIALS, 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| (0..len).map(|_| N_SPECIALS + sampler.rank(&mut rng) - 1).collect()).collect())
}

/// A dictionary giving every non-special source id `entries` distinct
/// Zipf-distributed target ids with decreasing probabilities.
pub fn random_dictionary(v_src: usize, v_tgt: usize, entries: usize, seed: u64) -> Result<Dictionary> {
    if v_tgt <= N_SPECIALS + entries {
        return Err(Error::invalid("target vocabulary too small for the requested entries"));
    }
    let sampler = ZipfSampler::new(v_tgt - N_SPECIALS, 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = BTreeMap::new();
    for s in N_SPECIALS..v_src {
        let mut ids: Vec<WordId> = Vec::with_capacity(entries);
        while ids.len() < entries {
            let t = N_SPECIALS + sampler.rank(&mut rng) - 1;
            if !ids.contains(&t) {
                ids.push(t);
            }
        }
        let list = ids.into_iter().enumerate().map(|(i, t)| (t, 1.0 / (i + 2) as f64)).collect();
        map.insert(s, list);
    }
    Dictionary::from_entries(map)
}

/// Training and held-out corpora where the target is the source.
#[derive(Debug, Clone)]
pub struct CopyTask {
    pub train: ParallelCorpus,
    pub held_out: ParallelCorpus,
}

/// Zipf(1) sequences over `vocab_size` words with lengths in `1..=max_len`.
/// Held-out sequences are drawn with `seed + 1000`; words that never occur
/// in training map to UNK.
pub fn copy_task(vocab_size: usize, n_train: usize, n_held_out: usize, max_len: usize, seed: u64) -> Result<CopyTask> {
    let train = zipf_sentences(vocab_size, n_train, max_len, 1.0, seed)?;
    let test = zipf_sentences(vocab_size, n_held_out, max_len, 1.0, seed + 1000)?;
    let vocab = Vocabulary::build(&train, vocab_size + N_SPECIALS)?;
    Ok(CopyTask {
        train: ParallelCorpus::encode(&train, &train, vocab.clone(), vocab.clone())?,
        held_out: ParallelCorpus::encode(&test, &test, vocab.clone(), vocab)?,
    })
}

/// Greedy token accuracy over a corpus, targets without their EOS.
pub fn greedy_accuracy(params: &ModelParams, corpus: &ParallelCorpus) -> Result<f64> {
    let mut hyps = Vec::with_capacity(corpus.len());
    let mut refs = Vec::with_capacity(corpus.len());
    for pair in corpus.pairs() {
        hyps.push(greedy_decode(params, pair.source(), None, None)?.words().to_vec());
        let target = pair.target();
        refs.push(target[..target.len() - 1].to_vec());
    }
    token_accuracy(&hyps, &refs)
}
