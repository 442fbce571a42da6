//! Timing harness for training updates and decoding.
//!
//! Each repetition times a group of calls and records the mean per call (or
//! per emitted word); a report row gives the median of those group means and
//! their standard deviation. Warm-up calls run before any timing. Everything
//! runs on the calling thread.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::Dictionary;
use crate::corpus::{SentencePair, WordId, EOS, N_SPECIALS};
use crate::decode::{beam_search_batch, build_candidate_list, shared_candidate_list, CandidateList};
use crate::error::{Error, Result};
use crate::model::{init_params, train_step, LayerDims, ModelParams};
use crate::softmax::Subset;
use crate::synth::{zipf_id_sentences, ZipfSampler};

pub const MIN_REPETITIONS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub mode: String,
    pub vocab_size: usize,
    pub subset_size: usize,
    /// Seconds per update or per emitted word.
    pub mean_time: f64,
    pub std_dev: f64,
    pub repetitions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingReport {
    pub machine: String,
    pub rows: Vec<TimingRow>,
}

impl TimingReport {
    pub fn new(rows: Vec<TimingRow>) -> Self {
        TimingReport { machine: machine_description(), rows }
    }

    pub fn row(&self, mode: &str, vocab_size: usize) -> Option<&TimingRow> {
        self.rows.iter().find(|r| r.mode == mode && r.vocab_size == vocab_size)
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            format!("# machine: {}\nmode,vocab_size,subset_size,mean_time,std_dev,repetitions\n", self.machine);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.9},{:.9},{}",
                r.mode, r.vocab_size, r.subset_size, r.mean_time, r.std_dev, r.repetitions
            );
        }
        out
    }
}

/// CPU model, logical core count and target triple.
pub fn machine_description() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|info| {
            info.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|s| s.trim().to_owned())
        })
        .unwrap_or_else(|| "unknown cpu".to_owned());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{cpu}; {cores} logical cores; {}-{}; single-threaded", std::env::consts::ARCH, std::env::consts::OS)
}

/// Median and standard deviation of per-repetition means.
pub fn summarize(samples: &[f64]) -> (f64, f64) {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let var = sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
    (median, var.sqrt())
}

fn check_repetitions(repetitions: usize) -> Result<()> {
    if repetitions < MIN_REPETITIONS {
        return Err(Error::invalid(format!("repetitions must be at least {MIN_REPETITIONS}, got {repetitions}")));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainBench {
    pub layers: LayerDims,
    pub vocab_sizes: Vec<usize>,
    pub tau: usize,
    pub batch_size: usize,
    pub sentence_len: usize,
    /// Updates per timed group.
    pub updates_per_repetition: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for TrainBench {
    fn default() -> Self {
        TrainBench {
            layers: LayerDims { e: 32, n_enc: 64, n_dec: 64, n_a: 32, d: 32 },
            vocab_sizes: vec![10_000, 50_000, 200_000],
            tau: 1000,
            batch_size: 8,
            sentence_len: 8,
            updates_per_repetition: 3,
            repetitions: MIN_REPETITIONS,
            warmup: 2,
            seed: 0,
        }
    }
}

/// A partition-like subset: the batch's target words topped up with
/// Zipf-drawn ids to `tau` members.
fn training_subset(batch: &[SentencePair], vocab_size: usize, tau: usize, seed: u64) -> Result<Subset> {
    let mut ids: BTreeSet<WordId> = batch.iter().flat_map(|p| p.target().iter().copied()).collect();
    let sampler = ZipfSampler::new(vocab_size - N_SPECIALS, 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while ids.len() < tau.min(vocab_size) {
        ids.insert(N_SPECIALS + sampler.rank(&mut rng) - 1);
    }
    Ok(Subset::from_ids(ids))
}

fn time_updates(
    params: &mut ModelParams,
    batch: &[&SentencePair],
    subset: &Subset,
    spec: &TrainBench,
) -> Result<Vec<f64>> {
    for _ in 0..spec.warmup {
        train_step(params, batch, subset, 1e-4, 1.0)?;
    }
    let mut samples = Vec::with_capacity(spec.repetitions);
    for _ in 0..spec.repetitions {
        let start = Instant::now();
        for _ in 0..spec.updates_per_repetition {
            train_step(params, batch, subset, 1e-4, 1.0)?;
        }
        samples.push(start.elapsed().as_secs_f64() / spec.updates_per_repetition as f64);
    }
    Ok(samples)
}

/// Seconds per training update, in `full` (softmax over the whole target
/// vocabulary) and `sampled` (subset of `tau` words) modes.
pub fn time_train_updates(spec: &TrainBench) -> Result<TimingReport> {
    check_repetitions(spec.repetitions)?;
    if spec.batch_size == 0 || spec.sentence_len == 0 || spec.updates_per_repetition == 0 {
        return Err(Error::invalid("batch size, sentence length and updates per repetition must be positive"));
    }
    let mut rows = Vec::new();
    for &v in &spec.vocab_sizes {
        let dims = spec.layers.with_vocab(v, v);
        let mut params = init_params(dims, spec.seed)?;
        let sources = zipf_id_sentences(v, spec.batch_size, spec.sentence_len, spec.seed)?;
        let targets = zipf_id_sentences(v, spec.batch_size, spec.sentence_len, spec.seed + 1)?;
        let batch: Vec<SentencePair> = sources
            .into_iter()
            .zip(targets)
            .map(|(s, mut t)| {
                t.push(EOS);
                SentencePair::new(s, t)
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&SentencePair> = batch.iter().collect();
        let sampled = training_subset(&batch, v, spec.tau, spec.seed)?;
        for (mode, subset) in [("sampled", sampled), ("full", Subset::full(v))] {
            let samples = time_updates(&mut params, &refs, &subset, spec)?;
            let (mean_time, std_dev) = summarize(&samples);
            rows.push(TimingRow {
                mode: mode.to_owned(),
                vocab_size: v,
                subset_size: subset.len(),
                mean_time,
                std_dev,
                repetitions: spec.repetitions,
            });
        }
    }
    Ok(TimingReport::new(rows))
}

#[derive(Debug, Clone)]
pub struct DecodeBench {
    pub layers: LayerDims,
    /// Vocabulary of the baseline model decoded with its full softmax.
    pub small_vocab: usize,
    pub large_vocab: usize,
    pub k: usize,
    pub k_prime: usize,
    pub beam_width: usize,
    /// Sentences per shared candidate list.
    pub batch_size: usize,
    pub sentences: usize,
    pub sentence_len: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for DecodeBench {
    fn default() -> Self {
        DecodeBench {
            layers: LayerDims { e: 32, n_enc: 64, n_dec: 64, n_a: 32, d: 32 },
            small_vocab: 30_000,
            large_vocab: 200_000,
            k: 1000,
            k_prime: 10,
            beam_width: 12,
            batch_size: 8,
            sentences: 8,
            sentence_len: 10,
            repetitions: MIN_REPETITIONS,
            seed: 0,
        }
    }
}

/// Inputs shared by every decoding mode.
pub struct DecodeWorkload<'a> {
    pub params: &'a ModelParams,
    pub sources: &'a [Vec<WordId>],
    pub dictionary: &'a Dictionary,
    pub vocab: &'a crate::corpus::Vocabulary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Full,
    Candidate,
    SharedCandidate,
}

/// One pass over the workload. Returns `(decode seconds, list construction
/// seconds, emitted words, mean list size)`; list construction is kept out
/// of the decode time, parameter gathering is not.
pub fn decode_pass(work: &DecodeWorkload<'_>, mode: DecodeMode, spec: &DecodeBench) -> Result<(f64, f64, usize, f64)> {
    let (mut decode_time, mut list_time, mut words, mut list_sizes, mut lists) = (0.0, 0.0, 0usize, 0usize, 0usize);
    let mut run = |sources: &[&[WordId]], list: Option<&CandidateList>| -> Result<()> {
        let start = Instant::now();
        let results = beam_search_batch(work.params, sources, spec.beam_width, None, list)?;
        decode_time += start.elapsed().as_secs_f64();
        words += results.iter().map(|r| r.best.ids.len()).sum::<usize>();
        Ok(())
    };
    match mode {
        DecodeMode::Full => {
            for s in work.sources {
                run(&[s], None)?;
            }
        }
        DecodeMode::Candidate => {
            for s in work.sources {
                let start = Instant::now();
                let list = build_candidate_list(s, work.vocab, work.dictionary, spec.k, spec.k_prime, true)?;
                list_time += start.elapsed().as_secs_f64();
                list_sizes += list.len();
                lists += 1;
                run(&[s], Some(&list))?;
            }
        }
        DecodeMode::SharedCandidate => {
            for chunk in work.sources.chunks(spec.batch_size.max(1)) {
                let refs: Vec<&[WordId]> = chunk.iter().map(Vec::as_slice).collect();
                let start = Instant::now();
                let list = shared_candidate_list(&refs, work.vocab, work.dictionary, spec.k, spec.k_prime, true)?;
                list_time += start.elapsed().as_secs_f64();
                list_sizes += list.len();
                lists += 1;
                run(&refs, Some(&list))?;
            }
        }
    }
    let mean_list = if lists == 0 { work.params.dims.v_tgt as f64 } else { list_sizes as f64 / lists as f64 };
    Ok((decode_time, list_time, words, mean_list))
}

fn id_vocab(size: usize) -> Result<crate::corpus::Vocabulary> {
    let tokens: Vec<Vec<String>> = vec![(N_SPECIALS..size).map(|i| format!("w{i}")).collect()];
    crate::corpus::Vocabulary::build(&tokens, size)
}

/// Seconds per emitted word for the small-vocabulary baseline, the large
/// vocabulary with full softmax, per-sentence candidate lists and shared
/// candidate lists, plus rows for the candidate list construction cost.
pub fn time_decoding(spec: &DecodeBench) -> Result<TimingReport> {
    check_repetitions(spec.repetitions)?;
    let sources =
        zipf_id_sentences(spec.small_vocab.min(spec.large_vocab), spec.sentences, spec.sentence_len, spec.seed)?;
    let dictionary = crate::synth::random_dictionary(
        spec.small_vocab.min(spec.large_vocab),
        spec.large_vocab,
        spec.k_prime.max(1),
        spec.seed,
    )?;
    let mut rows = Vec::new();
    let mut push = |mode: &str, vocab_size: usize, subset_size: usize, samples: &[f64]| {
        let (mean_time, std_dev) = summarize(samples);
        rows.push(TimingRow {
            mode: mode.to_owned(),
            vocab_size,
            subset_size,
            mean_time,
            std_dev,
            repetitions: samples.len(),
        });
    };

    let small = init_params(spec.layers.with_vocab(spec.small_vocab, spec.small_vocab), spec.seed)?;
    let small_vocab = id_vocab(spec.small_vocab)?;
    let work = DecodeWorkload { params: &small, sources: &sources, dictionary: &dictionary, vocab: &small_vocab };
    let samples = repeat(spec, || decode_pass(&work, DecodeMode::Full, spec))?;
    push("baseline", spec.small_vocab, spec.small_vocab, &samples.decode);
    drop(small);

    let large =
        init_params(spec.layers.with_vocab(spec.small_vocab.min(spec.large_vocab), spec.large_vocab), spec.seed)?;
    let large_vocab = id_vocab(spec.large_vocab)?;
    let work = DecodeWorkload { params: &large, sources: &sources, dictionary: &dictionary, vocab: &large_vocab };
    for (mode, name) in [
        (DecodeMode::Full, "full"),
        (DecodeMode::Candidate, "candidate"),
        (DecodeMode::SharedCandidate, "shared_candidate"),
    ] {
        let s = repeat(spec, || decode_pass(&work, mode, spec))?;
        push(name, spec.large_vocab, s.list_size.round() as usize, &s.decode);
        if mode != DecodeMode::Full {
            push(&format!("{name}_list_construction"), spec.large_vocab, s.list_size.round() as usize, &s.list);
        }
    }
    Ok(TimingReport::new(rows))
}

struct Samples {
    decode: Vec<f64>,
    list: Vec<f64>,
    list_size: f64,
}

fn repeat(spec: &DecodeBench, mut pass: impl FnMut() -> Result<(f64, f64, usize, f64)>) -> Result<Samples> {
    pass()?;
    let mut s = Samples { decode: Vec::new(), list: Vec::new(), list_size: 0.0 };
    for _ in 0..spec.repetitions {
        let (decode, list, words, size) = pass()?;
        s.decode.push(decode / words as f64);
        s.list.push(list / words as f64);
        s.list_size = size;
    }
    Ok(s)
}
