//! Corpus partitioning for the truncated softmax.
//!
//! Pairs are visited in a given order and their target words accumulated
//! until the number of unique target words reaches `tau`; the pair that
//! crosses the threshold belongs to the partition it closes. Each partition
//! therefore covers every target word of its own pairs. [`EOS`] ends every
//! target sentence, so it is always a member of the subset but is not counted
//! against `tau`.
//!
//! Reshuffling draws a permutation with [`ChaCha8Rng`] seeded by
//! `seed_from_u64(seed)` and a Fisher-Yates shuffle (`SliceRandom::shuffle`).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{ParallelCorpus, WordId, EOS};
use crate::error::{Error, Result};
use crate::softmax::Subset;

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// Range of positions in [`Partitioning::ordering`].
    pub pair_range: Range<usize>,
    pub subset: Subset,
}

impl Partition {
    /// Number of unique target words counted against the threshold.
    pub fn word_count(&self) -> usize {
        self.subset.len() - usize::from(self.subset.contains(EOS))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partitioning {
    pub ordering: Vec<usize>,
    pub partitions: Vec<Partition>,
}

impl Partitioning {
    /// Corpus indices of the pairs in `partition`.
    pub fn pairs_of(&self, partition: &Partition) -> &[usize] {
        &self.ordering[partition.pair_range.clone()]
    }

    /// Tab-separated report: one line per partition, then a histogram of
    /// subset sizes as `#`-prefixed lines.
    pub fn report(&self) -> String {
        let mut out = String::from("partition\tstart\tend\tpairs\tsubset_size\n");
        for (i, p) in self.partitions.iter().enumerate() {
            let _ = writeln!(
                out,
                "{i}\t{}\t{}\t{}\t{}",
                p.pair_range.start,
                p.pair_range.end,
                p.pair_range.len(),
                p.subset.len()
            );
        }
        let sizes: Vec<usize> = self.partitions.iter().map(|p| p.subset.len()).collect();
        let (min, max) = (sizes.iter().min().copied().unwrap_or(0), sizes.iter().max().copied().unwrap_or(0));
        let mean = sizes.iter().sum::<usize>() as f64 / sizes.len().max(1) as f64;
        let _ = writeln!(out, "# partitions\t{}\tmin\t{min}\tmax\t{max}\tmean\t{mean:.1}", sizes.len());
        let _ = writeln!(out, "# histogram\tlow\thigh\tcount");
        let bins = 10usize;
        let width = ((max - min) / bins).max(1);
        let mut counts = vec![0usize; bins];
        for &s in &sizes {
            counts[((s - min) / width).min(bins - 1)] += 1;
        }
        for (b, c) in counts.iter().enumerate() {
            let low = min + b * width;
            let high = if b + 1 == bins { max } else { low + width - 1 };
            if *c > 0 {
                let _ = writeln!(out, "# histogram\t{low}\t{high}\t{c}");
            }
        }
        out
    }
}

/// Uniform proposal over a partition's subset.
#[derive(Debug, Clone, Copy)]
pub struct Proposal<'a> {
    subset: &'a Subset,
}

impl Proposal<'_> {
    pub fn mass(&self, id: WordId) -> f64 {
        if self.subset.contains(id) {
            1.0 / self.subset.len() as f64
        } else {
            0.0
        }
    }
}

pub fn proposal_of(partition: &Partition) -> Proposal<'_> {
    Proposal { subset: &partition.subset }
}

pub fn partition_corpus(corpus: &ParallelCorpus, tau: usize, ordering: Vec<usize>) -> Result<Partitioning> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if tau == 0 {
        return Err(Error::invalid("tau must be at least 1"));
    }
    let n = corpus.len();
    let mut seen = vec![false; n];
    if ordering.len() != n || !ordering.iter().all(|&i| i < n && !std::mem::replace(&mut seen[i], true)) {
        return Err(Error::invalid("ordering is not a permutation of the corpus"));
    }

    let mut partitions = Vec::new();
    let mut words: BTreeSet<WordId> = BTreeSet::new();
    let mut start = 0;
    for (pos, &pair) in ordering.iter().enumerate() {
        words.extend(corpus.pairs()[pair].target().iter().copied().filter(|&t| t != EOS));
        if words.len() >= tau || pos + 1 == n {
            let members = std::mem::take(&mut words);
            partitions.push(Partition {
                pair_range: start..pos + 1,
                subset: Subset::from_ids(members.into_iter().chain([EOS])),
            });
            start = pos + 1;
        }
    }
    Ok(Partitioning { ordering, partitions })
}

/// The seed-determined permutation used by [`reshuffle_and_repartition`].
pub fn shuffled_ordering(n: usize, seed: u64) -> Vec<usize> {
    let mut ordering: Vec<usize> = (0..n).collect();
    ordering.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ordering
}

pub fn reshuffle_and_repartition(corpus: &ParallelCorpus, tau: usize, seed: u64) -> Result<Partitioning> {
    partition_corpus(corpus, tau, shuffled_ordering(corpus.len(), seed))
}
