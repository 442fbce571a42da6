//! IBM Model 1 lexical translation and the bilingual dictionary built from it.
//!
//! EM runs source→target with a NULL source word. The table starts uniform
//! over the target vocabulary and is stored sparsely: after the first
//! M-step only co-occurring pairs can carry mass. The sentence-final EOS of
//! each target is not aligned, and special tokens never enter the dictionary.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::corpus::{ParallelCorpus, Vocabulary, WordId, EOS, N_SPECIALS};
use crate::error::{Error, Result};

/// Alignment source: a real source word or the NULL word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Source {
    Null,
    Word(WordId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslationTable {
    rows: BTreeMap<Source, BTreeMap<WordId, f64>>,
    /// Corpus log-likelihood before the first iteration and after each one.
    pub log_likelihood: Vec<f64>,
}

impl TranslationTable {
    /// `t(target | source)`, zero for pairs that never co-occur.
    pub fn prob(&self, source: Source, target: WordId) -> f64 {
        self.rows.get(&source).and_then(|r| r.get(&target)).copied().unwrap_or(0.0)
    }

    pub fn row(&self, source: Source) -> Option<&BTreeMap<WordId, f64>> {
        self.rows.get(&source)
    }

    pub fn sources(&self) -> impl Iterator<Item = Source> + '_ {
        self.rows.keys().copied()
    }
}

fn aligned_target(target: &[WordId]) -> &[WordId] {
    match target.split_last() {
        Some((&EOS, rest)) => rest,
        _ => target,
    }
}

fn sources_of(source: &[WordId]) -> impl Iterator<Item = Source> + '_ {
    std::iter::once(Source::Null).chain(source.iter().map(|&s| Source::Word(s)))
}

pub fn train_ibm1(corpus: &ParallelCorpus, iterations: usize) -> Result<TranslationTable> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if iterations == 0 {
        return Err(Error::invalid("iterations must be at least 1"));
    }
    let uniform = 1.0 / corpus.tgt_vocab().len() as f64;
    let mut rows: BTreeMap<Source, BTreeMap<WordId, f64>> = BTreeMap::new();
    for pair in corpus.pairs() {
        for s in sources_of(pair.source()) {
            let row = rows.entry(s).or_default();
            for &t in aligned_target(pair.target()) {
                row.insert(t, uniform);
            }
        }
    }

    let mut log_likelihood = Vec::with_capacity(iterations + 1);
    for _ in 0..iterations {
        let mut counts: BTreeMap<Source, BTreeMap<WordId, f64>> = BTreeMap::new();
        let mut ll = 0.0;
        for pair in corpus.pairs() {
            let norm = (pair.source().len() + 1) as f64;
            for &t in aligned_target(pair.target()) {
                let total: f64 = sources_of(pair.source()).map(|s| rows[&s][&t]).sum();
                ll += (total / norm).ln();
                for s in sources_of(pair.source()) {
                    *counts.entry(s).or_default().entry(t).or_insert(0.0) += rows[&s][&t] / total;
                }
            }
        }
        log_likelihood.push(ll);
        for (s, row) in rows.iter_mut() {
            let c = &counts[s];
            let z: f64 = c.values().sum();
            for (t, p) in row.iter_mut() {
                *p = c[t] / z;
            }
        }
    }
    let mut table = TranslationTable { rows, log_likelihood };
    let final_ll = corpus_log_likelihood(&table, corpus);
    table.log_likelihood.push(final_ll);
    Ok(table)
}

/// `Σ_pairs Σ_j log( Σ_i t(f_j | e_i) / (l + 1) )` with `e_0` the NULL word.
pub fn corpus_log_likelihood(table: &TranslationTable, corpus: &ParallelCorpus) -> f64 {
    corpus
        .pairs()
        .iter()
        .map(|pair| {
            let norm = (pair.source().len() + 1) as f64;
            aligned_target(pair.target())
                .iter()
                .map(|&t| (sources_of(pair.source()).map(|s| table.prob(s, t)).sum::<f64>() / norm).ln())
                .sum::<f64>()
        })
        .sum()
}

/// Ranked translations per source word.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dictionary {
    entries: BTreeMap<WordId, Vec<(WordId, f64)>>,
}

impl Dictionary {
    /// Builds a dictionary from explicit rankings, which must already be in
    /// descending probability with ties on the smaller target id.
    pub fn from_entries(entries: BTreeMap<WordId, Vec<(WordId, f64)>>) -> Result<Self> {
        for list in entries.values() {
            if list.windows(2).any(|w| rank_order(&w[0], &w[1]) != std::cmp::Ordering::Less) {
                return Err(Error::invalid("dictionary entries out of rank order"));
            }
        }
        Ok(Dictionary { entries })
    }

    pub fn entries(&self, source: WordId) -> &[(WordId, f64)] {
        self.entries.get(&source).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (WordId, &[(WordId, f64)])> {
        self.entries.iter().map(|(&s, v)| (s, v.as_slice()))
    }

    pub fn write(&self, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary, mut out: impl Write) -> Result<()> {
        for (s, list) in &self.entries {
            let s_tok = token(src_vocab, *s)?;
            for (t, p) in list {
                writeln!(out, "{s_tok}\t{}\t{p:.6}", token(tgt_vocab, *t)?)?;
            }
        }
        Ok(())
    }

    pub fn read(src_vocab: &Vocabulary, tgt_vocab: &Vocabulary, reader: impl BufRead) -> Result<Self> {
        let mut entries: BTreeMap<WordId, Vec<(WordId, f64)>> = BTreeMap::new();
        let mut last: Option<WordId> = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse { line: i + 1, msg };
            let fields: Vec<&str> = line.split('\t').collect();
            let [s, t, p] = fields[..] else {
                return Err(parse_err(format!("expected 3 tab-separated fields, found {}", fields.len())));
            };
            let s = src_vocab.id(s).ok_or_else(|| parse_err(format!("source token {s:?} not in vocabulary")))?;
            let t = tgt_vocab.id(t).ok_or_else(|| parse_err(format!("target token {t:?} not in vocabulary")))?;
            let p: f64 = p.parse().map_err(|_| parse_err(format!("bad probability {p:?}")))?;
            if !(0.0..=1.0).contains(&p) {
                return Err(parse_err(format!("probability {p} outside [0, 1]")));
            }
            if last != Some(s) && entries.contains_key(&s) {
                return Err(parse_err("entries for a source word are not contiguous".into()));
            }
            last = Some(s);
            entries.entry(s).or_default().push((t, p));
        }
        // Rounding to 6 places can create ties that the ranking resolved by
        // the unrounded value, so order is kept as written.
        Ok(Dictionary { entries })
    }

    pub fn load(src_vocab: &Vocabulary, tgt_vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read(src_vocab, tgt_vocab, std::io::BufReader::new(file))
    }
}

fn token(vocab: &Vocabulary, id: WordId) -> Result<&str> {
    vocab.token(id).ok_or(Error::IdOutOfRange { id, size: vocab.len() })
}

fn rank_order(a: &(WordId, f64), b: &(WordId, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

pub fn build_dictionary(table: &TranslationTable, max_entries: usize, min_prob: f64) -> Result<Dictionary> {
    if max_entries == 0 {
        return Err(Error::invalid("max_entries must be at least 1"));
    }
    let mut entries = BTreeMap::new();
    for (source, row) in &table.rows {
        let Source::Word(s) = *source else { continue };
        if s < N_SPECIALS {
            continue;
        }
        let mut list: Vec<(WordId, f64)> =
            row.iter().filter(|&(&t, &p)| t >= N_SPECIALS && p >= min_prob).map(|(&t, &p)| (t, p)).collect();
        list.sort_by(rank_order);
        list.truncate(max_entries);
        if !list.is_empty() {
            entries.insert(s, list);
        }
    }
    Ok(Dictionary { entries })
}

pub fn most_likely_translation(dictionary: &Dictionary, source: WordId) -> Option<WordId> {
    dictionary.entries(source).first().map(|&(t, _)| t)
}
