//! Tokenized parallel text, frequency-ordered vocabularies and coverage.
//!
//! Sentences are pre-tokenized: a line is split on whitespace and nothing
//! else. Every vocabulary reserves two ids, [`EOS`] at 0 and [`UNK`] at 1;
//! the remaining ids are assigned by descending training frequency with ties
//! broken by lexicographic token order, so id order *is* frequency order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub type WordId = usize;

pub const EOS: WordId = 0;
pub const UNK: WordId = 1;
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";
pub const N_SPECIALS: usize = 2;

/// Splits a pre-tokenized line into tokens.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_owned).collect()
}

/// Reads one tokenized sentence per line.
pub fn read_sentences(path: impl AsRef<Path>) -> Result<Vec<Vec<String>>> {
    let reader = BufReader::new(File::open(path)?);
    reader.lines().map(|line| Ok(tokenize(&line?))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, WordId>,
    id_to_token: Vec<String>,
    counts: Vec<u64>,
}

impl Vocabulary {
    /// Builds a vocabulary holding the specials plus the `max_size - 2` most
    /// frequent tokens of `sentences`.
    pub fn build<S: AsRef<str>>(sentences: &[Vec<S>], max_size: usize) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if max_size < N_SPECIALS {
            return Err(Error::invalid(format!(
                "vocabulary size {max_size} cannot hold the {N_SPECIALS} special tokens"
            )));
        }
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for token in sentences.iter().flatten() {
            *freq.entry(token.as_ref()).or_default() += 1;
        }
        let mut ranked: Vec<(&str, u64)> = freq.into_iter().collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - N_SPECIALS);
        Self::from_ranked(ranked.into_iter().map(|(t, c)| (t.to_owned(), c)))
    }

    /// Assembles a vocabulary from non-special `(token, count)` entries that
    /// are already in id order.
    fn from_ranked(entries: impl IntoIterator<Item = (String, u64)>) -> Result<Self> {
        let mut vocab = Vocabulary { token_to_id: HashMap::new(), id_to_token: Vec::new(), counts: Vec::new() };
        for special in [EOS_TOKEN, UNK_TOKEN] {
            vocab.push(special.to_owned(), 0)?;
        }
        for (token, count) in entries {
            vocab.push(token, count)?;
        }
        Ok(vocab)
    }

    fn push(&mut self, token: String, count: u64) -> Result<()> {
        let id = self.id_to_token.len();
        if self.token_to_id.insert(token.clone(), id).is_some() {
            return Err(Error::invalid(format!("duplicate vocabulary token {token:?}")));
        }
        self.id_to_token.push(token);
        self.counts.push(count);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn n_specials(&self) -> usize {
        N_SPECIALS
    }

    pub fn id(&self, token: &str) -> Option<WordId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: WordId) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Training-corpus frequency of `id`; zero for the specials.
    pub fn count(&self, id: WordId) -> u64 {
        self.counts.get(id).copied().unwrap_or(0)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Maps tokens to ids, sending out-of-vocabulary tokens to [`UNK`].
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S], append_eos: bool) -> Vec<WordId> {
        let mut ids: Vec<WordId> = tokens.iter().map(|t| self.id(t.as_ref()).unwrap_or(UNK)).collect();
        if append_eos {
            ids.push(EOS);
        }
        ids
    }

    pub fn decode(&self, ids: &[WordId]) -> Result<Vec<&str>> {
        ids.iter().map(|&id| self.token(id).ok_or(Error::IdOutOfRange { id, size: self.len() })).collect()
    }

    /// Writes `token<TAB>count` lines in id order, specials included.
    pub fn write_tsv(&self, mut out: impl Write) -> Result<()> {
        for (token, count) in self.id_to_token.iter().zip(&self.counts) {
            writeln!(out, "{token}\t{count}")?;
        }
        Ok(())
    }

    pub fn read_tsv(reader: impl BufRead) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let parse_err = |msg: &str| Error::Parse { line: i + 1, msg: msg.to_owned() };
            let (token, count) = line.rsplit_once('\t').ok_or_else(|| parse_err("expected token<TAB>count"))?;
            let count: u64 = count.parse().map_err(|_| parse_err("count is not an integer"))?;
            match i {
                0 if token == EOS_TOKEN => {}
                1 if token == UNK_TOKEN => {}
                0 | 1 => return Err(parse_err("first two entries must be the special tokens")),
                _ => entries.push((token.to_owned(), count)),
            }
        }
        if entries.windows(2).any(|w| w[0].1 < w[1].1) {
            return Err(Error::Parse { line: 0, msg: "entries are not in frequency order".into() });
        }
        Self::from_ranked(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_tsv(BufReader::new(File::open(path)?))
    }
}

/// Percentage of word tokens whose type is among the `vocab_size - 2` most
/// frequent non-special types of `reference`.
pub fn coverage<S: AsRef<str>>(vocab_size: usize, sentences: &[Vec<S>], reference: &Vocabulary) -> Result<f64> {
    if vocab_size < N_SPECIALS {
        return Err(Error::invalid("coverage needs a vocabulary size of at least 2"));
    }
    let total: usize = sentences.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::EmptyCorpus);
    }
    let covered = sentences
        .iter()
        .flatten()
        .filter(|t| matches!(reference.id(t.as_ref()), Some(id) if id >= N_SPECIALS && id < vocab_size))
        .count();
    Ok(100.0 * covered as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    source: Vec<WordId>,
    target: Vec<WordId>,
}

impl SentencePair {
    /// `target` must end in [`EOS`] and contain it nowhere else.
    pub fn new(source: Vec<WordId>, target: Vec<WordId>) -> Result<Self> {
        if source.is_empty() {
            return Err(Error::invalid("empty source sentence"));
        }
        if target.last() != Some(&EOS) || target.iter().filter(|&&t| t == EOS).count() != 1 {
            return Err(Error::invalid("target must end in exactly one EOS"));
        }
        Ok(SentencePair { source, target })
    }

    pub fn source(&self) -> &[WordId] {
        &self.source
    }

    pub fn target(&self) -> &[WordId] {
        &self.target
    }
}

#[derive(Debug, Clone)]
pub struct ParallelCorpus {
    pairs: Vec<SentencePair>,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<SentencePair>, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> Result<Self> {
        for pair in &pairs {
            for (ids, size) in [(pair.source(), src_vocab.len()), (pair.target(), tgt_vocab.len())] {
                if let Some(&id) = ids.iter().find(|&&id| id >= size) {
                    return Err(Error::IdOutOfRange { id, size });
                }
            }
        }
        Ok(ParallelCorpus { pairs, src_vocab, tgt_vocab })
    }

    /// Encodes token-level sentences with existing vocabularies.
    pub fn encode<S: AsRef<str>>(
        source: &[Vec<S>],
        target: &[Vec<S>],
        src_vocab: Vocabulary,
        tgt_vocab: Vocabulary,
    ) -> Result<Self> {
        if source.len() != target.len() {
            return Err(Error::LengthMismatch { left: source.len(), right: target.len() });
        }
        let pairs = source
            .iter()
            .zip(target)
            .enumerate()
            .map(|(i, (s, t))| {
                SentencePair::new(src_vocab.encode(s, false), tgt_vocab.encode(t, true))
                    .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(pairs, src_vocab, tgt_vocab)
    }

    /// Builds both vocabularies from the data, then encodes it.
    pub fn from_tokens<S: AsRef<str>>(
        source: &[Vec<S>],
        target: &[Vec<S>],
        src_max: usize,
        tgt_max: usize,
    ) -> Result<Self> {
        let src_vocab = Vocabulary::build(source, src_max)?;
        let tgt_vocab = Vocabulary::build(target, tgt_max)?;
        Self::encode(source, target, src_vocab, tgt_vocab)
    }

    pub fn pairs(&self) -> &[SentencePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn src_vocab(&self) -> &Vocabulary {
        &self.src_vocab
    }

    pub fn tgt_vocab(&self) -> &Vocabulary {
        &self.tgt_vocab
    }
}
