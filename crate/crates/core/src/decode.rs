//! Beam search over the full vocabulary or a candidate list, and unknown
//! word replacement.
//!
//! A step expands every live hypothesis over the candidate set and keeps the
//! `beam_width` best expansions by cumulative log-probability, ties going to
//! the smaller token id and then to the earlier parent. Kept expansions that
//! end in EOS are set aside as finished; the rest form the next beam. At
//! `max_len` only EOS may be emitted, so every surviving hypothesis finishes.
//! The search stops once `beam_width` hypotheses have finished. Hypotheses
//! are ranked by `log_prob / length`, EOS included in the length.
//!
//! All live hypotheses of a step, across every sentence of a batch, share
//! one matrix product against the gathered output parameters.

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView2, Axis};

use crate::align::{most_likely_translation, Dictionary};
use crate::corpus::{Vocabulary, WordId, EOS, N_SPECIALS, UNK};
use crate::error::{Error, Result};
use crate::eval::{bleu, BleuScore};
use crate::model::{decode_rows, decode_step, encode_source, initial_state, EncoderStates, ModelParams};
use crate::softmax::{batch_energies, log_softmax_rows, truncated_softmax, Subset};

pub const DEFAULT_BEAM: usize = 12;

/// Default length cap: twice the source length plus five.
pub fn default_max_len(source_len: usize) -> usize {
    2 * source_len + 5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Origin {
    Frequent,
    Dictionary,
    Special,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateList {
    ids: Vec<WordId>,
    origins: Vec<Origin>,
}

impl CandidateList {
    pub fn ids(&self) -> &[WordId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn origin(&self, id: WordId) -> Option<Origin> {
        self.ids.binary_search(&id).ok().map(|i| self.origins[i])
    }

    pub fn subset(&self, vocab_size: usize) -> Subset {
        Subset::from_ids_within(self.ids.iter().copied(), vocab_size)
    }

    fn from_map(map: BTreeMap<WordId, Origin>) -> Self {
        let (ids, origins) = map.into_iter().unzip();
        CandidateList { ids, origins }
    }
}

fn insert(map: &mut BTreeMap<WordId, Origin>, id: WordId, origin: Origin) {
    let slot = map.entry(id).or_insert(origin);
    *slot = (*slot).min(origin);
}

/// Target ids `N_SPECIALS .. N_SPECIALS + k` are the `k` most frequent
/// words; the special tokens do not count against `k`.
pub fn build_candidate_list(
    source_ids: &[WordId],
    tgt_vocab: &Vocabulary,
    dictionary: &Dictionary,
    k: usize,
    k_prime: usize,
    include_unk: bool,
) -> Result<CandidateList> {
    if k + k_prime == 0 {
        return Err(Error::invalid("K + K' must be at least 1"));
    }
    let v = tgt_vocab.len();
    let mut map = BTreeMap::new();
    for id in N_SPECIALS..(N_SPECIALS + k).min(v) {
        map.insert(id, Origin::Frequent);
    }
    for &s in source_ids {
        for &(t, _) in dictionary.entries(s).iter().take(k_prime) {
            if t < v {
                insert(&mut map, t, Origin::Dictionary);
            }
        }
    }
    map.insert(EOS, Origin::Special);
    if include_unk {
        map.insert(UNK, Origin::Special);
    }
    Ok(CandidateList::from_map(map))
}

/// One list covering a whole batch: the union of the per-sentence lists.
pub fn shared_candidate_list(
    sources: &[&[WordId]],
    tgt_vocab: &Vocabulary,
    dictionary: &Dictionary,
    k: usize,
    k_prime: usize,
    include_unk: bool,
) -> Result<CandidateList> {
    if sources.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let all: Vec<WordId> = sources.iter().flat_map(|s| s.iter().copied()).collect();
    build_candidate_list(&all, tgt_vocab, dictionary, k, k_prime, include_unk)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub ids: Vec<WordId>,
    pub log_prob: f64,
    pub score: f64,
    pub attn_argmax: Vec<usize>,
}

impl Hypothesis {
    pub fn is_finished(&self) -> bool {
        self.ids.last() == Some(&EOS)
    }

    /// Emitted ids without the final EOS.
    pub fn words(&self) -> &[WordId] {
        match self.ids.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.ids,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamResult {
    pub best: Hypothesis,
    /// Finished hypotheses by descending score; ties keep finishing order.
    pub n_best: Vec<Hypothesis>,
}

#[derive(Debug, Clone)]
struct Live {
    ids: Vec<WordId>,
    log_prob: f64,
    attn_argmax: Vec<usize>,
    z: Array1<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Expansion {
    log_prob: f64,
    column: usize,
    parent: usize,
}

/// Strict "ranks before": higher log-prob, then smaller token (column
/// order equals id order), then earlier parent.
fn ranks_before(a: &Expansion, b: &Expansion) -> bool {
    match a.log_prob.total_cmp(&b.log_prob) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => (a.column, a.parent) < (b.column, b.parent),
    }
}

/// Inserts into a list kept sorted best-first and capped at `k`.
fn push_top(top: &mut Vec<Expansion>, e: Expansion, k: usize) {
    if top.len() == k && !ranks_before(&e, top.last().expect("k >= 1")) {
        return;
    }
    let at = top.partition_point(|x| ranks_before(x, &e));
    top.insert(at, e);
    top.truncate(k);
}

struct SentenceBeam {
    enc: EncoderStates,
    max_len: usize,
    live: Vec<Live>,
    finished: Vec<Hypothesis>,
}

impl SentenceBeam {
    fn done(&self, beam_width: usize) -> bool {
        self.live.is_empty() || self.finished.len() >= beam_width
    }
}

fn finish(mut hyps: Vec<Hypothesis>) -> Result<BeamResult> {
    // Stable sort keeps finishing order among equal scores.
    hyps.sort_by(|a, b| b.score.total_cmp(&a.score));
    let best = hyps.first().cloned().ok_or(Error::NonFinite("no hypothesis finished"))?;
    Ok(BeamResult { best, n_best: hyps })
}

/// Beam search for a batch of sentences sharing one candidate set
/// (`None` is the full vocabulary). `max_len` of `None` applies
/// [`default_max_len`] per sentence.
pub fn beam_search_batch(
    params: &ModelParams,
    sources: &[&[WordId]],
    beam_width: usize,
    max_len: Option<usize>,
    candidates: Option<&CandidateList>,
) -> Result<Vec<BeamResult>> {
    if beam_width == 0 {
        return Err(Error::invalid("beam width must be at least 1"));
    }
    if max_len == Some(0) {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let v = params.dims.v_tgt;
    let subset = match candidates {
        Some(list) => {
            if !list.ids().contains(&EOS) {
                return Err(Error::invalid("candidate list lacks EOS"));
            }
            list.subset(v)
        }
        None => Subset::full(v),
    };
    let (words, biases) = subset.gather(&params.output)?;
    let eos_column = subset.position(EOS).expect("EOS is a member");

    let mut beams = sources
        .iter()
        .map(|&source| {
            let enc = encode_source(params, source)?;
            let z = initial_state(params, &enc);
            Ok(SentenceBeam {
                enc,
                max_len: max_len.unwrap_or_else(|| default_max_len(source.len())),
                live: vec![Live { ids: Vec::new(), log_prob: 0.0, attn_argmax: Vec::new(), z }],
                finished: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    loop {
        let active: Vec<usize> = (0..beams.len()).filter(|&b| !beams[b].done(beam_width)).collect();
        if active.is_empty() {
            break;
        }
        let inputs: Vec<_> = active
            .iter()
            .flat_map(|&b| {
                let beam = &beams[b];
                beam.live.iter().map(move |hyp| (hyp.ids.last().copied().unwrap_or(EOS), hyp.z.view(), &beam.enc))
            })
            .collect();
        let step = decode_rows(params, &inputs)?;
        drop(inputs);
        let mut log_probs = batch_energies(step.phi.view(), words.view(), biases.view());
        log_softmax_rows(&mut log_probs)?;

        let mut row0 = 0;
        for &b in &active {
            let beam = &mut beams[b];
            let n = beam.live.len();
            let block = log_probs.slice(ndarray::s![row0..row0 + n, ..]);
            let forced_eos = beam.live[0].ids.len() + 1 >= beam.max_len;
            let chosen = select(&beam.live, block, beam_width, forced_eos.then_some(eos_column));
            let mut next = Vec::with_capacity(chosen.len());
            for e in chosen {
                let parent = &beam.live[e.parent];
                let row = row0 + e.parent;
                let token = subset.ids()[e.column];
                let mut ids = parent.ids.clone();
                ids.push(token);
                let mut attn_argmax = parent.attn_argmax.clone();
                attn_argmax.push(step.attention[row].argmax_pos);
                if token == EOS {
                    let score = e.log_prob / ids.len() as f64;
                    beam.finished.push(Hypothesis { ids, log_prob: e.log_prob, score, attn_argmax });
                } else {
                    next.push(Live { ids, log_prob: e.log_prob, attn_argmax, z: step.z.row(row).to_owned() });
                }
            }
            row0 += n;
            beam.live = next;
        }
    }
    beams.into_iter().map(|b| finish(b.finished)).collect()
}

fn select(live: &[Live], log_probs: ArrayView2<f64>, k: usize, only: Option<usize>) -> Vec<Expansion> {
    let mut top = Vec::with_capacity(k + 1);
    for (parent, (hyp, row)) in live.iter().zip(log_probs.axis_iter(Axis(0))).enumerate() {
        if let Some(column) = only {
            push_top(&mut top, Expansion { log_prob: hyp.log_prob + row[column], column, parent }, k);
            continue;
        }
        // A parent contributes at most k expansions, so its own top k
        // suffice; the threshold check skips most columns cheaply.
        let mut local: Vec<Expansion> = Vec::with_capacity(k + 1);
        for (column, &lp) in row.iter().enumerate() {
            let e = Expansion { log_prob: hyp.log_prob + lp, column, parent };
            push_top(&mut local, e, k);
        }
        for e in local {
            push_top(&mut top, e, k);
        }
    }
    top
}

pub fn beam_search(
    params: &ModelParams,
    source: &[WordId],
    beam_width: usize,
    max_len: Option<usize>,
    candidates: Option<&CandidateList>,
) -> Result<BeamResult> {
    Ok(beam_search_batch(params, &[source], beam_width, max_len, candidates)?.remove(0))
}

/// Argmax decoding, one token at a time, with EOS forced at `max_len`.
pub fn greedy_decode(
    params: &ModelParams,
    source: &[WordId],
    max_len: Option<usize>,
    candidates: Option<&CandidateList>,
) -> Result<Hypothesis> {
    let enc = encode_source(params, source)?;
    let max_len = max_len.unwrap_or_else(|| default_max_len(source.len()));
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let subset = candidates.map_or_else(|| Subset::full(params.dims.v_tgt), |c| c.subset(params.dims.v_tgt));
    let mut z = initial_state(params, &enc);
    let (mut ids, mut attn_argmax, mut log_prob) = (Vec::new(), Vec::new(), 0.0);
    let mut y_prev = EOS;
    loop {
        let step = decode_step(params, y_prev, z.view(), &enc)?;
        let p = truncated_softmax(&params.output, step.phi.view(), &subset)?;
        let column = if ids.len() + 1 >= max_len {
            subset.position(EOS).ok_or_else(|| Error::invalid("candidate list lacks EOS"))?
        } else {
            // First maximal column, which is the smallest id.
            p.iter().enumerate().fold(0, |best, (i, &x)| if x > p[best] { i } else { best })
        };
        y_prev = subset.ids()[column];
        log_prob += p[column].ln();
        ids.push(y_prev);
        attn_argmax.push(step.attention.argmax_pos);
        z = step.z;
        if y_prev == EOS {
            break;
        }
    }
    let score = log_prob / ids.len() as f64;
    Ok(Hypothesis { ids, log_prob, score, attn_argmax })
}

fn starts_lowercase(token: &str) -> bool {
    token.chars().next().is_some_and(char::is_lowercase)
}

/// Maps a hypothesis to target tokens, replacing each UNK by way of the
/// source word it attended to most: a lowercase-initial word with a
/// dictionary entry becomes its most likely translation, anything else is
/// copied. The final EOS is dropped.
pub fn replace_unk<S: AsRef<str>>(
    hypothesis: &Hypothesis,
    source_tokens: &[S],
    dictionary: &Dictionary,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Result<Vec<String>> {
    if hypothesis.attn_argmax.len() != hypothesis.ids.len() {
        return Err(Error::LengthMismatch { left: hypothesis.ids.len(), right: hypothesis.attn_argmax.len() });
    }
    hypothesis
        .words()
        .iter()
        .zip(&hypothesis.attn_argmax)
        .map(|(&id, &pos)| {
            if id != UNK {
                return tgt_vocab.token(id).map(str::to_owned).ok_or(Error::IdOutOfRange { id, size: tgt_vocab.len() });
            }
            let source =
                source_tokens.get(pos).ok_or(Error::IdOutOfRange { id: pos, size: source_tokens.len() })?.as_ref();
            let translation = starts_lowercase(source)
                .then(|| src_vocab.id(source))
                .flatten()
                .and_then(|s| most_likely_translation(dictionary, s))
                .and_then(|t| tgt_vocab.token(t));
            Ok(translation.unwrap_or(source).to_owned())
        })
        .collect()
}

/// Target tokens of a hypothesis without replacement; UNK stays `<unk>`.
pub fn detokenize(hypothesis: &Hypothesis, tgt_vocab: &Vocabulary) -> Result<Vec<String>> {
    Ok(tgt_vocab.decode(hypothesis.words())?.into_iter().map(str::to_owned).collect())
}

/// Candidate list settings for [`translate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CandidateOptions {
    pub k: usize,
    pub k_prime: usize,
    pub include_unk: bool,
    /// One list per batch instead of one per sentence.
    pub shared: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TranslateOptions {
    pub beam_width: usize,
    pub max_len: Option<usize>,
    /// `None` decodes over the full target vocabulary.
    pub candidates: Option<CandidateOptions>,
    pub replace_unk: bool,
    /// Sentences decoded together; with the full vocabulary or shared lists
    /// they share one matrix product per step.
    pub batch_size: usize,
}

impl Default for TranslateOptions {
    fn default() -> Self {
        TranslateOptions {
            beam_width: DEFAULT_BEAM,
            max_len: None,
            candidates: None,
            replace_unk: false,
            batch_size: 16,
        }
    }
}

/// Decodes tokenized sentences to target tokens.
pub fn translate<S: AsRef<str>>(
    params: &ModelParams,
    sources: &[Vec<S>],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    dictionary: &Dictionary,
    options: &TranslateOptions,
) -> Result<Vec<Vec<String>>> {
    if (src_vocab.len(), tgt_vocab.len()) != (params.dims.v_src, params.dims.v_tgt) {
        return Err(Error::Shape(format!(
            "vocabularies of {} and {} words for a model with {} and {}",
            src_vocab.len(),
            tgt_vocab.len(),
            params.dims.v_src,
            params.dims.v_tgt
        )));
    }
    if options.batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let ids: Vec<Vec<WordId>> = sources.iter().map(|s| src_vocab.encode(s, false)).collect();
    if let Some(line) = ids.iter().position(Vec::is_empty) {
        return Err(Error::Parse { line: line + 1, msg: "empty source sentence".into() });
    }
    let mut out = Vec::with_capacity(sources.len());
    for (chunk, tokens) in ids.chunks(options.batch_size).zip(sources.chunks(options.batch_size)) {
        let batch: Vec<&[WordId]> = chunk.iter().map(Vec::as_slice).collect();
        let results = match options.candidates {
            None => beam_search_batch(params, &batch, options.beam_width, options.max_len, None)?,
            Some(c) if c.shared => {
                let list = shared_candidate_list(&batch, tgt_vocab, dictionary, c.k, c.k_prime, c.include_unk)?;
                beam_search_batch(params, &batch, options.beam_width, options.max_len, Some(&list))?
            }
            Some(c) => batch
                .iter()
                .map(|source| {
                    let list = build_candidate_list(source, tgt_vocab, dictionary, c.k, c.k_prime, c.include_unk)?;
                    beam_search(params, source, options.beam_width, options.max_len, Some(&list))
                })
                .collect::<Result<_>>()?,
        };
        for (result, source_tokens) in results.iter().zip(tokens) {
            out.push(if options.replace_unk {
                replace_unk(&result.best, source_tokens, dictionary, src_vocab, tgt_vocab)?
            } else {
                detokenize(&result.best, tgt_vocab)?
            });
        }
    }
    Ok(out)
}

/// BLEU for each `K'` in `k_primes`, with UNK replacement on. The candidate
/// settings of `options` supply `K` and the list flags.
#[allow(clippy::too_many_arguments)]
pub fn sweep_k_prime<S: AsRef<str>>(
    params: &ModelParams,
    sources: &[Vec<S>],
    references: &[Vec<String>],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    dictionary: &Dictionary,
    k_primes: &[usize],
    options: &TranslateOptions,
) -> Result<Vec<(usize, BleuScore)>> {
    let base = options.candidates.ok_or_else(|| Error::invalid("the sweep needs candidate list settings"))?;
    k_primes
        .iter()
        .map(|&k_prime| {
            let run = TranslateOptions {
                candidates: Some(CandidateOptions { k_prime, ..base }),
                replace_unk: true,
                ..*options
            };
            let hyps = translate(params, sources, src_vocab, tgt_vocab, dictionary, &run)?;
            Ok((k_prime, bleu(&hyps, references)?))
        })
        .collect()
}
