//! Output-layer math: energies, the exact softmax and its gradient, the
//! self-normalized importance-sampling estimate of the expected energy
//! gradient, and the softmax truncated to a subset of the vocabulary.
//!
//! The energy of word `k` under feature `phi` is `w_k · phi + b_k`. Every
//! normalization subtracts the maximum energy before exponentiating.
//!
//! Gradient conventions: [`full_log_prob_grad`] and
//! [`sampled_log_prob_and_grad`] return the gradient of the *log-probability*
//! (the ascent direction). The training objective is its negation.

use std::cell::Cell;
use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, CowArray, Ix2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::WordId;
use crate::error::{Error, Result};

/// Target word vectors `w_k` (one row per word) and biases `b_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputParams {
    pub word_vectors: Array2<f64>,
    pub biases: Array1<f64>,
}

impl OutputParams {
    pub fn new(word_vectors: Array2<f64>, biases: Array1<f64>) -> Result<Self> {
        if word_vectors.nrows() != biases.len() {
            return Err(Error::Shape(format!("{} word vectors but {} biases", word_vectors.nrows(), biases.len())));
        }
        Ok(OutputParams { word_vectors, biases })
    }

    pub fn vocab_size(&self) -> usize {
        self.biases.len()
    }

    pub fn dim(&self) -> usize {
        self.word_vectors.ncols()
    }

    fn check_phi(&self, phi: ArrayView1<f64>) -> Result<()> {
        if phi.len() != self.dim() {
            return Err(Error::Shape(format!(
                "feature of length {} for word vectors of dimension {}",
                phi.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    fn check_id(&self, id: WordId) -> Result<()> {
        if id >= self.vocab_size() {
            return Err(Error::IdOutOfRange { id, size: self.vocab_size() });
        }
        Ok(())
    }
}

/// A sorted set of target ids over which a softmax is normalized.
///
/// `Subset::full(n)` is the whole vocabulary; it shares the code path of a
/// proper subset but reads the parameter matrix in place instead of gathering
/// rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Subset {
    ids: Vec<WordId>,
    position: Option<HashMap<WordId, usize>>,
}

impl Subset {
    pub fn full(vocab_size: usize) -> Self {
        Subset { ids: (0..vocab_size).collect(), position: None }
    }

    pub fn from_ids(ids: impl IntoIterator<Item = WordId>) -> Self {
        let mut ids: Vec<WordId> = ids.into_iter().collect();
        ids.sort_unstable();
        ids.dedup();
        let position = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Subset { ids, position: Some(position) }
    }

    /// Like [`Subset::from_ids`], but collapses to [`Subset::full`] when the
    /// ids are exactly `0..vocab_size`.
    pub fn from_ids_within(ids: impl IntoIterator<Item = WordId>, vocab_size: usize) -> Self {
        let subset = Self::from_ids(ids);
        if subset.len() == vocab_size && subset.ids.last() == Some(&(vocab_size - 1)) {
            Self::full(vocab_size)
        } else {
            subset
        }
    }

    pub fn ids(&self) -> &[WordId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.position.is_none()
    }

    pub fn position(&self, id: WordId) -> Option<usize> {
        match &self.position {
            None => (id < self.ids.len()).then_some(id),
            Some(map) => map.get(&id).copied(),
        }
    }

    pub fn contains(&self, id: WordId) -> bool {
        self.position(id).is_some()
    }

    /// Word vectors and biases of the members, in member order.
    pub fn gather<'a>(
        &self,
        params: &'a OutputParams,
    ) -> Result<(CowArray<'a, f64, Ix2>, CowArray<'a, f64, ndarray::Ix1>)> {
        if let Some(&last) = self.ids.last() {
            params.check_id(last)?;
        }
        if self.is_full() && self.len() == params.vocab_size() {
            return Ok((params.word_vectors.view().into(), params.biases.view().into()));
        }
        Ok((params.word_vectors.select(Axis(0), &self.ids).into(), params.biases.select(Axis(0), &self.ids).into()))
    }
}

thread_local! {
    static GEMM_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of matrix-matrix products issued by [`batch_energies`] and
/// [`batch_output_backward`] on this thread so far.
pub fn gemm_calls() -> usize {
    GEMM_CALLS.with(Cell::get)
}

fn count_gemm() {
    GEMM_CALLS.with(|c| c.set(c.get() + 1));
}

/// Energies of every member of a gathered subset for a stack of features:
/// one row per feature, one column per member. A single matrix product.
pub fn batch_energies(features: ArrayView2<f64>, words: ArrayView2<f64>, biases: ArrayView1<f64>) -> Array2<f64> {
    count_gemm();
    let mut energies = row_major(features.dot(&words.t()));
    energies += &biases;
    energies
}

/// Degenerate shapes can make a matrix product come out column-major.
fn row_major(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Feature and parameter gradients for a stack of energy gradients: returns
/// `(d_features, d_words)` with `d_features = dE · W` and `d_words = dEᵀ · Φ`.
pub fn batch_output_backward(
    d_energies: ArrayView2<f64>,
    features: ArrayView2<f64>,
    words: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    count_gemm();
    let d_features = row_major(d_energies.dot(&words));
    count_gemm();
    let d_words = row_major(d_energies.t().dot(&features));
    (d_features, d_words)
}

/// In-place stabilized softmax over a slice; returns the log normalizer
/// `log Σ exp(x)`.
pub(crate) fn softmax_in_place(values: &mut [f64]) -> Result<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("energies"));
    }
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
    Ok(max + sum.ln())
}

/// `w_word · phi + b_word`.
pub fn energy(params: &OutputParams, phi: ArrayView1<f64>, word: WordId) -> Result<f64> {
    params.check_id(word)?;
    params.check_phi(phi)?;
    Ok(params.word_vectors.row(word).dot(&phi) + params.biases[word])
}

fn all_energies(params: &OutputParams, phi: ArrayView1<f64>) -> Result<Array1<f64>> {
    params.check_phi(phi)?;
    if params.vocab_size() == 0 {
        return Err(Error::invalid("empty output vocabulary"));
    }
    Ok(params.word_vectors.dot(&phi) + &params.biases)
}

/// Output distribution over the whole vocabulary.
pub fn full_softmax(params: &OutputParams, phi: ArrayView1<f64>) -> Result<Array1<f64>> {
    let mut p = all_energies(params, phi)?;
    softmax_in_place(p.as_slice_mut().expect("contiguous"))?;
    Ok(p)
}

/// Gradient of `log p(target)` with respect to the feature and every output
/// parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct FullGradient {
    pub d_phi: Array1<f64>,
    pub d_words: Array2<f64>,
    pub d_biases: Array1<f64>,
}

pub fn full_log_prob_grad(params: &OutputParams, phi: ArrayView1<f64>, target: WordId) -> Result<FullGradient> {
    params.check_id(target)?;
    let p = full_softmax(params, phi)?;
    let mut d_biases = -&p;
    d_biases[target] += 1.0;
    let d_phi = d_biases.dot(&params.word_vectors);
    let d_words = outer(d_biases.view(), phi);
    Ok(FullGradient { d_phi, d_words, d_biases })
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let col = a.insert_axis(Axis(1));
    let row = b.insert_axis(Axis(0));
    &col * &row
}

/// `E[∇E(y)]` under some distribution over words, per parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyGradient {
    /// Gradient with respect to the feature: a weighted mean of word vectors.
    pub d_phi: Array1<f64>,
    /// Row `k` is `weight_k · phi`.
    pub d_words: Array2<f64>,
    /// Entry `k` is `weight_k`.
    pub d_biases: Array1<f64>,
}

impl EnergyGradient {
    fn from_weights(params: &OutputParams, phi: ArrayView1<f64>, weights: Array1<f64>) -> Self {
        EnergyGradient {
            d_phi: weights.dot(&params.word_vectors),
            d_words: outer(weights.view(), phi),
            d_biases: weights,
        }
    }
}

/// Exact expected energy gradient under the model distribution: the negative
/// term of the log-probability gradient.
pub fn expected_energy_grad(params: &OutputParams, phi: ArrayView1<f64>) -> Result<EnergyGradient> {
    let p = full_softmax(params, phi)?;
    Ok(EnergyGradient::from_weights(params, phi, p))
}

/// Self-normalized importance weights `ω_k / Σ ω` with
/// `ω_k = exp(E_k - log Q_k)`.
pub fn importance_weights(energies: &[f64], proposal_log_mass: &[f64]) -> Result<Vec<f64>> {
    if energies.len() != proposal_log_mass.len() {
        return Err(Error::LengthMismatch { left: energies.len(), right: proposal_log_mass.len() });
    }
    if energies.is_empty() {
        return Err(Error::invalid("importance weights need at least one sample"));
    }
    if proposal_log_mass.iter().any(|q| !q.is_finite()) {
        return Err(Error::invalid("proposal mass must be strictly positive"));
    }
    let mut w: Vec<f64> = energies.iter().zip(proposal_log_mass).map(|(e, q)| e - q).collect();
    softmax_in_place(&mut w)?;
    Ok(w)
}

/// Importance-sampling estimate of [`expected_energy_grad`] from the drawn
/// words `sample` with proposal log-masses `log_q`. Repeated ids are
/// separate draws.
pub fn self_normalized_estimate(
    params: &OutputParams,
    phi: ArrayView1<f64>,
    sample: &[WordId],
    log_q: &[f64],
) -> Result<EnergyGradient> {
    let energies = sample.iter().map(|&k| energy(params, phi, k)).collect::<Result<Vec<_>>>()?;
    let weights = importance_weights(&energies, log_q)?;
    let mut per_word = Array1::zeros(params.vocab_size());
    for (&k, w) in sample.iter().zip(weights) {
        per_word[k] += w;
    }
    Ok(EnergyGradient::from_weights(params, phi, per_word))
}

/// Loss and log-probability gradient of the softmax truncated to a subset.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledGradient {
    /// `-log p̂(target)` where `p̂` is normalized over the subset only.
    pub loss: f64,
    pub d_phi: Array1<f64>,
    /// Subset members, ascending; rows of `d_words` and entries of `d_biases`
    /// follow this order. No other word receives a gradient.
    pub ids: Vec<WordId>,
    pub d_words: Array2<f64>,
    pub d_biases: Array1<f64>,
}

/// Probabilities of the truncated softmax, in subset member order.
pub fn truncated_softmax(params: &OutputParams, phi: ArrayView1<f64>, subset: &Subset) -> Result<Array1<f64>> {
    params.check_phi(phi)?;
    let (words, biases) = subset.gather(params)?;
    let mut p = words.dot(&phi) + &biases;
    softmax_in_place(p.as_slice_mut().expect("contiguous"))?;
    Ok(p)
}

pub fn sampled_log_prob_and_grad(
    params: &OutputParams,
    phi: ArrayView1<f64>,
    target: WordId,
    subset: &Subset,
) -> Result<SampledGradient> {
    let pos = subset.position(target).ok_or(Error::TargetOutsideSubset(target))?;
    params.check_phi(phi)?;
    let (words, biases) = subset.gather(params)?;
    let mut p = words.dot(&phi) + &biases;
    let energy_target = p[pos];
    let log_z = softmax_in_place(p.as_slice_mut().expect("contiguous"))?;
    let mut d_biases = -p;
    d_biases[pos] += 1.0;
    let d_phi = d_biases.dot(&words);
    let d_words = outer(d_biases.view(), phi);
    Ok(SampledGradient { loss: log_z - energy_target, d_phi, ids: subset.ids().to_vec(), d_words, d_biases })
}

/// Result of [`estimator_bias_probe`].
#[derive(Debug, Clone)]
pub struct BiasProbe {
    pub mean_estimate: EnergyGradient,
    pub exact: EnergyGradient,
}

impl BiasProbe {
    /// Largest componentwise relative error of the feature gradient.
    pub fn max_relative_error_phi(&self) -> f64 {
        self.mean_estimate.d_phi.iter().zip(&self.exact.d_phi).map(|(m, e)| (m - e).abs() / e.abs()).fold(0.0, f64::max)
    }

    /// Euclidean distance between the mean estimate and the exact feature
    /// gradient.
    pub fn error_norm_phi(&self) -> f64 {
        (&self.mean_estimate.d_phi - &self.exact.d_phi).mapv(|x| x * x).sum().sqrt()
    }
}

/// Draws `draws` independent sample sets of `sample_size` words from
/// `proposal` (with replacement), forms the self-normalized estimate for
/// each and averages them. Sampling uses ChaCha8 seeded with `seed`.
pub fn estimator_bias_probe(
    params: &OutputParams,
    phi: ArrayView1<f64>,
    proposal: &[f64],
    sample_size: usize,
    draws: usize,
    seed: u64,
) -> Result<BiasProbe> {
    if proposal.len() != params.vocab_size() {
        return Err(Error::LengthMismatch { left: proposal.len(), right: params.vocab_size() });
    }
    if proposal.iter().any(|&q| q.is_nan() || q <= 0.0 || q.is_infinite()) {
        return Err(Error::invalid("proposal must put positive mass on every word"));
    }
    if sample_size == 0 || draws == 0 {
        return Err(Error::invalid("sample size and draw count must be positive"));
    }
    let exact = expected_energy_grad(params, phi)?;
    let energies = all_energies(params, phi)?;
    let total: f64 = proposal.iter().sum();
    let log_q: Vec<f64> = proposal.iter().map(|q| (q / total).ln()).collect();
    let dist = WeightedIndex::new(proposal).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Only the accumulated per-word weight matters: every group of the
    // estimate is linear in it.
    let mut per_word = Array1::<f64>::zeros(params.vocab_size());
    let mut sample = vec![0; sample_size];
    let mut scores = vec![0.0; sample_size];
    for _ in 0..draws {
        for (k, score) in sample.iter_mut().zip(scores.iter_mut()) {
            *k = dist.sample(&mut rng);
            *score = energies[*k] - log_q[*k];
        }
        softmax_in_place(&mut scores)?;
        for (&k, &w) in sample.iter().zip(&scores) {
            per_word[k] += w;
        }
    }
    per_word /= draws as f64;
    Ok(BiasProbe { mean_estimate: EnergyGradient::from_weights(params, phi, per_word), exact })
}

/// Replaces each row of energies with its log-softmax.
pub(crate) fn log_softmax_rows(energies: &mut Array2<f64>) -> Result<()> {
    for mut row in energies.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::NonFinite("energies"));
        }
        let log_z = max + row.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
        row -= log_z;
    }
    Ok(())
}

/// Replaces each row of energies with its softmax; returns the per-row log
/// normalizers.
pub(crate) fn softmax_rows(energies: &mut Array2<f64>) -> Result<Vec<f64>> {
    energies
        .rows_mut()
        .into_iter()
        .map(|mut row| softmax_in_place(row.as_slice_mut().expect("contiguous rows")))
        .collect()
}
