//! Exact gradients of the truncated-softmax sentence loss by backpropagation
//! through time.
//!
//! A batch is processed in three phases: every sentence runs forward with
//! teacher forcing and its output features are stacked into one matrix; the
//! output layer is evaluated for the whole stack with one matrix product
//! against the gathered subset rows (and two more for its backward pass);
//! then each sentence backpropagates its slice of feature gradients.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use super::gru::{add_outer, t_dot, Gru, GruStep};
use super::{decode_step_traced, initial_state, run_encoder, EncoderStates, ModelParams, StepTrace};
use crate::corpus::{SentencePair, WordId, EOS};
use crate::error::{Error, Result};
use crate::softmax::{batch_energies, batch_output_backward, softmax_rows, Subset};

/// Loss gradient with the shape of [`ModelParams`]; embedding rows and output
/// rows are stored sparsely.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub src_embeddings: BTreeMap<WordId, Array1<f64>>,
    pub tgt_embeddings: BTreeMap<WordId, Array1<f64>>,
    pub enc_forward: Gru,
    pub enc_backward: Gru,
    pub att_w: Array2<f64>,
    pub att_u: Array2<f64>,
    pub att_v: Array1<f64>,
    pub init_w: Array2<f64>,
    pub decoder: Gru,
    pub phi_w: Array2<f64>,
    pub phi_b: Array1<f64>,
    /// Output rows that received a gradient: the members of the subset.
    pub output_ids: Vec<WordId>,
    pub output_words: Array2<f64>,
    pub output_biases: Array1<f64>,
}

impl Gradients {
    fn zeros(params: &ModelParams, subset: &Subset) -> Self {
        let l = params.dims.layers;
        Gradients {
            src_embeddings: BTreeMap::new(),
            tgt_embeddings: BTreeMap::new(),
            enc_forward: Gru::zeros(l.n_enc, l.e),
            enc_backward: Gru::zeros(l.n_enc, l.e),
            att_w: Array2::zeros(params.att_w.dim()),
            att_u: Array2::zeros(params.att_u.dim()),
            att_v: Array1::zeros(l.n_a),
            init_w: Array2::zeros(params.init_w.dim()),
            decoder: Gru::zeros(l.n_dec, params.decoder.input()),
            phi_w: Array2::zeros(params.phi_w.dim()),
            phi_b: Array1::zeros(l.d),
            output_ids: subset.ids().to_vec(),
            output_words: Array2::zeros((subset.len(), l.d)),
            output_biases: Array1::zeros(subset.len()),
        }
    }

    fn dense_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for gru in [&mut self.enc_forward, &mut self.enc_backward, &mut self.decoder] {
            out.extend(gru.matrices_mut().map(|m| m.as_slice_mut().expect("standard layout")));
        }
        for m in [&mut self.att_w, &mut self.att_u, &mut self.init_w, &mut self.phi_w, &mut self.output_words] {
            out.push(m.as_slice_mut().expect("standard layout"));
        }
        for v in [&mut self.att_v, &mut self.phi_b, &mut self.output_biases] {
            out.push(v.as_slice_mut().expect("standard layout"));
        }
        for v in self.src_embeddings.values_mut().chain(self.tgt_embeddings.values_mut()) {
            out.push(v.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.dense_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Global Euclidean norm over every stored entry.
    pub fn norm(&self) -> f64 {
        let sq = |a: &[f64]| a.iter().map(|x| x * x).sum::<f64>();
        let mut total = 0.0;
        for gru in [&self.enc_forward, &self.enc_backward, &self.decoder] {
            total += gru.matrices().iter().map(|m| m.iter().map(|x| x * x).sum::<f64>()).sum::<f64>();
        }
        for m in [&self.att_w, &self.att_u, &self.init_w, &self.phi_w, &self.output_words] {
            total += sq(m.as_slice().expect("standard layout"));
        }
        for v in [&self.att_v, &self.phi_b, &self.output_biases] {
            total += sq(v.as_slice().expect("standard layout"));
        }
        for v in self.src_embeddings.values().chain(self.tgt_embeddings.values()) {
            total += sq(v.as_slice().expect("standard layout"));
        }
        total.sqrt()
    }

    /// `params -= learning_rate * self`, touching only the stored rows.
    pub fn apply_sgd(&self, params: &mut ModelParams, learning_rate: f64) {
        let lr = -learning_rate;
        for (id, g) in &self.src_embeddings {
            params.src_embeddings.row_mut(*id).scaled_add(lr, g);
        }
        for (id, g) in &self.tgt_embeddings {
            params.tgt_embeddings.row_mut(*id).scaled_add(lr, g);
        }
        for (p, g) in [
            (&mut params.enc_forward, &self.enc_forward),
            (&mut params.enc_backward, &self.enc_backward),
            (&mut params.decoder, &self.decoder),
        ] {
            for (pm, gm) in p.matrices_mut().into_iter().zip(g.matrices()) {
                pm.scaled_add(lr, gm);
            }
        }
        params.att_w.scaled_add(lr, &self.att_w);
        params.att_u.scaled_add(lr, &self.att_u);
        params.att_v.scaled_add(lr, &self.att_v);
        params.init_w.scaled_add(lr, &self.init_w);
        params.phi_w.scaled_add(lr, &self.phi_w);
        params.phi_b.scaled_add(lr, &self.phi_b);
        for (row, &id) in self.output_ids.iter().enumerate() {
            params.output.word_vectors.row_mut(id).scaled_add(lr, &self.output_words.row(row));
            params.output.biases[id] += lr * self.output_biases[row];
        }
    }

    /// Scatters into a dense, zero-filled [`ModelParams`]-shaped value.
    pub fn to_dense(&self, params: &ModelParams) -> ModelParams {
        let mut dense = ModelParams::zeros(params.dims).expect("dims were validated");
        self.apply_sgd(&mut dense, -1.0);
        dense
    }
}

struct SentenceTrace {
    source: Vec<WordId>,
    forward: Vec<GruStep>,
    backward: Vec<GruStep>,
    enc: EncoderStates,
    z0: Array1<f64>,
    steps: Vec<StepTrace>,
}

fn forward_sentence(params: &ModelParams, pair: &SentencePair) -> Result<SentenceTrace> {
    if let Some(&id) = pair.target().iter().find(|&&id| id >= params.dims.v_tgt) {
        return Err(Error::IdOutOfRange { id, size: params.dims.v_tgt });
    }
    let (forward, backward, enc) = run_encoder(params, pair.source())?;
    let z0 = initial_state(params, &enc);
    let mut steps: Vec<StepTrace> = Vec::with_capacity(pair.target().len());
    let mut y_prev = EOS;
    for &y in pair.target() {
        let z_prev = steps.last().map_or(z0.view(), |s| s.gru.h.view());
        let step = decode_step_traced(params, y_prev, z_prev, &enc);
        steps.push(step);
        y_prev = y;
    }
    Ok(SentenceTrace { source: pair.source().to_vec(), forward, backward, enc, z0, steps })
}

struct BatchForward {
    traces: Vec<SentenceTrace>,
    features: Array2<f64>,
    /// Subset position of each step's target, in stacking order.
    target_pos: Vec<usize>,
}

fn forward_batch(params: &ModelParams, pairs: &[&SentencePair], subset: &Subset) -> Result<BatchForward> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let target_pos = pairs
        .iter()
        .flat_map(|p| p.target())
        .map(|&y| subset.position(y).ok_or(Error::TargetOutsideSubset(y)))
        .collect::<Result<Vec<_>>>()?;
    let traces = pairs.iter().map(|p| forward_sentence(params, p)).collect::<Result<Vec<_>>>()?;
    let d = params.dims.layers.d;
    let mut features = Array2::zeros((target_pos.len(), d));
    for (mut row, step) in features.rows_mut().into_iter().zip(traces.iter().flat_map(|t| &t.steps)) {
        row.assign(&step.phi);
    }
    Ok(BatchForward { traces, features, target_pos })
}

/// Summed loss `Σ_t -log p̂(y_t)` over all sentences of the batch and its
/// exact gradient (summed, not averaged). Every target id must be in
/// `subset`.
pub fn batch_loss_and_grads(
    params: &ModelParams,
    pairs: &[&SentencePair],
    subset: &Subset,
) -> Result<(f64, Gradients)> {
    let fwd = forward_batch(params, pairs, subset)?;
    let (words, biases) = subset.gather(&params.output)?;
    let mut probs = batch_energies(fwd.features.view(), words.view(), biases.view());
    let target_energy: Vec<f64> = fwd.target_pos.iter().enumerate().map(|(r, &c)| probs[[r, c]]).collect();
    let log_z = softmax_rows(&mut probs)?;
    let loss: f64 = log_z.iter().zip(&target_energy).map(|(z, e)| z - e).sum();

    // Loss gradient with respect to the energies: p - onehot(target).
    for (r, &c) in fwd.target_pos.iter().enumerate() {
        probs[[r, c]] -= 1.0;
    }
    let mut grads = Gradients::zeros(params, subset);
    let (d_features, d_words) = batch_output_backward(probs.view(), fwd.features.view(), words.view());
    grads.output_words = d_words;
    grads.output_biases = probs.sum_axis(Axis(0));

    let mut row = 0;
    for trace in &fwd.traces {
        let n = trace.steps.len();
        backward_sentence(params, trace, d_features.slice(s![row..row + n, ..]), &mut grads);
        row += n;
    }
    Ok((loss, grads))
}

fn add_row(map: &mut BTreeMap<WordId, Array1<f64>>, id: WordId, g: ArrayView1<f64>) {
    map.entry(id).and_modify(|acc| *acc += &g).or_insert_with(|| g.to_owned());
}

fn backward_sentence(
    params: &ModelParams,
    trace: &SentenceTrace,
    d_phi: ndarray::ArrayView2<f64>,
    grads: &mut Gradients,
) {
    let l = params.dims.layers;
    let (e, n_enc, n_dec) = (l.e, l.n_enc, l.n_dec);
    let len = trace.source.len();
    let mut d_states = Array2::<f64>::zeros((len, 2 * n_enc));
    let mut d_projected = Array2::<f64>::zeros((len, l.n_a));
    let mut dz_next = Array1::<f64>::zeros(n_dec);

    for (t, step) in trace.steps.iter().enumerate().rev() {
        let d_phi_pre = Array1::from_shape_fn(l.d, |i| d_phi[[t, i]] * (1.0 - step.phi[i] * step.phi[i]));
        add_outer(grads.phi_w.view_mut(), d_phi_pre.view(), step.phi_input.view());
        grads.phi_b += &d_phi_pre;
        let d_input = t_dot(&params.phi_w, d_phi_pre.view());

        let mut d_emb = d_input.slice(s![..e]).to_owned();
        let dz = &d_input.slice(s![e..e + n_dec]) + &dz_next;
        let mut d_context = d_input.slice(s![e + n_dec..]).to_owned();

        let (dx, mut dz_prev) = params.decoder.backward(&step.gru, dz.view(), &mut grads.decoder);
        d_emb += &dx.slice(s![..e]);
        d_context += &dx.slice(s![e..]);
        add_row(&mut grads.tgt_embeddings, step.y_prev, d_emb.view());

        // context = Σ_t alpha_t h_t
        let alpha = &step.attention.alpha;
        let d_alpha = trace.enc.states.dot(&d_context);
        add_outer(d_states.view_mut(), alpha.view(), d_context.view());
        let mean = alpha.dot(&d_alpha);
        let d_score = Array1::from_shape_fn(len, |i| alpha[i] * (d_alpha[i] - mean));
        grads.att_v += &t_dot(&step.att_hidden, d_score.view());
        let mut d_hidden_pre = step.att_hidden.mapv(|a| 1.0 - a * a);
        for (mut row, &ds) in d_hidden_pre.rows_mut().into_iter().zip(&d_score) {
            row *= &(&params.att_v * ds);
        }
        d_projected += &d_hidden_pre;
        let d_query = d_hidden_pre.sum_axis(Axis(0));
        let z_prev = &step.gru.h_prev;
        add_outer(grads.att_w.view_mut(), d_query.view(), z_prev.view());
        dz_prev += &t_dot(&params.att_w, d_query.view());
        dz_next = dz_prev;
    }

    // z0 = tanh(W_init · backward_1)
    let d_init_pre = Array1::from_shape_fn(n_dec, |i| dz_next[i] * (1.0 - trace.z0[i] * trace.z0[i]));
    add_outer(grads.init_w.view_mut(), d_init_pre.view(), trace.enc.backward_first());
    let d_b1 = t_dot(&params.init_w, d_init_pre.view());
    {
        let mut first = d_states.slice_mut(s![0, ..n_enc]);
        first += &d_b1;
    }

    // projected = states · U_aᵀ
    grads.att_u += &d_projected.t().dot(&trace.enc.states);
    d_states += &d_projected.dot(&params.att_u);

    let mut dh_next = Array1::<f64>::zeros(n_enc);
    for t in (0..len).rev() {
        let dh = &d_states.slice(s![t, n_enc..]) + &dh_next;
        let (dx, dh_prev) = params.enc_forward.backward(&trace.forward[t], dh.view(), &mut grads.enc_forward);
        add_row(&mut grads.src_embeddings, trace.source[t], dx.view());
        dh_next = dh_prev;
    }
    let mut dh_next = Array1::<f64>::zeros(n_enc);
    for t in 0..len {
        let dh = &d_states.slice(s![t, ..n_enc]) + &dh_next;
        let (dx, dh_prev) = params.enc_backward.backward(&trace.backward[t], dh.view(), &mut grads.enc_backward);
        add_row(&mut grads.src_embeddings, trace.source[t], dx.view());
        dh_next = dh_prev;
    }
}

pub fn sentence_loss_and_grads(params: &ModelParams, pair: &SentencePair, subset: &Subset) -> Result<(f64, Gradients)> {
    batch_loss_and_grads(params, &[pair], subset)
}

/// Forward-only loss, `Σ_t -log p̂(y_t)`.
pub fn sentence_loss(params: &ModelParams, pair: &SentencePair, subset: &Subset) -> Result<f64> {
    let fwd = forward_batch(params, &[pair], subset)?;
    let (words, biases) = subset.gather(&params.output)?;
    let mut energies = batch_energies(fwd.features.view(), words.view(), biases.view());
    let target_energy: Vec<f64> = fwd.target_pos.iter().enumerate().map(|(r, &c)| energies[[r, c]]).collect();
    let log_z = softmax_rows(&mut energies)?;
    Ok(log_z.iter().zip(&target_energy).map(|(z, e)| z - e).sum())
}
