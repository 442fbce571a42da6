//! Miniature attention-based encoder-decoder.
//!
//! * The encoder is a bidirectional GRU over source embeddings; position `t`
//!   is represented by `h_t = [backward_t ; forward_t]`.
//! * Attention is a one-hidden-layer scorer
//!   `score_t = v_a · tanh(W_a z_prev + U_a h_t)`, normalized by softmax.
//! * The decoder GRU reads `[embedding(y_prev) ; context]` and starts from
//!   `z_0 = tanh(W_init · backward_1)`.
//! * The output feature is `phi = tanh(P [embedding(y_prev) ; z_t ; context] + p)`
//!   and word energies are `w_k · phi + b_k`.

mod checkpoint;
mod grad;
mod gru;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use grad::{batch_loss_and_grads, sentence_loss, sentence_loss_and_grads, Gradients};
pub use gru::{Gru, GruStep};
pub use train::{train, train_from, train_step, EpochLog, TrainConfig, Trained};

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};
use rand::distr::Uniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::WordId;
use crate::error::{Error, Result};
use crate::softmax::{softmax_in_place, OutputParams};

/// Layer sizes independent of the vocabularies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    /// Word embedding size.
    pub e: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    /// Attention hidden layer size.
    pub n_a: usize,
    /// Output feature size.
    pub d: usize,
}

impl LayerDims {
    pub fn with_vocab(self, v_src: usize, v_tgt: usize) -> Dims {
        Dims { layers: self, v_src, v_tgt }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub layers: LayerDims,
    pub v_src: usize,
    pub v_tgt: usize,
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        let LayerDims { e, n_enc, n_dec, n_a, d } = self.layers;
        if [e, n_enc, n_dec, n_a, d, self.v_src, self.v_tgt].contains(&0) {
            return Err(Error::invalid(format!("all model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    pub(crate) fn as_array(&self) -> [usize; 7] {
        let l = self.layers;
        [l.e, l.n_enc, l.n_dec, l.n_a, l.d, self.v_src, self.v_tgt]
    }

    fn phi_input(&self) -> usize {
        let l = self.layers;
        l.e + l.n_dec + 2 * l.n_enc
    }
}

/// All trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: Dims,
    pub src_embeddings: Array2<f64>,
    pub tgt_embeddings: Array2<f64>,
    pub enc_forward: Gru,
    pub enc_backward: Gru,
    /// `n_a × n_dec`
    pub att_w: Array2<f64>,
    /// `n_a × 2 n_enc`
    pub att_u: Array2<f64>,
    pub att_v: Array1<f64>,
    /// `n_dec × n_enc`
    pub init_w: Array2<f64>,
    /// Input is `[embedding ; context]`, `e + 2 n_enc` wide.
    pub decoder: Gru,
    /// `d × (e + n_dec + 2 n_enc)`
    pub phi_w: Array2<f64>,
    pub phi_b: Array1<f64>,
    pub output: OutputParams,
}

/// Tensor names in checkpoint and initialization order.
pub const TENSOR_NAMES: [&str; 28] = [
    "src_embeddings",
    "tgt_embeddings",
    "enc_forward.w_reset",
    "enc_forward.w_update",
    "enc_forward.w_cand",
    "enc_forward.u_reset",
    "enc_forward.u_update",
    "enc_forward.u_cand",
    "enc_backward.w_reset",
    "enc_backward.w_update",
    "enc_backward.w_cand",
    "enc_backward.u_reset",
    "enc_backward.u_update",
    "enc_backward.u_cand",
    "att_w",
    "att_u",
    "att_v",
    "init_w",
    "decoder.w_reset",
    "decoder.w_update",
    "decoder.w_cand",
    "decoder.u_reset",
    "decoder.u_update",
    "decoder.u_cand",
    "phi_w",
    "phi_b",
    "output.word_vectors",
    "output.biases",
];

/// A mutable view of one tensor as `rows × cols` (vectors have one column).
pub struct TensorMut<'a> {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a mut [f64],
    pub is_bias: bool,
}

impl ModelParams {
    pub fn zeros(dims: Dims) -> Result<Self> {
        dims.validate()?;
        let LayerDims { e, n_enc, n_dec, n_a, d } = dims.layers;
        Ok(ModelParams {
            dims,
            src_embeddings: Array2::zeros((dims.v_src, e)),
            tgt_embeddings: Array2::zeros((dims.v_tgt, e)),
            enc_forward: Gru::zeros(n_enc, e),
            enc_backward: Gru::zeros(n_enc, e),
            att_w: Array2::zeros((n_a, n_dec)),
            att_u: Array2::zeros((n_a, 2 * n_enc)),
            att_v: Array1::zeros(n_a),
            init_w: Array2::zeros((n_dec, n_enc)),
            decoder: Gru::zeros(n_dec, e + 2 * n_enc),
            phi_w: Array2::zeros((d, dims.phi_input())),
            phi_b: Array1::zeros(d),
            output: OutputParams { word_vectors: Array2::zeros((dims.v_tgt, d)), biases: Array1::zeros(dims.v_tgt) },
        })
    }

    /// Every tensor in [`TENSOR_NAMES`] order.
    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        fn mat<'a>(name: &'static str, m: &'a mut Array2<f64>) -> TensorMut<'a> {
            let (rows, cols) = m.dim();
            TensorMut { name, rows, cols, data: m.as_slice_mut().expect("standard layout"), is_bias: false }
        }
        fn vec<'a>(name: &'static str, v: &'a mut Array1<f64>, is_bias: bool) -> TensorMut<'a> {
            let rows = v.len();
            TensorMut { name, rows, cols: 1, data: v.as_slice_mut().expect("standard layout"), is_bias }
        }
        let mut names = TENSOR_NAMES.iter().copied();
        let mut next = || names.next().expect("tensor list matches names");
        let mut out = vec![mat(next(), &mut self.src_embeddings), mat(next(), &mut self.tgt_embeddings)];
        for m in self.enc_forward.matrices_mut() {
            out.push(mat(next(), m));
        }
        for m in self.enc_backward.matrices_mut() {
            out.push(mat(next(), m));
        }
        out.push(mat(next(), &mut self.att_w));
        out.push(mat(next(), &mut self.att_u));
        out.push(vec(next(), &mut self.att_v, false));
        out.push(mat(next(), &mut self.init_w));
        for m in self.decoder.matrices_mut() {
            out.push(mat(next(), m));
        }
        out.push(mat(next(), &mut self.phi_w));
        out.push(vec(next(), &mut self.phi_b, true));
        out.push(mat(next(), &mut self.output.word_vectors));
        out.push(vec(next(), &mut self.output.biases, true));
        out
    }

    /// Immutable flat views in [`TENSOR_NAMES`] order.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out: Vec<&[f64]> = vec![
            self.src_embeddings.as_slice().expect("standard layout"),
            self.tgt_embeddings.as_slice().expect("standard layout"),
        ];
        for gru in [&self.enc_forward, &self.enc_backward] {
            out.extend(gru.matrices().map(|m| m.as_slice().expect("standard layout")));
        }
        out.push(self.att_w.as_slice().expect("standard layout"));
        out.push(self.att_u.as_slice().expect("standard layout"));
        out.push(self.att_v.as_slice().expect("standard layout"));
        out.push(self.init_w.as_slice().expect("standard layout"));
        out.extend(self.decoder.matrices().map(|m| m.as_slice().expect("standard layout")));
        out.push(self.phi_w.as_slice().expect("standard layout"));
        out.push(self.phi_b.as_slice().expect("standard layout"));
        out.push(self.output.word_vectors.as_slice().expect("standard layout"));
        out.push(self.output.biases.as_slice().expect("standard layout"));
        TENSOR_NAMES.iter().copied().zip(out).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }
}

/// Initialization bound `sqrt(6 / (fan_in + fan_out))` of a `rows × cols`
/// matrix.
pub fn init_bound(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

/// Seeded initialization: every weight matrix uniform in `±init_bound`,
/// biases zero. Tensors are filled in [`TENSOR_NAMES`] order from one
/// ChaCha8 stream.
pub fn init_params(dims: Dims, seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in params.tensors_mut() {
        if t.is_bias {
            continue;
        }
        let bound = init_bound(t.rows, t.cols);
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        for x in t.data.iter_mut() {
            *x = rng.sample(dist);
        }
    }
    Ok(params)
}

/// Encoder output for one source sentence.
#[derive(Debug, Clone)]
pub struct EncoderStates {
    /// `T × 2 n_enc`, row `t` is `[backward_t ; forward_t]`.
    pub states: Array2<f64>,
    /// `states · U_aᵀ`, the position-dependent half of the attention input.
    pub projected: Array2<f64>,
}

impl EncoderStates {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    pub fn backward_first(&self) -> ArrayView1<'_, f64> {
        let n_enc = self.states.ncols() / 2;
        self.states.slice(s![0, ..n_enc])
    }
}

fn check_ids(ids: &[WordId], size: usize) -> Result<()> {
    match ids.iter().find(|&&id| id >= size) {
        Some(&id) => Err(Error::IdOutOfRange { id, size }),
        None => Ok(()),
    }
}

/// Runs both encoder directions and returns their per-step traces, indexed
/// by source position.
pub(crate) fn run_encoder(
    params: &ModelParams,
    source: &[WordId],
) -> Result<(Vec<GruStep>, Vec<GruStep>, EncoderStates)> {
    if source.is_empty() {
        return Err(Error::invalid("empty source sentence"));
    }
    check_ids(source, params.dims.v_src)?;
    let n_enc = params.dims.layers.n_enc;
    let len = source.len();

    let mut forward = Vec::with_capacity(len);
    let mut h = Array1::zeros(n_enc);
    for &x in source {
        let step = params.enc_forward.step(params.src_embeddings.row(x), h.view());
        h = step.h.clone();
        forward.push(step);
    }
    let mut backward = Vec::with_capacity(len);
    let mut h = Array1::zeros(n_enc);
    for &x in source.iter().rev() {
        let step = params.enc_backward.step(params.src_embeddings.row(x), h.view());
        h = step.h.clone();
        backward.push(step);
    }
    backward.reverse();

    let mut states = Array2::zeros((len, 2 * n_enc));
    for t in 0..len {
        states.slice_mut(s![t, ..n_enc]).assign(&backward[t].h);
        states.slice_mut(s![t, n_enc..]).assign(&forward[t].h);
    }
    let projected = states.dot(&params.att_u.t());
    Ok((forward, backward, EncoderStates { states, projected }))
}

pub fn encode_source(params: &ModelParams, source: &[WordId]) -> Result<EncoderStates> {
    run_encoder(params, source).map(|(_, _, enc)| enc)
}

pub fn initial_state(params: &ModelParams, enc: &EncoderStates) -> Array1<f64> {
    params.init_w.dot(&enc.backward_first()).mapv_into(f64::tanh)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    pub alpha: Array1<f64>,
    pub context: Array1<f64>,
    /// Position of the largest weight; the first one on ties.
    pub argmax_pos: usize,
}

/// Attention together with its hidden-layer activations (`T × n_a`).
pub(crate) fn attend_traced(
    params: &ModelParams,
    z_prev: ArrayView1<f64>,
    enc: &EncoderStates,
) -> (AttentionResult, Array2<f64>) {
    let query = params.att_w.dot(&z_prev);
    let mut hidden = enc.projected.clone();
    hidden += &query;
    hidden.mapv_inplace(f64::tanh);
    let mut alpha = hidden.dot(&params.att_v);
    softmax_in_place(alpha.as_slice_mut().expect("contiguous")).expect("attention scores are finite");
    let context = alpha.dot(&enc.states);
    let argmax_pos =
        alpha.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &a)| if a > best.1 { (i, a) } else { best }).0;
    (AttentionResult { alpha, context, argmax_pos }, hidden)
}

pub fn attend(params: &ModelParams, z_prev: ArrayView1<f64>, enc: &EncoderStates) -> Result<AttentionResult> {
    if z_prev.len() != params.dims.layers.n_dec || enc.states.ncols() != 2 * params.dims.layers.n_enc {
        return Err(Error::Shape("decoder state or encoder states do not match the model".into()));
    }
    Ok(attend_traced(params, z_prev, enc).0)
}

#[derive(Debug, Clone)]
pub struct DecodeStep {
    pub z: Array1<f64>,
    pub attention: AttentionResult,
    pub phi: Array1<f64>,
}

/// Internal trace of one decoder step, as kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct StepTrace {
    pub y_prev: WordId,
    pub attention: AttentionResult,
    pub att_hidden: Array2<f64>,
    pub gru: GruStep,
    /// `[embedding(y_prev) ; z_t ; context]`
    pub phi_input: Array1<f64>,
    pub phi: Array1<f64>,
}

pub(crate) fn decode_step_traced(
    params: &ModelParams,
    y_prev: WordId,
    z_prev: ArrayView1<f64>,
    enc: &EncoderStates,
) -> StepTrace {
    let (attention, att_hidden) = attend_traced(params, z_prev, enc);
    let emb = params.tgt_embeddings.row(y_prev);
    let x = concatenate![Axis(0), emb, attention.context.view()];
    let gru = params.decoder.step(x.view(), z_prev);
    let phi_input = concatenate![Axis(0), emb, gru.h.view(), attention.context.view()];
    let phi = (params.phi_w.dot(&phi_input) + &params.phi_b).mapv_into(f64::tanh);
    StepTrace { y_prev, attention, att_hidden, gru, phi_input, phi }
}

pub fn decode_step(
    params: &ModelParams,
    y_prev: WordId,
    z_prev: ArrayView1<f64>,
    enc: &EncoderStates,
) -> Result<DecodeStep> {
    check_ids(&[y_prev], params.dims.v_tgt)?;
    if z_prev.len() != params.dims.layers.n_dec {
        return Err(Error::Shape(format!("decoder state of length {}", z_prev.len())));
    }
    let trace = decode_step_traced(params, y_prev, z_prev, enc);
    Ok(DecodeStep { z: trace.gru.h, attention: trace.attention, phi: trace.phi })
}

/// Decoder steps for many hypotheses at once, row `r` continuing
/// hypothesis `r`.
#[derive(Debug, Clone)]
pub struct DecodeRows {
    /// `rows × n_dec`
    pub z: Array2<f64>,
    pub attention: Vec<AttentionResult>,
    /// `rows × d`
    pub phi: Array2<f64>,
}

/// Batched form of [`decode_step`]: every row carries its previous word,
/// previous state and encoder states, and the recurrent and feature layers
/// run as matrix products over all rows.
pub fn decode_rows(params: &ModelParams, rows: &[(WordId, ArrayView1<f64>, &EncoderStates)]) -> Result<DecodeRows> {
    let LayerDims { e, n_enc, n_dec, .. } = params.dims.layers;
    let n = rows.len();
    let mut z_prev = Array2::zeros((n, n_dec));
    let mut phi_input = Array2::zeros((n, e + n_dec + 2 * n_enc));
    for (r, &(y_prev, z, enc)) in rows.iter().enumerate() {
        check_ids(&[y_prev], params.dims.v_tgt)?;
        if z.len() != n_dec || enc.states.ncols() != 2 * n_enc {
            return Err(Error::Shape("decoder state or encoder states do not match the model".into()));
        }
        z_prev.row_mut(r).assign(&z);
        phi_input.slice_mut(s![r, ..e]).assign(&params.tgt_embeddings.row(y_prev));
    }
    let queries = z_prev.dot(&params.att_w.t());
    let mut attention = Vec::with_capacity(n);
    for (r, &(_, _, enc)) in rows.iter().enumerate() {
        let mut hidden = enc.projected.clone();
        hidden += &queries.row(r);
        hidden.mapv_inplace(f64::tanh);
        let mut alpha = hidden.dot(&params.att_v);
        softmax_in_place(alpha.as_slice_mut().expect("contiguous"))?;
        let context = alpha.dot(&enc.states);
        phi_input.slice_mut(s![r, e + n_dec..]).assign(&context);
        let argmax_pos = alpha
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &a)| if a > best.1 { (i, a) } else { best })
            .0;
        attention.push(AttentionResult { alpha, context, argmax_pos });
    }
    let x = concatenate![Axis(1), phi_input.slice(s![.., ..e]), phi_input.slice(s![.., e + n_dec..])];
    let z = params.decoder.step_rows(x.view(), z_prev.view());
    phi_input.slice_mut(s![.., e..e + n_dec]).assign(&z);
    let phi = (phi_input.dot(&params.phi_w.t()) + &params.phi_b).mapv_into(f64::tanh);
    Ok(DecodeRows { z, attention, phi })
}
