//! Compact trainable document encoder producing token and query embeddings.
//!
//! A token's input vector is the sum of its hash-bucketed content embedding and a
//! linear projection of box features (the four coordinates scaled to `[0, 1]` plus
//! sine/cosine pairs at `bbox_frequencies` octaves), optionally plus a storage
//! position embedding. `attention_rounds` rounds of single-head scaled dot-product
//! self-attention with residual connections then mix context.
//!
//! The forward pass runs tokens in a canonical layout order (by box, then text)
//! and scatters rows back to storage order, so without position embeddings the
//! output is exactly permutation-equivariant: every floating-point reduction sees
//! the same operands in the same order whatever the storage order was.
//!
//! Gradients are written out by hand; [`EncoderTape`] keeps what the backward pass
//! needs.

mod params;
mod query;

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

pub use params::{
    AttentionWeights, BioWeights, HeadKind, HeadWeights, Parameters, TensorView, UnerWeights,
};
pub use query::{encode_queries, encode_queries_tape, QueryTape};
pub(crate) use query::query_backward;

use crate::data_model::{Document, PAGE_SIZE};
use crate::error::{Error, Result};
use crate::head::LossKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding width.
    pub h: usize,
    /// Hash buckets for token contents and query words.
    pub vocab_size: usize,
    pub attention_rounds: usize,
    pub use_1d_position: bool,
    /// Rows of the position table; later positions share the last row.
    pub max_positions: usize,
    /// Octaves of sine/cosine box features; 0 leaves the raw coordinates only.
    pub bbox_frequencies: usize,
    /// Weight of the order loss in the total loss.
    pub lambda: f64,
    pub loss_kind: LossKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            h: 64,
            vocab_size: 4096,
            attention_rounds: 2,
            use_1d_position: false,
            max_positions: 512,
            bbox_frequencies: 8,
            lambda: 0.5,
            loss_kind: LossKind::Zlpr,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h < 4 || !self.h.is_multiple_of(2) {
            return Err(Error::Config(format!("h = {} must be even and >= 4", self.h)));
        }
        if self.attention_rounds > 2 {
            return Err(Error::Config(format!(
                "attention_rounds = {} must be at most 2",
                self.attention_rounds
            )));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        if self.use_1d_position && self.max_positions == 0 {
            return Err(Error::Config("max_positions must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda = {} must be >= 0", self.lambda)));
        }
        Ok(())
    }

    pub fn bbox_feature_count(&self) -> usize {
        4 + 8 * self.bbox_frequencies
    }
}

/// FNV-1a hash of `text` reduced to `0..buckets`.
pub fn bucket(text: &str, buckets: usize) -> usize {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in text.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (hash % buckets as u64) as usize
}

/// Box features: scaled coordinates, then `sin, cos` of `pi * 2^f * c` for each
/// octave `f` and coordinate `c`.
pub fn bbox_features(bbox: [i64; 4], frequencies: usize) -> Array1<f64> {
    let coords = bbox.map(|c| c as f64 / PAGE_SIZE as f64);
    let mut out = Array1::zeros(4 + 8 * frequencies);
    for (k, c) in coords.iter().enumerate() {
        out[k] = *c;
    }
    for f in 0..frequencies {
        let omega = std::f64::consts::PI * (1u64 << f) as f64;
        for (k, c) in coords.iter().enumerate() {
            let base = 4 + 8 * f + 2 * k;
            out[base] = (omega * c).sin();
            out[base + 1] = (omega * c).cos();
        }
    }
    out
}

/// Storage indices sorted by `(bbox, text)`; ties are identical tokens.
pub fn canonical_order(doc: &Document) -> Vec<usize> {
    let mut order: Vec<usize> = (0..doc.len()).collect();
    order.sort_by(|&a, &b| {
        let (ta, tb) = (&doc.tokens[a], &doc.tokens[b]);
        ta.bbox.cmp(&tb.bbox).then_with(|| ta.text.cmp(&tb.text))
    });
    order
}

#[derive(Debug, Clone)]
struct RoundTape {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    context: Array2<f64>,
}

/// Intermediate values of one encoder forward pass, in canonical row order.
#[derive(Debug, Clone)]
pub struct EncoderTape {
    order: Vec<usize>,
    token_ids: Vec<usize>,
    positions: Vec<usize>,
    features: Array2<f64>,
    rounds: Vec<RoundTape>,
}

pub fn encode_document(params: &Parameters, cfg: &ModelConfig, doc: &Document) -> Array2<f64> {
    encode_document_tape(params, cfg, doc).0
}

pub fn encode_document_tape(
    params: &Parameters,
    cfg: &ModelConfig,
    doc: &Document,
) -> (Array2<f64>, EncoderTape) {
    let order = canonical_order(doc);
    let n = order.len();
    let token_ids: Vec<usize> = order
        .iter()
        .map(|&i| bucket(&doc.tokens[i].text, cfg.vocab_size))
        .collect();
    let mut features = Array2::zeros((n, cfg.bbox_feature_count()));
    for (r, &i) in order.iter().enumerate() {
        features
            .row_mut(r)
            .assign(&bbox_features(doc.tokens[i].bbox, cfg.bbox_frequencies));
    }

    let mut x = features.dot(&params.bbox_proj);
    for (r, &id) in token_ids.iter().enumerate() {
        let mut row = x.row_mut(r);
        row += &params.content.row(id);
    }
    let mut positions = Vec::new();
    if let Some(table) = &params.position {
        positions = order.iter().map(|&i| i.min(table.nrows() - 1)).collect();
        for (r, &p) in positions.iter().enumerate() {
            let mut row = x.row_mut(r);
            row += &table.row(p);
        }
    }

    let scale = 1.0 / (cfg.h as f64).sqrt();
    let mut rounds = Vec::with_capacity(params.attention.len());
    for w in &params.attention {
        let q = x.dot(&w.query);
        let k = x.dot(&w.key);
        let v = x.dot(&w.value);
        let mut attn = q.dot(&k.t()) * scale;
        softmax_rows(&mut attn);
        let context = attn.dot(&v);
        let next = &x + &context.dot(&w.output);
        rounds.push(RoundTape {
            input: std::mem::replace(&mut x, next),
            q,
            k,
            v,
            attn,
            context,
        });
    }

    let mut out = Array2::zeros((n, cfg.h));
    for (r, &i) in order.iter().enumerate() {
        out.row_mut(i).assign(&x.row(r));
    }
    let tape = EncoderTape {
        order,
        token_ids,
        positions,
        features,
        rounds,
    };
    (out, tape)
}

/// Gradient rows of one embedding table, keyed by row index.
///
/// A document touches only a few hash buckets, so per-document gradients keep the
/// touched rows instead of a dense table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RowGrads(BTreeMap<usize, Array1<f64>>);

impl RowGrads {
    pub fn add(&mut self, id: usize, row: ArrayView1<f64>) {
        self.0
            .entry(id)
            .and_modify(|acc| *acc += &row)
            .or_insert_with(|| row.to_owned());
    }

    /// `table[id] += scale * row` for every stored row.
    pub fn scatter_into(&self, table: &mut Array2<f64>, scale: f64) {
        for (&id, row) in &self.0 {
            table.row_mut(id).zip_mut_with(row, |a, &b| *a += scale * b);
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Accumulates the encoder's parameter gradients given `d_embeddings` (storage order).
pub fn encoder_backward(
    params: &Parameters,
    cfg: &ModelConfig,
    tape: &EncoderTape,
    d_embeddings: &Array2<f64>,
    grads: &mut Parameters,
) {
    let mut rows = RowGrads::default();
    encoder_backward_rows(params, cfg, tape, d_embeddings, grads, &mut rows);
    rows.scatter_into(&mut grads.content, 1.0);
}

/// [`encoder_backward`] with the content-table gradient collected in `content`;
/// `grads.content` is left untouched.
pub(crate) fn encoder_backward_rows(
    params: &Parameters,
    cfg: &ModelConfig,
    tape: &EncoderTape,
    d_embeddings: &Array2<f64>,
    grads: &mut Parameters,
    content: &mut RowGrads,
) {
    let n = tape.order.len();
    let mut dx = Array2::zeros((n, cfg.h));
    for (r, &i) in tape.order.iter().enumerate() {
        dx.row_mut(r).assign(&d_embeddings.row(i));
    }

    let scale = 1.0 / (cfg.h as f64).sqrt();
    for (round, (w, g)) in tape
        .rounds
        .iter()
        .zip(params.attention.iter().zip(grads.attention.iter_mut()))
        .rev()
    {
        // next = input + context . output
        g.output += &round.context.t().dot(&dx);
        let d_context = dx.dot(&w.output.t());
        let d_attn = d_context.dot(&round.v.t());
        let d_v = round.attn.t().dot(&d_context);
        // Softmax backward, row by row.
        let mut d_scores = d_attn;
        for (mut ds, a) in d_scores.outer_iter_mut().zip(round.attn.outer_iter()) {
            let inner = ds.dot(&a);
            ds.zip_mut_with(&a, |d, &p| *d = p * (*d - inner) * scale);
        }
        let d_q = d_scores.dot(&round.k);
        let d_k = d_scores.t().dot(&round.q);
        g.query += &round.input.t().dot(&d_q);
        g.key += &round.input.t().dot(&d_k);
        g.value += &round.input.t().dot(&d_v);
        dx = dx + d_q.dot(&w.query.t()) + d_k.dot(&w.key.t()) + d_v.dot(&w.value.t());
    }

    grads.bbox_proj += &tape.features.t().dot(&dx);
    for (r, &id) in tape.token_ids.iter().enumerate() {
        content.add(id, dx.row(r));
    }
    if let Some(table) = &mut grads.position {
        for (r, &p) in tape.positions.iter().enumerate() {
            let mut row = table.row_mut(p);
            row += &dx.row(r);
        }
    }
}

pub(crate) fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Largest absolute elementwise difference; infinite on shape mismatch.
pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    if a.dim() != b.dim() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Rows of `m` reordered so that new row `p` is old row `order[p]`.
pub fn permute_rows(m: &Array2<f64>, order: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros(m.dim());
    for (new, &old) in order.iter().enumerate() {
        out.slice_mut(s![new, ..]).assign(&m.row(old));
    }
    out
}
