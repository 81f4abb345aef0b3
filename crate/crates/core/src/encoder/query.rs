use ndarray::{Array1, Array2};

use super::{bucket, ModelConfig, Parameters};
use crate::data_model::QuerySet;
use crate::error::{Error, Result};

/// Cached activations of one query-encoder pass.
#[derive(Debug, Clone)]
pub struct QueryTape {
    word_ids: Vec<Vec<usize>>,
    pooled: Array2<f64>,
    output: Array2<f64>,
}

fn word_ids(name: &str, cfg: &ModelConfig) -> Vec<usize> {
    let words: Vec<&str> = name.split_whitespace().collect();
    if words.is_empty() {
        vec![bucket(name, cfg.vocab_size)]
    } else {
        words.iter().map(|w| bucket(w, cfg.vocab_size)).collect()
    }
}

/// One row per query: `tanh(mean_word_embedding . W + b)`.
///
/// Each row is a function of its own name only.
pub fn encode_queries(params: &Parameters, cfg: &ModelConfig, names: &[String]) -> Result<Array2<f64>> {
    Ok(encode_queries_tape(params, cfg, names)?.0)
}

pub fn encode_queries_tape(
    params: &Parameters,
    cfg: &ModelConfig,
    names: &[String],
) -> Result<(Array2<f64>, QueryTape)> {
    let weights = params
        .uner()
        .ok_or_else(|| Error::Config("query encoding needs a UNER head".into()))?;
    let mut pooled = Array2::zeros((names.len(), cfg.h));
    let mut ids = Vec::with_capacity(names.len());
    for (j, name) in names.iter().enumerate() {
        if name.is_empty() {
            return Err(Error::Config(format!("query {j} is empty")));
        }
        let w = word_ids(name, cfg);
        let mut row = pooled.row_mut(j);
        for &id in &w {
            row += &weights.query_content.row(id);
        }
        row /= w.len() as f64;
        ids.push(w);
    }
    let mut output = pooled.dot(&weights.query_proj) + &weights.query_bias;
    output.mapv_inplace(f64::tanh);
    let tape = QueryTape {
        word_ids: ids,
        pooled,
        output: output.clone(),
    };
    Ok((output, tape))
}

/// Accumulates the query encoder's gradients; rows of `query.content` go to `content`.
pub(crate) fn query_backward(
    params: &Parameters,
    tape: &QueryTape,
    d_queries: &Array2<f64>,
    grads: &mut Parameters,
    content: &mut super::RowGrads,
) {
    let weights = params.uner().expect("UNER head");
    let super::HeadWeights::Uner(g) = &mut grads.head else {
        panic!("gradient head kind differs from parameters");
    };
    let d_pre = d_queries * &tape.output.mapv(|y| 1.0 - y * y);
    g.query_proj += &tape.pooled.t().dot(&d_pre);
    let d_bias: Array1<f64> = d_pre.sum_axis(ndarray::Axis(0));
    g.query_bias += &d_bias;
    let d_pooled = d_pre.dot(&weights.query_proj.t());
    for (j, ids) in tape.word_ids.iter().enumerate() {
        let share = &d_pooled.row(j) / ids.len() as f64;
        for &id in ids {
            content.add(id, share.view());
        }
    }
}

impl QuerySet {
    pub fn encode(&self, params: &Parameters, cfg: &ModelConfig) -> Result<Array2<f64>> {
        encode_queries(params, cfg, self.names())
    }
}
