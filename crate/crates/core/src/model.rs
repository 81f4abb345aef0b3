//! End-to-end forward, loss, gradient and inference for one model.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bio::{bio_backward, bio_decode, bio_labels, bio_loss_grad, bio_scores};
use crate::data_model::{build_qtc_labels, build_top_labels, Document, QuerySet};
use crate::decoder::{decode_entities, Prediction};
use crate::encoder::{
    encode_document, encode_document_tape, encode_queries, encode_queries_tape, encoder_backward_rows,
    query_backward, HeadKind, HeadWeights, ModelConfig, Parameters, RowGrads,
};
use crate::error::{Error, Result};
use crate::head::{
    loss_qtc_grad, loss_top_grad, loss_total, qtc_backward, qtc_forward, qtc_scores, top_backward,
    top_forward, top_scores, OrderGraphScores, ScoreGrid,
};
use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub queries: QuerySet,
    pub params: Parameters,
}

/// Gradient of one document's loss. The hash tables are kept as touched rows;
/// `dense` holds every other tensor and empty tables.
#[derive(Debug, Clone)]
struct DocGrad {
    dense: Parameters,
    content: RowGrads,
    query_content: RowGrads,
}

impl DocGrad {
    /// `total += scale * self`.
    fn add_to(&self, total: &mut Parameters, scale: f64) {
        let parts = self.dense.tensors();
        for ((_, _, mine), part) in total.tensors_mut().into_iter().zip(parts) {
            if part.data.is_empty() {
                continue;
            }
            for (a, &b) in mine.iter_mut().zip(part.data) {
                *a += scale * b;
            }
        }
        self.content.scatter_into(&mut total.content, scale);
        if let HeadWeights::Uner(u) = &mut total.head {
            self.query_content.scatter_into(&mut u.query_content, scale);
        }
    }
}

/// Loss terms of one document. The BIO head reports only `total`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DocLoss {
    pub total: f64,
    pub qtc: Option<f64>,
    pub top: Option<f64>,
}

impl Model {
    /// Freshly initialized weights drawn from `config.seed`.
    pub fn new(config: ModelConfig, head: HeadKind, queries: QuerySet) -> Result<Self> {
        config.validate()?;
        let params = Parameters::init(&config, head, &queries);
        Ok(Model {
            config,
            queries,
            params,
        })
    }

    pub fn head_kind(&self) -> HeadKind {
        self.params.head_kind()
    }

    pub fn embeddings(&self, doc: &Document) -> Array2<f64> {
        encode_document(&self.params, &self.config, doc)
    }

    /// QTC grid for every query in the set and the order graph, sharing one encoder pass.
    pub fn scores(&self, doc: &Document) -> Result<(ScoreGrid, OrderGraphScores)> {
        let e = self.embeddings(doc);
        let q = encode_queries(&self.params, &self.config, self.queries.names())?;
        Ok((qtc_scores(&e, &q, &self.params)?, top_scores(&e, &self.params)?))
    }

    /// Decodes all query types from one encoder and TOP pass.
    pub fn predict(&self, doc: &Document) -> Result<Prediction> {
        match self.head_kind() {
            HeadKind::Uner => {
                let (grid, graph) = self.scores(doc)?;
                Ok(decode_entities(&grid, &graph, &self.queries))
            }
            HeadKind::Bio => {
                let e = self.embeddings(doc);
                Ok(bio_decode(&bio_scores(&e, &self.params)?, &self.queries))
            }
        }
    }

    /// Runs the whole pipeline for a single query name, recomputing everything.
    pub fn predict_single(&self, doc: &Document, query: &str) -> Result<Prediction> {
        if self.head_kind() != HeadKind::Uner {
            return Err(Error::Config("single-query inference needs a UNER head".into()));
        }
        let one = QuerySet::new([query])?;
        let e = self.embeddings(doc);
        let q = encode_queries(&self.params, &self.config, one.names())?;
        let grid = qtc_scores(&e, &q, &self.params)?;
        let graph = top_scores(&e, &self.params)?;
        Ok(decode_entities(&grid, &graph, &one))
    }

    pub fn predict_corpus(&self, docs: &[Document]) -> Result<Vec<Prediction>> {
        par::try_map(docs, |d| self.predict(d))
    }

    pub fn doc_loss(&self, doc: &Document) -> Result<DocLoss> {
        Ok(self.forward_backward(doc, false)?.0)
    }

    /// Loss of one document and the gradient of its total with respect to every parameter.
    pub fn doc_loss_grad(&self, doc: &Document) -> Result<(DocLoss, Parameters)> {
        let (loss, part) = self.forward_backward(doc, true)?;
        let mut grads = self.params.zeros_like();
        part.expect("gradient requested").add_to(&mut grads, 1.0);
        Ok((loss, grads))
    }

    /// Mean loss and mean gradient over `docs`.
    ///
    /// Per-document gradients may run in parallel; they are summed in document
    /// order, so the result does not depend on the thread count.
    pub fn batch_loss_grad(&self, docs: &[Document]) -> Result<(f64, Parameters)> {
        let parts = par::try_map(docs, |d| self.forward_backward(d, true))?;
        let mut total = self.params.zeros_like();
        let mut loss = 0.0;
        let scale = 1.0 / docs.len().max(1) as f64;
        for (l, g) in &parts {
            loss += l.total;
            g.as_ref().expect("gradient requested").add_to(&mut total, scale);
        }
        Ok((loss * scale, total))
    }

    /// Mean total loss over `docs`.
    pub fn corpus_loss(&self, docs: &[Document]) -> Result<f64> {
        let losses = par::try_map(docs, |d| self.doc_loss(d))?;
        Ok(losses.iter().map(|l| l.total).sum::<f64>() / docs.len().max(1) as f64)
    }

    fn forward_backward(&self, doc: &Document, backward: bool) -> Result<(DocLoss, Option<DocGrad>)> {
        let (e, enc_tape) = encode_document_tape(&self.params, &self.config, doc);
        match self.head_kind() {
            HeadKind::Uner => {
                let w = self.params.uner().expect("UNER head");
                let kind = self.config.loss_kind;
                let (q, q_tape) = encode_queries_tape(&self.params, &self.config, self.queries.names())?;
                let (grid, qtc_tape) = qtc_forward(&e, &q, w)?;
                let graph = top_forward(&e, w)?;
                let (lq, dq_logits) = loss_qtc_grad(&grid, &build_qtc_labels(doc, &self.queries), kind)?;
                let (lt, dt_logits) = loss_top_grad(&graph, &build_top_labels(doc), kind)?;
                let loss = DocLoss {
                    total: loss_total(lq, lt, self.config.lambda),
                    qtc: Some(lq),
                    top: Some(lt),
                };
                check_finite(&loss, doc)?;
                if !backward {
                    return Ok((loss, None));
                }
                let mut grads = self.sparse_zeros();
                let g = grads.dense.head.uner_mut();
                let (mut d_e, d_q) = qtc_backward(&e, &q, w, &qtc_tape, &dq_logits, g);
                let dt_logits = dt_logits * self.config.lambda;
                d_e += &top_backward(&e, w, &dt_logits, g);
                query_backward(&self.params, &q_tape, &d_q, &mut grads.dense, &mut grads.query_content);
                encoder_backward_rows(&self.params, &self.config, &enc_tape, &d_e, &mut grads.dense, &mut grads.content);
                Ok((loss, Some(grads)))
            }
            HeadKind::Bio => {
                let w = self.params.bio().expect("BIO head");
                let logits = bio_scores(&e, &self.params)?;
                let (l, d_logits) = bio_loss_grad(&logits, &bio_labels(doc, &self.queries))?;
                let loss = DocLoss {
                    total: l,
                    qtc: None,
                    top: None,
                };
                check_finite(&loss, doc)?;
                if !backward {
                    return Ok((loss, None));
                }
                let mut grads = self.sparse_zeros();
                let HeadWeights::Bio(g) = &mut grads.dense.head else {
                    unreachable!("gradient head matches parameter head")
                };
                let d_e = bio_backward(&e, w, &d_logits, g);
                encoder_backward_rows(&self.params, &self.config, &enc_tape, &d_e, &mut grads.dense, &mut grads.content);
                Ok((loss, Some(grads)))
            }
        }
    }
}

impl Model {
    fn sparse_zeros(&self) -> DocGrad {
        DocGrad {
            dense: self.params.zeros_without_tables(),
            content: RowGrads::default(),
            query_content: RowGrads::default(),
        }
    }
}

fn check_finite(loss: &DocLoss, doc: &Document) -> Result<()> {
    if loss.total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("loss of document {:?} is {}", doc.id, loss.total)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::LossKind;
    use crate::synthgen::{generate_corpus, GenConfig};

    fn small() -> (ModelConfig, Vec<Document>, QuerySet) {
        let docs = generate_corpus(&GenConfig {
            tokens_per_doc: [16, 24],
            ..GenConfig::with_types(4, 2, 3)
        })
        .unwrap();
        let q = QuerySet::from_corpus(&docs).unwrap();
        let cfg = ModelConfig {
            h: 8,
            vocab_size: 64,
            bbox_frequencies: 2,
            ..ModelConfig::default()
        };
        (cfg, docs, q)
    }

    #[test]
    fn multiquery_equals_union_of_single_queries() {
        let (cfg, docs, q) = small();
        let m = Model::new(cfg, HeadKind::Uner, q.clone()).unwrap();
        for d in &docs {
            let all = m.predict(d).unwrap();
            let mut union = Vec::new();
            for name in q.names() {
                union.extend(m.predict_single(d, name).unwrap().entities);
            }
            crate::decoder::sort_entities(&mut union);
            assert_eq!(all.entities, union);
        }
    }

    #[test]
    fn loss_terms_add_up() {
        let (cfg, docs, q) = small();
        for kind in [LossKind::Zlpr, LossKind::Ce] {
            let cfg = ModelConfig {
                loss_kind: kind,
                ..cfg.clone()
            };
            let m = Model::new(cfg, HeadKind::Uner, q.clone()).unwrap();
            let l = m.doc_loss(&docs[0]).unwrap();
            assert_eq!(l.total, l.qtc.unwrap() + 0.5 * l.top.unwrap());
        }
    }

    #[test]
    fn batch_gradient_is_thread_count_independent() {
        let (cfg, docs, q) = small();
        let m = Model::new(cfg, HeadKind::Uner, q).unwrap();
        let (la, ga) = m.batch_loss_grad(&docs).unwrap();
        let (lb, gb) = par::sequentially(|| m.batch_loss_grad(&docs).unwrap());
        assert_eq!(la.to_bits(), lb.to_bits());
        assert!(ga.bit_equal(&gb));
    }

    #[test]
    fn bio_head_rejects_single_query_inference() {
        let (cfg, docs, q) = small();
        let m = Model::new(cfg, HeadKind::Bio, q).unwrap();
        assert!(m.predict_single(&docs[0], "x").is_err());
        assert!(m.predict(&docs[0]).is_ok());
        assert!(m.doc_loss(&docs[0]).unwrap().qtc.is_none());
    }
}
