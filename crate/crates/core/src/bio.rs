//! Sequence-labelling baseline: one `(2C+1)`-way BIO tag per token in storage order.
//!
//! Gold entities are projected onto storage order by sorting their indices, so an
//! entity that is split or stored out of reading order cannot be represented.

use ndarray::{Array1, Array2, Axis};

use crate::data_model::{Document, QuerySet};
use crate::decoder::{sort_entities, PredictedEntity, Prediction};
use crate::encoder::{BioWeights, Parameters};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BioTag {
    Outside,
    Begin(usize),
    Inside(usize),
}

impl BioTag {
    /// Class index: `O = 0`, `B-t = 1 + 2t`, `I-t = 2 + 2t`.
    pub fn class(self) -> usize {
        match self {
            BioTag::Outside => 0,
            BioTag::Begin(t) => 1 + 2 * t,
            BioTag::Inside(t) => 2 + 2 * t,
        }
    }

    pub fn from_class(c: usize) -> Self {
        match c {
            0 => BioTag::Outside,
            c if c % 2 == 1 => BioTag::Begin((c - 1) / 2),
            c => BioTag::Inside((c - 2) / 2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BioLabeling {
    pub tags: Vec<BioTag>,
}

/// Gold tags; overlapping entities resolve first-entity-wins in annotation order.
pub fn bio_labels(doc: &Document, queries: &QuerySet) -> BioLabeling {
    let mut tags = vec![BioTag::Outside; doc.len()];
    for ent in &doc.entities {
        let Some(t) = queries.position(&ent.type_name) else {
            continue;
        };
        let mut sorted = ent.token_indices.clone();
        sorted.sort_unstable();
        for (k, &i) in sorted.iter().enumerate() {
            if tags[i] == BioTag::Outside {
                tags[i] = if k == 0 { BioTag::Begin(t) } else { BioTag::Inside(t) };
            }
        }
    }
    BioLabeling { tags }
}

fn bio_weights(params: &Parameters) -> Result<&BioWeights> {
    params
        .bio()
        .ok_or_else(|| Error::Config("parameters carry no BIO head".into()))
}

/// `L x (2C+1)` logits, `E . W + b`.
pub fn bio_scores(e: &Array2<f64>, params: &Parameters) -> Result<Array2<f64>> {
    let w = bio_weights(params)?;
    if e.ncols() != w.weight.nrows() {
        return Err(Error::Shape(format!(
            "token width {} must be {}",
            e.ncols(),
            w.weight.nrows()
        )));
    }
    Ok(e.dot(&w.weight) + &w.bias)
}

fn log_softmax_row(row: ndarray::ArrayView1<f64>) -> Array1<f64> {
    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    row.mapv(|z| z - lse)
}

/// Mean per-token softmax cross-entropy and its gradient.
pub fn bio_loss_grad(logits: &Array2<f64>, labels: &BioLabeling) -> Result<(f64, Array2<f64>)> {
    if logits.nrows() != labels.tags.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} tags",
            logits.nrows(),
            labels.tags.len()
        )));
    }
    let n = logits.nrows().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(logits.dim());
    for (i, tag) in labels.tags.iter().enumerate() {
        let c = tag.class();
        if c >= logits.ncols() {
            return Err(Error::Shape(format!("tag class {c} beyond {} logits", logits.ncols())));
        }
        let logp = log_softmax_row(logits.row(i));
        loss -= logp[c];
        let mut g = grad.row_mut(i);
        g.assign(&logp.mapv(f64::exp));
        g[c] -= 1.0;
        g /= n;
    }
    Ok((loss / n, grad))
}

pub(crate) fn bio_backward(
    e: &Array2<f64>,
    w: &BioWeights,
    d_logits: &Array2<f64>,
    grads: &mut BioWeights,
) -> Array2<f64> {
    grads.weight += &e.t().dot(d_logits);
    grads.bias += &d_logits.sum_axis(Axis(0));
    d_logits.dot(&w.weight.t())
}

/// Runs of `B-t I-t*` in storage order; a stray `I-t` opens a new entity.
pub fn bio_decode_tags(tags: &[BioTag], queries: &QuerySet) -> Vec<(String, Vec<usize>)> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, Vec<usize>)> = None;
    for (i, &tag) in tags.iter().enumerate() {
        match tag {
            BioTag::Outside => spans.extend(open.take()),
            BioTag::Begin(t) => {
                spans.extend(open.take());
                open = Some((t, vec![i]));
            }
            BioTag::Inside(t) => match &mut open {
                Some((cur, run)) if *cur == t => run.push(i),
                _ => {
                    spans.extend(open.take());
                    open = Some((t, vec![i]));
                }
            },
        }
    }
    spans.extend(open);
    spans
        .into_iter()
        .filter(|(t, _)| *t < queries.len())
        .map(|(t, run)| (queries.names()[t].clone(), run))
        .collect()
}

/// Argmax tags decoded into entities; confidence is the smallest argmax probability.
pub fn bio_decode(logits: &Array2<f64>, queries: &QuerySet) -> Prediction {
    let mut tags = Vec::with_capacity(logits.nrows());
    let mut prob = Vec::with_capacity(logits.nrows());
    for row in logits.outer_iter() {
        let (best, _) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (c, &z)| if z > acc.1 { (c, z) } else { acc });
        tags.push(BioTag::from_class(best));
        prob.push(log_softmax_row(row)[best].exp());
    }
    let mut entities: Vec<PredictedEntity> = bio_decode_tags(&tags, queries)
        .into_iter()
        .map(|(type_name, token_indices)| PredictedEntity {
            confidence: token_indices.iter().map(|&i| prob[i]).fold(1.0, f64::min),
            type_name,
            token_indices,
        })
        .collect();
    sort_entities(&mut entities);
    Prediction { entities }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{Entity, Token};
    use crate::encoder::{HeadKind, ModelConfig};

    fn doc(n: usize, entities: Vec<Entity>) -> Document {
        Document {
            id: "b".into(),
            tokens: (0..n as i64).map(|i| Token::new("w", [i * 30, 0, i * 30 + 20, 10])).collect(),
            entities,
        }
    }

    fn q(n: usize) -> QuerySet {
        QuerySet::new((0..n).map(|t| format!("t{t}"))).unwrap()
    }

    #[test]
    fn class_indices_round_trip() {
        for c in 0..9 {
            assert_eq!(BioTag::from_class(c).class(), c);
        }
    }

    #[test]
    fn canonical_labels() {
        let l = bio_labels(&doc(6, vec![Entity::new("t0", vec![3, 4, 5])]), &q(1));
        assert_eq!(l.tags[3..], [BioTag::Begin(0), BioTag::Inside(0), BioTag::Inside(0)]);
        assert!(l.tags[..3].iter().all(|&t| t == BioTag::Outside));
    }

    #[test]
    fn non_monotone_entity_is_projected_sorted() {
        let l = bio_labels(&doc(6, vec![Entity::new("t0", vec![5, 3])]), &q(1));
        assert_eq!(l.tags[3], BioTag::Begin(0));
        assert_eq!(l.tags[5], BioTag::Inside(0));
    }

    #[test]
    fn no_entities_all_outside() {
        let l = bio_labels(&doc(4, vec![]), &q(2));
        assert!(l.tags.iter().all(|&t| t == BioTag::Outside));
    }

    #[test]
    fn first_entity_wins_on_overlap() {
        let l = bio_labels(
            &doc(4, vec![Entity::new("t0", vec![0, 1]), Entity::new("t1", vec![1, 2])]),
            &q(2),
        );
        assert_eq!(l.tags[..3], [BioTag::Begin(0), BioTag::Inside(0), BioTag::Inside(1)]);
    }

    #[test]
    fn decoding_rules() {
        let qs = q(3);
        let tags = [BioTag::Outside, BioTag::Begin(1), BioTag::Inside(1), BioTag::Outside];
        assert_eq!(bio_decode_tags(&tags, &qs), vec![("t1".to_string(), vec![1, 2])]);
        let stray = [BioTag::Inside(2), BioTag::Outside];
        assert_eq!(bio_decode_tags(&stray, &qs), vec![("t2".to_string(), vec![0])]);
        assert!(bio_decode_tags(&[BioTag::Outside; 3], &qs).is_empty());
        let switch = [BioTag::Begin(0), BioTag::Inside(1), BioTag::Inside(1)];
        assert_eq!(
            bio_decode_tags(&switch, &qs),
            vec![("t0".to_string(), vec![0]), ("t1".to_string(), vec![1, 2])]
        );
    }

    #[test]
    fn zero_weights_give_uniform_loss() {
        let cfg = ModelConfig {
            h: 4,
            vocab_size: 8,
            ..ModelConfig::default()
        };
        let qs = q(3);
        let p = Parameters::zeros(&cfg, HeadKind::Bio, &qs);
        let e = Array2::from_elem((4, 4), 0.3);
        let logits = bio_scores(&e, &p).unwrap();
        assert_eq!(logits.dim(), (4, 7));
        let labels = bio_labels(&doc(4, vec![Entity::new("t2", vec![1, 2])]), &qs);
        let (loss, _) = bio_loss_grad(&logits, &labels).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gold_round_trip_on_contiguous_entities() {
        let qs = q(2);
        let d = doc(8, vec![Entity::new("t0", vec![1, 2]), Entity::new("t1", vec![3]), Entity::new("t0", vec![5, 6, 7])]);
        let tags = bio_labels(&d, &qs).tags;
        let mut got = bio_decode_tags(&tags, &qs);
        got.sort();
        let mut want: Vec<_> = d.entities.iter().map(|e| (e.type_name.clone(), e.token_indices.clone())).collect();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn gold_cannot_express_a_split_entity() {
        let qs = q(1);
        let d = doc(5, vec![Entity::new("t0", vec![1, 3])]);
        let got = bio_decode_tags(&bio_labels(&d, &qs).tags, &qs);
        assert_ne!(got, vec![("t0".to_string(), vec![1, 3])]);
    }
}
