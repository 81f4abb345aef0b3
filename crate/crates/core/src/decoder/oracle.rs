//! Reference decoder for small documents.
//!
//! Materializes positive cells and edges as sets and steps an explicit state
//! machine. Shares no code with the production decoder so the two can be fuzzed
//! against each other.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::{PredictedEntity, Prediction};
use crate::data_model::QuerySet;
use crate::error::{Error, Result};
use crate::head::{OrderGraphScores, ScoreGrid};

pub const ORACLE_MAX_TOKENS: usize = 12;

enum Step {
    PickStart,
    Extend(Vec<usize>),
    Done,
}

pub fn decode_oracle(grid: &ScoreGrid, graph: &OrderGraphScores, queries: &QuerySet) -> Result<Prediction> {
    let n = grid.logits.nrows();
    if n > ORACLE_MAX_TOKENS {
        return Err(Error::Config(format!(
            "oracle decoding is limited to {ORACLE_MAX_TOKENS} tokens, got {n}"
        )));
    }
    let mut found: Vec<PredictedEntity> = Vec::new();
    for (j, name) in queries.names().iter().enumerate() {
        let members: BTreeSet<usize> = (0..n).filter(|&i| grid.logits[[i, j]] > 0.0).collect();
        let edges: BTreeMap<(usize, usize), f64> = members
            .iter()
            .flat_map(|&a| members.iter().map(move |&b| (a, b)))
            .filter(|&(a, b)| a != b && graph.logits[[a, b]] > 0.0)
            .map(|(a, b)| ((a, b), graph.logits[[a, b]]))
            .collect();
        let has_pred: BTreeSet<usize> = edges.keys().map(|&(_, b)| b).collect();
        let mut starts: VecDeque<usize> = members.difference(&has_pred).copied().collect();
        let mut consumed: BTreeSet<usize> = BTreeSet::new();

        let mut step = Step::PickStart;
        loop {
            step = match step {
                Step::PickStart => match starts.pop_front() {
                    Some(s) => {
                        consumed.insert(s);
                        Step::Extend(vec![s])
                    }
                    None => Step::Done,
                },
                Step::Extend(series) => {
                    let tail = *series.last().expect("non-empty series");
                    let mut options: Vec<(f64, usize)> = edges
                        .iter()
                        .filter(|(&(a, b), _)| a == tail && !consumed.contains(&b))
                        .map(|(&(_, b), &w)| (w, b))
                        .collect();
                    options.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
                    match options.first() {
                        Some(&(_, next)) => {
                            consumed.insert(next);
                            let mut longer = series;
                            longer.push(next);
                            Step::Extend(longer)
                        }
                        None => {
                            let floor = series
                                .iter()
                                .map(|&i| grid.logits[[i, j]])
                                .min_by(f64::total_cmp)
                                .expect("non-empty series");
                            found.push(PredictedEntity {
                                type_name: name.clone(),
                                token_indices: series,
                                confidence: 1.0 / (1.0 + (-floor).exp()),
                            });
                            Step::PickStart
                        }
                    }
                }
                Step::Done => break,
            };
        }
    }
    found.sort_by(|a, b| {
        (a.type_name.as_str(), a.token_indices.first(), &a.token_indices).cmp(&(
            b.type_name.as_str(),
            b.token_indices.first(),
            &b.token_indices,
        ))
    });
    Ok(Prediction { entities: found })
}

#[cfg(test)]
mod tests {
    use super::super::tests::instance;
    use super::*;
    use crate::decoder::decode_entities;
    use ndarray::Array2;

    #[test]
    fn worked_examples_agree() {
        let q = QuerySet::new(["t"]).unwrap();
        let cases = [
            instance(3, &[0, 1, 2], &[(0, 1, 2.0), (1, 2, 1.5)]),
            instance(4, &[], &[(0, 1, 2.0)]),
            instance(4, &[0, 1, 2, 3], &[(0, 1, 1.0), (0, 2, 2.0), (2, 3, 0.5), (1, 3, 0.4)]),
            instance(2, &[0, 1], &[(0, 1, 1.0), (1, 0, 1.0)]),
        ];
        let expected: [Vec<Vec<usize>>; 4] = [vec![vec![0, 1, 2]], vec![], vec![vec![0, 2, 3]], vec![]];
        for ((g, o), want) in cases.iter().zip(expected) {
            let oracle = decode_oracle(g, o, &q).unwrap();
            assert_eq!(oracle, decode_entities(g, o, &q));
            let got: Vec<_> = oracle.entities.into_iter().map(|e| e.token_indices).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn no_edges_gives_singletons() {
        let q = QuerySet::new(["a", "b"]).unwrap();
        let grid = ScoreGrid {
            logits: Array2::from_elem((5, 2), 0.5),
        };
        let graph = OrderGraphScores {
            logits: Array2::from_elem((5, 5), -2.0),
        };
        let p = decode_oracle(&grid, &graph, &q).unwrap();
        assert_eq!(p.len(), 10);
        assert!(p.entities.iter().all(|e| e.token_indices.len() == 1));
    }

    #[test]
    fn size_guard() {
        let q = QuerySet::new(["a"]).unwrap();
        let grid = ScoreGrid {
            logits: Array2::zeros((13, 1)),
        };
        let graph = OrderGraphScores {
            logits: Array2::zeros((13, 13)),
        };
        assert!(decode_oracle(&grid, &graph, &q).is_err());
    }
}
