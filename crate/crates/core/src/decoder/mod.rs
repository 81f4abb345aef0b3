//! Greedy reconstruction of entity spans from the QTC grid and the order graph.
//!
//! For each query type `j`:
//!
//! 1. `T_j` is the set of tokens with a positive QTC logit for `j`. Only positive
//!    edges between members of `T_j` are kept.
//! 2. Members without an incoming kept edge start a series, in ascending index order.
//! 3. A series repeatedly appends the not-yet-used successor of its last token with
//!    the highest edge logit (ties go to the lower index).
//! 4. It stops when the last token has no usable successor.
//!
//! A token joins at most one series per type. Tokens reachable only through
//! cycles never get a series and are dropped.

mod oracle;

use serde::{Deserialize, Serialize};

pub use oracle::{decode_oracle, ORACLE_MAX_TOKENS};

use crate::data_model::{Entity, QuerySet};
use crate::head::{sigmoid, OrderGraphScores, ScoreGrid};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedEntity {
    #[serde(rename = "type")]
    pub type_name: String,
    pub token_indices: Vec<usize>,
    pub confidence: f64,
}

impl PredictedEntity {
    pub fn to_entity(&self) -> Entity {
        Entity::new(self.type_name.clone(), self.token_indices.clone())
    }
}

/// Decoded entities of one document, sorted by `(type, first token index)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub entities: Vec<PredictedEntity>,
}

impl Prediction {
    pub fn from_spans(spans: Vec<(String, Vec<usize>)>) -> Self {
        let mut entities: Vec<PredictedEntity> = spans
            .into_iter()
            .map(|(type_name, token_indices)| PredictedEntity {
                type_name,
                token_indices,
                confidence: 0.0,
            })
            .collect();
        sort_entities(&mut entities);
        Prediction { entities }
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// `(type, indices)` pairs, for order-insensitive comparison.
    pub fn span_set(&self) -> std::collections::BTreeSet<(String, Vec<usize>)> {
        self.entities
            .iter()
            .map(|e| (e.type_name.clone(), e.token_indices.clone()))
            .collect()
    }

    pub fn spans(&self) -> Vec<(String, Vec<usize>)> {
        self.entities
            .iter()
            .map(|e| (e.type_name.clone(), e.token_indices.clone()))
            .collect()
    }
}

pub(crate) fn sort_entities(entities: &mut [PredictedEntity]) {
    entities.sort_by(|a, b| {
        a.type_name
            .cmp(&b.type_name)
            .then_with(|| a.token_indices.first().cmp(&b.token_indices.first()))
            .then_with(|| a.token_indices.cmp(&b.token_indices))
    });
}

/// Series for one query column, before naming and sorting.
pub fn decode_type(grid: &ScoreGrid, graph: &OrderGraphScores, j: usize) -> Vec<Vec<usize>> {
    let n = grid.n_tokens();
    let selected: Vec<usize> = (0..n).filter(|&i| grid.logits[[i, j]] > 0.0).collect();
    let mut in_type = vec![false; n];
    for &i in &selected {
        in_type[i] = true;
    }
    let edge = |i: usize, k: usize| i != k && in_type[k] && graph.logits[[i, k]] > 0.0;

    let mut used = vec![false; n];
    let mut series = Vec::new();
    for &start in &selected {
        if selected.iter().any(|&p| edge(p, start)) {
            continue;
        }
        used[start] = true;
        let mut chain = vec![start];
        let mut last = start;
        loop {
            let mut best: Option<(usize, f64)> = None;
            for &k in &selected {
                if used[k] || !edge(last, k) {
                    continue;
                }
                let score = graph.logits[[last, k]];
                // `selected` is ascending, so strict `>` keeps the lower index on ties.
                if best.is_none_or(|(_, s)| score > s) {
                    best = Some((k, score));
                }
            }
            match best {
                Some((k, _)) => {
                    used[k] = true;
                    chain.push(k);
                    last = k;
                }
                None => break,
            }
        }
        series.push(chain);
    }
    series
}

pub fn decode_entities(grid: &ScoreGrid, graph: &OrderGraphScores, queries: &QuerySet) -> Prediction {
    let per_type = par::map_range(queries.len(), |j| decode_type(grid, graph, j));
    let spans = per_type
        .into_iter()
        .enumerate()
        .flat_map(|(j, series)| {
            let name = queries.names()[j].clone();
            series.into_iter().map(move |s| (name.clone(), s))
        })
        .collect();
    confidences(Prediction::from_spans(spans), grid, queries)
}

/// Sets each entity's confidence to `sigmoid(min_i grid[i, type])`.
pub fn confidences(mut prediction: Prediction, grid: &ScoreGrid, queries: &QuerySet) -> Prediction {
    for ent in &mut prediction.entities {
        if let Some(j) = queries.position(&ent.type_name) {
            let min = ent
                .token_indices
                .iter()
                .map(|&i| grid.logits[[i, j]])
                .fold(f64::INFINITY, f64::min);
            ent.confidence = sigmoid(min);
        }
    }
    prediction
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::DIAGONAL_LOGIT;
    use ndarray::Array2;

    pub(super) fn instance(n: usize, positive: &[usize], edges: &[(usize, usize, f64)]) -> (ScoreGrid, OrderGraphScores) {
        let mut grid = Array2::from_elem((n, 1), -1.0);
        for &i in positive {
            grid[[i, 0]] = 1.0;
        }
        let mut graph = Array2::from_shape_fn((n, n), |(i, k)| if i == k { DIAGONAL_LOGIT } else { -1.0 });
        for &(i, k, s) in edges {
            graph[[i, k]] = s;
        }
        (ScoreGrid { logits: grid }, OrderGraphScores { logits: graph })
    }

    fn decode(grid: &ScoreGrid, graph: &OrderGraphScores) -> Vec<Vec<usize>> {
        let q = QuerySet::new(["t"]).unwrap();
        decode_entities(grid, graph, &q)
            .entities
            .into_iter()
            .map(|e| e.token_indices)
            .collect()
    }

    #[test]
    fn single_chain() {
        let (g, o) = instance(3, &[0, 1, 2], &[(0, 1, 2.0), (1, 2, 1.5)]);
        assert_eq!(decode(&g, &o), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn nothing_positive() {
        let (g, o) = instance(4, &[], &[(0, 1, 2.0)]);
        assert!(decode(&g, &o).is_empty());
    }

    #[test]
    fn greedy_branch_choice() {
        let (g, o) = instance(4, &[0, 1, 2, 3], &[(0, 1, 1.0), (0, 2, 2.0), (2, 3, 0.5), (1, 3, 0.4)]);
        assert_eq!(decode(&g, &o), vec![vec![0, 2, 3]]);
    }

    #[test]
    fn pure_cycle_yields_nothing() {
        let (g, o) = instance(2, &[0, 1], &[(0, 1, 1.0), (1, 0, 1.0)]);
        assert!(decode(&g, &o).is_empty());
    }

    #[test]
    fn edges_to_other_tokens_are_ignored() {
        // 3 is not selected, so its edge into 0 does not stop 0 from starting.
        let (g, o) = instance(4, &[0, 1], &[(3, 0, 5.0), (0, 1, 1.0), (1, 3, 5.0)]);
        assert_eq!(decode(&g, &o), vec![vec![0, 1]]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let (g, o) = instance(3, &[0, 1, 2], &[(0, 2, 1.0), (0, 1, 1.0)]);
        assert_eq!(decode(&g, &o), vec![vec![0, 1]]);
    }

    #[test]
    fn disjoint_paths_are_recovered() {
        let (g, o) = instance(6, &[0, 1, 2, 3, 4, 5], &[(4, 1, 1.0), (1, 5, 2.0), (3, 0, 0.3)]);
        assert_eq!(decode(&g, &o), vec![vec![2], vec![3, 0], vec![4, 1, 5]]);
    }

    #[test]
    fn confidence_is_min_token_logistic() {
        let q = QuerySet::new(["t"]).unwrap();
        let grid = ScoreGrid {
            logits: ndarray::array![[0.0], [2.0], [4.0]],
        };
        let p = confidences(
            Prediction::from_spans(vec![("t".into(), vec![0]), ("t".into(), vec![1, 2])]),
            &grid,
            &q,
        );
        assert_eq!(p.entities[0].confidence, 0.5);
        assert!((p.entities[1].confidence - 0.8808).abs() < 1e-4);
        assert!(confidences(Prediction::default(), &grid, &q).is_empty());
    }

    #[test]
    fn entities_sorted_by_type_then_start() {
        let q = QuerySet::new(["zeta", "alpha"]).unwrap();
        let grid = ScoreGrid {
            logits: Array2::from_elem((3, 2), 1.0),
        };
        let graph = OrderGraphScores {
            logits: Array2::from_shape_fn((3, 3), |(i, k)| if i == k { DIAGONAL_LOGIT } else { -1.0 }),
        };
        let p = decode_entities(&grid, &graph, &q);
        let names: Vec<_> = p.entities.iter().map(|e| e.type_name.as_str()).collect();
        assert_eq!(names, ["alpha", "alpha", "alpha", "zeta", "zeta", "zeta"]);
        assert_eq!(p.entities[1].token_indices, vec![1]);
    }
}
