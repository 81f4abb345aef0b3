//! Query-aware token classification (QTC) and token order prediction (TOP).
//!
//! QTC scores every (token, query) pair with a one-hidden-layer perceptron applied
//! to `e_i + q_j`. TOP scores every directed token pair with a biaffine form
//! `e_i' W e_k + u.e_i + v.e_k + b`. Both heads decide "positive iff logit > 0".

mod loss;

use ndarray::{Array1, Array2, Array3, Axis};

pub use loss::{bce_with_logits, binary_loss, loss_total, sigmoid, softplus, LossKind};

use crate::data_model::{QtcLabelGrid, TopLabelGraph};
use crate::encoder::{HeadWeights, Parameters, UnerWeights};
use crate::error::{Error, Result};

/// Stand-in for minus infinity on the order-graph diagonal.
pub const DIAGONAL_LOGIT: f64 = -1e30;

/// `L x C` token-by-query logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrid {
    pub logits: Array2<f64>,
}

/// `L x L` edge logits; entry `(i, k)` scores `i -> k`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderGraphScores {
    pub logits: Array2<f64>,
}

impl ScoreGrid {
    pub fn n_tokens(&self) -> usize {
        self.logits.nrows()
    }

    pub fn n_queries(&self) -> usize {
        self.logits.ncols()
    }
}

/// Hidden activations of a QTC pass, `L x C x h`.
#[derive(Debug, Clone)]
pub struct QtcTape {
    hidden: Array3<f64>,
}

fn uner_weights(params: &Parameters) -> Result<&UnerWeights> {
    params
        .uner()
        .ok_or_else(|| Error::Config("parameters carry no UNER head".into()))
}

pub fn qtc_scores(e: &Array2<f64>, q: &Array2<f64>, params: &Parameters) -> Result<ScoreGrid> {
    Ok(qtc_forward(e, q, uner_weights(params)?)?.0)
}

pub fn qtc_forward(
    e: &Array2<f64>,
    q: &Array2<f64>,
    w: &UnerWeights,
) -> Result<(ScoreGrid, QtcTape)> {
    let h = w.qtc_hidden.nrows();
    if e.ncols() != h || q.ncols() != h {
        return Err(Error::Shape(format!(
            "token width {} and query width {} must both be {h}",
            e.ncols(),
            q.ncols()
        )));
    }
    let (n, c) = (e.nrows(), q.nrows());
    // W (e + q) = W e + W q: project once per token and once per query.
    let ew = e.dot(&w.qtc_hidden);
    let qw = q.dot(&w.qtc_hidden) + &w.qtc_hidden_bias;
    let mut hidden = Array3::zeros((n, c, h));
    let mut logits = Array2::zeros((n, c));
    for i in 0..n {
        for j in 0..c {
            let mut cell = hidden.slice_mut(ndarray::s![i, j, ..]);
            for a in 0..h {
                cell[a] = (ew[[i, a]] + qw[[j, a]]).tanh();
            }
            logits[[i, j]] = cell.dot(&w.qtc_out) + w.qtc_out_bias[0];
        }
    }
    Ok((ScoreGrid { logits }, QtcTape { hidden }))
}

/// Returns `(d_embeddings, d_queries)` and accumulates the QTC weight gradients.
pub fn qtc_backward(
    e: &Array2<f64>,
    q: &Array2<f64>,
    w: &UnerWeights,
    tape: &QtcTape,
    d_logits: &Array2<f64>,
    grads: &mut UnerWeights,
) -> (Array2<f64>, Array2<f64>) {
    let (n, c, h) = tape.hidden.dim();
    let mut d_ew = Array2::zeros((n, h));
    let mut d_qw = Array2::zeros((c, h));
    for i in 0..n {
        for j in 0..c {
            let dz = d_logits[[i, j]];
            if dz == 0.0 {
                continue;
            }
            grads.qtc_out_bias[0] += dz;
            let cell = tape.hidden.slice(ndarray::s![i, j, ..]);
            for a in 0..h {
                let y = cell[a];
                grads.qtc_out[a] += dz * y;
                let d_pre = dz * w.qtc_out[a] * (1.0 - y * y);
                d_ew[[i, a]] += d_pre;
                d_qw[[j, a]] += d_pre;
            }
        }
    }
    grads.qtc_hidden_bias += &d_qw.sum_axis(Axis(0));
    grads.qtc_hidden += &(e.t().dot(&d_ew) + q.t().dot(&d_qw));
    (d_ew.dot(&w.qtc_hidden.t()), d_qw.dot(&w.qtc_hidden.t()))
}

pub fn top_scores(e: &Array2<f64>, params: &Parameters) -> Result<OrderGraphScores> {
    top_forward(e, uner_weights(params)?)
}

pub fn top_forward(e: &Array2<f64>, w: &UnerWeights) -> Result<OrderGraphScores> {
    let h = w.top_bilinear.nrows();
    if e.ncols() != h {
        return Err(Error::Shape(format!("token width {} must be {h}", e.ncols())));
    }
    let n = e.nrows();
    let head: Array1<f64> = e.dot(&w.top_head);
    let tail: Array1<f64> = e.dot(&w.top_tail);
    let mut logits = e.dot(&w.top_bilinear).dot(&e.t());
    for i in 0..n {
        for k in 0..n {
            logits[[i, k]] = if i == k {
                DIAGONAL_LOGIT
            } else {
                logits[[i, k]] + head[i] + tail[k] + w.top_bias[0]
            };
        }
    }
    Ok(OrderGraphScores { logits })
}

/// Returns `d_embeddings` and accumulates the TOP weight gradients.
///
/// `d_logits` must be zero on the diagonal.
pub fn top_backward(
    e: &Array2<f64>,
    w: &UnerWeights,
    d_logits: &Array2<f64>,
    grads: &mut UnerWeights,
) -> Array2<f64> {
    let row_sum = d_logits.sum_axis(Axis(1));
    let col_sum = d_logits.sum_axis(Axis(0));
    grads.top_bias[0] += d_logits.sum();
    grads.top_head += &e.t().dot(&row_sum);
    grads.top_tail += &e.t().dot(&col_sum);
    let de = d_logits.dot(e);
    grads.top_bilinear += &e.t().dot(&de);
    let mut d_e = de.dot(&w.top_bilinear.t()) + d_logits.t().dot(&e.dot(&w.top_bilinear));
    for (mut row, (&r, &c)) in d_e.outer_iter_mut().zip(row_sum.iter().zip(col_sum.iter())) {
        row.scaled_add(r, &w.top_head);
        row.scaled_add(c, &w.top_tail);
    }
    d_e
}

fn check_dims(what: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what}: scores {a:?} vs labels {b:?}")))
    }
}

pub fn loss_qtc(scores: &ScoreGrid, labels: &QtcLabelGrid, kind: LossKind) -> Result<f64> {
    Ok(loss_qtc_grad(scores, labels, kind)?.0)
}

/// QTC loss over all `L x C` cells and its gradient with respect to the logits.
pub fn loss_qtc_grad(
    scores: &ScoreGrid,
    labels: &QtcLabelGrid,
    kind: LossKind,
) -> Result<(f64, Array2<f64>)> {
    check_dims("qtc", scores.logits.dim(), labels.labels.dim())?;
    let z: Vec<f64> = scores.logits.iter().copied().collect();
    let y: Vec<bool> = labels.labels.iter().copied().collect();
    let (loss, grad) = binary_loss(&z, &y, kind);
    let grad = Array2::from_shape_vec(scores.logits.dim(), grad).expect("same cell count");
    Ok((loss, grad))
}

pub fn loss_top(scores: &OrderGraphScores, graph: &TopLabelGraph, kind: LossKind) -> Result<f64> {
    Ok(loss_top_grad(scores, graph, kind)?.0)
}

/// TOP loss over masked off-diagonal cells only; unmasked cells get zero gradient.
pub fn loss_top_grad(
    scores: &OrderGraphScores,
    graph: &TopLabelGraph,
    kind: LossKind,
) -> Result<(f64, Array2<f64>)> {
    check_dims("top labels", scores.logits.dim(), graph.labels.dim())?;
    check_dims("top mask", scores.logits.dim(), graph.mask.dim())?;
    let mut cells = Vec::new();
    let mut z = Vec::new();
    let mut y = Vec::new();
    for ((i, k), &m) in graph.mask.indexed_iter() {
        if m && i != k {
            cells.push((i, k));
            z.push(scores.logits[[i, k]]);
            y.push(graph.labels[[i, k]]);
        }
    }
    let (loss, g) = binary_loss(&z, &y, kind);
    let mut grad = Array2::zeros(scores.logits.dim());
    for ((i, k), gv) in cells.into_iter().zip(g) {
        grad[[i, k]] = gv;
    }
    Ok((loss, grad))
}

impl HeadWeights {
    pub(crate) fn uner_mut(&mut self) -> &mut UnerWeights {
        match self {
            HeadWeights::Uner(u) => u,
            HeadWeights::Bio(_) => panic!("expected a UNER head"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::QuerySet;
    use crate::encoder::{HeadKind, ModelConfig};
    use ndarray::array;

    fn setup(h: usize) -> (ModelConfig, Parameters) {
        let cfg = ModelConfig {
            h,
            vocab_size: 16,
            ..ModelConfig::default()
        };
        let q = QuerySet::new(["a", "b"]).unwrap();
        let p = Parameters::init(&cfg, HeadKind::Uner, &q);
        (cfg, p)
    }

    fn random(n: usize, h: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::rng::SeededRng::new(seed);
        Array2::from_shape_fn((n, h), |_| rng.symmetric(1.0))
    }

    #[test]
    fn qtc_shape_and_zero_token_rows() {
        let (_, p) = setup(4);
        let mut e = random(4, 4, 1);
        e.row_mut(2).fill(0.0);
        let q = random(2, 4, 2);
        let s = qtc_scores(&e, &q, &p).unwrap();
        assert_eq!(s.logits.dim(), (4, 2));
        let bare = qtc_scores(&Array2::zeros((1, 4)), &q, &p).unwrap();
        assert_eq!(s.logits.row(2), bare.logits.row(0));
    }

    #[test]
    fn qtc_constant_when_weights_vanish() {
        let (_, mut p) = setup(4);
        let u = p.head.uner_mut();
        u.qtc_out.fill(0.0);
        u.qtc_out_bias[0] = 0.75;
        let s = qtc_scores(&random(3, 4, 1), &random(2, 4, 2), &p).unwrap();
        assert!(s.logits.iter().all(|&z| z == 0.75));
    }

    #[test]
    fn qtc_width_mismatch() {
        let (_, p) = setup(4);
        assert!(matches!(
            qtc_scores(&random(3, 5, 1), &random(2, 4, 2), &p),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn qtc_query_permutation_permutes_columns() {
        let (_, p) = setup(6);
        let e = random(5, 6, 3);
        let q = random(3, 6, 4);
        let perm = [2, 0, 1];
        let qp = crate::encoder::permute_rows(&q, &perm);
        let a = qtc_scores(&e, &q, &p).unwrap().logits;
        let b = qtc_scores(&e, &qp, &p).unwrap().logits;
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(b.column(new), a.column(old));
        }
    }

    #[test]
    fn top_constant_and_vanishing_forms() {
        let (_, mut p) = setup(4);
        {
            let u = p.head.uner_mut();
            u.top_bilinear.fill(0.0);
            u.top_head.fill(0.0);
            u.top_tail.fill(0.0);
            u.top_bias[0] = 1.0;
        }
        let g = top_scores(&random(3, 4, 1), &p).unwrap().logits;
        for ((i, k), &z) in g.indexed_iter() {
            assert_eq!(z, if i == k { DIAGONAL_LOGIT } else { 1.0 });
        }
        let (_, mut p) = setup(4);
        {
            let u = p.head.uner_mut();
            u.top_bias[0] = 0.0;
            u.top_tail.fill(0.0);
        }
        let g = top_scores(&Array2::zeros((3, 4)), &p).unwrap().logits;
        assert!(g.indexed_iter().all(|((i, k), &z)| i == k || z == 0.0));
    }

    #[test]
    fn top_is_directional() {
        let (_, p) = setup(6);
        let g = top_scores(&random(5, 6, 9), &p).unwrap().logits;
        let asymmetric = (0..5).any(|i| (0..5).any(|k| i != k && g[[i, k]] != g[[k, i]]));
        assert!(asymmetric);
    }

    #[test]
    fn top_loss_closed_forms() {
        let scores = OrderGraphScores {
            logits: array![[DIAGONAL_LOGIT, 0.0], [0.0, DIAGONAL_LOGIT]],
        };
        let empty = TopLabelGraph {
            labels: Array2::from_elem((2, 2), false),
            mask: Array2::from_elem((2, 2), false),
        };
        assert_eq!(loss_top(&scores, &empty, LossKind::Zlpr).unwrap(), 0.0);
        assert_eq!(loss_top(&scores, &empty, LossKind::Ce).unwrap(), 0.0);

        let scores = OrderGraphScores {
            logits: Array2::from_shape_fn((3, 3), |(i, k)| if i == k { DIAGONAL_LOGIT } else { 0.0 }),
        };
        let mut graph = TopLabelGraph {
            labels: Array2::from_elem((3, 3), false),
            mask: Array2::from_elem((3, 3), false),
        };
        graph.mask[[0, 1]] = true;
        graph.mask[[1, 2]] = true;
        graph.mask[[2, 0]] = true;
        graph.labels[[0, 1]] = true;
        let l = loss_top(&scores, &graph, LossKind::Zlpr).unwrap();
        assert!((l - (2f64.ln() + 3f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let s = ScoreGrid {
            logits: Array2::zeros((2, 2)),
        };
        let l = QtcLabelGrid {
            labels: Array2::from_elem((2, 3), false),
        };
        assert!(matches!(loss_qtc(&s, &l, LossKind::Ce), Err(Error::Shape(_))));
    }
}
