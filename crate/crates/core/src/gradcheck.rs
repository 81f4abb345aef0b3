//! Central finite-difference verification of analytic gradients.

use serde::{Deserialize, Serialize};

use crate::data_model::Document;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::SeededRng;

/// Tolerance the model gradients are held to.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub tensor: String,
    /// Offset within the tensor's row-major values.
    pub offset: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: Vec<ProbeResult>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }

    /// Distinct tensor names that received at least one probe.
    pub fn tensors_probed(&self) -> std::collections::BTreeSet<&str> {
        self.probes.iter().map(|p| p.tensor.as_str()).collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// `(f(w + eps e_k) - f(w - eps e_k)) / (2 eps)` for coordinate `k`.
pub fn central_difference<F>(loss: &F, point: &[f64], k: usize, epsilon: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut w = point.to_vec();
    w[k] = point[k] + epsilon;
    let up = finite(loss(&w)?)?;
    w[k] = point[k] - epsilon;
    let down = finite(loss(&w)?)?;
    Ok((up - down) / (2.0 * epsilon))
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("loss evaluated to {v}")))
    }
}

/// Compares `analytic[k]` against a central difference of `loss` for every `k` in
/// `coords`. Probes are labelled with the single tensor name `"w"`.
pub fn grad_check<F>(
    loss: F,
    point: &[f64],
    analytic: &[f64],
    coords: &[usize],
    epsilon: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon = {epsilon} must be positive")));
    }
    if point.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "{} coordinates but {} gradient entries",
            point.len(),
            analytic.len()
        )));
    }
    finite(loss(point)?)?;
    let mut probes = Vec::with_capacity(coords.len());
    for &k in coords {
        let numeric = central_difference(&loss, point, k, epsilon)?;
        probes.push(ProbeResult {
            tensor: "w".into(),
            offset: k,
            analytic: analytic[k],
            numeric,
            rel_error: relative_error(analytic[k], numeric),
        });
    }
    Ok(report(probes))
}

fn report(probes: Vec<ProbeResult>) -> GradCheckReport {
    GradCheckReport {
        max_rel_error: probes.iter().map(|p| p.rel_error).fold(0.0, f64::max),
        probes,
    }
}

/// Checks the mean total loss of `model` over `docs`.
///
/// Probes are dealt round-robin across every parameter tensor, so at least one
/// lands in each tensor even when `probe_count` is smaller than the tensor count.
/// Within a tensor, coordinates are drawn at random from those whose analytic
/// gradient is not negligible next to the tensor's largest; coordinates the loss
/// does not touch (unused hash buckets) only tell us that zero equals zero.
pub fn check_model(
    model: &Model,
    docs: &[Document],
    probe_count: usize,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if docs.is_empty() {
        return Err(Error::Config("gradient check needs at least one document".into()));
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon = {epsilon} must be positive")));
    }
    let (_, grads) = model.batch_loss_grad(docs)?;
    let layout: Vec<(String, usize, Vec<usize>)> = {
        let mut start = 0;
        grads
            .tensors()
            .into_iter()
            .map(|t| {
                let n = t.data.len();
                let max = t.data.iter().fold(0.0f64, |a, &g| a.max(g.abs()));
                let informative: Vec<usize> = (0..n)
                    .filter(|&k| t.data[k] != 0.0 && t.data[k].abs() >= 1e-4 * max)
                    .collect();
                let entry = (t.name.to_string(), start, informative);
                start += n;
                entry
            })
            .collect()
    };
    let sizes: Vec<usize> = grads.tensors().iter().map(|t| t.data.len()).collect();
    let analytic = grads.to_flat();
    let point = model.params.to_flat();

    let mut rng = SeededRng::new(seed);
    let total = probe_count.max(layout.len());
    let mut coords = Vec::with_capacity(total);
    for p in 0..total {
        let t = p % layout.len();
        let (_, start, informative) = &layout[t];
        let offset = if informative.is_empty() {
            rng.index(sizes[t])
        } else {
            *rng.choose(informative)
        };
        coords.push((t, start + offset, offset));
    }

    let loss = |w: &[f64]| -> Result<f64> {
        let mut m = model.clone();
        m.params.set_flat(w);
        m.corpus_loss(docs)
    };
    let mut probes = Vec::with_capacity(coords.len());
    for (t, k, offset) in coords {
        let numeric = central_difference(&loss, &point, k, epsilon)?;
        probes.push(ProbeResult {
            tensor: layout[t].0.clone(),
            offset,
            analytic: analytic[k],
            numeric,
            rel_error: relative_error(analytic[k], numeric),
        });
    }
    Ok(report(probes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::QuerySet;
    use crate::encoder::{HeadKind, ModelConfig};
    use crate::head::LossKind;
    use crate::synthgen::{generate_corpus, GenConfig};

    #[test]
    fn quadratic_is_exact() {
        let r = grad_check(|w| Ok(w[0] * w[0]), &[3.0], &[6.0], &[0], 1e-4).unwrap();
        assert!(r.max_rel_error <= 1e-9);
        assert!((r.probes[0].numeric - 6.0).abs() < 1e-9);
    }

    #[test]
    fn constant_has_zero_error() {
        let r = grad_check(|_| Ok(4.5), &[1.0, 2.0], &[0.0, 0.0], &[0, 1], 1e-5).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let r = grad_check(|w| Ok(w[0] * w[0]), &[3.0], &[5.0], &[0], 1e-4).unwrap();
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let e = grad_check(|_| Ok(f64::NAN), &[0.0], &[0.0], &[0], 1e-5).unwrap_err();
        assert!(e.is_numeric());
        assert!(grad_check(|_| Ok(1.0), &[0.0], &[0.0], &[0], 0.0).is_err());
    }

    fn tiny_doc() -> (Vec<Document>, QuerySet) {
        let docs = generate_corpus(&GenConfig {
            tokens_per_doc: [8, 8],
            ..GenConfig::with_types(1, 1, 11)
        })
        .unwrap();
        let q = QuerySet::from_corpus(&docs).unwrap();
        (docs, q)
    }

    #[test]
    fn model_gradients_match_on_an_eight_token_document() {
        let (docs, q) = tiny_doc();
        for head in [HeadKind::Uner, HeadKind::Bio] {
            for kind in [LossKind::Zlpr, LossKind::Ce] {
                let cfg = ModelConfig {
                    h: 8,
                    vocab_size: 32,
                    bbox_frequencies: 2,
                    loss_kind: kind,
                    seed: 5,
                    ..ModelConfig::default()
                };
                let m = Model::new(cfg, head, q.clone()).unwrap();
                let r = check_model(&m, &docs, 50, 1e-5, 1).unwrap();
                assert!(r.probes.len() >= 50);
                assert_eq!(r.tensors_probed().len(), m.params.tensors().len());
                assert!(r.passes(GRADCHECK_TOLERANCE), "{head} {kind}: {}", r.max_rel_error);
            }
        }
    }

    #[test]
    fn every_tensor_receives_gradient() {
        let docs = generate_corpus(&GenConfig::with_types(2, 2, 4)).unwrap();
        let q = QuerySet::from_corpus(&docs).unwrap();
        for head in [HeadKind::Uner, HeadKind::Bio] {
            let cfg = ModelConfig {
                h: 8,
                vocab_size: 32,
                use_1d_position: true,
                max_positions: 16,
                ..ModelConfig::default()
            };
            let m = Model::new(cfg, head, q.clone()).unwrap();
            let (_, g) = m.batch_loss_grad(&docs).unwrap();
            for t in g.tensors() {
                assert!(t.data.iter().any(|&x| x != 0.0), "{} has no gradient", t.name);
            }
        }
    }
}
