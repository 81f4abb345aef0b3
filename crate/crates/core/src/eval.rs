//! Entity F1, head accuracies, few-shot subsets and prediction files.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_model::{build_qtc_labels, build_top_labels, Document, QtcLabelGrid, Token, TopLabelGraph};
use crate::decoder::{decode_entities, PredictedEntity, Prediction};
use crate::encoder::HeadKind;
use crate::error::{Error, Result};
use crate::head::{OrderGraphScores, ScoreGrid};
use crate::model::Model;
use crate::par;
use crate::rng::SeededRng;

/// One line of a prediction file: the input document with predicted entities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedDocument {
    pub id: String,
    pub tokens: Vec<Token>,
    pub entities: Vec<PredictedEntity>,
}

impl PredictedDocument {
    pub fn new(doc: &Document, prediction: Prediction) -> Self {
        PredictedDocument {
            id: doc.id.clone(),
            tokens: doc.tokens.clone(),
            entities: prediction.entities,
        }
    }

    pub fn prediction(&self) -> Prediction {
        Prediction {
            entities: self.entities.clone(),
        }
    }
}

pub fn save_predictions(preds: &[PredictedDocument], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for p in preds {
        serde_json::to_writer(&mut out, p).map_err(|e| Error::io(path, e.into()))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictedDocument>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Match counts and the rates derived from them; `0/0` rates are 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct F1Stats {
    pub matched: usize,
    pub predicted: usize,
    pub gold: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl F1Stats {
    pub fn from_counts(matched: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(matched, predicted);
        let recall = ratio(matched, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        F1Stats {
            matched,
            predicted,
            gold,
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EntityScores {
    pub micro: F1Stats,
    pub per_type: BTreeMap<String, F1Stats>,
}

type Key = (String, Vec<usize>);

fn multiset<'a>(items: impl Iterator<Item = (&'a str, &'a [usize])>) -> HashMap<Key, usize> {
    let mut m = HashMap::new();
    for (t, idx) in items {
        *m.entry((t.to_string(), idx.to_vec())).or_insert(0) += 1;
    }
    m
}

/// Micro and per-type F1 under exact `(type, ordered indices)` matching.
///
/// Predictions are aligned to gold documents by id; gold documents without a
/// prediction count as predicting nothing.
pub fn entity_f1(preds: &[(String, Prediction)], gold: &[Document]) -> Result<EntityScores> {
    let by_id: HashMap<&str, &Document> = gold.iter().map(|d| (d.id.as_str(), d)).collect();
    let mut counts: BTreeMap<String, [usize; 3]> = BTreeMap::new();
    let mut seen = std::collections::HashSet::new();
    let mut tally = |pred: Option<&Prediction>, doc: &Document| {
        let p = multiset(
            pred.into_iter()
                .flat_map(|p| p.entities.iter())
                .map(|e| (e.type_name.as_str(), e.token_indices.as_slice())),
        );
        let g = multiset(doc.entities.iter().map(|e| (e.type_name.as_str(), e.token_indices.as_slice())));
        for ((t, _), n) in &p {
            counts.entry(t.clone()).or_default()[1] += n;
        }
        for (key, n) in &g {
            let c = counts.entry(key.0.clone()).or_default();
            c[2] += n;
            c[0] += (*n).min(p.get(key).copied().unwrap_or(0));
        }
    };
    for (id, pred) in preds {
        let doc = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::Eval(format!("prediction for unknown document {id:?}")))?;
        if !seen.insert(id.as_str()) {
            return Err(Error::Eval(format!("two predictions for document {id:?}")));
        }
        tally(Some(pred), doc);
    }
    for doc in gold {
        if !seen.contains(doc.id.as_str()) {
            tally(None, doc);
        }
    }
    let total = counts
        .values()
        .fold([0; 3], |a, c| [a[0] + c[0], a[1] + c[1], a[2] + c[2]]);
    Ok(EntityScores {
        micro: F1Stats::from_counts(total[0], total[1], total[2]),
        per_type: counts
            .into_iter()
            .map(|(t, c)| (t, F1Stats::from_counts(c[0], c[1], c[2])))
            .collect(),
    })
}

/// `(correct, total)` over all `L x C` cells, predicting positive iff logit > 0.
pub fn qtc_counts(grid: &ScoreGrid, labels: &QtcLabelGrid) -> Result<(usize, usize)> {
    if grid.logits.dim() != labels.labels.dim() {
        return Err(Error::Shape(format!(
            "qtc scores {:?} vs labels {:?}",
            grid.logits.dim(),
            labels.labels.dim()
        )));
    }
    let correct = grid
        .logits
        .iter()
        .zip(labels.labels.iter())
        .filter(|(&z, &y)| (z > 0.0) == y)
        .count();
    Ok((correct, labels.labels.len()))
}

/// `(correct, total)` over masked off-diagonal cells.
pub fn top_counts(graph: &OrderGraphScores, labels: &TopLabelGraph) -> Result<(usize, usize)> {
    if graph.logits.dim() != labels.labels.dim() || graph.logits.dim() != labels.mask.dim() {
        return Err(Error::Shape(format!(
            "top scores {:?} vs labels {:?}",
            graph.logits.dim(),
            labels.labels.dim()
        )));
    }
    let mut correct = 0;
    let mut total = 0;
    for ((i, k), &m) in labels.mask.indexed_iter() {
        if m && i != k {
            total += 1;
            if (graph.logits[[i, k]] > 0.0) == labels.labels[[i, k]] {
                correct += 1;
            }
        }
    }
    Ok((correct, total))
}

pub fn qtc_accuracy(grid: &ScoreGrid, labels: &QtcLabelGrid) -> Result<f64> {
    rate(qtc_counts(grid, labels)?, "qtc accuracy over zero cells")
}

pub fn top_accuracy(graph: &OrderGraphScores, labels: &TopLabelGraph) -> Result<f64> {
    rate(top_counts(graph, labels)?, "top accuracy with an empty mask")
}

fn rate((correct, total): (usize, usize), empty: &str) -> Result<f64> {
    if total == 0 {
        Err(Error::Eval(empty.into()))
    } else {
        Ok(correct as f64 / total as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub head: HeadKind,
    pub documents: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matched: usize,
    pub predicted: usize,
    pub gold: usize,
    /// Absent for the BIO head, which has no QTC or TOP scores.
    pub qtc_accuracy: Option<f64>,
    pub top_accuracy: Option<f64>,
    pub per_type: BTreeMap<String, F1Stats>,
}

impl EvalReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "head {}  documents {}", self.head, self.documents)?;
        writeln!(f, "{:<16} {:>9} {:>9} {:>9} {:>7} {:>7} {:>7}", "type", "precision", "recall", "f1", "match", "pred", "gold")?;
        let row = |f: &mut fmt::Formatter<'_>, name: &str, s: &F1Stats| {
            writeln!(
                f,
                "{:<16} {:>9.4} {:>9.4} {:>9.4} {:>7} {:>7} {:>7}",
                name, s.precision, s.recall, s.f1, s.matched, s.predicted, s.gold
            )
        };
        for (t, s) in &self.per_type {
            row(f, t, s)?;
        }
        let micro = F1Stats {
            matched: self.matched,
            predicted: self.predicted,
            gold: self.gold,
            precision: self.precision,
            recall: self.recall,
            f1: self.f1,
        };
        row(f, "(micro)", &micro)?;
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        write!(f, "qtc accuracy {}  top accuracy {}", opt(self.qtc_accuracy), opt(self.top_accuracy))
    }
}

struct DocEval {
    prediction: Prediction,
    qtc: (usize, usize),
    top: (usize, usize),
}

/// Predicts every document of `corpus` and scores the predictions.
pub fn evaluate(model: &Model, corpus: &[Document]) -> Result<(EvalReport, Vec<PredictedDocument>)> {
    let head = model.head_kind();
    let per_doc = par::try_map(corpus, |doc| -> Result<DocEval> {
        match head {
            HeadKind::Uner => {
                let (grid, graph) = model.scores(doc)?;
                Ok(DocEval {
                    qtc: qtc_counts(&grid, &build_qtc_labels(doc, &model.queries))?,
                    top: top_counts(&graph, &build_top_labels(doc))?,
                    prediction: decode_entities(&grid, &graph, &model.queries),
                })
            }
            HeadKind::Bio => Ok(DocEval {
                prediction: model.predict(doc)?,
                qtc: (0, 0),
                top: (0, 0),
            }),
        }
    })?;
    let pairs: Vec<(String, Prediction)> = corpus
        .iter()
        .zip(&per_doc)
        .map(|(d, e)| (d.id.clone(), e.prediction.clone()))
        .collect();
    let scores = entity_f1(&pairs, corpus)?;
    let sum = |f: fn(&DocEval) -> (usize, usize)| {
        per_doc
            .iter()
            .map(f)
            .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1))
    };
    let (qtc_accuracy, top_accuracy) = match head {
        HeadKind::Uner => (
            Some(rate(sum(|e| e.qtc), "qtc accuracy over zero cells")?),
            Some(rate(sum(|e| e.top), "top accuracy with an empty mask over the whole corpus")?),
        ),
        HeadKind::Bio => (None, None),
    };
    let report = EvalReport {
        head,
        documents: corpus.len(),
        precision: scores.micro.precision,
        recall: scores.micro.recall,
        f1: scores.micro.f1,
        matched: scores.micro.matched,
        predicted: scores.micro.predicted,
        gold: scores.micro.gold,
        qtc_accuracy,
        top_accuracy,
        per_type: scores.per_type,
    };
    let preds = corpus
        .iter()
        .zip(per_doc)
        .map(|(d, e)| PredictedDocument::new(d, e.prediction))
        .collect();
    Ok((report, preds))
}

/// Number of documents a few-shot split of `n` keeps: `ceil(fraction * n)`, at least 1.
pub fn few_shot_size(n: usize, fraction: f64) -> usize {
    // The slack keeps products like 0.1 * 500 = 50.000000000000007 from rounding up.
    let k = (fraction * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1, n.max(1))
}

/// A seeded sample without replacement, returned in corpus order.
pub fn few_shot_split(corpus: &[Document], fraction: f64, seed: u64) -> Result<Vec<Document>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction = {fraction} must lie in (0, 1]")));
    }
    if corpus.is_empty() {
        return Ok(Vec::new());
    }
    let k = few_shot_size(corpus.len(), fraction);
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    SeededRng::new(seed).shuffle(&mut idx);
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| corpus[i].clone()).collect())
}
