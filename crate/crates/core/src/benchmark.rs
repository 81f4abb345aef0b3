//! Reproducible experiment runners behind the `benchmark` subcommand and the
//! acceptance suite.

use std::collections::BTreeSet;
use std::fmt;
use std::time::{Duration, Instant};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data_model::{build_qtc_labels, build_top_labels, validate_document, Document, Entity, QuerySet, Token, PAGE_SIZE};
use crate::decoder::{decode_entities, decode_oracle, Prediction};
use crate::encoder::{HeadKind, ModelConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, few_shot_split, EvalReport};
use crate::gradcheck::{check_model, GradCheckReport, GRADCHECK_TOLERANCE};
use crate::head::{binary_loss, loss_total, LossKind, OrderGraphScores, ScoreGrid, DIAGONAL_LOGIT};
use crate::model::Model;
use crate::par;
use crate::rng::{derive_seed, SeededRng};
use crate::synthgen::{generate_corpus, scramble_order, GenConfig, ScrambleMode};
use crate::train::{train, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub seeds: Vec<u64>,
    pub n_train: usize,
    pub n_test: usize,
    pub n_types: usize,
    pub tokens_per_doc: [usize; 2],
    pub discontinuity_rate: f64,
    pub scramble_mode: ScrambleMode,
    pub fractions: Vec<f64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            seeds: vec![0, 1, 2],
            n_train: 500,
            n_test: 100,
            n_types: 5,
            tokens_per_doc: [32, 64],
            discontinuity_rate: 0.4,
            scramble_mode: ScrambleMode::BlockShuffle,
            fractions: vec![0.1, 0.25, 1.0],
            model: ModelConfig::default(),
            train: TrainConfig {
                epochs: 80,
                learning_rate: 3e-3,
                ..TrainConfig::default()
            },
        }
    }
}

/// Train and test documents generated from one seed, with their query set.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<Document>,
    pub test: Vec<Document>,
    pub queries: QuerySet,
}

impl BenchmarkConfig {
    pub fn gen_config(&self, seed: u64) -> GenConfig {
        GenConfig {
            tokens_per_doc: self.tokens_per_doc,
            discontinuity_rate: self.discontinuity_rate,
            scramble_mode: self.scramble_mode,
            ..GenConfig::with_types(self.n_train + self.n_test, self.n_types, seed)
        }
    }

    /// The first `n_train` generated documents train, the rest test.
    pub fn split(&self, seed: u64) -> Result<Split> {
        let mut docs = generate_corpus(&self.gen_config(seed))?;
        let test = docs.split_off(self.n_train);
        let names: Vec<String> = self.gen_config(seed).entity_types.into_iter().map(|t| t.name).collect();
        Ok(Split {
            train: docs,
            test,
            queries: QuerySet::new(names)?,
        })
    }

    pub fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            seed,
            ..self.model.clone()
        }
    }

    pub fn train_config(&self, head: HeadKind, seed: u64) -> TrainConfig {
        TrainConfig {
            head,
            seed,
            ..self.train.clone()
        }
    }

    /// Trains `head` on a `fraction` subset of the split and evaluates on its test part.
    pub fn run(&self, split: &Split, head: HeadKind, fraction: f64, seed: u64) -> Result<(EvalReport, Model)> {
        let subset = few_shot_split(&split.train, fraction, seed)?;
        let out = train(&subset, &split.queries, &self.model_config(seed), &self.train_config(head, seed))?;
        let (report, _) = evaluate(&out.model, &split.test)?;
        Ok((report, out.model))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub uner: EvalReport,
    pub bio: EvalReport,
    pub uner_seconds: f64,
    pub bio_seconds: f64,
}

/// UNER and BIO trained on the full training split of one seed.
pub fn compare_heads(cfg: &BenchmarkConfig, split: &Split, seed: u64) -> Result<(SeedComparison, Model)> {
    let t = Instant::now();
    let (uner, model) = cfg.run(split, HeadKind::Uner, 1.0, seed)?;
    let uner_seconds = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let (bio, _) = cfg.run(split, HeadKind::Bio, 1.0, seed)?;
    Ok((
        SeedComparison {
            seed,
            uner,
            bio,
            uner_seconds,
            bio_seconds: t.elapsed().as_secs_f64(),
        },
        model,
    ))
}

/// A random decoding instance; about half the values come from a small grid so
/// that ties occur.
pub fn random_instance(rng: &mut SeededRng, n: usize, c: usize) -> (ScoreGrid, OrderGraphScores) {
    const GRID: [f64; 6] = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0];
    let draw = |rng: &mut SeededRng| {
        if rng.bernoulli(0.5) {
            *rng.choose(&GRID)
        } else {
            rng.symmetric(3.0)
        }
    };
    let grid = Array2::from_shape_fn((n, c), |_| draw(rng));
    let graph = Array2::from_shape_fn((n, n), |(i, k)| if i == k { DIAGONAL_LOGIT } else { draw(rng) });
    (ScoreGrid { logits: grid }, OrderGraphScores { logits: graph })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuzzOutcome {
    pub instances: usize,
    pub mismatches: usize,
}

/// Compares the decoder with the reference decoder on seeded random instances.
pub fn decoder_fuzz(instances: usize, n_tokens: usize, n_types: usize, seed: u64) -> Result<FuzzOutcome> {
    let queries = QuerySet::new((0..n_types).map(|t| format!("type{t}")))?;
    let mismatches = par::try_map_range(instances, |i| -> Result<bool> {
        let mut rng = SeededRng::new(derive_seed(seed, i as u64));
        let (grid, graph) = random_instance(&mut rng, n_tokens, n_types);
        Ok(decode_entities(&grid, &graph, &queries) != decode_oracle(&grid, &graph, &queries)?)
    })?
    .into_iter()
    .filter(|&m| m)
    .count();
    Ok(FuzzOutcome { instances, mismatches })
}

/// Maps indices of a permuted document (`order[new] = old`) back to the original.
pub fn relabel(prediction: &Prediction, order: &[usize]) -> BTreeSet<(String, Vec<usize>)> {
    prediction
        .entities
        .iter()
        .map(|e| (e.type_name.clone(), e.token_indices.iter().map(|&i| order[i]).collect()))
        .collect()
}

/// Whether the model's scores and predictions on `doc` and on its storage
/// permutation `order` agree exactly after relabeling.
pub fn order_invariant(model: &Model, doc: &Document, order: &[usize]) -> Result<bool> {
    let permuted = crate::synthgen::permute_tokens(doc, order)?;
    let base = model.predict(doc)?;
    let moved = model.predict(&permuted)?;
    if base.span_set() != relabel(&moved, order) {
        return Ok(false);
    }
    if model.head_kind() != HeadKind::Uner {
        return Ok(true);
    }
    let (g0, o0) = model.scores(doc)?;
    let (g1, o1) = model.scores(&permuted)?;
    for (new, &old) in order.iter().enumerate() {
        if g1.logits.row(new).iter().zip(g0.logits.row(old)).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Ok(false);
        }
        for (k, &old_k) in order.iter().enumerate() {
            if o1.logits[[new, k]].to_bits() != o0.logits[[old, old_k]].to_bits() {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Documents among `docs` whose predictions change under a full storage permutation.
pub fn reading_order_failures(model: &Model, docs: &[Document], seed: u64) -> Result<usize> {
    let flags = par::try_map_range(docs.len(), |i| {
        let order = scramble_order(&docs[i], ScrambleMode::FullPermute, derive_seed(seed, i as u64));
        order_invariant(model, &docs[i], &order)
    })?;
    Ok(flags.into_iter().filter(|ok| !ok).count())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiQueryOutcome {
    pub documents: usize,
    pub mismatches: usize,
    pub batched_seconds: f64,
    pub separate_seconds: f64,
}

impl MultiQueryOutcome {
    pub fn ratio(&self) -> f64 {
        self.batched_seconds / self.separate_seconds
    }
}

/// Multi-query inference against one full pipeline run per query, both timed on
/// one thread.
pub fn multiquery_check(model: &Model, docs: &[Document]) -> Result<MultiQueryOutcome> {
    par::sequentially(|| {
        let t = Instant::now();
        let batched: Vec<Prediction> = docs.iter().map(|d| model.predict(d)).collect::<Result<_>>()?;
        let batched_time = t.elapsed();
        let t = Instant::now();
        let mut separate = Vec::with_capacity(docs.len());
        for d in docs {
            let mut union = BTreeSet::new();
            for name in model.queries.names() {
                union.extend(model.predict_single(d, name)?.span_set());
            }
            separate.push(union);
        }
        let separate_time = t.elapsed();
        let mismatches = batched
            .iter()
            .zip(&separate)
            .filter(|(b, s)| &b.span_set() != *s)
            .count();
        Ok(MultiQueryOutcome {
            documents: docs.len(),
            mismatches,
            batched_seconds: secs(batched_time),
            separate_seconds: secs(separate_time),
        })
    })
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64().max(1e-9)
}

/// A random valid document with at least one token: random boxes, up to `max_types` types, entities with
/// distinct indices in random order.
pub fn random_document(rng: &mut SeededRng, max_tokens: usize, max_types: usize) -> Document {
    let n = rng.inclusive(1, max_tokens.max(1));
    let tokens = (0..n)
        .map(|i| {
            let x0 = rng.inclusive(0, PAGE_SIZE as usize) as i64;
            let y0 = rng.inclusive(0, PAGE_SIZE as usize) as i64;
            let x1 = rng.inclusive(x0 as usize, PAGE_SIZE as usize) as i64;
            let y1 = rng.inclusive(y0 as usize, PAGE_SIZE as usize) as i64;
            Token::new(format!("t{}", i % 7), [x0, y0, x1, y1])
        })
        .collect();
    let mut entities: Vec<Entity> = Vec::new();
    for _ in 0..rng.inclusive(0, 4) {
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        idx.truncate(rng.inclusive(1, n.min(5)));
        let e = Entity::new(format!("type{}", rng.index(max_types.max(1))), idx);
        if !entities.contains(&e) {
            entities.push(e);
        }
    }
    Document {
        id: "fuzz".into(),
        tokens,
        entities,
    }
}

/// Checks the label-construction invariants on one document; returns what fails.
pub fn label_invariant_violations(doc: &Document, queries: &QuerySet) -> Vec<String> {
    let mut out = Vec::new();
    let qtc = build_qtc_labels(doc, queries);
    let top = build_top_labels(doc);
    let n = doc.len();
    if qtc.labels.dim() != (n, queries.len()) {
        out.push(format!("qtc shape {:?}", qtc.labels.dim()));
        return out;
    }
    let pairs: BTreeSet<(usize, usize)> = doc
        .entities
        .iter()
        .filter_map(|e| queries.position(&e.type_name).map(|j| (e, j)))
        .flat_map(|(e, j)| e.token_indices.iter().map(move |&i| (i, j)))
        .collect();
    if qtc.labels.iter().filter(|&&b| b).count() != pairs.len() {
        out.push("qtc positives differ from membership pairs".into());
    }
    for &(i, j) in &pairs {
        if !qtc.labels[[i, j]] {
            out.push(format!("qtc ({i},{j}) missing"));
        }
    }
    let edges: BTreeSet<(usize, usize)> = doc
        .entities
        .iter()
        .flat_map(|e| e.token_indices.windows(2).map(|w| (w[0], w[1])))
        .collect();
    let members: BTreeSet<usize> = doc.entities.iter().flat_map(|e| e.token_indices.iter().copied()).collect();
    for i in 0..n {
        if top.labels[[i, i]] || top.mask[[i, i]] {
            out.push(format!("diagonal ({i},{i}) set"));
        }
        for k in 0..n {
            if top.labels[[i, k]] != edges.contains(&(i, k)) {
                out.push(format!("top label ({i},{k})"));
            }
            if top.labels[[i, k]] && !top.mask[[i, k]] {
                out.push(format!("label outside mask ({i},{k})"));
            }
            let want = i != k && members.contains(&i) && members.contains(&k);
            if top.mask[[i, k]] != want {
                out.push(format!("mask ({i},{k})"));
            }
        }
    }
    out
}

/// Fuzzes the label invariants over `count` random valid documents.
pub fn label_fuzz(count: usize, seed: u64) -> Result<FuzzOutcome> {
    let queries = QuerySet::new(["type0", "type1", "type3"])?;
    let mut mismatches = 0;
    for i in 0..count {
        let doc = random_document(&mut SeededRng::new(derive_seed(seed, i as u64)), 24, 4);
        if !validate_document(&doc).is_empty() {
            return Err(Error::Eval("fuzzer produced an invalid document".into()));
        }
        if !label_invariant_violations(&doc, &queries).is_empty() {
            mismatches += 1;
        }
    }
    Ok(FuzzOutcome {
        instances: count,
        mismatches,
    })
}

/// Largest deviation of the loss implementations from their closed forms.
pub fn closed_form_error() -> f64 {
    let mut worst = 0.0f64;
    for (p, n) in [(0, 1), (1, 0), (2, 6), (5, 40), (17, 3)] {
        let labels: Vec<bool> = (0..p + n).map(|i| i < p).collect();
        let (l, _) = binary_loss(&vec![0.0; p + n], &labels, LossKind::Zlpr);
        worst = worst.max((l - ((1.0 + p as f64).ln() + (1.0 + n as f64).ln())).abs());
    }
    for z in [-3.0, -0.25, 0.0, 0.7, 4.0] {
        let s = 1.0 / (1.0 + f64::exp(-z));
        for y in [true, false] {
            let hand = if y { -s.ln() } else { -(1.0 - s).ln() };
            let (l, _) = binary_loss(&[z], &[y], LossKind::Ce);
            worst = worst.max((l - hand).abs());
        }
    }
    for (q, t, lambda) in [(1.0, 2.0, 0.5), (0.25, 8.0, 0.125), (3.0, 1.0, 0.0)] {
        if loss_total(q, t, lambda) != q + lambda * t {
            worst = f64::INFINITY;
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCase {
    pub head: HeadKind,
    pub loss_kind: LossKind,
    pub tensors: usize,
    pub tensors_probed: usize,
    pub report: GradCheckReport,
}

/// Gradient checks for both heads and both losses on one generated 8-token document.
pub fn gradient_cases(model: &ModelConfig, probes: usize, seed: u64) -> Result<Vec<GradientCase>> {
    let docs = generate_corpus(&GenConfig {
        tokens_per_doc: [8, 8],
        ..GenConfig::with_types(1, 2, seed)
    })?;
    let queries = QuerySet::new(["type0", "type1"])?;
    let mut out = Vec::new();
    for head in [HeadKind::Uner, HeadKind::Bio] {
        for loss_kind in [LossKind::Zlpr, LossKind::Ce] {
            let cfg = ModelConfig {
                loss_kind,
                seed,
                ..model.clone()
            };
            let m = Model::new(cfg, head, queries.clone())?;
            let report = check_model(&m, &docs, probes, 1e-5, seed)?;
            out.push(GradientCase {
                head,
                loss_kind,
                tensors: m.params.tensors().len(),
                tensors_probed: report.tensors_probed().len(),
                report,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: usize,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "criterion {} [{}] {}: {}",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotPoint {
    pub fraction: f64,
    pub mean_f1: f64,
    pub mean_qtc_accuracy: f64,
    pub mean_top_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: BenchmarkConfig,
    pub seeds: Vec<SeedComparison>,
    pub few_shot: Vec<FewShotPoint>,
    pub criteria: Vec<CriterionResult>,
}

impl BenchmarkReport {
    pub fn passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }

    pub fn mean_f1(&self, head: HeadKind) -> f64 {
        mean(self.seeds.iter().map(|s| match head {
            HeadKind::Uner => s.uner.f1,
            HeadKind::Bio => s.bio.f1,
        }))
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl fmt::Display for BenchmarkReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<6} {:>9} {:>9} {:>9} {:>9} {:>9}", "seed", "uner f1", "bio f1", "gap", "uner s", "bio s")?;
        for s in &self.seeds {
            writeln!(
                f,
                "{:<6} {:>9.4} {:>9.4} {:>9.4} {:>9.1} {:>9.1}",
                s.seed,
                s.uner.f1,
                s.bio.f1,
                s.uner.f1 - s.bio.f1,
                s.uner_seconds,
                s.bio_seconds
            )?;
        }
        let (u, b) = (self.mean_f1(HeadKind::Uner), self.mean_f1(HeadKind::Bio));
        writeln!(f, "{:<6} {:>9.4} {:>9.4} {:>9.4}", "mean", u, b, u - b)?;
        if !self.few_shot.is_empty() {
            writeln!(f, "{:<9} {:>9} {:>9} {:>9}", "fraction", "uner f1", "qtc acc", "top acc")?;
            for p in &self.few_shot {
                writeln!(
                    f,
                    "{:<9} {:>9.4} {:>9.4} {:>9.4}",
                    p.fraction, p.mean_f1, p.mean_qtc_accuracy, p.mean_top_accuracy
                )?;
            }
        }
        for c in &self.criteria {
            writeln!(f, "{c}")?;
        }
        Ok(())
    }
}

/// Runs every acceptance check. `progress` receives one line per finished step.
pub fn run_benchmark(cfg: &BenchmarkConfig, progress: &mut dyn FnMut(&str)) -> Result<BenchmarkReport> {
    let mut criteria = Vec::new();
    let mut seeds = Vec::new();
    let mut few: Vec<Vec<(f64, EvalReport)>> = Vec::new();
    let mut first: Option<(Split, Model)> = None;

    for &seed in &cfg.seeds {
        let split = cfg.split(seed)?;
        let (cmp, model) = compare_heads(cfg, &split, seed)?;
        progress(&format!(
            "seed {seed}: uner f1 {:.4} ({:.0}s), bio f1 {:.4} ({:.0}s)",
            cmp.uner.f1, cmp.uner_seconds, cmp.bio.f1, cmp.bio_seconds
        ));
        let mut curve = Vec::new();
        for &fraction in &cfg.fractions {
            let report = if fraction >= 1.0 {
                cmp.uner.clone()
            } else {
                cfg.run(&split, HeadKind::Uner, fraction, seed)?.0
            };
            progress(&format!("seed {seed}: fraction {fraction} uner f1 {:.4}", report.f1));
            curve.push((fraction, report));
        }
        few.push(curve);
        seeds.push(cmp);
        if first.is_none() {
            first = Some((split, model));
        }
    }

    let (u, b) = (
        mean(seeds.iter().map(|s| s.uner.f1)),
        mean(seeds.iter().map(|s| s.bio.f1)),
    );
    criteria.push(CriterionResult {
        id: 1,
        name: "structural failure of BIO".into(),
        passed: !seeds.is_empty() && u >= 0.90 && u - b >= 0.10,
        detail: format!("mean uner f1 {u:.4} (>= 0.90), bio {b:.4}, gap {:.4} (>= 0.10)", u - b),
    });

    let few_shot: Vec<FewShotPoint> = cfg
        .fractions
        .iter()
        .enumerate()
        .map(|(k, &fraction)| FewShotPoint {
            fraction,
            mean_f1: mean(few.iter().map(|c| c[k].1.f1)),
            mean_qtc_accuracy: mean(few.iter().map(|c| c[k].1.qtc_accuracy.unwrap_or(0.0))),
            mean_top_accuracy: mean(few.iter().map(|c| c[k].1.top_accuracy.unwrap_or(0.0))),
        })
        .collect();
    let monotone = few_shot.windows(2).all(|w| w[1].mean_f1 >= w[0].mean_f1 - 0.02);
    let full = few_shot.iter().find(|p| p.fraction >= 1.0);
    let accurate = full.is_some_and(|p| p.mean_qtc_accuracy >= 0.95 && p.mean_top_accuracy >= 0.95);
    criteria.push(CriterionResult {
        id: 2,
        name: "few-shot trend".into(),
        passed: !few_shot.is_empty() && monotone && accurate,
        detail: format!(
            "f1 {} (monotone within 0.02: {monotone}); qtc/top accuracy at 1.0: {}",
            few_shot
                .iter()
                .map(|p| format!("{}:{:.4}", p.fraction, p.mean_f1))
                .collect::<Vec<_>>()
                .join(" "),
            full.map_or("n/a".into(), |p| format!("{:.4}/{:.4}", p.mean_qtc_accuracy, p.mean_top_accuracy))
        ),
    });

    let fuzz = decoder_fuzz(1000, 8, 3, 0)?;
    criteria.push(CriterionResult {
        id: 3,
        name: "decoder matches reference decoder".into(),
        passed: fuzz.mismatches == 0,
        detail: format!("{} mismatches over {} instances", fuzz.mismatches, fuzz.instances),
    });
    progress("decoder fuzz done");

    let cases = gradient_cases(&cfg.model, 50, 3)?;
    let worst = cases.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
    let covered = cases.iter().all(|c| c.tensors_probed == c.tensors && c.report.probes.len() >= 50);
    criteria.push(CriterionResult {
        id: 4,
        name: "gradient check".into(),
        passed: covered && worst <= GRADCHECK_TOLERANCE,
        detail: format!("max relative error {worst:.3e} over {} runs, every tensor probed: {covered}", cases.len()),
    });
    progress("gradient checks done");

    let err = closed_form_error();
    criteria.push(CriterionResult {
        id: 5,
        name: "loss closed forms".into(),
        passed: err <= 1e-9,
        detail: format!("max deviation {err:.3e}"),
    });

    if let Some((split, model)) = &first {
        let docs = &split.test[..split.test.len().min(100)];
        let failures = reading_order_failures(model, docs, 17)?;
        let leaky_cfg = ModelConfig {
            use_1d_position: true,
            ..model.config.clone()
        };
        let leaky_train = TrainConfig {
            epochs: 3,
            ..cfg.train_config(HeadKind::Uner, 0)
        };
        let leaky = train(&split.train, &split.queries, &leaky_cfg, &leaky_train)?.model;
        let leaks = reading_order_failures(&leaky, docs, 17)?;
        criteria.push(CriterionResult {
            id: 6,
            name: "reading-order invariance".into(),
            passed: failures == 0 && leaks >= 1,
            detail: format!(
                "{failures} of {} documents change without positions; {leaks} change with positions",
                docs.len()
            ),
        });
        progress("reading-order checks done");

        let mq = multiquery_check(model, docs)?;
        criteria.push(CriterionResult {
            id: 7,
            name: "multi-query reuse".into(),
            passed: mq.mismatches == 0 && mq.ratio() <= 0.6,
            detail: format!(
                "{} mismatches over {} documents; batched {:.3}s vs separate {:.3}s (ratio {:.3} <= 0.6)",
                mq.mismatches,
                mq.documents,
                mq.batched_seconds,
                mq.separate_seconds,
                mq.ratio()
            ),
        });
    }

    let labels = label_fuzz(1000, 5)?;
    criteria.push(CriterionResult {
        id: 8,
        name: "label construction invariants".into(),
        passed: labels.mismatches == 0,
        detail: format!("{} violating documents out of {}", labels.mismatches, labels.instances),
    });
    criteria.sort_by_key(|c| c.id);

    Ok(BenchmarkReport {
        config: cfg.clone(),
        seeds,
        few_shot,
        criteria,
    })
}
