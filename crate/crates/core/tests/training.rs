//! Train-to-memorize runs on separable synthetic corpora.

use uner::bio::{bio_labels, bio_scores, BioTag};
use uner::data_model::{Document, QuerySet};
use uner::encoder::{HeadKind, ModelConfig};
use uner::eval::evaluate;
use uner::synthgen::{generate_corpus, GenConfig, ScrambleMode};
use uner::train::{train, TrainConfig};

/// Contiguous entities in reading order: every entity is a run of value tokens
/// right after its trigger.
fn separable(n_docs: usize, n_types: usize, seed: u64) -> (Vec<Document>, QuerySet) {
    let docs = generate_corpus(&GenConfig {
        tokens_per_doc: [12, 20],
        discontinuity_rate: 0.0,
        scramble_mode: ScrambleMode::None,
        ..GenConfig::with_types(n_docs, n_types, seed)
    })
    .unwrap();
    let queries = QuerySet::from_corpus(&docs).unwrap();
    (docs, queries)
}

#[test]
fn uner_memorizes_a_separable_corpus() {
    let (docs, queries) = separable(200, 2, 21);
    let tc = TrainConfig {
        epochs: 30,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    };
    let out = train(&docs, &queries, &ModelConfig::default(), &tc).unwrap();
    let (report, _) = evaluate(&out.model, &docs).unwrap();
    println!("training-set f1 {:.4}", report.f1);
    assert!(report.f1 >= 0.99, "training-set f1 {}", report.f1);
}

#[test]
fn bio_argmax_matches_gold_tags_on_a_separable_toy() {
    let (docs, queries) = separable(20, 2, 8);
    let cfg = ModelConfig {
        h: 32,
        vocab_size: 512,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        epochs: 60,
        batch_size: 4,
        learning_rate: 1e-2,
        head: HeadKind::Bio,
        ..TrainConfig::default()
    };
    let out = train(&docs, &queries, &cfg, &tc).unwrap();
    let mut wrong = 0;
    let mut total = 0;
    for d in &docs {
        let scores = bio_scores(&out.model.embeddings(d), &out.model.params).unwrap();
        for (row, gold) in scores.rows().into_iter().zip(bio_labels(d, &queries).tags) {
            let argmax = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            wrong += usize::from(BioTag::from_class(argmax) != gold);
            total += 1;
        }
    }
    assert_eq!(wrong, 0, "{wrong} of {total} tokens mislabeled");
}
