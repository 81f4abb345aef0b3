//! Synthetic key-value form documents with scrambled serialization and split entities.
//!
//! A page is a grid of cells laid out in one to three columns. Each cell is a key
//! token followed by value tokens on one line. Entity cells use one of three
//! trigger contents owned by the entity type as their key; the value tokens form
//! the entity and are drawn from a filler vocabulary shared by all cells. Filler
//! cells use generic keys and are not entities.
//!
//! Documents are first written in true reading order (column by column, top to
//! bottom, left to right). Selected entities are then split by a distractor token
//! placed between two of their tokens, and finally the storage order is scrambled.
//! Gold `token_indices` always follow true reading order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data_model::{ensure_valid, Document, Entity, Token, PAGE_SIZE};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{derive_seed, SeededRng};

const TOP_MARGIN: i64 = 40;
const BOTTOM_MARGIN: i64 = 20;
const COLUMN_PADDING: i64 = 10;
const MAX_LINE_PITCH: i64 = 24;
const MIN_LINE_PITCH: i64 = 6;
/// Horizontal gap between neighbouring tokens of one cell.
pub const TOKEN_GAP: i64 = 6;
/// Neighbours on one line closer than this belong to the same cell.
pub const CELL_GAP: i64 = 12;
const MIN_TOKEN_WIDTH: i64 = 24;
const MAX_TOKEN_WIDTH: i64 = 44;

const TRIGGERS_PER_TYPE: usize = 3;
const GENERIC_KEYS: usize = 8;
const DISTRACTORS: usize = 4;
const MIN_FILLERS: usize = 4;
const MAX_FILLER_VALUES: usize = 3;

/// Probabilities of 0, 1 and 2 entities of each type per document.
const ENTITY_COUNT_WEIGHTS: [f64; 3] = [0.2, 0.6, 0.2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScrambleMode {
    None,
    /// Serialize line by line across the whole page, interleaving columns.
    ColumnSwap,
    /// Shuffle cell blocks; tokens inside a cell keep their order.
    BlockShuffle,
    FullPermute,
}

impl FromStr for ScrambleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ScrambleMode::None),
            "column_swap" => Ok(ScrambleMode::ColumnSwap),
            "block_shuffle" => Ok(ScrambleMode::BlockShuffle),
            "full_permute" => Ok(ScrambleMode::FullPermute),
            other => Err(Error::Config(format!("unknown scramble mode {other:?}"))),
        }
    }
}

impl fmt::Display for ScrambleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScrambleMode::None => "none",
            ScrambleMode::ColumnSwap => "column_swap",
            ScrambleMode::BlockShuffle => "block_shuffle",
            ScrambleMode::FullPermute => "full_permute",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityTypeSpec {
    pub name: String,
    /// Inclusive range of value tokens per entity.
    pub length: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_docs: usize,
    /// Inclusive range of tokens per document, distractors included.
    pub tokens_per_doc: [usize; 2],
    pub entity_types: Vec<EntityTypeSpec>,
    pub discontinuity_rate: f64,
    pub scramble_mode: ScrambleMode,
    pub vocab_size: usize,
    pub seed: u64,
}

impl GenConfig {
    /// `n` types named `type0..` with 1 to 4 value tokens each.
    pub fn with_types(n_docs: usize, n_types: usize, seed: u64) -> Self {
        GenConfig {
            n_docs,
            tokens_per_doc: [32, 64],
            entity_types: (0..n_types)
                .map(|t| EntityTypeSpec {
                    name: format!("type{t}"),
                    length: [1, 4],
                })
                .collect(),
            discontinuity_rate: 0.4,
            scramble_mode: ScrambleMode::BlockShuffle,
            vocab_size: 120,
            seed,
        }
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: GenConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.tokens_per_doc;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "tokens_per_doc range [{lo}, {hi}] must satisfy 1 <= min <= max"
            )));
        }
        if !(0.0..=1.0).contains(&self.discontinuity_rate) {
            return Err(Error::Config(format!(
                "discontinuity_rate {} outside [0, 1]",
                self.discontinuity_rate
            )));
        }
        let mut names = std::collections::HashSet::new();
        for spec in &self.entity_types {
            if spec.name.is_empty() || !names.insert(spec.name.as_str()) {
                return Err(Error::Config(format!(
                    "entity type names must be distinct and non-empty ({:?})",
                    spec.name
                )));
            }
            let [a, b] = spec.length;
            if a == 0 || a > b {
                return Err(Error::Config(format!(
                    "length range [{a}, {b}] of {:?} must satisfy 1 <= min <= max",
                    spec.name
                )));
            }
        }
        if self.vocab_size < self.reserved_vocab() + MIN_FILLERS {
            return Err(Error::Config(format!(
                "vocab_size {} too small: {} trigger/key/distractor contents plus at least {MIN_FILLERS} fillers needed",
                self.vocab_size,
                self.reserved_vocab()
            )));
        }
        Ok(())
    }

    fn reserved_vocab(&self) -> usize {
        TRIGGERS_PER_TYPE * self.entity_types.len() + GENERIC_KEYS + DISTRACTORS
    }

    fn filler_count(&self) -> usize {
        self.vocab_size - self.reserved_vocab()
    }

    fn max_entity_len(&self) -> usize {
        self.entity_types.iter().map(|s| s.length[1]).max().unwrap_or(1)
    }

    /// Column counts whose width fits the widest possible cell.
    fn feasible_columns(&self) -> Vec<usize> {
        let widest_tokens = (1 + self.max_entity_len().max(MAX_FILLER_VALUES) + 1) as i64;
        let widest = widest_tokens * (MAX_TOKEN_WIDTH + TOKEN_GAP) - TOKEN_GAP;
        (1..=3)
            .filter(|&cols| PAGE_SIZE / cols as i64 - 2 * COLUMN_PADDING >= widest)
            .collect()
    }
}

/// Text of trigger `k` for an entity type.
pub fn trigger_text(type_name: &str, k: usize) -> String {
    format!("<{type_name}>{k}")
}

pub fn is_trigger_of(text: &str, type_name: &str) -> bool {
    (0..TRIGGERS_PER_TYPE).any(|k| text == trigger_text(type_name, k))
}

fn generic_key_text(k: usize) -> String {
    format!("key{k}:")
}

fn distractor_text(k: usize) -> String {
    format!("~{k}")
}

fn filler_text(k: usize) -> String {
    format!("w{k}")
}

pub fn is_distractor(text: &str) -> bool {
    text.starts_with('~')
}

pub fn generate_corpus(cfg: &GenConfig) -> Result<Vec<Document>> {
    cfg.validate()?;
    let columns = cfg.feasible_columns();
    if columns.is_empty() {
        return Err(Error::Infeasible(format!(
            "entities of up to {} tokens do not fit on one page line",
            cfg.max_entity_len()
        )));
    }
    par::try_map_range(cfg.n_docs, |i| {
        generate_document(cfg, &columns, i, derive_seed(cfg.seed, i as u64))
    })
}

#[derive(Debug, Clone)]
enum Cell {
    Entity { type_idx: usize, len: usize, split: bool },
    Filler { values: usize },
}

impl Cell {
    fn size(&self) -> usize {
        match *self {
            Cell::Entity { len, split, .. } => 1 + len + split as usize,
            Cell::Filler { values } => 1 + values,
        }
    }
}

fn generate_document(cfg: &GenConfig, columns: &[usize], index: usize, seed: u64) -> Result<Document> {
    let mut rng = SeededRng::new(seed);
    let target = rng.inclusive(cfg.tokens_per_doc[0], cfg.tokens_per_doc[1]);

    let mut entity_cells = Vec::new();
    for (t, spec) in cfg.entity_types.iter().enumerate() {
        let u = rng.unit();
        let count = if u < ENTITY_COUNT_WEIGHTS[0] {
            0
        } else if u < ENTITY_COUNT_WEIGHTS[0] + ENTITY_COUNT_WEIGHTS[1] {
            1
        } else {
            2
        };
        for _ in 0..count {
            let len = rng.inclusive(spec.length[0], spec.length[1]);
            let split = len >= 2 && rng.bernoulli(cfg.discontinuity_rate);
            entity_cells.push(Cell::Entity { type_idx: t, len, split });
        }
    }
    rng.shuffle(&mut entity_cells);

    let mut cells = Vec::new();
    let mut used = 0;
    for cell in entity_cells {
        if used + cell.size() <= target {
            used += cell.size();
            cells.push(cell);
        }
    }
    while used < target {
        let values = rng.inclusive(0, MAX_FILLER_VALUES).min(target - used - 1);
        used += 1 + values;
        cells.push(Cell::Filler { values });
    }
    rng.shuffle(&mut cells);

    let n_cols = *rng.choose(columns);
    let rows = cells.len().div_ceil(n_cols) as i64;
    let pitch = ((PAGE_SIZE - TOP_MARGIN - BOTTOM_MARGIN) / rows.max(1)).min(MAX_LINE_PITCH);
    if pitch < MIN_LINE_PITCH {
        return Err(Error::Infeasible(format!(
            "{} cells in {n_cols} columns leave a line pitch of {pitch} < {MIN_LINE_PITCH}",
            cells.len()
        )));
    }
    let height = (pitch * 2 / 3).max(4);
    let col_width = PAGE_SIZE / n_cols as i64;

    let fillers = cfg.filler_count();
    let mut tokens = Vec::with_capacity(target);
    let mut entities = Vec::new();
    let mut splits = Vec::new();
    for (c, cell) in cells.iter().enumerate() {
        let col = c as i64 / rows;
        let row = c as i64 % rows;
        let y0 = TOP_MARGIN + row * pitch;
        let y1 = y0 + height;
        let mut x = col * col_width + COLUMN_PADDING;
        let mut place = |text: String, rng: &mut SeededRng, tokens: &mut Vec<Token>| {
            let w = rng.inclusive(MIN_TOKEN_WIDTH as usize, MAX_TOKEN_WIDTH as usize) as i64;
            tokens.push(Token::new(text, [x, y0, x + w, y1]));
            x += w + TOKEN_GAP;
            tokens.len() - 1
        };
        match *cell {
            Cell::Entity { type_idx, len, split } => {
                let name = &cfg.entity_types[type_idx].name;
                let key = trigger_text(name, rng.index(TRIGGERS_PER_TYPE));
                place(key, &mut rng, &mut tokens);
                let indices: Vec<usize> = (0..len)
                    .map(|_| place(filler_text(rng.index(fillers)), &mut rng, &mut tokens))
                    .collect();
                if split {
                    splits.push((entities.len(), rng.index(len - 1)));
                }
                entities.push(Entity::new(name.clone(), indices));
            }
            Cell::Filler { values } => {
                place(generic_key_text(rng.index(GENERIC_KEYS)), &mut rng, &mut tokens);
                for _ in 0..values {
                    place(filler_text(rng.index(fillers)), &mut rng, &mut tokens);
                }
            }
        }
    }

    let mut doc = Document {
        id: format!("doc{index:05}"),
        tokens,
        entities,
    };
    for (entity, gap) in splits {
        split_entity(&mut doc, entity, gap, &mut rng);
    }
    let doc = scramble_reading_order(&doc, cfg.scramble_mode, rng.next_u64())?;
    ensure_valid(&doc)?;
    Ok(doc)
}

/// Inserts a distractor token right after the `gap`-th token of entity `entity`.
///
/// The distractor goes into storage directly after that token and into layout
/// directly to its right; tokens continuing the same cell on that line shift right.
fn split_entity(doc: &mut Document, entity: usize, gap: usize, rng: &mut SeededRng) {
    let after = doc.entities[entity].token_indices[gap];
    let [_, y0, x1, y1] = doc.tokens[after].bbox;
    let width = rng.inclusive(MIN_TOKEN_WIDTH as usize, MAX_TOKEN_WIDTH as usize) as i64;
    let shift = width + TOKEN_GAP;

    // Walk the chain of tokens continuing this cell to the right.
    let mut edge = x1;
    let mut chain = Vec::new();
    loop {
        let next = doc.tokens.iter().enumerate().find(|(i, t)| {
            !chain.contains(i)
                && t.bbox[1] == y0
                && t.bbox[3] == y1
                && t.bbox[0] >= edge
                && t.bbox[0] - edge <= CELL_GAP
        });
        match next {
            Some((i, t)) => {
                edge = t.bbox[2];
                chain.push(i);
            }
            None => break,
        }
    }
    for &i in &chain {
        let b = &mut doc.tokens[i].bbox;
        b[0] = (b[0] + shift).min(PAGE_SIZE);
        b[2] = (b[2] + shift).min(PAGE_SIZE);
    }
    let x0 = (x1 + TOKEN_GAP).min(PAGE_SIZE);
    let bbox = [x0, y0, (x0 + width).min(PAGE_SIZE), y1];
    let text = distractor_text(rng.index(DISTRACTORS));

    let at = after + 1;
    doc.tokens.insert(at, Token::new(text, bbox));
    for ent in &mut doc.entities {
        for idx in &mut ent.token_indices {
            if *idx >= at {
                *idx += 1;
            }
        }
    }
}

/// Splits a `rate` fraction of the multi-token entities with a distractor token.
///
/// The number split is `rate * eligible` with stochastic rounding; which entities
/// and which gap are drawn from `seed`.
pub fn inject_discontinuity(doc: &Document, rate: f64, seed: u64) -> Document {
    let mut rng = SeededRng::new(seed);
    let mut eligible: Vec<usize> = (0..doc.entities.len())
        .filter(|&e| doc.entities[e].token_indices.len() >= 2)
        .collect();
    let exact = rate.clamp(0.0, 1.0) * eligible.len() as f64;
    let mut count = exact.floor() as usize;
    if rng.bernoulli(exact - exact.floor()) {
        count += 1;
    }
    rng.shuffle(&mut eligible);
    let mut chosen = eligible[..count.min(eligible.len())].to_vec();
    chosen.sort_unstable();

    let mut out = doc.clone();
    for e in chosen {
        let gap = rng.index(out.entities[e].token_indices.len() - 1);
        split_entity(&mut out, e, gap, &mut rng);
    }
    out
}

/// Reorders tokens so that new position `p` holds old token `order[p]`, remapping
/// entity indices so each entity keeps the same tokens in the same reading order.
pub fn permute_tokens(doc: &Document, order: &[usize]) -> Result<Document> {
    let n = doc.len();
    let mut new_index = vec![usize::MAX; n];
    if order.len() != n {
        return Err(Error::Shape(format!(
            "permutation of length {} for {n} tokens",
            order.len()
        )));
    }
    for (new, &old) in order.iter().enumerate() {
        if old >= n || new_index[old] != usize::MAX {
            return Err(Error::Shape("order is not a permutation".into()));
        }
        new_index[old] = new;
    }
    Ok(Document {
        id: doc.id.clone(),
        tokens: order.iter().map(|&old| doc.tokens[old].clone()).collect(),
        entities: doc
            .entities
            .iter()
            .map(|e| Entity {
                type_name: e.type_name.clone(),
                token_indices: e.token_indices.iter().map(|&i| new_index[i]).collect(),
            })
            .collect(),
    })
}

/// The storage order `scramble_reading_order` would apply, as `order[new] = old`.
pub fn scramble_order(doc: &Document, mode: ScrambleMode, seed: u64) -> Vec<usize> {
    let n = doc.len();
    let mut order: Vec<usize> = (0..n).collect();
    match mode {
        ScrambleMode::None => {}
        ScrambleMode::ColumnSwap => {
            order.sort_by_key(|&i| (doc.tokens[i].bbox[1], doc.tokens[i].bbox[0], i));
        }
        ScrambleMode::BlockShuffle => {
            let mut blocks: Vec<Vec<usize>> = Vec::new();
            for i in 0..n {
                let continues = i > 0 && {
                    let prev = doc.tokens[i - 1].bbox;
                    let cur = doc.tokens[i].bbox;
                    prev[1] == cur[1]
                        && prev[3] == cur[3]
                        && cur[0] >= prev[2]
                        && cur[0] - prev[2] <= CELL_GAP
                };
                match blocks.last_mut() {
                    Some(block) if continues => block.push(i),
                    _ => blocks.push(vec![i]),
                }
            }
            SeededRng::new(seed).shuffle(&mut blocks);
            order = blocks.concat();
        }
        ScrambleMode::FullPermute => SeededRng::new(seed).shuffle(&mut order),
    }
    order
}

pub fn scramble_reading_order(doc: &Document, mode: ScrambleMode, seed: u64) -> Result<Document> {
    permute_tokens(doc, &scramble_order(doc, mode, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::validate_document;

    fn line_doc() -> Document {
        // Two cells on one line in different columns, one below.
        let tokens = vec![
            Token::new("k", [10, 40, 30, 56]),
            Token::new("a", [36, 40, 60, 56]),
            Token::new("b", [66, 40, 90, 56]),
            Token::new("c", [96, 40, 120, 56]),
            Token::new("k2", [510, 40, 530, 56]),
            Token::new("d", [10, 64, 30, 80]),
        ];
        Document {
            id: "x".into(),
            tokens,
            entities: vec![Entity::new("t", vec![1, 2, 3])],
        }
    }

    #[test]
    fn scramble_mode_parses() {
        assert_eq!("block_shuffle".parse::<ScrambleMode>().unwrap(), ScrambleMode::BlockShuffle);
        assert!("sideways".parse::<ScrambleMode>().is_err());
        assert_eq!(ScrambleMode::FullPermute.to_string(), "full_permute");
    }

    #[test]
    fn none_is_identity() {
        let d = line_doc();
        assert_eq!(scramble_reading_order(&d, ScrambleMode::None, 5).unwrap(), d);
    }

    #[test]
    fn involution_applied_twice_restores() {
        let d = line_doc();
        let p = vec![5, 2, 1, 3, 4, 0];
        let once = permute_tokens(&d, &p).unwrap();
        assert_ne!(once, d);
        assert_eq!(permute_tokens(&once, &p).unwrap(), d);
    }

    #[test]
    fn full_permute_remaps_entities() {
        let d = Document {
            id: "p".into(),
            tokens: (0..5).map(|i| Token::new(format!("t{i}"), [i * 40, 0, i * 40 + 30, 10])).collect(),
            entities: vec![Entity::new("e", vec![0, 1])],
        };
        let s = scramble_reading_order(&d, ScrambleMode::FullPermute, 11).unwrap();
        let ent = &s.entities[0].token_indices;
        assert_eq!(s.tokens[ent[0]].text, "t0");
        assert_eq!(s.tokens[ent[1]].text, "t1");
    }

    #[test]
    fn column_swap_reads_across_the_page() {
        let d = line_doc();
        let order = scramble_order(&d, ScrambleMode::ColumnSwap, 0);
        assert_eq!(order, vec![0, 1, 2, 3, 4, 5]);
        let rev = permute_tokens(&d, &[5, 4, 3, 2, 1, 0]).unwrap();
        let back = scramble_reading_order(&rev, ScrambleMode::ColumnSwap, 0).unwrap();
        let texts: Vec<_> = back.tokens.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(texts, ["k", "a", "b", "c", "k2", "d"]);
    }

    #[test]
    fn block_shuffle_keeps_cells_together() {
        let d = line_doc();
        for seed in 0..20 {
            let order = scramble_order(&d, ScrambleMode::BlockShuffle, seed);
            let p = order.iter().position(|&o| o == 0).unwrap();
            assert_eq!(&order[p..p + 4], &[0, 1, 2, 3]);
        }
    }

    #[test]
    fn split_breaks_contiguity_and_shifts_the_cell() {
        let d = line_doc();
        let s = inject_discontinuity(&d, 1.0, 3);
        assert_eq!(s.len(), 7);
        assert!(validate_document(&s).is_empty());
        let ent = &s.entities[0].token_indices;
        let texts: Vec<_> = ent.iter().map(|&i| s.tokens[i].text.as_str()).collect();
        assert_eq!(texts, ["a", "b", "c"]);
        assert!(ent.windows(2).any(|w| w[1] != w[0] + 1));
        let distractor = s.tokens.iter().position(|t| is_distractor(&t.text)).unwrap();
        let db = s.tokens[distractor].bbox;
        // Layout: nothing in the cell overlaps the distractor, the far column is untouched.
        for (i, t) in s.tokens.iter().enumerate() {
            if i != distractor && t.bbox[1] == db[1] {
                assert!(t.bbox[2] <= db[0] || t.bbox[0] >= db[2], "{t:?} overlaps {db:?}");
            }
        }
        assert_eq!(s.tokens.iter().find(|t| t.text == "k2").unwrap().bbox, [510, 40, 530, 56]);
    }

    #[test]
    fn zero_rate_is_identity_and_seed_is_deterministic() {
        let d = line_doc();
        assert_eq!(inject_discontinuity(&d, 0.0, 9), d);
        assert_eq!(inject_discontinuity(&d, 0.5, 9), inject_discontinuity(&d, 0.5, 9));
    }

    #[test]
    fn empty_corpus_and_bad_configs() {
        let mut cfg = GenConfig::with_types(0, 3, 1);
        assert!(generate_corpus(&cfg).unwrap().is_empty());
        cfg.discontinuity_rate = 1.5;
        assert!(matches!(generate_corpus(&cfg), Err(Error::Config(_))));
        let mut cfg = GenConfig::with_types(1, 3, 1);
        cfg.vocab_size = 10;
        assert!(matches!(generate_corpus(&cfg), Err(Error::Config(_))));
        let mut cfg = GenConfig::with_types(1, 3, 1);
        cfg.entity_types[0].length = [1, 30];
        assert!(matches!(generate_corpus(&cfg), Err(Error::Infeasible(_))));
        let mut cfg = GenConfig::with_types(1, 3, 1);
        cfg.tokens_per_doc = [3000, 3000];
        assert!(matches!(generate_corpus(&cfg), Err(Error::Infeasible(_))));
    }

    #[test]
    fn generated_documents_are_valid_and_sized() {
        let cfg = GenConfig::with_types(50, 5, 7);
        for d in generate_corpus(&cfg).unwrap() {
            assert!(validate_document(&d).is_empty());
            assert!((32..=64).contains(&d.len()), "{}", d.len());
        }
    }
}
