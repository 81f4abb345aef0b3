//! Documents, entity annotations, label grids and the JSONL corpus format.
//!
//! A corpus file holds one document per line:
//!
//! ```text
//! {"id":"d0","tokens":[{"text":"name","bbox":[10,10,40,26]}],"entities":[{"type":"header","token_indices":[0]}]}
//! ```
//!
//! Entity `token_indices` list the entity's tokens in true reading order, which
//! need not agree with the storage order of `tokens`.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of the normalized page coordinate space.
pub const PAGE_SIZE: i64 = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    /// `[x0, y0, x1, y1]` in `0..=1000` page units.
    pub bbox: [i64; 4],
}

impl Token {
    pub fn new(text: impl Into<String>, bbox: [i64; 4]) -> Self {
        Token {
            text: text.into(),
            bbox,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Entity {
    #[serde(rename = "type")]
    pub type_name: String,
    pub token_indices: Vec<usize>,
}

impl Entity {
    pub fn new(type_name: impl Into<String>, token_indices: Vec<usize>) -> Self {
        Entity {
            type_name: type_name.into(),
            token_indices,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<Token>,
    pub entities: Vec<Entity>,
}

impl Document {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// The ordered entity-type names a model is asked to extract.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySet {
    #[serde(rename = "queries")]
    names: Vec<String>,
}

impl QuerySet {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Config("query set is empty".into()));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if name.is_empty() {
                return Err(Error::Config("query name is empty".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Config(format!("duplicate query {name:?}")));
            }
        }
        Ok(QuerySet { names })
    }

    /// Sorted distinct entity types found in `docs`.
    pub fn from_corpus(docs: &[Document]) -> Result<Self> {
        let types: BTreeSet<&str> = docs
            .iter()
            .flat_map(|d| d.entities.iter().map(|e| e.type_name.as_str()))
            .collect();
        QuerySet::new(types)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: QuerySet = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        QuerySet::new(raw.names)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string(self).expect("query set serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// `labels[[i, j]]` is true iff token `i` belongs to an entity of query type `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QtcLabelGrid {
    pub labels: Array2<bool>,
}

/// Gold successor edges between entity tokens plus the cells that carry a loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopLabelGraph {
    pub labels: Array2<bool>,
    pub mask: Array2<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Violation {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

pub fn validate_document(doc: &Document) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = doc.tokens.len();
    if n == 0 {
        out.push(Violation::new("tokens", "document has no tokens"));
    }
    for (i, tok) in doc.tokens.iter().enumerate() {
        if tok.text.is_empty() {
            out.push(Violation::new(format!("tokens[{i}].text"), "empty text"));
        }
        let [x0, y0, x1, y1] = tok.bbox;
        if tok.bbox.iter().any(|&c| !(0..=PAGE_SIZE).contains(&c)) {
            out.push(Violation::new(
                format!("tokens[{i}].bbox"),
                format!("coordinates {:?} outside 0..={PAGE_SIZE}", tok.bbox),
            ));
        }
        if x1 < x0 {
            out.push(Violation::new(
                format!("tokens[{i}].bbox"),
                format!("x1 {x1} < x0 {x0}"),
            ));
        }
        if y1 < y0 {
            out.push(Violation::new(
                format!("tokens[{i}].bbox"),
                format!("y1 {y1} < y0 {y0}"),
            ));
        }
    }
    let mut spans = HashSet::new();
    for (e, ent) in doc.entities.iter().enumerate() {
        if ent.type_name.is_empty() {
            out.push(Violation::new(format!("entities[{e}].type"), "empty type"));
        }
        if ent.token_indices.is_empty() {
            out.push(Violation::new(
                format!("entities[{e}].token_indices"),
                "entity has no tokens",
            ));
        }
        let mut seen = HashSet::new();
        for (k, &idx) in ent.token_indices.iter().enumerate() {
            if idx >= n {
                out.push(Violation::new(
                    format!("entities[{e}].token_indices[{k}]"),
                    format!("index {idx} out of range for {n} tokens"),
                ));
            }
            if !seen.insert(idx) {
                out.push(Violation::new(
                    format!("entities[{e}].token_indices[{k}]"),
                    format!("index {idx} repeated"),
                ));
            }
        }
        if !spans.insert((ent.type_name.as_str(), ent.token_indices.as_slice())) {
            out.push(Violation::new(
                format!("entities[{e}]"),
                "duplicates an earlier entity of the same type",
            ));
        }
    }
    out
}

pub fn ensure_valid(doc: &Document) -> Result<()> {
    let violations = validate_document(doc);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Error::Invalid {
            line: None,
            violations,
        })
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_corpus(reader: impl BufRead) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io("<corpus>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let violations = validate_document(&doc);
        if !violations.is_empty() {
            return Err(Error::Invalid {
                line: Some(line_no),
                violations,
            });
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn save_corpus(docs: &[Document], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_corpus(docs, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_corpus(docs: &[Document], out: &mut impl Write) -> std::io::Result<()> {
    for doc in docs {
        serde_json::to_writer(&mut *out, doc)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn build_qtc_labels(doc: &Document, queries: &QuerySet) -> QtcLabelGrid {
    let mut labels = Array2::from_elem((doc.len(), queries.len()), false);
    for ent in &doc.entities {
        if let Some(j) = queries.position(&ent.type_name) {
            for &i in &ent.token_indices {
                labels[[i, j]] = true;
            }
        }
    }
    QtcLabelGrid { labels }
}

/// Successor edges from every entity, whatever its type, in one shared graph.
///
/// The mask covers off-diagonal pairs whose endpoints both belong to some entity;
/// edges touching non-entity tokens have no known label.
pub fn build_top_labels(doc: &Document) -> TopLabelGraph {
    let n = doc.len();
    let mut labels = Array2::from_elem((n, n), false);
    let mut member = vec![false; n];
    for ent in &doc.entities {
        for &i in &ent.token_indices {
            member[i] = true;
        }
        for pair in ent.token_indices.windows(2) {
            labels[[pair[0], pair[1]]] = true;
        }
    }
    let mask = Array2::from_shape_fn((n, n), |(i, k)| i != k && member[i] && member[k]);
    TopLabelGraph { labels, mask }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(text: &str, x: i64) -> Token {
        Token::new(text, [x, 10, x + 20, 26])
    }

    fn doc(n: usize, entities: Vec<Entity>) -> Document {
        Document {
            id: "d".into(),
            tokens: (0..n).map(|i| tok(&format!("t{i}"), 30 * i as i64)).collect(),
            entities,
        }
    }

    #[test]
    fn well_formed_document_has_no_violations() {
        let d = doc(3, vec![Entity::new("a", vec![0, 2])]);
        assert!(validate_document(&d).is_empty());
    }

    #[test]
    fn out_of_range_index_is_reported() {
        let d = doc(3, vec![Entity::new("a", vec![0, 5])]);
        let v = validate_document(&d);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "entities[0].token_indices[1]");
        assert!(v[0].message.contains("out of range"));
    }

    #[test]
    fn inverted_bbox_is_reported() {
        let mut d = doc(3, vec![]);
        d.tokens[1].bbox = [10, 10, 5, 10];
        let v = validate_document(&d);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "tokens[1].bbox");
    }

    #[test]
    fn other_violations() {
        let mut d = doc(2, vec![Entity::new("a", vec![1, 1]), Entity::new("a", vec![])]);
        d.tokens[0].text.clear();
        d.entities.push(Entity::new("a", vec![1, 1]));
        let fields: Vec<_> = validate_document(&d).into_iter().map(|v| v.field).collect();
        assert!(fields.contains(&"tokens[0].text".to_string()));
        assert!(fields.contains(&"entities[0].token_indices[1]".to_string()));
        assert!(fields.contains(&"entities[1].token_indices".to_string()));
        assert!(fields.contains(&"entities[2]".to_string()));
        let empty = Document {
            id: "e".into(),
            tokens: vec![],
            entities: vec![],
        };
        assert_eq!(validate_document(&empty)[0].field, "tokens");
    }

    #[test]
    fn query_set_rejects_duplicates_and_empties() {
        assert!(QuerySet::new(["a", "b"]).is_ok());
        assert!(QuerySet::new(["a", "a"]).is_err());
        assert!(QuerySet::new([""]).is_err());
        assert!(QuerySet::new(Vec::<String>::new()).is_err());
    }

    #[test]
    fn qtc_labels_follow_membership() {
        let d = doc(4, vec![Entity::new("header", vec![1, 2])]);
        let q = QuerySet::new(["header", "answer"]).unwrap();
        let g = build_qtc_labels(&d, &q).labels;
        assert_eq!(g.dim(), (4, 2));
        let ones: Vec<_> = g.indexed_iter().filter(|(_, &v)| v).map(|(ij, _)| ij).collect();
        assert_eq!(ones, vec![(1, 0), (2, 0)]);

        let none = build_qtc_labels(&doc(3, vec![]), &q).labels;
        assert!(none.iter().all(|&v| !v));

        let both = doc(
            3,
            vec![Entity::new("header", vec![0]), Entity::new("answer", vec![0, 1])],
        );
        let g = build_qtc_labels(&both, &q).labels;
        assert!(g[[0, 0]] && g[[0, 1]]);
    }

    #[test]
    fn unqueried_types_still_give_order_edges() {
        let d = doc(3, vec![Entity::new("other", vec![0, 1])]);
        let q = QuerySet::new(["header"]).unwrap();
        assert!(build_qtc_labels(&d, &q).labels.iter().all(|&v| !v));
        assert!(build_top_labels(&d).labels[[0, 1]]);
    }

    #[test]
    fn top_labels_single_entity() {
        let d = doc(5, vec![Entity::new("a", vec![0, 2, 3])]);
        let g = build_top_labels(&d);
        let pos: Vec<_> = g.labels.indexed_iter().filter(|(_, &v)| v).map(|(ij, _)| ij).collect();
        assert_eq!(pos, vec![(0, 2), (2, 3)]);
        let mask: Vec<_> = g.mask.indexed_iter().filter(|(_, &v)| v).map(|(ij, _)| ij).collect();
        assert_eq!(mask, vec![(0, 2), (0, 3), (2, 0), (2, 3), (3, 0), (3, 2)]);
    }

    #[test]
    fn top_labels_singleton_and_overlap() {
        let g = build_top_labels(&doc(5, vec![Entity::new("a", vec![4])]));
        assert!(g.labels.iter().all(|&v| !v));
        assert!(g.mask.iter().all(|&v| !v));

        let g = build_top_labels(&doc(
            4,
            vec![Entity::new("a", vec![0, 1]), Entity::new("b", vec![1, 2])],
        ));
        let pos: Vec<_> = g.labels.indexed_iter().filter(|(_, &v)| v).map(|(ij, _)| ij).collect();
        assert_eq!(pos, vec![(0, 1), (1, 2)]);
        assert_eq!(g.mask.iter().filter(|&&v| v).count(), 6);
        assert!(!g.mask.row(3).iter().any(|&v| v));
    }

    #[test]
    fn corpus_round_trip_in_memory() {
        let docs = vec![
            doc(3, vec![Entity::new("a", vec![2, 0])]),
            doc(1, vec![]),
        ];
        let mut buf = Vec::new();
        write_corpus(&docs, &mut buf).unwrap();
        let back = read_corpus(buf.as_slice()).unwrap();
        assert_eq!(back, docs);
        let mut again = Vec::new();
        write_corpus(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn missing_tokens_key_names_the_line() {
        let text = "{\"id\":\"a\",\"tokens\":[{\"text\":\"x\",\"bbox\":[0,0,1,1]}],\"entities\":[]}\n{\"id\":\"b\",\"entities\":[]}\n";
        match read_corpus(text.as_bytes()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("tokens"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_record_lists_violations() {
        let text = "{\"id\":\"a\",\"tokens\":[{\"text\":\"x\",\"bbox\":[0,0,1,1]}],\"entities\":[{\"type\":\"t\",\"token_indices\":[3]}]}\n";
        match read_corpus(text.as_bytes()) {
            Err(Error::Invalid { line, violations }) => {
                assert_eq!(line, Some(1));
                assert_eq!(violations.len(), 1);
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn empty_input_is_empty_corpus() {
        assert!(read_corpus(&b""[..]).unwrap().is_empty());
    }
}
