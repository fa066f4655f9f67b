//! Data model and I/O for dependency-parsed, bag-grouped corpora.
//!
//! A corpus file is JSONL with one bag per line:
//!
//! ```text
//! {"e1": "...", "e2": "...", "relation": "...", "sentences": [
//!   {"tokens": [...], "heads": [...], "e1_index": 0, "e2_index": 2, "noisy": false}]}
//! ```
//!
//! `heads` encodes a single-rooted dependency tree (-1 marks the root).
//! The relation inventory is a separate text file, one name per line,
//! and must contain the distinguished "NA" relation exactly once.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NA_RELATION: &str = "NA";
pub const UNK: &str = "<unk>";

/// One mention sentence: tokens, head indices and the two entity slots.
/// `noisy` is a synthetic-data diagnostic and never feeds training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParsedSentence {
    pub tokens: Vec<String>,
    pub heads: Vec<i32>,
    pub e1_index: usize,
    pub e2_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noisy: Option<bool>,
}

/// An entity pair with its distant-supervision label and every sentence
/// mentioning the pair; the multi-instance unit.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub e1: String,
    pub e2: String,
    pub relation_id: usize,
    pub sentences: Vec<ParsedSentence>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub bags: Vec<Bag>,
    pub relation_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct BagRecord {
    e1: String,
    e2: String,
    relation: String,
    sentences: Vec<ParsedSentence>,
}

/// Check that `heads` encodes a single-rooted acyclic tree: exactly one
/// -1, all other entries in range, and every token's head chain reaches
/// the root without revisiting a node.
pub fn validate_tree(heads: &[i32]) -> Result<()> {
    if heads.is_empty() {
        return Err(Error::invalid("empty head sequence"));
    }
    let n = heads.len();
    for (i, &h) in heads.iter().enumerate() {
        if h != -1 && (h < 0 || h as usize >= n) {
            return Err(Error::invalid(format!("token {i}: head {h} out of range")));
        }
        if h as usize == i && h >= 0 {
            return Err(Error::invalid(format!("token {i}: is its own head")));
        }
    }
    for start in 0..n {
        let mut cur = start;
        let mut steps = 0;
        while heads[cur] != -1 {
            cur = heads[cur] as usize;
            steps += 1;
            if steps > n {
                return Err(Error::invalid(format!(
                    "token {start}: cycle detected in head chain"
                )));
            }
        }
    }
    let mut root = None;
    for (i, &h) in heads.iter().enumerate() {
        if h == -1 {
            if let Some(r) = root {
                return Err(Error::invalid(format!(
                    "token {i}: second root (first root at token {r})"
                )));
            }
            root = Some(i);
        }
    }
    if root.is_none() {
        return Err(Error::invalid("no root token (expected exactly one head of -1)"));
    }
    Ok(())
}

pub fn validate_sentence(s: &ParsedSentence) -> Result<()> {
    if s.tokens.is_empty() {
        return Err(Error::invalid("sentence has no tokens"));
    }
    if s.tokens.len() != s.heads.len() {
        return Err(Error::invalid(format!(
            "{} tokens but {} heads",
            s.tokens.len(),
            s.heads.len()
        )));
    }
    validate_tree(&s.heads)?;
    if s.e1_index >= s.tokens.len() || s.e2_index >= s.tokens.len() {
        return Err(Error::invalid(format!(
            "entity index out of range ({}, {}) for {} tokens",
            s.e1_index,
            s.e2_index,
            s.tokens.len()
        )));
    }
    if s.e1_index == s.e2_index {
        return Err(Error::invalid(format!(
            "entity indices coincide at token {}",
            s.e1_index
        )));
    }
    Ok(())
}

pub fn validate_bag(bag: &Bag, n_relations: usize) -> Result<()> {
    if bag.sentences.is_empty() {
        return Err(Error::invalid(format!(
            "bag ({}, {}) has no sentences",
            bag.e1, bag.e2
        )));
    }
    if bag.relation_id >= n_relations {
        return Err(Error::invalid(format!(
            "bag ({}, {}): relation id {} out of range",
            bag.e1, bag.e2, bag.relation_id
        )));
    }
    for (i, s) in bag.sentences.iter().enumerate() {
        validate_sentence(s).map_err(|e| Error::invalid(format!("sentence {i}: {e}")))?;
        if s.tokens[s.e1_index] != bag.e1 || s.tokens[s.e2_index] != bag.e2 {
            return Err(Error::invalid(format!(
                "sentence {i}: tokens at entity indices ({:?}, {:?}) do not match the bag entities ({:?}, {:?})",
                s.tokens[s.e1_index], s.tokens[s.e2_index], bag.e1, bag.e2
            )));
        }
    }
    Ok(())
}

fn validate_relations(names: &[String]) -> Result<()> {
    let na = names.iter().filter(|n| n.as_str() == NA_RELATION).count();
    if na != 1 {
        return Err(Error::invalid(format!(
            "relation inventory must contain {NA_RELATION:?} exactly once, found {na}"
        )));
    }
    let mut seen = HashMap::new();
    for (i, n) in names.iter().enumerate() {
        if let Some(j) = seen.insert(n.as_str(), i) {
            return Err(Error::invalid(format!(
                "duplicate relation {n:?} at positions {j} and {i}"
            )));
        }
    }
    Ok(())
}

impl Dataset {
    pub fn new(bags: Vec<Bag>, relation_names: Vec<String>) -> Result<Dataset> {
        let ds = Dataset {
            bags,
            relation_names,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        validate_relations(&self.relation_names)?;
        for (i, b) in self.bags.iter().enumerate() {
            validate_bag(b, self.relation_names.len())
                .map_err(|e| Error::invalid(format!("bag {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn na_id(&self) -> usize {
        self.relation_names
            .iter()
            .position(|n| n == NA_RELATION)
            .expect("validated inventory contains NA")
    }

    pub fn sentence_count(&self) -> usize {
        self.bags.iter().map(|b| b.sentences.len()).sum()
    }
}

/// Load a JSONL corpus against a fixed relation inventory. Unknown
/// relation names are rejected with their line number; bag order is
/// preserved.
pub fn load_corpus(path: &Path, relations: &[String]) -> Result<Dataset> {
    validate_relations(relations)?;
    let (bags, _) = read_bags(path, Some(relations))?;
    Dataset::new(bags, relations.to_vec())
}

/// Load a JSONL corpus collecting the relation inventory from the file
/// itself, in order of first appearance ("NA" is appended if missing).
/// Useful where relation identity does not matter, e.g. pretraining.
pub fn load_corpus_discover(path: &Path) -> Result<Dataset> {
    let (bags, mut names) = read_bags(path, None)?;
    if !names.iter().any(|n| n == NA_RELATION) {
        names.push(NA_RELATION.to_string());
    }
    Dataset::new(bags, names)
}

fn read_bags(path: &Path, relations: Option<&[String]>) -> Result<(Vec<Bag>, Vec<String>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut names: Vec<String> = relations.map(|r| r.to_vec()).unwrap_or_default();
    let mut bags = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: BagRecord = serde_json::from_str(line).map_err(|e| Error::Format {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        let relation_id = match names.iter().position(|n| *n == record.relation) {
            Some(id) => id,
            None if relations.is_none() => {
                names.push(record.relation.clone());
                names.len() - 1
            }
            None => {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: format!("unknown relation {:?}", record.relation),
                })
            }
        };
        let bag = Bag {
            e1: record.e1,
            e2: record.e2,
            relation_id,
            sentences: record.sentences,
        };
        validate_bag(&bag, names.len()).map_err(|e| Error::Format {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: format!("bag {}: {e}", bags.len()),
        })?;
        bags.push(bag);
    }
    Ok((bags, names))
}

pub fn corpus_to_jsonl(ds: &Dataset) -> String {
    let mut out = String::new();
    for bag in &ds.bags {
        let record = BagRecord {
            e1: bag.e1.clone(),
            e2: bag.e2.clone(),
            relation: ds.relation_names[bag.relation_id].clone(),
            sentences: bag.sentences.clone(),
        };
        out.push_str(&serde_json::to_string(&record).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn save_corpus(ds: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, corpus_to_jsonl(ds).as_bytes())
}

pub fn load_relations(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let names: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    validate_relations(&names).map_err(|e| Error::Format {
        path: path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })?;
    Ok(names)
}

pub fn save_relations(names: &[String], path: &Path) -> Result<()> {
    let mut text = names.join("\n");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Write via a temporary file and rename, so failures never leave a
/// partial output behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().ok();
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Word inventory with `<unk>` reserved at id 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Vocab {
        debug_assert_eq!(words.first().map(String::as_str), Some(UNK));
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocab { words, index }
    }

    pub fn unknown_only() -> Vocab {
        Vocab::from_words(vec![UNK.to_string()])
    }

    /// Id of a word, falling back to `<unk>` (id 0).
    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Build a vocabulary from token counts: words with frequency at least
/// `min_count` get ids by descending frequency, ties broken
/// lexicographically; everything else maps to `<unk>`.
pub fn vocab_from_counts(counts: &HashMap<String, u64>, min_count: u64) -> Vocab {
    let mut kept: Vec<(&String, u64)> = counts
        .iter()
        .filter(|(w, &c)| c >= min_count && w.as_str() != UNK)
        .map(|(w, &c)| (w, c))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut words = Vec::with_capacity(kept.len() + 1);
    words.push(UNK.to_string());
    words.extend(kept.into_iter().map(|(w, _)| w.clone()));
    Vocab::from_words(words)
}

pub fn build_vocab(ds: &Dataset, min_count: u64) -> Vocab {
    let mut counts: HashMap<String, u64> = HashMap::new();
    for bag in &ds.bags {
        for s in &bag.sentences {
            for tok in &s.tokens {
                *counts.entry(tok.clone()).or_insert(0) += 1;
            }
        }
    }
    vocab_from_counts(&counts, min_count)
}

/// Clipped relative position of token `i` to entity position `p`:
/// `clamp(i - p, -clip, clip) + clip`, a bucket in `[0, 2*clip]`.
pub fn relative_position_bucket(i: usize, p: usize, clip: usize) -> usize {
    let d = (i as i64 - p as i64).clamp(-(clip as i64), clip as i64);
    (d + clip as i64) as usize
}
