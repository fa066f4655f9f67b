//! Embedding tables, dependency-arc symbols and their syntactic
//! contexts, plus word2vec-style text file I/O.
//!
//! An arc symbol is the lexicalized head-modifier pair of one
//! dependency, rendered `head→child` (the root token gets the
//! synthetic head `ROOT`). For pretraining, the contexts of an arc
//! `p→c` are its grandparent arc `gp→p` and every grandchild arc
//! `c→gc`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::corpus::{write_atomic, Dataset, ParsedSentence, Vocab, UNK};
use crate::error::{Error, Result};

pub const ROOT: &str = "ROOT";

/// Lexicalized head-modifier pair, without the relation label.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArcSymbol {
    pub head: String,
    pub child: String,
}

impl ArcSymbol {
    pub fn new(head: &str, child: &str) -> ArcSymbol {
        ArcSymbol {
            head: head.to_string(),
            child: child.to_string(),
        }
    }

    /// `head→child` with internal whitespace flattened to `_` so the
    /// rendered symbol survives the space-separated embedding format.
    pub fn render(&self) -> String {
        fn clean(s: &str) -> String {
            s.chars().map(|c| if c.is_whitespace() { '_' } else { c }).collect()
        }
        format!("{}→{}", clean(&self.head), clean(&self.child))
    }
}

/// Arc symbol of token `i`: `head(w_i)→w_i`, or `ROOT→w_i` for the root.
pub fn arc_symbol(s: &ParsedSentence, i: usize) -> ArcSymbol {
    if s.heads[i] == -1 {
        ArcSymbol::new(ROOT, &s.tokens[i])
    } else {
        ArcSymbol::new(&s.tokens[s.heads[i] as usize], &s.tokens[i])
    }
}

/// Children of each token, in token order.
pub fn child_lists(heads: &[i32]) -> Vec<Vec<usize>> {
    let mut children = vec![Vec::new(); heads.len()];
    for (i, &h) in heads.iter().enumerate() {
        if h >= 0 {
            children[h as usize].push(i);
        }
    }
    children
}

/// (target, context) arc pairs for pretraining: for each real arc
/// `p→c`, the grandparent arc `gp→p` when `p` itself has a parent, and
/// the grandchild arcs `c→gc` for every child of `c`. Nothing else;
/// in particular the virtual root contributes no arc.
pub fn extract_dep_contexts(s: &ParsedSentence) -> Vec<(ArcSymbol, ArcSymbol)> {
    let children = child_lists(&s.heads);
    let mut pairs = Vec::new();
    for c in 0..s.heads.len() {
        let h = s.heads[c];
        if h < 0 {
            continue;
        }
        let p = h as usize;
        let target = ArcSymbol::new(&s.tokens[p], &s.tokens[c]);
        if s.heads[p] >= 0 {
            let gp = s.heads[p] as usize;
            pairs.push((target.clone(), ArcSymbol::new(&s.tokens[gp], &s.tokens[p])));
        }
        for &gc in &children[c] {
            pairs.push((target.clone(), ArcSymbol::new(&s.tokens[c], &s.tokens[gc])));
        }
    }
    pairs
}

/// Linear skip-gram contexts for word pretraining: every ordered pair
/// of distinct tokens at distance at most `window`.
pub fn linear_word_pairs(s: &ParsedSentence, window: usize) -> Vec<(String, String)> {
    let n = s.tokens.len();
    let mut pairs = Vec::new();
    for i in 0..n {
        let lo = i.saturating_sub(window);
        let hi = (i + window).min(n - 1);
        for j in lo..=hi {
            if j != i {
                pairs.push((s.tokens[i].clone(), s.tokens[j].clone()));
            }
        }
    }
    pairs
}

/// Model-side arc vocabulary: counts the per-token arc of every token
/// (including `ROOT→w` arcs, which the tree-mode input needs).
pub fn build_dep_vocab(ds: &Dataset, min_count: u64) -> Vocab {
    let mut counts: HashMap<String, u64> = HashMap::new();
    for bag in &ds.bags {
        for s in &bag.sentences {
            for i in 0..s.tokens.len() {
                *counts.entry(arc_symbol(s, i).render()).or_insert(0) += 1;
            }
        }
    }
    crate::corpus::vocab_from_counts(&counts, min_count)
}

/// A symbol-indexed table of dense vectors; `<unk>` sits at id 0 and is
/// the fallback for unknown symbols.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    symbols: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> EmbeddingTable {
        assert!(dim > 0);
        let mut t = EmbeddingTable {
            dim,
            symbols: Vec::new(),
            index: HashMap::new(),
            vectors: Vec::new(),
        };
        t.insert(UNK, vec![0.0; dim]).expect("fresh table");
        t
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn insert(&mut self, symbol: &str, vector: Vec<f64>) -> Result<usize> {
        if vector.len() != self.dim {
            return Err(Error::invalid(format!(
                "vector for {symbol:?} has length {}, table dimension is {}",
                vector.len(),
                self.dim
            )));
        }
        if let Some(&id) = self.index.get(symbol) {
            self.vectors[id] = vector;
            return Ok(id);
        }
        let id = self.symbols.len();
        self.symbols.push(symbol.to_string());
        self.index.insert(symbol.to_string(), id);
        self.vectors.push(vector);
        Ok(id)
    }

    pub fn get(&self, symbol: &str) -> Option<&[f64]> {
        self.index.get(symbol).map(|&id| self.vectors[id].as_slice())
    }

    /// Vector for a symbol, falling back to the `<unk>` row.
    pub fn lookup(&self, symbol: &str) -> &[f64] {
        let id = self.index.get(symbol).copied().unwrap_or(0);
        &self.vectors[id]
    }

    pub fn vector(&self, id: usize) -> &[f64] {
        &self.vectors[id]
    }
}

/// Text format: first line `count dim`, then one `symbol v1 .. v_dim`
/// line per symbol. Values print with enough digits to round-trip
/// exactly.
pub fn embeddings_to_string(t: &EmbeddingTable) -> String {
    let mut out = String::new();
    out.push_str(&format!("{} {}\n", t.len(), t.dim()));
    for (sym, vec) in t.symbols.iter().zip(&t.vectors) {
        out.push_str(sym);
        for v in vec {
            out.push(' ');
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    out
}

pub fn save_embeddings(t: &EmbeddingTable, path: &Path) -> Result<()> {
    write_atomic(path, embeddings_to_string(t).as_bytes())
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let fmt = |line: usize, msg: String| Error::Format {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| fmt(1, "empty embedding file".into()))?;
    let mut parts = header.split_whitespace();
    let count: usize = parts
        .next()
        .and_then(|p| p.parse().ok())
        .ok_or_else(|| fmt(1, "header must be `count dim`".into()))?;
    let dim: usize = parts
        .next()
        .and_then(|p| p.parse().ok())
        .ok_or_else(|| fmt(1, "header must be `count dim`".into()))?;
    if dim == 0 {
        return Err(fmt(1, "dimension must be positive".into()));
    }

    let mut table = EmbeddingTable::new(dim);
    let mut seen = 0usize;
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let symbol = fields.next().ok_or_else(|| fmt(i + 1, "missing symbol".into()))?;
        let values: Vec<f64> = fields
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| fmt(i + 1, format!("bad value {f:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(fmt(
                i + 1,
                format!("expected {dim} values for {symbol:?}, got {}", values.len()),
            ));
        }
        table.insert(symbol, values)?;
        seen += 1;
    }
    if seen != count {
        return Err(fmt(0, format!("header promised {count} symbols, found {seen}")));
    }
    Ok(table)
}
