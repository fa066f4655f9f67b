//! Held-out evaluation: ranked fact lists, precision-recall curves,
//! top-N precision, bag accuracy and the sentence-attention report.

use std::collections::HashSet;

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::model::{run_bag, Model};

/// One predicted fact. Ranking sorts by probability descending with
/// deterministic ties broken by `(e1, e2, relation_id)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredFact {
    pub e1: String,
    pub e2: String,
    pub relation_id: usize,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrPoint {
    pub rank: usize,
    pub probability: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Gold fact key: `(e1, relation_id, e2)`.
pub type Fact = (String, usize, String);

/// Relation probabilities for one bag with no dropout.
pub fn bag_probabilities(model: &Model, bag: &crate::corpus::Bag) -> Result<Vec<f64>> {
    let out = run_bag(model, bag, None, None)?;
    Ok(out.tape.value(out.probs).data().to_vec())
}

/// Score every test bag and emit one fact per non-NA relation.
/// Deterministic: bags in dataset order, relations in id order.
pub fn predict_bags(dataset: &Dataset, model: &Model) -> Result<Vec<ScoredFact>> {
    if dataset.relation_names != model.relations {
        return Err(Error::invalid(
            "dataset relation inventory differs from the model's",
        ));
    }
    let na = model.na_id();
    let mut facts = Vec::with_capacity(dataset.bags.len() * (model.relations.len() - 1));
    for bag in &dataset.bags {
        let probs = bag_probabilities(model, bag)?;
        for (rid, &p) in probs.iter().enumerate() {
            if rid != na {
                facts.push(ScoredFact {
                    e1: bag.e1.clone(),
                    e2: bag.e2.clone(),
                    relation_id: rid,
                    probability: p,
                });
            }
        }
    }
    Ok(facts)
}

/// Gold fact set of a labeled dataset: every non-NA bag.
pub fn gold_set(dataset: &Dataset) -> HashSet<Fact> {
    let na = dataset.na_id();
    dataset
        .bags
        .iter()
        .filter(|b| b.relation_id != na)
        .map(|b| (b.e1.clone(), b.relation_id, b.e2.clone()))
        .collect()
}

fn ranked(scored: &[ScoredFact]) -> Vec<&ScoredFact> {
    let mut order: Vec<&ScoredFact> = scored.iter().collect();
    order.sort_by(|a, b| {
        b.probability
            .total_cmp(&a.probability)
            .then_with(|| a.e1.cmp(&b.e1))
            .then_with(|| a.e2.cmp(&b.e2))
            .then_with(|| a.relation_id.cmp(&b.relation_id))
    });
    order
}

/// Precision-recall curve over the ranked predictions: one point per
/// rank with `precision = hits/k` and `recall = hits/|gold|`.
pub fn pr_curve(scored: &[ScoredFact], gold: &HashSet<Fact>) -> Result<Vec<PrPoint>> {
    if gold.is_empty() {
        return Err(Error::invalid("empty gold set"));
    }
    let mut points = Vec::with_capacity(scored.len());
    let mut hits = 0usize;
    for (k, fact) in ranked(scored).into_iter().enumerate() {
        let key = (fact.e1.clone(), fact.relation_id, fact.e2.clone());
        if gold.contains(&key) {
            hits += 1;
        }
        points.push(PrPoint {
            rank: k + 1,
            probability: fact.probability,
            precision: hits as f64 / (k + 1) as f64,
            recall: hits as f64 / gold.len() as f64,
        });
    }
    Ok(points)
}

/// Precision among the top `n` ranked predictions.
pub fn p_at_n(scored: &[ScoredFact], gold: &HashSet<Fact>, n: usize) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::invalid("empty gold set"));
    }
    if n == 0 || n > scored.len() {
        return Err(Error::invalid(format!(
            "N = {n} out of range for {} scored facts",
            scored.len()
        )));
    }
    let hits = ranked(scored)
        .into_iter()
        .take(n)
        .filter(|f| gold.contains(&(f.e1.clone(), f.relation_id, f.e2.clone())))
        .count();
    Ok(hits as f64 / n as f64)
}

/// Fraction of bags whose most probable relation equals the label.
pub fn accuracy(dataset: &Dataset, model: &Model) -> Result<f64> {
    if dataset.bags.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let mut correct = 0usize;
    for bag in &dataset.bags {
        let probs = bag_probabilities(model, bag)?;
        let arg = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        correct += usize::from(arg == bag.relation_id);
    }
    Ok(correct as f64 / dataset.bags.len() as f64)
}

#[derive(Clone, Debug)]
pub struct AttRow {
    pub bag: usize,
    pub sentence: usize,
    pub weight: f64,
    pub noisy: bool,
}

pub struct AttentionReport {
    pub rows: Vec<AttRow>,
    /// Mean weights over clean/noisy sentences, restricted to bags of
    /// size >= 2 containing at least one of each. Absent when no bag
    /// qualifies.
    pub clean_mean: Option<f64>,
    pub noisy_mean: Option<f64>,
}

/// Sentence-attention weights per bag over a diagnostics dataset whose
/// sentences all carry noisy flags.
pub fn attention_report(dataset: &Dataset, model: &Model) -> Result<AttentionReport> {
    for (i, bag) in dataset.bags.iter().enumerate() {
        if bag.sentences.iter().any(|s| s.noisy.is_none()) {
            return Err(Error::invalid(format!(
                "bag {i} has sentences without noisy flags; the attention report needs a synthetic diagnostics corpus"
            )));
        }
    }
    let mut rows = Vec::new();
    let mut clean = (0.0f64, 0usize);
    let mut noisy = (0.0f64, 0usize);
    for (bi, bag) in dataset.bags.iter().enumerate() {
        let out = run_bag(model, bag, None, None)?;
        let weights = out.tape.value(out.att_weights).data().to_vec();
        let n_noisy = bag
            .sentences
            .iter()
            .filter(|s| s.noisy == Some(true))
            .count();
        let mixed = bag.sentences.len() >= 2 && n_noisy > 0 && n_noisy < bag.sentences.len();
        for (si, (s, w)) in bag.sentences.iter().zip(&weights).enumerate() {
            let is_noisy = s.noisy == Some(true);
            rows.push(AttRow {
                bag: bi,
                sentence: si,
                weight: *w,
                noisy: is_noisy,
            });
            if mixed {
                if is_noisy {
                    noisy = (noisy.0 + w, noisy.1 + 1);
                } else {
                    clean = (clean.0 + w, clean.1 + 1);
                }
            }
        }
    }
    Ok(AttentionReport {
        rows,
        clean_mean: (clean.1 > 0).then(|| clean.0 / clean.1 as f64),
        noisy_mean: (noisy.1 > 0).then(|| noisy.0 / noisy.1 as f64),
    })
}

// ---- report formats ----

/// Predictions TSV: `e1  relation  e2  probability` (tab-separated).
pub fn predictions_tsv(scored: &[ScoredFact], relations: &[String]) -> String {
    let mut out = String::new();
    for f in scored {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            f.e1, relations[f.relation_id], f.e2, f.probability
        ));
    }
    out
}

/// Gold TSV: `e1  relation  e2`.
pub fn gold_tsv(dataset: &Dataset) -> String {
    let na = dataset.na_id();
    let mut out = String::new();
    for b in &dataset.bags {
        if b.relation_id != na {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                b.e1, dataset.relation_names[b.relation_id], b.e2
            ));
        }
    }
    out
}

pub fn pr_curve_csv(points: &[PrPoint]) -> String {
    let mut out = String::from("rank,probability,precision,recall\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.rank, p.probability, p.precision, p.recall
        ));
    }
    out
}

pub fn p_at_n_csv(results: &[(usize, f64)]) -> String {
    let mut out = String::from("N,precision\n");
    for (n, p) in results {
        out.push_str(&format!("{n},{p}\n"));
    }
    out
}

/// Attention report CSV: per-sentence rows then the two summary rows.
pub fn attention_report_csv(report: &AttentionReport) -> String {
    let mut out = String::from("bag_id,sentence_idx,att_weight,noisy\n");
    for r in &report.rows {
        out.push_str(&format!("{},{},{},{}\n", r.bag, r.sentence, r.weight, r.noisy));
    }
    if let (Some(c), Some(n)) = (report.clean_mean, report.noisy_mean) {
        out.push_str(&format!("summary,clean_mean,{c},\n"));
        out.push_str(&format!("summary,noisy_mean,{n},\n"));
    }
    out
}

/// Parse a predictions TSV against a relation inventory.
pub fn parse_predictions_tsv(text: &str, relations: &[String], origin: &str) -> Result<Vec<ScoredFact>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let fmt = |msg: String| Error::Format {
            path: origin.to_string(),
            line: i + 1,
            msg,
        };
        if fields.len() != 4 {
            return Err(fmt(format!("expected 4 tab-separated fields, got {}", fields.len())));
        }
        let relation_id = relations
            .iter()
            .position(|r| r == fields[1])
            .ok_or_else(|| fmt(format!("unknown relation {:?}", fields[1])))?;
        let probability: f64 = fields[3]
            .parse()
            .map_err(|e| fmt(format!("bad probability {:?}: {e}", fields[3])))?;
        out.push(ScoredFact {
            e1: fields[0].to_string(),
            e2: fields[2].to_string(),
            relation_id,
            probability,
        });
    }
    Ok(out)
}

/// Parse a gold TSV against a relation inventory.
pub fn parse_gold_tsv(text: &str, relations: &[String], origin: &str) -> Result<HashSet<Fact>> {
    let mut out = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let fmt = |msg: String| Error::Format {
            path: origin.to_string(),
            line: i + 1,
            msg,
        };
        if fields.len() != 3 {
            return Err(fmt(format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let relation_id = relations
            .iter()
            .position(|r| r == fields[1])
            .ok_or_else(|| fmt(format!("unknown relation {:?}", fields[1])))?;
        out.insert((fields[0].to_string(), relation_id, fields[2].to_string()));
    }
    Ok(out)
}

/// Relation names appearing in prediction/gold TSV texts, sorted, so
/// standalone evaluation gets a deterministic inventory.
pub fn relations_in_tsvs(pred: &str, gold: &str) -> Vec<String> {
    let mut names: Vec<String> = pred
        .lines()
        .chain(gold.lines())
        .filter_map(|l| l.split('\t').nth(1))
        .map(str::to_string)
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    names.sort();
    names
}
