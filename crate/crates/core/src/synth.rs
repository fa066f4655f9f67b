//! Deterministic synthetic distant-supervision corpora with
//! controllable wrong-label noise.
//!
//! Every relation owns a generative template with two kinds of signal:
//!
//! * subtree signal: trigger words attached as dependency children of
//!   the two entities. Non-NA relations come in twin pairs that share
//!   the same trigger-word multiset and differ only in which entity the
//!   triggers attach to, and trigger tokens land at random linear
//!   positions — so attachment is readable from the tree but not from
//!   the word sequence;
//! * sequence signal: a relation-specific mid-sentence trigger placed
//!   between the entities, present with probability 0.9.
//!
//! Both signals statistically identify the relation, the subtree signal
//! strictly more reliably. "NA" bags carry no triggers at all. With
//! noise rate ρ, each sentence of a bag is independently replaced by a
//! sentence from a different relation's template (keeping the bag's
//! entities) and flagged `noisy`; bags of size two or more always keep
//! at least one clean sentence. The test split uses fresh entity pairs
//! and is noise-free.

use serde::{Deserialize, Serialize};

use crate::corpus::{Bag, Dataset, ParsedSentence, NA_RELATION};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const MID_TRIGGER_PROB: f64 = 0.9;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Relation inventory size, including "NA".
    pub n_relations: usize,
    /// Training bags (one entity pair each).
    pub n_entity_pairs: usize,
    /// Test bags; defaults to a third of the training bags.
    pub n_test_pairs: Option<usize>,
    /// Inclusive range of sentences per bag.
    pub bag_size_range: [usize; 2],
    /// Number of distinct filler words.
    pub vocab_size: usize,
    /// Inclusive range of sentence lengths in tokens.
    pub sentence_length_range: [usize; 2],
    /// Probability that a training sentence carries a wrong label.
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_relations: 5,
            n_entity_pairs: 600,
            n_test_pairs: None,
            bag_size_range: [2, 5],
            vocab_size: 120,
            sentence_length_range: [9, 14],
            noise_rate: 0.0,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn test_pairs(&self) -> usize {
        self.n_test_pairs.unwrap_or(self.n_entity_pairs / 3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_relations < 2 {
            return Err(Error::Config(
                "n_relations must be at least 2 (NA plus one relation)".into(),
            ));
        }
        if self.n_entity_pairs == 0 {
            return Err(Error::Config("n_entity_pairs must be positive".into()));
        }
        let [blo, bhi] = self.bag_size_range;
        if blo == 0 || blo > bhi {
            return Err(Error::Config(format!(
                "bag_size_range [{blo}, {bhi}] is empty or zero"
            )));
        }
        let [slo, shi] = self.sentence_length_range;
        // a sentence needs both entities, a root, four trigger children
        // and two mid-trigger slots
        if slo < 9 || slo > shi {
            return Err(Error::Config(format!(
                "sentence_length_range [{slo}, {shi}] infeasible (minimum length 9)"
            )));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!(
                "noise_rate must be in [0, 1), got {}",
                self.noise_rate
            )));
        }
        if self.vocab_size < 10 {
            return Err(Error::Config("vocab_size must be at least 10".into()));
        }
        Ok(())
    }
}

pub struct SynthOutput {
    pub train: Dataset,
    pub test: Dataset,
}

struct Template {
    /// Trigger pool and child count for each entity's subtree.
    e1_pool: Vec<String>,
    e1_count: usize,
    e2_pool: Vec<String>,
    e2_count: usize,
    /// Mid-sentence trigger pool; empty for NA.
    mid_pool: Vec<String>,
}

fn trigger_pool(prefix: &str, pair: usize, size: usize) -> Vec<String> {
    (0..size).map(|i| format!("{prefix}{pair}_{i}")).collect()
}

/// Relation 0 is NA. Non-NA relations form twin pairs: both twins use
/// the same two trigger pools with swapped entity attachment and
/// swapped child counts (2 vs 1), so their trigger-word multisets are
/// identical and only the tree tells them apart. Mid triggers stay
/// relation-specific.
fn template(relation: usize) -> Template {
    if relation == 0 {
        return Template {
            e1_pool: Vec::new(),
            e1_count: 1,
            e2_pool: Vec::new(),
            e2_count: 1,
            mid_pool: Vec::new(),
        };
    }
    let t = relation - 1;
    let pair = t / 2;
    let side = t % 2;
    let xa = trigger_pool("xa", pair, 2);
    let xb = trigger_pool("xb", pair, 2);
    let (e1_pool, e2_pool) = if side == 0 { (xa, xb) } else { (xb, xa) };
    Template {
        e1_pool,
        e1_count: 2,
        e2_pool,
        e2_count: 2,
        mid_pool: (0..2).map(|i| format!("mid{relation}_{i}")).collect(),
    }
}

fn pick<'a>(pool: &'a [String], rng: &mut Rng) -> &'a str {
    &pool[rng.below(pool.len())]
}

/// One sentence from `relation`'s template mentioning (e1, e2).
fn gen_sentence(
    relation: usize,
    e1: &str,
    e2: &str,
    cfg: &SynthConfig,
    rng: &mut Rng,
    noisy: bool,
) -> ParsedSentence {
    let t = template(relation);
    let filler = |rng: &mut Rng| format!("w{:03}", rng.below(cfg.vocab_size));

    // up to two mid-sentence triggers, each present independently
    let mut mid_words = Vec::new();
    if !t.mid_pool.is_empty() {
        for _ in 0..2 {
            if rng.bernoulli(MID_TRIGGER_PROB) {
                mid_words.push(pick(&t.mid_pool, rng).to_string());
            }
        }
    }
    let e1_kids: Vec<String> = (0..t.e1_count)
        .map(|_| {
            if t.e1_pool.is_empty() {
                filler(rng)
            } else {
                pick(&t.e1_pool, rng).to_string()
            }
        })
        .collect();
    let e2_kids: Vec<String> = (0..t.e2_count)
        .map(|_| {
            if t.e2_pool.is_empty() {
                filler(rng)
            } else {
                pick(&t.e2_pool, rng).to_string()
            }
        })
        .collect();

    let min_len = 3 + e1_kids.len() + e2_kids.len() + mid_words.len().max(2);
    let n = rng
        .range_inclusive(cfg.sentence_length_range[0], cfg.sentence_length_range[1])
        .max(min_len);

    // entity slots with room for the mid triggers between them
    let e1_pos = rng.below(n - 3);
    let e2_pos = e1_pos + 3 + rng.below(n - e1_pos - 3);

    let mut tokens: Vec<Option<String>> = vec![None; n];
    let mut heads = vec![0i32; n];
    tokens[e1_pos] = Some(e1.to_string());
    tokens[e2_pos] = Some(e2.to_string());

    fn free(tokens: &[Option<String>], lo: usize, hi: usize) -> Vec<usize> {
        (lo..hi).filter(|&i| tokens[i].is_none()).collect()
    }

    // mid triggers sit strictly between the entities
    let mut mid_positions = Vec::new();
    for w in mid_words {
        let slots = free(&tokens, e1_pos + 1, e2_pos);
        let p = slots[rng.below(slots.len())];
        tokens[p] = Some(w);
        mid_positions.push(p);
    }

    let slots = free(&tokens, 0, n);
    let root_pos = slots[rng.below(slots.len())];
    tokens[root_pos] = Some(filler(rng));
    heads[root_pos] = -1;
    heads[e1_pos] = root_pos as i32;
    heads[e2_pos] = root_pos as i32;
    for &p in &mid_positions {
        heads[p] = root_pos as i32;
    }

    // trigger children land anywhere in the sentence; attachment is a
    // tree property, not a linear one. A second child occasionally
    // nests under the first, giving depth-three subtrees.
    let place_kids = |kids: &[String],
                          entity_pos: usize,
                          tokens: &mut Vec<Option<String>>,
                          heads: &mut Vec<i32>,
                          rng: &mut Rng| {
        let mut first: Option<usize> = None;
        for (ki, kid) in kids.iter().enumerate() {
            let slots = free(tokens, 0, n);
            let p = slots[rng.below(slots.len())];
            tokens[p] = Some(kid.clone());
            let nest = ki == 1 && first.is_some() && rng.bernoulli(0.5);
            heads[p] = if nest {
                first.unwrap() as i32
            } else {
                entity_pos as i32
            };
            if ki == 0 {
                first = Some(p);
            }
        }
    };
    place_kids(&e1_kids, e1_pos, &mut tokens, &mut heads, rng);
    place_kids(&e2_kids, e2_pos, &mut tokens, &mut heads, rng);

    for i in 0..n {
        if tokens[i].is_none() {
            tokens[i] = Some(filler(rng));
            heads[i] = root_pos as i32;
        }
    }

    ParsedSentence {
        tokens: tokens.into_iter().map(Option::unwrap).collect(),
        heads,
        e1_index: e1_pos,
        e2_index: e2_pos,
        noisy: Some(noisy),
    }
}

fn gen_bag(
    pair_idx: usize,
    relation: usize,
    prefix: &str,
    cfg: &SynthConfig,
    noise: f64,
    rng: &mut Rng,
) -> Bag {
    let e1 = format!("{prefix}{pair_idx:05}_a");
    let e2 = format!("{prefix}{pair_idx:05}_b");
    let size = rng.range_inclusive(cfg.bag_size_range[0], cfg.bag_size_range[1]);
    let mut sentences = Vec::with_capacity(size);
    for _ in 0..size {
        let flip = noise > 0.0 && rng.bernoulli(noise);
        let gen_rel = if flip {
            // uniform over the other relations
            let mut r = rng.below(cfg.n_relations - 1);
            if r >= relation {
                r += 1;
            }
            r
        } else {
            relation
        };
        sentences.push(gen_sentence(gen_rel, &e1, &e2, cfg, rng, flip));
    }
    // a bag of two or more sentences always keeps one clean sentence
    if size >= 2 && sentences.iter().all(|s| s.noisy == Some(true)) {
        sentences[0] = gen_sentence(relation, &e1, &e2, cfg, rng, false);
    }
    Bag {
        e1,
        e2,
        relation_id: relation,
        sentences,
    }
}

fn relation_names(n: usize) -> Vec<String> {
    let mut names = vec![NA_RELATION.to_string()];
    names.extend((1..n).map(|i| format!("rel_{i}")));
    names
}

/// Deterministic corpus per `(config, seed)`: a uniform class
/// distribution over relations, a noisy train split and a disjoint
/// noise-free test split.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let names = relation_names(cfg.n_relations);

    let mut rng = Rng::for_stream(cfg.seed, 0x5eed);
    let train_bags: Vec<Bag> = (0..cfg.n_entity_pairs)
        .map(|i| gen_bag(i, i % cfg.n_relations, "tr", cfg, cfg.noise_rate, &mut rng))
        .collect();

    let mut test_rng = Rng::for_stream(cfg.seed, 0x7e57);
    let test_bags: Vec<Bag> = (0..cfg.test_pairs())
        .map(|i| gen_bag(i, i % cfg.n_relations, "te", cfg, 0.0, &mut test_rng))
        .collect();

    Ok(SynthOutput {
        train: Dataset::new(train_bags, names.clone())?,
        test: Dataset::new(test_bags, names)?,
    })
}
