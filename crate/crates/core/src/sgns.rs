//! Skip-gram with negative sampling, trained from an explicit
//! (target, context) pair stream.
//!
//! The same trainer serves word embeddings (linear window contexts)
//! and dependency-arc embeddings (grandparent/grandchild arc
//! contexts). Negatives are drawn from the context unigram
//! distribution raised to 0.75 via a fixed-size sampling table; the
//! learning rate decays linearly over all updates.

use std::collections::HashMap;

use crate::corpus::{vocab_from_counts, Vocab};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::sigmoid;

#[derive(Clone, Debug)]
pub struct SgnsConfig {
    pub dim: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub min_count: u64,
    pub unigram_table_size: usize,
    pub seed: u64,
}

impl Default for SgnsConfig {
    fn default() -> Self {
        SgnsConfig {
            dim: 50,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
            min_count: 5,
            unigram_table_size: 100_000,
            seed: 1,
        }
    }
}

/// Negative-sampling logistic loss of one target row against labeled
/// context rows: `-sum[ label ? ln σ(t·c) : ln σ(-t·c) ]`.
pub fn logistic_pair_loss(target: &[f64], contexts: &[(&[f64], bool)]) -> f64 {
    let mut loss = 0.0;
    for (ctx, label) in contexts {
        let mut dot = 0.0;
        for (t, c) in target.iter().zip(*ctx) {
            dot += t * c;
        }
        let z = if *label { dot } else { -dot };
        loss -= sigmoid(z).ln();
    }
    loss
}

/// Analytic gradients of [`logistic_pair_loss`] w.r.t. the target row
/// and every context row, in context order.
pub fn logistic_pair_grads(
    target: &[f64],
    contexts: &[(&[f64], bool)],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut d_target = vec![0.0; target.len()];
    let mut d_contexts = Vec::with_capacity(contexts.len());
    for (ctx, label) in contexts {
        let mut dot = 0.0;
        for (t, c) in target.iter().zip(*ctx) {
            dot += t * c;
        }
        // d/dz of -ln σ(label ? z : -z) is σ(z) - label
        let coeff = sigmoid(dot) - f64::from(*label);
        let mut d_ctx = vec![0.0; target.len()];
        for j in 0..target.len() {
            d_target[j] += coeff * ctx[j];
            d_ctx[j] = coeff * target[j];
        }
        d_contexts.push(d_ctx);
    }
    (d_target, d_contexts)
}

struct Trainer {
    vocab: Vocab,
    target_vecs: Vec<Vec<f64>>,
    context_vecs: Vec<Vec<f64>>,
    unigram: Vec<usize>,
    cfg: SgnsConfig,
}

impl Trainer {
    fn new(pairs: &[(usize, usize)], vocab: Vocab, cfg: &SgnsConfig, rng: &mut Rng) -> Trainer {
        // word2vec-style init: random targets, zero contexts
        let target_vecs = (0..vocab.len())
            .map(|_| {
                (0..cfg.dim)
                    .map(|_| (rng.next_f64() - 0.5) / cfg.dim as f64)
                    .collect()
            })
            .collect();
        let context_vecs = vec![vec![0.0; cfg.dim]; vocab.len()];

        let mut context_counts = vec![0u64; vocab.len()];
        for &(_, c) in pairs {
            context_counts[c] += 1;
        }
        let mut weights: Vec<f64> = context_counts.iter().map(|&c| (c as f64).powf(0.75)).collect();
        let total: f64 = weights.iter().sum();
        let mut unigram = Vec::with_capacity(cfg.unigram_table_size);
        if total > 0.0 {
            let mut acc = 0.0;
            let mut sym = 0usize;
            for slot in 0..cfg.unigram_table_size {
                let frac = (slot as f64 + 0.5) / cfg.unigram_table_size as f64;
                while sym + 1 < weights.len() && frac > (acc + weights[sym]) / total {
                    acc += weights[sym];
                    sym += 1;
                }
                unigram.push(sym);
            }
        }
        weights.clear();
        Trainer {
            vocab,
            target_vecs,
            context_vecs,
            unigram,
            cfg: cfg.clone(),
        }
    }

    fn draw_negatives(&self, context: usize, rng: &mut Rng) -> Vec<usize> {
        let mut negs = Vec::with_capacity(self.cfg.negatives);
        for _ in 0..self.cfg.negatives {
            let cand = self.unigram[rng.below(self.unigram.len())];
            // a negative equal to the true context is skipped, as in
            // the original tool; occasionally fewer than k negatives
            if cand != context {
                negs.push(cand);
            }
        }
        negs
    }

    fn step(&mut self, target: usize, context: usize, negs: &[usize], lr: f64) {
        let dim = self.cfg.dim;
        let mut d_target = vec![0.0; dim];
        for (idx, label) in std::iter::once((context, true)).chain(negs.iter().map(|&n| (n, false))) {
            let mut dot = 0.0;
            for j in 0..dim {
                dot += self.target_vecs[target][j] * self.context_vecs[idx][j];
            }
            let coeff = (sigmoid(dot) - f64::from(label)) * lr;
            for j in 0..dim {
                d_target[j] += coeff * self.context_vecs[idx][j];
                self.context_vecs[idx][j] -= coeff * self.target_vecs[target][j];
            }
        }
        for j in 0..dim {
            self.target_vecs[target][j] -= d_target[j];
        }
    }

    #[cfg(test)]
    fn loss_on(&self, samples: &[(usize, usize, Vec<usize>)]) -> f64 {
        let mut total = 0.0;
        for (t, c, negs) in samples {
            let contexts: Vec<(&[f64], bool)> = std::iter::once((self.context_vecs[*c].as_slice(), true))
                .chain(negs.iter().map(|&n| (self.context_vecs[n].as_slice(), false)))
                .collect();
            total += logistic_pair_loss(&self.target_vecs[*t], &contexts);
        }
        total
    }

    fn into_table(self) -> EmbeddingTable {
        let mut table = EmbeddingTable::new(self.cfg.dim);
        for (id, sym) in self.vocab.words().iter().enumerate() {
            table.insert(sym, self.target_vecs[id].clone()).expect("dims match");
        }
        table
    }
}

fn index_pairs(pairs: &[(String, String)], vocab: &Vocab) -> Vec<(usize, usize)> {
    pairs
        .iter()
        .map(|(t, c)| (vocab.id(t), vocab.id(c)))
        .collect()
}

fn build_vocab_from_pairs(pairs: &[(String, String)], min_count: u64) -> Vocab {
    let mut counts: HashMap<String, u64> = HashMap::new();
    for (t, c) in pairs {
        *counts.entry(t.clone()).or_insert(0) += 1;
        *counts.entry(c.clone()).or_insert(0) += 1;
    }
    vocab_from_counts(&counts, min_count)
}

/// Train target-side embeddings on a (target, context) pair stream.
/// Deterministic for a fixed `(pairs, config)`; per-epoch training
/// order is a seeded shuffle and the learning rate decays linearly.
pub fn train_sgns(pairs: &[(String, String)], cfg: &SgnsConfig) -> Result<EmbeddingTable> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty pair stream for skip-gram training"));
    }
    if cfg.dim == 0 {
        return Err(Error::Config("embedding dimension must be positive".into()));
    }
    let vocab = build_vocab_from_pairs(pairs, cfg.min_count);
    if vocab.len() <= 1 {
        return Err(Error::invalid(
            "empty vocabulary after min-count filtering for skip-gram training",
        ));
    }
    let indexed = index_pairs(pairs, &vocab);

    let mut rng = Rng::for_stream(cfg.seed, 0x59_45);
    let mut trainer = Trainer::new(&indexed, vocab, cfg, &mut rng);

    let total_updates = (cfg.epochs * indexed.len()).max(1);
    let mut update = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..indexed.len()).collect();
        let mut epoch_rng = Rng::for_stream(cfg.seed, 0x1000 + epoch as u64);
        epoch_rng.shuffle(&mut order);
        for &pi in &order {
            let (t, c) = indexed[pi];
            let negs = trainer.draw_negatives(c, &mut epoch_rng);
            let lr = (cfg.learning_rate * (1.0 - update as f64 / total_updates as f64))
                .max(cfg.learning_rate * 1e-4);
            trainer.step(t, c, &negs, lr);
            update += 1;
        }
    }
    Ok(trainer.into_table())
}
