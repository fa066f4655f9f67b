//! Command-line interface.
//!
//! Subcommands: `gen-synth`, `pretrain-dep`, `pretrain-word`, `train`,
//! `predict`, `eval-pr`, `eval-pn`, `att-report`, `gradcheck`. Exit
//! codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
//! Output files are written via temp-and-rename, so a failing run
//! leaves no partial outputs.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::corpus::{
    load_corpus, load_corpus_discover, load_relations, save_corpus, save_relations, write_atomic,
};
use crate::embeddings::{extract_dep_contexts, linear_word_pairs, load_embeddings, save_embeddings};
use crate::error::{Error, Result};
use crate::evaluator;
use crate::gradcheck;
use crate::model::Strategy;
use crate::sgns::{train_sgns, SgnsConfig};
use crate::synth::{generate_synthetic, SynthConfig};
use crate::trainer::{self, load_checkpoint, TrainConfig};

#[derive(Parser)]
#[command(
    name = "synre",
    version,
    about = "Bag-level relation extraction with syntax-aware entity embeddings"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic train/test corpus with label noise
    GenSynth {
        /// JSON file with generator settings
        #[arg(long)]
        config: PathBuf,
        /// Output directory (train.jsonl, test.jsonl, relations.txt, gold.tsv)
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain dependency-arc embeddings from parsed corpora
    PretrainDep {
        #[arg(long)]
        corpus: PathBuf,
        /// Embedding dimension
        #[arg(long)]
        dim: usize,
        /// Output embedding text file
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: PretrainOpts,
    },
    /// Pretrain word embeddings with linear window contexts
    PretrainWord {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
        /// Context window size
        #[arg(long, default_value_t = 5)]
        window: usize,
        #[command(flatten)]
        opts: PretrainOpts,
    },
    /// Train a relation extractor
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Relation inventory file, one name per line
        #[arg(long)]
        relations: PathBuf,
        /// JSON training configuration; flags below override it
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for checkpoints and the training log
        #[arg(long)]
        out: PathBuf,
        /// Pretrained word embeddings (text format)
        #[arg(long)]
        word_emb: Option<PathBuf>,
        /// Pretrained dependency embeddings (text format)
        #[arg(long)]
        dep_emb: Option<PathBuf>,
    },
    /// Score a corpus with a trained model
    Predict {
        /// Checkpoint file
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Output predictions TSV
        #[arg(long)]
        out: PathBuf,
    },
    /// Precision-recall curve of predictions against gold facts
    EvalPr {
        /// Predictions TSV from `predict`
        #[arg(long)]
        pred: PathBuf,
        /// Gold TSV (e1, relation, e2)
        #[arg(long)]
        gold: PathBuf,
        /// Output CSV
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-N precision of predictions against gold facts
    EvalPn {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Comma-separated list of N values, e.g. 100,200,500
        #[arg(long)]
        n: String,
    },
    /// Per-sentence attention weights over a flagged corpus
    AttReport {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify analytic gradients against finite differences
    Gradcheck {
        /// Restrict to checks whose name starts with this prefix
        #[arg(long)]
        module: Option<String>,
    },
}

#[derive(Args)]
struct PretrainOpts {
    #[arg(long, default_value_t = 5)]
    negatives: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 5)]
    min_count: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl PretrainOpts {
    fn config(&self, dim: usize) -> SgnsConfig {
        SgnsConfig {
            dim,
            negatives: self.negatives,
            epochs: self.epochs,
            min_count: self.min_count,
            seed: self.seed,
            ..SgnsConfig::default()
        }
    }
}

/// Parse and run; returns the process exit code.
pub fn run<I>(argv: I) -> i32
where
    I: IntoIterator<Item = OsString>,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version print to stdout and succeed; everything
            // else is a usage error
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            };
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenSynth { config, out } => {
            let cfg: SynthConfig = read_json(&config)?;
            let data = generate_synthetic(&cfg)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            save_corpus(&data.train, &out.join("train.jsonl"))?;
            save_corpus(&data.test, &out.join("test.jsonl"))?;
            save_relations(&data.train.relation_names, &out.join("relations.txt"))?;
            write_atomic(
                &out.join("gold.tsv"),
                evaluator::gold_tsv(&data.test).as_bytes(),
            )?;
            eprintln!(
                "wrote {} train bags, {} test bags to {}",
                data.train.bags.len(),
                data.test.bags.len(),
                out.display()
            );
            Ok(())
        }
        Cmd::PretrainDep {
            corpus,
            dim,
            out,
            opts,
        } => {
            let ds = load_corpus_discover(&corpus)?;
            let mut pairs = Vec::new();
            for bag in &ds.bags {
                for s in &bag.sentences {
                    for (t, c) in extract_dep_contexts(s) {
                        pairs.push((t.render(), c.render()));
                    }
                }
            }
            let table = train_sgns(&pairs, &opts.config(dim))?;
            save_embeddings(&table, &out)?;
            eprintln!("wrote {} arc embeddings to {}", table.len(), out.display());
            Ok(())
        }
        Cmd::PretrainWord {
            corpus,
            dim,
            out,
            window,
            opts,
        } => {
            let ds = load_corpus_discover(&corpus)?;
            let mut pairs = Vec::new();
            for bag in &ds.bags {
                for s in &bag.sentences {
                    pairs.extend(linear_word_pairs(s, window));
                }
            }
            let table = train_sgns(&pairs, &opts.config(dim))?;
            save_embeddings(&table, &out)?;
            eprintln!("wrote {} word embeddings to {}", table.len(), out.display());
            Ok(())
        }
        Cmd::Train {
            corpus,
            relations,
            config,
            strategy,
            seed,
            out,
            word_emb,
            dep_emb,
        } => {
            let names = load_relations(&relations)?;
            let dataset = load_corpus(&corpus, &names)?;
            let mut cfg: TrainConfig = match config {
                Some(p) => read_json(&p)?,
                None => trainer::default_config(),
            };
            if let Some(s) = strategy {
                cfg.strategy = Strategy::from_str(&s)?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let word_table = word_emb.map(|p| load_embeddings(&p)).transpose()?;
            let dep_table = dep_emb.map(|p| load_embeddings(&p)).transpose()?;
            let outcome = trainer::train(
                &dataset,
                &cfg,
                word_table.as_ref(),
                dep_table.as_ref(),
                Some(&out),
            )?;
            for e in &outcome.log {
                eprintln!(
                    "epoch {} mean_loss {:.6} ({:.1}s)",
                    e.epoch, e.mean_loss, e.seconds
                );
            }
            eprintln!(
                "best epoch {} -> {}",
                outcome.best_epoch,
                out.join("model.ckpt").display()
            );
            Ok(())
        }
        Cmd::Predict { model, corpus, out } => {
            let (model, _) = load_checkpoint(&model)?;
            let dataset = load_corpus(&corpus, &model.relations)?;
            let facts = evaluator::predict_bags(&dataset, &model)?;
            write_atomic(
                &out,
                evaluator::predictions_tsv(&facts, &model.relations).as_bytes(),
            )?;
            eprintln!("wrote {} scored facts to {}", facts.len(), out.display());
            Ok(())
        }
        Cmd::EvalPr { pred, gold, out } => {
            let (scored, gold_facts) = load_eval_inputs(&pred, &gold)?;
            let points = evaluator::pr_curve(&scored, &gold_facts)?;
            write_atomic(&out, evaluator::pr_curve_csv(&points).as_bytes())?;
            eprintln!("wrote {} PR points to {}", points.len(), out.display());
            Ok(())
        }
        Cmd::EvalPn { pred, gold, n } => {
            let ns: Vec<usize> = n
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|e| Error::invalid(format!("bad N value {p:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            let (scored, gold_facts) = load_eval_inputs(&pred, &gold)?;
            let mut rows = Vec::with_capacity(ns.len());
            for n in ns {
                rows.push((n, evaluator::p_at_n(&scored, &gold_facts, n)?));
            }
            print!("{}", evaluator::p_at_n_csv(&rows));
            Ok(())
        }
        Cmd::AttReport { model, corpus, out } => {
            let (model, _) = load_checkpoint(&model)?;
            let dataset = load_corpus(&corpus, &model.relations)?;
            let report = evaluator::attention_report(&dataset, &model)?;
            write_atomic(&out, evaluator::attention_report_csv(&report).as_bytes())?;
            eprintln!("wrote attention report to {}", out.display());
            Ok(())
        }
        Cmd::Gradcheck { module } => {
            let results = gradcheck::run_all(module.as_deref())?;
            let mut worst = 0.0f64;
            for r in &results {
                println!("{:<28} {:.3e}", r.name, r.max_rel_err);
                worst = worst.max(r.max_rel_err);
            }
            if worst < gradcheck::TOLERANCE {
                println!(
                    "gradcheck: OK (max {:.3e} < {:.0e})",
                    worst,
                    gradcheck::TOLERANCE
                );
                Ok(())
            } else {
                Err(Error::NonFinite(format!(
                    "gradient check failed: max relative error {worst:.3e} >= {:.0e}",
                    gradcheck::TOLERANCE
                )))
            }
        }
    }
}

/// Shared loader for eval-pr/eval-pn: the relation inventory is the
/// sorted set of names appearing in either file, so standalone
/// evaluation stays deterministic.
fn load_eval_inputs(
    pred: &Path,
    gold: &Path,
) -> Result<(
    Vec<evaluator::ScoredFact>,
    std::collections::HashSet<evaluator::Fact>,
)> {
    let pred_text = fs::read_to_string(pred).map_err(|e| Error::io(pred, e))?;
    let gold_text = fs::read_to_string(gold).map_err(|e| Error::io(gold, e))?;
    let relations = evaluator::relations_in_tsvs(&pred_text, &gold_text);
    let scored =
        evaluator::parse_predictions_tsv(&pred_text, &relations, &pred.display().to_string())?;
    let gold_facts =
        evaluator::parse_gold_tsv(&gold_text, &relations, &gold.display().to_string())?;
    Ok((scored, gold_facts))
}
