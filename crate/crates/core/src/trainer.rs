//! Mini-batch SGD training loop with per-epoch checkpoints, a CSV
//! training log, and a self-describing binary checkpoint format.
//!
//! Determinism contract: `(dataset bytes, config, seed)` fix every
//! checkpoint byte. Epoch shuffles depend only on `(seed, epoch)`,
//! dropout masks only on `(seed, epoch, position in epoch)`, and
//! gradients accumulate in bag order. No gradient clipping is applied;
//! a non-finite loss aborts with its epoch, batch and bag indices.

use std::fs;
use std::io::Read;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{build_vocab, write_atomic, Dataset, Vocab};
use crate::embeddings::{build_dep_vocab, EmbeddingTable};
use crate::error::{Error, Result};
use crate::model::{bag_loss_backward, param_specs, Dims, Model, Strategy};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Bags per SGD mini-batch.
    pub batch_size: usize,
    pub d_word: usize,
    pub d_dep: usize,
    pub d_pos: usize,
    /// Convolution window size.
    pub window: usize,
    /// Convolution filter count.
    pub filters: usize,
    /// Tree-GRU hidden size.
    pub hidden: usize,
    pub strategy: Strategy,
    pub dropout_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub position_clip: usize,
    pub word_min_count: u64,
    pub dep_min_count: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        default_config()
    }
}

/// The working configuration 0.2/150/50/50/5/3/240 for learning rate,
/// batch size, word/dependency/position dimensions, window and filter
/// count; hidden size 100, dropout 0.5, position clip 30 and 15 epochs
/// round it out.
pub fn default_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.2,
        batch_size: 150,
        d_word: 50,
        d_dep: 50,
        d_pos: 5,
        window: 3,
        filters: 240,
        hidden: 100,
        strategy: Strategy::Trans,
        dropout_rate: 0.5,
        epochs: 15,
        seed: 1,
        position_clip: 30,
        word_min_count: 1,
        dep_min_count: 1,
    }
}

impl TrainConfig {
    pub fn dims(&self, n_relations: usize) -> Dims {
        Dims {
            d_word: self.d_word,
            d_pos: self.d_pos,
            d_dep: self.d_dep,
            window: self.window,
            filters: self.filters,
            hidden: self.hidden,
            position_clip: self.position_clip,
            n_relations,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    /// 1-based epoch with the lowest mean training loss; 0 when no
    /// epochs ran.
    pub best_epoch: usize,
}

/// Training log CSV: `epoch,mean_loss,seconds`. The seconds column is
/// wall clock and is the one intentionally non-reproducible output
/// field.
pub fn train_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,mean_loss,seconds\n");
    for e in log {
        out.push_str(&format!("{},{},{:.3}\n", e.epoch, e.mean_loss, e.seconds));
    }
    out
}

/// Train a fresh model on `dataset`. Pretrained tables, when given,
/// seed the word/dependency rows before the first update and are
/// fine-tuned afterwards. With `out_dir` set, per-epoch checkpoints,
/// the best checkpoint (`model.ckpt`) and `train_log.csv` are written
/// there.
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    word_table: Option<&EmbeddingTable>,
    dep_table: Option<&EmbeddingTable>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.bags.is_empty() {
        return Err(Error::invalid("training dataset has no bags"));
    }
    let word_vocab = build_vocab(dataset, config.word_min_count);
    let dep_vocab = if config.strategy.uses_tree() {
        build_dep_vocab(dataset, config.dep_min_count)
    } else {
        Vocab::unknown_only()
    };
    let dims = config.dims(dataset.relation_names.len());
    let mut model = Model::new(
        dims,
        config.strategy,
        word_vocab,
        dep_vocab,
        dataset.relation_names.clone(),
        config.seed,
    )?;
    // dimension mismatches surface before any training step
    if let Some(t) = word_table {
        model.load_pretrained_words(t)?;
    }
    if let Some(t) = dep_table {
        model.load_pretrained_deps(t)?;
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Vec<u8>)> = None;
    for epoch in 0..config.epochs {
        let started = Instant::now();
        // batch order depends only on (seed, epoch)
        let mut order: Vec<usize> = (0..dataset.bags.len()).collect();
        Rng::for_stream(config.seed, 0x0e90 + epoch as u64).shuffle(&mut order);
        let mut mask_rng = Rng::for_stream(config.seed, 0xd409 + epoch as u64);

        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let bags: Vec<&crate::corpus::Bag> = chunk.iter().map(|&i| &dataset.bags[i]).collect();
            let mean = bag_loss_backward(&mut model, &bags, config.dropout_rate, &mut mask_rng)
                .map_err(|e| match e {
                    Error::NonFinite(msg) => Error::NonFinite(format!(
                        "epoch {} batch {batch_idx}: {msg}",
                        epoch + 1
                    )),
                    other => other,
                })?;
            loss_sum += mean * bags.len() as f64;
            model.store.sgd_step(config.learning_rate).map_err(|e| match e {
                Error::NonFinite(msg) => {
                    Error::NonFinite(format!("epoch {} batch {batch_idx}: {msg}", epoch + 1))
                }
                other => other,
            })?;
        }
        let mean_loss = loss_sum / dataset.bags.len() as f64;
        let entry = EpochLog {
            epoch: epoch + 1,
            mean_loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(dir) = out_dir {
            save_checkpoint(&model, config, &dir.join(format!("epoch_{:03}.ckpt", epoch + 1)))?;
        }
        if best.as_ref().is_none_or(|(_, l, _)| mean_loss < *l) {
            best = Some((epoch + 1, mean_loss, checkpoint_bytes(&model, config)?));
        }
        log.push(entry);
    }

    // best checkpoint by training loss; the returned model is the final
    // epoch's (useful for continued work), model.ckpt is the best one
    let best_epoch = best.as_ref().map(|(e, _, _)| *e).unwrap_or(0);
    if let Some(dir) = out_dir {
        let bytes = match &best {
            Some((_, _, b)) => b.clone(),
            None => checkpoint_bytes(&model, config)?,
        };
        write_atomic(&dir.join("model.ckpt"), &bytes)?;
        write_atomic(&dir.join("train_log.csv"), train_log_csv(&log).as_bytes())?;
    }
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
    })
}

// Checkpoint container: magic, little-endian u64 header length, JSON
// header (config, relations, vocabularies, parameter inventory), then
// raw little-endian f64 parameter data in header order.
const CKPT_MAGIC: &[u8; 8] = b"SYNRECK1";

#[derive(Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: TrainConfig,
    pub relations: Vec<String>,
    pub word_vocab: Vec<String>,
    pub dep_vocab: Vec<String>,
    pub params: Vec<(String, Vec<usize>)>,
}

pub fn checkpoint_bytes(model: &Model, config: &TrainConfig) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config: config.clone(),
        relations: model.relations.clone(),
        word_vocab: model.word_vocab.words().to_vec(),
        dep_vocab: model.dep_vocab.words().to_vec(),
        params: model
            .store
            .ids()
            .map(|id| {
                (
                    model.store.name(id).to_string(),
                    model.store.value(id).dims().to_vec(),
                )
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header).expect("serializable header");
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for id in model.store.ids() {
        for v in model.store.value(id).data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(model: &Model, config: &TrainConfig, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(model, config)?)
}

fn parse_header(bytes: &[u8], origin: &str) -> Result<(CheckpointHeader, usize)> {
    let fmt = |msg: String| Error::Format {
        path: origin.to_string(),
        line: 0,
        msg,
    };
    if bytes.len() < 16 || &bytes[..8] != CKPT_MAGIC {
        return Err(fmt("not a checkpoint file (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + hlen {
        return Err(fmt("truncated checkpoint header".into()));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..16 + hlen]).map_err(|e| fmt(e.to_string()))?;
    Ok((header, 16 + hlen))
}

pub fn checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Ok(parse_header(&bytes, &path.display().to_string())?.0)
}

pub fn load_checkpoint_bytes(bytes: &[u8], origin: &str) -> Result<(Model, TrainConfig)> {
    load_with_strategy_bytes(bytes, origin, None)
}

fn load_with_strategy_bytes(
    bytes: &[u8],
    origin: &str,
    strategy_override: Option<Strategy>,
) -> Result<(Model, TrainConfig)> {
    let fmt = |msg: String| Error::Format {
        path: origin.to_string(),
        line: 0,
        msg,
    };
    let (header, data_start) = parse_header(bytes, origin)?;
    let config = header.config.clone();
    let strategy = strategy_override.unwrap_or(config.strategy);
    let dims = config.dims(header.relations.len());

    // the stored inventory must line up exactly with what the config
    // and strategy demand
    let expected = param_specs(
        &dims,
        strategy,
        header.word_vocab.len(),
        header.dep_vocab.len(),
    );
    let missing: Vec<&str> = expected
        .iter()
        .filter(|(name, _)| !header.params.iter().any(|(n, _)| n == name))
        .map(|(name, _)| name.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(fmt(format!(
            "missing parameters required by strategy {strategy}: {}",
            missing.join(", ")
        )));
    }
    for (name, shape) in &expected {
        if let Some((_, s)) = header.params.iter().find(|(n, _)| n == name) {
            if s != shape {
                return Err(fmt(format!(
                    "parameter {name:?} has shape {s:?}, config expects {shape:?}"
                )));
            }
        }
    }
    for (name, _) in &header.params {
        if !expected.iter().any(|(n, _)| n == name) {
            return Err(fmt(format!("unknown parameter {name:?} in checkpoint")));
        }
    }

    let total: usize = header
        .params
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    if bytes.len() != data_start + total * 8 {
        return Err(fmt(format!(
            "checkpoint data length {} does not match parameter inventory ({} values)",
            bytes.len() - data_start,
            total
        )));
    }

    let mut store = ParamStore::new();
    let mut offset = data_start;
    for (name, shape) in &header.params {
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(f64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap()));
            offset += 8;
        }
        let value = if shape.len() == 2 {
            Tensor::matrix(shape[0], shape[1], data)?
        } else {
            Tensor::vector(data)
        };
        store.insert(name, value)?;
    }

    let model = Model::assemble(
        store,
        dims,
        strategy,
        Vocab::from_words(header.word_vocab),
        Vocab::from_words(header.dep_vocab),
        header.relations,
    )?;
    Ok((model, config))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, TrainConfig)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    load_checkpoint_bytes(&bytes, &path.display().to_string())
}

/// Load a checkpoint reinterpreted under a different strategy; fails
/// when the stored parameters do not cover it (e.g. a baseline
/// checkpoint opened as trans lacks the difference head).
pub fn load_checkpoint_with_strategy(path: &Path, strategy: Strategy) -> Result<(Model, TrainConfig)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    load_with_strategy_bytes(&bytes, &path.display().to_string(), Some(strategy))
}
