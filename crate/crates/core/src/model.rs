//! Model assembly: parameters per strategy, per-token input vectors,
//! self-attention pooling, bag representations, the three scoring
//! heads and the training loss.
//!
//! Three strategies share the same bag pipeline. `baseline` scores a
//! bag from its attention-pooled sentence embedding alone. `cat` and
//! `trans` add per-entity tree-GRU embeddings pooled over the bag:
//! `cat` concatenates all three pooled vectors through one affine
//! head, `trans` scores the entity-embedding difference and blends it
//! element-wise with the sentence score through a learned sigmoid
//! gate.

use serde::{Deserialize, Serialize};

use crate::corpus::{relative_position_bucket, Bag, ParsedSentence, Vocab};
use crate::embeddings::{arc_symbol, EmbeddingTable};
use crate::error::{Error, Result};
use crate::params::{dropout_mask, init_matrix, init_vector, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Baseline,
    Cat,
    Trans,
}

impl Strategy {
    pub fn uses_tree(self) -> bool {
        !matches!(self, Strategy::Baseline)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Cat => "cat",
            Strategy::Trans => "trans",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Strategy> {
        match s {
            "baseline" => Ok(Strategy::Baseline),
            "cat" => Ok(Strategy::Cat),
            "trans" => Ok(Strategy::Trans),
            other => Err(Error::invalid(format!(
                "unknown strategy {other:?} (expected baseline, cat or trans)"
            ))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Every width the model needs, derived from the training config.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_word: usize,
    pub d_pos: usize,
    pub d_dep: usize,
    pub window: usize,
    pub filters: usize,
    pub hidden: usize,
    pub position_clip: usize,
    pub n_relations: usize,
}

impl Dims {
    pub fn pcnn_input(&self) -> usize {
        self.d_word + 2 * self.d_pos
    }

    pub fn tree_input(&self) -> usize {
        self.pcnn_input() + self.d_dep
    }

    /// Pooled sentence embedding width: three segments per filter.
    pub fn sentence_dim(&self) -> usize {
        3 * self.filters
    }

    pub fn cat_input(&self) -> usize {
        self.sentence_dim() + 2 * self.hidden
    }

    pub fn n_position_buckets(&self) -> usize {
        2 * self.position_clip + 1
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.d_word,
            self.d_pos,
            self.window,
            self.filters,
            self.position_clip,
        ];
        if all.contains(&0) || self.n_relations < 2 {
            return Err(Error::Config(format!("degenerate model dimensions: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GruIds {
    pub wz: ParamId,
    pub uz: ParamId,
    pub bz: ParamId,
    pub wr: ParamId,
    pub ur: ParamId,
    pub br: ParamId,
    pub wh: ParamId,
    pub uh: ParamId,
    pub bh: ParamId,
    pub att_w: ParamId,
    pub att_v: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Ids {
    pub word_emb: ParamId,
    pub pos_emb: ParamId,
    pub conv_w: ParamId,
    pub att_se: (ParamId, ParamId),
    pub dep_emb: Option<ParamId>,
    pub gru: Option<GruIds>,
    pub att_e1: Option<(ParamId, ParamId)>,
    pub att_e2: Option<(ParamId, ParamId)>,
    pub head_s: Option<(ParamId, ParamId)>,
    pub head_cat: Option<(ParamId, ParamId)>,
    pub head_diff: Option<(ParamId, ParamId)>,
    pub alpha: Option<ParamId>,
}

/// Parameter inventory for a strategy, in insertion order. Shared by
/// initialization and checkpoint validation. Attention score maps are
/// square in their input width.
pub fn param_specs(
    dims: &Dims,
    strategy: Strategy,
    word_vocab_len: usize,
    dep_vocab_len: usize,
) -> Vec<(String, Vec<usize>)> {
    let sd = dims.sentence_dim();
    let h = dims.hidden;
    let nr = dims.n_relations;
    let mut specs: Vec<(String, Vec<usize>)> = vec![
        ("word_emb".into(), vec![word_vocab_len, dims.d_word]),
        ("pos_emb".into(), vec![dims.n_position_buckets(), dims.d_pos]),
        ("conv_w".into(), vec![dims.filters, dims.window * dims.pcnn_input()]),
        ("att_se_w".into(), vec![sd, sd]),
        ("att_se_v".into(), vec![sd]),
    ];
    if strategy.uses_tree() {
        specs.push(("dep_emb".into(), vec![dep_vocab_len, dims.d_dep]));
        let ti = dims.tree_input();
        for gate in ["z", "r", "h"] {
            specs.push((format!("gru_w{gate}"), vec![h, ti]));
            specs.push((format!("gru_u{gate}"), vec![h, h]));
            specs.push((format!("gru_b{gate}"), vec![h]));
        }
        specs.push(("att_ch_w".into(), vec![h, h]));
        specs.push(("att_ch_v".into(), vec![h]));
        specs.push(("att_e1_w".into(), vec![h, h]));
        specs.push(("att_e1_v".into(), vec![h]));
        specs.push(("att_e2_w".into(), vec![h, h]));
        specs.push(("att_e2_v".into(), vec![h]));
    }
    match strategy {
        Strategy::Baseline => {
            specs.push(("head_s_w".into(), vec![nr, sd]));
            specs.push(("head_s_b".into(), vec![nr]));
        }
        Strategy::Cat => {
            specs.push(("head_cat_w".into(), vec![nr, dims.cat_input()]));
            specs.push(("head_cat_b".into(), vec![nr]));
        }
        Strategy::Trans => {
            specs.push(("head_s_w".into(), vec![nr, sd]));
            specs.push(("head_s_b".into(), vec![nr]));
            specs.push(("head_diff_w".into(), vec![nr, h]));
            specs.push(("head_diff_b".into(), vec![nr]));
            specs.push(("alpha_logits".into(), vec![nr]));
        }
    }
    specs
}

pub struct Model {
    pub store: ParamStore,
    pub dims: Dims,
    pub strategy: Strategy,
    pub word_vocab: Vocab,
    pub dep_vocab: Vocab,
    pub relations: Vec<String>,
    pub(crate) ids: Ids,
}

impl Model {
    /// Fresh model with parameters uniform on the init range (the
    /// interpolation logits start at zero, i.e. an even blend).
    pub fn new(
        dims: Dims,
        strategy: Strategy,
        word_vocab: Vocab,
        dep_vocab: Vocab,
        relations: Vec<String>,
        seed: u64,
    ) -> Result<Model> {
        dims.validate()?;
        if relations.len() != dims.n_relations {
            return Err(Error::Config(format!(
                "{} relation names for n_relations = {}",
                relations.len(),
                dims.n_relations
            )));
        }
        let mut rng = Rng::for_stream(seed, 0x1217);
        let mut store = ParamStore::new();
        for (name, shape) in param_specs(&dims, strategy, word_vocab.len(), dep_vocab.len()) {
            let value = if name == "alpha_logits" {
                Tensor::zeros_vector(shape[0])
            } else if shape.len() == 2 {
                init_matrix(shape[0], shape[1], &mut rng)
            } else {
                init_vector(shape[0], &mut rng)
            };
            store.insert(&name, value)?;
        }
        Model::assemble(store, dims, strategy, word_vocab, dep_vocab, relations)
    }

    /// Wire up id lookups for an existing store (post-init or loaded
    /// from a checkpoint). Verifies the store matches the strategy.
    pub fn assemble(
        store: ParamStore,
        dims: Dims,
        strategy: Strategy,
        word_vocab: Vocab,
        dep_vocab: Vocab,
        relations: Vec<String>,
    ) -> Result<Model> {
        let specs = param_specs(&dims, strategy, word_vocab.len(), dep_vocab.len());
        for (name, shape) in &specs {
            let id = store.id(name).ok_or_else(|| {
                Error::invalid(format!("missing parameter {name:?} for strategy {strategy}"))
            })?;
            if store.value(id).dims() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "assemble",
                    msg: format!(
                        "parameter {name:?} has dims {:?}, expected {:?}",
                        store.value(id).dims(),
                        shape
                    ),
                });
            }
        }
        let get = |n: &str| store.id(n).expect("checked above");
        let tree = strategy.uses_tree();
        let ids = Ids {
            word_emb: get("word_emb"),
            pos_emb: get("pos_emb"),
            conv_w: get("conv_w"),
            att_se: (get("att_se_w"), get("att_se_v")),
            dep_emb: tree.then(|| get("dep_emb")),
            gru: tree.then(|| GruIds {
                wz: get("gru_wz"),
                uz: get("gru_uz"),
                bz: get("gru_bz"),
                wr: get("gru_wr"),
                ur: get("gru_ur"),
                br: get("gru_br"),
                wh: get("gru_wh"),
                uh: get("gru_uh"),
                bh: get("gru_bh"),
                att_w: get("att_ch_w"),
                att_v: get("att_ch_v"),
            }),
            att_e1: tree.then(|| (get("att_e1_w"), get("att_e1_v"))),
            att_e2: tree.then(|| (get("att_e2_w"), get("att_e2_v"))),
            head_s: matches!(strategy, Strategy::Baseline | Strategy::Trans)
                .then(|| (get("head_s_w"), get("head_s_b"))),
            head_cat: matches!(strategy, Strategy::Cat)
                .then(|| (get("head_cat_w"), get("head_cat_b"))),
            head_diff: matches!(strategy, Strategy::Trans)
                .then(|| (get("head_diff_w"), get("head_diff_b"))),
            alpha: matches!(strategy, Strategy::Trans).then(|| get("alpha_logits")),
        };
        Ok(Model {
            store,
            dims,
            strategy,
            word_vocab,
            dep_vocab,
            relations,
            ids,
        })
    }

    pub fn gru_ids(&self) -> Option<GruIds> {
        self.ids.gru
    }

    pub fn na_id(&self) -> usize {
        self.relations
            .iter()
            .position(|r| r == crate::corpus::NA_RELATION)
            .expect("inventory contains NA")
    }

    /// Copy pretrained rows into the word table for every vocabulary
    /// word present in `table`; missing words keep their random init.
    pub fn load_pretrained_words(&mut self, table: &EmbeddingTable) -> Result<()> {
        copy_pretrained(
            &mut self.store,
            self.ids.word_emb,
            &self.word_vocab,
            table,
            self.dims.d_word,
            "word",
        )
    }

    pub fn load_pretrained_deps(&mut self, table: &EmbeddingTable) -> Result<()> {
        let id = self.ids.dep_emb.ok_or_else(|| {
            Error::invalid("baseline strategy has no dependency embeddings to pretrain")
        })?;
        copy_pretrained(
            &mut self.store,
            id,
            &self.dep_vocab,
            table,
            self.dims.d_dep,
            "dependency",
        )
    }
}

fn copy_pretrained(
    store: &mut ParamStore,
    param: ParamId,
    vocab: &Vocab,
    table: &EmbeddingTable,
    dim: usize,
    kind: &str,
) -> Result<()> {
    if table.dim() != dim {
        return Err(Error::invalid(format!(
            "pretrained {kind} embeddings have dimension {}, the model expects {dim}",
            table.dim()
        )));
    }
    let value = store.value_mut(param);
    let cols = value.cols();
    for (row, word) in vocab.words().iter().enumerate() {
        if let Some(vec) = table.get(word) {
            value.data_mut()[row * cols..(row + 1) * cols].copy_from_slice(vec);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputMode {
    Pcnn,
    Tree,
}

/// A forward graph under construction for one bag or sentence, with
/// per-parameter leaf caching so each parameter enters the tape once.
pub struct Graph<'m> {
    pub tape: Tape,
    model: &'m Model,
    param_nodes: Vec<Option<NodeId>>,
    ones: std::collections::BTreeMap<usize, NodeId>,
    zeros: std::collections::BTreeMap<usize, NodeId>,
}

impl<'m> Graph<'m> {
    pub fn new(model: &'m Model) -> Graph<'m> {
        Graph {
            tape: Tape::new(),
            model,
            param_nodes: vec![None; model.store.len()],
            ones: Default::default(),
            zeros: Default::default(),
        }
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id] {
            return n;
        }
        let n = self.tape.param(&self.model.store, id);
        self.param_nodes[id] = Some(n);
        n
    }

    pub fn lookup(&mut self, id: ParamId, row: usize) -> Result<NodeId> {
        self.tape.lookup(&self.model.store, id, row)
    }

    pub fn ones(&mut self, n: usize) -> NodeId {
        if let Some(&id) = self.ones.get(&n) {
            return id;
        }
        let id = self.tape.constant(Tensor::vector(vec![1.0; n]));
        self.ones.insert(n, id);
        id
    }

    pub fn zeros(&mut self, n: usize) -> NodeId {
        if let Some(&id) = self.zeros.get(&n) {
            return id;
        }
        let id = self.tape.constant(Tensor::zeros_vector(n));
        self.zeros.insert(n, id);
        id
    }

    /// Per-token input vector: word embedding plus the two clipped
    /// relative-position embeddings; tree mode appends the embedding of
    /// the token's dependency arc (`ROOT→w` at the root).
    pub fn input_vector(&mut self, s: &ParsedSentence, i: usize, mode: InputMode) -> Result<NodeId> {
        let dims = self.model.dims;
        let word = self.model.word_vocab.id(&s.tokens[i]);
        let w = self.lookup(self.model.ids.word_emb, word)?;
        let b1 = relative_position_bucket(i, s.e1_index, dims.position_clip);
        let b2 = relative_position_bucket(i, s.e2_index, dims.position_clip);
        let p1 = self.lookup(self.model.ids.pos_emb, b1)?;
        let p2 = self.lookup(self.model.ids.pos_emb, b2)?;
        match mode {
            InputMode::Pcnn => self.tape.concat(&[w, p1, p2]),
            InputMode::Tree => {
                let dep_table = self
                    .model
                    .ids
                    .dep_emb
                    .ok_or_else(|| Error::invalid("tree-mode input needs dependency embeddings"))?;
                let sym = arc_symbol(s, i).render();
                let d = self.lookup(dep_table, self.model.dep_vocab.id(&sym))?;
                self.tape.concat(&[w, p1, p2, d])
            }
        }
    }
}

/// Self-attention pooling: scores `v · tanh(W e)` per element, softmax
/// weights, weighted sum. Returns the pooled vector and the weights.
pub fn attention_pool(
    g: &mut Graph,
    w: ParamId,
    v: ParamId,
    items: &[NodeId],
) -> Result<(NodeId, NodeId)> {
    if items.is_empty() {
        return Err(Error::invalid("attention pool over an empty sequence"));
    }
    let wn = g.param(w);
    let vn = g.param(v);
    let mut scores = Vec::with_capacity(items.len());
    for &item in items {
        let hidden = g.tape.matvec(wn, item)?;
        let act = g.tape.tanh(hidden);
        scores.push(g.tape.dot(vn, act)?);
    }
    let score_vec = g.tape.concat(&scores)?;
    let weights = g.tape.softmax(score_vec)?;
    let pooled = g.tape.weighted_sum(weights, items)?;
    Ok((pooled, weights))
}

/// Pooled bag-level representations and the sentence-attention weights.
pub struct BagReps {
    pub emb_s: NodeId,
    pub emb_e1: Option<NodeId>,
    pub emb_e2: Option<NodeId>,
    pub att_se_weights: NodeId,
}

/// Encode every sentence (and, for tree strategies, both entity
/// subtrees) and pool each stream with its own attention parameters.
pub fn bag_representations(g: &mut Graph, bag: &Bag) -> Result<BagReps> {
    let model = g.model();
    let mut sent_embs = Vec::with_capacity(bag.sentences.len());
    for s in &bag.sentences {
        sent_embs.push(crate::pcnn::sentence_embedding(g, s)?);
    }
    let (w_se, v_se) = model.ids.att_se;
    let (emb_s, att_se_weights) = attention_pool(g, w_se, v_se, &sent_embs)?;

    let (mut emb_e1, mut emb_e2) = (None, None);
    if model.strategy.uses_tree() {
        let mut e1s = Vec::with_capacity(bag.sentences.len());
        let mut e2s = Vec::with_capacity(bag.sentences.len());
        for s in &bag.sentences {
            e1s.push(crate::tree_gru::entity_context_embedding(g, s, s.e1_index)?);
            e2s.push(crate::tree_gru::entity_context_embedding(g, s, s.e2_index)?);
        }
        let (w1, v1) = model.ids.att_e1.expect("tree strategy");
        let (w2, v2) = model.ids.att_e2.expect("tree strategy");
        emb_e1 = Some(attention_pool(g, w1, v1, &e1s)?.0);
        emb_e2 = Some(attention_pool(g, w2, v2, &e2s)?.0);
    }
    Ok(BagReps {
        emb_s,
        emb_e1,
        emb_e2,
        att_se_weights,
    })
}

/// Baseline score: affine head over the pooled sentence embedding.
pub fn score_baseline(g: &mut Graph, emb_s: NodeId, mask: Option<NodeId>) -> Result<NodeId> {
    let (w, b) = g
        .model()
        .ids
        .head_s
        .ok_or_else(|| Error::invalid("sentence scoring head is absent under this strategy"))?;
    let wn = g.param(w);
    let bn = g.param(b);
    let input = match mask {
        Some(m) => g.tape.mul(emb_s, m)?,
        None => emb_s,
    };
    g.tape.affine(wn, input, bn)
}

/// Concatenation score: one affine map over `[emb_S; emb_e1; emb_e2]`.
pub fn score_cat(
    g: &mut Graph,
    emb_s: NodeId,
    emb_e1: NodeId,
    emb_e2: NodeId,
    mask: Option<NodeId>,
) -> Result<NodeId> {
    let (w, b) = g
        .model()
        .ids
        .head_cat
        .ok_or_else(|| Error::invalid("cat head is absent under this strategy"))?;
    let wn = g.param(w);
    let bn = g.param(b);
    let cat = g.tape.concat(&[emb_s, emb_e1, emb_e2])?;
    let input = match mask {
        Some(m) => g.tape.mul(cat, m)?,
        None => cat,
    };
    g.tape.affine(wn, input, bn)
}

/// Translation score: the entity-difference head blended element-wise
/// with the baseline score through `α = σ(alpha_logits)`.
pub fn score_trans(
    g: &mut Graph,
    emb_s: NodeId,
    emb_e1: NodeId,
    emb_e2: NodeId,
    masks: Option<(NodeId, NodeId)>,
) -> Result<NodeId> {
    let model = g.model();
    let (wd, bd) = model
        .ids
        .head_diff
        .ok_or_else(|| Error::invalid("trans head is absent under this strategy"))?;
    let alpha_id = model.ids.alpha.expect("trans strategy");

    let (mask_s, mask_d) = match masks {
        Some((a, b)) => (Some(a), Some(b)),
        None => (None, None),
    };
    let o_s = score_baseline(g, emb_s, mask_s)?;

    let diff = g.tape.sub(emb_e2, emb_e1)?;
    let diff_in = match mask_d {
        Some(m) => g.tape.mul(diff, m)?,
        None => diff,
    };
    let wdn = g.param(wd);
    let bdn = g.param(bd);
    let o_diff = g.tape.affine(wdn, diff_in, bdn)?;

    let logits = g.param(alpha_id);
    let alpha = g.tape.sigmoid(logits);
    let ones = g.ones(model.dims.n_relations);
    let complement = g.tape.sub(ones, alpha)?;
    let gated_s = g.tape.mul(alpha, o_s)?;
    let gated_d = g.tape.mul(complement, o_diff)?;
    g.tape.add(gated_s, gated_d)
}

/// Softmax over relation scores.
pub fn relation_probs(g: &mut Graph, scores: NodeId) -> Result<NodeId> {
    g.tape.softmax(scores)
}

/// Inverted-dropout masks for the affine-head inputs of one bag.
/// `baseline`: one mask over the pooled sentence embedding; `cat`: one
/// mask over the full concatenation; `trans`: masks over the pooled
/// sentence embedding and the entity difference.
pub struct BagMasks {
    pub parts: Vec<Tensor>,
}

pub fn sample_bag_masks(
    strategy: Strategy,
    dims: &Dims,
    rate: f64,
    rng: &mut Rng,
) -> Result<BagMasks> {
    let parts = match strategy {
        Strategy::Baseline => vec![dropout_mask(dims.sentence_dim(), rate, rng)?],
        Strategy::Cat => vec![dropout_mask(dims.cat_input(), rate, rng)?],
        Strategy::Trans => vec![
            dropout_mask(dims.sentence_dim(), rate, rng)?,
            dropout_mask(dims.hidden, rate, rng)?,
        ],
    };
    Ok(BagMasks { parts })
}

/// A finished forward pass over one bag. The tape owns every
/// intermediate value; `probs` and `att_weights` index into it.
pub struct BagOutcome {
    pub tape: Tape,
    pub probs: NodeId,
    pub att_weights: NodeId,
    pub loss: Option<NodeId>,
}

/// Build the full forward graph for one bag under the model's
/// strategy. `gold` adds the cross-entropy node; `masks` enables
/// dropout on the head inputs (training only).
pub fn run_bag(
    model: &Model,
    bag: &Bag,
    gold: Option<usize>,
    masks: Option<&BagMasks>,
) -> Result<BagOutcome> {
    let mut g = Graph::new(model);
    let reps = bag_representations(&mut g, bag)?;
    let mask_node = |g: &mut Graph, i: usize| -> Option<NodeId> {
        masks.map(|m| g.tape.constant(m.parts[i].clone()))
    };
    let scores = match model.strategy {
        Strategy::Baseline => {
            let m = mask_node(&mut g, 0);
            score_baseline(&mut g, reps.emb_s, m)?
        }
        Strategy::Cat => {
            let m = mask_node(&mut g, 0);
            score_cat(
                &mut g,
                reps.emb_s,
                reps.emb_e1.expect("tree strategy"),
                reps.emb_e2.expect("tree strategy"),
                m,
            )?
        }
        Strategy::Trans => {
            let ms = mask_node(&mut g, 0);
            let md = mask_node(&mut g, 1);
            score_trans(
                &mut g,
                reps.emb_s,
                reps.emb_e1.expect("tree strategy"),
                reps.emb_e2.expect("tree strategy"),
                ms.zip(md),
            )?
        }
    };
    let probs = relation_probs(&mut g, scores)?;
    let loss = match gold {
        Some(r) => Some(g.tape.neg_log_pick(probs, r)?),
        None => None,
    };
    Ok(BagOutcome {
        tape: g.tape,
        probs,
        att_weights: reps.att_se_weights,
        loss,
    })
}

/// Mean cross-entropy over a batch of bags (no gradients). With a
/// positive dropout rate, masks are drawn per bag in batch order.
pub fn bag_loss(
    model: &Model,
    bags: &[&Bag],
    dropout_rate: f64,
    rng: Option<&mut Rng>,
) -> Result<f64> {
    if bags.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut owned_rng = rng;
    let mut total = 0.0;
    for (i, bag) in bags.iter().enumerate() {
        let masks = if dropout_rate > 0.0 {
            let r = owned_rng
                .as_deref_mut()
                .ok_or_else(|| Error::invalid("dropout requires a seeded generator"))?;
            Some(sample_bag_masks(model.strategy, &model.dims, dropout_rate, r)?)
        } else {
            None
        };
        let out = run_bag(model, bag, Some(bag.relation_id), masks.as_ref())?;
        let v = out.tape.value(out.loss.expect("gold provided")).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss of bag {i} ({}, {})",
                bag.e1, bag.e2
            )));
        }
        total += v;
    }
    Ok(total / bags.len() as f64)
}

/// Mean cross-entropy over a batch with gradients accumulated into the
/// store, scaled by `1/batch`, bag by bag in batch order.
pub fn bag_loss_backward(
    model: &mut Model,
    bags: &[&Bag],
    dropout_rate: f64,
    rng: &mut Rng,
) -> Result<f64> {
    if bags.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let scale = 1.0 / bags.len() as f64;
    let mut total = 0.0;
    for (i, bag) in bags.iter().enumerate() {
        let masks = if dropout_rate > 0.0 {
            Some(sample_bag_masks(model.strategy, &model.dims, dropout_rate, rng)?)
        } else {
            None
        };
        let out = run_bag(model, bag, Some(bag.relation_id), masks.as_ref())?;
        let loss = out.loss.expect("gold provided");
        let v = out.tape.value(loss).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss of bag {i} ({}, {})",
                bag.e1, bag.e2
            )));
        }
        total += v;
        let mut tape = out.tape;
        tape.backward_scaled(loss, scale)?;
        tape.apply_grads(&mut model.store)?;
    }
    Ok(total * scale)
}

#[cfg(test)]
pub(crate) mod test_fixtures {
    use super::*;
    use crate::corpus::NA_RELATION;

    pub fn toy_vocab(words: &[&str]) -> Vocab {
        let mut all = vec![crate::corpus::UNK.to_string()];
        all.extend(words.iter().map(|w| w.to_string()));
        Vocab::from_words(all)
    }

    pub fn toy_dims(n_relations: usize) -> Dims {
        Dims {
            d_word: 6,
            d_pos: 2,
            d_dep: 4,
            window: 3,
            filters: 4,
            hidden: 5,
            position_clip: 5,
            n_relations,
        }
    }

    pub fn toy_model(strategy: Strategy, seed: u64) -> Model {
        let words = ["alice", "met", "bob", "in", "paris", "firm", "by"];
        let word_vocab = toy_vocab(&words);
        let mut arcs = vec![];
        for h in words.iter().chain(std::iter::once(&"ROOT")) {
            for c in words.iter() {
                if h != c {
                    arcs.push(format!("{h}→{c}"));
                }
            }
        }
        let arc_refs: Vec<&str> = arcs.iter().map(String::as_str).collect();
        let dep_vocab = toy_vocab(&arc_refs[..20]);
        let relations = vec![
            NA_RELATION.to_string(),
            "works_for".to_string(),
            "born_in".to_string(),
        ];
        Model::new(toy_dims(3), strategy, word_vocab, dep_vocab, relations, seed).unwrap()
    }

    pub fn toy_sentence() -> ParsedSentence {
        ParsedSentence {
            tokens: ["alice", "met", "bob", "in", "paris", "firm"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            heads: vec![1, -1, 1, 1, 3, 4],
            e1_index: 0,
            e2_index: 4,
            noisy: None,
        }
    }

    pub fn toy_bag(relation_id: usize) -> Bag {
        Bag {
            e1: "alice".into(),
            e2: "paris".into(),
            relation_id,
            sentences: vec![toy_sentence(), {
                let mut s = toy_sentence();
                s.tokens[1] = "by".into();
                s
            }],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_fixtures::*;
    use super::*;
    use crate::corpus::NA_RELATION;

    #[test]
    fn input_vector_lengths() {
        let model = toy_model(Strategy::Trans, 1);
        let s = toy_sentence();
        let mut g = Graph::new(&model);
        let pcnn = g.input_vector(&s, 1, InputMode::Pcnn).unwrap();
        let tree = g.input_vector(&s, 1, InputMode::Tree).unwrap();
        assert_eq!(g.tape.value(pcnn).numel(), 6 + 2 * 2);
        assert_eq!(g.tape.value(tree).numel(), 6 + 2 * 2 + 4);
    }

    #[test]
    fn default_scale_input_vector_lengths() {
        // d_word 50, d_pos 5, d_dep 50 give 60 and 110
        let d = Dims {
            d_word: 50,
            d_pos: 5,
            d_dep: 50,
            window: 3,
            filters: 240,
            hidden: 100,
            position_clip: 30,
            n_relations: 53,
        };
        assert_eq!(d.pcnn_input(), 60);
        assert_eq!(d.tree_input(), 110);
        assert_eq!(d.sentence_dim(), 720);
    }

    #[test]
    fn unknown_word_uses_unk_row() {
        let model = toy_model(Strategy::Baseline, 3);
        let mut s = toy_sentence();
        s.tokens[2] = "zzz-unseen".into();
        let mut g = Graph::new(&model);
        let x = g.input_vector(&s, 2, InputMode::Pcnn).unwrap();
        let unk_row = model.store.value(model.ids.word_emb).row(0).to_vec();
        assert_eq!(&g.tape.value(x).data()[..6], unk_row.as_slice());
    }

    #[test]
    fn entity_position_uses_center_bucket() {
        let model = toy_model(Strategy::Baseline, 3);
        let s = toy_sentence();
        let mut g = Graph::new(&model);
        let x = g.input_vector(&s, 0, InputMode::Pcnn).unwrap();
        let center = model
            .store
            .value(model.ids.pos_emb)
            .row(model.dims.position_clip)
            .to_vec();
        assert_eq!(&g.tape.value(x).data()[6..8], center.as_slice());
    }

    #[test]
    fn attention_pool_singleton_is_identity() {
        let model = toy_model(Strategy::Baseline, 5);
        let mut g = Graph::new(&model);
        let item = g
            .tape
            .constant(crate::params::init_vector(12, &mut Rng::new(3)));
        let (w, v) = model.ids.att_se;
        let (pooled, weights) = attention_pool(&mut g, w, v, &[item]).unwrap();
        assert_eq!(g.tape.value(weights).data(), &[1.0]);
        assert!(g.tape.value(pooled).bits_eq(g.tape.value(item)));
    }

    #[test]
    fn attention_weights_match_direct_softmax() {
        let model = toy_model(Strategy::Baseline, 6);
        let mut rng = Rng::new(8);
        let mut g = Graph::new(&model);
        let items: Vec<NodeId> = (0..5)
            .map(|_| g.tape.constant(crate::params::init_vector(12, &mut rng)))
            .collect();
        let (w, v) = model.ids.att_se;
        let (_, weights) = attention_pool(&mut g, w, v, &items).unwrap();

        // brute-force exp/normalize over the same scores
        let wt = model.store.value(w);
        let vt = model.store.value(v);
        let mut scores = Vec::new();
        for &it in &items {
            let e = g.tape.value(it).data();
            let mut s = 0.0;
            for r in 0..wt.rows() {
                let mut acc = 0.0;
                for c in 0..wt.cols() {
                    acc += wt.data()[r * wt.cols() + c] * e[c];
                }
                s += vt.data()[r] * acc.tanh();
            }
            scores.push(s);
        }
        let exps: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let z: f64 = exps.iter().sum();
        for (got, want) in g
            .tape
            .value(weights)
            .data()
            .iter()
            .zip(exps.iter().map(|e| e / z))
        {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_scores_shift_invariant() {
        // adding a constant to all scores leaves softmax weights alone
        let scores = [0.3, -1.2, 0.9];
        let shifted: Vec<f64> = scores.iter().map(|s| s + 11.5).collect();
        let a = crate::tape::softmax_slice(&scores);
        let b = crate::tape::softmax_slice(&shifted);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_sentence_bag_pools_bitwise() {
        let model = toy_model(Strategy::Trans, 7);
        let bag = Bag {
            sentences: vec![toy_sentence()],
            ..toy_bag(1)
        };
        let mut g = Graph::new(&model);
        let reps = bag_representations(&mut g, &bag).unwrap();
        let mut g2 = Graph::new(&model);
        let sent2 = crate::pcnn::sentence_embedding(&mut g2, &bag.sentences[0]).unwrap();
        assert!(g.tape.value(reps.emb_s).bits_eq(g2.tape.value(sent2)));
        let mut g3 = Graph::new(&model);
        let e1 = crate::tree_gru::entity_context_embedding(&mut g3, &bag.sentences[0], 0).unwrap();
        assert!(g
            .tape
            .value(reps.emb_e1.unwrap())
            .bits_eq(g3.tape.value(e1)));
    }

    #[test]
    fn cat_zero_parameters_give_zero_scores() {
        let mut model = toy_model(Strategy::Cat, 9);
        let (w, b) = model.ids.head_cat.unwrap();
        for id in [w, b] {
            model
                .store
                .value_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|x| *x = 0.0);
        }
        let bag = toy_bag(1);
        let out = run_bag(&model, &bag, None, None).unwrap();
        // softmax of all-zero scores is uniform
        for p in out.tape.value(out.probs).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cat_entity_blocks_can_be_silenced() {
        // zeroing the entity columns of the cat head reduces the score
        // to a function of the sentence embedding alone
        let mut model = toy_model(Strategy::Cat, 10);
        let (w, _) = model.ids.head_cat.unwrap();
        let sd = model.dims.sentence_dim();
        {
            let wt = model.store.value_mut(w);
            let cols = wt.cols();
            let rows = wt.rows();
            let data = wt.data_mut();
            for r in 0..rows {
                for c in sd..cols {
                    data[r * cols + c] = 0.0;
                }
            }
        }
        let bag_a = toy_bag(1);
        // same sentences, different entity subtrees via different heads
        let mut bag_b = bag_a.clone();
        for s in &mut bag_b.sentences {
            s.heads = vec![1, -1, 1, 1, 1, 1];
        }
        let out_a = run_bag(&model, &bag_a, None, None).unwrap();
        let out_b = run_bag(&model, &bag_b, None, None).unwrap();
        assert!(out_a
            .tape
            .value(out_a.probs)
            .bits_eq(out_b.tape.value(out_b.probs)));
    }

    #[test]
    fn trans_identical_entities_reduce_to_bias() {
        let model = toy_model(Strategy::Trans, 11);
        let mut g = Graph::new(&model);
        let e = g
            .tape
            .constant(crate::params::init_vector(5, &mut Rng::new(2)));
        let s = g
            .tape
            .constant(crate::params::init_vector(12, &mut Rng::new(3)));
        let scores = score_trans(&mut g, s, e, e, None).unwrap();

        let (_, bd) = model.ids.head_diff.unwrap();
        let bias = model.store.value(bd).data();
        let alpha: Vec<f64> = model
            .store
            .value(model.ids.alpha.unwrap())
            .data()
            .iter()
            .map(|a| crate::tape::sigmoid(*a))
            .collect();
        let mut g2 = Graph::new(&model);
        let s2 = g2.tape.constant(g.tape.value(s).clone());
        let o_s2 = score_baseline(&mut g2, s2, None).unwrap();
        let os = g2.tape.value(o_s2).data();
        for (k, got) in g.tape.value(scores).data().iter().enumerate() {
            let want = alpha[k] * os[k] + (1.0 - alpha[k]) * bias[k];
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn trans_swapping_entities_changes_scores() {
        let model = toy_model(Strategy::Trans, 13);
        let mut g = Graph::new(&model);
        let e1 = g
            .tape
            .constant(crate::params::init_vector(5, &mut Rng::new(4)));
        let e2 = g
            .tape
            .constant(crate::params::init_vector(5, &mut Rng::new(5)));
        let s = g
            .tape
            .constant(crate::params::init_vector(12, &mut Rng::new(6)));
        let fwd = score_trans(&mut g, s, e1, e2, None).unwrap();
        let rev = score_trans(&mut g, s, e2, e1, None).unwrap();
        let a = g.tape.value(fwd).data();
        let b = g.tape.value(rev).data();
        assert!(a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn uniform_scores_give_uniform_probs_over_53() {
        let mut t = Tape::new();
        let scores = t.constant(Tensor::zeros_vector(53));
        let probs = t.softmax(scores).unwrap();
        for p in t.value(probs).data() {
            assert_eq!(*p, 1.0 / 53.0);
        }
    }

    #[test]
    fn argmax_invariant_under_softmax() {
        let mut rng = Rng::new(21);
        for _ in 0..20 {
            let scores: Vec<f64> = (0..7).map(|_| rng.uniform(-3.0, 3.0)).collect();
            let probs = crate::tape::softmax_slice(&scores);
            let am = |xs: &[f64]| {
                xs.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            };
            assert_eq!(am(&scores), am(&probs));
        }
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let mut model = toy_model(Strategy::Baseline, 15);
        // an extreme margin drives the gold probability to exactly 1
        let (w, b) = model.ids.head_s.unwrap();
        model
            .store
            .value_mut(w)
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = 0.0);
        model
            .store
            .value_mut(b)
            .data_mut()
            .copy_from_slice(&[0.0, 2000.0, 0.0]);
        let bag = toy_bag(1);
        let out = run_bag(&model, &bag, Some(1), None).unwrap();
        assert_eq!(out.tape.value(out.loss.unwrap()).data()[0], 0.0);
    }

    #[test]
    fn uniform_prediction_loss_is_ln_n() {
        let mut model = toy_model(Strategy::Baseline, 16);
        let (w, b) = model.ids.head_s.unwrap();
        for id in [w, b] {
            model
                .store
                .value_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|x| *x = 0.0);
        }
        let bag = toy_bag(2);
        let loss = bag_loss(&model, &[&bag], 0.0, None).unwrap();
        assert!((loss - (3.0f64).ln()).abs() < 1e-12);
        assert!(loss >= 0.0);
    }

    #[test]
    fn pooled_outputs_lie_in_convex_hull() {
        let model = toy_model(Strategy::Baseline, 17);
        let mut rng = Rng::new(31);
        let mut g = Graph::new(&model);
        let items: Vec<NodeId> = (0..4)
            .map(|_| g.tape.constant(crate::params::init_vector(12, &mut rng)))
            .collect();
        let (w, v) = model.ids.att_se;
        let (pooled, _) = attention_pool(&mut g, w, v, &items).unwrap();
        let p = g.tape.value(pooled).data().to_vec();
        for k in 0..p.len() {
            let coords: Vec<f64> = items.iter().map(|it| g.tape.value(*it).data()[k]).collect();
            let lo = coords.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = coords.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(p[k] >= lo - 1e-12 && p[k] <= hi + 1e-12);
        }
    }

    #[test]
    fn bag_forward_is_deterministic() {
        let model = toy_model(Strategy::Trans, 23);
        let bag = toy_bag(1);
        let a = run_bag(&model, &bag, None, None).unwrap();
        let b = run_bag(&model, &bag, None, None).unwrap();
        assert!(a.tape.value(a.probs).bits_eq(b.tape.value(b.probs)));
    }

    #[test]
    fn checkpoint_strategy_mismatch_is_detected() {
        let model = toy_model(Strategy::Baseline, 25);
        let reference = toy_model(Strategy::Baseline, 25);
        let err = Model::assemble(
            model.store,
            toy_dims(3),
            Strategy::Trans,
            reference.word_vocab,
            reference.dep_vocab,
            vec![NA_RELATION.into(), "works_for".into(), "born_in".into()],
        )
        .err()
        .expect("baseline parameters must not satisfy the trans strategy");
        assert!(err.to_string().contains("missing parameter"), "{err}");
    }

    #[test]
    fn pretrained_dimension_mismatch_rejected() {
        let mut model = toy_model(Strategy::Baseline, 27);
        let table = EmbeddingTable::new(50);
        let err = model.load_pretrained_words(&table).unwrap_err().to_string();
        assert!(err.contains("50") && err.contains('6'), "{err}");
    }

    #[test]
    fn sgd_touches_only_embedding_rows_seen_in_the_bag() {
        let mut model = toy_model(Strategy::Trans, 29);
        let bag = toy_bag(1);
        let word_id = model.ids.word_emb;
        let before = model.store.value(word_id).clone();

        let mut rng = Rng::new(1);
        bag_loss_backward(&mut model, &[&bag], 0.0, &mut rng).unwrap();
        model.store.sgd_step(0.1).unwrap();

        let mut seen_rows: std::collections::HashSet<usize> = Default::default();
        for s in &bag.sentences {
            for t in &s.tokens {
                seen_rows.insert(model.word_vocab.id(t));
            }
        }
        let after = model.store.value(word_id);
        let cols = after.cols();
        for row in 0..after.rows() {
            let changed = (0..cols).any(|c| after.row(row)[c] != before.row(row)[c]);
            assert_eq!(
                changed,
                seen_rows.contains(&row),
                "row {row} ({})",
                model.word_vocab.word(row)
            );
        }
    }

    #[test]
    fn loss_decreases_over_fifty_steps_for_all_strategies() {
        // separable two-relation corpus (NA plus one relation), per-bag
        // SGD for 50 steps
        let data = crate::synth::generate_synthetic(&crate::synth::SynthConfig {
            n_relations: 2,
            n_entity_pairs: 10,
            bag_size_range: [1, 2],
            noise_rate: 0.0,
            seed: 9,
            ..Default::default()
        })
        .unwrap()
        .train;
        for strategy in [Strategy::Baseline, Strategy::Cat, Strategy::Trans] {
            let word_vocab = crate::corpus::build_vocab(&data, 1);
            let dep_vocab = crate::embeddings::build_dep_vocab(&data, 1);
            let dims = Dims {
                d_word: 8,
                d_pos: 2,
                d_dep: 6,
                window: 3,
                filters: 6,
                hidden: 6,
                position_clip: 10,
                n_relations: 2,
            };
            let mut model = Model::new(
                dims,
                strategy,
                word_vocab,
                dep_vocab,
                data.relation_names.clone(),
                11,
            )
            .unwrap();
            let bags: Vec<&Bag> = data.bags.iter().collect();
            let mut rng = Rng::new(3);
            let initial = bag_loss(&model, &bags, 0.0, None).unwrap();
            for step in 0..50 {
                let bag = bags[step % bags.len()];
                bag_loss_backward(&mut model, &[bag], 0.0, &mut rng).unwrap();
                model.store.sgd_step(0.2).unwrap();
            }
            let trained = bag_loss(&model, &bags, 0.0, None).unwrap();
            assert!(
                trained < initial,
                "{strategy}: loss {initial} -> {trained}"
            );
        }
    }

    #[test]
    fn sgd_two_steps_differ_from_combined_for_nonlinear_model() {
        // two successive updates with re-evaluated gradients equal one
        // combined update only when gradients do not depend on the
        // parameters; true for a linear map, false for the model
        let bag = toy_bag(1);

        // linear case: f(w) = w . x has constant gradient
        let x = [0.5f64, -1.0, 2.0];
        let grad = x;
        let mut w_two = [1.0f64, 1.0, 1.0];
        for _ in 0..2 {
            for (wi, gi) in w_two.iter_mut().zip(&grad) {
                *wi -= 0.1 * gi;
            }
        }
        let mut w_one = [1.0, 1.0, 1.0];
        for (wi, gi) in w_one.iter_mut().zip(&grad) {
            *wi -= 0.1 * (2.0 * gi);
        }
        for (a, b) in w_two.iter().zip(&w_one) {
            assert!((a - b).abs() < 1e-12);
        }

        // nonlinear model: the second gradient re-evaluated after the
        // first step differs from the gradient at the initial point, so
        // two steps land elsewhere than one step with the doubled
        // initial gradient
        let mut rng = Rng::new(5);
        let mut m_two = toy_model(Strategy::Baseline, 33);
        bag_loss_backward(&mut m_two, &[&bag], 0.0, &mut rng).unwrap();
        let g1: Vec<f64> = m_two.store.grad(m_two.ids.conv_w).to_vec();
        m_two.store.sgd_step(0.5).unwrap();
        bag_loss_backward(&mut m_two, &[&bag], 0.0, &mut rng).unwrap();
        m_two.store.sgd_step(0.5).unwrap();

        let mut m_one = toy_model(Strategy::Baseline, 33);
        let combined: Vec<f64> = g1.iter().map(|a| 2.0 * a).collect();
        m_one.store.add_grad(m_one.ids.conv_w, &combined).unwrap();
        m_one.store.sgd_step(0.5).unwrap();

        let a = m_two.store.value(m_two.ids.conv_w).data();
        let b = m_one.store.value(m_one.ids.conv_w).data();
        assert!(a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-12));
    }
}
