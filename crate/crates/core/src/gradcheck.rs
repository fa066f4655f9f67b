//! Central finite differences and the gradient-check suites behind the
//! `gradcheck` command.
//!
//! Every primitive and every model composite is checked by perturbing
//! parameter coordinates one at a time and comparing the analytic
//! gradient against `(f(x+h) - f(x-h)) / 2h` at `h = 1e-6`. Relative
//! error uses an absolute floor so near-zero gradients are compared at
//! absolute scale instead of blowing up the ratio.

use crate::corpus::{Bag, ParsedSentence, Vocab};
use crate::error::{Error, Result};
use crate::model::{
    attention_pool, bag_loss, bag_loss_backward, Dims, Graph, Model, Strategy,
};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-2;

/// Central finite differences of a scalar function at `x`. A
/// non-finite evaluation is reported with its coordinate index.
pub fn finite_difference<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut point = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let orig = point[k];
        point[k] = orig + h;
        let plus = f(&point)?;
        point[k] = orig - h;
        let minus = f(&point)?;
        point[k] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "function evaluation at coordinate {k}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckResult {
    pub name: String,
    pub max_rel_err: f64,
}

fn stream_of(name: &str) -> u64 {
    name.bytes()
        .fold(0xc0ffee_u64, |acc, b| acc.wrapping_mul(31).wrapping_add(b as u64))
}

/// Deterministic probe collapsing any tensor node to a scalar via a
/// constant inner product, so gradients flow to every coordinate.
fn probe(tape: &mut Tape, out: NodeId, stream: u64) -> Result<NodeId> {
    let v = tape.value(out);
    if v.numel() == 1 && v.is_vector() {
        return Ok(out);
    }
    let dims = v.dims().to_vec();
    let mut rng = Rng::for_stream(stream, 0x9b0e);
    let data: Vec<f64> = (0..v.numel()).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let t = if dims.len() == 2 {
        Tensor::matrix(dims[0], dims[1], data)?
    } else {
        Tensor::vector(data)
    };
    let p = tape.constant(t);
    tape.dot(out, p)
}

/// Compare analytic store gradients of `run` against finite
/// differences of `eval` over the named parameters. `run` must zero
/// nothing itself: the harness zeroes gradients, calls it once, then
/// perturbs coordinates through the pure `eval`.
fn check_against_fd(
    model: &mut Model,
    params: &[&str],
    run: &mut dyn FnMut(&mut Model) -> Result<f64>,
    eval: &mut dyn FnMut(&Model) -> Result<f64>,
) -> Result<f64> {
    model.store.zero_grads();
    run(model)?;
    let ids: Vec<usize> = params
        .iter()
        .map(|n| {
            model
                .store
                .id(n)
                .ok_or_else(|| Error::invalid(format!("unknown parameter {n:?}")))
        })
        .collect::<Result<_>>()?;

    let mut worst = 0.0f64;
    for &id in &ids {
        let analytic = model.store.grad(id).to_vec();
        let count = model.store.value(id).numel();
        for k in 0..count {
            let orig = model.store.value(id).data()[k];
            model.store.value_mut(id).data_mut()[k] = orig + FD_STEP;
            let plus = eval(model)?;
            model.store.value_mut(id).data_mut()[k] = orig - FD_STEP;
            let minus = eval(model)?;
            model.store.value_mut(id).data_mut()[k] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "evaluation while perturbing {:?}[{k}]",
                    model.store.name(id)
                )));
            }
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[k], numeric));
        }
    }
    model.store.zero_grads();
    Ok(worst)
}

// ---- fixtures --------------------------------------------------------

fn check_vocab() -> (Vocab, Vocab) {
    let words: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
    let mut word_items = vec![crate::corpus::UNK.to_string()];
    word_items.extend(words.clone());
    let mut arc_items = vec![crate::corpus::UNK.to_string()];
    for h in words.iter().take(4) {
        for c in words.iter().take(4) {
            if h != c {
                arc_items.push(format!("{h}→{c}"));
            }
        }
    }
    arc_items.push(format!("ROOT→{}", words[0]));
    arc_items.push(format!("ROOT→{}", words[1]));
    (Vocab::from_words(word_items), Vocab::from_words(arc_items))
}

fn check_dims() -> Dims {
    Dims {
        d_word: 6,
        d_pos: 2,
        d_dep: 4,
        window: 3,
        filters: 4,
        hidden: 5,
        position_clip: 4,
        n_relations: 4,
    }
}

fn check_model(strategy: Strategy, seed: u64) -> Model {
    let (wv, dv) = check_vocab();
    let relations = vec![
        crate::corpus::NA_RELATION.to_string(),
        "r1".to_string(),
        "r2".to_string(),
        "r3".to_string(),
    ];
    Model::new(check_dims(), strategy, wv, dv, relations, seed).expect("valid toy model")
}

fn check_sentence(rng: &mut Rng, len: usize) -> ParsedSentence {
    let tokens: Vec<String> = (0..len).map(|_| format!("w{}", rng.below(10))).collect();
    // random single-rooted tree: token 0 is the root, every other
    // token attaches to a lower index
    let mut heads = vec![0i32; len];
    heads[0] = -1;
    for (i, h) in heads.iter_mut().enumerate().skip(1) {
        *h = rng.below(i) as i32;
    }
    let e1 = rng.below(len);
    let mut e2 = rng.below(len - 1);
    if e2 >= e1 {
        e2 += 1;
    }
    ParsedSentence {
        tokens,
        heads,
        e1_index: e1,
        e2_index: e2,
        noisy: None,
    }
}

fn check_bag(rng: &mut Rng, relation_id: usize) -> Bag {
    let s1 = check_sentence(rng, 6);
    let mut s2 = check_sentence(rng, 7);
    s2.tokens[s2.e1_index] = s1.tokens[s1.e1_index].clone();
    s2.tokens[s2.e2_index] = s1.tokens[s1.e2_index].clone();
    Bag {
        e1: s1.tokens[s1.e1_index].clone(),
        e2: s1.tokens[s1.e2_index].clone(),
        relation_id,
        sentences: vec![s1, s2],
    }
}

// ---- primitive checks -------------------------------------------------

/// Check one primitive: parameters `a` (and optionally `b`) feed a tape
/// expression ending in the probe scalar.
fn check_primitive(
    name: &str,
    seeds: u64,
    dims_a: &[usize],
    dims_b: Option<&[usize]>,
    build: impl Fn(&mut Tape, NodeId, Option<NodeId>) -> Result<NodeId>,
) -> Result<GradCheckResult> {
    let make = |dims: &[usize], rng: &mut Rng| -> Tensor {
        let n: usize = dims.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.uniform(-1.2, 1.2)).collect();
        if dims.len() == 2 {
            Tensor::matrix(dims[0], dims[1], data).expect("consistent")
        } else {
            Tensor::vector(data)
        }
    };

    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = Rng::for_stream(seed, stream_of(name));
        let mut store = ParamStore::new();
        let a = store.insert("a", make(dims_a, &mut rng))?;
        let b = match dims_b {
            Some(d) => Some(store.insert("b", make(d, &mut rng))?),
            None => None,
        };

        let forward = |store: &ParamStore| -> Result<(Tape, NodeId)> {
            let mut tape = Tape::new();
            let an = tape.param(store, a);
            let bn = b.map(|id| tape.param(store, id));
            let out = build(&mut tape, an, bn)?;
            let scalar = probe(&mut tape, out, stream_of(name) ^ seed)?;
            Ok((tape, scalar))
        };

        store.zero_grads();
        let (mut tape, scalar) = forward(&store)?;
        tape.backward(scalar)?;
        tape.apply_grads(&mut store)?;
        let grads: Vec<Vec<f64>> = store.ids().map(|id| store.grad(id).to_vec()).collect();

        let ids: Vec<usize> = store.ids().collect();
        for &id in &ids {
            for k in 0..store.value(id).numel() {
                let orig = store.value(id).data()[k];
                store.value_mut(id).data_mut()[k] = orig + FD_STEP;
                let (tp, sp) = forward(&store)?;
                let plus = tp.value(sp).data()[0];
                store.value_mut(id).data_mut()[k] = orig - FD_STEP;
                let (tm, sm) = forward(&store)?;
                let minus = tm.value(sm).data()[0];
                store.value_mut(id).data_mut()[k] = orig;
                let numeric = (plus - minus) / (2.0 * FD_STEP);
                worst = worst.max(relative_error(grads[id][k], numeric));
            }
        }
    }
    Ok(GradCheckResult {
        name: name.to_string(),
        max_rel_err: worst,
    })
}

fn primitive_suites(seeds: u64) -> Result<Vec<GradCheckResult>> {
    let mut out = Vec::new();
    out.push(check_primitive("primitive_tanh", seeds, &[7], None, |t, a, _| {
        Ok(t.tanh(a))
    })?);
    out.push(check_primitive(
        "primitive_sigmoid",
        seeds,
        &[7],
        None,
        |t, a, _| Ok(t.sigmoid(a)),
    )?);
    out.push(check_primitive(
        "primitive_matvec",
        seeds,
        &[4, 6],
        Some(&[6]),
        |t, a, b| t.matvec(a, b.unwrap()),
    )?);
    out.push(check_primitive(
        "primitive_dot",
        seeds,
        &[6],
        Some(&[6]),
        |t, a, b| t.dot(a, b.unwrap()),
    )?);
    out.push(check_primitive(
        "primitive_add",
        seeds,
        &[6],
        Some(&[6]),
        |t, a, b| t.add(a, b.unwrap()),
    )?);
    out.push(check_primitive(
        "primitive_sub",
        seeds,
        &[6],
        Some(&[6]),
        |t, a, b| t.sub(a, b.unwrap()),
    )?);
    out.push(check_primitive(
        "primitive_mul",
        seeds,
        &[6],
        Some(&[6]),
        |t, a, b| t.mul(a, b.unwrap()),
    )?);
    out.push(check_primitive(
        "primitive_concat",
        seeds,
        &[4],
        Some(&[5]),
        |t, a, b| t.concat(&[a, b.unwrap()]),
    )?);
    out.push(check_primitive(
        "primitive_weighted_sum",
        seeds,
        &[3],
        Some(&[4]),
        |t, w, item| {
            let i1 = item.unwrap();
            let i2 = t.tanh(i1);
            let i3 = t.sigmoid(i1);
            let weights = t.softmax(w)?;
            t.weighted_sum(weights, &[i1, i2, i3])
        },
    )?);
    out.push(check_primitive(
        "primitive_softmax",
        seeds,
        &[6],
        None,
        |t, a, _| t.softmax(a),
    )?);
    out.push(check_primitive(
        "primitive_neg_log_pick",
        seeds,
        &[5],
        None,
        |t, a, _| {
            let p = t.softmax(a)?;
            t.neg_log_pick(p, 2)
        },
    )?);
    out.push(check_primitive(
        "primitive_conv1d",
        seeds,
        &[3, 8],
        Some(&[4]),
        |t, w, x| {
            // four derived input vectors make overlapping windows
            let x1 = x.unwrap();
            let x2 = t.tanh(x1);
            let x3 = t.sigmoid(x1);
            let x4 = t.mul(x1, x2)?;
            t.conv1d(w, &[x1, x2, x3, x4], 2)
        },
    )?);
    out.push(check_primitive(
        "primitive_piecewise_max",
        seeds,
        &[3, 8],
        Some(&[4]),
        |t, w, x| {
            let x1 = x.unwrap();
            let x2 = t.tanh(x1);
            let x3 = t.sigmoid(x1);
            let x4 = t.mul(x1, x2)?;
            let conv = t.conv1d(w, &[x1, x2, x3, x4], 2)?;
            t.piecewise_max(conv, 1, 2)
        },
    )?);
    out.push(check_lookup(seeds)?);
    Ok(out)
}

/// Table lookup gets its own harness since it reads the store directly:
/// two rows (one repeated) flow through a tanh into the probe.
fn check_lookup(seeds: u64) -> Result<GradCheckResult> {
    let name = "primitive_lookup";
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = Rng::for_stream(seed, stream_of(name));
        let mut store = ParamStore::new();
        let data: Vec<f64> = (0..20).map(|_| rng.uniform(-1.2, 1.2)).collect();
        let table = store.insert("table", Tensor::matrix(5, 4, data)?)?;

        let forward = |store: &ParamStore| -> Result<(Tape, NodeId)> {
            let mut tape = Tape::new();
            let r2 = tape.lookup(store, table, 2)?;
            let r4 = tape.lookup(store, table, 4)?;
            let r2b = tape.lookup(store, table, 2)?; // repeated row accumulates
            let cat = tape.concat(&[r2, r4, r2b])?;
            let act = tape.tanh(cat);
            let scalar = probe(&mut tape, act, stream_of(name) ^ seed)?;
            Ok((tape, scalar))
        };

        store.zero_grads();
        let (mut tape, scalar) = forward(&store)?;
        tape.backward(scalar)?;
        tape.apply_grads(&mut store)?;
        let analytic = store.grad(table).to_vec();
        for k in 0..20 {
            let orig = store.value(table).data()[k];
            store.value_mut(table).data_mut()[k] = orig + FD_STEP;
            let (tp, sp) = forward(&store)?;
            let plus = tp.value(sp).data()[0];
            store.value_mut(table).data_mut()[k] = orig - FD_STEP;
            let (tm, sm) = forward(&store)?;
            let minus = tm.value(sm).data()[0];
            store.value_mut(table).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[k], numeric));
        }
    }
    Ok(GradCheckResult {
        name: name.to_string(),
        max_rel_err: worst,
    })
}

// ---- composite checks --------------------------------------------------

type BuildEval = Box<dyn for<'a> Fn(&'a Model) -> Result<(Graph<'a>, NodeId)>>;

/// Run one composite over `seeds` models: the factory fixes the random
/// inputs per seed, the built evaluator replays the forward graph.
fn composite(
    name: &str,
    seeds: u64,
    strategy: Strategy,
    params: &[&str],
    make: impl Fn(&Model, &mut Rng) -> BuildEval,
) -> Result<GradCheckResult> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut model = check_model(strategy, 1000 + seed);
        let mut rng = Rng::for_stream(seed, stream_of(name));
        let build = make(&model, &mut rng);
        let mut run = |m: &mut Model| -> Result<f64> {
            let (mut g, scalar) = build(m)?;
            g.tape.backward(scalar)?;
            let value = g.tape.value(scalar).data()[0];
            let tape = g.tape;
            tape.apply_grads(&mut m.store)?;
            Ok(value)
        };
        let mut eval = |m: &Model| -> Result<f64> {
            let (g, scalar) = build(m)?;
            Ok(g.tape.value(scalar).data()[0])
        };
        let err = check_against_fd(&mut model, params, &mut run, &mut eval)?;
        worst = worst.max(err);
    }
    Ok(GradCheckResult {
        name: name.to_string(),
        max_rel_err: worst,
    })
}

fn composite_suites(seeds: u64) -> Result<Vec<GradCheckResult>> {
    let mut results = Vec::new();

    // (a) sentence embedding through convolution and pooling
    results.push(composite(
        "pcnn_sentence_embedding",
        seeds,
        Strategy::Baseline,
        &["word_emb", "pos_emb", "conv_w"],
        |_, rng| {
            let sentence = check_sentence(rng, 6);
            Box::new(move |m: &Model| {
                let mut g = Graph::new(m);
                let emb = crate::pcnn::sentence_embedding(&mut g, &sentence)?;
                let s = probe(&mut g.tape, emb, 17)?;
                Ok((g, s))
            })
        },
    )?);

    // (b1) one tree-GRU node over fixed inputs
    results.push(composite(
        "tree_gru_node",
        seeds,
        Strategy::Trans,
        &[
            "gru_wz", "gru_uz", "gru_bz", "gru_wr", "gru_ur", "gru_br", "gru_wh", "gru_uh",
            "gru_bh",
        ],
        |model, rng| {
            let x = Tensor::vector(
                (0..model.dims.tree_input())
                    .map(|_| rng.uniform(-1.0, 1.0))
                    .collect(),
            );
            let h = Tensor::vector(
                (0..model.dims.hidden)
                    .map(|_| rng.uniform(-0.9, 0.9))
                    .collect(),
            );
            Box::new(move |m: &Model| {
                let mut g = Graph::new(m);
                let xn = g.tape.constant(x.clone());
                let hn = g.tape.constant(h.clone());
                let out = crate::tree_gru::tree_gru_node(&mut g, xn, hn)?;
                let s = probe(&mut g.tape, out, 19)?;
                Ok((g, s))
            })
        },
    )?);

    // (b2) a full entity subtree including child attention and lookups
    results.push(composite(
        "entity_subtree",
        seeds,
        Strategy::Trans,
        &[
            "word_emb", "pos_emb", "dep_emb", "gru_wz", "gru_uz", "gru_bz", "gru_wr", "gru_ur",
            "gru_br", "gru_wh", "gru_uh", "gru_bh", "att_ch_w", "att_ch_v",
        ],
        |_, rng| {
            let sentence = check_sentence(rng, 7);
            Box::new(move |m: &Model| {
                let mut g = Graph::new(m);
                let root = sentence.heads.iter().position(|&h| h == -1).unwrap();
                let emb = crate::tree_gru::entity_context_embedding(&mut g, &sentence, root)?;
                let s = probe(&mut g.tape, emb, 23)?;
                Ok((g, s))
            })
        },
    )?);

    // (c) the three attention pools
    for (name, w, v) in [
        ("attention_pool_sentences", "att_se_w", "att_se_v"),
        ("attention_pool_entity1", "att_e1_w", "att_e1_v"),
        ("attention_pool_entity2", "att_e2_w", "att_e2_v"),
    ] {
        let dim = if name == "attention_pool_sentences" {
            check_dims().sentence_dim()
        } else {
            check_dims().hidden
        };
        results.push(composite(name, seeds, Strategy::Trans, &[w, v], move |_, rng| {
            let items: Vec<Tensor> = (0..4)
                .map(|_| Tensor::vector((0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect()))
                .collect();
            Box::new(move |m: &Model| {
                let mut g = Graph::new(m);
                let nodes: Vec<NodeId> = items.iter().map(|t| g.tape.constant(t.clone())).collect();
                let wid = m.store.id(w).unwrap();
                let vid = m.store.id(v).unwrap();
                let (pooled, _) = attention_pool(&mut g, wid, vid, &nodes)?;
                let s = probe(&mut g.tape, pooled, 29)?;
                Ok((g, s))
            })
        })?);
    }

    // (d) the scoring heads over fixed pooled vectors
    results.push(composite(
        "head_cat",
        seeds,
        Strategy::Cat,
        &["head_cat_w", "head_cat_b"],
        |model, rng| {
            let d = model.dims;
            let s = Tensor::vector((0..d.sentence_dim()).map(|_| rng.uniform(-1.0, 1.0)).collect());
            let e1 = Tensor::vector((0..d.hidden).map(|_| rng.uniform(-1.0, 1.0)).collect());
            let e2 = Tensor::vector((0..d.hidden).map(|_| rng.uniform(-1.0, 1.0)).collect());
            Box::new(move |m: &Model| {
                let mut g = Graph::new(m);
                let sn = g.tape.constant(s.clone());
                let e1n = g.tape.constant(e1.clone());
                let e2n = g.tape.constant(e2.clone());
                let scores = crate::model::score_cat(&mut g, sn, e1n, e2n, None)?;
                let sc = probe(&mut g.tape, scores, 31)?;
                Ok((g, sc))
            })
        },
    )?);
    results.push(composite(
        "head_trans",
        seeds,
        Strategy::Trans,
        &["head_s_w", "head_s_b", "head_diff_w", "head_diff_b", "alpha_logits"],
        |model, rng| {
            let d = model.dims;
            let s = Tensor::vector((0..d.sentence_dim()).map(|_| rng.uniform(-1.0, 1.0)).collect());
            let e1 = Tensor::vector((0..d.hidden).map(|_| rng.uniform(-1.0, 1.0)).collect());
            let e2 = Tensor::vector((0..d.hidden).map(|_| rng.uniform(-1.0, 1.0)).collect());
            Box::new(move |m: &Model| {
                let mut g = Graph::new(m);
                let sn = g.tape.constant(s.clone());
                let e1n = g.tape.constant(e1.clone());
                let e2n = g.tape.constant(e2.clone());
                let scores = crate::model::score_trans(&mut g, sn, e1n, e2n, None)?;
                let sc = probe(&mut g.tape, scores, 37)?;
                Ok((g, sc))
            })
        },
    )?);

    // (e) end-to-end loss for each strategy on a two-bag toy corpus,
    // every parameter perturbed including embedding rows and gates
    for strategy in [Strategy::Baseline, Strategy::Cat, Strategy::Trans] {
        results.push(end_to_end_loss(strategy, seeds)?);
    }
    Ok(results)
}

fn end_to_end_loss(strategy: Strategy, seeds: u64) -> Result<GradCheckResult> {
    let name = format!("bag_loss_{strategy}");
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut model = check_model(strategy, 2000 + seed);
        let mut rng = Rng::for_stream(seed, stream_of(&name));
        let bags = [check_bag(&mut rng, 1), check_bag(&mut rng, 2)];
        let params: Vec<String> = model
            .store
            .ids()
            .map(|id| model.store.name(id).to_string())
            .collect();
        let param_refs: Vec<&str> = params.iter().map(String::as_str).collect();

        let mut run = |m: &mut Model| -> Result<f64> {
            let refs: Vec<&Bag> = bags.iter().collect();
            bag_loss_backward(m, &refs, 0.0, &mut Rng::new(0))
        };
        let mut eval = |m: &Model| -> Result<f64> {
            let refs: Vec<&Bag> = bags.iter().collect();
            bag_loss(m, &refs, 0.0, None)
        };
        let err = check_against_fd(&mut model, &param_refs, &mut run, &mut eval)?;
        worst = worst.max(err);
    }
    Ok(GradCheckResult {
        name,
        max_rel_err: worst,
    })
}

/// Run the gradient-check suites. `module` filters by name prefix
/// (`primitive`, `pcnn`, `tree`, `entity`, `attention`, `head`,
/// `bag_loss`); `None` runs everything. 20 seeds per check.
pub fn run_all(module: Option<&str>) -> Result<Vec<GradCheckResult>> {
    run_with_seeds(module, 20)
}

pub fn run_with_seeds(module: Option<&str>, seeds: u64) -> Result<Vec<GradCheckResult>> {
    let mut results = Vec::new();
    results.extend(primitive_suites(seeds)?);
    results.extend(composite_suites(seeds)?);
    if let Some(prefix) = module {
        results.retain(|r| r.name.starts_with(prefix));
        if results.is_empty() {
            return Err(Error::invalid(format!(
                "no gradient checks match module {prefix:?}"
            )));
        }
    }
    Ok(results)
}
