//! Syntax-aware entity encoding: a bottom-up gated recurrent unit over
//! the dependency subtree rooted at an entity token, with
//! self-attention over child hidden vectors.
//!
//! Each node combines its tree-mode input vector with the attention
//! pooled hidden vectors of its children:
//!
//! ```text
//! z = σ(Wz x + Uz h_ch + bz)        update gate
//! r = σ(Wr x + Ur h_ch + br)        reset gate
//! h~ = tanh(Wh x + Uh (r ∘ h_ch) + bh)
//! h = z ∘ h_ch + (1 - z) ∘ h~
//! ```
//!
//! Leaves use the zero vector for `h_ch`. Only the entity's subtree is
//! ever evaluated; tokens outside it cannot influence the embedding.

use crate::corpus::ParsedSentence;
use crate::embeddings::child_lists;
use crate::error::Result;
use crate::model::{Graph, InputMode};
use crate::tape::NodeId;

/// Attention-pooled child representation: softmax over per-child
/// scores `v_ch · tanh(W_ch h_j)`, then the weighted sum.
pub fn child_attention(g: &mut Graph, child_hiddens: &[NodeId]) -> Result<NodeId> {
    let gru = g.model().gru_ids().expect("tree strategy");
    Ok(crate::model::attention_pool(g, gru.att_w, gru.att_v, child_hiddens)?.0)
}

/// One GRU node over input `x` and pooled child vector `h_ch`.
pub fn tree_gru_node(g: &mut Graph, x: NodeId, h_ch: NodeId) -> Result<NodeId> {
    let gru = g.model().gru_ids().expect("tree strategy");
    let hidden = g.model().dims.hidden;

    let gate = |g: &mut Graph, w, u, b, x, h| -> Result<NodeId> {
        let wn = g.param(w);
        let un = g.param(u);
        let bn = g.param(b);
        let wx = g.tape.matvec(wn, x)?;
        let uh = g.tape.matvec(un, h)?;
        let sum = g.tape.add(wx, uh)?;
        g.tape.add(sum, bn)
    };

    let z_pre = gate(g, gru.wz, gru.uz, gru.bz, x, h_ch)?;
    let z = g.tape.sigmoid(z_pre);
    let r_pre = gate(g, gru.wr, gru.ur, gru.br, x, h_ch)?;
    let r = g.tape.sigmoid(r_pre);
    let rh = g.tape.mul(r, h_ch)?;
    let h_pre = gate(g, gru.wh, gru.uh, gru.bh, x, rh)?;
    let h_tilde = g.tape.tanh(h_pre);

    let ones = g.ones(hidden);
    let zc = g.tape.sub(ones, z)?;
    let keep = g.tape.mul(z, h_ch)?;
    let fresh = g.tape.mul(zc, h_tilde)?;
    g.tape.add(keep, fresh)
}

/// Hidden vector of the entity token, computed by a post-order walk of
/// its dependency subtree. Nodes outside the subtree are not evaluated.
pub fn entity_context_embedding(
    g: &mut Graph,
    s: &ParsedSentence,
    entity_index: usize,
) -> Result<NodeId> {
    let children = child_lists(&s.heads);
    encode_subtree(g, s, &children, entity_index)
}

fn encode_subtree(
    g: &mut Graph,
    s: &ParsedSentence,
    children: &[Vec<usize>],
    node: usize,
) -> Result<NodeId> {
    let mut kid_hidden = Vec::with_capacity(children[node].len());
    for &c in &children[node] {
        kid_hidden.push(encode_subtree(g, s, children, c)?);
    }
    let h_ch = if kid_hidden.is_empty() {
        g.zeros(g.model().dims.hidden)
    } else {
        child_attention(g, &kid_hidden)?
    };
    let x = g.input_vector(s, node, InputMode::Tree)?;
    tree_gru_node(g, x, h_ch)
}
