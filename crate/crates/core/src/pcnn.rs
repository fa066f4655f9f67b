//! Piecewise-convolutional sentence encoder: a sliding-window
//! convolution over per-token input vectors, max-pooling split into
//! three segments at the two entity positions, and a tanh output.

use crate::corpus::ParsedSentence;
use crate::error::Result;
use crate::model::{Graph, InputMode};
use crate::tape::NodeId;

/// Convolution over a sequence of input-vector nodes: one output row
/// per filter, one column per window position (`n - window + 1`).
pub fn convolve(g: &mut Graph, xs: &[NodeId], window: usize) -> Result<NodeId> {
    let w = g.param(g.model().ids.conv_w);
    g.tape.conv1d(w, xs, window)
}

/// Per-filter maxima of the three segments `[0, p1-1]`, `[p1, p2]`,
/// `[p2+1, end]` of the convolution output, concatenated filter-major.
/// Empty segments contribute 0.
pub fn piecewise_max_pool(g: &mut Graph, conv: NodeId, p1: usize, p2: usize) -> Result<NodeId> {
    g.tape.piecewise_max(conv, p1, p2)
}

/// Sentence embedding: tanh over the pooled vector, length `3K`.
/// Sentences shorter than the window are right-padded with zero
/// vectors; entity positions clamp to the last window position.
pub fn sentence_embedding(g: &mut Graph, s: &ParsedSentence) -> Result<NodeId> {
    let dims = g.model().dims;
    let n = s.tokens.len();
    let mut xs = Vec::with_capacity(n.max(dims.window));
    for i in 0..n {
        xs.push(g.input_vector(s, i, InputMode::Pcnn)?);
    }
    while xs.len() < dims.window {
        xs.push(g.zeros(dims.pcnn_input()));
    }
    let conv = convolve(g, &xs, dims.window)?;
    let last = xs.len() - dims.window; // last conv position
    let (lo, hi) = if s.e1_index <= s.e2_index {
        (s.e1_index, s.e2_index)
    } else {
        (s.e2_index, s.e1_index)
    };
    let pooled = piecewise_max_pool(g, conv, lo.min(last), hi.min(last))?;
    Ok(g.tape.tanh(pooled))
}
