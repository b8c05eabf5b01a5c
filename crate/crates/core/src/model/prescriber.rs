//! Attentive prescribing: multi-head attention over the joint history, the
//! residual layer norm and the sigmoid prediction head.

use std::collections::BTreeSet;

use medrec_tensor::{Axis, NodeId, ParamId, ParamStore, Rng, Tape};

use crate::error::{CoreError, Result};

/// `softmax(q Kᵀ / √d_k) V` for a single query row.
pub fn scaled_dot_attention(tape: &mut Tape, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
    let [qr, dk] = tape.shape(q);
    let [kr, kc] = tape.shape(k);
    let [vr, _] = tape.shape(v);
    if qr != 1 || kc != dk || kr != vr {
        return Err(CoreError::Invalid(format!(
            "attention shapes q {:?}, K {:?}, V {:?} are incompatible",
            tape.shape(q),
            tape.shape(k),
            tape.shape(v)
        )));
    }
    if kr == 0 {
        return Err(CoreError::Invalid("attention over an empty key set".into()));
    }
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let w = tape.softmax(logits, (dk as f64).sqrt())?;
    Ok(tape.matmul(w, v)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionHead {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionParams {
    pub heads: Vec<AttentionHead>,
    /// `e × e` merge of the concatenated heads.
    pub merge: ParamId,
    pub merge_bias: ParamId,
    pub width: usize,
    pub head_width: usize,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(CoreError::Config(format!("{heads} heads do not divide width {width}")));
        }
        let dk = width / heads;
        let heads = (0..heads)
            .map(|h| {
                let mut mk = |n: &str| store.add_uniform(format!("{prefix}/h{h}/{n}"), width, dk, width, rng);
                AttentionHead {
                    w_q: mk("w_q"),
                    w_k: mk("w_k"),
                    w_v: mk("w_v"),
                }
            })
            .collect();
        Ok(Self {
            heads,
            merge: store.add_uniform(format!("{prefix}/merge"), width, width, width, rng),
            merge_bias: store.add_zeros(format!("{prefix}/merge_bias"), 1, width),
            width,
            head_width: dk,
        })
    }
}

/// Multi-head attention of one query row over `memory` (`n × e`).
pub fn multi_head_attention(tape: &mut Tape, query: NodeId, memory: NodeId, p: &AttentionParams) -> Result<NodeId> {
    if tape.shape(query) != [1, p.width] || tape.shape(memory)[1] != p.width {
        return Err(CoreError::Invalid(format!(
            "attention expects width {}, got query {:?} and memory {:?}",
            p.width,
            tape.shape(query),
            tape.shape(memory)
        )));
    }
    let mut outs = Vec::with_capacity(p.heads.len());
    for h in &p.heads {
        let wq = tape.param(h.w_q)?;
        let wk = tape.param(h.w_k)?;
        let wv = tape.param(h.w_v)?;
        let q = tape.matmul(query, wq)?;
        let k = tape.matmul(memory, wk)?;
        let v = tape.matmul(memory, wv)?;
        outs.push(scaled_dot_attention(tape, q, k, v)?);
    }
    let cat = tape.concat(&outs, Axis::Cols)?;
    let w = tape.param(p.merge)?;
    let b = tape.param(p.merge_bias)?;
    let y = tape.matmul(cat, w)?;
    Ok(tape.add(y, b)?)
}

/// Layer norm with learnable gain and bias, then `σ(W2 ReLU(W1 o))`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadParams {
    pub gain: ParamId,
    pub shift: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub width: usize,
    pub outputs: usize,
}

impl HeadParams {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, width: usize, outputs: usize) -> Self {
        Self {
            gain: store.add_full(format!("{prefix}/ln_gain"), 1, width, 1.0),
            shift: store.add_zeros(format!("{prefix}/ln_bias"), 1, width),
            w1: store.add_uniform(format!("{prefix}/w1"), width, 2 * width, width, rng),
            b1: store.add_zeros(format!("{prefix}/b1"), 1, 2 * width),
            w2: store.add_uniform(format!("{prefix}/w2"), 2 * width, outputs, 2 * width, rng),
            b2: store.add_zeros(format!("{prefix}/b2"), 1, outputs),
            width,
            outputs,
        }
    }
}

pub fn layer_norm_affine(tape: &mut Tape, x: NodeId, p: &HeadParams, eps: f64) -> Result<NodeId> {
    let n = tape.layer_norm(x, eps)?;
    let g = tape.param(p.gain)?;
    let b = tape.param(p.shift)?;
    let n = tape.mul(n, g)?;
    Ok(tape.add(n, b)?)
}

/// `σ(W2 ReLU(W1 o + b1) + b2)`.
pub fn predict_head(tape: &mut Tape, o: NodeId, p: &HeadParams) -> Result<NodeId> {
    if tape.shape(o) != [1, p.width] {
        return Err(CoreError::Invalid(format!("head expects 1×{}, got {:?}", p.width, tape.shape(o))));
    }
    let w1 = tape.param(p.w1)?;
    let b1 = tape.param(p.b1)?;
    let w2 = tape.param(p.w2)?;
    let b2 = tape.param(p.b2)?;
    let h = tape.matmul(o, w1)?;
    let h = tape.add(h, b1)?;
    let h = tape.relu(h)?;
    let y = tape.matmul(h, w2)?;
    let y = tape.add(y, b2)?;
    Ok(tape.sigmoid(y)?)
}

/// `LN(g_c + MHA(h_c, memory))` followed by the prediction head. An empty
/// memory contributes a zero attention term.
pub fn apm(
    tape: &mut Tape,
    h_c: NodeId,
    memory: &[NodeId],
    g_c: NodeId,
    attention: &AttentionParams,
    head: &HeadParams,
    ln_eps: f64,
) -> Result<NodeId> {
    if tape.shape(g_c) != [1, attention.width] {
        return Err(CoreError::Invalid(format!(
            "graph state must be 1×{}, got {:?}",
            attention.width,
            tape.shape(g_c)
        )));
    }
    let pre = if memory.is_empty() {
        if tape.shape(h_c) != [1, attention.width] {
            return Err(CoreError::Invalid(format!("query must be 1×{}", attention.width)));
        }
        g_c
    } else {
        let mem = tape.concat(memory, Axis::Rows)?;
        let a = multi_head_attention(tape, h_c, mem, attention)?;
        tape.add(g_c, a)?
    };
    let o = layer_norm_affine(tape, pre, head, ln_eps)?;
    predict_head(tape, o, head)
}

/// Position-wise merge used when attention is disabled: `2e → e → e`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnParams {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, width: usize) -> Self {
        Self {
            w1: store.add_uniform(format!("{prefix}/w1"), 2 * width, width, 2 * width, rng),
            b1: store.add_zeros(format!("{prefix}/b1"), 1, width),
            w2: store.add_uniform(format!("{prefix}/w2"), width, width, width, rng),
            b2: store.add_zeros(format!("{prefix}/b2"), 1, width),
        }
    }
}

pub fn ffn(tape: &mut Tape, x: NodeId, p: &FfnParams) -> Result<NodeId> {
    let w1 = tape.param(p.w1)?;
    let b1 = tape.param(p.b1)?;
    let w2 = tape.param(p.w2)?;
    let b2 = tape.param(p.b2)?;
    let h = tape.matmul(x, w1)?;
    let h = tape.add(h, b1)?;
    let h = tape.relu(h)?;
    let y = tape.matmul(h, w2)?;
    Ok(tape.add(y, b2)?)
}

/// Indices whose probability is strictly above `theta`.
pub fn threshold(probs: &[f64], theta: f64) -> Result<BTreeSet<usize>> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(CoreError::Config(format!("threshold {theta} outside (0, 1)")));
    }
    Ok(probs.iter().enumerate().filter(|(_, &p)| p > theta).map(|(i, _)| i).collect())
}

/// Medicine ids ordered by descending probability, ties by ascending id.
pub fn rank(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx
}
