//! Stream GRUs, collaborative-filtering fusion and the joint GRU.

use medrec_tensor::{Axis, NodeId, ParamId, ParamStore, Rng, Tape, Tensor};

use crate::config::FusionInteraction;
use crate::error::{CoreError, Result};

/// GRU cell with gates in the order reset, update, candidate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GruParams {
    pub w_x: [ParamId; 3],
    pub w_h: [ParamId; 3],
    pub b_x: [ParamId; 3],
    pub b_h: [ParamId; 3],
    pub input: usize,
    pub hidden: usize,
}

impl GruParams {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, input: usize, hidden: usize) -> Self {
        let gates = ["r", "z", "n"];
        let mut mk = |kind: &str, rows: usize, fan_in: usize| {
            gates.map(|g| store.add_uniform(format!("{prefix}/{kind}_{g}"), rows, hidden, fan_in, rng))
        };
        let w_x = mk("w_x", input, input);
        let w_h = mk("w_h", hidden, hidden);
        let b_x = gates.map(|g| store.add_zeros(format!("{prefix}/b_x_{g}"), 1, hidden));
        let b_h = gates.map(|g| store.add_zeros(format!("{prefix}/b_h_{g}"), 1, hidden));
        Self {
            w_x,
            w_h,
            b_x,
            b_h,
            input,
            hidden,
        }
    }
}

fn affine(tape: &mut Tape, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
    let w = tape.param(w)?;
    let b = tape.param(b)?;
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, b)?)
}

/// One GRU step:
/// `r = σ(x W_xr + b_xr + h W_hr + b_hr)`, `z` likewise,
/// `n = tanh(x W_xn + b_xn + r ⊙ (h W_hn + b_hn))`,
/// `h' = (1 - z) ⊙ n + z ⊙ h`.
pub fn gru_step(tape: &mut Tape, x: NodeId, h: NodeId, p: &GruParams) -> Result<NodeId> {
    let [_, xw] = tape.shape(x);
    let [_, hw] = tape.shape(h);
    if xw != p.input || hw != p.hidden {
        return Err(CoreError::Invalid(format!(
            "gru expects input {} and hidden {}, got {xw} and {hw}",
            p.input, p.hidden
        )));
    }
    let gate = |tape: &mut Tape, g: usize| -> Result<(NodeId, NodeId)> {
        Ok((affine(tape, x, p.w_x[g], p.b_x[g])?, affine(tape, h, p.w_h[g], p.b_h[g])?))
    };
    let (xr, hr) = gate(tape, 0)?;
    let (xz, hz) = gate(tape, 1)?;
    let (xn, hn) = gate(tape, 2)?;
    let r = tape.add(xr, hr)?;
    let r = tape.sigmoid(r)?;
    let z = tape.add(xz, hz)?;
    let z = tape.sigmoid(z)?;
    let rh = tape.mul(r, hn)?;
    let n = tape.add(xn, rh)?;
    let n = tape.tanh(n)?;
    let diff = tape.sub(h, n)?;
    let zd = tape.mul(z, diff)?;
    Ok(tape.add(n, zd)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// `ℓ` layers: `ℓ-1` of width `2e → 2e`, then `2e → e`.
    pub deep: Vec<(ParamId, ParamId)>,
    pub merge1: (ParamId, ParamId),
    pub merge2: (ParamId, ParamId),
    pub interaction: FusionInteraction,
    pub width: usize,
}

impl FusionParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        width: usize,
        layers: usize,
        interaction: FusionInteraction,
    ) -> Self {
        let w2 = 2 * width;
        let mut lin = |name: String, i: usize, o: usize| {
            (
                store.add_uniform(format!("{name}/w"), i, o, i, rng),
                store.add_zeros(format!("{name}/b"), 1, o),
            )
        };
        let deep = (0..layers)
            .map(|l| lin(format!("{prefix}/deep{l}"), w2, if l + 1 == layers { width } else { w2 }))
            .collect();
        Self {
            deep,
            merge1: lin(format!("{prefix}/merge1"), w2, w2),
            merge2: lin(format!("{prefix}/merge2"), w2, w2),
            interaction,
            width,
        }
    }
}

/// `f = W2 ReLU(W1 [hc ⊙ hm ∘ F(hc ∘ hm)])`, width `2e`.
pub fn fuse(tape: &mut Tape, hc: NodeId, hm: NodeId, p: &FusionParams) -> Result<NodeId> {
    if tape.shape(hc) != [1, p.width] || tape.shape(hm) != [1, p.width] {
        return Err(CoreError::Invalid(format!(
            "fuse expects two 1×{} rows, got {:?} and {:?}",
            p.width,
            tape.shape(hc),
            tape.shape(hm)
        )));
    }
    let alpha = tape.mul(hc, hm)?;
    let mut x = tape.concat(&[hc, hm], Axis::Cols)?;
    let last = p.deep.len() - 1;
    for (l, &(w, b)) in p.deep.iter().enumerate() {
        let y = affine(tape, x, w, b)?;
        x = if l == last {
            y
        } else {
            let y = match p.interaction {
                FusionInteraction::Product => tape.mul(y, x)?,
                FusionInteraction::Mlp => y,
            };
            tape.relu(y)?
        };
    }
    let u = tape.concat(&[alpha, x], Axis::Cols)?;
    let u = affine(tape, u, p.merge1.0, p.merge1.1)?;
    let u = tape.relu(u)?;
    affine(tape, u, p.merge2.0, p.merge2.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyParams {
    pub clinical: GruParams,
    /// Medicine stream and joint GRU; absent when the medicine graph is
    /// disabled.
    pub medicine: Option<MedicineStream>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MedicineStream {
    pub gru: GruParams,
    /// Input width `2e`.
    pub joint: GruParams,
    /// `None` concatenates the stream states instead of fusing them.
    pub fusion: Option<FusionParams>,
}

/// Stream states and joint states of one patient prefix.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub h_c: Vec<NodeId>,
    pub h_m: Vec<NodeId>,
    pub h_joint: Vec<NodeId>,
}

/// Runs the clinical GRU over `g_c`, the medicine GRU over `g_m`, fuses
/// each medicine step with the clinical state of the same admission and
/// feeds it to the joint GRU. All hidden states start at zero.
///
/// With a medicine stream, `g_m` must be one shorter than `g_c`; without
/// one it must be empty.
pub fn run_hierarchy(tape: &mut Tape, g_c: &[NodeId], g_m: &[NodeId], p: &HierarchyParams) -> Result<Hierarchy> {
    let expected = match p.medicine {
        Some(_) => g_c.len().saturating_sub(1),
        None => 0,
    };
    if g_c.is_empty() || g_m.len() != expected {
        return Err(CoreError::Invalid(format!(
            "{} clinical and {} medicine states do not form a valid prefix",
            g_c.len(),
            g_m.len()
        )));
    }
    let e = p.clinical.hidden;
    let zero = tape.constant(Tensor::zeros(1, e));
    let mut out = Hierarchy {
        h_c: Vec::with_capacity(g_c.len()),
        h_m: Vec::with_capacity(g_m.len()),
        h_joint: Vec::with_capacity(g_m.len()),
    };
    let mut h = zero;
    for &g in g_c {
        h = gru_step(tape, g, h, &p.clinical)?;
        out.h_c.push(h);
    }
    if let Some(ms) = &p.medicine {
        let (mut hm, mut hj) = (zero, zero);
        for (i, &g) in g_m.iter().enumerate() {
            hm = gru_step(tape, g, hm, &ms.gru)?;
            out.h_m.push(hm);
            let f = match &ms.fusion {
                Some(fp) => fuse(tape, out.h_c[i], hm, fp)?,
                None => tape.concat(&[out.h_c[i], hm], Axis::Cols)?,
            };
            hj = gru_step(tape, f, hj, &ms.joint)?;
            out.h_joint.push(hj);
        }
    }
    Ok(out)
}
