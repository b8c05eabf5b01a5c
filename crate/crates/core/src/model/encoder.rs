//! Node features, relational graph convolution and readout.

use std::collections::BTreeMap;

use medrec_tensor::{Axis, NodeId, ParamId, ParamStore, Rng, Tape, Tensor};

use crate::error::{CoreError, Result};
use crate::kg::MedicalKg;

/// Learnable code and demographic embeddings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddingBank {
    pub clinical: ParamId,
    pub medicine: ParamId,
    /// One table per demographic field.
    pub demographics: Vec<ParamId>,
    pub width: usize,
}

impl EmbeddingBank {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        clinical_rows: usize,
        medicine_rows: usize,
        demographic_rows: &[usize],
        width: usize,
    ) -> Self {
        let mut table = |name: String, rows| store.add_uniform(name, rows, width, width, rng);
        Self {
            clinical: table("embed/clinical".into(), clinical_rows),
            medicine: table("embed/medicine".into(), medicine_rows),
            demographics: demographic_rows
                .iter()
                .enumerate()
                .map(|(k, &rows)| table(format!("embed/demographic{k}"), rows))
                .collect(),
            width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgcnLayer {
    /// One `e × e` transform per relation.
    pub relations: Vec<ParamId>,
    pub self_loop: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgcnParams {
    pub layers: Vec<RgcnLayer>,
    pub dropout: f64,
    /// ReLU after the last layer; identity otherwise.
    pub final_relu: bool,
}

impl RgcnParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        n_relations: usize,
        width: usize,
        n_layers: usize,
        dropout: f64,
        final_relu: bool,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|l| RgcnLayer {
                relations: (0..n_relations)
                    .map(|r| store.add_uniform(format!("{prefix}/l{l}/rel{r}"), width, width, width, rng))
                    .collect(),
                self_loop: store.add_uniform(format!("{prefix}/l{l}/self"), width, width, width, rng),
                bias: store.add_zeros(format!("{prefix}/l{l}/bias"), 1, width),
            })
            .collect();
        Self {
            layers,
            dropout,
            final_relu,
        }
    }
}

/// Row-normalised adjacency per relation present in `kg`:
/// `A_r[v][u] = 1 / |N_v^r|` for each edge `u → v` under `r`.
pub fn relation_adjacency(kg: &MedicalKg) -> Vec<(usize, Tensor)> {
    let n = kg.num_nodes();
    let mut per_rel: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for e in &kg.edges {
        per_rel.entry(e.rel).or_default().push((e.src, e.dst));
    }
    per_rel
        .into_iter()
        .map(|(r, edges)| {
            let mut indeg = vec![0usize; n];
            for &(_, v) in &edges {
                indeg[v] += 1;
            }
            let mut a = Tensor::zeros(n, n);
            for &(u, v) in &edges {
                a.data_mut()[v * n + u] += 1.0 / indeg[v] as f64;
            }
            (r, a)
        })
        .collect()
}

/// Initial features: each medical node's embedding row, and for the master
/// node the sum of the patient's demographic embeddings (zero when
/// `demographics` is `None`).
pub fn init_node_features(
    tape: &mut Tape,
    kg: &MedicalKg,
    table: ParamId,
    demographics: Option<&[ParamId]>,
) -> Result<NodeId> {
    let t = tape.param(table)?;
    let [rows, width] = tape.shape(t);
    if let Some(&bad) = kg.nodes.iter().find(|&&id| id >= rows) {
        return Err(CoreError::Invalid(format!("node {bad} has no embedding row (table has {rows})")));
    }
    let medical = tape.gather_rows(t, &kg.nodes)?;
    let master = match demographics {
        Some(tables) => {
            if tables.len() != kg.demographics.len() {
                return Err(CoreError::Invalid(format!(
                    "{} demographic tables for {} demographic values",
                    tables.len(),
                    kg.demographics.len()
                )));
            }
            let mut acc: Option<NodeId> = None;
            for (&tbl, &id) in tables.iter().zip(&kg.demographics) {
                let p = tape.param(tbl)?;
                if id >= tape.shape(p)[0] {
                    return Err(CoreError::Invalid(format!("demographic id {id} has no embedding row")));
                }
                let row = tape.gather_rows(p, &[id])?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, row)?,
                    None => row,
                });
            }
            match acc {
                Some(a) => a,
                None => tape.constant(Tensor::zeros(1, width)),
            }
        }
        None => tape.constant(Tensor::zeros(1, width)),
    };
    Ok(tape.concat(&[medical, master], Axis::Rows)?)
}

/// `act(Σ_r (A_r Z) W_r + Z W_self + b)`; relations without edges in the
/// graph contribute nothing.
pub fn rgcn_layer(
    tape: &mut Tape,
    z: NodeId,
    adjacency: &[(usize, NodeId)],
    layer: &RgcnLayer,
    relu: bool,
) -> Result<NodeId> {
    let w_self = tape.param(layer.self_loop)?;
    let bias = tape.param(layer.bias)?;
    let mut out = tape.matmul(z, w_self)?;
    for &(r, a) in adjacency {
        let w = *layer
            .relations
            .get(r)
            .ok_or_else(|| CoreError::Invalid(format!("relation {r} has no weight matrix")))?;
        let msg = tape.matmul(a, z)?;
        let w = tape.param(w)?;
        let msg = tape.matmul(msg, w)?;
        out = tape.add(out, msg)?;
    }
    out = tape.add(out, bias)?;
    Ok(if relu { tape.relu(out)? } else { out })
}

/// Sum of node features.
pub fn readout(tape: &mut Tape, z: NodeId) -> Result<NodeId> {
    Ok(tape.sum_rows(z)?)
}

/// Encodes one graph to its state vector (`1 × e`). `rng` enables dropout
/// between layers.
pub fn encode_graph(
    tape: &mut Tape,
    kg: &MedicalKg,
    table: ParamId,
    demographics: Option<&[ParamId]>,
    params: &RgcnParams,
    mut rng: Option<&mut Rng>,
) -> Result<NodeId> {
    let adjacency: Vec<(usize, NodeId)> = relation_adjacency(kg)
        .into_iter()
        .map(|(r, a)| (r, tape.constant(a)))
        .collect();
    let mut z = init_node_features(tape, kg, table, demographics)?;
    let last = params.layers.len() - 1;
    for (l, layer) in params.layers.iter().enumerate() {
        if l > 0 {
            z = tape.dropout(z, params.dropout, rng.as_deref_mut())?;
        }
        z = rgcn_layer(tape, z, &adjacency, layer, l < last || params.final_relu)?;
    }
    readout(tape, z)
}
