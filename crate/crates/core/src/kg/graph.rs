use std::collections::BTreeSet;

use medrec_tensor::Rng;

use super::relations::{RelationFamily, RelationStore, SideRelations};
use crate::cohort::{Admission, KgSide, Vocabularies};
use crate::error::{CoreError, Result};

/// Directed, typed edge between node positions of a [`MedicalKg`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub src: usize,
    pub rel: usize,
    pub dst: usize,
}

/// Which relation families a graph includes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelationFilter {
    /// Ancestor nodes and ontology edges.
    pub ontology: bool,
    pub semantic: bool,
    pub ddi: bool,
}

impl Default for RelationFilter {
    fn default() -> Self {
        Self {
            ontology: true,
            semantic: true,
            ddi: true,
        }
    }
}

/// Per-admission knowledge graph of one side.
///
/// Node positions `0..nodes.len()` hold medical codes in ascending id
/// order; the patient master node sits at position `nodes.len()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MedicalKg {
    pub side: KgSide,
    /// Code ids (merged clinical ids or medicine ids), sorted.
    pub nodes: Vec<usize>,
    /// Originally observed code ids, sorted.
    pub observed: Vec<usize>,
    pub edges: Vec<Edge>,
    pub n_relations: usize,
    /// Demographic ids feeding the master node.
    pub demographics: Vec<usize>,
}

impl MedicalKg {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len() + 1
    }

    pub fn master(&self) -> usize {
        self.nodes.len()
    }

    pub fn position(&self, id: usize) -> Option<usize> {
        self.nodes.binary_search(&id).ok()
    }

    pub fn in_degree(&self, pos: usize) -> usize {
        self.edges.iter().filter(|e| e.dst == pos).count()
    }

    pub fn out_degree(&self, pos: usize) -> usize {
        self.edges.iter().filter(|e| e.src == pos).count()
    }
}

/// `observed` plus every ancestor reachable through `parent` links.
pub fn ancestor_closure(observed: &BTreeSet<usize>, parent: &[Option<usize>]) -> Result<BTreeSet<usize>> {
    let mut out = BTreeSet::new();
    for &leaf in observed {
        if leaf >= parent.len() {
            return Err(CoreError::Invalid(format!("node {leaf} out of range")));
        }
        let mut walk = BTreeSet::new();
        let mut v = leaf;
        loop {
            if !walk.insert(v) {
                return Err(CoreError::Invalid(format!("ontology cycle above node {leaf}")));
            }
            if !out.insert(v) {
                // Ancestors of v are already in the closure.
                break;
            }
            match parent[v] {
                Some(p) if p < parent.len() => v = p,
                Some(p) => return Err(CoreError::Invalid(format!("parent {p} out of range"))),
                None => break,
            }
        }
    }
    Ok(out)
}

/// Builds the graph of one admission on one side.
pub fn build_kg(
    adm: &Admission,
    side: KgSide,
    store: &RelationStore,
    vocab: &Vocabularies,
    filter: RelationFilter,
) -> Result<MedicalKg> {
    let observed = match side {
        KgSide::Clinical => adm.clinical_ids(vocab),
        KgSide::Medicine => adm.medicines.clone(),
    };
    build_from_observed(&observed, store.side(side), filter, adm.demographics.clone())
}

pub fn build_from_observed(
    observed: &BTreeSet<usize>,
    rels: &SideRelations,
    filter: RelationFilter,
    demographics: Vec<usize>,
) -> Result<MedicalKg> {
    if observed.is_empty() {
        return Err(CoreError::Invalid(format!("empty admission: no {} codes", rels.side)));
    }
    let included = if filter.ontology {
        ancestor_closure(observed, &rels.parent_ids())?
    } else {
        observed.clone()
    };
    let nodes: Vec<usize> = included.iter().copied().collect();
    let pos = |id: usize| nodes.binary_search(&id).ok();
    let mut edges = BTreeSet::new();
    if filter.ontology {
        for (i, &child) in nodes.iter().enumerate() {
            if let Some((p, rel)) = rels.parent[child] {
                if let Some(pi) = pos(p) {
                    edges.insert(Edge { src: pi, rel, dst: i });
                    if let Some(&rev) = rels.reversed.get(&rel) {
                        edges.insert(Edge { src: i, rel: rev, dst: pi });
                    }
                }
            }
        }
    }
    for (i, &id) in nodes.iter().enumerate() {
        for &(rel, tail) in rels.lateral_from(id) {
            let keep = match rels.family(rel) {
                RelationFamily::Semantic => filter.semantic,
                RelationFamily::Ddi => filter.ddi,
                _ => false,
            };
            if let (true, Some(ti)) = (keep, pos(tail)) {
                edges.insert(Edge { src: i, rel, dst: ti });
            }
        }
    }
    let master = nodes.len();
    let link = rels.patient_link();
    for &o in observed {
        edges.insert(Edge {
            src: pos(o).expect("observed code is included"),
            rel: link,
            dst: master,
        });
    }
    Ok(MedicalKg {
        side: rels.side,
        nodes,
        observed: observed.iter().copied().collect(),
        edges: edges.into_iter().collect(),
        n_relations: rels.relations.len(),
        demographics,
    })
}

/// Copy of `kg` where each non-patient-link edge survives with
/// probability `1 - p`.
pub fn edge_drop(kg: &MedicalKg, p: f64, patient_link: usize, rng: &mut Rng) -> Result<MedicalKg> {
    if !(0.0..1.0).contains(&p) {
        return Err(CoreError::Config(format!("edge-drop probability {p} not in [0, 1)")));
    }
    let mut out = kg.clone();
    if p > 0.0 {
        out.edges.retain(|e| e.rel == patient_link || !rng.bernoulli(p));
    }
    Ok(out)
}
