//! Per-admission clinical and medicine knowledge graphs.

mod graph;
pub mod relations;

pub use graph::{ancestor_closure, build_from_observed, build_kg, edge_drop, Edge, MedicalKg, RelationFilter};
pub use relations::{
    check_acyclic, RawTriple, Relation, RelationFamily, RelationFiles, RelationOptions, RelationStore, SideRelations,
    Triple,
};
