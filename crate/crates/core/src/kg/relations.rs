//! Relation files and the per-side relation vocabularies.
//!
//! Ontology and semantic files hold one triple per line:
//!
//! ```text
//! #medrec-relations v1 ontology
//! head_code<TAB>relation_name<TAB>tail_code
//! ```
//!
//! Ontology triples point parent → child. Codes are resolved against the
//! cohort vocabularies; a code present in several vocabularies must be
//! written with its kind prefix (`diagnosis:250`). The DDI file lists
//! unordered pairs of leaf medicine codes:
//!
//! ```text
//! #medrec-ddi v1
//! code_a<TAB>code_b
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::Path;

use medrec_tensor::Tensor;

use crate::cohort::io::{content_lines, parse_err, read_text, write_text};
use crate::cohort::{KgSide, Vocabularies};
use crate::error::{CoreError, Result};

pub const ONTOLOGY_MAGIC: &str = "#medrec-relations v1 ontology";
pub const SEMANTIC_MAGIC: &str = "#medrec-relations v1 semantic";
pub const DDI_MAGIC: &str = "#medrec-ddi v1";

pub const DDI_RELATION: &str = "ddi";
pub const PATIENT_LINK_RELATION: &str = "patient_link";
pub const REVERSE_SUFFIX: &str = "_rev";

/// A triple as written in a relation file.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct RawTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl RawTriple {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        Self {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }
}

pub fn parse_triples(path: &Path, text: &str, magic: &str) -> Result<Vec<(usize, RawTriple)>> {
    content_lines(path, text, magic)?
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            match f.as_slice() {
                [h, r, t] if !h.is_empty() && !r.is_empty() && !t.is_empty() => {
                    Ok((n, RawTriple::new(*h, *r, *t)))
                }
                _ => Err(parse_err(path, n, "expected head<TAB>relation<TAB>tail")),
            }
        })
        .collect()
}

pub fn format_triples(magic: &str, triples: &[RawTriple]) -> String {
    let mut out = format!("{magic}\n");
    for t in triples {
        let _ = writeln!(out, "{}\t{}\t{}", t.head, t.relation, t.tail);
    }
    out
}

pub fn parse_ddi(path: &Path, text: &str) -> Result<Vec<(usize, String, String)>> {
    content_lines(path, text, DDI_MAGIC)?
        .map(|(n, line)| match line.split('\t').collect::<Vec<_>>().as_slice() {
            [a, b] if !a.is_empty() && !b.is_empty() => Ok((n, a.to_string(), b.to_string())),
            _ => Err(parse_err(path, n, "expected code_a<TAB>code_b")),
        })
        .collect()
}

pub fn format_ddi(pairs: &[(String, String)]) -> String {
    let mut out = format!("{DDI_MAGIC}\n");
    for (a, b) in pairs {
        let _ = writeln!(out, "{a}\t{b}");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RelationFamily {
    Ontology,
    Semantic,
    Ddi,
    PatientLink,
}

impl fmt::Display for RelationFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ontology => "ontology",
            Self::Semantic => "semantic",
            Self::Ddi => "ddi",
            Self::PatientLink => "patient-link",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relation {
    pub name: String,
    pub family: RelationFamily,
}

/// A resolved triple; endpoints are ids in the side's node space (merged
/// clinical ids or medicine ids).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: usize,
    pub rel: usize,
    pub tail: usize,
}

/// Relations of one KG side.
#[derive(Debug, Clone, PartialEq)]
pub struct SideRelations {
    pub side: KgSide,
    pub relations: Vec<Relation>,
    /// Parent → child.
    pub ontology: Vec<Triple>,
    /// Semantic triples and, on the medicine side, DDI edges in both
    /// directions.
    pub lateral: Vec<Triple>,
    /// `parent[child] = (parent, relation)`.
    pub parent: Vec<Option<(usize, usize)>>,
    /// Reversed-ontology relation for each ontology relation, when enabled.
    pub reversed: BTreeMap<usize, usize>,
    /// Lateral triples indexed by head.
    out_lateral: Vec<Vec<(usize, usize)>>,
}

impl SideRelations {
    pub fn n_nodes(&self) -> usize {
        self.parent.len()
    }

    pub fn patient_link(&self) -> usize {
        self.relations.len() - 1
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r.name == name)
    }

    pub fn family(&self, rel: usize) -> RelationFamily {
        self.relations[rel].family
    }

    pub fn parent_ids(&self) -> Vec<Option<usize>> {
        self.parent.iter().map(|p| p.map(|(u, _)| u)).collect()
    }

    /// Lateral (semantic / DDI) triples leaving `head`, as `(rel, tail)`.
    pub fn lateral_from(&self, head: usize) -> &[(usize, usize)] {
        &self.out_lateral[head]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RelationOptions {
    /// Adds child → parent edges under a distinct `<name>_rev` relation.
    pub reverse_ontology: bool,
}

/// Relation vocabularies, triples and the DDI adjacency matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationStore {
    pub clinical: SideRelations,
    pub medicine: SideRelations,
    /// Symmetric binary `|M_leaf| × |M_leaf|` matrix with zero diagonal.
    pub ddi: Tensor,
}

/// File locations of a relation set.
#[derive(Debug, Clone)]
pub struct RelationFiles<'a> {
    pub ontology: &'a Path,
    pub semantic: &'a Path,
    pub ddi: &'a Path,
}

impl RelationStore {
    pub fn side(&self, side: KgSide) -> &SideRelations {
        match side {
            KgSide::Clinical => &self.clinical,
            KgSide::Medicine => &self.medicine,
        }
    }

    pub fn load(files: RelationFiles<'_>, vocab: &Vocabularies, opts: RelationOptions) -> Result<Self> {
        let ont = parse_triples(files.ontology, &read_text(files.ontology)?, ONTOLOGY_MAGIC)?;
        let sem = parse_triples(files.semantic, &read_text(files.semantic)?, SEMANTIC_MAGIC)?;
        let ddi = parse_ddi(files.ddi, &read_text(files.ddi)?)?;
        Self::build(vocab, (files.ontology, &ont), (files.semantic, &sem), (files.ddi, &ddi), opts)
    }

    /// Resolves raw triples against `vocab`. Each input carries the path
    /// and line numbers used in error messages.
    pub fn build(
        vocab: &Vocabularies,
        ontology: (&Path, &[(usize, RawTriple)]),
        semantic: (&Path, &[(usize, RawTriple)]),
        ddi: (&Path, &[(usize, String, String)]),
        opts: RelationOptions,
    ) -> Result<Self> {
        let sides = [KgSide::Clinical, KgSide::Medicine];
        let mut names: BTreeMap<(KgSide, RelationFamily), BTreeSet<String>> = BTreeMap::new();
        let mut resolved: Vec<(KgSide, RelationFamily, usize, String, usize)> = Vec::new();
        for (family, (path, triples)) in [
            (RelationFamily::Ontology, ontology),
            (RelationFamily::Semantic, semantic),
        ] {
            for (n, t) in triples {
                let (hs, h) = vocab.resolve_kg_code(&t.head).map_err(|e| parse_err(path, *n, e.to_string()))?;
                let (ts, tl) = vocab.resolve_kg_code(&t.tail).map_err(|e| parse_err(path, *n, e.to_string()))?;
                if hs != ts {
                    return Err(parse_err(
                        path,
                        *n,
                        format!("triple joins a {hs} code with a {ts} code"),
                    ));
                }
                if t.relation == DDI_RELATION
                    || t.relation == PATIENT_LINK_RELATION
                    || t.relation.ends_with(REVERSE_SUFFIX)
                {
                    return Err(parse_err(path, *n, format!("relation name `{}` is reserved", t.relation)));
                }
                names.entry((hs, family)).or_default().insert(t.relation.clone());
                resolved.push((hs, family, h, t.relation.clone(), tl));
            }
        }
        for side in sides {
            let o = names.get(&(side, RelationFamily::Ontology));
            let s = names.get(&(side, RelationFamily::Semantic));
            if let (Some(o), Some(s)) = (o, s) {
                if let Some(dup) = o.intersection(s).next() {
                    return Err(CoreError::Invalid(format!(
                        "relation `{dup}` is used as both ontology and semantic"
                    )));
                }
            }
        }

        let build_side = |side: KgSide| -> Result<SideRelations> {
            let n_nodes = match side {
                KgSide::Clinical => vocab.clinical_len(),
                KgSide::Medicine => vocab.medicine.len(),
            };
            let mut relations = Vec::new();
            let push = |relations: &mut Vec<Relation>, name: String, family| {
                relations.push(Relation { name, family });
                relations.len() - 1
            };
            let ont_names: Vec<String> = names
                .get(&(side, RelationFamily::Ontology))
                .map(|s| s.iter().cloned().collect())
                .unwrap_or_default();
            let ont_ids: BTreeMap<String, usize> = ont_names
                .iter()
                .map(|nm| (nm.clone(), push(&mut relations, nm.clone(), RelationFamily::Ontology)))
                .collect();
            let mut reversed = BTreeMap::new();
            if opts.reverse_ontology {
                for nm in &ont_names {
                    let r = push(&mut relations, format!("{nm}{REVERSE_SUFFIX}"), RelationFamily::Ontology);
                    reversed.insert(ont_ids[nm], r);
                }
            }
            let sem_ids: BTreeMap<String, usize> = names
                .get(&(side, RelationFamily::Semantic))
                .into_iter()
                .flatten()
                .map(|nm| (nm.clone(), push(&mut relations, nm.clone(), RelationFamily::Semantic)))
                .collect();
            let ddi_rel = (side == KgSide::Medicine)
                .then(|| push(&mut relations, DDI_RELATION.to_string(), RelationFamily::Ddi));
            push(&mut relations, PATIENT_LINK_RELATION.to_string(), RelationFamily::PatientLink);

            let mut parent: Vec<Option<(usize, usize)>> = vec![None; n_nodes];
            let mut ontology = BTreeSet::new();
            let mut lateral = BTreeSet::new();
            for (s, family, h, rel, t) in &resolved {
                if *s != side {
                    continue;
                }
                match family {
                    RelationFamily::Ontology => {
                        let r = ont_ids[rel];
                        match parent[*t] {
                            Some((p, _)) if p != *h => {
                                return Err(CoreError::Invalid(format!(
                                    "ontology is not a forest: {side} node {t} has two parents"
                                )))
                            }
                            _ => parent[*t] = Some((*h, r)),
                        }
                        ontology.insert(Triple { head: *h, rel: r, tail: *t });
                    }
                    _ => {
                        lateral.insert(Triple { head: *h, rel: sem_ids[rel], tail: *t });
                    }
                }
            }
            check_acyclic(&parent.iter().map(|p| p.map(|(u, _)| u)).collect::<Vec<_>>())?;
            if let Some(r) = ddi_rel {
                let (path, pairs) = ddi;
                for (n, a, b) in pairs {
                    let id = |c: &str| {
                        vocab
                            .medicine
                            .id(c.strip_prefix("medicine:").unwrap_or(c))
                            .filter(|&i| vocab.medicine.is_leaf(i))
                            .ok_or_else(|| parse_err(path, *n, format!("{c} is not a leaf medicine code")))
                    };
                    let (a, b) = (id(a)?, id(b)?);
                    if a == b {
                        return Err(parse_err(path, *n, "a medicine cannot interact with itself"));
                    }
                    lateral.insert(Triple { head: a, rel: r, tail: b });
                    lateral.insert(Triple { head: b, rel: r, tail: a });
                }
            }
            let mut out_lateral = vec![Vec::new(); n_nodes];
            for t in &lateral {
                out_lateral[t.head].push((t.rel, t.tail));
            }
            Ok(SideRelations {
                side,
                relations,
                ontology: ontology.into_iter().collect(),
                lateral: lateral.into_iter().collect(),
                parent,
                reversed,
                out_lateral,
            })
        };
        let clinical = build_side(KgSide::Clinical)?;
        let medicine = build_side(KgSide::Medicine)?;

        let m = vocab.medicine.n_leaves();
        let mut matrix = Tensor::zeros(m, m);
        let ddi_rel = medicine.relation_id(DDI_RELATION);
        for t in medicine.lateral.iter().filter(|t| Some(t.rel) == ddi_rel) {
            matrix.data_mut()[t.head * m + t.tail] = 1.0;
        }
        Ok(Self {
            clinical,
            medicine,
            ddi: matrix,
        })
    }

    /// Number of DDI pairs (unordered).
    pub fn ddi_pair_count(&self) -> usize {
        self.ddi.data().iter().filter(|&&x| x == 1.0).count() / 2
    }
}

/// Errors if following parent links from any node revisits a node.
pub fn check_acyclic(parent: &[Option<usize>]) -> Result<()> {
    // 0 = unvisited, 1 = on current path, 2 = known to reach a root.
    let mut state = vec![0u8; parent.len()];
    for start in 0..parent.len() {
        let mut path = Vec::new();
        let mut v = start;
        loop {
            match state[v] {
                2 => break,
                1 => return Err(CoreError::Invalid(format!("ontology cycle through node {v}"))),
                _ => {}
            }
            state[v] = 1;
            path.push(v);
            match parent[v] {
                Some(p) if p < parent.len() => v = p,
                Some(p) => return Err(CoreError::Invalid(format!("parent {p} out of range"))),
                None => break,
            }
        }
        for u in path {
            state[u] = 2;
        }
    }
    Ok(())
}

pub fn write_relation_files(
    dir: &Path,
    ontology: &[RawTriple],
    semantic: &[RawTriple],
    ddi: &[(String, String)],
) -> Result<()> {
    write_text(&dir.join("ontology.tsv"), &format_triples(ONTOLOGY_MAGIC, ontology))?;
    write_text(&dir.join("semantic.tsv"), &format_triples(SEMANTIC_MAGIC, semantic))?;
    write_text(&dir.join("ddi.tsv"), &format_ddi(ddi))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::cohort::{EntityKind, VocabEntry, Vocabulary};

    pub(crate) fn vocab() -> Vocabularies {
        let v = |k, leaves: &[&str], anc: &[&str]| {
            Vocabulary::new(
                k,
                leaves
                    .iter()
                    .map(|c| VocabEntry::leaf(*c))
                    .chain(anc.iter().map(|c| VocabEntry::ancestor(*c)))
                    .collect(),
            )
            .unwrap()
        };
        Vocabularies {
            diagnosis: v(EntityKind::Diagnosis, &["d0", "d1", "d2"], &["dP", "dR"]),
            procedure: v(EntityKind::Procedure, &["p0", "p1"], &["pR"]),
            medicine: v(EntityKind::Medicine, &["m0", "m1", "m2", "m3"], &["mR"]),
            demographics: vec![v(EntityKind::Demographic("gender".into()), &["F", "M"], &[])],
        }
    }

    pub(crate) fn store(v: &Vocabularies, ddi: &[(&str, &str)], opts: RelationOptions) -> Result<RelationStore> {
        let t = |h: &str, r: &str, tl: &str| (1, RawTriple::new(h, r, tl));
        let ont = vec![
            t("dR", "isa", "dP"),
            t("dP", "isa", "d0"),
            t("dP", "isa", "d1"),
            t("dR", "isa", "d2"),
            t("pR", "pisa", "p0"),
            t("mR", "atc", "m0"),
            t("mR", "atc", "m1"),
        ];
        let sem = vec![t("d0", "treats", "p1"), t("d2", "causes", "d1")];
        let ddi: Vec<_> = ddi.iter().map(|(a, b)| (1, a.to_string(), b.to_string())).collect();
        let p = Path::new("x");
        RelationStore::build(v, (p, &ont), (p, &sem), (p, &ddi), opts)
    }

    #[test]
    fn relation_vocabularies_are_data_driven() {
        let v = vocab();
        let s = store(&v, &[("m0", "m2")], RelationOptions::default()).unwrap();
        let names: Vec<_> = s.clinical.relations.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["isa", "pisa", "causes", "treats", "patient_link"]);
        let names: Vec<_> = s.medicine.relations.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["atc", "ddi", "patient_link"]);
        assert_eq!(s.ddi_pair_count(), 1);
        assert_eq!(s.ddi.get(0, 2), 1.0);
        assert_eq!(s.ddi.get(2, 0), 1.0);
        assert_eq!(s.ddi.get(0, 0), 0.0);
        // The diagnosis space has 5 codes, so p1 has merged clinical id 6.
        assert_eq!(s.clinical.lateral_from(0), &[(3, 6)]);
    }

    #[test]
    fn reversed_ontology_adds_distinct_relations() {
        let v = vocab();
        let s = store(&v, &[], RelationOptions { reverse_ontology: true }).unwrap();
        let isa = s.clinical.relation_id("isa").unwrap();
        let rev = s.clinical.relation_id("isa_rev").unwrap();
        assert_eq!(s.clinical.reversed[&isa], rev);
        assert_eq!(s.clinical.family(rev), RelationFamily::Ontology);
    }

    #[test]
    fn invalid_relation_data_is_rejected() {
        let v = vocab();
        assert!(store(&v, &[("m0", "m0")], RelationOptions::default()).is_err());
        assert!(store(&v, &[("m0", "mR")], RelationOptions::default()).is_err());
        let p = Path::new("x");
        let cross = [(3, RawTriple::new("d0", "isa", "m0"))];
        let err = RelationStore::build(&v, (p, &cross), (p, &[]), (p, &[]), RelationOptions::default()).unwrap_err();
        assert!(err.to_string().contains("x:3"), "{err}");
        let two_parents = [(1, RawTriple::new("dR", "isa", "d0")), (2, RawTriple::new("dP", "isa", "d0"))];
        assert!(RelationStore::build(&v, (p, &two_parents), (p, &[]), (p, &[]), RelationOptions::default()).is_err());
        let cycle = [(1, RawTriple::new("dR", "isa", "dP")), (2, RawTriple::new("dP", "isa", "dR"))];
        assert!(RelationStore::build(&v, (p, &cycle), (p, &[]), (p, &[]), RelationOptions::default()).is_err());
    }

    #[test]
    fn file_formats_round_trip() {
        let triples = vec![RawTriple::new("a", "r", "b"), RawTriple::new("c", "s", "d")];
        let text = format_triples(SEMANTIC_MAGIC, &triples);
        let back: Vec<_> = parse_triples(Path::new("s"), &text, SEMANTIC_MAGIC)
            .unwrap()
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        assert_eq!(back, triples);
        assert!(parse_triples(Path::new("s"), &text, ONTOLOGY_MAGIC).is_err());
        let pairs = vec![("a".to_string(), "b".to_string())];
        let back = parse_ddi(Path::new("d"), &format_ddi(&pairs)).unwrap();
        assert_eq!((back[0].1.as_str(), back[0].2.as_str()), ("a", "b"));
    }
}
