use std::collections::HashMap;
use std::fmt;

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityKind {
    Diagnosis,
    Procedure,
    Medicine,
    /// A demographic field such as `gender` or `age`.
    Demographic(String),
}

impl EntityKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "diagnosis" => Some(Self::Diagnosis),
            "procedure" => Some(Self::Procedure),
            "medicine" => Some(Self::Medicine),
            _ => s
                .strip_prefix("demographic:")
                .filter(|f| !f.is_empty())
                .map(|f| Self::Demographic(f.to_string())),
        }
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Diagnosis => f.write_str("diagnosis"),
            Self::Procedure => f.write_str("procedure"),
            Self::Medicine => f.write_str("medicine"),
            Self::Demographic(field) => write!(f, "demographic:{field}"),
        }
    }
}

/// Bijection between code strings and contiguous ids for one entity kind.
///
/// Leaf codes (the originally observed level) always occupy ids
/// `0..n_leaves`; ontology ancestors follow. For medicines this makes a leaf
/// id equal to its index in the prediction vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    kind: EntityKind,
    codes: Vec<String>,
    index: HashMap<String, usize>,
    n_leaves: usize,
    /// Half-open numeric range `[lo, hi)` per code, used for binned fields.
    ranges: Vec<Option<(f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocabEntry {
    pub code: String,
    pub leaf: bool,
    pub range: Option<(f64, f64)>,
}

impl VocabEntry {
    pub fn leaf(code: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            leaf: true,
            range: None,
        }
    }

    pub fn ancestor(code: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            leaf: false,
            range: None,
        }
    }

    pub fn binned(code: impl Into<String>, lo: f64, hi: f64) -> Self {
        Self {
            code: code.into(),
            leaf: true,
            range: Some((lo, hi)),
        }
    }
}

impl Vocabulary {
    /// Builds a vocabulary; leaves keep their relative order and are placed
    /// before ancestors.
    pub fn new(kind: EntityKind, entries: Vec<VocabEntry>) -> Result<Self> {
        let (leaves, ancestors): (Vec<_>, Vec<_>) = entries.into_iter().partition(|e| e.leaf);
        if leaves.is_empty() {
            return Err(CoreError::Invalid(format!("{kind} vocabulary has no leaf codes")));
        }
        if matches!(kind, EntityKind::Demographic(_)) && !ancestors.is_empty() {
            return Err(CoreError::Invalid(format!(
                "{kind} vocabulary cannot have ancestor codes"
            )));
        }
        let n_leaves = leaves.len();
        let mut codes = Vec::new();
        let mut ranges = Vec::new();
        let mut index = HashMap::new();
        for e in leaves.into_iter().chain(ancestors) {
            if e.code.is_empty() || e.code.contains(['\t', ',', '\n']) || e.code == "-" {
                return Err(CoreError::Invalid(format!("invalid {kind} code {:?}", e.code)));
            }
            if let Some((lo, hi)) = e.range {
                if !(lo < hi) {
                    return Err(CoreError::Invalid(format!(
                        "{kind} code {} has empty range [{lo}, {hi})",
                        e.code
                    )));
                }
            }
            if index.insert(e.code.clone(), codes.len()).is_some() {
                return Err(CoreError::Invalid(format!("duplicate {kind} code {}", e.code)));
            }
            codes.push(e.code);
            ranges.push(e.range);
        }
        Ok(Self {
            kind,
            codes,
            index,
            n_leaves,
            ranges,
        })
    }

    pub fn kind(&self) -> &EntityKind {
        &self.kind
    }

    /// Augmented size: leaves plus ancestors.
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn n_leaves(&self) -> usize {
        self.n_leaves
    }

    pub fn is_leaf(&self, id: usize) -> bool {
        id < self.n_leaves
    }

    pub fn id(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn code(&self, id: usize) -> &str {
        &self.codes[id]
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn range(&self, id: usize) -> Option<(f64, f64)> {
        self.ranges[id]
    }

    pub fn entries(&self) -> impl Iterator<Item = VocabEntry> + '_ {
        self.codes.iter().enumerate().map(|(i, c)| VocabEntry {
            code: c.clone(),
            leaf: i < self.n_leaves,
            range: self.ranges[i],
        })
    }

    /// Resolves a raw demographic value: an exact code, or a number that
    /// falls inside one code's range.
    pub fn resolve_value(&self, value: &str) -> Option<usize> {
        if let Some(id) = self.id(value) {
            return Some(id);
        }
        let x: f64 = value.parse().ok()?;
        self.ranges
            .iter()
            .position(|r| matches!(r, Some((lo, hi)) if *lo <= x && x < *hi))
    }
}

/// All vocabularies of a cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabularies {
    pub diagnosis: Vocabulary,
    pub procedure: Vocabulary,
    pub medicine: Vocabulary,
    /// One vocabulary per demographic field, in cohort column order.
    pub demographics: Vec<Vocabulary>,
}

impl Vocabularies {
    /// Size of the merged clinical space: diagnoses then procedures.
    pub fn clinical_len(&self) -> usize {
        self.diagnosis.len() + self.procedure.len()
    }

    /// Merged clinical id of a procedure id.
    pub fn procedure_offset(&self) -> usize {
        self.diagnosis.len()
    }

    pub fn demographic_fields(&self) -> Vec<&str> {
        self.demographics
            .iter()
            .map(|v| match v.kind() {
                EntityKind::Demographic(f) => f.as_str(),
                _ => unreachable!("demographic vocabulary of non-demographic kind"),
            })
            .collect()
    }

    /// Looks up a relation-file code, which may carry an explicit
    /// `diagnosis:` / `procedure:` / `medicine:` prefix. Returns the KG side
    /// and the id in that side's node space (merged ids for clinical codes).
    pub fn resolve_kg_code(&self, raw: &str) -> Result<(KgSide, usize)> {
        let off = self.procedure_offset();
        if let Some((kind, code)) = raw.split_once(':') {
            let hit = match kind {
                "diagnosis" => self.diagnosis.id(code).map(|i| (KgSide::Clinical, i)),
                "procedure" => self.procedure.id(code).map(|i| (KgSide::Clinical, off + i)),
                "medicine" => self.medicine.id(code).map(|i| (KgSide::Medicine, i)),
                _ => None,
            };
            if let Some(h) = hit {
                return Ok(h);
            }
        }
        let hits: Vec<(KgSide, usize)> = [
            self.diagnosis.id(raw).map(|i| (KgSide::Clinical, i)),
            self.procedure.id(raw).map(|i| (KgSide::Clinical, off + i)),
            self.medicine.id(raw).map(|i| (KgSide::Medicine, i)),
        ]
        .into_iter()
        .flatten()
        .collect();
        match hits.as_slice() {
            [one] => Ok(*one),
            [] => Err(CoreError::UnknownCodes(vec![raw.to_string()])),
            _ => Err(CoreError::Invalid(format!(
                "code {raw} is ambiguous; prefix it with its kind, e.g. diagnosis:{raw}"
            ))),
        }
    }

    /// Order-sensitive FNV-1a fingerprint over every vocabulary.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::default();
        for v in [&self.diagnosis, &self.procedure, &self.medicine]
            .into_iter()
            .chain(&self.demographics)
        {
            h.write(v.kind().to_string().as_bytes());
            h.write(&(v.n_leaves() as u64).to_le_bytes());
            for c in v.codes() {
                h.write(c.as_bytes());
                h.write(&[0]);
            }
        }
        h.finish()
    }
}

/// Which of the two per-admission graphs a code belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KgSide {
    Clinical,
    Medicine,
}

impl fmt::Display for KgSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KgSide::Clinical => "clinical",
            KgSide::Medicine => "medicine",
        })
    }
}

/// 64-bit FNV-1a.
#[derive(Debug, Clone, Copy)]
pub struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}
