//! Line-oriented text formats for vocabularies and cohorts.
//!
//! Vocabulary file:
//!
//! ```text
//! #medrec-vocab v1
//! kind<TAB>code<TAB>leaf[<TAB>lo<TAB>hi]
//! ```
//!
//! `kind` is `diagnosis`, `procedure`, `medicine` or `demographic:<field>`;
//! `leaf` is `1` for observed codes and `0` for ontology ancestors. Binned
//! demographic codes carry a half-open numeric range `[lo, hi)`.
//!
//! Cohort file, one admission per line:
//!
//! ```text
//! #medrec-cohort v1
//! patient_id<TAB>visit<TAB>diagnoses<TAB>procedures<TAB>medicines<TAB><field>...
//! P1<TAB>1<TAB>D1,D7<TAB>P3<TAB>M2,M5<TAB>F<TAB>34
//! ```
//!
//! Code lists are comma-separated, `-` for an empty list. Visits are
//! numbered from 1 and must be contiguous per patient; lines may appear in
//! any order. Demographic values are codes or numbers inside a binned
//! code's range. Lines starting with `#` after the magic line are comments.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use super::vocab::{EntityKind, VocabEntry, Vocabularies, Vocabulary};
use super::{Admission, Cohort, Patient};
use crate::error::{CoreError, Result};

pub const VOCAB_MAGIC: &str = "#medrec-vocab v1";
pub const COHORT_MAGIC: &str = "#medrec-cohort v1";

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

pub(crate) fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> CoreError {
    CoreError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Numbered content lines after the magic line, skipping blanks and
/// comments. Errors if the magic line is missing.
pub(crate) fn content_lines<'a>(
    path: &'a Path,
    text: &'a str,
    magic: &str,
) -> Result<impl Iterator<Item = (usize, &'a str)> + 'a> {
    let mut lines = text.lines();
    match lines.next() {
        Some(first) if first.trim_end() == magic => {}
        Some(_) => return Err(parse_err(path, 1, format!("expected header `{magic}`"))),
        None => return Err(parse_err(path, 1, "empty file")),
    }
    Ok(lines
        .enumerate()
        .map(|(i, l)| (i + 2, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#')))
}

pub fn read_vocabularies(path: &Path) -> Result<Vocabularies> {
    parse_vocabularies(path, &read_text(path)?)
}

pub(crate) fn parse_vocabularies(path: &Path, text: &str) -> Result<Vocabularies> {
    let mut groups: Vec<(EntityKind, Vec<VocabEntry>)> = Vec::new();
    for (n, line) in content_lines(path, text, VOCAB_MAGIC)? {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 && f.len() != 5 {
            return Err(parse_err(path, n, format!("expected 3 or 5 fields, found {}", f.len())));
        }
        let kind = EntityKind::parse(f[0])
            .ok_or_else(|| parse_err(path, n, format!("unknown kind `{}`", f[0])))?;
        let leaf = match f[2] {
            "1" => true,
            "0" => false,
            other => return Err(parse_err(path, n, format!("leaf flag must be 0 or 1, found `{other}`"))),
        };
        let range = if f.len() == 5 {
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| parse_err(path, n, format!("bad range bound `{s}`")))
            };
            Some((num(f[3])?, num(f[4])?))
        } else {
            None
        };
        let entry = VocabEntry {
            code: f[1].to_string(),
            leaf,
            range,
        };
        match groups.iter_mut().find(|(k, _)| *k == kind) {
            Some((_, v)) => v.push(entry),
            None => groups.push((kind, vec![entry])),
        }
    }
    let mut take = |kind: &EntityKind| -> Result<Vocabulary> {
        let pos = groups
            .iter()
            .position(|(k, _)| k == kind)
            .ok_or_else(|| parse_err(path, 1, format!("no {kind} codes")))?;
        let (k, entries) = groups.remove(pos);
        Vocabulary::new(k, entries).map_err(|e| parse_err(path, 1, e.to_string()))
    };
    let diagnosis = take(&EntityKind::Diagnosis)?;
    let procedure = take(&EntityKind::Procedure)?;
    let medicine = take(&EntityKind::Medicine)?;
    let demographics = groups
        .into_iter()
        .map(|(k, e)| Vocabulary::new(k, e).map_err(|e| parse_err(path, 1, e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    Ok(Vocabularies {
        diagnosis,
        procedure,
        medicine,
        demographics,
    })
}

pub fn format_vocabularies(v: &Vocabularies) -> String {
    let mut out = format!("{VOCAB_MAGIC}\n");
    for voc in [&v.diagnosis, &v.procedure, &v.medicine]
        .into_iter()
        .chain(&v.demographics)
    {
        for e in voc.entries() {
            let _ = write!(out, "{}\t{}\t{}", voc.kind(), e.code, u8::from(e.leaf));
            if let Some((lo, hi)) = e.range {
                let _ = write!(out, "\t{lo}\t{hi}");
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_vocabularies(path: &Path, v: &Vocabularies) -> Result<()> {
    write_text(path, &format_vocabularies(v))
}

pub fn read_cohort(vocab_path: &Path, cohort_path: &Path) -> Result<Cohort> {
    let vocab = read_vocabularies(vocab_path)?;
    parse_cohort(cohort_path, &read_text(cohort_path)?, vocab)
}

/// Parses cohort text against known vocabularies. Also used for
/// single-patient inputs to `recommend`, where medicine lists of the final
/// visit may be `-`.
pub fn parse_cohort(path: &Path, text: &str, vocab: Vocabularies) -> Result<Cohort> {
    let mut lines = content_lines(path, text, COHORT_MAGIC)?;
    let (hn, header) = lines.next().ok_or_else(|| parse_err(path, 2, "no patients"))?;
    let cols: Vec<&str> = header.split('\t').collect();
    let fixed = ["patient_id", "visit", "diagnoses", "procedures", "medicines"];
    if cols.len() < fixed.len() || cols[..fixed.len()] != fixed {
        return Err(parse_err(path, hn, format!("header must start with {}", fixed.join("\t"))));
    }
    let fields = vocab.demographic_fields();
    let extra = &cols[fixed.len()..];
    // Column position of each vocabulary field.
    let field_cols = fields
        .iter()
        .map(|f| {
            extra
                .iter()
                .position(|c| c == f)
                .ok_or_else(|| parse_err(path, hn, format!("missing demographic column `{f}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    if extra.len() != fields.len() {
        return Err(parse_err(
            path,
            hn,
            format!("header has {} demographic columns, vocabulary defines {}", extra.len(), fields.len()),
        ));
    }

    let mut order: Vec<String> = Vec::new();
    let mut visits: HashMap<String, BTreeMap<usize, (usize, Admission)>> = HashMap::new();
    for (n, line) in lines {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != cols.len() {
            return Err(parse_err(path, n, format!("expected {} fields, found {}", cols.len(), f.len())));
        }
        let pid = f[0].to_string();
        if pid.is_empty() {
            return Err(parse_err(path, n, "empty patient id"));
        }
        let visit: usize = f[1]
            .parse()
            .ok()
            .filter(|&v| v >= 1)
            .ok_or_else(|| parse_err(path, n, format!("visit index must be a positive integer, found `{}`", f[1])))?;
        let codes = |s: &str, v: &Vocabulary| -> Result<BTreeSet<usize>> {
            if s == "-" {
                return Ok(BTreeSet::new());
            }
            let mut out = BTreeSet::new();
            let mut unknown = Vec::new();
            for c in s.split(',') {
                match v.id(c) {
                    Some(i) if v.is_leaf(i) => {
                        out.insert(i);
                    }
                    Some(_) => {
                        return Err(parse_err(path, n, format!("{} code {c} is not a leaf code", v.kind())))
                    }
                    None => unknown.push(c),
                }
            }
            if unknown.is_empty() {
                Ok(out)
            } else {
                Err(parse_err(path, n, format!("unknown {} codes: {}", v.kind(), unknown.join(", "))))
            }
        };
        let adm = Admission {
            diagnoses: codes(f[2], &vocab.diagnosis)?,
            procedures: codes(f[3], &vocab.procedure)?,
            medicines: codes(f[4], &vocab.medicine)?,
            demographics: field_cols
                .iter()
                .zip(&vocab.demographics)
                .map(|(&c, v)| {
                    let raw = f[fixed.len() + c];
                    v.resolve_value(raw)
                        .ok_or_else(|| parse_err(path, n, format!("unknown {} value `{raw}`", v.kind())))
                })
                .collect::<Result<Vec<_>>>()?,
        };
        if adm.diagnoses.is_empty() && adm.procedures.is_empty() {
            return Err(parse_err(path, n, "empty admission: no diagnosis or procedure codes"));
        }
        let entry = visits.entry(pid.clone()).or_insert_with(|| {
            order.push(pid.clone());
            BTreeMap::new()
        });
        if entry.insert(visit, (n, adm)).is_some() {
            return Err(parse_err(path, n, format!("duplicate visit {visit} for patient {pid}")));
        }
    }
    if order.is_empty() {
        return Err(parse_err(path, hn, "no patients"));
    }
    let mut patients = Vec::with_capacity(order.len());
    for pid in order {
        let vs = visits.remove(&pid).expect("patient recorded");
        let mut admissions = Vec::with_capacity(vs.len());
        for (expected, (visit, (n, adm))) in (1..).zip(vs) {
            if visit != expected {
                return Err(parse_err(path, n, format!("patient {pid} is missing visit {expected}")));
            }
            admissions.push(adm);
        }
        patients.push(Patient { id: pid, admissions });
    }
    Cohort::new(vocab, patients)
}

pub fn format_cohort(c: &Cohort) -> String {
    let v = &c.vocab;
    let mut out = format!("{COHORT_MAGIC}\npatient_id\tvisit\tdiagnoses\tprocedures\tmedicines");
    for f in v.demographic_fields() {
        out.push('\t');
        out.push_str(f);
    }
    out.push('\n');
    let list = |ids: &BTreeSet<usize>, voc: &Vocabulary| {
        if ids.is_empty() {
            "-".to_string()
        } else {
            ids.iter().map(|&i| voc.code(i)).collect::<Vec<_>>().join(",")
        }
    };
    for p in &c.patients {
        for (t, a) in p.admissions.iter().enumerate() {
            let _ = write!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                p.id,
                t + 1,
                list(&a.diagnoses, &v.diagnosis),
                list(&a.procedures, &v.procedure),
                list(&a.medicines, &v.medicine)
            );
            for (&id, voc) in a.demographics.iter().zip(&v.demographics) {
                out.push('\t');
                out.push_str(voc.code(id));
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_cohort(path: &Path, c: &Cohort) -> Result<()> {
    write_text(path, &format_cohort(c))
}
