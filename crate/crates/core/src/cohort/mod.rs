//! EHR data model: vocabularies, admissions, cohorts, multi-hot encoding,
//! splitting and synthetic generation.

pub(crate) mod io;
mod split;
pub mod synthetic;
mod vocab;

use std::collections::BTreeSet;
use std::fmt;

pub use io::{
    format_cohort, format_vocabularies, parse_cohort, read_cohort, read_vocabularies, write_cohort,
    write_vocabularies, COHORT_MAGIC, VOCAB_MAGIC,
};
pub use split::{read_split, split_cohort, write_split, SplitSpec, SPLIT_MAGIC};
pub use vocab::{EntityKind, Fnv, KgSide, VocabEntry, Vocabularies, Vocabulary};

use crate::error::{CoreError, Result};

/// One hospital admission. Code sets hold leaf ids of their vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Admission {
    pub diagnoses: BTreeSet<usize>,
    pub procedures: BTreeSet<usize>,
    pub medicines: BTreeSet<usize>,
    /// One id per demographic field, in vocabulary order.
    pub demographics: Vec<usize>,
}

impl Admission {
    /// Diagnoses and procedures in the merged clinical id space.
    pub fn clinical_ids(&self, vocab: &Vocabularies) -> BTreeSet<usize> {
        let off = vocab.procedure_offset();
        self.diagnoses
            .iter()
            .copied()
            .chain(self.procedures.iter().map(|p| p + off))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patient {
    pub id: String,
    pub admissions: Vec<Admission>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub vocab: Vocabularies,
    pub patients: Vec<Patient>,
}

impl Cohort {
    /// Checks every id against the vocabularies and the per-admission
    /// shape rules.
    pub fn new(vocab: Vocabularies, patients: Vec<Patient>) -> Result<Self> {
        let c = Self { vocab, patients };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patients.is_empty() {
            return Err(CoreError::Invalid("no patients".into()));
        }
        let mut seen = BTreeSet::new();
        for p in &self.patients {
            if !seen.insert(p.id.as_str()) {
                return Err(CoreError::Invalid(format!("duplicate patient id {}", p.id)));
            }
            if p.admissions.is_empty() {
                return Err(CoreError::Invalid(format!("patient {} has no admissions", p.id)));
            }
            for (t, a) in p.admissions.iter().enumerate() {
                validate_admission(&self.vocab, a)
                    .map_err(|m| CoreError::Invalid(format!("patient {} visit {}: {m}", p.id, t + 1)))?;
            }
        }
        Ok(())
    }

    pub fn patient(&self, id: &str) -> Option<&Patient> {
        self.patients.iter().find(|p| p.id == id)
    }

    pub fn n_admissions(&self) -> usize {
        self.patients.iter().map(|p| p.admissions.len()).sum()
    }

    /// Sub-cohort holding the given patients, in the given order.
    pub fn subset(&self, ids: &[String]) -> Result<Cohort> {
        let patients = ids
            .iter()
            .map(|id| {
                self.patient(id)
                    .cloned()
                    .ok_or_else(|| CoreError::UnknownCodes(vec![format!("patient {id}")]))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Cohort {
            vocab: self.vocab.clone(),
            patients,
        })
    }

    pub fn stats(&self) -> CohortStats {
        let adms: Vec<&Admission> = self.patients.iter().flat_map(|p| &p.admissions).collect();
        let per_kind = |vocab: &Vocabulary, f: &dyn Fn(&Admission) -> usize| KindStats {
            original: vocab.n_leaves(),
            augmented: vocab.len(),
            mean_per_admission: adms.iter().map(|a| f(a)).sum::<usize>() as f64 / adms.len().max(1) as f64,
            max_per_admission: adms.iter().map(|a| f(a)).max().unwrap_or(0),
        };
        CohortStats {
            patients: self.patients.len(),
            admissions: adms.len(),
            mean_admissions: adms.len() as f64 / self.patients.len().max(1) as f64,
            max_admissions: self.patients.iter().map(|p| p.admissions.len()).max().unwrap_or(0),
            diagnoses: per_kind(&self.vocab.diagnosis, &|a| a.diagnoses.len()),
            procedures: per_kind(&self.vocab.procedure, &|a| a.procedures.len()),
            medicines: per_kind(&self.vocab.medicine, &|a| a.medicines.len()),
            demographics: self
                .vocab
                .demographics
                .iter()
                .map(|v| (self.vocab_field_name(v), v.len()))
                .collect(),
        }
    }

    fn vocab_field_name(&self, v: &Vocabulary) -> String {
        match v.kind() {
            EntityKind::Demographic(f) => f.clone(),
            k => k.to_string(),
        }
    }
}

fn validate_admission(vocab: &Vocabularies, a: &Admission) -> std::result::Result<(), String> {
    if a.diagnoses.is_empty() && a.procedures.is_empty() {
        return Err("admission has no diagnosis or procedure codes".into());
    }
    for (name, set, v) in [
        ("diagnosis", &a.diagnoses, &vocab.diagnosis),
        ("procedure", &a.procedures, &vocab.procedure),
        ("medicine", &a.medicines, &vocab.medicine),
    ] {
        if let Some(bad) = set.iter().find(|&&i| !v.is_leaf(i)) {
            return Err(format!("{name} id {bad} is not a leaf code"));
        }
    }
    if a.demographics.len() != vocab.demographics.len() {
        return Err(format!(
            "expected {} demographic values, found {}",
            vocab.demographics.len(),
            a.demographics.len()
        ));
    }
    for (k, (&id, v)) in a.demographics.iter().zip(&vocab.demographics).enumerate() {
        if id >= v.len() {
            return Err(format!("demographic field {k} id {id} out of range"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KindStats {
    /// Leaf vocabulary size.
    pub original: usize,
    /// Leaves plus ontology ancestors.
    pub augmented: usize,
    pub mean_per_admission: f64,
    pub max_per_admission: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortStats {
    pub patients: usize,
    pub admissions: usize,
    pub mean_admissions: f64,
    pub max_admissions: usize,
    pub diagnoses: KindStats,
    pub procedures: KindStats,
    pub medicines: KindStats,
    pub demographics: Vec<(String, usize)>,
}

impl fmt::Display for CohortStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28}{:>12}", "# patients", self.patients)?;
        writeln!(f, "{:<28}{:>12}", "# admissions", self.admissions)?;
        writeln!(f, "{:<28}{:>12.2}", "avg # admissions", self.mean_admissions)?;
        writeln!(f, "{:<28}{:>12}", "max # admissions", self.max_admissions)?;
        writeln!(
            f,
            "{:<16}{:>10}{:>11}{:>12}{:>12}",
            "", "original", "augmented", "avg/adm", "max/adm"
        )?;
        for (name, k) in [
            ("diagnoses", &self.diagnoses),
            ("procedures", &self.procedures),
            ("medicines", &self.medicines),
        ] {
            writeln!(
                f,
                "{:<16}{:>10}{:>11}{:>12.2}{:>12}",
                name, k.original, k.augmented, k.mean_per_admission, k.max_per_admission
            )?;
        }
        for (name, n) in &self.demographics {
            writeln!(f, "{:<16}{:>10}", name, n)?;
        }
        Ok(())
    }
}

/// Multi-hot vector with ones exactly at `ids`.
pub fn encode_multi_hot(ids: &BTreeSet<usize>, size: usize) -> Result<Vec<f64>> {
    let mut v = vec![0.0; size];
    for &i in ids {
        if i >= size {
            return Err(CoreError::Invalid(format!("id {i} out of range for size {size}")));
        }
        v[i] = 1.0;
    }
    Ok(v)
}

/// Inverse of [`encode_multi_hot`]: indices of entries equal to 1.
pub fn decode_multi_hot(v: &[f64]) -> BTreeSet<usize> {
    v.iter()
        .enumerate()
        .filter(|(_, &x)| x == 1.0)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn tiny_vocab() -> Vocabularies {
        let v = |k, codes: &[&str]| {
            Vocabulary::new(k, codes.iter().map(|c| VocabEntry::leaf(*c)).collect()).unwrap()
        };
        Vocabularies {
            diagnosis: v(EntityKind::Diagnosis, &["d0", "d1", "d2"]),
            procedure: v(EntityKind::Procedure, &["p0", "p1"]),
            medicine: v(EntityKind::Medicine, &["m0", "m1", "m2", "m3"]),
            demographics: vec![v(EntityKind::Demographic("gender".into()), &["F", "M"])],
        }
    }

    #[test]
    fn multi_hot_examples() {
        assert_eq!(encode_multi_hot(&[0, 2].into(), 4).unwrap(), vec![1., 0., 1., 0.]);
        assert_eq!(encode_multi_hot(&BTreeSet::new(), 3).unwrap(), vec![0.; 3]);
        assert!(encode_multi_hot(&[3].into(), 3).is_err());
    }

    #[test]
    fn merged_clinical_space_is_sum_of_sizes() {
        let v = tiny_vocab();
        assert_eq!(v.clinical_len(), v.diagnosis.len() + v.procedure.len());
        let a = Admission {
            diagnoses: [2].into(),
            procedures: [0, 1].into(),
            ..Default::default()
        };
        let ids = a.clinical_ids(&v);
        assert_eq!(ids, [2, 3, 4].into());
        assert!(encode_multi_hot(&ids, v.clinical_len()).is_ok());
    }

    #[test]
    fn empty_cohort_is_rejected() {
        let err = Cohort::new(tiny_vocab(), vec![]).unwrap_err();
        assert!(err.to_string().contains("no patients"));
    }

    #[test]
    fn admission_without_clinical_codes_is_rejected() {
        let p = Patient {
            id: "a".into(),
            admissions: vec![Admission {
                medicines: [0].into(),
                demographics: vec![0],
                ..Default::default()
            }],
        };
        assert!(Cohort::new(tiny_vocab(), vec![p]).is_err());
    }

    proptest! {
        #[test]
        fn multi_hot_round_trip(ids in proptest::collection::btree_set(0usize..50, 0..20)) {
            let v = encode_multi_hot(&ids, 50).unwrap();
            prop_assert_eq!(decode_multi_hot(&v), ids);
        }
    }
}
