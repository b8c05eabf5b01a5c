use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use medrec_tensor::Rng;
use rand::seq::SliceRandom;

use super::io::{content_lines, parse_err, read_text, write_text};
use super::Cohort;
use crate::error::{CoreError, Result};

pub const SPLIT_MAGIC: &str = "#medrec-split v1";

/// Train / validation / test partition of patient ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl SplitSpec {
    /// Sizes for `n` patients: `floor(2n/3)`, then half the remainder
    /// (rounded down) for validation, the rest for test.
    pub fn sizes(n: usize) -> (usize, usize, usize) {
        let train = 2 * n / 3;
        let val = (n - train) / 2;
        (train, val, n - train - val)
    }

    /// Checks the three lists partition the cohort's patient ids.
    pub fn validate(&self, cohort: &Cohort) -> Result<()> {
        let all: BTreeSet<&str> = cohort.patients.iter().map(|p| p.id.as_str()).collect();
        let mut seen = BTreeSet::new();
        for id in self.train.iter().chain(&self.validation).chain(&self.test) {
            if !all.contains(id.as_str()) {
                return Err(CoreError::UnknownCodes(vec![format!("patient {id}")]));
            }
            if !seen.insert(id.as_str()) {
                return Err(CoreError::Invalid(format!("patient {id} appears in more than one split")));
            }
        }
        if seen.len() != all.len() {
            return Err(CoreError::Invalid(format!(
                "split covers {} of {} patients",
                seen.len(),
                all.len()
            )));
        }
        Ok(())
    }
}

pub fn split_cohort(cohort: &Cohort, seed: u64) -> Result<SplitSpec> {
    let n = cohort.patients.len();
    if n < 3 {
        return Err(CoreError::Invalid(format!("need at least 3 patients to split, found {n}")));
    }
    let mut ids: Vec<String> = cohort.patients.iter().map(|p| p.id.clone()).collect();
    ids.shuffle(&mut Rng::seeded(seed));
    let (tr, va, _) = SplitSpec::sizes(n);
    let test = ids.split_off(tr + va);
    let validation = ids.split_off(tr);
    Ok(SplitSpec {
        train: ids,
        validation,
        test,
        seed,
    })
}

pub fn write_split(path: &Path, s: &SplitSpec) -> Result<()> {
    let mut out = format!("{SPLIT_MAGIC}\nseed\t{}\n", s.seed);
    for (name, ids) in [("train", &s.train), ("validation", &s.validation), ("test", &s.test)] {
        for id in ids {
            let _ = writeln!(out, "{name}\t{id}");
        }
    }
    write_text(path, &out)
}

pub fn read_split(path: &Path) -> Result<SplitSpec> {
    let text = read_text(path)?;
    let mut s = SplitSpec {
        train: vec![],
        validation: vec![],
        test: vec![],
        seed: 0,
    };
    for (n, line) in content_lines(path, &text, SPLIT_MAGIC)? {
        let (k, v) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(path, n, "expected `part<TAB>patient_id`"))?;
        match k {
            "seed" => s.seed = v.parse().map_err(|_| parse_err(path, n, "bad seed"))?,
            "train" => s.train.push(v.to_string()),
            "validation" => s.validation.push(v.to_string()),
            "test" => s.test.push(v.to_string()),
            _ => return Err(parse_err(path, n, format!("unknown split part `{k}`"))),
        }
    }
    Ok(s)
}
