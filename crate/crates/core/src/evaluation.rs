//! Per-patient scoring, the bootstrap protocol and report rendering.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use medrec_tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, Patient};
use crate::config::{HyperParams, PairConvention};
use crate::error::{CoreError, Result};
use crate::exec;
use crate::metrics::{avg_meds, ddi_rate, f1, jaccard, prauc};

/// Predictions and ground truth for every admission of one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientOutcome {
    pub patient_id: String,
    pub scores: Vec<Vec<f64>>,
    pub predicted: Vec<BTreeSet<usize>>,
    pub truth: Vec<BTreeSet<usize>>,
}

impl PatientOutcome {
    /// Predictions equal to the recorded prescriptions.
    pub fn ground_truth(patient: &Patient, n_medicines: usize) -> Self {
        let truth: Vec<BTreeSet<usize>> = patient.admissions.iter().map(|a| a.medicines.clone()).collect();
        Self {
            patient_id: patient.id.clone(),
            scores: truth
                .iter()
                .map(|s| (0..n_medicines).map(|i| if s.contains(&i) { 1.0 } else { 0.0 }).collect())
                .collect(),
            predicted: truth.clone(),
            truth,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub rounds: usize,
    pub fraction: f64,
    pub seed: u64,
    pub with_replacement: bool,
    pub empty_match: f64,
    pub pairs: PairConvention,
}

impl EvalOptions {
    pub fn from_hyper(hp: &HyperParams) -> Self {
        Self {
            rounds: hp.eval_rounds,
            fraction: hp.eval_fraction,
            seed: hp.seed,
            with_replacement: hp.bootstrap_replacement,
            empty_match: hp.empty_match,
            pairs: hp.ddi_pairs,
        }
    }
}

/// Visit-averaged metrics of one patient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatientScore {
    pub jaccard: f64,
    pub f1: f64,
    /// `None` when no visit has a positive label.
    pub prauc: Option<f64>,
    pub ddi_rate: f64,
    pub avg_meds: f64,
}

pub fn score_patient(o: &PatientOutcome, ddi: &Tensor, opts: &EvalOptions) -> Result<PatientScore> {
    let t = o.truth.len();
    if t == 0 || o.predicted.len() != t || o.scores.len() != t {
        return Err(CoreError::Invalid(format!(
            "patient {}: {} predictions, {} score rows, {} truths",
            o.patient_id,
            o.predicted.len(),
            o.scores.len(),
            t
        )));
    }
    let mean = |f: &dyn Fn(usize) -> f64| (0..t).map(f).sum::<f64>() / t as f64;
    let pr: Vec<f64> = (0..t).filter_map(|v| prauc(&o.scores[v], &o.truth[v])).collect();
    if pr.len() < t {
        log::warn!(
            "patient {}: {} visit(s) without prescriptions skipped for PRAUC",
            o.patient_id,
            t - pr.len()
        );
    }
    Ok(PatientScore {
        jaccard: mean(&|v| jaccard(&o.predicted[v], &o.truth[v], opts.empty_match)),
        f1: mean(&|v| f1(&o.predicted[v], &o.truth[v], opts.empty_match)),
        prauc: (!pr.is_empty()).then(|| pr.iter().sum::<f64>() / pr.len() as f64),
        ddi_rate: ddi_rate(&o.predicted, ddi, opts.pairs),
        avg_meds: avg_meds(&o.predicted),
    })
}

/// Cohort-level values of the five metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub ddi_rate: f64,
    pub jaccard: f64,
    pub f1: f64,
    pub prauc: f64,
    pub avg_meds: f64,
}

impl MetricValues {
    fn get(&self, k: usize) -> f64 {
        [self.ddi_rate, self.jaccard, self.f1, self.prauc, self.avg_meds][k]
    }
}

/// Means over patients. PRAUC averages only patients that have one.
pub fn aggregate(scores: &[&PatientScore]) -> MetricValues {
    let n = scores.len().max(1) as f64;
    let pr: Vec<f64> = scores.iter().filter_map(|s| s.prauc).collect();
    MetricValues {
        ddi_rate: scores.iter().map(|s| s.ddi_rate).sum::<f64>() / n,
        jaccard: scores.iter().map(|s| s.jaccard).sum::<f64>() / n,
        f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
        prauc: if pr.is_empty() { 0.0 } else { pr.iter().sum::<f64>() / pr.len() as f64 },
        avg_meds: scores.iter().map(|s| s.avg_meds).sum::<f64>() / n,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation over rounds.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub ddi_rate: Summary,
    pub jaccard: Summary,
    pub f1: Summary,
    pub prauc: Summary,
    pub avg_meds: Summary,
    pub rounds: usize,
    pub fraction: f64,
    pub seed: u64,
    pub with_replacement: bool,
    pub n_patients: usize,
    pub sample_size: usize,
    pub per_round: Vec<MetricValues>,
}

pub const METRIC_NAMES: [&str; 5] = ["DDI Rate", "Jaccard", "F1", "PRAUC", "Avg.#Meds"];

impl MetricsReport {
    pub fn summaries(&self) -> [Summary; 5] {
        [self.ddi_rate, self.jaccard, self.f1, self.prauc, self.avg_meds]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CoreError::Invalid(format!("metrics report: {e}")))
    }
}

/// Aligned table with one row per report.
pub fn format_table(reports: &[&MetricsReport]) -> String {
    let label_w = reports.iter().map(|r| r.label.len()).chain(["Method".len()]).max().unwrap_or(6);
    let cell = |s: &Summary| format!("{:.4} ± {:.4}", s.mean, s.std);
    let col_w = 17;
    let mut out = String::new();
    let _ = write!(out, "{:<label_w$}", "Method");
    for name in METRIC_NAMES {
        let _ = write!(out, "  {name:>col_w$}");
    }
    out.push('\n');
    out.push_str(&"-".repeat(label_w + METRIC_NAMES.len() * (col_w + 2)));
    out.push('\n');
    for r in reports {
        let _ = write!(out, "{:<label_w$}", r.label);
        for s in r.summaries().iter() {
            let _ = write!(out, "  {:>col_w$}", cell(s));
        }
        out.push('\n');
    }
    out
}

/// Scores `outcomes` over repeated random subsets of patients.
pub fn bootstrap_evaluate(label: &str, outcomes: &[PatientOutcome], ddi: &Tensor, opts: &EvalOptions) -> Result<MetricsReport> {
    if outcomes.is_empty() {
        return Err(CoreError::Invalid("empty test set".into()));
    }
    if opts.rounds == 0 || !(opts.fraction > 0.0 && opts.fraction <= 1.0) {
        return Err(CoreError::Config(format!(
            "bootstrap needs rounds ≥ 1 and fraction in (0, 1], got {} and {}",
            opts.rounds, opts.fraction
        )));
    }
    let scores = exec::try_map(outcomes, |o| score_patient(o, ddi, opts))?;
    let n = scores.len();
    let k = ((opts.fraction * n as f64).floor() as usize).max(1);
    let rounds: Vec<u64> = (0..opts.rounds as u64).collect();
    let per_round = exec::map(&rounds, |&r| {
        let mut rng = Rng::stream(opts.seed, r);
        let idx: Vec<usize> = if opts.with_replacement {
            (0..k).map(|_| rng.below(n)).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, k).into_vec()
        };
        let picked: Vec<&PatientScore> = idx.iter().map(|&i| &scores[i]).collect();
        aggregate(&picked)
    });
    let summary = |m: usize| Summary::of(&per_round.iter().map(|v| v.get(m)).collect::<Vec<_>>());
    Ok(MetricsReport {
        label: label.to_string(),
        ddi_rate: summary(0),
        jaccard: summary(1),
        f1: summary(2),
        prauc: summary(3),
        avg_meds: summary(4),
        rounds: opts.rounds,
        fraction: opts.fraction,
        seed: opts.seed,
        with_replacement: opts.with_replacement,
        n_patients: n,
        sample_size: k,
        per_round,
    })
}

/// Predicts the `k` most frequent training medicines for every visit,
/// with `k` the rounded mean training prescription size.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyPrior {
    pub counts: Vec<usize>,
    pub k: usize,
    pub set: BTreeSet<usize>,
    /// Relative frequencies, used as ranking scores.
    pub scores: Vec<f64>,
}

impl FrequencyPrior {
    pub fn fit(train: &Cohort) -> Self {
        let m = train.vocab.medicine.n_leaves();
        let mut counts = vec![0usize; m];
        let mut visits = 0usize;
        let mut total = 0usize;
        for a in train.patients.iter().flat_map(|p| &p.admissions) {
            visits += 1;
            total += a.medicines.len();
            for &i in &a.medicines {
                counts[i] += 1;
            }
        }
        let k = if visits == 0 { 0 } else { (total as f64 / visits as f64).round() as usize };
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        let set = order.into_iter().take(k).collect();
        let scores = counts.iter().map(|&c| c as f64 / visits.max(1) as f64).collect();
        Self { counts, k, set, scores }
    }

    pub fn outcome(&self, patient: &Patient) -> PatientOutcome {
        let t = patient.admissions.len();
        PatientOutcome {
            patient_id: patient.id.clone(),
            scores: vec![self.scores.clone(); t],
            predicted: vec![self.set.clone(); t],
            truth: patient.admissions.iter().map(|a| a.medicines.clone()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::small_data;

    fn outcome(id: &str, pred: &[&[usize]], truth: &[&[usize]]) -> PatientOutcome {
        let to = |v: &[&[usize]]| v.iter().map(|s| s.iter().copied().collect()).collect::<Vec<BTreeSet<usize>>>();
        let predicted = to(pred);
        PatientOutcome {
            patient_id: id.into(),
            scores: predicted
                .iter()
                .map(|s| (0..5).map(|i| if s.contains(&i) { 0.9 } else { 0.1 }).collect())
                .collect(),
            predicted,
            truth: to(truth),
        }
    }

    fn opts() -> EvalOptions {
        EvalOptions {
            rounds: 10,
            fraction: 0.8,
            seed: 3,
            with_replacement: false,
            empty_match: 1.0,
            pairs: PairConvention::Ordered,
        }
    }

    fn cohort_outcomes() -> Vec<PatientOutcome> {
        (0..12)
            .map(|i| {
                let a: &[usize] = if i % 3 == 0 { &[0, 1] } else { &[1, 2] };
                outcome(&format!("p{i}"), &[a, &[3]], &[&[1, 2], &[3, 4]])
            })
            .collect()
    }

    #[test]
    fn patient_score_averages_visits() {
        let ddi = Tensor::zeros(5, 5);
        let s = score_patient(&outcome("a", &[&[1, 2], &[3]], &[&[1, 2], &[3, 4]]), &ddi, &opts()).unwrap();
        assert_eq!(s.jaccard, 0.75);
        assert!((s.f1 - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(s.avg_meds, 1.5);
        // Second visit ranks 3 first and 4 last of five: (1 + 2/5) / 2.
        assert!((s.prauc.unwrap() - (1.0 + 0.7) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn single_full_round_has_zero_spread() {
        let ddi = Tensor::zeros(5, 5);
        let o = EvalOptions { rounds: 1, fraction: 1.0, ..opts() };
        let r = bootstrap_evaluate("m", &cohort_outcomes(), &ddi, &o).unwrap();
        assert!(r.summaries().iter().all(|s| s.std == 0.0));
        assert_eq!(r.sample_size, 12);
    }

    #[test]
    fn same_seed_same_report_and_means_in_range() {
        let ddi = Tensor::zeros(5, 5);
        let a = bootstrap_evaluate("m", &cohort_outcomes(), &ddi, &opts()).unwrap();
        let b = bootstrap_evaluate("m", &cohort_outcomes(), &ddi, &opts()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sample_size, 9);
        for (k, s) in a.summaries().iter().enumerate() {
            let vals: Vec<f64> = a.per_round.iter().map(|v| v.get(k)).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(s.mean >= lo - 1e-12 && s.mean <= hi + 1e-12);
        }
        assert!(a.jaccard.std > 0.0);
        let back = MetricsReport::from_json(&a.to_json()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn rounds_use_distinct_subsets_without_replacement() {
        let ddi = Tensor::zeros(5, 5);
        let r = bootstrap_evaluate("m", &cohort_outcomes(), &ddi, &EvalOptions { with_replacement: true, ..opts() })
            .unwrap();
        assert_eq!(r.per_round.len(), 10);
        assert!(bootstrap_evaluate("m", &[], &ddi, &opts()).is_err());
    }

    #[test]
    fn ground_truth_scores_perfectly() {
        let data = small_data(10, 2);
        let ddi = Tensor::zeros(10, 10);
        let outs: Vec<_> = data.cohort.patients.iter().map(|p| PatientOutcome::ground_truth(p, 10)).collect();
        let r = bootstrap_evaluate("truth", &outs, &ddi, &opts()).unwrap();
        assert_eq!(r.jaccard.mean, 1.0);
        assert_eq!(r.f1.mean, 1.0);
        assert_eq!(r.prauc.mean, 1.0);
        let table = format_table(&[&r]);
        for name in METRIC_NAMES {
            assert!(table.contains(name));
        }
        assert!(table.contains("1.0000 ± 0.0000"));
    }

    #[test]
    fn frequency_prior_recount() {
        let data = small_data(30, 4);
        let prior = FrequencyPrior::fit(&data.cohort);
        let adm: Vec<_> = data.cohort.patients.iter().flat_map(|p| &p.admissions).collect();
        let mean = adm.iter().map(|a| a.medicines.len()).sum::<usize>() as f64 / adm.len() as f64;
        assert_eq!(prior.k, mean.round() as usize);
        assert_eq!(prior.set.len(), prior.k);
        let min_in = prior.set.iter().map(|&i| prior.counts[i]).min().unwrap();
        let max_out = (0..prior.counts.len()).filter(|i| !prior.set.contains(i)).map(|i| prior.counts[i]).max();
        assert!(max_out.map_or(true, |m| m <= min_in));
        assert_eq!(prior, FrequencyPrior::fit(&data.cohort));
    }

    #[test]
    fn frequency_prior_on_constant_cohort_is_exact() {
        let mut data = small_data(8, 6);
        for p in &mut data.cohort.patients {
            for a in &mut p.admissions {
                a.medicines = BTreeSet::from([1, 4, 7]);
            }
        }
        let prior = FrequencyPrior::fit(&data.cohort);
        let outs: Vec<_> = data.cohort.patients.iter().map(|p| prior.outcome(p)).collect();
        let r = bootstrap_evaluate("prior", &outs, &Tensor::zeros(10, 10), &opts()).unwrap();
        assert_eq!(r.jaccard.mean, 1.0);
    }
}
