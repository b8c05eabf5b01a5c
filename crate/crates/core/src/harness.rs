//! End-to-end runs over a dataset directory: training, evaluation,
//! recommendation and the DDI-threshold sweep.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cohort::io::write_text;
use crate::cohort::synthetic::SyntheticData;
use crate::cohort::{read_cohort, read_split, split_cohort, write_split, Cohort, Patient, SplitSpec};
use crate::config::HyperParams;
use crate::error::{CoreError, Result};
use crate::evaluation::{bootstrap_evaluate, EvalOptions, FrequencyPrior, MetricsReport, PatientOutcome};
use crate::exec;
use crate::kg::{RelationFiles, RelationStore};
use crate::model::prescriber::{rank, threshold};
use crate::model::Model;
use crate::train::{predict_outcomes, prepare, EpochRecord, Trainer};

pub const VOCAB_FILE: &str = "vocab.tsv";
pub const COHORT_FILE: &str = "cohort.tsv";
pub const ONTOLOGY_FILE: &str = "ontology.tsv";
pub const SEMANTIC_FILE: &str = "semantic.tsv";
pub const DDI_FILE: &str = "ddi.tsv";
pub const SPLIT_FILE: &str = "split.tsv";
pub const CONFIG_SNAPSHOT: &str = "config.resolved.txt";
pub const TRAIN_LOG: &str = "train.log";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Train,
    Validation,
    Test,
    All,
}

impl std::str::FromStr for Part {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "validation" | "val" => Ok(Self::Validation),
            "test" => Ok(Self::Test),
            "all" => Ok(Self::All),
            _ => Err(CoreError::Config(format!("unknown split part `{s}`"))),
        }
    }
}

/// Cohort, relation tables and split of one dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub cohort: Cohort,
    pub relations: RelationStore,
    pub split: SplitSpec,
}

impl Dataset {
    /// Reads the standard files from `dir`. Without a `split.tsv` the
    /// patients are split with `hp.seed`.
    pub fn load(dir: &Path, hp: &HyperParams) -> Result<Self> {
        let cohort = read_cohort(&dir.join(VOCAB_FILE), &dir.join(COHORT_FILE))?;
        let relations = RelationStore::load(
            RelationFiles {
                ontology: &dir.join(ONTOLOGY_FILE),
                semantic: &dir.join(SEMANTIC_FILE),
                ddi: &dir.join(DDI_FILE),
            },
            &cohort.vocab,
            hp.relation_options(),
        )?;
        let split_path = dir.join(SPLIT_FILE);
        let split = if split_path.exists() {
            read_split(&split_path)?
        } else {
            split_cohort(&cohort, hp.seed)?
        };
        split.validate(&cohort)?;
        Ok(Self { cohort, relations, split })
    }

    pub fn from_synthetic(data: &SyntheticData, hp: &HyperParams) -> Result<Self> {
        let numbered = |v: &[crate::kg::RawTriple]| v.iter().cloned().enumerate().map(|(i, t)| (i + 1, t)).collect::<Vec<_>>();
        let ddi: Vec<_> = data.ddi.iter().enumerate().map(|(i, (a, b))| (i + 1, a.clone(), b.clone())).collect();
        let relations = RelationStore::build(
            &data.cohort.vocab,
            (Path::new(ONTOLOGY_FILE), &numbered(&data.ontology)),
            (Path::new(SEMANTIC_FILE), &numbered(&data.semantic)),
            (Path::new(DDI_FILE), &ddi),
            hp.relation_options(),
        )?;
        let split = split_cohort(&data.cohort, hp.seed)?;
        Ok(Self {
            cohort: data.cohort.clone(),
            relations,
            split,
        })
    }

    pub fn part(&self, which: Part) -> Result<Cohort> {
        match which {
            Part::Train => self.cohort.subset(&self.split.train),
            Part::Validation => self.cohort.subset(&self.split.validation),
            Part::Test => self.cohort.subset(&self.split.test),
            Part::All => Ok(self.cohort.clone()),
        }
    }
}

/// Trains on the training split with validation-based selection. With an
/// output directory, writes the resolved configuration, split, epoch log
/// and final checkpoint there.
pub fn train(
    data: &Dataset,
    hp: &HyperParams,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Trainer> {
    let model = Model::new(&data.cohort.vocab, &data.relations, hp)?;
    let train_set = prepare(&model, &data.part(Part::Train)?, &data.relations)?;
    let val_set = prepare(&model, &data.part(Part::Validation)?, &data.relations)?;
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
            write_text(&dir.join(CONFIG_SNAPSHOT), &hp.to_text())?;
            write_split(&dir.join(SPLIT_FILE), &data.split)?;
            let path = dir.join(TRAIN_LOG);
            let mut f = std::fs::File::create(&path).map_err(|e| CoreError::io(&path, e))?;
            writeln!(f, "{}", EpochRecord::HEADER).map_err(|e| CoreError::io(&path, e))?;
            Some((path, f))
        }
        None => None,
    };
    let mut trainer = Trainer::new(model);
    let mut io_err = None;
    let result = trainer.fit(&train_set, &val_set, &data.relations.ddi, |rec| {
        if let Some((path, f)) = &mut log {
            if let Err(e) = writeln!(f, "{}", rec.log_line()).and_then(|_| f.flush()) {
                io_err.get_or_insert(CoreError::io(path.clone(), e));
            }
        }
        on_epoch(rec);
    });
    if let Some(e) = io_err {
        return Err(e);
    }
    result?;
    if let Some(dir) = out {
        trainer.save(&dir.join(CHECKPOINT_FILE), &data.cohort.vocab)?;
    }
    Ok(trainer)
}

/// Bootstrap report of `model` on one split part.
pub fn evaluate(model: &Model, data: &Dataset, which: Part, label: &str) -> Result<(MetricsReport, Vec<PatientOutcome>)> {
    let prepared = prepare(model, &data.part(which)?, &data.relations)?;
    let outcomes = predict_outcomes(model, &prepared)?;
    let report = bootstrap_evaluate(label, &outcomes, &data.relations.ddi, &EvalOptions::from_hyper(&model.hp))?;
    Ok((report, outcomes))
}

/// Report with predictions set to the recorded prescriptions.
pub fn ground_truth_report(data: &Dataset, which: Part, opts: &EvalOptions) -> Result<MetricsReport> {
    let n = data.cohort.vocab.medicine.n_leaves();
    let outcomes: Vec<_> = data.part(which)?.patients.iter().map(|p| PatientOutcome::ground_truth(p, n)).collect();
    bootstrap_evaluate("Ground Truth", &outcomes, &data.relations.ddi, opts)
}

/// Report of the training-frequency baseline.
pub fn frequency_prior_report(data: &Dataset, which: Part, opts: &EvalOptions) -> Result<MetricsReport> {
    let prior = FrequencyPrior::fit(&data.part(Part::Train)?);
    let outcomes: Vec<_> = data.part(which)?.patients.iter().map(|p| prior.outcome(p)).collect();
    bootstrap_evaluate("Frequency Prior", &outcomes, &data.relations.ddi, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedMedicine {
    pub code: String,
    pub probability: f64,
}

/// Recommendation for the last admission of one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub patient_id: String,
    pub admission: usize,
    pub threshold: f64,
    pub recommended: Vec<String>,
    pub ranked: Vec<RankedMedicine>,
}

impl Recommendation {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("recommendation serialises")
    }
}

pub fn recommend(model: &Model, patient: &Patient, data_vocab: &crate::cohort::Vocabularies, rels: &RelationStore) -> Result<Recommendation> {
    model.check_compatible(data_vocab, rels)?;
    let graphs = model.patient_graphs(patient, data_vocab, rels)?;
    let mut tape = medrec_tensor::Tape::with_params(&model.store);
    let t = graphs.len() - 1;
    let y = model.forward(&mut tape, &graphs, t, None)?;
    let probs = tape.value(y).data().to_vec();
    let set = threshold(&probs, model.hp.threshold)?;
    let code = |i: usize| data_vocab.medicine.code(i).to_string();
    Ok(Recommendation {
        patient_id: patient.id.clone(),
        admission: t + 1,
        threshold: model.hp.threshold,
        recommended: set.iter().map(|&i| code(i)).collect(),
        ranked: rank(&probs)
            .into_iter()
            .map(|i| RankedMedicine {
                code: code(i),
                probability: probs[i],
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub tau: f64,
    pub report: MetricsReport,
}

/// Trains and evaluates one model per `τ`, all other settings shared.
pub fn tau_sweep(data: &Dataset, hp: &HyperParams, taus: &[f64], which: Part) -> Result<Vec<SweepPoint>> {
    if taus.len() < 2 {
        return Err(CoreError::Config("a sweep needs at least two tau values".into()));
    }
    exec::try_map(taus, |&tau| {
        let hp = HyperParams { tau, ..hp.clone() };
        hp.validate()?;
        let trainer = train(data, &hp, None, |_| {})?;
        let (report, _) = evaluate(&trainer.best_model(), data, which, &format!("tau={tau:.2}"))?;
        Ok(SweepPoint { tau, report })
    })
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("tau,jaccard,jaccard_std,ddi_rate,ddi_rate_std,f1,prauc,avg_meds\n");
    for p in points {
        let r = &p.report;
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            p.tau, r.jaccard.mean, r.jaccard.std, r.ddi_rate.mean, r.ddi_rate.std, r.f1.mean, r.prauc.mean, r.avg_meds.mean
        );
    }
    out
}

/// Standard output locations under a run directory.
pub fn run_paths(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (dir.join(CHECKPOINT_FILE), dir.join(TRAIN_LOG), dir.join(CONFIG_SNAPSHOT))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{small_data, small_hp};

    #[test]
    fn directory_and_memory_datasets_agree() {
        let data = small_data(9, 2);
        let hp = small_hp();
        let dir = tempfile::tempdir().unwrap();
        data.write(dir.path()).unwrap();
        let a = Dataset::load(dir.path(), &hp).unwrap();
        let b = Dataset::from_synthetic(&data, &hp).unwrap();
        assert_eq!(a.cohort, b.cohort);
        assert_eq!(a.relations.ddi, b.relations.ddi);
        assert_eq!(a.split, b.split);
        assert_eq!(a.part(Part::Train).unwrap().patients.len(), 6);
    }

    #[test]
    fn train_writes_outputs_and_reloads_bit_exactly() {
        let data = small_data(9, 3);
        let hp = HyperParams { epochs: 2, ..small_hp() };
        let ds = Dataset::from_synthetic(&data, &hp).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let trainer = train(&ds, &hp, Some(dir.path()), |_| {}).unwrap();
        let (ckpt, log, cfg) = run_paths(dir.path());
        assert_eq!(std::fs::read_to_string(log).unwrap().lines().count(), 3);
        assert_eq!(HyperParams::from_text(&std::fs::read_to_string(cfg).unwrap()).unwrap(), hp);
        let back = Trainer::load(&ckpt, &ds.cohort.vocab, &ds.relations).unwrap();
        let (r1, _) = evaluate(&trainer.best_model(), &ds, Part::Test, "m").unwrap();
        let (r2, _) = evaluate(&back.best_model(), &ds, Part::Test, "m").unwrap();
        assert_eq!(r1.to_json(), r2.to_json());
    }

    #[test]
    fn recommendation_is_ranked() {
        let data = small_data(6, 4);
        let hp = small_hp();
        let ds = Dataset::from_synthetic(&data, &hp).unwrap();
        let model = Model::new(&ds.cohort.vocab, &ds.relations, &hp).unwrap();
        for p in &ds.cohort.patients {
            let r = recommend(&model, p, &ds.cohort.vocab, &ds.relations).unwrap();
            assert_eq!(r.admission, p.admissions.len());
            assert!(r.ranked.windows(2).all(|w| w[0].probability >= w[1].probability));
            assert!(r.ranked.iter().all(|m| m.probability > 0.0 && m.probability < 1.0));
            let back: Recommendation = serde_json::from_str(&r.to_json_line()).unwrap();
            assert_eq!(back, r);
        }
    }

    #[test]
    fn ground_truth_row_is_perfect() {
        let data = small_data(9, 5);
        let hp = small_hp();
        let ds = Dataset::from_synthetic(&data, &hp).unwrap();
        let r = ground_truth_report(&ds, Part::All, &EvalOptions::from_hyper(&hp)).unwrap();
        assert_eq!((r.jaccard.mean, r.f1.mean), (1.0, 1.0));
    }

    #[test]
    fn sweep_csv_has_one_row_per_tau() {
        let data = small_data(6, 6);
        let hp = HyperParams { epochs: 1, ..small_hp() };
        let ds = Dataset::from_synthetic(&data, &hp).unwrap();
        let pts = tau_sweep(&ds, &hp, &[0.05, 0.1], Part::Test).unwrap();
        assert_eq!(sweep_csv(&pts).lines().count(), 3);
        assert!(tau_sweep(&ds, &hp, &[0.05], Part::Test).is_err());
    }
}
