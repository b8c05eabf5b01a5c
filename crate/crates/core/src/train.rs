//! Per-visit optimisation loop, model selection and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use medrec_tensor::{AdamConfig, AdamState, Container, ParamGrads, ParamStore, Rng, RngState, Tape, Tensor, TensorError};
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, Vocabularies};
use crate::config::{HyperParams, StepGranularity};
use crate::error::{CoreError, Result};
use crate::evaluation::{score_patient, EvalOptions, PatientOutcome};
use crate::exec;
use crate::kg::RelationStore;
use crate::model::prescriber::threshold;
use crate::model::{Model, Noise, PatientGraphs};
use crate::objectives::{visit_objective, LossConfig, LossValues};

pub const CHECKPOINT_FORMAT: &str = "medrec-checkpoint v1";

/// Graphs of one patient ready for training or inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub id: String,
    pub graphs: PatientGraphs,
}

pub fn prepare(model: &Model, cohort: &Cohort, rels: &RelationStore) -> Result<Vec<Prepared>> {
    model.check_compatible(&cohort.vocab, rels)?;
    exec::try_map(&cohort.patients, |p| {
        Ok(Prepared {
            id: p.id.clone(),
            graphs: model.patient_graphs(p, &cohort.vocab, rels)?,
        })
    })
}

/// Mean per-step loss components of one epoch plus the validation score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub bce: f64,
    pub margin: f64,
    pub ddi: f64,
    pub lambda_ddi: f64,
    pub total: f64,
    pub val_jaccard: Option<f64>,
}

impl EpochRecord {
    pub const HEADER: &'static str = "epoch\tL_bce\tL_multi\tL_ddi\tlambda_ddi\ttotal\tval_jaccard";

    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{:.6}\t{}",
            self.epoch,
            self.bce,
            self.margin,
            self.ddi,
            self.lambda_ddi,
            self.total,
            self.val_jaccard.map_or("-".to_string(), |v| format!("{v:.4}"))
        )
    }
}

/// Everything needed to resume training or to evaluate.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub rng: Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_jaccard: Option<f64>,
    /// Parameters at the best validation epoch.
    pub best: ParamStore,
}

fn adam_config(hp: &HyperParams) -> AdamConfig {
    AdamConfig {
        lr: hp.lr,
        beta1: hp.adam_beta1,
        beta2: hp.adam_beta2,
        eps: hp.adam_eps,
        weight_decay: hp.weight_decay,
    }
}

/// Thresholded predictions for every admission of each patient.
pub fn predict_outcomes(model: &Model, patients: &[Prepared]) -> Result<Vec<PatientOutcome>> {
    exec::try_map(patients, |p| {
        let scores = model.predict(&p.graphs)?;
        let predicted = scores
            .iter()
            .map(|s| threshold(s, model.hp.threshold))
            .collect::<Result<Vec<_>>>()?;
        Ok(PatientOutcome {
            patient_id: p.id.clone(),
            scores,
            predicted,
            truth: p.graphs.targets.clone(),
        })
    })
}

/// Mean visit-averaged Jaccard over patients.
pub fn mean_jaccard(model: &Model, patients: &[Prepared], ddi: &Tensor) -> Result<f64> {
    let opts = EvalOptions::from_hyper(&model.hp);
    let outcomes = predict_outcomes(model, patients)?;
    let mut sum = 0.0;
    for o in &outcomes {
        sum += score_patient(o, ddi, &opts)?.jaccard;
    }
    Ok(sum / outcomes.len().max(1) as f64)
}

/// Mean per-visit loss components over `patients` without dropout or edge
/// removal.
pub fn dataset_loss(model: &Model, patients: &[Prepared], ddi: &Tensor) -> Result<LossValues> {
    let cfg = LossConfig::from_hyper(&model.hp);
    let per_patient = exec::try_map(patients, |p| {
        let mut acc = LossValues::default();
        for t in 0..p.graphs.len() {
            let mut tape = Tape::with_params(&model.store);
            let pred = model.forward(&mut tape, &p.graphs, t, None)?;
            let (_, v) = visit_objective(&mut tape, pred, &p.graphs.targets[t], ddi, &cfg)?;
            acc.bce += v.bce;
            acc.margin += v.margin;
            acc.ddi += v.ddi;
            acc.lambda_ddi += v.lambda_ddi;
            acc.total += v.total;
        }
        Ok::<_, CoreError>((acc, p.graphs.len()))
    })?;
    let mut acc = LossValues::default();
    let mut n = 0usize;
    for (v, k) in per_patient {
        acc.bce += v.bce;
        acc.margin += v.margin;
        acc.ddi += v.ddi;
        acc.lambda_ddi += v.lambda_ddi;
        acc.total += v.total;
        n += k;
    }
    let n = n.max(1) as f64;
    Ok(LossValues {
        bce: acc.bce / n,
        margin: acc.margin / n,
        ddi: acc.ddi / n,
        lambda_ddi: acc.lambda_ddi / n,
        total: acc.total / n,
    })
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        let adam = AdamState::new(&model.store, adam_config(&model.hp));
        let rng = Rng::stream(model.hp.seed, 1);
        let best = model.store.clone();
        Self {
            model,
            adam,
            rng,
            epoch: 0,
            history: Vec::new(),
            best_epoch: 0,
            best_val_jaccard: None,
            best,
        }
    }

    fn visit_grads(&mut self, p: &Prepared, t: usize, ddi: &Tensor, cfg: &LossConfig) -> Result<(LossValues, ParamGrads)> {
        let mut tape = Tape::with_params(&self.model.store);
        let noise = Noise {
            rng: &mut self.rng,
            edge_drop: self.model.hp.edge_drop,
        };
        let diverged = |e: CoreError| match e {
            CoreError::Tensor(TensorError::NonFinite { op }) => CoreError::Divergence(format!(
                "patient {}, admission {}: {op} produced a non-finite value",
                p.id,
                t + 1
            )),
            other => other,
        };
        let pred = self.model.forward(&mut tape, &p.graphs, t, Some(noise)).map_err(diverged)?;
        let (loss, values) = visit_objective(&mut tape, pred, &p.graphs.targets[t], ddi, cfg).map_err(diverged)?;
        if !values.is_finite() {
            return Err(CoreError::Divergence(format!(
                "epoch {}, patient {}, admission {}: non-finite loss {values:?}",
                self.epoch + 1,
                p.id,
                t + 1
            )));
        }
        let grads = tape.backward(loss).map_err(|e| diverged(e.into()))?.into_param_grads();
        Ok((values, grads))
    }

    fn apply(&mut self, grads: &ParamGrads, p: &Prepared) -> Result<()> {
        self.adam.step(&mut self.model.store, grads)?;
        if self.model.store.iter().any(|(_, _, t)| !t.is_finite()) {
            return Err(CoreError::Divergence(format!(
                "epoch {}, patient {}: parameters became non-finite",
                self.epoch + 1,
                p.id
            )));
        }
        Ok(())
    }

    /// One pass over `train` in a freshly shuffled order.
    pub fn run_epoch(&mut self, train: &[Prepared], ddi: &Tensor) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(CoreError::Invalid("empty training set".into()));
        }
        let cfg = LossConfig::from_hyper(&self.model.hp);
        let mut order: Vec<usize> = (0..train.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut self.rng);
        let mut acc = LossValues::default();
        let mut steps = 0usize;
        for &i in &order {
            let p = &train[i];
            let mut pending: Option<ParamGrads> = None;
            for t in 0..p.graphs.len() {
                let (v, g) = self.visit_grads(p, t, ddi, &cfg)?;
                acc.bce += v.bce;
                acc.margin += v.margin;
                acc.ddi += v.ddi;
                acc.lambda_ddi += v.lambda_ddi;
                acc.total += v.total;
                steps += 1;
                match self.model.hp.step {
                    StepGranularity::Visit => self.apply(&g, p)?,
                    StepGranularity::Patient => match &mut pending {
                        Some(acc_g) => acc_g.accumulate(g),
                        None => pending = Some(g),
                    },
                }
            }
            if let Some(g) = pending {
                self.apply(&g, p)?;
            }
        }
        self.epoch += 1;
        let n = steps as f64;
        Ok(EpochRecord {
            epoch: self.epoch,
            steps,
            bce: acc.bce / n,
            margin: acc.margin / n,
            ddi: acc.ddi / n,
            lambda_ddi: acc.lambda_ddi / n,
            total: acc.total / n,
            val_jaccard: None,
        })
    }

    /// Trains until `self.model.hp.epochs` epochs are complete, keeping the
    /// parameters with the best validation Jaccard. Without validation
    /// patients the last epoch is kept.
    pub fn fit(
        &mut self,
        train: &[Prepared],
        val: &[Prepared],
        ddi: &Tensor,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<()> {
        while self.epoch < self.model.hp.epochs {
            let mut rec = self.run_epoch(train, ddi)?;
            if val.is_empty() {
                self.best = self.model.store.clone();
                self.best_epoch = self.epoch;
            } else {
                let j = mean_jaccard(&self.model, val, ddi)?;
                rec.val_jaccard = Some(j);
                if self.best_val_jaccard.map_or(true, |b| j > b) {
                    self.best_val_jaccard = Some(j);
                    self.best_epoch = self.epoch;
                    self.best = self.model.store.clone();
                }
            }
            on_epoch(&rec);
            self.history.push(rec);
        }
        Ok(())
    }

    /// Model carrying the selected parameters.
    pub fn best_model(&self) -> Model {
        let mut m = self.model.clone();
        m.store = self.best.clone();
        m
    }

    pub fn to_container(&self, vocab: &Vocabularies) -> Container {
        let mut meta = BTreeMap::new();
        let hp = &self.model.hp;
        meta.insert("format".into(), CHECKPOINT_FORMAT.into());
        meta.insert("config".into(), hp.to_text());
        meta.insert("config_fingerprint".into(), format!("{:016x}", hp.fingerprint()));
        meta.insert("vocab_fingerprint".into(), format!("{:016x}", vocab.fingerprint()));
        meta.insert("epoch".into(), self.epoch.to_string());
        meta.insert("adam_step".into(), self.adam.step.to_string());
        meta.insert("rng".into(), encode_rng(&self.rng.state()));
        meta.insert("best_epoch".into(), self.best_epoch.to_string());
        meta.insert(
            "best_val_jaccard".into(),
            self.best_val_jaccard.map_or("-".into(), |v| format!("{:016x}", v.to_bits())),
        );
        meta.insert("history".into(), serde_json::to_string(&self.history).expect("history serialises"));
        let mut tensors = Vec::new();
        for (k, (id, name, t)) in self.model.store.iter().enumerate() {
            tensors.push((format!("param/{name}"), t.clone()));
            tensors.push((format!("best/{name}"), self.best.get(id).clone()));
            tensors.push((format!("adam_m/{name}"), self.adam.first[k].clone()));
            tensors.push((format!("adam_v/{name}"), self.adam.second[k].clone()));
        }
        Container { meta, tensors }
    }

    pub fn from_container(c: &Container, vocab: &Vocabularies, rels: &RelationStore) -> Result<Self> {
        let bad = |m: String| CoreError::Invalid(format!("checkpoint: {m}"));
        if c.meta("format")? != CHECKPOINT_FORMAT {
            return Err(bad(format!("unsupported format `{}`", c.meta("format")?)));
        }
        let hp = HyperParams::from_text(c.meta("config")?)?;
        let fp = format!("{:016x}", vocab.fingerprint());
        if c.meta("vocab_fingerprint")? != fp {
            return Err(CoreError::VocabularyMismatch(format!(
                "checkpoint vocabulary {} differs from data vocabulary {fp}",
                c.meta("vocab_fingerprint")?
            )));
        }
        let mut model = Model::new(vocab, rels, &hp)?;
        let mut trainer_best = model.store.clone();
        let mut adam = AdamState::new(&model.store, adam_config(&hp));
        let ids: Vec<_> = model.store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let name = model.store.name(id).to_string();
            model.store.set(id, c.tensor(&format!("param/{name}"))?.clone())?;
            trainer_best.set(id, c.tensor(&format!("best/{name}"))?.clone())?;
            adam.first[k] = c.tensor(&format!("adam_m/{name}"))?.clone();
            adam.second[k] = c.tensor(&format!("adam_v/{name}"))?.clone();
        }
        let parse_usize = |key: &str| -> Result<usize> {
            c.meta(key)?.parse().map_err(|_| bad(format!("bad `{key}`")))
        };
        adam.step = c.meta("adam_step")?.parse().map_err(|_| bad("bad `adam_step`".into()))?;
        let best_val_jaccard = match c.meta("best_val_jaccard")? {
            "-" => None,
            s => Some(f64::from_bits(u64::from_str_radix(s, 16).map_err(|_| bad("bad `best_val_jaccard`".into()))?)),
        };
        Ok(Self {
            model,
            adam,
            rng: Rng::from_state(decode_rng(c.meta("rng")?).ok_or_else(|| bad("bad `rng`".into()))?),
            epoch: parse_usize("epoch")?,
            history: serde_json::from_str(c.meta("history")?).map_err(|e| bad(e.to_string()))?,
            best_epoch: parse_usize("best_epoch")?,
            best_val_jaccard,
            best: trainer_best,
        })
    }

    pub fn save(&self, path: &Path, vocab: &Vocabularies) -> Result<()> {
        self.to_container(vocab)
            .save(path)
            .map_err(|e| CoreError::Invalid(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path, vocab: &Vocabularies, rels: &RelationStore) -> Result<Self> {
        Self::from_container(&load_container(path)?, vocab, rels)
    }
}

pub fn load_container(path: &Path) -> Result<Container> {
    Container::load(path).map_err(|e| CoreError::Invalid(format!("{}: {e}", path.display())))
}

fn encode_rng(s: &RngState) -> String {
    let seed: String = s.seed.iter().map(|b| format!("{b:02x}")).collect();
    format!("{seed}:{}:{}", s.stream, s.word_pos)
}

fn decode_rng(text: &str) -> Option<RngState> {
    let mut it = text.split(':');
    let hex = it.next()?;
    if hex.len() != 64 {
        return None;
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).ok()?;
    }
    let stream = it.next()?.parse().ok()?;
    let word_pos = it.next()?.parse().ok()?;
    it.next().is_none().then_some(RngState { seed, stream, word_pos })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{relations, small_data, small_hp};

    #[test]
    fn rng_state_round_trips() {
        let mut r = Rng::stream(9, 4);
        r.uniform();
        let s = r.state();
        assert_eq!(decode_rng(&encode_rng(&s)), Some(s));
        assert_eq!(decode_rng("zz"), None);
    }

    #[test]
    fn loss_trace_is_reproducible_and_resumable() {
        let data = small_data(8, 1);
        let hp = HyperParams { epochs: 3, ..small_hp() };
        let rels = relations(&data, &hp);
        let run = |epochs: usize| {
            let model = Model::new(&data.cohort.vocab, &rels, &HyperParams { epochs, ..hp.clone() }).unwrap();
            let train = prepare(&model, &data.cohort, &rels).unwrap();
            let mut tr = Trainer::new(model);
            tr.fit(&train, &train[..2], &rels.ddi, |_| {}).unwrap();
            (tr, train)
        };
        let (a, train) = run(3);
        let (b, _) = run(3);
        let bits = |t: &Trainer| t.history.iter().map(|r| r.total.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.history.len(), 3);

        // Stop after two epochs, save, reload, finish: same trace.
        let (mut c, _) = run(2);
        let cont = c.to_container(&data.cohort.vocab);
        let mut buf = Vec::new();
        cont.write_to(&mut buf).unwrap();
        let back = Container::read_from(&mut buf.as_slice()).unwrap();
        let mut d = Trainer::from_container(&back, &data.cohort.vocab, &rels).unwrap();
        assert_eq!(d.model.store, c.model.store);
        assert_eq!(d.best, c.best);
        assert_eq!(d.adam, c.adam);
        assert_eq!(d.rng, c.rng);
        assert_eq!(d.history, c.history);
        assert_eq!((d.epoch, d.best_epoch, d.best_val_jaccard), (c.epoch, c.best_epoch, c.best_val_jaccard));
        assert_eq!(d.model.hp, c.model.hp);
        assert_eq!(d, c);
        d.model.hp.epochs = 3;
        c.model.hp.epochs = 3;
        d.fit(&train, &train[..2], &rels.ddi, |_| {}).unwrap();
        assert_eq!(bits(&d), bits(&a));
        assert_eq!(d.model.store, a.model.store);
    }

    #[test]
    fn patient_granularity_trains() {
        let data = small_data(5, 2);
        let hp = HyperParams {
            epochs: 2,
            step: StepGranularity::Patient,
            ..small_hp()
        };
        let rels = relations(&data, &hp);
        let model = Model::new(&data.cohort.vocab, &rels, &hp).unwrap();
        let train = prepare(&model, &data.cohort, &rels).unwrap();
        let mut tr = Trainer::new(model);
        let steps = train.len() as u64 * 2;
        tr.fit(&train, &[], &rels.ddi, |_| {}).unwrap();
        assert_eq!(tr.adam.step, steps);
        assert_eq!(tr.best, tr.model.store);
    }

    #[test]
    fn divergence_is_reported() {
        let data = small_data(4, 2);
        let hp = HyperParams { epochs: 1, ..small_hp() };
        let rels = relations(&data, &hp);
        let mut model = Model::new(&data.cohort.vocab, &rels, &hp).unwrap();
        let id = model.head.w2;
        let t = model.store.get(id);
        let nan = Tensor::full(t.rows(), t.cols(), f64::NAN);
        model.store.set(id, nan).unwrap();
        let train = prepare(&model, &data.cohort, &rels).unwrap();
        let err = Trainer::new(model).fit(&train, &[], &rels.ddi, |_| {}).unwrap_err();
        assert!(matches!(err, CoreError::Divergence(_)), "{err}");
    }
}
