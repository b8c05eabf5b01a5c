//! The full recommender: graph encoders, sequence hierarchy and prescriber
//! over one parameter store.

pub mod encoder;
pub mod prescriber;
pub mod sequence;

use std::collections::BTreeSet;

use medrec_tensor::{Axis, NodeId, ParamStore, Rng, Tape, Tensor};

use crate::cohort::{Admission, KgSide, Patient, Vocabularies};
use crate::config::{HistoryMode, HyperParams};
use crate::error::{CoreError, Result};
use crate::kg::{build_kg, edge_drop, MedicalKg, RelationStore};

use encoder::{encode_graph, EmbeddingBank, RgcnParams};
use prescriber::{apm, ffn, layer_norm_affine, predict_head, AttentionParams, FfnParams, HeadParams};
use sequence::{run_hierarchy, FusionParams, GruParams, HierarchyParams, MedicineStream};

/// Sizes the parameter layout depends on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDims {
    pub clinical_rows: usize,
    pub medicine_rows: usize,
    pub medicine_leaves: usize,
    pub demographic_rows: Vec<usize>,
    pub clinical_relations: usize,
    pub medicine_relations: usize,
}

impl ModelDims {
    pub fn new(vocab: &Vocabularies, rels: &RelationStore) -> Self {
        Self {
            clinical_rows: vocab.clinical_len(),
            medicine_rows: vocab.medicine.len(),
            medicine_leaves: vocab.medicine.n_leaves(),
            demographic_rows: vocab.demographics.iter().map(|v| v.len()).collect(),
            clinical_relations: rels.clinical.relations.len(),
            medicine_relations: rels.medicine.relations.len(),
        }
    }
}

/// Per-admission graphs of one patient. `medicine[k]` is `None` when the
/// medicine graph is disabled.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientGraphs {
    pub clinical: Vec<MedicalKg>,
    pub medicine: Vec<Option<MedicalKg>>,
    /// Ground-truth medicine sets per admission.
    pub targets: Vec<BTreeSet<usize>>,
}

impl PatientGraphs {
    pub fn len(&self) -> usize {
        self.clinical.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clinical.is_empty()
    }
}

/// Training-time stochasticity: edge dropping and dropout share one stream.
pub struct Noise<'a> {
    pub rng: &'a mut Rng,
    pub edge_drop: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub hp: HyperParams,
    pub dims: ModelDims,
    pub store: ParamStore,
    pub embed: EmbeddingBank,
    pub rgcn_clinical: RgcnParams,
    pub rgcn_medicine: Option<RgcnParams>,
    pub hierarchy: HierarchyParams,
    pub attention: Option<AttentionParams>,
    pub ffn: Option<FfnParams>,
    pub head: HeadParams,
    clinical_link: usize,
    medicine_link: usize,
}

impl Model {
    /// Fresh parameters drawn from `Rng::stream(hp.seed, 0)`.
    pub fn new(vocab: &Vocabularies, rels: &RelationStore, hp: &HyperParams) -> Result<Self> {
        hp.validate()?;
        let dims = ModelDims::new(vocab, rels);
        let flags = &hp.flags;
        let e = hp.embed_dim;
        let mut rng = Rng::stream(hp.seed, 0);
        let mut store = ParamStore::new();
        let demo_rows = if flags.use_demographics { dims.demographic_rows.clone() } else { Vec::new() };
        let embed = EmbeddingBank::new(&mut store, &mut rng, dims.clinical_rows, dims.medicine_rows, &demo_rows, e);
        let rgcn = |store: &mut ParamStore, rng: &mut Rng, prefix: &str, n_rel: usize| {
            RgcnParams::new(store, rng, prefix, n_rel, e, hp.rgcn_layers, hp.dropout, hp.final_relu)
        };
        let rgcn_clinical = rgcn(&mut store, &mut rng, "rgcn/clinical", dims.clinical_relations);
        let rgcn_medicine = flags
            .use_medicine_kg
            .then(|| rgcn(&mut store, &mut rng, "rgcn/medicine", dims.medicine_relations));
        let clinical = GruParams::new(&mut store, &mut rng, "gru/clinical", e, e);
        let medicine = if flags.use_medicine_kg {
            Some(MedicineStream {
                gru: GruParams::new(&mut store, &mut rng, "gru/medicine", e, e),
                joint: GruParams::new(&mut store, &mut rng, "gru/joint", 2 * e, e),
                fusion: flags.use_fusion.then(|| {
                    FusionParams::new(&mut store, &mut rng, "fusion", e, hp.fusion_layers, hp.fusion_interaction)
                }),
            })
        } else {
            None
        };
        let attention = if flags.use_apm {
            Some(AttentionParams::new(&mut store, &mut rng, "attention", e, hp.heads)?)
        } else {
            None
        };
        let ffn = (!flags.use_apm && flags.use_medicine_kg).then(|| FfnParams::new(&mut store, &mut rng, "ffn", e));
        let head = HeadParams::new(&mut store, &mut rng, "head", e, dims.medicine_leaves);
        Ok(Self {
            hp: hp.clone(),
            dims,
            store,
            embed,
            rgcn_clinical,
            rgcn_medicine,
            hierarchy: HierarchyParams { clinical, medicine },
            attention,
            ffn,
            head,
            clinical_link: rels.clinical.patient_link(),
            medicine_link: rels.medicine.patient_link(),
        })
    }

    /// Checks that data built from `vocab` and `rels` fits this model.
    pub fn check_compatible(&self, vocab: &Vocabularies, rels: &RelationStore) -> Result<()> {
        let other = ModelDims::new(vocab, rels);
        if other != self.dims {
            return Err(CoreError::VocabularyMismatch(format!(
                "model was built for {:?}, data has {:?}",
                self.dims, other
            )));
        }
        Ok(())
    }

    /// Builds every admission graph of `patient`.
    pub fn patient_graphs(&self, patient: &Patient, vocab: &Vocabularies, rels: &RelationStore) -> Result<PatientGraphs> {
        let filter = self.hp.flags.relation_filter();
        let last = patient.admissions.len().saturating_sub(1);
        let build = |k: usize, adm: &Admission| -> Result<(MedicalKg, Option<MedicalKg>)> {
            let c = build_kg(adm, KgSide::Clinical, rels, vocab, filter)?;
            // The last admission's medicines are only ever a target.
            let m = if self.hp.flags.use_medicine_kg && k < last {
                Some(build_kg(adm, KgSide::Medicine, rels, vocab, filter).map_err(|e| {
                    CoreError::Invalid(format!("patient {} admission {}: {e}", patient.id, k + 1))
                })?)
            } else {
                None
            };
            Ok((c, m))
        };
        let mut out = PatientGraphs {
            clinical: Vec::new(),
            medicine: Vec::new(),
            targets: Vec::new(),
        };
        for (k, adm) in patient.admissions.iter().enumerate() {
            let (c, m) = build(k, adm)?;
            out.clinical.push(c);
            out.medicine.push(m);
            out.targets.push(adm.medicines.clone());
        }
        Ok(out)
    }

    fn encode(&self, tape: &mut Tape, kg: &MedicalKg, noise: &mut Option<Noise<'_>>) -> Result<NodeId> {
        let (table, params, link) = match kg.side {
            KgSide::Clinical => (self.embed.clinical, &self.rgcn_clinical, self.clinical_link),
            KgSide::Medicine => (
                self.embed.medicine,
                self.rgcn_medicine
                    .as_ref()
                    .ok_or_else(|| CoreError::Invalid("medicine graph is disabled".into()))?,
                self.medicine_link,
            ),
        };
        let demo = self.hp.flags.use_demographics.then_some(self.embed.demographics.as_slice());
        match noise {
            Some(n) => {
                let dropped = edge_drop(kg, n.edge_drop, link, n.rng)?;
                encode_graph(tape, &dropped, table, demo, params, Some(n.rng))
            }
            None => encode_graph(tape, kg, table, demo, params, None),
        }
    }

    fn states(
        &self,
        tape: &mut Tape,
        graphs: &PatientGraphs,
        n: usize,
        noise: &mut Option<Noise<'_>>,
    ) -> Result<(Vec<NodeId>, sequence::Hierarchy)> {
        if n == 0 || n > graphs.len() {
            return Err(CoreError::Invalid(format!("cannot predict {n} of {} admissions", graphs.len())));
        }
        let mut g_c = Vec::with_capacity(n);
        let mut g_m = Vec::with_capacity(n);
        for k in 0..n {
            g_c.push(self.encode(tape, &graphs.clinical[k], noise)?);
            if self.hp.flags.use_medicine_kg && k + 1 < n {
                let kg = graphs.medicine[k]
                    .as_ref()
                    .ok_or_else(|| CoreError::Invalid(format!("admission {} has no medicine graph", k + 1)))?;
                g_m.push(self.encode(tape, kg, noise)?);
            }
        }
        let h = run_hierarchy(tape, &g_c, &g_m, &self.hierarchy)?;
        Ok((g_c, h))
    }

    fn output(&self, tape: &mut Tape, t: usize, g_c: &[NodeId], h: &sequence::Hierarchy) -> Result<NodeId> {
        let e = self.hp.embed_dim;
        let eps = self.hp.ln_eps;
        let hc = h.h_c[t];
        if self.hierarchy.medicine.is_none() {
            return match &self.attention {
                Some(att) => apm(tape, hc, &[hc], hc, att, &self.head, eps),
                None => predict_head(tape, hc, &self.head),
            };
        }
        match (&self.attention, &self.ffn) {
            (Some(att), _) => {
                let memory: &[NodeId] = match self.hp.flags.history_mode {
                    HistoryMode::Penultimate if t > 0 => &h.h_joint[t - 1..t],
                    HistoryMode::Penultimate => &[],
                    HistoryMode::Full => &h.h_joint[..t],
                };
                apm(tape, hc, memory, g_c[t], att, &self.head, eps)
            }
            (None, Some(f)) => {
                let prev = if t > 0 { h.h_joint[t - 1] } else { tape.constant(Tensor::zeros(1, e)) };
                let x = tape.concat(&[hc, prev], Axis::Cols)?;
                let y = ffn(tape, x, f)?;
                let pre = tape.add(g_c[t], y)?;
                let o = layer_norm_affine(tape, pre, &self.head, eps)?;
                predict_head(tape, o, &self.head)
            }
            (None, None) => Err(CoreError::Invalid("model has no prescribing module".into())),
        }
    }

    /// Probabilities (`1 × |M_leaf|`) for admission `t` (0-based), using
    /// admissions `0..=t` only.
    pub fn forward(&self, tape: &mut Tape, graphs: &PatientGraphs, t: usize, mut noise: Option<Noise<'_>>) -> Result<NodeId> {
        let (g_c, h) = self.states(tape, graphs, t + 1, &mut noise)?;
        self.output(tape, t, &g_c, &h)
    }

    /// Probabilities for every admission in one causal pass.
    pub fn forward_all(&self, tape: &mut Tape, graphs: &PatientGraphs) -> Result<Vec<NodeId>> {
        let (g_c, h) = self.states(tape, graphs, graphs.len(), &mut None)?;
        (0..graphs.len()).map(|t| self.output(tape, t, &g_c, &h)).collect()
    }

    /// Inference probabilities for every admission as plain vectors.
    pub fn predict(&self, graphs: &PatientGraphs) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::with_params(&self.store);
        let out = self.forward_all(&mut tape, graphs)?;
        Ok(out.into_iter().map(|id| tape.value(id).data().to_vec()).collect())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::cohort::synthetic::{generate, SyntheticConfig, SyntheticData};
    use crate::config::{AblationFlags, VARIANTS};

    pub(crate) fn small_data(patients: usize, seed: u64) -> SyntheticData {
        let cfg = SyntheticConfig {
            patients,
            diagnoses: 12,
            procedures: 6,
            medicines: 10,
            branching: 3,
            rules: 4,
            semantic_triples: 10,
            ddi_density: 0.1,
            ..SyntheticConfig::default()
        };
        generate(&cfg, seed).unwrap()
    }

    pub(crate) fn small_hp() -> HyperParams {
        HyperParams {
            embed_dim: 8,
            ..HyperParams::default()
        }
    }

    pub(crate) fn relations(data: &SyntheticData, hp: &HyperParams) -> RelationStore {
        let dir = tempfile::tempdir().unwrap();
        data.write(dir.path()).unwrap();
        crate::kg::RelationStore::load(
            crate::kg::RelationFiles {
                ontology: &dir.path().join("ontology.tsv"),
                semantic: &dir.path().join("semantic.tsv"),
                ddi: &dir.path().join("ddi.tsv"),
            },
            &data.cohort.vocab,
            hp.relation_options(),
        )
        .unwrap()
    }

    #[test]
    fn forward_all_agrees_with_prefix_forward() {
        let data = small_data(6, 3);
        let hp = small_hp();
        let rels = relations(&data, &hp);
        let model = Model::new(&data.cohort.vocab, &rels, &hp).unwrap();
        for p in &data.cohort.patients {
            let g = model.patient_graphs(p, &data.cohort.vocab, &rels).unwrap();
            let all = model.predict(&g).unwrap();
            for t in 0..g.len() {
                let mut tape = Tape::with_params(&model.store);
                let y = model.forward(&mut tape, &g, t, None).unwrap();
                assert_eq!(tape.value(y).data(), all[t].as_slice());
                assert_eq!(all[t].len(), data.cohort.vocab.medicine.n_leaves());
                assert!(all[t].iter().all(|&x| x > 0.0 && x < 1.0));
            }
        }
    }

    #[test]
    fn every_variant_builds_and_predicts() {
        let data = small_data(4, 5);
        for name in VARIANTS {
            let hp = HyperParams {
                flags: AblationFlags::variant(name).unwrap(),
                ..small_hp()
            };
            let rels = relations(&data, &hp);
            let model = Model::new(&data.cohort.vocab, &rels, &hp).unwrap();
            for p in &data.cohort.patients {
                let g = model.patient_graphs(p, &data.cohort.vocab, &rels).unwrap();
                let out = model.predict(&g).unwrap();
                assert_eq!(out.len(), p.admissions.len(), "{name}");
            }
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let data = small_data(4, 5);
        let hp = small_hp();
        let rels = relations(&data, &hp);
        let a = Model::new(&data.cohort.vocab, &rels, &hp).unwrap();
        let b = Model::new(&data.cohort.vocab, &rels, &hp).unwrap();
        assert_eq!(a.store, b.store);
    }

    #[test]
    fn training_noise_is_reproducible() {
        let data = small_data(4, 9);
        let hp = small_hp();
        let rels = relations(&data, &hp);
        let model = Model::new(&data.cohort.vocab, &rels, &hp).unwrap();
        let p = data.cohort.patients.iter().max_by_key(|p| p.admissions.len()).unwrap();
        let g = model.patient_graphs(p, &data.cohort.vocab, &rels).unwrap();
        let run = || {
            let mut rng = Rng::seeded(1);
            let mut tape = Tape::with_params(&model.store);
            let noise = Noise { rng: &mut rng, edge_drop: 0.3 };
            let y = model.forward(&mut tape, &g, g.len() - 1, Some(noise)).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(), run());
    }
}
