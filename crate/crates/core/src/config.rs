//! Hyperparameters, ablation flags and the flat `key = value` config format.

use std::fmt;
use std::str::FromStr;

use crate::cohort::Fnv;
use crate::error::{CoreError, Result};
use crate::kg::{RelationFilter, RelationOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HistoryMode {
    /// Attend over the most recent joint state only.
    Penultimate,
    /// Attend over every earlier joint state.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepGranularity {
    /// One optimiser step per visit.
    Visit,
    /// Accumulate a patient's visit gradients, then step once.
    Patient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionInteraction {
    /// Linear map, elementwise product with the layer input, ReLU.
    Product,
    /// Linear map and ReLU.
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairConvention {
    /// Ordered pairs over `|S|²`, diagonal included.
    Ordered,
    /// Unordered pairs over `|S|(|S|-1)/2`.
    Unordered,
}

macro_rules! text_enum {
    ($t:ty { $($v:ident = $s:literal),+ $(,)? }) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = CoreError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(Self::$v),)+
                    _ => Err(CoreError::Config(format!(
                        "expected one of {}, found `{s}`",
                        [$($s),+].join("|")
                    ))),
                }
            }
        }
    };
}

text_enum!(HistoryMode { Penultimate = "penultimate", Full = "full" });
text_enum!(StepGranularity { Visit = "visit", Patient = "patient" });
text_enum!(FusionInteraction { Product = "product", Mlp = "mlp" });
text_enum!(PairConvention { Ordered = "ordered", Unordered = "unordered" });

/// Model inputs and modules that can be switched off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationFlags {
    pub use_medicine_kg: bool,
    pub use_demographics: bool,
    /// Otherwise the two stream states are concatenated.
    pub use_fusion: bool,
    /// Otherwise a feed-forward merge replaces multi-head attention.
    pub use_apm: bool,
    pub use_ontology: bool,
    pub use_semantics: bool,
    pub use_ddi_relations: bool,
    pub history_mode: HistoryMode,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_medicine_kg: true,
            use_demographics: true,
            use_fusion: true,
            use_apm: true,
            use_ontology: true,
            use_semantics: true,
            use_ddi_relations: true,
            history_mode: HistoryMode::Penultimate,
        }
    }
}

/// Named model variants; [`AblationFlags::variant`] resolves them.
pub const VARIANTS: &[&str] = &[
    "full", "no-medicine-kg", "no-medicine-kg-apm", "no-demographics", "no-fusion", "no-apm", "no-relations",
    "no-ontology", "no-semantics", "no-ddi", "full-history",
];

impl AblationFlags {
    pub fn variant(name: &str) -> Result<Self> {
        let f = Self::default();
        Ok(match name {
            "full" => f,
            "no-medicine-kg" => Self { use_medicine_kg: false, use_fusion: false, ..f },
            "no-medicine-kg-apm" => Self { use_medicine_kg: false, use_fusion: false, use_apm: false, ..f },
            "no-demographics" => Self { use_demographics: false, ..f },
            "no-fusion" => Self { use_fusion: false, ..f },
            "no-apm" => Self { use_apm: false, ..f },
            "no-relations" => Self {
                use_demographics: false,
                use_ontology: false,
                use_semantics: false,
                use_ddi_relations: false,
                ..f
            },
            "no-ontology" => Self { use_ontology: false, ..f },
            "no-semantics" => Self { use_semantics: false, ..f },
            "no-ddi" => Self { use_ddi_relations: false, ..f },
            "full-history" => Self { history_mode: HistoryMode::Full, ..f },
            _ => {
                return Err(CoreError::Config(format!(
                    "unknown variant `{name}`; expected one of {}",
                    VARIANTS.join(", ")
                )))
            }
        })
    }

    pub fn relation_filter(&self) -> RelationFilter {
        RelationFilter {
            ontology: self.use_ontology,
            semantic: self.use_semantics,
            ddi: self.use_ddi_relations,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub embed_dim: usize,
    pub rgcn_layers: usize,
    pub dropout: f64,
    pub fusion_layers: usize,
    pub heads: usize,
    pub lambda_rec: f64,
    pub rho: f64,
    pub tau: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub edge_drop: f64,
    pub threshold: f64,
    pub seed: u64,
    pub bce_eps: f64,
    pub ln_eps: f64,
    pub step: StepGranularity,
    pub fusion_interaction: FusionInteraction,
    /// ReLU after the last graph layer; identity otherwise.
    pub final_relu: bool,
    pub reverse_ontology: bool,
    pub eval_rounds: usize,
    pub eval_fraction: f64,
    pub bootstrap_replacement: bool,
    pub ddi_pairs: PairConvention,
    /// Jaccard / F1 score when prediction and truth are both empty.
    pub empty_match: f64,
    pub flags: AblationFlags,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            rgcn_layers: 2,
            dropout: 0.5,
            fusion_layers: 3,
            heads: 4,
            lambda_rec: 0.95,
            rho: 0.05,
            tau: 0.08,
            lr: 2e-4,
            weight_decay: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 200,
            edge_drop: 0.1,
            threshold: 0.5,
            seed: 42,
            bce_eps: 1e-12,
            ln_eps: 1e-9,
            step: StepGranularity::Visit,
            fusion_interaction: FusionInteraction::Product,
            final_relu: true,
            reverse_ontology: false,
            eval_rounds: 10,
            eval_fraction: 0.8,
            bootstrap_replacement: false,
            ddi_pairs: PairConvention::Ordered,
            empty_match: 1.0,
            flags: AblationFlags::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| CoreError::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(CoreError::Config(format!("invalid boolean `{v}` for `{key}`"))),
    }
}

impl HyperParams {
    /// Named presets. `mimic4` uses 100 epochs and `tau = 0.09`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" | "mimic3" => Ok(Self::default()),
            "mimic4" => Ok(Self {
                epochs: 100,
                tau: 0.09,
                ..Self::default()
            }),
            _ => Err(CoreError::Config(format!("unknown preset `{name}`"))),
        }
    }

    /// Sets one key. `preset` and `variant` replace whole groups.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let f = &mut self.flags;
        match key.trim() {
            "preset" => {
                let flags = self.flags;
                *self = Self::preset(v)?;
                self.flags = flags;
            }
            "variant" => self.flags = AblationFlags::variant(v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "rgcn_layers" => self.rgcn_layers = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "fusion_layers" => self.fusion_layers = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "lambda_rec" => self.lambda_rec = parse(key, v)?,
            "rho" => self.rho = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "edge_drop" => self.edge_drop = parse(key, v)?,
            "threshold" => self.threshold = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "bce_eps" => self.bce_eps = parse(key, v)?,
            "ln_eps" => self.ln_eps = parse(key, v)?,
            "step" => self.step = v.parse()?,
            "fusion_interaction" => self.fusion_interaction = v.parse()?,
            "final_relu" => self.final_relu = parse_bool(key, v)?,
            "reverse_ontology" => self.reverse_ontology = parse_bool(key, v)?,
            "eval_rounds" => self.eval_rounds = parse(key, v)?,
            "eval_fraction" => self.eval_fraction = parse(key, v)?,
            "bootstrap_replacement" => self.bootstrap_replacement = parse_bool(key, v)?,
            "ddi_pairs" => self.ddi_pairs = v.parse()?,
            "empty_match" => self.empty_match = parse(key, v)?,
            "use_medicine_kg" => f.use_medicine_kg = parse_bool(key, v)?,
            "use_demographics" => f.use_demographics = parse_bool(key, v)?,
            "use_fusion" => f.use_fusion = parse_bool(key, v)?,
            "use_apm" => f.use_apm = parse_bool(key, v)?,
            "use_ontology" => f.use_ontology = parse_bool(key, v)?,
            "use_semantics" => f.use_semantics = parse_bool(key, v)?,
            "use_ddi_relations" => f.use_ddi_relations = parse_bool(key, v)?,
            "history_mode" => f.history_mode = v.parse()?,
            other => return Err(CoreError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let f = &self.flags;
        vec![
            ("embed_dim", self.embed_dim.to_string()),
            ("rgcn_layers", self.rgcn_layers.to_string()),
            ("dropout", self.dropout.to_string()),
            ("fusion_layers", self.fusion_layers.to_string()),
            ("heads", self.heads.to_string()),
            ("lambda_rec", self.lambda_rec.to_string()),
            ("rho", self.rho.to_string()),
            ("tau", self.tau.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("epochs", self.epochs.to_string()),
            ("edge_drop", self.edge_drop.to_string()),
            ("threshold", self.threshold.to_string()),
            ("seed", self.seed.to_string()),
            ("bce_eps", self.bce_eps.to_string()),
            ("ln_eps", self.ln_eps.to_string()),
            ("step", self.step.to_string()),
            ("fusion_interaction", self.fusion_interaction.to_string()),
            ("final_relu", self.final_relu.to_string()),
            ("reverse_ontology", self.reverse_ontology.to_string()),
            ("eval_rounds", self.eval_rounds.to_string()),
            ("eval_fraction", self.eval_fraction.to_string()),
            ("bootstrap_replacement", self.bootstrap_replacement.to_string()),
            ("ddi_pairs", self.ddi_pairs.to_string()),
            ("empty_match", self.empty_match.to_string()),
            ("use_medicine_kg", f.use_medicine_kg.to_string()),
            ("use_demographics", f.use_demographics.to_string()),
            ("use_fusion", f.use_fusion.to_string()),
            ("use_apm", f.use_apm.to_string()),
            ("use_ontology", f.use_ontology.to_string()),
            ("use_semantics", f.use_semantics.to_string()),
            ("use_ddi_relations", f.use_ddi_relations.to_string()),
            ("history_mode", f.history_mode.to_string()),
        ]
    }

    /// Resolved config text; parses back to an equal value.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CoreError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| CoreError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut hp = Self::default();
        hp.apply_text(text)?;
        hp.validate()?;
        Ok(hp)
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::default();
        h.write(self.to_text().as_bytes());
        h.finish()
    }

    pub fn relation_options(&self) -> RelationOptions {
        RelationOptions {
            reverse_ontology: self.reverse_ontology,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(m.to_string()));
        if self.embed_dim == 0 || self.rgcn_layers == 0 || self.fusion_layers == 0 || self.heads == 0 {
            return bad("embed_dim, rgcn_layers, fusion_layers and heads must be positive");
        }
        if self.embed_dim % self.heads != 0 {
            return bad("embed_dim must be divisible by heads");
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.edge_drop) {
            return bad("dropout and edge_drop must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.lambda_rec) {
            return bad("lambda_rec must lie in [0, 1]");
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad("tau must lie in (0, 1)");
        }
        if !(self.rho > 0.0) {
            return bad("rho must be positive");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) {
            return bad("lr and adam_eps must be positive, weight_decay non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.bce_eps > 0.0 && self.bce_eps < 0.5) || !(self.ln_eps > 0.0) {
            return bad("bce_eps must lie in (0, 0.5) and ln_eps must be positive");
        }
        if self.eval_rounds == 0 || !(self.eval_fraction > 0.0 && self.eval_fraction <= 1.0) {
            return bad("eval_rounds must be positive and eval_fraction in (0, 1]");
        }
        if self.empty_match != 0.0 && self.empty_match != 1.0 {
            return bad("empty_match must be 0 or 1");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let h = HyperParams::default();
        assert_eq!((h.embed_dim, h.rgcn_layers, h.fusion_layers, h.heads), (64, 2, 3, 4));
        assert_eq!((h.lambda_rec, h.rho, h.tau), (0.95, 0.05, 0.08));
        assert_eq!((h.lr, h.weight_decay, h.dropout), (2e-4, 1e-4, 0.5));
        assert_eq!((h.epochs, h.edge_drop, h.threshold), (200, 0.1, 0.5));
        assert!(h.validate().is_ok());
    }

    #[test]
    fn text_round_trip_and_overrides() {
        let mut h = HyperParams::default();
        h.set("tau", "0.06").unwrap();
        h.set("variant", "no-fusion").unwrap();
        h.set("history_mode", "full").unwrap();
        let back = HyperParams::from_text(&h.to_text()).unwrap();
        assert_eq!(back, h);
        assert_eq!(back.fingerprint(), h.fingerprint());
        assert_ne!(HyperParams::default().fingerprint(), h.fingerprint());
    }

    #[test]
    fn mimic4_preset() {
        let h = HyperParams::from_text("preset = mimic4\nseed = 3 # comment\n").unwrap();
        assert_eq!((h.epochs, h.tau, h.seed), (100, 0.09, 3));
    }

    #[test]
    fn bad_input_is_reported() {
        assert!(HyperParams::from_text("nope = 1").is_err());
        assert!(HyperParams::from_text("tau = x").is_err());
        assert!(HyperParams::from_text("tau").is_err());
        assert!(HyperParams::from_text("heads = 5").is_err());
        assert!(HyperParams::from_text("rho = 0").is_err());
    }

    #[test]
    fn every_variant_resolves() {
        for v in VARIANTS {
            AblationFlags::variant(v).unwrap();
        }
        let g = AblationFlags::variant("no-medicine-kg-apm").unwrap();
        assert!(!g.use_medicine_kg && !g.use_apm);
    }
}
