use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use medrec_core::cohort::synthetic::{generate, SyntheticConfig};
use medrec_core::cohort::{parse_cohort, write_split, KgSide};
use medrec_core::config::HyperParams;
use medrec_core::error::{CoreError, Result};
use medrec_core::evaluation::{format_table, EvalOptions};
use medrec_core::harness::{self, Dataset, Part, CONFIG_SNAPSHOT, SPLIT_FILE};
use medrec_core::kg::build_kg;
use medrec_core::train::{EpochRecord, Trainer};

#[derive(Debug, Parser)]
#[command(name = "medrec", version, about = "Knowledge-graph medication recommendation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic cohort with planted prescribing rules.
    GenerateData(GenerateArgs),
    /// Validate a dataset directory and print cohort and graph statistics.
    BuildKg(DataArgs),
    /// Train a model and write checkpoint, log and resolved configuration.
    Train(TrainArgs),
    /// Bootstrap evaluation of a checkpoint.
    Evaluate(EvaluateArgs),
    /// Ranked medicines for the last admission of each given patient.
    Recommend(RecommendArgs),
    /// Train and evaluate one model per DDI threshold.
    TauSweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub patients: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub mean_visits: Option<f64>,
    #[arg(long)]
    pub max_visits: Option<usize>,
    #[arg(long)]
    pub ddi_density: Option<f64>,
    /// Cap on the ground-truth DDI rate produced by the chosen pairs.
    #[arg(long)]
    pub max_ddi_rate: Option<f64>,
    #[arg(long)]
    pub rules: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named preset applied before the file: default, mimic3, mimic4.
    #[arg(long)]
    pub preset: Option<String>,
    /// Ablation variant, e.g. no-apm or full-history.
    #[arg(long)]
    pub variant: Option<String>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<HyperParams> {
        let mut hp = match &self.preset {
            Some(p) => HyperParams::preset(p)?,
            None => HyperParams::default(),
        };
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| CoreError::Io {
                path: path.clone(),
                source: e,
            })?;
            hp.apply_text(&text)?;
        }
        if let Some(v) = &self.variant {
            hp.set("variant", v)?;
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CoreError::Config(format!("expected KEY=VALUE, got `{kv}`")))?;
            hp.set(k.trim(), v.trim())?;
        }
        if let Some(e) = self.epochs {
            hp.epochs = e;
        }
        if let Some(s) = self.seed {
            hp.seed = s;
        }
        if let Some(t) = self.threshold {
            hp.threshold = t;
        }
        hp.validate()?;
        Ok(hp)
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory with vocab, cohort and relation files.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// train, validation, test or all.
    #[arg(long, default_value = "test")]
    pub part: String,
    /// Also write the report as JSON here; a config snapshot goes beside it.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Add rows for the recorded prescriptions and the frequency baseline.
    #[arg(long)]
    pub references: bool,
}

#[derive(Debug, Args)]
pub struct RecommendArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Cohort file with the patients to score; defaults to the dataset cohort.
    #[arg(long)]
    pub patients: Option<PathBuf>,
    /// Restrict to these patient ids.
    #[arg(long = "patient")]
    pub ids: Vec<String>,
    /// JSON-lines output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated thresholds.
    #[arg(long, default_value = "0.05,0.06,0.07,0.08,0.09,0.10", value_delimiter = ',')]
    pub taus: Vec<f64>,
    #[arg(long, default_value = "test")]
    pub part: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CoreError + '_ {
    move |e| CoreError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn snapshot_beside(output: &Path, hp: &HyperParams) -> Result<()> {
    let dir = output.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    write(&dir.join(CONFIG_SNAPSHOT), &hp.to_text())
}

fn load_checkpoint(data: &Path, ckpt: &Path) -> Result<(Dataset, Trainer)> {
    let text = checkpoint_config(ckpt)?;
    let hp = HyperParams::from_text(&text)?;
    let ds = Dataset::load(data, &hp)?;
    let tr = Trainer::load(ckpt, &ds.cohort.vocab, &ds.relations)?;
    Ok((ds, tr))
}

/// Configuration text stored in a checkpoint.
fn checkpoint_config(ckpt: &Path) -> Result<String> {
    let c = medrec_core::train::load_container(ckpt)?;
    Ok(c.meta("config").map_err(CoreError::from)?.to_string())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(a) => generate_data(a),
        Command::BuildKg(a) => build_kg_stats(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Recommend(a) => recommend(a),
        Command::TauSweep(a) => tau_sweep(a),
    }
}

fn generate_data(a: GenerateArgs) -> Result<()> {
    let mut cfg = SyntheticConfig {
        patients: a.patients,
        ..SyntheticConfig::default()
    };
    if let Some(v) = a.mean_visits {
        cfg.mean_visits = v;
    }
    if let Some(v) = a.max_visits {
        cfg.max_visits = v;
    }
    if let Some(v) = a.ddi_density {
        cfg.ddi_density = v;
    }
    if let Some(v) = a.max_ddi_rate {
        cfg.max_ddi_rate = v;
    }
    if let Some(v) = a.rules {
        cfg.rules = v;
    }
    let data = generate(&cfg, a.seed)?;
    data.write(&a.out)?;
    let split = medrec_core::cohort::split_cohort(&data.cohort, a.seed)?;
    write_split(&a.out.join(SPLIT_FILE), &split)?;
    println!("{}", data.cohort.stats());
    println!("planted rules: {}", data.rules.len());
    println!("DDI pairs: {}", data.ddi.len());
    println!("wrote {}", a.out.display());
    Ok(())
}

fn build_kg_stats(a: DataArgs) -> Result<()> {
    let hp = a.config.resolve()?;
    let ds = Dataset::load(&a.data, &hp)?;
    println!("{}", ds.cohort.stats());
    let filter = hp.flags.relation_filter();
    for side in [KgSide::Clinical, KgSide::Medicine] {
        let rels = ds.relations.side(side);
        let names: Vec<&str> = rels.relations.iter().map(|r| r.name.as_str()).collect();
        let (mut graphs, mut nodes, mut edges, mut max_nodes) = (0usize, 0usize, 0usize, 0usize);
        for adm in ds.cohort.patients.iter().flat_map(|p| &p.admissions) {
            if side == KgSide::Medicine && adm.medicines.is_empty() {
                continue;
            }
            let kg = build_kg(adm, side, &ds.relations, &ds.cohort.vocab, filter)?;
            graphs += 1;
            nodes += kg.num_nodes();
            edges += kg.edges.len();
            max_nodes = max_nodes.max(kg.num_nodes());
        }
        let g = graphs.max(1) as f64;
        println!(
            "{side} graphs: {graphs}, mean nodes {:.2} (max {max_nodes}), mean edges {:.2}, relations [{}]",
            nodes as f64 / g,
            edges as f64 / g,
            names.join(", ")
        );
    }
    println!("DDI pairs: {}", ds.relations.ddi_pair_count());
    println!(
        "split: {} train / {} validation / {} test",
        ds.split.train.len(),
        ds.split.validation.len(),
        ds.split.test.len()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let hp = a.data.config.resolve()?;
    let ds = Dataset::load(&a.data.data, &hp)?;
    println!("resolved configuration:\n{}", hp.to_text());
    println!("{}", EpochRecord::HEADER);
    let tr = harness::train(&ds, &hp, Some(&a.out), |r| println!("{}", r.log_line()))?;
    println!(
        "best epoch {} (validation Jaccard {}), checkpoint {}",
        tr.best_epoch,
        tr.best_val_jaccard.map_or("-".into(), |v| format!("{v:.4}")),
        a.out.join(harness::CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let part: Part = a.part.parse()?;
    let (ds, tr) = load_checkpoint(&a.data, &a.checkpoint)?;
    let model = tr.best_model();
    let (report, _) = harness::evaluate(&model, &ds, part, "Model")?;
    let mut rows = vec![report.clone()];
    if a.references {
        let opts = EvalOptions::from_hyper(&model.hp);
        rows.insert(0, harness::ground_truth_report(&ds, part, &opts)?);
        rows.push(harness::frequency_prior_report(&ds, part, &opts)?);
    }
    print!("{}", format_table(&rows.iter().collect::<Vec<_>>()));
    println!(
        "{} rounds of {} / {} patients, seed {}",
        report.rounds, report.sample_size, report.n_patients, report.seed
    );
    if let Some(path) = &a.json {
        write(path, &report.to_json())?;
        snapshot_beside(path, &model.hp)?;
    }
    Ok(())
}

fn recommend(a: RecommendArgs) -> Result<()> {
    let (ds, tr) = load_checkpoint(&a.data, &a.checkpoint)?;
    let model = tr.best_model();
    let cohort = match &a.patients {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            parse_cohort(path, &text, ds.cohort.vocab.clone())?
        }
        None => ds.cohort.clone(),
    };
    let patients: Vec<_> = if a.ids.is_empty() {
        cohort.patients.iter().collect()
    } else {
        a.ids
            .iter()
            .map(|id| cohort.patient(id).ok_or_else(|| CoreError::Invalid(format!("unknown patient `{id}`"))))
            .collect::<Result<_>>()?
    };
    let mut out = String::new();
    for p in patients {
        out.push_str(&harness::recommend(&model, p, &ds.cohort.vocab, &ds.relations)?.to_json_line());
        out.push('\n');
    }
    match &a.out {
        Some(path) => {
            write(path, &out)?;
            snapshot_beside(path, &model.hp)?;
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(out.as_bytes()).map_err(io_err(Path::new("<stdout>")))?;
        }
    }
    Ok(())
}

fn tau_sweep(a: SweepArgs) -> Result<()> {
    let part: Part = a.part.parse()?;
    let hp = a.data.config.resolve()?;
    let ds = Dataset::load(&a.data.data, &hp)?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    write(&a.out.join(CONFIG_SNAPSHOT), &hp.to_text())?;
    let points = harness::tau_sweep(&ds, &hp, &a.taus, part)?;
    let reports: Vec<_> = points.iter().map(|p| &p.report).collect();
    print!("{}", format_table(&reports));
    let csv = harness::sweep_csv(&points);
    write(&a.out.join("sweep.csv"), &csv)?;
    println!("wrote {}", a.out.join("sweep.csv").display());
    Ok(())
}
