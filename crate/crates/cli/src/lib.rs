//! The `rise` command line: synthetic data generation, training, evaluation,
//! gradient checks and ablation sweeps.
//!
//! Exit codes: 0 success, 1 check failure, 2 configuration error,
//! 3 I/O error, 4 training divergence.

pub mod manifest;

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use rise_core::gradcheck::{run_gradcheck, DEFAULT_TOLERANCE, DEFAULT_TRIALS};
use rise_core::losses::{AbsoluteMetric, InnerMetric, OuterMetric};
use rise_core::synth::{read_ground_truth, write_ground_truth};
use rise_core::{
    ablation_sweep, evaluate_ensemble, generate_synthetic, suite_variants, train, Dataset,
    EnsembleMember, HeadMode, OptimizerKind, RiseError, StudentModel, Suite, SupervisionSource,
    SynthParams, TeacherTable, TrainConfig,
};

pub use manifest::RunManifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "rise", version, about = "Distill vision-language teachers into small students")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-domain benchmark.
    Synth(SynthArgs),
    /// Train one student per teacher table.
    Train(TrainArgs),
    /// Evaluate a checkpoint or a probability-averaged ensemble.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of every loss term.
    Gradcheck(GradcheckArgs),
    /// Run an ablation suite over every target domain and seed.
    Ablate(AblateArgs),
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with generator parameters; flags override it.
    #[arg(long)]
    pub params_file: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub num_domains: Option<usize>,
    #[arg(long)]
    pub text_dim: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub samples_per_cell: Option<usize>,
    /// Domain shift strength β.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Anchor offset strength α.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Noise σ.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// `linear` or `tanh_mix`.
    #[arg(long, value_parser = parse_enum::<rise_core::synth::Nonlinearity>)]
    pub nonlinearity: Option<rise_core::synth::Nonlinearity>,
    #[arg(long)]
    pub mixing_gain: Option<f64>,
    #[arg(long)]
    pub teacher_logit_scale: Option<f64>,
    /// Also write `teacher_b.jsonl`, a second teacher with prototypes
    /// perturbed at this strength.
    #[arg(long)]
    pub second_teacher: Option<f64>,
}

/// Training flags shared by `train` and `ablate`; each overrides `--config`.
#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// JSON training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lambda3: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, value_parser = parse_enum::<AbsoluteMetric>)]
    pub metric_k: Option<AbsoluteMetric>,
    #[arg(long, value_parser = parse_enum::<OuterMetric>)]
    pub metric_k1: Option<OuterMetric>,
    #[arg(long, value_parser = parse_enum::<InnerMetric>)]
    pub metric_k2: Option<InnerMetric>,
    /// Multiply the hint term by t².
    #[arg(long)]
    pub hint_t_squared: bool,
    #[arg(long, value_parser = parse_enum::<SupervisionSource>)]
    pub supervision: Option<SupervisionSource>,
    #[arg(long, value_parser = parse_enum::<HeadMode>)]
    pub head: Option<HeadMode>,
    /// Width of the tanh trunk; 0 removes it.
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// `adam` or `sgd`.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Restrict λ to [0.1, 1] and t to [1, 3].
    #[arg(long)]
    pub paper_range: bool,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<TrainConfig, CliError> {
        let mut cfg: TrainConfig = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => TrainConfig::default(),
        };
        let l = &mut cfg.loss;
        if let Some(v) = self.lambda1 {
            l.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            l.lambda2 = v;
        }
        if let Some(v) = self.lambda3 {
            l.lambda3 = v;
        }
        if let Some(v) = self.temperature {
            l.temperature_t = v;
        }
        if let Some(v) = self.metric_k {
            l.metric_k = v;
        }
        if let Some(v) = self.metric_k1 {
            l.metric_k1 = v;
        }
        if let Some(v) = self.metric_k2 {
            l.metric_k2 = v;
        }
        if self.hint_t_squared {
            l.hint_t_squared = true;
        }
        if let Some(v) = self.supervision {
            cfg.supervision_source = v;
        }
        if let Some(v) = self.head {
            cfg.head_mode = v;
        }
        if let Some(v) = self.hidden_dim {
            cfg.hidden_dim = (v > 0).then_some(v);
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        match self.optimizer.as_deref() {
            None => {}
            Some("adam") => cfg.optimizer = OptimizerKind::default(),
            Some("sgd") => cfg.optimizer = OptimizerKind::SgdMomentum { momentum: 0.9 },
            Some(other) => return Err(CliError::Config(format!("unknown optimizer {other:?}"))),
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if self.paper_range {
            cfg.paper_range = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Teacher table; repeat to train one student per teacher.
    #[arg(long, required = true)]
    pub teacher: Vec<PathBuf>,
    /// Domain withheld from training and reported on.
    #[arg(long)]
    pub target_domain: Option<String>,
    #[arg(long)]
    pub out_model: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint; repeat to evaluate a probability-averaged ensemble.
    #[arg(long, required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// One table shared by all models, or one per model in the same order.
    #[arg(long, required = true)]
    pub teacher: Vec<PathBuf>,
    #[arg(long)]
    pub target_domain: Option<String>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    pub trials: usize,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Teacher table; the mix suite needs two.
    #[arg(long, required = true)]
    pub teacher: Vec<PathBuf>,
    /// losses, metrics, templates, supervision or mix.
    #[arg(long)]
    pub suite: String,
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Machine-readable records; the aligned table goes to `<report>.txt`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, env = "RISE_JOBS")]
    pub jobs: Option<usize>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] RiseError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(RiseError::Io { .. }) | CliError::Io { .. } => EXIT_IO,
            CliError::Core(RiseError::TrainingDiverged { .. }) => EXIT_DIVERGED,
            CliError::Core(_) | CliError::Config(_) => EXIT_CONFIG,
            CliError::CheckFailed(_) => EXIT_CHECK_FAILED,
        }
    }
}

/// Parses `args` (program name first) and runs the command, returning the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: &Command) -> Result<i32, CliError> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    match path {
        Some(p) => fs::write(p, text + "\n").map_err(|e| CliError::io(p, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn create_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e)),
        _ => Ok(()),
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<i32, CliError> {
    let mut p: SynthParams = match &a.params_file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => SynthParams::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$(
            if let Some(v) = a.$flag { p.$field = v; }
        )*};
    }
    set!(seed => seed, num_classes => num_classes, num_domains => num_domains, text_dim => text_dim,
        feature_dim => feature_dim, samples_per_cell => samples_per_cell, beta => domain_shift_strength,
        alpha => anchor_offset_strength, sigma => noise_sigma, nonlinearity => nonlinearity,
        mixing_gain => mixing_gain, teacher_logit_scale => teacher_logit_scale);
    p.validate()?;
    let bench = generate_synthetic(&p)?;

    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let data_path = a.out.join("data.jsonl");
    let teacher_path = a.out.join("teacher.jsonl");
    let truth_path = a.out.join("ground_truth.jsonl");
    bench.dataset.save(&data_path)?;
    bench.teacher.save(&teacher_path)?;
    write_ground_truth(&truth_path, &bench.teacher.classes, &bench.ground_truth)?;
    let mut outputs = vec![data_path.clone(), teacher_path.clone(), truth_path.clone()];

    if Dataset::load(&data_path)? != bench.dataset
        || TeacherTable::load(&teacher_path)? != bench.teacher
        || read_ground_truth(&truth_path)?.1 != bench.ground_truth
    {
        return Err(CliError::CheckFailed("written files do not read back identically".into()));
    }
    if let Some(strength) = a.second_teacher {
        let second = bench.perturbed_teacher("synthetic-b", strength, p.seed.wrapping_add(1))?;
        let path = a.out.join("teacher_b.jsonl");
        second.save(&path)?;
        outputs.push(path);
    }

    let mut config = serde_json::to_value(&p).expect("params serialize");
    if let Some(s) = a.second_teacher {
        config["second_teacher_strength"] = json!(s);
    }
    let mut m = RunManifest::new("synth", config, Some(p.seed));
    if let Some(pf) = &a.params_file {
        m.add_input(pf).map_err(|e| CliError::io(pf, e))?;
    }
    let digests: Vec<_> = outputs
        .iter()
        .map(|o| manifest::file_digest(o).map(|d| json!({"path": o.display().to_string(), "sha256": d})))
        .collect::<io::Result<_>>()
        .map_err(|e| CliError::io(&a.out, e))?;
    let manifest_path = a.out.join("manifest.json");
    write_json(Some(&manifest_path), &json!({"manifest": m, "outputs": digests}))?;
    println!(
        "wrote {} samples, {} classes, {} domains to {}",
        bench.dataset.samples.len(),
        bench.dataset.classes.len(),
        bench.dataset.domains.len(),
        a.out.display()
    );
    Ok(EXIT_OK)
}

/// `model.json` for a single teacher, `model.<teacher_id>.json` otherwise.
pub fn checkpoint_path(base: &Path, teacher_id: &str, many: bool) -> PathBuf {
    if !many {
        return base.to_path_buf();
    }
    let id: String = teacher_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    let stem = base.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match base.extension() {
        Some(ext) => format!("{stem}.{id}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{id}"),
    };
    base.with_file_name(name)
}

pub fn cmd_train(a: &TrainArgs) -> Result<i32, CliError> {
    let cfg = TrainConfig {
        held_out_domain: a.target_domain.clone(),
        ..a.cfg.resolve()?
    };
    let dataset = Dataset::load(&a.data)?;
    if let Some(t) = &a.target_domain {
        if dataset.domain_index(t).is_none() {
            return Err(CliError::Config(format!("unknown target domain {t:?}")));
        }
    }
    let tables = a
        .teacher
        .iter()
        .map(TeacherTable::load)
        .collect::<Result<Vec<_>, _>>()?;
    for t in &tables {
        dataset.check_vocabulary(t)?;
    }
    let mut m = RunManifest::new("train", serde_json::to_value(&cfg).expect("config serializes"), Some(cfg.seed));
    m.add_input(&a.data).map_err(|e| CliError::io(&a.data, e))?;
    for t in &a.teacher {
        m.add_input(t).map_err(|e| CliError::io(t, e))?;
    }

    create_parent(&a.out_model)?;
    let mut runs = Vec::new();
    for table in &tables {
        let outcome = train(&dataset.samples, table, &cfg)?;
        let path = checkpoint_path(&a.out_model, &table.teacher_id, tables.len() > 1);
        outcome.model.save(&path)?;
        println!(
            "teacher {}: held-out accuracy {:.4} (epoch {}), checkpoint {}",
            table.teacher_id,
            outcome.report.held_out_accuracy,
            outcome.report.selected_epoch,
            path.display()
        );
        runs.push(json!({
            "teacher_id": table.teacher_id,
            "checkpoint": path.display().to_string(),
            "report": outcome.report,
            "source_domains": outcome.source_domains.iter().map(|&d| &dataset.domains[d]).collect::<Vec<_>>(),
            "train_size": outcome.train_size,
            "val_size": outcome.val_size,
        }));
    }
    if let Some(r) = &a.report {
        create_parent(r)?;
    }
    write_json(a.report.as_deref(), &json!({"manifest": m, "runs": runs}))?;
    Ok(EXIT_OK)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<i32, CliError> {
    if a.teacher.len() != 1 && a.teacher.len() != a.models.len() {
        return Err(CliError::Config(format!(
            "{} teacher tables for {} models; give one shared table or one per model",
            a.teacher.len(),
            a.models.len()
        )));
    }
    let dataset = Dataset::load(&a.data)?;
    let tables = a
        .teacher
        .iter()
        .map(TeacherTable::load)
        .collect::<Result<Vec<_>, _>>()?;
    for t in &tables {
        dataset.check_vocabulary(t)?;
    }
    let models = a
        .models
        .iter()
        .map(StudentModel::load)
        .collect::<Result<Vec<_>, _>>()?;
    let target = match &a.target_domain {
        Some(t) => Some(
            dataset
                .domain_index(t)
                .ok_or_else(|| CliError::Config(format!("unknown target domain {t:?}")))?,
        ),
        None => None,
    };
    let samples: Vec<_> = dataset
        .samples
        .iter()
        .filter(|s| target.is_none_or(|d| s.domain == d))
        .cloned()
        .collect();
    let members: Vec<EnsembleMember> = models
        .iter()
        .enumerate()
        .map(|(k, model)| EnsembleMember {
            model,
            table: &tables[if tables.len() == 1 { 0 } else { k }],
        })
        .collect();

    let mut singles = Vec::new();
    for (member, path) in members.iter().zip(&a.models) {
        let r = evaluate_ensemble(std::slice::from_ref(member), &samples, target)?;
        println!("{}: accuracy {:.4}", path.display(), r.held_out_accuracy);
        singles.push(json!({"model": path.display().to_string(), "accuracy": r.held_out_accuracy}));
    }
    let ensemble = evaluate_ensemble(&members, &samples, target)?;
    if members.len() > 1 {
        println!("ensemble of {}: accuracy {:.4}", members.len(), ensemble.held_out_accuracy);
    }

    let mut m = RunManifest::new(
        "eval",
        json!({"target_domain": a.target_domain, "models": a.models, "teacher": a.teacher}),
        None,
    );
    for p in a.models.iter().chain(&a.teacher).chain(std::iter::once(&a.data)) {
        m.add_input(p).map_err(|e| CliError::io(p, e))?;
    }
    write_json(
        a.report.as_deref(),
        &json!({"manifest": m, "singles": singles, "ensemble": ensemble}),
    )?;
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<i32, CliError> {
    let report = run_gradcheck(a.seed, a.trials, a.tolerance)?;
    for c in &report.cases {
        let status = if c.worst_rel_error < a.tolerance { "ok" } else { "FAIL" };
        println!("{:<36} worst rel error {:.3e}  {status}", c.case, c.worst_rel_error);
    }
    if let Some(path) = &a.report {
        let m = RunManifest::new(
            "gradcheck",
            json!({"seed": a.seed, "trials": a.trials, "tolerance": a.tolerance}),
            Some(a.seed),
        );
        write_json(Some(path), &json!({"manifest": m, "report": report}))?;
    }
    let failures = report.failures();
    if failures.is_empty() {
        return Ok(EXIT_OK);
    }
    for f in &failures {
        eprintln!(
            "gradient mismatch in {}: {}[{}] at trial seed {}: analytic {:.6e}, numeric {:.6e}",
            f.case, f.tensor, f.index, f.seed, f.analytic, f.numeric
        );
    }
    Ok(EXIT_CHECK_FAILED)
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<i32, CliError> {
    let suite: Suite = a.suite.parse()?;
    if a.seeds == 0 {
        return Err(CliError::Config("--seeds must be positive".into()));
    }
    let base = a.cfg.resolve()?;
    let dataset = Dataset::load(&a.data)?;
    let tables = a
        .teacher
        .iter()
        .map(TeacherTable::load)
        .collect::<Result<Vec<_>, _>>()?;
    let grid = suite_variants(suite, &base, tables.len())?;
    let seeds: Vec<u64> = (0..a.seeds).map(|k| base.seed.wrapping_add(k)).collect();
    let report = ablation_sweep(&dataset, &tables, &grid, &seeds, a.jobs)?;

    let mut m = RunManifest::new(
        "ablate",
        json!({"suite": suite, "seeds": seeds, "base": base}),
        Some(base.seed),
    );
    m.add_input(&a.data).map_err(|e| CliError::io(&a.data, e))?;
    for t in &a.teacher {
        m.add_input(t).map_err(|e| CliError::io(t, e))?;
    }
    let table = report.to_table();
    print!("{table}");
    if let Some(path) = &a.report {
        create_parent(path)?;
        let mut out = String::new();
        for r in &report.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out.push_str(&json!({"summary": report.summary, "manifest": m}).to_string());
        out.push('\n');
        fs::write(path, out).map_err(|e| CliError::io(path, e))?;
        let mut txt = path.as_os_str().to_owned();
        txt.push(".txt");
        let txt = PathBuf::from(txt);
        fs::File::create(&txt)
            .and_then(|mut f| f.write_all(table.as_bytes()))
            .map_err(|e| CliError::io(&txt, e))?;
    }
    Ok(EXIT_OK)
}
