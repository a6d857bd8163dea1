//! Command-line surface over `janus-core`.
//!
//! Exit codes: 0 success, 1 failed verification or runtime error, 2 usage
//! or input error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use janus_core::config::{RunConfig, SEED_ENV};
use janus_core::evaluation::{compare_paradigms, eval_last_token, Curves, EvalReport};
use janus_core::finetune::{accuracy, finetune, read_task_tsv, Classifier};
use janus_core::fusion::{leakage_check, leakage_check_with_mask, FusionMask, LeakageReport};
use janus_core::genome::TokenSequence;
use janus_core::model::JanusModel;
use janus_core::training::{
    load_checkpoint, micro_config, model_grad_check, save_checkpoint, MetricsWriter, Objective, TrainConfig, Trainer,
};
use janus_core::Error;

#[derive(Debug, Parser)]
#[command(name = "janus", version, about = "Janus bidirectional DNA pretraining, evaluation and verification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain an encoder and write metrics and checkpoints.
    Pretrain(PretrainArgs),
    /// Score a checkpoint: last-token accuracy, or classification accuracy
    /// for a fine-tuned checkpoint with --data.
    Eval(EvalArgs),
    /// Fine-tune a pretrained checkpoint as a sequence classifier.
    Finetune(FinetuneArgs),
    /// Train matched Janus and masked-LM models and write paired curves.
    Compare(CompareArgs),
    /// Print the fusion admissibility mask as a 0/1 grid.
    MaskDump(MaskDumpArgs),
    /// Verify that no prediction row can see its own target token.
    LeakageCheck(LeakageArgs),
    /// Compare analytic and finite-difference gradients of a micro model.
    GradCheck(GradCheckArgs),
    /// Report total and activated parameter counts.
    AuditParams(AuditArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML run config with [model], [train], [data], [eval], [finetune].
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dotted override such as train.steps=10; may be repeated.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for model, training and fine-tuning; wins over JANUS_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct OutArgs {
    /// Output directory; receives manifest.toml and config.toml.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub out: OutArgs,
    /// Continue from a checkpoint, using its stored configuration.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: PathBuf,
    /// Labeled TSV for a fine-tuned checkpoint.
    #[arg(long, value_name = "TSV")]
    pub data: Option<PathBuf>,
    /// Dotted override applied to the checkpoint's stored config.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Pretrained checkpoint.
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: PathBuf,
    /// Labeled TSV: sequence<TAB>label.
    #[arg(long, value_name = "TSV")]
    pub data: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MaskFormat {
    Text,
    Pbm,
}

#[derive(Debug, Args)]
pub struct MaskDumpArgs {
    /// Sequence length; the grid is 2T x 2T.
    #[arg(long = "T", value_name = "T")]
    pub seq_len: usize,
    /// Minimum offset between a query and an admissible key of the other
    /// direction.
    #[arg(long, default_value_t = 2)]
    pub gap: usize,
    /// Output format: space-separated text, or a plain PBM image.
    #[arg(long, value_enum, default_value_t = MaskFormat::Text)]
    pub format: MaskFormat,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct LeakageArgs {
    /// Sequence length.
    #[arg(long = "T", value_name = "T", default_value_t = 16)]
    pub seq_len: usize,
    /// Mask offset to check; values other than 2 are deliberately broken.
    #[arg(long, default_value_t = 2)]
    pub gap: usize,
    /// Floating-point precision of the model under test.
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    /// Largest admissible logit change; defaults to 1e-5 at f32 and 1e-10
    /// at f64.
    #[arg(long)]
    pub tol: Option<f64>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Sequence length.
    #[arg(long = "T", value_name = "T", default_value_t = 6)]
    pub seq_len: usize,
    /// Largest admissible relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Seed of the micro model and its input.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dotted model override applied to the micro model, e.g.
    /// model.n_experts=2.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Verification(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Verification(_) | Failure::Runtime(_) => 1,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_)
            | Error::File { .. }
            | Error::Line { .. }
            | Error::Fasta { .. }
            | Error::InvalidSymbol { .. }
            | Error::SpecialToken { .. }
            | Error::UnknownCorpus(_)
            | Error::Checkpoint(_)
            | Error::CheckpointVersion { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, &argv) {
        Ok(()) => 0,
        Err(f) => {
            match &f {
                Failure::Verification(m) => eprintln!("verification failed: {m}"),
                Failure::Usage(m) | Failure::Runtime(m) => eprintln!("error: {m}"),
            }
            f.code()
        }
    }
}

fn dispatch(command: Command, argv: &[String]) -> Outcome {
    match command {
        Command::Pretrain(a) => pretrain(a, argv),
        Command::Eval(a) => eval(a, argv),
        Command::Finetune(a) => finetune_cmd(a, argv),
        Command::Compare(a) => compare(a, argv),
        Command::MaskDump(a) => mask_dump(a, argv),
        Command::LeakageCheck(a) => leakage(a, argv),
        Command::GradCheck(a) => grad(a, argv),
        Command::AuditParams(a) => audit(a, argv),
    }
}

fn resolve(c: &ConfigArgs) -> Result<RunConfig, Failure> {
    let env = std::env::var(SEED_ENV).ok();
    Ok(RunConfig::resolve(c.config.as_deref(), &c.overrides, env.as_deref(), c.seed)?)
}

fn out_dir(o: &OutArgs, command: &str) -> Result<PathBuf, Failure> {
    let dir = o.out.clone().unwrap_or_else(|| Path::new("runs").join(command));
    fs::create_dir_all(&dir).map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

/// Git-style content hash: SHA-256 over `blob <len>\0<bytes>`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    argv: &'a [String],
    seed: u64,
    version: &'a str,
    /// Resolved configuration, loadable with --config.
    config_file: &'a str,
    inputs: Vec<InputHash>,
}

#[derive(Serialize)]
struct InputHash {
    path: String,
    sha256: String,
}

fn manifest(dir: &Path, command: &str, argv: &[String], cfg: &RunConfig, inputs: &[&Path]) -> Outcome {
    let config_text = cfg.to_toml();
    write(&dir.join("config.toml"), &config_text)?;
    let mut hashes = vec![InputHash { path: "config.toml".into(), sha256: content_hash(config_text.as_bytes()) }];
    for p in inputs {
        let bytes = fs::read(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
        hashes.push(InputHash { path: p.display().to_string(), sha256: content_hash(&bytes) });
    }
    let m = Manifest {
        command,
        argv,
        seed: cfg.train.seed,
        version: env!("CARGO_PKG_VERSION"),
        config_file: "config.toml",
        inputs: hashes,
    };
    write(&dir.join("manifest.toml"), &toml::to_string(&m).expect("manifest serializes"))
}

fn limit(mut test: Vec<TokenSequence>, max: usize) -> Vec<TokenSequence> {
    if max > 0 {
        test.truncate(max);
    }
    test
}

fn pretrain(a: PretrainArgs, argv: &[String]) -> Outcome {
    let dir = out_dir(&a.out, "pretrain")?;
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Failure::Runtime(format!("{}: {e}", ckpt_dir.display())))?;
    let (mut trainer, cfg, inputs) = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let cfg = RunConfig {
                model: ckpt.model_config.clone(),
                train: ckpt.train_config.clone(),
                data: ckpt.data_config.clone(),
                ..resolve(&a.config)?
            };
            let corpus = cfg.data.load(cfg.train.seq_len)?;
            (Trainer::resume(ckpt, corpus.train)?, cfg, vec![path.as_path()])
        }
        None => {
            let cfg = resolve(&a.config)?;
            let corpus = cfg.data.load(cfg.train.seq_len)?;
            for w in &corpus.warnings {
                eprintln!("warning: {w}");
            }
            let t = Trainer::new(cfg.model.clone(), cfg.train.clone(), cfg.data.clone(), corpus.train)?;
            (t, cfg, a.config.config.iter().map(PathBuf::as_path).collect())
        }
    };
    let mut inputs = inputs;
    if let Some(p) = &cfg.data.path {
        inputs.push(p.as_path());
    }
    manifest(&dir, "pretrain", argv, &cfg, &inputs)?;
    let mut metrics = MetricsWriter::open(&dir.join("metrics.csv"))?;
    let steps = cfg.train.steps;
    let every = (steps / 20).max(1);
    let last = trainer.run(
        steps,
        |row| {
            metrics.write(row)?;
            if row.step % every == 0 || row.step == steps {
                eprintln!("step {:>6}  ce {:.4}  aux {:.4}  lr {:.2e}", row.step, row.ce, row.aux, row.lr);
            }
            Ok(())
        },
        Some(&ckpt_dir),
    )?;
    println!(
        "pretrained {} steps; final CE {:.4}; checkpoint {}",
        trainer.step,
        trainer.last_ce,
        last.expect("checkpoint directory given").display()
    );
    Ok(())
}

fn eval(a: EvalArgs, argv: &[String]) -> Outcome {
    let dir = out_dir(&a.out, "eval")?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let mut cfg = RunConfig {
        model: ckpt.model_config.clone(),
        train: ckpt.train_config.clone(),
        data: ckpt.data_config.clone(),
        ..RunConfig::default()
    };
    for o in &a.overrides {
        cfg.apply_override(o)?;
    }
    let mut inputs = vec![a.checkpoint.as_path()];
    let report = match &a.data {
        Some(tsv) => {
            inputs.push(tsv.as_path());
            let clf = Classifier::from_checkpoint(&ckpt)?;
            let examples = read_task_tsv(tsv)?;
            let acc = accuracy(&clf, &examples)?;
            EvalReport {
                model_id: a.checkpoint.display().to_string(),
                task: format!("classify/{}", tsv.display()),
                n: examples.len(),
                accuracy: acc,
                ce: f64::NAN,
                perplexity: f64::NAN,
                secs_per_1k_steps: None,
            }
        }
        None => {
            let model = JanusModel::from_store(ckpt.model_config.clone(), ckpt.params.clone())?;
            let test = limit(cfg.data.load(cfg.train.seq_len)?.test, cfg.eval.max_sequences);
            eval_last_token(
                &model,
                cfg.train.objective,
                &test,
                &a.checkpoint.display().to_string(),
                &format!("last_token/{}", cfg.data.corpus),
            )?
        }
    };
    manifest(&dir, "eval", argv, &cfg, &inputs)?;
    write(&dir.join("eval.csv"), &format!("{}\n{}\n", EvalReport::HEADER, report.csv_line()))?;
    println!("{report}");
    Ok(())
}

fn finetune_cmd(a: FinetuneArgs, argv: &[String]) -> Outcome {
    let dir = out_dir(&a.out, "finetune")?;
    let cfg = resolve(&a.config)?;
    let base = load_checkpoint(&a.checkpoint)?;
    let examples = read_task_tsv(&a.data)?;
    let mut inputs = vec![a.checkpoint.as_path(), a.data.as_path()];
    inputs.extend(a.config.config.as_deref());
    manifest(&dir, "finetune", argv, &cfg, &inputs)?;
    let (clf, report) = finetune(&base, &examples, &cfg.finetune)?;
    let mut csv = String::from("epoch,train_loss,validation_accuracy\n");
    for e in &report.epochs {
        let _ = writeln!(csv, "{},{},{}", e.epoch, e.train_loss, e.validation_accuracy);
    }
    write(&dir.join("finetune.csv"), &csv)?;
    let path = dir.join("classifier.jnsc");
    save_checkpoint(&path, &clf.to_checkpoint(&base))?;
    println!(
        "fine-tuned on {} examples; best validation accuracy {:.4} at epoch {}; classifier {}",
        report.train_examples,
        report.validation_accuracy,
        report.best_epoch,
        path.display()
    );
    Ok(())
}

fn compare(a: CompareArgs, argv: &[String]) -> Outcome {
    let dir = out_dir(&a.out, "compare")?;
    let cfg = resolve(&a.config)?;
    let janus = TrainConfig { objective: Objective::Janus, ..cfg.train.clone() };
    let mlm = TrainConfig { objective: Objective::Mlm, ..cfg.train.clone() };
    let mut corpus = cfg.data.load(cfg.train.seq_len)?;
    corpus.test = limit(corpus.test, cfg.eval.max_sequences);
    let inputs: Vec<&Path> = a.config.config.iter().map(PathBuf::as_path).collect();
    manifest(&dir, "compare", argv, &cfg, &inputs)?;
    let c = compare_paradigms(&cfg.model, &janus, &mlm, &cfg.data, &corpus, cfg.eval.eval_every)?;
    write(&dir.join("curves.csv"), &c.curves.to_csv())?;
    write(
        &dir.join("reports.csv"),
        &format!("{}\n{}\n{}\n", EvalReport::HEADER, c.janus_report.csv_line(), c.mlm_report.csv_line()),
    )?;
    save_checkpoint(&dir.join("janus.jnsc"), &c.janus.checkpoint())?;
    save_checkpoint(&dir.join("mlm.jnsc"), &c.mlm.checkpoint())?;
    println!("{}\n{}", c.janus_report, c.mlm_report);
    print_curves(&c.curves);
    Ok(())
}

fn print_curves(c: &Curves) {
    println!("{:>7} {:>10} {:>10}", "step", "janus", "mlm");
    for p in &c.points {
        println!("{:>7} {:>10.4} {:>10.4}", p.step, p.janus_accuracy, p.mlm_accuracy);
    }
}

fn mask_dump(a: MaskDumpArgs, argv: &[String]) -> Outcome {
    let mask = FusionMask::with_gap(a.seq_len, a.gap)?;
    let text = match a.format {
        MaskFormat::Text => mask.to_text(),
        MaskFormat::Pbm => mask.to_pbm(),
    };
    let dir = out_dir(&a.out, "mask-dump")?;
    manifest(&dir, "mask-dump", argv, &RunConfig::default(), &[])?;
    print!("{text}");
    Ok(())
}

fn leakage(a: LeakageArgs, argv: &[String]) -> Outcome {
    let cfg = resolve(&a.config)?;
    let tol = a.tol.unwrap_or(match a.precision {
        Precision::F32 => 1e-5,
        Precision::F64 => 1e-10,
    });
    let report: LeakageReport = if a.gap == 2 {
        match a.precision {
            Precision::F32 => leakage_check::<f32>(&cfg.model, a.seq_len, tol)?,
            Precision::F64 => leakage_check::<f64>(&cfg.model, a.seq_len, tol)?,
        }
    } else {
        let mask = FusionMask::with_gap(a.seq_len, a.gap)?;
        let ids: Vec<usize> = (0..a.seq_len).map(|i| (i * 7 + cfg.model.seed as usize) % 4).collect();
        match a.precision {
            Precision::F32 => leakage_check_with_mask(&JanusModel::<f32>::new(cfg.model.clone())?, &ids, &mask, tol)?,
            Precision::F64 => leakage_check_with_mask(&JanusModel::<f64>::new(cfg.model.clone())?, &ids, &mask, tol)?,
        }
    };
    let dir = out_dir(&a.out, "leakage-check")?;
    let inputs: Vec<&Path> = a.config.config.iter().map(PathBuf::as_path).collect();
    manifest(&dir, "leakage-check", argv, &cfg, &inputs)?;
    let rel = if report.passed() { '≤' } else { '>' };
    println!(
        "T={} seed={} gap={}: {} checks, max diff {:.1e} {rel} {:e}",
        report.seq_len, cfg.model.seed, a.gap, report.checks, report.max_diff, tol
    );
    if report.passed() {
        Ok(())
    } else {
        for v in report.violations.iter().take(5) {
            println!("  row {} moved by {:.3e} when token {} became {}", v.row, v.diff, v.target, v.substitute);
        }
        Err(Failure::Verification(format!("{} leaking row/substitution pairs", report.violations.len())))
    }
}

fn grad(a: GradCheckArgs, argv: &[String]) -> Outcome {
    let mut cfg = RunConfig { model: micro_config(a.seed), ..RunConfig::default() };
    for o in &a.overrides {
        cfg.apply_override(o)?;
    }
    cfg.model.validate()?;
    let report = model_grad_check(&cfg.model, a.seq_len, a.step)?;
    let dir = out_dir(&a.out, "grad-check")?;
    manifest(&dir, "grad-check", argv, &cfg, &[])?;
    let worst = report.max_rel_error();
    println!("{} coordinates, max relative error {worst:.3e} (tolerance {:e})", report.entries.len(), a.tol);
    if worst < a.tol {
        Ok(())
    } else {
        let w = report.worst().expect("non-empty report");
        Err(Failure::Verification(format!(
            "parameter {} index {}: analytic {:.6e} vs numeric {:.6e}",
            w.param, w.index, w.analytic, w.numeric
        )))
    }
}

fn audit(a: AuditArgs, argv: &[String]) -> Outcome {
    let cfg = resolve(&a.config)?;
    let model = JanusModel::<f32>::new(cfg.model.clone())?;
    let dir = out_dir(&a.out, "audit-params")?;
    let inputs: Vec<&Path> = a.config.config.iter().map(PathBuf::as_path).collect();
    manifest(&dir, "audit-params", argv, &cfg, &inputs)?;
    println!("{}", model.audit());
    Ok(())
}
