//! `combogait` subcommands. [`run`] parses arguments, executes, and maps
//! failures to exit codes: 1 for invalid input, 2 for malformed files, 3
//! for a failed gradient check.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use combogait::data::{generate_dataset, Dataset, GenerateOptions, RangeTag, SilhouetteSequence, SmplSequence, MANIFEST_FILE};
use combogait::eval::{evaluate, extract_embedding, Protocol};
use combogait::oracle::{run_suite, GRADCHECK_TOLERANCE};
use combogait::training::{load_checkpoint, save_checkpoint, write_loss_trace, Trainer};
use combogait::{Config, Error};

pub const EXIT_INVALID: i32 = 1;
pub const EXIT_FORMAT: i32 = 2;
pub const EXIT_GRADCHECK: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "combogait", version, about = "Multi-modal, multi-task gait recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset with a manifest.
    Generate(GenerateArgs),
    /// Train from a config file on a generated dataset.
    Train(TrainArgs),
    /// Probe-gallery CMC and attribute accuracy as a CSV report.
    Eval(EvalArgs),
    /// Finite-difference check of every operation and the micro model.
    Gradcheck,
    /// Embedding and attribute predictions for one sequence pair.
    Infer(InferArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub subjects: usize,
    #[arg(long = "sequences-per-subject", default_value_t = 4)]
    pub seqs: usize,
    #[arg(long, default_value_t = 30)]
    pub frames: usize,
    /// Trailing subjects placed entirely in the `test` split.
    #[arg(long, default_value_t = 0)]
    pub test_subjects: usize,
    /// Trailing sequences of each other subject placed in the `probe` split.
    #[arg(long, default_value_t = 0)]
    pub probe_sequences: usize,
    /// Comma-separated range tags, assigned cyclically.
    #[arg(long, value_delimiter = ',', default_value = "close")]
    pub ranges: Vec<String>,
    /// Comma-separated walking directions in degrees.
    #[arg(long, value_delimiter = ',', default_value = "0,30")]
    pub views: Vec<u32>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML file; omitted sections and keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory holding `manifest.csv`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss trace CSV; defaults to the checkpoint path with `.loss.csv`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest of the probes (and of the gallery unless `--gallery`).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Separate gallery manifest; every row is a gallery entry.
    #[arg(long)]
    pub gallery: Option<PathBuf>,
    /// `first` or `train-gallery`; ignored with `--gallery`.
    #[arg(long, default_value = "first")]
    pub protocol: String,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub sil: PathBuf,
    #[arg(long)]
    pub smpl: PathBuf,
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Format { .. } => EXIT_FORMAT,
        _ => EXIT_INVALID,
    }
}

/// Keeps glibc from unmapping and re-faulting large activation buffers
/// on every training step.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| unsafe {
            libc::mallopt(libc::M_MMAP_MAX, 0);
            libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        });
    }
}

/// Parses `argv` (including the program name) and runs the subcommand,
/// writing normal output to `out`.
pub fn run<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cmd: Command, out: &mut dyn Write) -> combogait::Result<i32> {
    match cmd {
        Command::Generate(a) => generate(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Gradcheck => gradcheck(out),
        Command::Infer(a) => infer(a, out),
    }
}

fn generate(a: GenerateArgs, out: &mut dyn Write) -> combogait::Result<i32> {
    let ranges = a.ranges.iter().map(|r| RangeTag::parse(r)).collect::<combogait::Result<Vec<_>>>()?;
    let opts = GenerateOptions {
        seed: a.seed,
        subjects: a.subjects,
        seqs_per_subject: a.seqs,
        frames: a.frames,
        test_subjects: a.test_subjects,
        probe_seqs: a.probe_sequences,
        ranges,
        views_deg: a.views,
    };
    let manifest = generate_dataset(&opts, &a.out)?;
    writeln!(out, "wrote {} sequences to {}", manifest.rows.len(), a.out.display())?;
    for (split, n) in manifest.split_counts() {
        writeln!(out, "{split}: {n} subjects")?;
    }
    Ok(0)
}

/// Reads a config file (or defaults) and applies the seed override.
pub fn load_config(path: Option<&Path>) -> combogait::Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::from_toml(&std::fs::read_to_string(p)?)?,
        None => Config::default(),
    };
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs, out: &mut dyn Write) -> combogait::Result<i32> {
    let cfg = load_config(a.config.as_deref())?;
    let split = cfg.data.train_split.clone();
    let ds = Dataset::load(&a.data.join(MANIFEST_FILE), |r| r.split == split)?;
    if ds.is_empty() {
        return Err(Error::data(format!("no `{split}` rows in {}", a.data.display())));
    }
    let mut trainer = Trainer::new(cfg, ds.subjects.len())?;
    let trace = trainer.run(&ds, Some(&a.out))?;
    save_checkpoint(&a.out, &trainer.config, &trainer.model)?;
    let trace_path = a.trace.unwrap_or_else(|| a.out.with_extension("loss.csv"));
    write_loss_trace(&trace_path, &trace)?;
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        writeln!(
            out,
            "{} iterations, loss {:.5} -> {:.5}",
            trace.len(),
            first.total,
            last.total
        )?;
    }
    writeln!(out, "checkpoint {}", a.out.display())?;
    Ok(0)
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> combogait::Result<i32> {
    let protocol = Protocol::parse(&a.protocol)?;
    let (_, mut model) = load_checkpoint(&a.checkpoint)?;
    let report = evaluate(&mut model, &a.manifest, a.gallery.as_deref(), protocol)?;
    std::fs::write(&a.report, report.to_csv())?;
    let all = report.overall();
    writeln!(
        out,
        "rank1 {:.2} rank5 {:.2} age {:.2} bmi {:.2} sex {:.2} ({} probes)",
        all.cmc[0], all.cmc[4], all.accuracy.age, all.accuracy.bmi, all.accuracy.sex, all.n_probes
    )?;
    Ok(0)
}

fn gradcheck(out: &mut dyn Write) -> combogait::Result<i32> {
    let checks = run_suite()?;
    let mut failed = 0;
    for c in &checks {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        writeln!(out, "{:<34} {:>10.3e}  {:<4} {}", c.name, c.max_relative_error, verdict, c.worst)?;
        failed += usize::from(!c.passed());
    }
    writeln!(out, "{} checks, {failed} above {GRADCHECK_TOLERANCE:e}", checks.len())?;
    Ok(if failed == 0 { 0 } else { EXIT_GRADCHECK })
}

fn infer(a: InferArgs, out: &mut dyn Write) -> combogait::Result<i32> {
    let (_, mut model) = load_checkpoint(&a.checkpoint)?;
    let sil = SilhouetteSequence::read(&a.sil)?;
    let smpl = SmplSequence::read(&a.smpl)?;
    let inf = extract_embedding(&mut model, &sil, &smpl)?;
    let sex = ["female", "male"].get(inf.sex).copied().unwrap_or("?");
    writeln!(out, "age_class {}", inf.age)?;
    writeln!(out, "sex {sex}")?;
    writeln!(out, "bmi_class {}", inf.bmi)?;
    writeln!(out, "embedding {}", inf.embedding.len())?;
    let values: Vec<String> = inf.embedding.iter().map(|v| format!("{v:.6}")).collect();
    writeln!(out, "{}", values.join(" "))?;
    Ok(0)
}
