use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cumulant_probe::harness::{self, AnalyzeOptions, DumpIndex, GroupBy, IndexEntry};
use cumulant_probe::mc::{self, Histogram, McConfig};
use cumulant_probe::store::{self, Dtype};
use cumulant_probe::synth::{write_synthetic, SynthMode, SynthSpec};
use cumulant_probe::{Error, DEFAULT_MAX_ORDER};

const JOBS_ENV: &str = "CUMULANT_PROBE_JOBS";

#[derive(Parser)]
#[command(name = "cumulant-probe", version, about = "Cumulant analysis of per-layer logit dumps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Entropy decomposition and cumulant profile of every layer.
    Analyze(AnalyzeArgs),
    /// Mean and std across dumps, per group.
    Aggregate(AggregateArgs),
    /// Difference table between two groups of dumps.
    CompareGroups(CompareArgs),
    /// Monte Carlo check of cumulant additivity on one layer.
    McVerify(McArgs),
    /// Write a synthetic dump.
    Synth(SynthArgs),
    /// Check a dump and its manifest; exit 2 on any violation.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct Common {
    /// Highest cumulant order.
    #[arg(long, default_value_t = DEFAULT_MAX_ORDER)]
    max_order: usize,
    /// Inverse temperature (default: from the manifest).
    #[arg(long)]
    beta: Option<f64>,
    /// Output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Worker threads (default: one per core).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    dump: PathBuf,
    /// Keep per-token cumulants in JSON output.
    #[arg(long)]
    per_token: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupKey {
    Label,
    CheckpointStep,
}

impl From<GroupKey> for GroupBy {
    fn from(g: GroupKey) -> Self {
        match g {
            GroupKey::Label => GroupBy::Label,
            GroupKey::CheckpointStep => GroupBy::CheckpointStep,
        }
    }
}

#[derive(Args)]
struct AggregateArgs {
    /// Sweep index listing dumps and group labels.
    #[arg(long, conflicts_with = "dump", required_unless_present = "dump")]
    index: Option<PathBuf>,
    /// Dumps to aggregate as one group.
    #[arg(long, num_args = 1..)]
    dump: Vec<PathBuf>,
    /// Group label for `--dump` inputs.
    #[arg(long, default_value = "all")]
    label: String,
    #[arg(long, value_enum, default_value_t = GroupKey::Label)]
    group_by: GroupKey,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct CompareArgs {
    /// Sweep index; pick the groups with `--group-a` and `--group-b`.
    #[arg(long, requires_all = ["group_a", "group_b"], conflicts_with_all = ["dumps_a", "dumps_b"])]
    index: Option<PathBuf>,
    #[arg(long)]
    group_a: Option<String>,
    #[arg(long)]
    group_b: Option<String>,
    #[arg(long, value_enum, default_value_t = GroupKey::Label)]
    group_by: GroupKey,
    /// Dumps of group A (instead of an index).
    #[arg(long, num_args = 1.., requires = "dumps_b")]
    dumps_a: Vec<PathBuf>,
    /// Dumps of group B (instead of an index).
    #[arg(long, num_args = 1.., requires = "dumps_a")]
    dumps_b: Vec<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct McArgs {
    #[arg(long)]
    dump: PathBuf,
    /// Layer to check (default: last).
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, default_value_t = 1_000_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write a histogram of the aggregate samples as CSV.
    #[arg(long)]
    histogram: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    bins: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeName {
    Constant,
    IidGaussian,
    SharedDirection,
    TwoPoint,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeName {
    F32,
    F64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    mode: ModeName,
    #[arg(long)]
    layers: usize,
    #[arg(long)]
    tokens: usize,
    #[arg(long)]
    vocab: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = DtypeName::F32)]
    dtype: DtypeName,
    /// iid-gaussian: logit standard deviation.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// shared-direction: coupling at layer 0.
    #[arg(long, default_value_t = 0.5)]
    strength: f64,
    /// shared-direction: coupling added per layer.
    #[arg(long, default_value_t = 0.5)]
    ramp: f64,
    /// two-point: probability of the larger deviation.
    #[arg(long, default_value_t = 0.75)]
    p: f64,
    /// two-point: gap between the two deviations.
    #[arg(long, default_value_t = 1.0)]
    d: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    dump: PathBuf,
}

enum Failure {
    Usage(String),
    Data(Error),
    Violations(PathBuf, Vec<store::Violation>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            if code == 1 {
                report(&serde_json::json!({
                    "kind": "usage",
                    "message": usage_message(&e),
                    "path": null,
                }));
            }
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(message)) => {
            report(&serde_json::json!({"kind": "usage", "message": message, "path": null}));
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            report(&serde_json::json!({
                "kind": e.kind(),
                "message": e.to_string(),
                "path": e.path().map(|p| p.display().to_string()),
            }));
            ExitCode::from(2)
        }
        Err(Failure::Violations(path, violations)) => {
            report(&serde_json::json!({
                "kind": "validation",
                "message": format!("{} violation(s)", violations.len()),
                "path": path.display().to_string(),
                "violations": violations.iter().map(ToString::to_string).collect::<Vec<_>>(),
            }));
            ExitCode::from(2)
        }
    }
}

fn usage_message(e: &clap::Error) -> String {
    let text = e.render().to_string();
    let first = text.lines().next().unwrap_or_default();
    first.strip_prefix("error: ").unwrap_or(first).to_string()
}

/// One JSON object per line on stderr.
fn report(value: &serde_json::Value) {
    eprintln!("{value}");
}

fn jobs(flag: Option<usize>) -> std::result::Result<Option<usize>, Failure> {
    match std::env::var(JOBS_ENV) {
        Ok(v) if !v.trim().is_empty() => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Failure::Usage(format!("{JOBS_ENV} must be a positive integer, got {v:?}"))),
        },
        _ => match flag {
            Some(0) => Err(Failure::Usage("--jobs must be positive".into())),
            other => Ok(other),
        },
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Analyze(a) => in_pool(&a.common, || analyze(&a)),
        Command::Aggregate(a) => in_pool(&a.common, || aggregate(&a)),
        Command::CompareGroups(a) => in_pool(&a.common, || compare(&a)),
        Command::McVerify(a) => in_pool(&a.common, || mc_verify(&a)),
        Command::Synth(a) => synth(&a),
        Command::Validate(a) => {
            let violations = store::validate_file(&a.dump)?;
            if violations.is_empty() {
                println!("{}: ok", a.dump.display());
                Ok(())
            } else {
                Err(Failure::Violations(a.dump.clone(), violations))
            }
        }
    }
}

fn in_pool(common: &Common, f: impl FnOnce() -> Outcome + Send) -> Outcome {
    let jobs = jobs(common.jobs)?;
    cumulant_probe::with_jobs(jobs, f)?
}

fn options(common: &Common, keep_per_token: bool) -> AnalyzeOptions {
    AnalyzeOptions {
        max_order: common.max_order,
        beta: common.beta,
        keep_per_token,
    }
}

fn emit(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| Error::Io {
                    path: "<stdout>".into(),
                    source: e,
                })?;
        }
    }
    Ok(())
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn analyze(a: &AnalyzeArgs) -> Outcome {
    let analysis = harness::analyze_file(&a.dump, &options(&a.common, a.per_token))?;
    let text = match a.common.format {
        Format::Csv => analysis.to_csv(),
        Format::Json => analysis.to_json(),
    };
    emit(a.common.out.as_deref(), &text)
}

fn index_of(paths: &[PathBuf], label: &str) -> DumpIndex {
    DumpIndex {
        dumps: paths
            .iter()
            .map(|p| IndexEntry {
                path: p.clone(),
                group_label: Some(label.to_string()),
                checkpoint_step: None,
            })
            .collect(),
        failures: Vec::new(),
    }
}

fn aggregate(a: &AggregateArgs) -> Outcome {
    let (index, by) = match &a.index {
        Some(path) => (DumpIndex::load(path)?, a.group_by.into()),
        None => (index_of(&a.dump, &a.label), GroupBy::Label),
    };
    let reports = harness::aggregate_index(&index, by, &options(&a.common, false))?;
    let text = match a.common.format {
        Format::Csv => harness::aggregates_to_csv(&reports),
        Format::Json => to_json(&serde_json::json!({
            "meta": {"relative_depth_convention": harness::RELATIVE_DEPTH_CONVENTION},
            "groups": reports,
        })),
    };
    emit(a.common.out.as_deref(), &text)
}

fn compare(a: &CompareArgs) -> Outcome {
    let opts = options(&a.common, false);
    let (ra, rb) = match &a.index {
        Some(path) => {
            let index = DumpIndex::load(path)?;
            let reports = harness::aggregate_index(&index, a.group_by.into(), &opts)?;
            let pick = |label: &Option<String>| {
                let label = label.as_deref().unwrap_or_default();
                reports
                    .iter()
                    .find(|r| r.group_label == label)
                    .cloned()
                    .ok_or_else(|| {
                        let known: Vec<&str> = reports.iter().map(|r| r.group_label.as_str()).collect();
                        Failure::Data(Error::Invalid(format!(
                            "group {label:?} not in index (groups: {})",
                            known.join(", ")
                        )))
                    })
            };
            (pick(&a.group_a)?, pick(&a.group_b)?)
        }
        None if !a.dumps_a.is_empty() => {
            let la = a.group_a.clone().unwrap_or_else(|| "a".into());
            let lb = a.group_b.clone().unwrap_or_else(|| "b".into());
            let mut ga = harness::aggregate_index(&index_of(&a.dumps_a, &la), GroupBy::Label, &opts)?;
            let mut gb = harness::aggregate_index(&index_of(&a.dumps_b, &lb), GroupBy::Label, &opts)?;
            (ga.remove(0), gb.remove(0))
        }
        None => {
            return Err(Failure::Usage(
                "give --index with --group-a/--group-b, or --dumps-a and --dumps-b".into(),
            ))
        }
    };
    let table = harness::compare_groups(&ra, &rb)?;
    let text = match a.common.format {
        Format::Csv => table.to_csv(),
        Format::Json => to_json(&table),
    };
    emit(a.common.out.as_deref(), &text)
}

fn mc_verify(a: &McArgs) -> Outcome {
    let mut dump = store::read_dump(&a.dump)?;
    if let Some(beta) = a.common.beta {
        let mut m = dump.manifest().clone();
        m.beta = beta;
        dump = dump.with_manifest(m)?;
    }
    let layer = a.layer.unwrap_or(dump.layers().saturating_sub(1));
    let cfg = McConfig::new(a.samples, a.seed, a.common.max_order);
    let samples = mc::sample_aggregate_deviation(&dump, layer, &cfg)?;
    let report = mc::report_from_samples(&dump, layer, &cfg, &samples)?;
    if let Some(path) = &a.histogram {
        emit(Some(path), &Histogram::new(&samples, a.bins)?.to_csv())?;
    }
    let text = match a.common.format {
        Format::Csv => report.to_csv(),
        Format::Json => to_json(&report),
    };
    emit(a.common.out.as_deref(), &text)
}

fn synth(a: &SynthArgs) -> Outcome {
    let mode = match a.mode {
        ModeName::Constant => SynthMode::Constant,
        ModeName::IidGaussian => SynthMode::IidGaussian { sigma: a.sigma },
        ModeName::SharedDirection => SynthMode::SharedDirection {
            strength: a.strength,
            ramp: a.ramp,
        },
        ModeName::TwoPoint => SynthMode::TwoPoint { p: a.p, d: a.d },
    };
    let dtype = match a.dtype {
        DtypeName::F32 => Dtype::F32,
        DtypeName::F64 => Dtype::F64,
    };
    let spec = SynthSpec::new(a.layers, a.tokens, a.vocab, mode, a.seed).with_dtype(dtype);
    write_synthetic(&spec, &a.out)?;
    Ok(())
}
