//! `leaf`: run experiments, sweeps, ablations and the verification suites.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::{fs, io};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use leaf_core::experiment::{ablate, aggregate, evaluate_checkpoint, read_summary_csv, sweep};
use leaf_core::verify::{gradcheck_suite, oracle_suite};
use leaf_core::{
    run_experiment, AblationRow, LeafError, Method, OracleSizes, RunConfig, SummaryRow, SweepCell,
    Variant,
};

const EXIT_FAILURE: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "leaf", version, about = "Semi-supervised training with expert fusion and ambiguous pseudo-labels")]
struct Cli {
    /// Output root. Overrides the LEAF_OUT environment variable; default `out`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and evaluate one configuration.
    Run(ConfigArgs),
    /// Run a grid of label counts, methods and seeds.
    Sweep(SweepArgs),
    /// Compare the full model with its component ablations.
    Ablate(AblateArgs),
    /// Finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Gating, partition and loss oracle suites.
    Oracle(OracleArgs),
    /// Aggregate summary CSVs from earlier runs.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Inline override, applied after the config file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    base: ConfigArgs,

    /// Comma-separated labeled-set sizes.
    #[arg(long, value_delimiter = ',', default_value = "70,140,280")]
    labels: Vec<usize>,

    /// Number of seeds per cell (seeds 0..N).
    #[arg(long, default_value_t = 5)]
    seeds: u64,

    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',', default_value = "leaf,supervised_only,fixed_threshold")]
    methods: Vec<String>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    base: ConfigArgs,

    /// Number of shared seeds (0..N).
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Random cases per checked operation.
    #[arg(long, default_value_t = 100)]
    trials: usize,

    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[arg(long, default_value_t = OracleSizes::default().gating)]
    gating_cases: usize,

    #[arg(long, default_value_t = OracleSizes::default().partition)]
    partition_cases: usize,

    #[arg(long, default_value_t = OracleSizes::default().loss)]
    loss_cases: usize,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Summary CSV files or directories searched recursively for `summary.csv`.
    #[arg(required = true, value_name = "PATH")]
    paths: Vec<PathBuf>,

    /// Reload every run directory's checkpoint and confirm it reproduces
    /// the recorded accuracies.
    #[arg(long)]
    check_checkpoints: bool,
}

/// Error carrying the process exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn invalid(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_INVALID,
            error: error.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<LeafError>() {
            Some(e) => exit_code_for(e),
            None => EXIT_FAILURE,
        };
        Self { code, error }
    }
}

impl From<LeafError> for Failure {
    fn from(e: LeafError) -> Self {
        Self {
            code: exit_code_for(&e),
            error: e.into(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Self {
            code: EXIT_FAILURE,
            error: e.into(),
        }
    }
}

fn exit_code_for(e: &LeafError) -> u8 {
    match e {
        LeafError::Config(_) | LeafError::Param(_) => EXIT_INVALID,
        LeafError::NumericAbort { .. } | LeafError::NonFinite { .. } | LeafError::NonFiniteGradient(_) => {
            EXIT_NUMERIC
        }
        _ => EXIT_FAILURE,
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let out_root = output_root(cli.out.as_deref());
    let result = match cli.command {
        Command::Run(args) => cmd_run(&args, &out_root),
        Command::Sweep(args) => cmd_sweep(&args, &out_root),
        Command::Ablate(args) => cmd_ablate(&args, &out_root),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
        Command::Oracle(args) => cmd_oracle(&args),
        Command::Report(args) => cmd_report(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn output_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os("LEAF_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path).map_err(Failure::invalid)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(args.overrides.iter().map(String::as_str))
        .map_err(Failure::invalid)?;
    cfg.validate().map_err(Failure::invalid)?;
    Ok(cfg)
}

fn warn_about_ignored_keys(cfg: &RunConfig, args: &ConfigArgs) {
    if cfg.method == Method::SupervisedOnly {
        let set_inline = args.overrides.iter().any(|o| o.trim_start().starts_with("lambda"));
        if set_inline || cfg.lambda != RunConfig::default().lambda {
            log::warn!("method=supervised_only ignores lambda = {}", cfg.lambda);
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::from)
}

fn cmd_run(args: &ConfigArgs, out_root: &Path) -> CmdResult {
    let cfg = load_config(args)?;
    warn_about_ignored_keys(&cfg, args);
    let run_id = cfg.run_id();
    log::info!("run {run_id}: method={} seed={} n_labeled={}", cfg.method, cfg.seed, cfg.n_labeled);

    let output = run_experiment(&cfg)?;
    let dir = out_root.join(&run_id);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    cfg.save(dir.join("config"))?;
    write_file(&dir.join("metrics.jsonl"), &output.history_jsonl()?)?;
    let row = SummaryRow::new(&cfg, &output);
    write_file(
        &dir.join("summary.csv"),
        &format!("{}\n{}\n", SummaryRow::HEADER, row.to_csv_line()),
    )?;
    output.params.save(dir.join("checkpoint"))?;

    println!(
        "{run_id} balanced_acc={:.4} overall_acc={:.4} -> {}",
        row.balanced_acc,
        row.overall_acc,
        dir.display()
    );
    Ok(())
}

fn cmd_sweep(args: &SweepArgs, out_root: &Path) -> CmdResult {
    let base = load_config(&args.base)?;
    if args.labels.is_empty() || args.seeds == 0 || args.methods.is_empty() {
        return Err(Failure::invalid(anyhow::anyhow!(
            "sweep needs at least one label count, seed and method"
        )));
    }
    let methods = args
        .methods
        .iter()
        .map(|m| m.trim().parse::<Method>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(Failure::invalid)?;
    for &n in &args.labels {
        RunConfig { n_labeled: n, ..base.clone() }
            .validate()
            .map_err(Failure::invalid)?;
    }
    let seeds: Vec<u64> = (0..args.seeds).collect();
    log::info!(
        "sweep: {} label counts x {} methods x {} seeds",
        args.labels.len(),
        methods.len(),
        seeds.len()
    );

    let (cells, runs) = sweep(&base, &args.labels, &seeds, &methods);
    let mut run_rows = vec![SummaryRow::HEADER.to_string()];
    for run in &runs {
        match &run.result {
            Ok(row) => run_rows.push(row.to_csv_line()),
            Err(e) => log::warn!(
                "cell n_labeled={} method={} seed={} failed: {e}",
                run.n_labeled,
                run.method,
                run.seed
            ),
        }
    }
    let table = csv_table(SweepCell::HEADER, cells.iter().map(SweepCell::to_csv_line));

    fs::create_dir_all(out_root)?;
    write_file(&out_root.join("sweep.csv"), &table)?;
    write_file(&out_root.join("sweep_runs.csv"), &(run_rows.join("\n") + "\n"))?;
    print!("{table}");
    Ok(())
}

fn cmd_ablate(args: &AblateArgs, out_root: &Path) -> CmdResult {
    let base = load_config(&args.base)?;
    if args.seeds == 0 {
        return Err(Failure::invalid(anyhow::anyhow!("ablate needs at least one seed")));
    }
    let seeds: Vec<u64> = (0..args.seeds).collect();
    log::info!("ablate: {} variants x {} seeds", Variant::ALL.len(), seeds.len());
    let rows = ablate(&base, &seeds, &Variant::ALL);
    let table = csv_table(AblationRow::HEADER, rows.iter().map(AblationRow::to_csv_line));
    fs::create_dir_all(out_root)?;
    write_file(&out_root.join("ablation.csv"), &table)?;
    print!("{table}");
    if rows.iter().any(|r| r.failures > 0) {
        log::warn!("some ablation runs failed; see the failures column");
    }
    Ok(())
}

fn csv_table(header: &str, lines: impl Iterator<Item = String>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for line in lines {
        out.push_str(&line);
        out.push('\n');
    }
    out
}

fn suite_outcome(report: &leaf_core::SuiteReport) -> CmdResult {
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_FAILURE,
            error: anyhow::anyhow!("verification failed"),
        })
    }
}

fn cmd_gradcheck(args: &GradcheckArgs) -> CmdResult {
    if args.trials == 0 {
        return Err(Failure::invalid(anyhow::anyhow!("--trials must be >= 1")));
    }
    suite_outcome(&gradcheck_suite(args.trials, args.seed)?)
}

fn cmd_oracle(args: &OracleArgs) -> CmdResult {
    let sizes = OracleSizes {
        gating: args.gating_cases,
        partition: args.partition_cases,
        loss: args.loss_cases,
    };
    if sizes.gating == 0 || sizes.partition == 0 || sizes.loss == 0 {
        return Err(Failure::invalid(anyhow::anyhow!("case counts must be >= 1")));
    }
    suite_outcome(&oracle_suite(sizes, args.seed)?)
}

fn collect_summaries(path: &Path, found: &mut Vec<PathBuf>) -> io::Result<()> {
    if path.is_file() {
        found.push(path.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(path)?
        .map(|e| e.map(|e| e.path()))
        .collect::<io::Result<_>>()?;
    entries.sort();
    for entry in entries {
        if entry.is_dir() {
            collect_summaries(&entry, found)?;
        } else if entry.file_name().is_some_and(|n| n == "summary.csv") {
            found.push(entry);
        }
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> CmdResult {
    let mut files = Vec::new();
    for path in &args.paths {
        if !path.exists() {
            return Err(Failure::invalid(anyhow::anyhow!("{} does not exist", path.display())));
        }
        collect_summaries(path, &mut files)?;
    }
    if files.is_empty() {
        return Err(Failure::invalid(anyhow::anyhow!("no summary.csv files found")));
    }

    let mut rows = Vec::new();
    let mut mismatches = 0;
    for file in &files {
        let file_rows = read_summary_csv(file).with_context(|| format!("reading {}", file.display()))?;
        if args.check_checkpoints {
            mismatches += check_run_dir(file, &file_rows)?;
        }
        rows.extend(file_rows);
    }
    print!("{}", csv_table(SweepCell::HEADER, aggregate(&rows).iter().map(SweepCell::to_csv_line)));
    if mismatches > 0 {
        return Err(Failure {
            code: EXIT_FAILURE,
            error: anyhow::anyhow!("{mismatches} checkpoint(s) did not reproduce their summary"),
        });
    }
    Ok(())
}

/// Re-evaluates the checkpoint next to `summary`; returns 1 on mismatch.
fn check_run_dir(summary: &Path, rows: &[SummaryRow]) -> Result<usize, Failure> {
    let dir = summary.parent().unwrap_or(Path::new("."));
    let (config, checkpoint) = (dir.join("config"), dir.join("checkpoint"));
    if !config.is_file() || !checkpoint.is_file() || rows.len() != 1 {
        log::warn!("{}: not a single-run directory, skipping checkpoint check", dir.display());
        return Ok(0);
    }
    let cfg = RunConfig::load(&config).map_err(Failure::invalid)?;
    let metrics = evaluate_checkpoint(&cfg, &checkpoint)?;
    let row = &rows[0];
    if metrics.balanced_accuracy == row.balanced_acc && metrics.overall_accuracy == row.overall_acc {
        log::info!("{}: checkpoint reproduces the summary", dir.display());
        Ok(0)
    } else {
        log::error!(
            "{}: checkpoint gives balanced {} overall {}, summary says {} / {}",
            dir.display(),
            metrics.balanced_accuracy,
            metrics.overall_accuracy,
            row.balanced_acc,
            row.overall_acc
        );
        Ok(1)
    }
}
