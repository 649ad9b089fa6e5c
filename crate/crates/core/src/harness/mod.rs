//! Config-driven experiment runs and the `dgkd` command line.

mod config;
mod emit;

pub use config::{
    parse_config, parse_config_str, DatasetConfig, ExperimentConfig, LadderConfig, PlanConfig,
    StageOverride, SyntheticConfig, TrainConfig, SCHEMA_VERSION,
};
pub use emit::{
    emit_results, load_reports, stage_rows, summary_rows, write_tables, Manifest, ManifestEntry,
    RunTiming, StageRow, MANIFEST_FILE, REPORTS_FILE, RESOLVED_CONFIG_FILE,
};

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::metrics::{PlanReport, SummaryRow};
use crate::orchestrator::{DistillationPlan, GuidanceMode, PlanRunner};

/// The plan variants a subcommand expands to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    /// Every configured plan as written.
    Run,
    /// Each plan in dense-stochastic mode for each drop count.
    SweepT,
    /// Each plan under every guidance mode.
    CompareModes,
}

impl Suite {
    /// Concrete plans for one seed.
    pub fn plans(self, cfg: &ExperimentConfig, seed: u64) -> Vec<DistillationPlan> {
        let mut out = Vec::new();
        for pc in &cfg.plans {
            let base = pc.to_plan(&cfg.dataset, seed);
            match self {
                Suite::Run => out.push(base),
                Suite::CompareModes => {
                    for mode in GuidanceMode::ALL {
                        let mut p = base.clone();
                        p.mode = mode;
                        p.name = format!("{}-{mode}", pc.name);
                        out.push(p);
                    }
                }
                Suite::SweepT => {
                    let student = base.ladder.len() - 1;
                    let ts: Vec<usize> = if cfg.sweep_t.is_empty() {
                        (0..student).collect()
                    } else {
                        cfg.sweep_t.clone()
                    };
                    for t in ts {
                        let mut p = base.clone();
                        p.mode = GuidanceMode::DenseStochastic;
                        p.name = format!("{}-t{t}", pc.name);
                        let mut d = p.stage_distill(student).clone();
                        d.drop_trials = t;
                        p.stage_overrides.push((student, d));
                        out.push(p);
                    }
                }
            }
        }
        out
    }
}

/// Outcome of a suite: reports plus the checkpoint files written.
pub struct SuiteResult {
    pub reports: Vec<PlanReport>,
    pub checkpoints: Vec<PathBuf>,
}

/// Runs a suite over all seeds. Stages shared between plans (same recipe,
/// same seed) are trained once.
///
/// On failure the reports completed so far are returned with the error.
pub fn run_suite(
    cfg: &ExperimentConfig,
    suite: Suite,
    checkpoint_dir: Option<PathBuf>,
    verbose: bool,
) -> std::result::Result<SuiteResult, (SuiteResult, Error)> {
    let mut runner = PlanRunner::new();
    if let Some(dir) = checkpoint_dir {
        runner = runner.with_checkpoint_dir(dir);
    }
    runner.denominator = cfg.overlap_denominator;
    runner.verbose = verbose;
    let mut reports = Vec::new();
    let shared = if cfg.dataset.per_seed() {
        None
    } else {
        match cfg.dataset.build(cfg.seeds[0]) {
            Ok(d) => Some(d),
            Err(e) => return Err((finish(reports, &runner), e)),
        }
    };
    for &seed in &cfg.seeds {
        let per_seed;
        let dataset = match &shared {
            Some(d) => d,
            None => match cfg.dataset.build(seed) {
                Ok(d) => {
                    per_seed = d;
                    &per_seed
                }
                Err(e) => return Err((finish(reports, &runner), e)),
            },
        };
        for plan in suite.plans(cfg, seed) {
            match runner.run(&plan, dataset) {
                Ok(report) => {
                    if verbose {
                        eprintln!(
                            "{} seed {seed}: student top-1 {:.4}",
                            plan.name,
                            report.student().map_or(f64::NAN, |s| s.final_top1)
                        );
                    }
                    reports.push(report);
                }
                Err(abort) => {
                    let result = finish(reports, &runner);
                    return Err((result, abort.error));
                }
            }
        }
    }
    Ok(finish(reports, &runner))
}

fn finish(reports: Vec<PlanReport>, runner: &PlanRunner) -> SuiteResult {
    SuiteResult {
        reports,
        checkpoints: runner.written().to_vec(),
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "dgkd",
    version,
    about = "Dense teacher-assistant distillation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every configured plan for every seed.
    Run(RunArgs),
    /// Vary the number of dropped trainer sources, holding the plan fixed.
    SweepT(RunArgs),
    /// Train each plan under direct, chain, dense and dense-stochastic guidance.
    CompareModes(RunArgs),
    /// Rebuild tables from stored reports.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds replacing the configured list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Skip writing stage checkpoints.
    #[arg(long)]
    no_checkpoints: bool,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory containing reports.json; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            let cat = e.category();
            eprintln!("error [{cat:?}]: {e}");
            cat.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(a) => run_command(a, Suite::Run),
        Command::SweepT(a) => run_command(a, Suite::SweepT),
        Command::CompareModes(a) => run_command(a, Suite::CompareModes),
        Command::Report(a) => {
            let out = match (a.out, a.config) {
                (Some(out), _) => out,
                (None, Some(cfg)) => parse_config(&cfg)?.output_dir,
                (None, None) => {
                    return Err(Error::config(
                        "--out",
                        "either --out or --config is required",
                    ))
                }
            };
            let reports = load_reports(&out)?;
            write_tables(&reports, &out)?;
            print_summary(&summary_rows(&reports)?);
            Ok(())
        }
    }
}

fn run_command(args: RunArgs, suite: Suite) -> Result<()> {
    let mut cfg = parse_config(&args.config)?;
    if let Some(seeds) = args.seeds {
        if seeds.is_empty() {
            return Err(Error::config("--seeds", "at least one seed is required"));
        }
        cfg.seeds = seeds;
    }
    if let Some(out) = args.out {
        cfg.output_dir = out;
    }
    let out = cfg.output_dir.clone();
    let ckpt_dir = (!args.no_checkpoints).then(|| out.join("checkpoints"));
    match run_suite(&cfg, suite, ckpt_dir, !args.quiet) {
        Ok(res) => {
            emit_results(&res.reports, Some(&cfg), &out, &res.checkpoints)?;
            print_summary(&summary_rows(&res.reports)?);
            Ok(())
        }
        Err((res, e)) => {
            if !res.reports.is_empty() {
                emit_results(&res.reports, Some(&cfg), &out, &res.checkpoints)?;
                eprintln!(
                    "partial results for {} plan run(s) written to {}",
                    res.reports.len(),
                    out.display()
                );
            }
            Err(e)
        }
    }
}

fn print_summary(rows: &[SummaryRow]) {
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    let _ = writeln!(
        w,
        "{:<28} {:<22} {:>5} {:>10} {:>9} {:>9}",
        "plan", "path", "seed", "top1", "±", "overlap"
    );
    for r in rows {
        let _ = writeln!(
            w,
            "{:<28} {:<22} {:>5} {:>10.4} {:>9} {:>9}",
            r.plan,
            r.path,
            r.seed,
            r.student_top1,
            r.student_top1_std
                .map_or(String::new(), |s| format!("{s:.4}")),
            r.mean_adjacent_overlap
                .map_or(String::new(), |o| format!("{o:.4}")),
        );
    }
}
