use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use biasprobe::audit::{AuditReport, AuditSpec, Auditor, MetricToggles};
use biasprobe::report::{self, ReportFormat};

/// Gender-bias audits of masked language models.
#[derive(Parser, Debug)]
#[command(name = "biasprobe", version)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a config file without running anything.
    Validate(RunArgs),
    /// Run every enabled stage for every grid cell.
    Audit(RunArgs),
    /// Run only the probe stage.
    Probe(RunArgs),
    /// Run only SEAT and LPBS.
    Intrinsic(RunArgs),
    /// Run only the downstream evaluation.
    Extrinsic(RunArgs),
    /// Re-render tables and charts from saved report.json files.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Audit config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir`.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Root seed; overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Grid cells run concurrently; overrides `jobs`.
    #[arg(short, long)]
    jobs: Option<usize>,
    /// Artifact cache; overrides `cache_dir`.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Harvesting corpus, one sentence per line; overrides `corpus`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output formats (structured, tabular, plots).
    #[arg(short, long, value_delimiter = ',', default_value = "structured,tabular,plots")]
    format: Vec<ReportFormat>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// A report.json, or an audit output directory holding one per cell.
    #[arg(short, long)]
    input: PathBuf,
    /// Output directory; defaults to beside the input.
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(short, long, value_delimiter = ',', default_value = "structured,tabular,plots")]
    format: Vec<ReportFormat>,
}

#[derive(Debug)]
enum Failure {
    Validation(String),
    Stage(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Stage(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(m) | Failure::Stage(m) => f.write_str(m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    All,
    Probe,
    Intrinsic,
    Extrinsic,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Validate(a) => load_spec(&a, Stage::All).map(|(spec, _)| {
            let cells = spec.expand();
            println!("config OK: {} grid cell(s)", cells.len());
            for c in &cells {
                println!("  {}", c.cell_name());
            }
        }),
        Command::Audit(a) => run(&a, Stage::All),
        Command::Probe(a) => run(&a, Stage::Probe),
        Command::Intrinsic(a) => run(&a, Stage::Intrinsic),
        Command::Extrinsic(a) => run(&a, Stage::Extrinsic),
        Command::Report(a) => rerender(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

fn load_spec(args: &RunArgs, stage: Stage) -> Result<(AuditSpec, Auditor), Failure> {
    let mut spec = AuditSpec::load(&args.config).map_err(|e| Failure::Validation(e.to_string()))?;
    if let Some(out) = &args.out {
        spec.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(jobs) = args.jobs {
        spec.jobs = jobs;
    }
    if let Some(dir) = &args.cache_dir {
        spec.cache_dir = Some(dir.clone());
    }
    if let Some(corpus) = &args.corpus {
        spec.corpus = Some(corpus.clone());
    }
    match stage {
        Stage::All => {}
        Stage::Probe => {
            spec.metrics = MetricToggles {
                probe: true,
                ..MetricToggles::none()
            }
        }
        Stage::Intrinsic => {
            spec.metrics = MetricToggles {
                seat: true,
                lpbs: true,
                ..MetricToggles::none()
            }
        }
        Stage::Extrinsic => {
            spec.metrics = MetricToggles {
                extrinsic: true,
                ..MetricToggles::none()
            }
        }
    }
    // Only the built-in models come with their own synthetic corpus.
    if stage == Stage::Probe && spec.corpus.is_none() && !spec.model.starts_with("builtin") {
        return Err(Failure::Validation(
            "the probe needs a harvesting corpus: set `corpus` or pass --corpus".into(),
        ));
    }
    let auditor = Auditor::default();
    spec.validate(auditor.registry()).map_err(|e| Failure::Validation(e.to_string()))?;
    Ok((spec, auditor))
}

fn formats(list: &[ReportFormat]) -> BTreeSet<ReportFormat> {
    list.iter().copied().collect()
}

fn run(args: &RunArgs, stage: Stage) -> Result<(), Failure> {
    let (spec, auditor) = load_spec(args, stage)?;
    let cells = spec.expand();
    log::info!("running {} grid cell(s) with {} job(s)", cells.len(), spec.jobs);
    let reports = auditor.run_grid(&cells, spec.jobs);
    let formats = formats(&args.format);
    for (cell, report) in cells.iter().zip(&reports) {
        report::emit_report(report, cell.cell_dir(), &formats).map_err(|e| Failure::Stage(e.to_string()))?;
    }
    report::emit_comparison(&reports, &spec.output_dir, &formats).map_err(|e| Failure::Stage(e.to_string()))?;
    print_summary(&reports);
    println!("reports written to {}", spec.output_dir.display());
    check_failures(&reports)
}

fn check_failures(reports: &[AuditReport]) -> Result<(), Failure> {
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.succeeded())
        .map(|r| {
            let stages: Vec<String> = r.failed_stages.iter().map(|s| format!("{}: {}", s.stage, s.error)).collect();
            format!("{} ({})", r.config.cell_name(), stages.join("; "))
        })
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Stage(format!("failed cells: {}", failed.join(", "))))
    }
}

fn print_summary(reports: &[AuditReport]) {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    println!(
        "{:<26} {:>8} {:>8} {:>10} {:>8} {:>10} {:>10} {:>8}",
        "cell", "SEAT-d", "LPBS-T", "GENDER-ACC", "BIAS-ACC", "BIAS-CONF", "P-VALUE", "CF"
    );
    for r in reports {
        let rows = report::SectionRows::of(r);
        let intrinsic = rows.intrinsic.unwrap_or([None; 4]);
        let probe = rows.probe.map(|p| p.map(Some)).unwrap_or([None; 4]);
        let p_value = probe[3].map_or("-".to_string(), |p| format!("{p:.2e}"));
        println!(
            "{:<26} {:>8} {:>8} {:>10} {:>8} {:>10} {:>10} {:>8}",
            r.config.cell_name(),
            opt(intrinsic[1]),
            opt(intrinsic[3]),
            opt(probe[0]),
            opt(probe[1]),
            opt(probe[2]),
            p_value,
            opt(rows.extrinsic.map(|e| e.cf)),
        );
    }
}

fn cell_reports(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let entries = fs::read_dir(dir).map_err(|e| Failure::Validation(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path().join("report.json"))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::Validation(format!("no */report.json under {}", dir.display())));
    }
    Ok(paths)
}

fn rerender(args: &ReportArgs) -> Result<(), Failure> {
    let formats = formats(&args.format);
    let stage = |e: biasprobe::Error| Failure::Stage(e.to_string());
    let load = |p: &Path| AuditReport::load(p).map_err(|e| Failure::Validation(e.to_string()));
    if args.input.is_dir() {
        let out = args.out.clone().unwrap_or_else(|| args.input.clone());
        let mut reports = Vec::new();
        for path in cell_reports(&args.input)? {
            let r = load(&path)?;
            report::emit_report(&r, out.join(r.config.cell_name()), &formats).map_err(stage)?;
            reports.push(r);
        }
        report::emit_comparison(&reports, &out, &formats).map_err(stage)?;
        print_summary(&reports);
        println!("re-rendered {} report(s) into {}", reports.len(), out.display());
    } else {
        let r = load(&args.input)?;
        let out = args
            .out
            .clone()
            .unwrap_or_else(|| args.input.parent().map(Path::to_path_buf).unwrap_or_default());
        let files = report::emit_report(&r, &out, &formats).map_err(stage)?;
        print_summary(std::slice::from_ref(&r));
        for f in files {
            println!("{}", f.display());
        }
    }
    Ok(())
}
