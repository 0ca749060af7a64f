use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use latag_core::checker::{self, CheckError, Status, Verdict};
use latag_core::config::Roles;
use latag_core::summary::RunSummary;
use latag_core::trace::TraceError;
use latag_core::{ConfigError, ScenarioConfig, Trace};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Parser)]
#[command(name = "latag", version, about = "Run, sweep and check Byzantine lattice agreement simulations")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one scenario and write its trace, roles and summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Trace output (JSON lines).
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scheduler seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Roles output. Defaults to `<out stem>.roles.json`.
        #[arg(long)]
        roles: Option<PathBuf>,
        /// Summary output. Defaults to `<out stem>.summary.json`.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Check a trace and print the verdict as JSON.
    Check {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        roles: PathBuf,
        /// Also write the verdict here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario over a range of seeds and report one CSV row per seed.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `a..b` (exclusive), `a..=b`, or a single seed.
        #[arg(long, value_parser = parse_seeds)]
        seeds: RangeInclusive<u64>,
        /// CSV output. Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Trace { path: PathBuf, source: TraceError },
    #[error("{path}: trace has no run-end record (truncated?)")]
    Truncated { path: PathBuf },
    #[error("invalid config: {0}")]
    Config(#[from] ConfigError),
    #[error("cannot check trace: {0}")]
    Check(#[from] CheckError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// What a successful command found.
enum Outcome {
    Pass,
    Fail,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Run {
            config,
            out,
            seed,
            roles,
            summary,
        } => cmd_run(&config, &out, seed, roles, summary),
        Cmd::Check { trace, roles, out } => cmd_check(&trace, &roles, out.as_deref()),
        Cmd::Sweep { config, seeds, out } => cmd_sweep(&config, seeds, out.as_deref()),
    };
    match res {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn parse_seeds(s: &str) -> Result<RangeInclusive<u64>, String> {
    let num = |t: &str| t.trim().parse::<u64>().map_err(|e| format!("bad seed {t:?}: {e}"));
    let range = if let Some((a, b)) = s.split_once("..=") {
        num(a)?..=num(b)?
    } else if let Some((a, b)) = s.split_once("..") {
        let b = num(b)?;
        if b == 0 {
            return Err("empty seed range".into());
        }
        num(a)?..=b - 1
    } else {
        let a = num(s)?;
        a..=a
    };
    if range.is_empty() {
        return Err(format!("empty seed range {s:?}"));
    }
    Ok(range)
}

/// `dir/trace.jsonl` -> `dir/trace.<suffix>`.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().unwrap_or(out.as_os_str()).to_string_lossy();
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read(path).map_err(|source| CliError::Io { path: path.into(), source })?;
    serde_json::from_slice(&text).map_err(|source| CliError::Json { path: path.into(), source })
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(v).expect("serializable");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|source| CliError::Io { path: path.into(), source })
}

fn load_config(path: &Path) -> Result<ScenarioConfig, CliError> {
    let cfg: ScenarioConfig = read_json(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn report(verdict: &Verdict) -> Outcome {
    for p in verdict.failures() {
        eprintln!("FAIL {}: {} (events {:?})", p.property, p.detail, p.witness);
    }
    if verdict.passed() {
        Outcome::Pass
    } else {
        Outcome::Fail
    }
}

fn cmd_run(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    roles_path: Option<PathBuf>,
    summary_path: Option<PathBuf>,
) -> Result<Outcome, CliError> {
    let mut cfg = load_config(config)?;
    if let Some(seed) = seed {
        cfg.scheduler.seed = seed;
    }
    let run = latag_core::run(&cfg)?;
    let verdict = checker::check(&run.trace, &run.roles)?;
    let summary = RunSummary::from_trace(&run.trace, &run.roles, Some(&verdict));

    let file = File::create(out).map_err(|source| CliError::Io { path: out.into(), source })?;
    run.trace
        .write_jsonl(BufWriter::new(file))
        .map_err(|source| CliError::Io { path: out.into(), source })?;
    write_json(&roles_path.unwrap_or_else(|| sibling(out, "roles.json")), &run.roles)?;
    write_json(&summary_path.unwrap_or_else(|| sibling(out, "summary.json")), &summary)?;
    eprintln!(
        "{} n={} f={} seed={}: {} events, {} messages, max depth {}, verdict {}",
        cfg.protocol.name(),
        cfg.n,
        cfg.f,
        cfg.scheduler.seed,
        run.trace.len(),
        summary.total_msgs,
        summary.max_depth,
        summary.verdict.as_deref().unwrap_or("-"),
    );
    Ok(report(&verdict))
}

fn cmd_check(trace_path: &Path, roles_path: &Path, out: Option<&Path>) -> Result<Outcome, CliError> {
    let roles: Roles = read_json(roles_path)?;
    let file = File::open(trace_path).map_err(|source| CliError::Io {
        path: trace_path.into(),
        source,
    })?;
    let trace = Trace::read_jsonl(BufReader::new(file)).map_err(|source| CliError::Trace {
        path: trace_path.into(),
        source,
    })?;
    // Simulator traces always close with a run-end record. Without one the
    // file was cut short and eventual properties cannot be judged.
    if trace.run_end().is_none() {
        return Err(CliError::Truncated { path: trace_path.into() });
    }
    let verdict = checker::check(&trace, &roles)?;
    if let Some(out) = out {
        write_json(out, &verdict)?;
    }
    let stdout = io::stdout();
    let mut w = stdout.lock();
    serde_json::to_writer_pretty(&mut w, &verdict).expect("serializable");
    let _ = writeln!(w);
    Ok(report(&verdict))
}

#[derive(Serialize)]
struct Row {
    seed: u64,
    protocol: &'static str,
    n: usize,
    f: usize,
    max_depth: u64,
    max_refinements: u64,
    total_msgs: u64,
    verdict: &'static str,
}

fn verdict_label(v: &Verdict) -> &'static str {
    if !v.passed() {
        "fail"
    } else if v.properties.iter().any(|p| p.status == Status::Inconclusive) {
        "inconclusive"
    } else {
        "pass"
    }
}

fn cmd_sweep(config: &Path, seeds: RangeInclusive<u64>, out: Option<&Path>) -> Result<Outcome, CliError> {
    let cfg = load_config(config)?;
    let results: Vec<(Row, Verdict)> = seeds
        .into_par_iter()
        .map(|seed| {
            let mut cfg = cfg.clone();
            cfg.scheduler.seed = seed;
            let run = latag_core::run(&cfg)?;
            let verdict = checker::check(&run.trace, &run.roles)?;
            let s = RunSummary::from_trace(&run.trace, &run.roles, None);
            let row = Row {
                seed,
                protocol: cfg.protocol.name(),
                n: cfg.n,
                f: cfg.f,
                max_depth: s.max_depth,
                max_refinements: s.max_refinements,
                total_msgs: s.total_msgs,
                verdict: verdict_label(&verdict),
            };
            Ok((row, verdict))
        })
        .collect::<Result<_, CliError>>()?;

    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(File::create(p).map_err(|source| CliError::Io { path: p.into(), source })?),
        None => Box::new(io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for (row, _) in &results {
        w.serialize(row)?;
    }
    w.flush().map_err(|source| CliError::Io {
        path: out.map_or_else(|| "<stdout>".into(), Path::to_path_buf),
        source,
    })?;

    let mut failed = 0;
    for (row, verdict) in &results {
        if verdict.passed() {
            continue;
        }
        failed += 1;
        let props: Vec<_> = verdict.failures().map(|p| p.property.as_str()).collect();
        eprintln!(
            "seed {} failed [{}]; replay with: latag run --config {} --seed {} --out seed{}.jsonl",
            row.seed,
            props.join(", "),
            config.display(),
            row.seed,
            row.seed
        );
    }
    let max = |f: fn(&Row) -> u64| results.iter().map(|(r, _)| f(r)).max().unwrap_or(0);
    eprintln!(
        "{} seeds, {} failed; max depth {}, max refinements {}, max messages {}",
        results.len(),
        failed,
        max(|r| r.max_depth),
        max(|r| r.max_refinements),
        max(|r| r.total_msgs),
    );
    Ok(if failed == 0 { Outcome::Pass } else { Outcome::Fail })
}
