use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::{Parser, Subcommand};
use mfkam::io::{configure_workers, write_artifacts, write_file, KernelCache, Manifest};
use mfkam::run::{Command, Outcome, Session, Status};
use mfkam::scenario::Scenario;

/// Weak KAM and Aubry–Mather computations for mean-field particles on the
/// circle.
///
/// Every command reads one scenario file and writes its tables and a
/// manifest.json into <output>/<command>/. The exit status is 0 on success,
/// 1 on invalid input and 2 when a solver raised a flag or a check failed;
/// artifacts are written in every case but the first failure kind.
///
/// The worker pool size is read from MFKAM_WORKERS.
#[derive(Debug, Parser)]
#[command(name = "mfkam", version, max_term_width = 100)]
struct Cli {
    /// Recompute kernel matrices instead of reading them from the cache.
    #[arg(long, global = true)]
    no_cache: bool,

    /// Directory of the kernel cache.
    #[arg(long, global = true, value_name = "DIR", default_value = ".mfkam-cache")]
    cache_dir: PathBuf,

    /// Output directory, overriding the scenario's `output` key. With
    /// several scenarios each writes into a subdirectory named after it.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Effective Hamiltonian over the [alpha] c grid.
    Alpha { scenario: PathBuf },
    /// Duality table of alpha and beta.
    Beta { scenario: PathBuf },
    /// Minimal measures along calibrated chains, with flow continuations.
    Orbit { scenario: PathBuf },
    /// Conjugate weak KAM pair with HJ, semiconcavity and domination checks.
    Value { scenario: PathBuf },
    /// Peierls barrier and Aubry set membership.
    Aubry { scenario: PathBuf },
    /// Self-consistent transfer measure and its action gap.
    Transport { scenario: PathBuf },
    /// Periodic minimizers and hull fits over the epsilon scan.
    Kam { scenario: PathBuf },
    /// Full invariant suite; prints a pass matrix over the scenarios.
    Verify {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
    },
}

impl Cmd {
    fn split(&self) -> (Command, Vec<&Path>) {
        match self {
            Cmd::Alpha { scenario } => (Command::Alpha, vec![scenario]),
            Cmd::Beta { scenario } => (Command::Beta, vec![scenario]),
            Cmd::Orbit { scenario } => (Command::Orbit, vec![scenario]),
            Cmd::Value { scenario } => (Command::Value, vec![scenario]),
            Cmd::Aubry { scenario } => (Command::Aubry, vec![scenario]),
            Cmd::Transport { scenario } => (Command::Transport, vec![scenario]),
            Cmd::Kam { scenario } => (Command::Kam, vec![scenario]),
            Cmd::Verify { scenarios } => (Command::Verify, scenarios.iter().map(|p| p.as_path()).collect()),
        }
    }
}

fn output_dir(cli: &Cli, scenario: &Scenario, many: bool) -> PathBuf {
    match (&cli.out, many) {
        (Some(out), false) => out.clone(),
        (Some(out), true) => out.join(&scenario.name),
        (None, _) => scenario
            .output
            .clone()
            .unwrap_or_else(|| Path::new("out").join(&scenario.name)),
    }
}

fn execute(cli: &Cli, command: Command, scenario: &Scenario, dir: &Path, workers: usize) -> anyhow::Result<Outcome> {
    let mut cache = if cli.no_cache {
        KernelCache::in_memory()
    } else {
        KernelCache::on_disk(&cli.cache_dir)
    };
    let outcome = Session::new(scenario, &mut cache)?.run(command)?;
    let dir = dir.join(command.name());
    let files = write_artifacts(&dir, &outcome.artifacts).with_context(|| format!("writing {}", dir.display()))?;
    let manifest = Manifest {
        tool: "mfkam".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.name().into(),
        scenario: scenario.name.clone(),
        scenario_hash: scenario.hash_hex(),
        seed: scenario.seed,
        files,
        residuals: outcome.residuals.clone(),
        flags: outcome.flags.clone(),
        cache: cache.stats,
        workers,
        created: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    let mut body = serde_json::to_vec_pretty(&manifest)?;
    body.push(b'\n');
    write_file(&dir.join("manifest.json"), &body)?;
    eprintln!("{}: {} -> {}", scenario.name, command, dir.display());
    for f in &outcome.flags {
        eprintln!("  flag: {f}");
    }
    Ok(outcome)
}

fn print_matrix(names: &[String], outcomes: &[Outcome]) {
    let checks: Vec<&str> = outcomes
        .first()
        .map(|o| o.checks.iter().map(|c| c.name.as_str()).collect())
        .unwrap_or_default();
    let width = checks.iter().map(|c| c.len()).max().unwrap_or(5).max(5);
    let cols: Vec<usize> = names.iter().map(|n| n.len().max(4)).collect();
    let mut line = format!("{:width$}", "check");
    for (n, w) in names.iter().zip(&cols) {
        line.push_str(&format!("  {n:>w$}"));
    }
    println!("{line}");
    for (i, check) in checks.iter().enumerate() {
        let mut line = format!("{check:width$}");
        for (o, w) in outcomes.iter().zip(&cols) {
            line.push_str(&format!("  {:>w$}", o.checks[i].status.to_string()));
        }
        println!("{line}");
    }
    let mut line = format!("{:width$}", "solver flags");
    for (o, w) in outcomes.iter().zip(&cols) {
        line.push_str(&format!("  {:>w$}", o.flags.len()));
    }
    println!("{line}");
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, paths) = cli.command.split();
    let scenarios = match paths.iter().map(|p| Scenario::load(p)).collect::<Result<Vec<_>, _>>() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let workers = match configure_workers() {
        Ok(w) => w,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let many = scenarios.len() > 1;
    let mut outcomes = vec![];
    for s in &scenarios {
        match execute(&cli, command, s, &output_dir(&cli, s, many), workers) {
            Ok(o) => outcomes.push(o),
            Err(e) => {
                eprintln!("error: {}: {e:#}", s.name);
                return ExitCode::from(1);
            }
        }
    }
    if command == Command::Verify {
        let names: Vec<String> = scenarios.iter().map(|s| s.name.clone()).collect();
        print_matrix(&names, &outcomes);
    }
    let failed = outcomes.iter().any(|o| !o.clean());
    if failed {
        for o in &outcomes {
            for c in o.checks.iter().filter(|c| c.status == Status::Fail) {
                eprintln!("  failed: {} = {:e} (limit {:e})", c.name, c.value, c.limit);
            }
        }
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    }
}
