//! Command-line front end: sample fields, run experiments, calibrate the
//! three-field geometry, gate on checks, and display finished runs.
//!
//! Exit codes: 0 all checks pass, 1 check failure, 2 configuration error,
//! 3 resource/IO error.

use clap::{Parser, Subcommand};
use sigf::fields::{calibrate_three_field, sample_inhomogeneous, ThreeFieldContext};
use sigf::harness::{
    run_experiment, write_field, ExperimentConfig, ExperimentKind, Overrides, RunOutcome,
};
use sigf::sampler::RngStream;
use sigf::{Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sigf", version, about = "Scale-inhomogeneous field laboratory")]
struct Cli {
    /// Root seed; beats the SIGF_SEED environment variable and the config
    /// file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw one field on the configured grid and store it as a .sigf file.
    Sample {
        #[arg(long)]
        config: PathBuf,
        /// Destination file (default: <output>/field.sigf)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Experiment orchestration.
    Experiment {
        #[command(subcommand)]
        action: ExperimentCmd,
    },
    /// Compute the three-field calibration constants for the configured
    /// geometry and write them as CSV.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the configured experiment and gate the exit code on its
    /// verdicts.
    Check {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        replicas: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Display the manifest and verdicts of a finished run directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum ExperimentCmd {
    /// Execute all replicas and write raw.csv, report.csv, manifest.toml.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        replicas: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var("SIGF_SEED") {
        Ok(text) => text
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::Config(format!("SIGF_SEED is not a valid seed: \"{text}\""))),
        Err(_) => Ok(None),
    }
}

fn load_config(
    path: &Path,
    seed: Option<u64>,
    replicas: Option<usize>,
    output: Option<PathBuf>,
) -> Result<ExperimentConfig> {
    let overrides = Overrides {
        seed,
        replicas,
        output,
    };
    ExperimentConfig::load(path, &overrides)
}

fn print_outcome(outcome: &RunOutcome) {
    for row in &outcome.rows {
        println!(
            "{:4}  {:40} statistic={} se={} bound={}",
            row.verdict.to_string(),
            row.check,
            row.statistic,
            row.se,
            row.bound
        );
    }
    if !outcome.failed_replicas.is_empty() {
        println!("failed replicas: {:?}", outcome.failed_replicas);
    }
    println!(
        "wrote {} | {} | {}",
        outcome.raw_path.display(),
        outcome.report_path.display(),
        outcome.manifest_path.display()
    );
}

fn cmd_sample(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<bool> {
    let mut stream = RngStream::from_seed(cfg.seed).derive("sample");
    let field = sample_inhomogeneous(&cfg.spec, &cfg.profile, &mut stream)?;
    let path = match out {
        Some(p) => p,
        None => {
            std::fs::create_dir_all(&cfg.output).map_err(|e| {
                Error::Io(std::io::Error::new(
                    e.kind(),
                    format!("creating {}: {e}", cfg.output.display()),
                ))
            })?;
            cfg.output.join("field.sigf")
        }
    };
    write_field(&path, &field)?;
    let (argmax, max) = field.max();
    println!(
        "sampled side={} max={max} at ({}, {}) mean={} -> {}",
        cfg.spec.side(),
        argmax.x,
        argmax.y,
        field.heights.mean(),
        path.display()
    );
    Ok(true)
}

fn cmd_calibrate(cfg: &ExperimentConfig) -> Result<bool> {
    let p = match &cfg.kind {
        ExperimentKind::ThreeField(p) => p.clone(),
        other => {
            return Err(Error::Config(format!(
                "calibrate needs a three-field config, got kind '{}'",
                other.name()
            )))
        }
    };
    let ctx = ThreeFieldContext::new(
        cfg.spec,
        p.big_k,
        p.big_l,
        p.big_kp,
        p.big_lp,
        cfg.profile.clone(),
    )?;
    let calib = calibrate_three_field(&ctx)?;
    std::fs::create_dir_all(&cfg.output).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("creating {}: {e}", cfg.output.display()),
        ))
    })?;
    let path = cfg.output.join("calibration.csv");
    let mut rows = vec!["class,x,y,a".to_string()];
    for class in 0..calib.a_values().len() {
        let rep = ctx.representative(class);
        rows.push(format!("{class},{},{},{}", rep.x, rep.y, calib.a_values()[class]));
    }
    std::fs::write(&path, rows.join("\n") + "\n").map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("writing {}: {e}", path.display()),
        ))
    })?;
    println!(
        "alpha={} classes={} max-a={} -> {}",
        calib.alpha,
        calib.a_values().len(),
        calib.a_values().iter().fold(0.0f64, |m, a| m.max(*a)),
        path.display()
    );
    Ok(true)
}

fn cmd_report(dir: &Path) -> Result<bool> {
    let manifest_path = dir.join("manifest.toml");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("reading {}: {e}", manifest_path.display()),
        ))
    })?;
    let manifest: toml::Table =
        toml::from_str(&text).map_err(|e| Error::Parse(format!("manifest: {e}")))?;
    println!("run {}", dir.display());
    for key in [
        "kind",
        "side",
        "replicas",
        "seed",
        "config-hash",
        "crate-version",
        "failed-replicas",
    ] {
        if let Some(v) = manifest.get(key) {
            println!("  {key} = {v}");
        }
    }
    let report_path = dir.join("report.csv");
    let mut rdr = csv::Reader::from_path(&report_path).map_err(|e| {
        Error::Io(std::io::Error::other(format!(
            "{}: {e}",
            report_path.display()
        )))
    })?;
    let mut all_pass = true;
    println!("checks:");
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse(format!("report.csv: {e}")))?;
        let verdict = record.get(4).unwrap_or("?");
        if verdict == "fail" {
            all_pass = false;
        }
        println!(
            "  {:4}  {:40} statistic={} se={} bound={}",
            verdict,
            record.get(0).unwrap_or("?"),
            record.get(1).unwrap_or("?"),
            record.get(2).unwrap_or("?"),
            record.get(3).unwrap_or("?")
        );
    }
    if let Some(failed) = manifest.get("failed-replicas").and_then(|v| v.as_array()) {
        if !failed.is_empty() {
            all_pass = false;
        }
    }
    Ok(all_pass)
}

fn run(cli: Cli) -> Result<bool> {
    let seed = match cli.seed {
        Some(s) => Some(s),
        None => seed_from_env()?,
    };
    match cli.command {
        Command::Sample { config, out } => {
            let cfg = load_config(&config, seed, None, None)?;
            cmd_sample(&cfg, out)
        }
        Command::Experiment {
            action: ExperimentCmd::Run {
                config,
                replicas,
                output,
            },
        }
        | Command::Check {
            config,
            replicas,
            output,
        } => {
            let cfg = load_config(&config, seed, replicas, output)?;
            let outcome = run_experiment(&cfg)?;
            print_outcome(&outcome);
            Ok(outcome.success())
        }
        Command::Calibrate { config } => {
            let cfg = load_config(&config, seed, None, None)?;
            cmd_calibrate(&cfg)
        }
        Command::Report { dir } => cmd_report(&dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Domain(_) | Error::Parse(_) => ExitCode::from(2),
                Error::Io(_) | Error::Resource(_) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}
