//! `embp` command line: Monte-Carlo experiments written as CSV tables.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on numerical failures.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use embp::experiments::{
    run_alpha_scan, run_ber_vs_snr, run_init_sensitivity, run_iteration_trace, run_mse_vs_snr, schedule_report, CsvTable,
};
use embp::learn::{train_weights, TrainedWeights};

use config::{write_sidecar, ConfigError, RunArgs, TrainArgs};

#[derive(Parser)]
#[command(name = "embp", version, about = "Blind joint channel estimation and detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Channel estimation error versus SNR.
    MseSnr(RunArgs),
    /// Bit error rate versus SNR.
    BerSnr(RunArgs),
    /// Estimation error versus initialization quality.
    InitSens(RunArgs),
    /// BER and ELBO of detectors using a scaled channel.
    AlphaScan(RunArgs),
    /// Mean estimation error after every EMBP iteration.
    IterTrace(RunArgs),
    /// Tune BP momentum and EM schedule weights.
    Train(TrainArgs),
    /// Table of trained EM and BP weights.
    ScheduleReport(ReportArgs),
}

#[derive(Args)]
struct ReportArgs {
    /// Trained weights file.
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_weights(path: Option<&Path>) -> anyhow::Result<Option<TrainedWeights>> {
    match path {
        Some(p) => Ok(Some(TrainedWeights::load(p).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?)),
        None => Ok(None),
    }
}

fn save(table: &CsvTable, out: &Path) -> anyhow::Result<()> {
    table.save(out).map_err(|e| ConfigError(e.to_string()))?;
    Ok(())
}

fn run_experiment(name: &str, args: &RunArgs) -> anyhow::Result<()> {
    let cfg = args.resolve()?;
    let weights = load_weights(cfg.weights.as_deref())?;
    let table = match name {
        "mse-snr" => run_mse_vs_snr(&cfg),
        "ber-snr" => run_ber_vs_snr(&cfg, weights.as_ref()),
        "init-sens" => run_init_sensitivity(&cfg),
        "alpha-scan" => run_alpha_scan(&cfg),
        "iter-trace" => run_iteration_trace(&cfg, weights.as_ref()),
        other => unreachable!("unknown experiment {other}"),
    }?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(format!("{name}.csv")));
    save(&table, &out)?;
    let sidecar = write_sidecar(&out, name, &cfg)?;
    print!("{}", table.to_csv_string()?);
    eprintln!("wrote {} rows to {} (config {})", table.rows.len(), out.display(), sidecar.display());
    Ok(())
}

fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let cfg = args.resolve()?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("train.csv"));
    let weights_out = args.weights_out.clone().unwrap_or_else(|| out.with_extension("weights.toml"));
    let result = train_weights(&cfg)?;
    let mut table = CsvTable::new(vec!["step".into(), "objective".into()]);
    for (k, v) in result.loss_trace.iter().enumerate() {
        table.push(vec![(k + 1).to_string(), format!("{v}")]);
    }
    save(&table, &out)?;
    result.weights.save(&weights_out).with_context(|| format!("writing {}", weights_out.display()))?;
    let sidecar = write_sidecar(&out, "train", &cfg)?;
    eprintln!(
        "trained {} steps, {} of {} EM weights active; weights in {}, loss in {} (config {})",
        result.loss_trace.len(),
        result.weights.active_em(),
        result.weights.mask.iter().map(Vec::len).sum::<usize>(),
        weights_out.display(),
        out.display(),
        sidecar.display()
    );
    Ok(())
}

fn report(args: &ReportArgs) -> anyhow::Result<()> {
    let weights = load_weights(Some(&args.weights))?.expect("path given");
    let table = schedule_report(&weights)?;
    if let Some(out) = &args.out {
        save(&table, out)?;
    }
    print!("{}", table.to_csv_string()?);
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<embp::Error>() {
        if e.is_numerical() {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::MseSnr(a) => run_experiment("mse-snr", a),
        Command::BerSnr(a) => run_experiment("ber-snr", a),
        Command::InitSens(a) => run_experiment("init-sens", a),
        Command::AlphaScan(a) => run_experiment("alpha-scan", a),
        Command::IterTrace(a) => run_experiment("iter-trace", a),
        Command::Train(a) => train(a),
        Command::ScheduleReport(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
