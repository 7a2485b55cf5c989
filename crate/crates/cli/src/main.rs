//! `kanbench`: generate data, train, forecast and benchmark from the shell.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 when the work
//! itself fails. Every output path is overwritten.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kanbench::bench::{
    emit_report, regime_from_name, render_runtime_csv, run_matrix, train_experiment,
    ExperimentConfig, MatrixConfig, MatrixOutput, ReportFormat,
};
use kanbench::data::{clean, gen_synthetic, load_csv, MarketRegime};
use kanbench::forecast::{iterative_forecast, Checkpoint};
use kanbench::numcore::Matrix;
use kanbench::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "kanbench",
    version,
    about = "KAN vs LSTM time-series forecasting benchmark",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic OHLCV series as CSV.
    GenData {
        /// normal, volatile or trending.
        #[arg(long)]
        regime: String,
        #[arg(long)]
        days: usize,
        #[arg(long)]
        seed: u64,
        /// Daily drift; defaults to the regime's.
        #[arg(long)]
        mu: Option<f64>,
        /// Daily volatility; defaults to the regime's.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one experiment; writes checkpoint.json and train_report.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Iteratively forecast from a checkpoint and write a trace CSV.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        horizon: usize,
        /// Seed from this CSV instead of the checkpoint's own history.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Row index of the first window row; defaults to the last full
        /// window. Rows after the window become ground truth.
        #[arg(long)]
        origin: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment matrix and write results plus all report formats.
    Benchmark {
        #[arg(long)]
        matrix: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Experiments run concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Re-render a results.json written by `benchmark`.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        /// csv, markdown or gnuplot.
        #[arg(long)]
        format: String,
        /// File for csv/markdown, directory for gnuplot.
        #[arg(long)]
        out: PathBuf,
    },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))
}

fn gen_data(
    regime: &str,
    days: usize,
    seed: u64,
    mu: Option<f64>,
    sigma: Option<f64>,
    out: &Path,
) -> Result<()> {
    let mut r = MarketRegime::new(regime_from_name(regime)?, days, seed);
    if let Some(m) = mu {
        r.mu = m;
    }
    if let Some(s) = sigma {
        r.sigma = s;
    }
    let series = gen_synthetic(&r)?;
    series.write_csv(out)?;
    eprintln!("wrote {} rows to {}", series.len(), out.display());
    Ok(())
}

fn train(config: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::from_json(&read(config)?)?;
    let trained = train_experiment(&cfg)?;
    std::fs::create_dir_all(out)?;
    trained.checkpoint(&cfg).save(out.join("checkpoint.json"))?;
    std::fs::write(
        out.join("train_report.json"),
        serde_json::to_string_pretty(&trained.report)?,
    )?;
    eprintln!(
        "trained {} for {} epochs, train RMSE {:.4}, {:.2}s",
        trained.model.tag(),
        trained.report.epochs,
        trained.report.final_rmse,
        trained.report.wall_seconds
    );
    Ok(())
}

fn forecast(
    checkpoint: &Path,
    horizon: usize,
    data: Option<&Path>,
    origin: Option<usize>,
    out: &Path,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let scaled = match data {
        Some(p) => {
            let (series, _) = clean(&load_csv(p)?)?;
            ck.scaler
                .transform(&series.feature_matrix(&ck.scaler.features)?)?
        }
        None => ck.history.clone(),
    };
    let (rows, cols) = scaled.shape();
    let l = ck.lookback;
    if rows < l {
        return Err(Error::Input(format!(
            "need at least {l} rows to seed a forecast, have {rows}"
        )));
    }
    let start = origin.unwrap_or(rows - l);
    if start + l > rows {
        return Err(Error::Input(format!(
            "origin {start} leaves fewer than {l} rows for the seed window"
        )));
    }
    let window = Matrix::from_vec(
        l,
        cols,
        scaled.data()[start * cols..(start + l) * cols].to_vec(),
    )?;
    let mut trace = iterative_forecast(&ck.model, &window, horizon, &ck.overwrite)?;
    let target_col = ck.scaler.column_of(ck.target)?;
    let first_truth = start + l;
    if first_truth + horizon <= rows {
        let truth = (first_truth..first_truth + horizon)
            .map(|r| scaled.get(r, target_col))
            .collect();
        trace = trace.with_actual(truth)?;
    }
    trace.write_csv(&ck.scaler, ck.target, out)?;
    eprintln!("wrote {horizon}-step forecast to {}", out.display());
    Ok(())
}

fn benchmark(matrix: &Path, out: &Path, parallel: usize) -> Result<()> {
    let m = MatrixConfig::from_json(&read(matrix)?)?;
    let results = run_matrix(&m.expand(), parallel)?;
    let output = MatrixOutput::from_results(results, m.aggregate);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("results.json"), output.to_json()?)?;
    emit_report(&output, ReportFormat::Csv, out.join("report.csv"))?;
    emit_report(&output, ReportFormat::Markdown, out.join("report.md"))?;
    emit_report(&output, ReportFormat::Gnuplot, out.join("gnuplot"))?;
    std::fs::write(out.join("runtime.csv"), render_runtime_csv(&output))?;
    let failed = output
        .results
        .iter()
        .filter(|r| r.failure.is_some())
        .count();
    eprintln!(
        "ran {} experiments ({failed} failed), {} table rows, reports in {}",
        output.results.len(),
        output.table.len(),
        out.display()
    );
    Ok(())
}

fn report(input: &Path, format: &str, out: &Path) -> Result<()> {
    let format: ReportFormat = format.parse()?;
    let output = MatrixOutput::from_json(&read(input)?)?;
    emit_report(&output, format, out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            regime,
            days,
            seed,
            mu,
            sigma,
            out,
        } => gen_data(&regime, days, seed, mu, sigma, &out),
        Command::Train { config, out } => train(&config, &out),
        Command::Forecast {
            checkpoint,
            horizon,
            data,
            origin,
            out,
        } => forecast(&checkpoint, horizon, data.as_deref(), origin, &out),
        Command::Benchmark {
            matrix,
            out,
            parallel,
        } => benchmark(&matrix, &out, parallel),
        Command::Report { input, format, out } => report(&input, &format, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{}", e.render());
                    ExitCode::from(1)
                }
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
