use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use guidelab::config::RunConfig;
use guidelab::experiment::{check_replaceable, execute, sweep, write_dir, Experiment};
use guidelab::io::write_atomic;
use guidelab::plot::plot_files;
use guidelab::verify::{render, run_checks, Hooks};
use guidelab::Error;

const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "guidelab", version, about = "Classifier-guided diffusion sampling on Gaussian mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured sampler and write a run directory.
    Sample(RunArgs),
    /// Paired-seed runs over the values of one parameter; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// One of: tau1, tau2, gamma, scale, softplus_beta, recurrence, input, bins.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
    },
    /// Recompute trajectory calibration for an existing run directory.
    Calibrate {
        /// Run directory written by `sample`.
        #[arg(long)]
        run: PathBuf,
        /// Override the number of confidence bins.
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Run the oracle self-checks and print a report.
    Verify {
        #[arg(long, hide = true)]
        corrupt_covariance: bool,
    },
    /// Emit curve CSVs and SVG plots for a run directory.
    Plotdata {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to `<run>/plots`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(args: &RunArgs) -> Result<RunConfig, Error> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = &args.out {
        config.out = Some(out.clone());
    }
    Ok(config)
}

fn output_dir(config: &RunConfig, kind: &str) -> PathBuf {
    config
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-{kind}-seed{}", config.sampler.name(), config.seed)))
}

fn cmd_sample(args: &RunArgs) -> Result<(), Error> {
    let config = load_config(args)?;
    let out = output_dir(&config, "run");
    check_replaceable(&out)?;
    let exp = Experiment::build(config)?;
    let art = execute(&exp)?;
    write_dir(&out, &art.files)?;
    println!("{} out={}", art.summary.line(), out.display());
    Ok(())
}

fn cmd_sweep(args: &RunArgs, axis: &str, values: &[String]) -> Result<(), Error> {
    let config = load_config(args)?;
    let out = output_dir(&config, "sweep");
    check_replaceable(&out)?;
    let exp = Experiment::build(config)?;
    let text = sweep(&exp, axis, values)?;
    write_dir(&out, &[("sweep.csv".to_string(), text.clone())])?;
    print!("{text}");
    Ok(())
}

fn cmd_calibrate(run: &Path, bins: Option<usize>) -> Result<(), Error> {
    let meta = run.join("meta.toml");
    let text = std::fs::read_to_string(&meta).map_err(|e| Error::Format {
        path: meta.display().to_string(),
        reason: format!("cannot read run metadata: {e}"),
    })?;
    let mut config = RunConfig::from_toml(&text)?;
    if let Some(b) = bins {
        config.calibration.bins = b;
        config.validate()?;
    }
    let exp = Experiment::build(config)?;
    let art = execute(&exp)?;
    // The replay must reproduce the stored samples exactly, otherwise the
    // directory was produced by a different build or edited by hand.
    let samples_path = run.join("samples.csv");
    let stored = std::fs::read_to_string(&samples_path).unwrap_or_default();
    let replayed = art.files.iter().find(|(n, _)| n == "samples.csv").map(|(_, b)| b.as_str());
    if Some(stored.as_str()) != replayed {
        return Err(Error::Format {
            path: samples_path.display().to_string(),
            reason: "does not match a replay of meta.toml".into(),
        });
    }
    for entry in std::fs::read_dir(run)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("reliability_t") && name.ends_with(".csv") {
            std::fs::remove_file(&path)?;
        }
    }
    for (name, body) in &art.files {
        write_atomic(&run.join(name), body.as_bytes())?;
    }
    println!("{} bins={}", art.summary.line(), exp.config.calibration.bins);
    Ok(())
}

fn cmd_plotdata(run: &Path, out: Option<PathBuf>) -> Result<(), Error> {
    let files = plot_files(run)?;
    let out = out.unwrap_or_else(|| run.join("plots"));
    write_dir(&out, &files)?;
    println!("wrote {} files to {}", files.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Sample(args) => cmd_sample(args),
        Command::Sweep { run, axis, values } => cmd_sweep(run, axis, values),
        Command::Calibrate { run, bins } => cmd_calibrate(run, *bins),
        Command::Plotdata { run, out } => cmd_plotdata(run, out.clone()),
        Command::Verify { corrupt_covariance } => {
            let checks = run_checks(Hooks { corrupt_covariance: *corrupt_covariance });
            print!("{}", render(&checks));
            let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
            if failed.is_empty() {
                return ExitCode::SUCCESS;
            }
            eprintln!("error: failed checks: {}", failed.join(", "));
            return ExitCode::from(EXIT_VERIFY);
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
