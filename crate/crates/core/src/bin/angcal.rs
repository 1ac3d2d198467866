use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use angcal::experiment::{
    covariance_factors, run_multiindex, run_platt_convergence, run_sign_mc, run_simulate, run_universality,
    write_artifacts, Artifacts, ExperimentConfig,
};
use angcal::{Error, Result};

/// Angular calibration experiments.
///
/// Settings come from the built-in defaults, then the `--config` file, then flags.
/// Outputs go to `--out`, or to `runs/seed<seed>-<unix time>` when it is not given.
#[derive(Parser, Debug)]
#[command(name = "angcal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit, estimate the angle, recalibrate and score every calibrator.
    Simulate(Common),
    /// Platt scaling on growing holdouts against the angular predictor.
    PlattConvergence {
        #[command(flatten)]
        common: Common,
        /// Comma-separated ascending holdout sizes.
        #[arg(long)]
        sizes: Option<String>,
        /// Holdout redraws per size.
        #[arg(long)]
        trials: Option<usize>,
        /// Replace the fitted direction by the true one (true angle zero).
        #[arg(long)]
        aligned: bool,
    },
    /// Wrong-sign rate of the sign estimate over redrawn holdouts.
    SignMc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// `simulate` with Rademacher or uniform entries next to a Gaussian run.
    Universality(Common),
    /// Multi-index angular calibration at the true conditional parameters.
    Multiindex {
        #[command(flatten)]
        common: Common,
        /// Number of indices.
        #[arg(long)]
        k: Option<usize>,
        /// Distance between fitted and true index directions.
        #[arg(long)]
        perturbation: Option<f64>,
        /// Draws for the residual cross-covariance check.
        #[arg(long)]
        trials: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` file applied before the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    d: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// sigmoid:a:b, probit:a:b or crelu:a:b
    #[arg(long)]
    link: Option<String>,
    /// gaussian, rademacher or uniform
    #[arg(long)]
    entry: Option<String>,
    /// ar1:<rho>, identity or file:<path>
    #[arg(long)]
    cov: Option<String>,
    #[arg(long)]
    n_test: Option<String>,
    #[arg(long)]
    platt_holdout: Option<String>,
    /// Carve this fraction of the training rows for the sign estimate.
    #[arg(long)]
    sign_holdout_frac: Option<String>,
    /// Draw this many fresh rows for the sign estimate instead.
    #[arg(long)]
    sign_holdout_n: Option<String>,
    /// CSV of features plus a trailing 0/1 label column for the sign estimate.
    #[arg(long)]
    sign_holdout_file: Option<String>,
    /// Comma-separated subset of uncalibrated,angular,angular_true,platt,isotonic,chance.
    #[arg(long)]
    calibrators: Option<String>,
    #[arg(long)]
    bins: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Also write SVG plots.
    #[arg(long)]
    svg: bool,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        let flags = [
            ("n", &self.n),
            ("d", &self.d),
            ("lambda", &self.lambda),
            ("seed", &self.seed),
            ("link", &self.link),
            ("entry", &self.entry),
            ("cov", &self.cov),
            ("n-test", &self.n_test),
            ("platt-holdout", &self.platt_holdout),
            ("sign-holdout-frac", &self.sign_holdout_frac),
            ("sign-holdout-n", &self.sign_holdout_n),
            ("sign-holdout-file", &self.sign_holdout_file),
            ("calibrators", &self.calibrators),
            ("bins", &self.bins),
            ("out", &self.out),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.apply(key, v)?;
            }
        }
        if self.svg {
            cfg.svg = true;
        }
        Ok(cfg)
    }
}

fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        PathBuf::from("runs").join(format!("seed{}-{secs}", cfg.seed))
    })
}

fn execute(command: Command) -> Result<(PathBuf, Artifacts)> {
    let (cfg, kind) = match command {
        Command::Simulate(c) => (c.resolve()?, "simulate"),
        Command::PlattConvergence { common, sizes, trials, aligned } => {
            let mut cfg = common.resolve()?;
            if let Some(s) = sizes {
                cfg.apply("sizes", &s)?;
            }
            cfg.trials = trials.or(cfg.trials);
            cfg.aligned |= aligned;
            (cfg, "platt-convergence")
        }
        Command::SignMc { common, trials } => {
            let mut cfg = common.resolve()?;
            cfg.trials = trials.or(cfg.trials);
            (cfg, "sign-mc")
        }
        Command::Universality(c) => (c.resolve()?, "universality"),
        Command::Multiindex { common, k, perturbation, trials } => {
            let mut cfg = common.resolve()?;
            cfg.k = k.unwrap_or(cfg.k);
            cfg.perturbation = perturbation.unwrap_or(cfg.perturbation);
            cfg.trials = trials.or(cfg.trials);
            (cfg, "multiindex")
        }
    };
    if kind != "multiindex" {
        cfg.validate()?;
    }
    let cov = covariance_factors(&cfg)?;
    let artifacts = match kind {
        "simulate" => run_simulate(&cfg, &cov)?.artifacts("simulate", ""),
        "platt-convergence" => run_platt_convergence(&cfg, &cov)?.artifacts(),
        "sign-mc" => run_sign_mc(&cfg, &cov)?.artifacts(),
        "universality" => run_universality(&cfg, &cov)?.artifacts(),
        _ => run_multiindex(&cfg, &cov)?.artifacts(),
    };
    Ok((output_dir(&cfg), artifacts))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = execute(cli.command).and_then(|(dir, artifacts)| {
        write_artifacts(&dir, &artifacts)?;
        Ok(dir)
    });
    match result {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}: {e}", e.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
