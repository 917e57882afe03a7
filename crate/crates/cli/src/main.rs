use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flowsur::diagnostics::format_number;
use flowsur::geometry::{synthesize_dataset, DesignDataset};
use flowsur::harness::{diagnose, Resources, OUTPUT_DIR_ENV};
use flowsur::physics::{train_surrogate, SurrogateConfig};
use flowsur::{
    run_experiment, save_surrogate, save_velocity, train_conditional_flow, train_flow, Error, ExperimentConfig,
    FlowTrainConfig, OperatingPoint, PhysicsEvaluator, ThinAirfoilOracle,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "flowsur", version, about = "Physics-guided flow matching for airfoil inverse design")]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a design table with oracle lift labels.
    GenData {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Angle of attack for the label column, degrees.
        #[arg(long, default_value_t = 2.0)]
        alpha_deg: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a velocity field on a design table.
    TrainFlow {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5000)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Hidden widths, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "128,128")]
        hidden: Vec<usize>,
        /// Condition on the table's `cl` column.
        #[arg(long)]
        conditional: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the dropout surrogate to oracle lift on a design table.
    TrainSurrogate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1500)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2.0)]
        alpha_deg: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the configured strategy and write the report.
    Generate(ExperimentArgs),
    /// Write alignment, loss-gap and UQ tables for the configuration.
    Diagnose(ExperimentArgs),
    /// Print a report table written by `generate`.
    Report {
        /// Directory containing report.csv.
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set desired_loss=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// uncond, conditional, energy, dflow or sweep.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Guidance cutoff time t_c.
    #[arg(long)]
    tc: Option<f64>,
    /// Euler steps T.
    #[arg(long)]
    steps: Option<usize>,
    /// Dflow iteration cap K.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    target: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// oracle or surrogate.
    #[arg(long)]
    evaluator: Option<String>,
    /// Velocity-model checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    surrogate: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Spread batch members over threads (wall times then stop being comparable).
    #[arg(long)]
    parallel: bool,
}

impl ExperimentArgs {
    fn resolve(&self) -> flowsur::Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        for o in &self.overrides {
            config.apply_override(o)?;
        }
        let flags: [(&str, Option<String>); 15] = [
            ("strategy", self.strategy.clone()),
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("cutoff", self.tc.map(|v| v.to_string())),
            ("steps", self.steps.map(|v| v.to_string())),
            ("iterations", self.iters.map(|v| v.to_string())),
            ("tau", self.tau.map(|v| v.to_string())),
            ("tol", self.tol.map(|v| v.to_string())),
            ("target", self.target.map(|v| v.to_string())),
            ("n", self.n.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("evaluator", self.evaluator.clone()),
            ("model", self.model.as_ref().map(|p| p.display().to_string())),
            ("surrogate", self.surrogate.as_ref().map(|p| p.display().to_string())),
            ("dataset", self.dataset.as_ref().map(|p| p.display().to_string())),
            ("output", self.out.as_ref().map(|p| p.display().to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                config.set(key, &v)?;
            }
        }
        if self.parallel {
            config.parallel = true;
        }
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            config.output = PathBuf::from(dir);
        }
        config.validate()?;
        Ok(config)
    }
}

enum Failure {
    Core(Error),
    AllFailed(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Parse { .. } | Error::Version { .. } => EXIT_IO,
        Error::Numeric(_) | Error::Training(_) => EXIT_NUMERIC,
        Error::Config(_) | Error::Shape(_) | Error::Domain(_) | Error::Dimension { .. } | Error::Contract(_) => {
            EXIT_CONFIG
        }
    }
}

fn oracle(alpha_deg: f64) -> flowsur::Result<ThinAirfoilOracle> {
    Ok(ThinAirfoilOracle::new(OperatingPoint::from_degrees(alpha_deg)?))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { n, seed, alpha_deg, out } => {
            let ds = synthesize_dataset(n, seed)?;
            let o = oracle(alpha_deg)?;
            let labels = ds.designs().iter().map(|d| o.lift(d)).collect::<flowsur::Result<Vec<f64>>>()?;
            ds.with_labels(labels)?.save(&out)?;
            println!("wrote {n} designs to {}", out.display());
        }
        Command::TrainFlow { data, epochs, batch, seed, lr, hidden, conditional, out } => {
            let ds = DesignDataset::load(&data)?;
            let cfg =
                FlowTrainConfig { hidden, batch_size: batch, epochs, learning_rate: lr, seed, ..Default::default() };
            let (model, losses) = if conditional {
                let labels = ds.labels().ok_or_else(|| {
                    Error::Config(format!("{} has no cl column; conditional training needs labels", data.display()))
                })?;
                train_conditional_flow(&ds.rows(), labels, &cfg)?
            } else {
                train_flow(&ds.rows(), &cfg)?
            };
            save_velocity(&model, &out)?;
            let last = losses.last().copied().unwrap_or(f64::NAN);
            println!(
                "trained {} iterations, final batch loss {}; wrote {}",
                losses.len(),
                format_number(last),
                out.display()
            );
        }
        Command::TrainSurrogate { data, epochs, batch, seed, alpha_deg, out } => {
            let ds = DesignDataset::load(&data)?;
            let cfg = SurrogateConfig { max_epochs: epochs, batch_size: batch, ..Default::default() };
            let model = train_surrogate(&ds, &oracle(alpha_deg)?, &cfg, seed)?;
            save_surrogate(&model, &out)?;
            println!("validation MSE {}; wrote {}", format_number(model.validation_mse), out.display());
        }
        Command::Generate(args) => {
            let config = args.resolve()?;
            let report = run_experiment(&config)?;
            for r in &report.rows {
                println!(
                    "{}: C_L {} ± {}, loss {}, fails {}/{}, {} s",
                    r.label,
                    format_number(r.cl_mean),
                    format_number(r.cl_std),
                    format_number(r.loss_mean),
                    r.fails,
                    r.n,
                    format_number(r.wall_time)
                );
            }
            println!("report written to {}", config.output.display());
            let total: usize = report.rows.iter().map(|r| r.n).sum();
            if report.rows.iter().map(|r| r.fails).sum::<usize>() == total {
                return Err(Failure::AllFailed(total));
            }
        }
        Command::Diagnose(args) => {
            let config = args.resolve()?;
            let resources = Resources::load(&config)?;
            let summary = diagnose(&config, &resources)?;
            if let Some(f) = summary.negative_fraction {
                println!("negative alignment share (t > 0.2): {}", format_number(f));
            }
            for (name, g) in &summary.gaps {
                println!(
                    "{name}: median loss {} vs unconditional {} (synchronized: {})",
                    format_number(g.l_achieved),
                    format_number(g.l_uncon),
                    g.synchronized
                );
            }
            if let Some(r) = summary.uq_early_ratio {
                println!("early MC-dropout sigma / reference: {}", format_number(r));
            }
            for f in &summary.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Report { dir } => print_report(&dir.join("report.csv"))?,
    }
    Ok(())
}

/// Aligned plain-text rendering of a report table.
fn print_report(path: &Path) -> flowsur::Result<()> {
    let csv_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io { path: path.to_path_buf(), source: io },
        other => Error::Parse { path: path.to_path_buf(), message: format!("{other:?}") },
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut table = vec![reader.headers().map_err(csv_err)?.iter().map(String::from).collect::<Vec<_>>()];
    for rec in reader.records() {
        table.push(rec.map_err(csv_err)?.iter().map(String::from).collect());
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|r| r.get(c).map_or(0, |s| s.chars().count())).max().unwrap_or(0))
        .collect();
    for row in &table {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        println!("{}", cells.join("  ").trim_end());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::AllFailed(n)) => {
            eprintln!("error: all {n} samples failed");
            ExitCode::from(EXIT_NUMERIC)
        }
    }
}
