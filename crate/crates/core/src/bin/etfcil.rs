use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use etfcil::cli::{ablate, accuracy_table, run_path, stem, sweep_lambda, AblationGrid, OUTPUT_ROOT_ENV};
use etfcil::network::{HeadKind, Wiring};
use etfcil::protocol::RunConfig;

#[derive(Parser)]
#[command(name = "etfcil", version, about = "Class-incremental runs with an expandable backbone and ETF head")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one config and write report.json, accuracy.csv, cka.csv, drift.csv.
    Run {
        #[arg(short, long)]
        config: PathBuf,
        /// Output directory; defaults to $ETFCIL_OUTPUT_ROOT/<config stem>.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// One run per (wiring, head, adapt) cell.
    Ablate {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        wiring: Vec<Wiring>,
        #[arg(long, value_delimiter = ',')]
        head: Vec<HeadKind>,
        #[arg(long, value_delimiter = ',')]
        adapt: Vec<bool>,
    },
    /// One run per distillation weight.
    SweepLambda {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true, allow_negative_numbers = true)]
        values: Vec<f64>,
    },
}

fn out_dir(explicit: Option<PathBuf>, config: &Path) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(stem(config))
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, output } => run_path(&config, &out_dir(output, &config)).map(|r| {
            print!("{}", accuracy_table(&r));
            true
        }),
        Command::Ablate {
            config,
            output,
            wiring,
            head,
            adapt,
        } => RunConfig::load(&config).and_then(|base| {
            let grid = AblationGrid { wiring, head, adapt };
            let t = ablate(&base, &grid, &out_dir(output, &config))?;
            print!("{}", t.render());
            Ok(t.all_ok())
        }),
        Command::SweepLambda { config, output, values } => RunConfig::load(&config).and_then(|base| {
            let t = sweep_lambda(&base, &values, &out_dir(output, &config))?;
            print!("{}", t.render());
            Ok(t.all_ok())
        }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
