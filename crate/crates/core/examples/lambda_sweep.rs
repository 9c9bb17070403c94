//! Sweeps the distillation weight and writes `lambda_sweep.csv` plus one
//! report directory per value.
//!
//!     cargo run --release --example lambda_sweep -- [config.toml] [out_dir]

use std::path::PathBuf;

use etfcil::cli::{sweep_lambda, SWEEP_FILE};
use etfcil::protocol::RunConfig;

fn main() -> etfcil::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .map_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/configs/b4inc2.toml"), PathBuf::from);
    let out = args.next().map_or_else(|| std::env::temp_dir().join("etfcil-sweep"), PathBuf::from);
    let table = sweep_lambda(&RunConfig::load(&path)?, &[0.0, 0.1, 0.3, 0.5, 0.7, 0.9], &out)?;
    print!("{}", table.render());
    println!("{}", out.join(SWEEP_FILE).display());
    Ok(())
}
