//! The head x adapt-layer grid on one seed: ETF or FC head, with or
//! without the adapt-layer.
//!
//!     cargo run --release --example ablation_grid -- [config.toml] [out_dir]

use std::path::PathBuf;

use etfcil::cli::{ablate, AblationGrid, ABLATION_FILE};
use etfcil::network::{HeadKind, Wiring};
use etfcil::protocol::RunConfig;

fn main() -> etfcil::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .map_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/configs/b4inc2.toml"), PathBuf::from);
    let out = args.next().map_or_else(|| std::env::temp_dir().join("etfcil-ablation"), PathBuf::from);
    let grid = AblationGrid {
        wiring: vec![Wiring::Parallel],
        head: vec![HeadKind::Etf, HeadKind::Fc],
        adapt: vec![true, false],
    };
    let table = ablate(&RunConfig::load(&path)?, &grid, &out)?;
    print!("{}", table.render());
    println!("{}", out.join(ABLATION_FILE).display());
    Ok(())
}
