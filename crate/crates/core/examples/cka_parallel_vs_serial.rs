//! Compares expand-layer similarity (linear CKA) under parallel and serial
//! wiring on matched seeds.
//!
//!     cargo run --release --example cka_parallel_vs_serial -- [config.toml]

use std::path::PathBuf;

use etfcil::network::Wiring;
use etfcil::protocol::RunConfig;

fn main() -> etfcil::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/configs/b4inc2.toml"), PathBuf::from);
    let base = RunConfig::load(&path)?;
    println!("seed  parallel  serial");
    for seed in 1..=5 {
        let mut row = Vec::new();
        for wiring in [Wiring::Parallel, Wiring::Serial] {
            let cfg = RunConfig { seed, wiring, ..base.clone() };
            let (report, _) = cfg.execute(&format!("{wiring}-{seed}"))?;
            let last = report.stages.last().expect("at least one stage");
            row.push(last.mean_cka.unwrap_or(f64::NAN));
            if seed == 1 {
                println!("  {wiring} CKA matrix at the last stage:");
                for r in &last.cka {
                    println!("    {}", r.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" "));
                }
            }
        }
        println!("{seed:>4}  {:>8.4}  {:>6.4}", row[0], row[1]);
    }
    Ok(())
}
