//! Runs a config through the full class-incremental protocol and writes the
//! report files.
//!
//!     cargo run --release --example incremental_stream -- [config.toml] [out_dir]

use std::path::PathBuf;

use etfcil::cli::{accuracy_table, run_path};

fn main() -> etfcil::Result<()> {
    let mut args = std::env::args().skip(1);
    let config = args
        .next()
        .map_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/configs/b4inc2.toml"), PathBuf::from);
    let out = args.next().map_or_else(|| std::env::temp_dir().join("etfcil-incremental"), PathBuf::from);
    let report = run_path(&config, &out)?;
    print!("{}", accuracy_table(&report));
    for s in &report.stages {
        println!(
            "stage {}: new classes {:?}, K={}, Gram deviation {:.1e}, frozen digest {} {}, trainable {}",
            s.stage,
            s.new_classes,
            s.num_classes,
            s.etf_gram_error.unwrap_or(f64::NAN),
            &s.frozen_digest_after[..12],
            if s.frozen_digest_before == s.frozen_digest_after { "unchanged" } else { "CHANGED" },
            s.param_count.trainable
        );
    }
    println!("forbidden reads: {}", report.forbidden_reads);
    println!("reports in {}", out.display());
    Ok(())
}
