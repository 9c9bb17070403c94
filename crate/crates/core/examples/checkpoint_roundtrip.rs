//! Trains a small stream, saves the model as a text checkpoint, reloads it
//! and checks that predictions and the frozen-parameter digest survive.
//!
//!     cargo run --release --example checkpoint_roundtrip

use std::path::PathBuf;

use etfcil::network::ModelState;
use etfcil::protocol::RunConfig;

fn main() -> etfcil::Result<()> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/configs/quick.toml");
    let cfg = RunConfig::load(&path)?;
    let (report, model) = cfg.execute("checkpoint")?;
    println!("trained {} stages, Acc_avg {:.2}", report.stages.len(), report.acc_avg);

    let file = std::env::temp_dir().join("etfcil-model.ckpt");
    model.save(&file)?;
    let restored = ModelState::load(&file)?;
    let x = cfg.dataset()?.features().clone();
    let same = model.predict(&x)? == restored.predict(&x)?;
    println!(
        "{} ({} bytes): {} expand-layers, {} classes, predictions identical: {same}",
        file.display(),
        std::fs::metadata(&file).map(|m| m.len()).unwrap_or(0),
        restored.num_expands(),
        restored.head().num_classes()
    );
    println!("frozen digest {}", restored.frozen_digest());
    assert!(same && model.frozen_digest() == restored.frozen_digest());
    Ok(())
}
