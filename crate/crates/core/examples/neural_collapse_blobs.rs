//! Single-task training on six Gaussian blobs with the ETF head and the
//! adapt-layer; prints how closely each class mean aligns with its
//! prototype.
//!
//!     cargo run --release --example neural_collapse_blobs

use etfcil::protocol::RunConfig;

const CONFIG: &str = r#"
seed = 1
[dataset]
kind = "blobs"
classes = 6
per_class = 100
dim = 16
separation = 6.0
noise = 0.5
[split]
base = 6
inc = 0
[model]
width = 32
etf_dim = 16
[schedule]
epochs_base = 100
"#;

fn main() -> etfcil::Result<()> {
    let (report, _) = RunConfig::from_toml(CONFIG)?.execute("collapse")?;
    let stage = &report.stages[0];
    println!("test accuracy {:.2}%  final loss {:.5}", stage.accuracy, stage.final_loss);
    if let Some(c) = &stage.collapse {
        println!("class  samples  cos(mean, prototype)  within-class variance");
        for k in &c.classes {
            println!("{:>5}  {:>7}  {:>20.4}  {:>21.3e}", k.class, k.samples, k.cosine, k.within_variance);
        }
        if let Some(r) = c.between_within_ratio {
            println!("between/within ratio {r:.1}");
        }
    }
    Ok(())
}
