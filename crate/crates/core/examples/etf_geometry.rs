//! Builds a simplex ETF, checks its Gram matrix, grows it class by class
//! and shows that old classes keep their columns while their prototypes
//! move only slightly.
//!
//!     cargo run --example etf_geometry

use etfcil::geometry::{build_etf, expand_etf, verify_etf};

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn main() -> etfcil::Result<()> {
    let etf = build_etf(4, 16, 1.0, 7)?;
    println!("K=4 d=16 E_W=1: Gram deviation {:.2e}", verify_etf(&etf));
    let w = etf.weights();
    let gram = w.transpose()?.matmul(w)?;
    for i in 0..4 {
        let row: Vec<String> = (0..4).map(|j| format!("{:>7.4}", gram.get(i, j))).collect();
        println!("  [{}]", row.join(" "));
    }

    let mut current = etf;
    for k in [6, 8, 12, 16] {
        let next = expand_etf(&current, k)?;
        let drift: Vec<String> = current
            .class_ids()
            .iter()
            .map(|&id| {
                let before = current.prototype(current.column_of(id).unwrap());
                let after = next.prototype(next.column_of(id).unwrap());
                format!("{:.3}", cosine(&before, &after))
            })
            .collect();
        println!(
            "K {:>2} -> {:>2}: deviation {:.2e}, off-diagonal {:.4}, old-prototype cosines [{}]",
            current.num_classes(),
            k,
            verify_etf(&next),
            -1.0 / (k as f64 - 1.0),
            drift.join(" ")
        );
        assert!(current.class_ids().iter().all(|&id| next.column_of(id) == current.column_of(id)));
        current = next;
    }

    let z = current.prototype(3);
    println!("classify(prototype of column 3) = class {}", current.classify(&z)?);
    let text = current.to_text();
    println!("text export: {} lines, header `{}`", text.lines().count(), text.lines().next().unwrap_or(""));
    Ok(())
}
