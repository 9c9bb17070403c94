//! Compares reverse-mode gradients with central finite differences for the
//! dot-regression loss, the distillation loss and a residual block.
//!
//!     cargo run --example gradient_check

use etfcil::diffcore::{seeded_rng, Bindings, ParamStore, Tape, Tensor};
use etfcil::network::ResidualBlock;
use etfcil::objectives::{distill_pair_loss, dot_regression_loss};
use rand_distr::{Distribution, StandardNormal};

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed, 0);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    diff / scale.max(1e-12)
}

/// Gradient of `f` at `x` by central differences.
fn numeric(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    let h = 1e-6;
    (0..x.len())
        .map(|i| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let up = f(&p);
            p.data_mut()[i] -= 2.0 * h;
            (up - f(&p)) / (2.0 * h)
        })
        .collect()
}

fn main() -> etfcil::Result<()> {
    let (z, w, prev) = (randn(&[5, 6], 1), randn(&[5, 6], 2), randn(&[5, 6], 3));

    let dr = |z: &Tensor| {
        let mut t = Tape::new();
        let zv = t.constant(z.clone());
        let wv = t.constant(w.clone());
        let l = dot_regression_loss(&mut t, zv, wv, 1.0, 2.0).unwrap();
        t.value(l).item().unwrap()
    };
    let mut t = Tape::new();
    let zv = t.leaf(z.clone().with_requires_grad(true));
    let wv = t.constant(w.clone());
    let l = dot_regression_loss(&mut t, zv, wv, 1.0, 2.0)?;
    let g = t.backward(l)?;
    println!("dot_regression_loss   rel. err {:.2e}", rel_err(g.get(zv).unwrap(), &numeric(&z, dr)));

    let dl = |z: &Tensor| {
        let mut t = Tape::new();
        let pv = t.constant(prev.clone());
        let zv = t.constant(z.clone());
        let l = distill_pair_loss(&mut t, pv, zv).unwrap();
        t.value(l).item().unwrap()
    };
    let mut t = Tape::new();
    let pv = t.leaf(prev.clone().with_requires_grad(true));
    let zv = t.leaf(z.clone().with_requires_grad(true));
    let l = distill_pair_loss(&mut t, pv, zv)?;
    let g = t.backward(l)?;
    println!("distill_pair_loss     rel. err {:.2e}", rel_err(g.get(zv).unwrap(), &numeric(&z, dl)));
    println!("  gradient reaching the frozen side: {:?}", g.get(pv).map(|v| v.iter().map(|x| x.abs()).sum::<f64>()));

    let mut store = ParamStore::new();
    let blk = ResidualBlock::new(&mut store, "blk", 6, 4, 9);
    let x = randn(&[5, 6], 4);
    let sum_out = |x: &Tensor| {
        let mut t = Tape::new();
        let mut b = Bindings::no_grad();
        let xv = t.constant(x.clone());
        let y = blk.forward(&store, &mut t, &mut b, xv).unwrap();
        let s = t.sum(y).unwrap();
        t.value(s).item().unwrap()
    };
    let mut t = Tape::new();
    let mut b = Bindings::default();
    let xv = t.leaf(x.clone().with_requires_grad(true));
    let y = blk.forward(&store, &mut t, &mut b, xv)?;
    let s = t.sum(y)?;
    let g = t.backward(s)?;
    println!("residual block input  rel. err {:.2e}", rel_err(g.get(xv).unwrap(), &numeric(&x, sum_out)));
    Ok(())
}
