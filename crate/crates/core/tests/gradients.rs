//! Reverse-mode gradients of every tape op, loss and layer against central
//! finite differences.

mod common;

use common::{check_module, check_vars, randn, readout, small, uniform, FD_TOLERANCE};
use etfcil::diffcore::{ParamStore, Tape, Tensor, Var};
use etfcil::network::{AdaptLayer, Linear, ResidualBlock};
use etfcil::objectives::{
    distill_pair_loss, distill_total, dot_regression_loss, dot_regression_total, total_loss, ConstraintMode, LossConfig,
};
use etfcil::geometry::build_etf;
use etfcil::Result;

const CASES: u64 = 100;

/// Runs `case` for every seed and fails with the worst seed.
fn sweep(name: &str, case: impl Fn(u64) -> f64) {
    let (seed, err) = (0..CASES).map(|s| (s, case(s))).fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
    assert!(err < FD_TOLERANCE, "{name}: rel. err {err:.3e} at seed {seed}");
}

fn unary(s: u64, op: impl Fn(&mut Tape, Var) -> Result<Var>) -> f64 {
    let (n, d) = (small(s, 1, 1, 4), small(s, 2, 2, 6));
    let x = randn(&[n, d], s, 3);
    check_vars(&[x], &[0], |t, v| {
        let y = op(t, v[0])?;
        readout(t, y, s)
    })
    .unwrap()
}

fn binary(s: u64, op: impl Fn(&mut Tape, Var, Var) -> Result<Var>) -> f64 {
    let (n, d) = (small(s, 1, 1, 4), small(s, 2, 1, 6));
    let inputs = [randn(&[n, d], s, 3), randn(&[n, d], s, 4)];
    check_vars(&inputs, &[0, 1], |t, v| {
        let y = op(t, v[0], v[1])?;
        readout(t, y, s)
    })
    .unwrap()
}

#[test]
fn elementwise_ops() {
    sweep("add", |s| binary(s, |t, a, b| t.add(a, b)));
    sweep("sub", |s| binary(s, |t, a, b| t.sub(a, b)));
    sweep("mul", |s| binary(s, |t, a, b| t.mul(a, b)));
    sweep("scale", |s| unary(s, |t, a| t.scale(a, uniform(s, 7, -3.0, 3.0))));
    sweep("add_scalar", |s| unary(s, |t, a| t.add_scalar(a, uniform(s, 7, -3.0, 3.0))));
    sweep("relu", |s| unary(s, |t, a| t.relu(a)));
    sweep("square", |s| unary(s, |t, a| t.square(a)));
}

#[test]
fn row_ops() {
    sweep("l2_normalize", |s| unary(s, |t, a| t.l2_normalize(a)));
    sweep("clip_norm", |s| unary(s, |t, a| t.clip_norm(a, uniform(s, 8, 0.3, 3.0))));
    sweep("row_dot", |s| {
        let (n, d) = (small(s, 1, 1, 4), small(s, 2, 1, 6));
        let inputs = [randn(&[n, d], s, 3), randn(&[n, d], s, 4)];
        check_vars(&inputs, &[0, 1], |t, v| {
            let y = t.row_dot(v[0], v[1])?;
            readout(t, y, s)
        })
        .unwrap()
    });
    sweep("normalize then inner product", |s| {
        let (n, d) = (small(s, 1, 1, 4), small(s, 2, 2, 6));
        let inputs = [randn(&[n, d], s, 3), randn(&[n, d], s, 4)];
        check_vars(&inputs, &[0, 1], |t, v| {
            let a = t.l2_normalize(v[0])?;
            let b = t.l2_normalize(v[1])?;
            let c = t.row_dot(a, b)?;
            t.sum(c)
        })
        .unwrap()
    });
}

#[test]
fn shape_ops() {
    sweep("matmul", |s| {
        let (n, k, m) = (small(s, 1, 1, 4), small(s, 2, 1, 5), small(s, 3, 1, 5));
        let inputs = [randn(&[n, k], s, 4), randn(&[k, m], s, 5)];
        check_vars(&inputs, &[0, 1], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            readout(t, y, s)
        })
        .unwrap()
    });
    sweep("add_bias", |s| {
        let (n, d) = (small(s, 1, 1, 4), small(s, 2, 1, 6));
        let inputs = [randn(&[n, d], s, 3), randn(&[d], s, 4)];
        check_vars(&inputs, &[0, 1], |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            readout(t, y, s)
        })
        .unwrap()
    });
    sweep("concat", |s| {
        let (n, a, b) = (small(s, 1, 1, 4), small(s, 2, 1, 4), small(s, 3, 1, 4));
        let inputs = [randn(&[n, a], s, 4), randn(&[n, b], s, 5)];
        check_vars(&inputs, &[0, 1], |t, v| {
            let y = t.concat(v[0], v[1])?;
            readout(t, y, s)
        })
        .unwrap()
    });
    sweep("mean and sum", |s| {
        unary(s, |t, a| {
            let m = t.mean(a)?;
            let q = t.square(a)?;
            let sm = t.sum(q)?;
            let m = t.scale(m, 2.0)?;
            t.add(m, sm)
        })
    });
}

#[test]
fn softmax_cross_entropy() {
    sweep("softmax_cross_entropy", |s| {
        let (n, k) = (small(s, 1, 1, 5), small(s, 2, 2, 6));
        let targets: Vec<usize> = (0..n).map(|i| small(s, 10 + i as u64, 0, k - 1)).collect();
        let logits = randn(&[n, k], s, 3);
        check_vars(&[logits], &[0], |t, v| t.softmax_cross_entropy(v[0], &targets)).unwrap()
    });
}

#[test]
fn detach_blocks_gradient() {
    let mut t = Tape::new();
    let a = t.leaf(randn(&[3, 4], 1, 1).with_requires_grad(true));
    let b = t.leaf(randn(&[3, 4], 1, 2).with_requires_grad(true));
    let loss = distill_pair_loss(&mut t, a, b).unwrap();
    let g = t.backward(loss).unwrap();
    assert!(g.get(a).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    assert!(g.get(b).is_some_and(|g| g.iter().any(|&v| v != 0.0)));
}

#[test]
fn losses() {
    sweep("dot_regression_loss", |s| {
        let (n, d) = (small(s, 1, 1, 5), small(s, 2, 2, 8));
        let (e_w, e_z) = (uniform(s, 3, 0.25, 4.0), uniform(s, 4, 0.25, 4.0));
        let inputs = [randn(&[n, d], s, 5), randn(&[n, d], s, 6)];
        check_vars(&inputs, &[0, 1], |t, v| dot_regression_loss(t, v[0], v[1], e_w, e_z)).unwrap()
    });
    sweep("distill_pair_loss", |s| {
        let (n, d) = (small(s, 1, 1, 5), small(s, 2, 2, 8));
        let inputs = [randn(&[n, d], s, 5), randn(&[n, d], s, 6)];
        check_vars(&inputs, &[1], |t, v| distill_pair_loss(t, v[0], v[1])).unwrap()
    });
    sweep("distill_total", |s| {
        let (n, d) = (small(s, 1, 1, 4), small(s, 2, 2, 6));
        let inputs: Vec<Tensor> = (0..4).map(|i| randn(&[n, d], s, 5 + i)).collect();
        check_vars(&inputs, &[1, 3], |t, v| distill_total(t, &[(v[0], v[1]), (v[2], v[3])])).unwrap()
    });
    for constraint in [ConstraintMode::Rescale, ConstraintMode::Penalty] {
        sweep("dot_regression_total + total_loss", |s| {
            let (n, d) = (small(s, 1, 1, 5), small(s, 2, 2, 8));
            let k = small(s, 3, 2, d);
            let etf = build_etf(k, d, uniform(s, 4, 0.25, 4.0), s).unwrap();
            let labels: Vec<usize> = (0..n).map(|i| small(s, 10 + i as u64, 0, k - 1)).collect();
            let cfg = LossConfig {
                feature_budget: uniform(s, 5, 0.25, 4.0),
                lambda: uniform(s, 6, 0.0, 1.0),
                constraint,
            };
            let inputs = [randn(&[n, d], s, 7), randn(&[n, 3], s, 8), randn(&[n, 3], s, 9)];
            check_vars(&inputs, &[0, 2], |t, v| {
                let dr = dot_regression_total(t, v[0], &labels, &etf, &cfg)?;
                let dist = distill_total(t, &[(v[1], v[2])])?;
                total_loss(t, dr, dist, &cfg)
            })
            .unwrap()
        });
    }
}

#[test]
fn layers() {
    sweep("linear", |s| {
        let (n, i, o) = (small(s, 1, 1, 4), small(s, 2, 1, 5), small(s, 3, 1, 5));
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", i, o, s % 2 == 0, s);
        check_module(&store, &lin.params(), &randn(&[n, i], s, 4), |st, t, b, x| {
            let y = lin.forward(st, t, b, x)?;
            readout(t, y, s)
        })
        .unwrap()
    });
    sweep("adapt-layer", |s| {
        let (n, i, o) = (small(s, 1, 1, 4), small(s, 2, 1, 5), small(s, 3, 1, 5));
        let mut store = ParamStore::new();
        let adapt = AdaptLayer::new(&mut store, i, o, s);
        check_module(&store, &adapt.params(), &randn(&[n, i], s, 4), |st, t, b, x| {
            let y = adapt.forward(st, t, b, x)?;
            readout(t, y, s)
        })
        .unwrap()
    });
    sweep("residual block", |s| {
        let (n, i) = (small(s, 1, 1, 4), small(s, 2, 1, 5));
        let o = if s % 2 == 0 { i } else { small(s, 3, 1, 5) };
        let mut store = ParamStore::new();
        let blk = ResidualBlock::new(&mut store, "blk", i, o, s);
        check_module(&store, &blk.params(), &randn(&[n, i], s, 4), |st, t, b, x| {
            let y = blk.forward(st, t, b, x)?;
            readout(t, y, s)
        })
        .unwrap()
    });
}

#[test]
fn finite_difference_oracle_is_sensitive() {
    // a deliberately wrong gradient (sum instead of mean) must be caught
    let x = randn(&[4, 3], 2, 1);
    let wrong = common::rel_err(&[1.0; 12], &[0.25; 12]);
    assert!(wrong > FD_TOLERANCE);
    let ok = check_vars(&[x], &[0], |t, v| t.mean(v[0])).unwrap();
    assert!(ok < FD_TOLERANCE);
}
