//! Shared helpers for the integration tests: finite-difference gradient
//! checks and a small blob-stream config builder.
#![allow(dead_code)]

use etfcil::diffcore::{seeded_rng, Bindings, ParamId, ParamStore, Tape, Tensor, Var};
use etfcil::protocol::RunConfig;
use etfcil::Result;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_TOLERANCE: f64 = 1e-4;

pub fn randn(shape: &[usize], seed: u64, salt: u64) -> Tensor {
    let mut rng = seeded_rng(seed, salt);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

pub fn uniform(seed: u64, salt: u64, lo: f64, hi: f64) -> f64 {
    seeded_rng(seed, salt).random_range(lo..hi)
}

pub fn small(seed: u64, salt: u64, lo: usize, hi: usize) -> usize {
    seeded_rng(seed, salt).random_range(lo..=hi)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|a - n| / max(|a|, |n|)` over the flattened gradients, or the absolute
/// difference when both are essentially zero.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-8 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

fn step(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

/// Checks the gradient of a scalar function of `inputs` w.r.t. the inputs
/// listed in `wrt`. The others enter the tape as constants.
pub fn check_vars<F>(inputs: &[Tensor], wrt: &[usize], f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if wrt.contains(&i) {
                tape.leaf(t.clone().with_requires_grad(true))
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for &i in wrt {
        match grads.get(vars[i]) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat_n(0.0, inputs[i].len())),
        }
        let mut probe = inputs.to_vec();
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            let h = step(x);
            probe[i].data_mut()[j] = x + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = x;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    Ok(rel_err(&analytic, &numeric))
}

/// Checks a module forward: gradients w.r.t. the input batch and every
/// parameter in `params`.
pub fn check_module<F>(store: &ParamStore, params: &[ParamId], x: &Tensor, f: F) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Tape, &mut Bindings, Var) -> Result<Var>,
{
    let eval = |store: &ParamStore, x: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let mut bind = Bindings::no_grad();
        let xv = tape.constant(x.clone());
        let out = f(store, &mut tape, &mut bind, xv)?;
        tape.value(out).item()
    };
    let mut live = store.clone();
    live.zero_grads();
    let mut tape = Tape::new();
    let mut bind = Bindings::default();
    let xv = tape.leaf(x.clone().with_requires_grad(true));
    let out = f(&live, &mut tape, &mut bind, xv)?;
    let grads = tape.backward(out)?;
    let mut analytic: Vec<f64> = grads.get(xv).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec);
    live.accumulate(&grads, &bind)?;
    for &id in params {
        let p = &live.get(id).value;
        match p.grad() {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat_n(0.0, p.len())),
        }
    }

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut probe = x.clone();
    for j in 0..x.len() {
        let v = x.data()[j];
        let h = step(v);
        probe.data_mut()[j] = v + h;
        let up = eval(store, &probe)?;
        probe.data_mut()[j] = v - h;
        let down = eval(store, &probe)?;
        probe.data_mut()[j] = v;
        numeric.push((up - down) / (2.0 * h));
    }
    let mut probe = store.clone();
    for &id in params {
        for j in 0..store.get(id).value.len() {
            let v = store.get(id).value.data()[j];
            let h = step(v);
            probe.get_mut(id).value.data_mut()[j] = v + h;
            let up = eval(&probe, x)?;
            probe.get_mut(id).value.data_mut()[j] = v - h;
            let down = eval(&probe, x)?;
            probe.get_mut(id).value.data_mut()[j] = v;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    Ok(rel_err(&analytic, &numeric))
}

/// Random linear read-out of a batch so every output entry gets its own
/// upstream gradient.
pub fn readout(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let c = tape.constant(randn(tape.shape(out), seed, 99));
    let d = tape.row_dot(out, c)?;
    tape.sum(d)
}

/// B{base}Inc{inc} blob stream used by the protocol-level checks.
pub fn blob_config(seed: u64, classes: usize, base: usize, inc: usize) -> RunConfig {
    RunConfig::from_toml(&format!(
        r#"
seed = {seed}
[dataset]
kind = "blobs"
classes = {classes}
per_class = 100
dim = 16
separation = 6.0
noise = 0.5
[split]
base = {base}
inc = {inc}
[model]
width = 32
etf_dim = 16
"#
    ))
    .unwrap()
}
