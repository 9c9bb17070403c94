//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit when any
//! criterion fails.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use common::{blob_config, check_module, check_vars, randn, readout, small, uniform, FD_TOLERANCE};
use etfcil::analysis::{acc_avg, performance_drop, RunReport, REPORT_FILE};
use etfcil::diffcore::ParamStore;
use etfcil::geometry::{build_etf, expand_etf, verify_etf};
use etfcil::network::{AdaptLayer, HeadKind, ResidualBlock, Wiring};
use etfcil::objectives::{
    distill_pair_loss, distill_total, dot_regression_loss, dot_regression_total, total_loss, ConstraintMode, LossConfig,
};
use etfcil::protocol::{RunConfig, GRAM_TOLERANCE};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const CASES: u64 = 100;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn run(cfg: &RunConfig, label: &str) -> RunReport {
    cfg.execute(label).unwrap_or_else(|e| panic!("{label}: {e}")).0
}

/// Reports on the B4Inc2 stream, cached by variant and seed.
#[derive(Default)]
struct Runs {
    cache: BTreeMap<(String, u64), RunReport>,
}

impl Runs {
    fn get(&mut self, variant: &str, seed: u64) -> &RunReport {
        let key = (variant.to_string(), seed);
        if !self.cache.contains_key(&key) {
            let mut cfg = blob_config(seed, 8, 4, 2);
            match variant {
                "full" => {}
                "serial" => cfg.wiring = Wiring::Serial,
                "fc" => cfg.head = HeadKind::Fc,
                "noadapt" => {
                    cfg.model.adapt = false;
                    cfg.model.etf_dim = None;
                }
                v => cfg.loss.lambda = v.strip_prefix("lambda=").and_then(|l| l.parse().ok()).expect(v),
            }
            let report = run(&cfg, &format!("{variant}-{seed}"));
            self.cache.insert(key.clone(), report);
        }
        &self.cache[&key]
    }
}

fn last_old_accuracy(r: &RunReport) -> f64 {
    r.stages.last().and_then(|s| s.old_accuracy).unwrap_or(f64::NAN)
}

fn etf_geometry() -> Outcome {
    let mut worst: f64 = 0.0;
    for k in 2..=64 {
        for d in [k, k + 7] {
            for e_w in [0.25, 1.0, 4.0] {
                worst = worst.max(verify_etf(&build_etf(k, d, e_w, k as u64).unwrap()));
            }
        }
    }
    let mut chain_ok = true;
    for d in [64, 71] {
        let mut etf = build_etf(2, d, 1.0, 11).unwrap();
        for k in 3..=64 {
            let next = expand_etf(&etf, k).unwrap();
            worst = worst.max(verify_etf(&next));
            chain_ok &= etf.class_ids().iter().all(|&id| next.column_of(id) == etf.column_of(id));
            etf = next;
        }
    }
    outcome(worst < 1e-9 && chain_ok, format!("max Gram deviation {worst:.2e}, ids stable: {chain_ok}"))
}

fn gradient_suite() -> Outcome {
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name, err: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(err);
    };
    for s in 0..CASES {
        let n = small(s, 1, 1, 5);
        let d = small(s, 2, 2, 8);
        let (e_w, e_z) = (uniform(s, 3, 0.25, 4.0), uniform(s, 4, 0.25, 4.0));

        let inputs = [randn(&[n, d], s, 5), randn(&[n, d], s, 6)];
        note(
            "dot_regression_loss",
            check_vars(&inputs, &[0, 1], |t, v| dot_regression_loss(t, v[0], v[1], e_w, e_z)).unwrap(),
        );
        note(
            "distill_pair_loss",
            check_vars(&inputs, &[1], |t, v| distill_pair_loss(t, v[0], v[1])).unwrap(),
        );

        let k = small(s, 7, 2, d);
        let etf = build_etf(k, d, e_w, s).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| small(s, 10 + i as u64, 0, k - 1)).collect();
        let cfg = LossConfig {
            feature_budget: e_z,
            lambda: uniform(s, 8, 0.0, 1.0),
            constraint: if s % 2 == 0 { ConstraintMode::Rescale } else { ConstraintMode::Penalty },
        };
        let z = randn(&[n, d], s, 9);
        let w = randn(&[n, 3], s, 20);
        let inputs = [z, w.clone(), randn(&[n, 3], s, 21)];
        note(
            "total_loss",
            check_vars(&inputs, &[0, 2], |t, v| {
                let dr = dot_regression_total(t, v[0], &labels, &etf, &cfg)?;
                let dist = distill_total(t, &[(v[1], v[2])])?;
                total_loss(t, dr, dist, &cfg)
            })
            .unwrap(),
        );

        let in_dim = small(s, 30, 1, 6);
        let out_dim = small(s, 31, 1, 6);
        let x = randn(&[n, in_dim], s, 32);
        let mut store = ParamStore::new();
        let adapt = AdaptLayer::new(&mut store, in_dim, out_dim, s);
        note(
            "adapt-layer",
            check_module(&store, &adapt.params(), &x, |st, t, b, xv| {
                let out = adapt.forward(st, t, b, xv)?;
                readout(t, out, s)
            })
            .unwrap(),
        );
        let out_dim = if s % 2 == 0 { in_dim } else { out_dim };
        let mut store = ParamStore::new();
        let block = ResidualBlock::new(&mut store, "blk", in_dim, out_dim, s);
        note(
            "residual block",
            check_module(&store, &block.params(), &x, |st, t, b, xv| {
                let out = block.forward(st, t, b, xv)?;
                readout(t, out, s)
            })
            .unwrap(),
        );
    }
    let pass = worst.values().all(|&e| e < FD_TOLERANCE);
    let detail = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    outcome(pass, format!("max rel. err over {CASES} cases: {detail}"))
}

fn metric_oracles() -> Outcome {
    let row = [78.62, 74.67, 73.04, 68.20, 66.28, 64.69];
    let avg = acc_avg(&row).unwrap();
    let pd = performance_drop(&row).unwrap();
    let der = performance_drop(&[76.50, 72.78, 71.40, 68.14, 65.84, 64.10]).unwrap();
    let pass = (avg - 70.92).abs() <= 0.005 && (pd - 13.93).abs() <= 0.005 && (der - 12.40).abs() <= 0.005;
    outcome(pass, format!("Acc_avg {avg:.4}, PD {pd:.4}, DER PD {der:.4}"))
}

fn neural_collapse() -> Outcome {
    let mut cfg = blob_config(1, 6, 6, 0);
    cfg.schedule.epochs_base = 100;
    let r = run(&cfg, "collapse");
    let collapse = r.stages[0].collapse.as_ref().expect("ETF head reports collapse");
    let min_cos = collapse.min_cosine().unwrap_or(f64::NAN);
    let acc = r.accuracies[0];
    outcome(min_cos >= 0.9 && acc >= 95.0, format!("min class cosine {min_cos:.4}, test accuracy {acc:.2}%"))
}

fn incremental_protocol() -> Outcome {
    let r = run(&blob_config(1, 8, 4, 2), "protocol");
    let ks: Vec<usize> = r.stages.iter().map(|s| s.num_classes).collect();
    let digests_ok = r.stages[1..].iter().all(|s| s.frozen_digest_before == s.frozen_digest_after);
    let gram = r.stages.iter().map(|s| s.etf_gram_error.unwrap_or(f64::INFINITY)).fold(0.0, f64::max);
    let pass = ks == [4, 6, 8] && digests_ok && gram < GRAM_TOLERANCE && r.forbidden_reads == 0;
    outcome(
        pass,
        format!(
            "K {ks:?}, frozen digests unchanged: {digests_ok}, max Gram deviation {gram:.2e}, forbidden reads {}",
            r.forbidden_reads
        ),
    )
}

fn parallel_vs_serial(runs: &mut Runs) -> Outcome {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for s in SEEDS {
        let p = runs.get("full", s).stages.last().and_then(|x| x.mean_cka).unwrap_or(f64::NAN);
        let q = runs.get("serial", s).stages.last().and_then(|x| x.mean_cka).unwrap_or(f64::NAN);
        wins += usize::from(p > q);
        pairs.push(format!("{p:.3}/{q:.3}"));
    }
    outcome(wins >= 4, format!("parallel > serial in {wins}/5 seeds (mean CKA {})", pairs.join(" ")))
}

fn distillation(runs: &mut Runs) -> Outcome {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for s in SEEDS {
        let with = last_old_accuracy(runs.get("lambda=0.5", s));
        let without = last_old_accuracy(runs.get("lambda=0", s));
        wins += usize::from(with >= without);
        pairs.push(format!("{with:.1}/{without:.1}"));
    }
    let lambdas = ["0.1", "0.3", "0.5", "0.7", "0.9"];
    let means: Vec<f64> = lambdas
        .iter()
        .map(|l| SEEDS.iter().map(|&s| runs.get(&format!("lambda={l}"), s).acc_avg).sum::<f64>() / SEEDS.len() as f64)
        .collect();
    let range = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - means.iter().cloned().fold(f64::INFINITY, f64::min);
    let shown = lambdas.iter().zip(&means).map(|(l, m)| format!("{l}:{m:.2}")).collect::<Vec<_>>().join(" ");
    outcome(
        wins >= 4 && range <= 5.0,
        format!(
            "old-class accuracy lambda=0.5 >= lambda=0 in {wins}/5 seeds ({}); seed-mean Acc_avg {shown}, range {range:.2}pp",
            pairs.join(" ")
        ),
    )
}

fn ablation(runs: &mut Runs) -> Outcome {
    let mut fc_wins = 0;
    let mut adapt_wins = 0;
    let mut rows = Vec::new();
    for s in SEEDS {
        let full = runs.get("full", s).acc_avg;
        let fc = runs.get("fc", s).acc_avg;
        let noadapt = runs.get("noadapt", s).acc_avg;
        fc_wins += usize::from(full >= fc);
        adapt_wins += usize::from(full >= noadapt);
        rows.push(format!("{full:.1}/{fc:.1}/{noadapt:.1}"));
    }
    outcome(
        fc_wins >= 3 && adapt_wins >= 3,
        format!(
            "full >= FC head in {fc_wins}/5, full >= no adapt-layer in {adapt_wins}/5 (Acc_avg full/fc/noadapt {})",
            rows.join(" ")
        ),
    )
}

fn determinism() -> Outcome {
    let cfg = blob_config(9, 8, 4, 2);
    let dir = tempfile::tempdir().unwrap();
    let bytes: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|sub| {
            let out = dir.path().join(sub);
            run(&cfg, "determinism").write_dir(&out).unwrap();
            std::fs::read(out.join(REPORT_FILE)).unwrap()
        })
        .collect();
    outcome(bytes[0] == bytes[1], format!("report.json {} bytes, identical: {}", bytes[0].len(), bytes[0] == bytes[1]))
}

type Check = Box<dyn FnOnce(&mut Runs) -> Outcome>;

fn main() {
    let mut runs = Runs::default();
    let criteria: Vec<(&str, Check)> = vec![
        ("ETF geometry", Box::new(|_| etf_geometry())),
        ("gradient suite", Box::new(|_| gradient_suite())),
        ("metric oracles", Box::new(|_| metric_oracles())),
        ("neural collapse on blobs", Box::new(|_| neural_collapse())),
        ("incremental protocol", Box::new(|_| incremental_protocol())),
        ("parallel vs serial CKA", Box::new(parallel_vs_serial)),
        ("distillation benefit", Box::new(distillation)),
        ("ablation ordering", Box::new(ablation)),
        ("determinism", Box::new(|_| determinism())),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let o = check(&mut runs);
        failed += usize::from(!o.pass);
        println!(
            "criterion {} [{name}]: {} ({}; {:.1}s)",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
