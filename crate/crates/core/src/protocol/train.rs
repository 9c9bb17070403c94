use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::schedule::{lr_at, TrainSchedule};
use super::stream::TaskStream;
use crate::analysis::{
    accuracy, cka_matrix, centroid_drift, class_centroids, collapse_diagnostics, mean_off_diagonal, RunReport,
    StageRecord,
};
use crate::diffcore::{mix_seed, seeded_rng, Bindings, SgdMomentum, Tape, Tensor};
use crate::error::{Error, Result};
use crate::geometry::verify_etf;
use crate::network::{ArchConfig, Head, HeadKind, ModelState};
use crate::objectives::{distill_total, dot_regression_total, total_loss};

/// Gram tolerance re-checked after every classifier expansion.
pub const GRAM_TOLERANCE: f64 = 1e-9;

/// Shuffles each class, interleaves the classes round-robin and cuts the
/// sequence into batches of `batch` rows, so every batch holds the task's
/// classes in near-equal proportion.
pub fn balanced_batches<R: Rng>(rows_by_class: &[Vec<usize>], batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut queues: Vec<Vec<usize>> = rows_by_class.to_vec();
    for q in &mut queues {
        q.shuffle(rng);
    }
    let longest = queues.iter().map(Vec::len).max().unwrap_or(0);
    let mut order = Vec::with_capacity(queues.iter().map(Vec::len).sum());
    for i in 0..longest {
        order.extend(queues.iter().filter_map(|q| q.get(i)));
    }
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Creates a model whose head covers the first task of `stream`.
pub fn build_model(arch: ArchConfig, stream: &TaskStream) -> Result<ModelState> {
    check_capacity(&arch, stream)?;
    let first = stream
        .tasks()
        .first()
        .ok_or_else(|| Error::Protocol("empty task stream".into()))?;
    ModelState::new(arch, &first.label_set)
}

fn check_capacity(arch: &ArchConfig, stream: &TaskStream) -> Result<()> {
    let k = stream.total_classes();
    if arch.head == HeadKind::Etf && arch.head_input_dim() < k {
        return Err(Error::Capacity { k, d: arch.head_input_dim() });
    }
    if arch.input_dim != stream.dim() {
        return Err(Error::config(
            "dataset",
            format!("feature dimension {} does not match the model input {}", stream.dim(), arch.input_dim),
        ));
    }
    Ok(())
}

/// One epoch of SGD on the current task. Returns the mean batch loss.
pub fn train_epoch(
    model: &mut ModelState,
    stream: &mut TaskStream,
    stage: usize,
    sched: &TrainSchedule,
    epoch: usize,
    opt: &mut SgdMomentum,
) -> Result<f64> {
    let task = &stream.tasks()[stage];
    let labels = stream.dataset().labels();
    let by_class: Vec<Vec<usize>> = task
        .label_set
        .iter()
        .map(|&k| task.train.iter().copied().filter(|&i| labels[i] == k).collect())
        .collect();
    let mut rng = seeded_rng(mix_seed(sched.seed, stage as u64), epoch as u64);
    let batches = balanced_batches(&by_class, sched.schedule.batch_size, &mut rng);
    opt.set_learning_rate(lr_at(&sched.schedule, epoch));
    let mut total = 0.0;
    for rows in &batches {
        let (x, y) = stream.train_rows(stage, rows);
        total += train_step(model, &x, &y, stage, sched, opt)?;
    }
    Ok(total / batches.len().max(1) as f64)
}

/// Forward, backward and one optimizer step on a labelled batch.
pub fn train_step(
    model: &mut ModelState,
    x: &Tensor,
    labels: &[usize],
    stage: usize,
    sched: &TrainSchedule,
    opt: &mut SgdMomentum,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut bind = Bindings::default();
    let xv = tape.constant(x.clone());
    let out = model.forward_stage(&mut tape, &mut bind, xv, stage)?;
    let fit = match model.head() {
        Head::Etf(etf) => dot_regression_total(&mut tape, out.adapted, labels, etf, &sched.loss)?,
        Head::Fc { .. } => {
            let cols = labels
                .iter()
                .map(|&c| model.head().column_of(c).ok_or(Error::UnknownLabel(c)))
                .collect::<Result<Vec<_>>>()?;
            tape.softmax_cross_entropy(out.logits, &cols)?
        }
    };
    let distill = distill_total(&mut tape, &out.distill_pairs())?;
    let loss = total_loss(&mut tape, fit, distill, &sched.loss)?;
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    model.store.accumulate(&grads, &bind)?;
    opt.step(&mut model.store)?;
    Ok(value)
}

struct Evaluation {
    accuracy: f64,
    old_accuracy: Option<f64>,
    new_accuracy: Option<f64>,
    cka: Vec<Vec<f64>>,
    head_input: Tensor,
    labels: Vec<usize>,
}

fn evaluate(model: &ModelState, stream: &mut TaskStream, stage: usize) -> Result<Evaluation> {
    let (x, labels) = stream.seen_test_set()?;
    let (tape, out) = model.infer(&x)?;
    let ids = model.head().class_ids();
    let logits = tape.value(out.logits);
    let predicted: Vec<usize> = (0..logits.rows())
        .map(|i| crate::geometry::argmax_lowest_id(logits.row(i), ids))
        .collect();
    let new_set = &stream.tasks()[stage].label_set;
    let subset = |old: bool| {
        let (p, t): (Vec<usize>, Vec<usize>) = predicted
            .iter()
            .zip(&labels)
            .filter(|(_, y)| new_set.binary_search(y).is_err() == old)
            .map(|(p, y)| (*p, *y))
            .unzip();
        accuracy(&p, &t)
    };
    let reps: Vec<Tensor> = out.expands.iter().map(|&v| tape.value(v).clone()).collect();
    Ok(Evaluation {
        accuracy: accuracy(&predicted, &labels).unwrap_or(0.0),
        old_accuracy: subset(true),
        new_accuracy: subset(false),
        cka: cka_matrix(&reps)?,
        head_input: tape.value(out.adapted).clone(),
        labels,
    })
}

/// Trains `model` through every task of `stream` and records one
/// [`StageRecord`] per stage. `model` must come from [`build_model`] (or
/// hold no expand-layer and a head over the first task's classes).
pub fn run_incremental(
    model: &mut ModelState,
    stream: &mut TaskStream,
    sched: &TrainSchedule,
    label: &str,
) -> Result<RunReport> {
    sched.validate()?;
    check_capacity(model.arch(), stream)?;
    if model.num_expands() != 0 || model.head().class_ids() != stream.tasks()[0].label_set.as_slice() {
        return Err(Error::Protocol("model must be fresh and cover exactly the first task".into()));
    }
    let mut stages = Vec::with_capacity(stream.num_tasks());
    let mut prev_centroids: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for t in 0..stream.num_tasks() {
        stream.enter(t)?;
        model.add_expand_layer()?;
        if t > 0 {
            let ids = stream.tasks()[t].label_set.clone();
            model.grow_head(&ids)?;
        }
        let etf_gram_error = model.head().etf().map(verify_etf);
        if let Some(err) = etf_gram_error {
            if err.is_nan() || err >= GRAM_TOLERANCE {
                return Err(Error::Contract(format!("ETF Gram deviation {err:e} after stage {t} expansion")));
            }
        }
        let frozen_digest_before = model.frozen_digest();
        model.begin_task()?;
        let mut opt = SgdMomentum::new(sched.schedule.lr0, sched.schedule.momentum)?;
        let mut final_loss = 0.0;
        for epoch in 0..sched.epochs(t) {
            final_loss = train_epoch(model, stream, t, sched, epoch, &mut opt)?;
        }
        model.end_task();
        let frozen_digest_after = model.frozen_digest();
        if frozen_digest_after != frozen_digest_before {
            return Err(Error::Contract(format!("frozen parameters changed during stage {t}")));
        }

        let eval = evaluate(model, stream, t)?;
        let drift = centroid_drift(&prev_centroids, &eval.head_input, &eval.labels)?;
        prev_centroids = class_centroids(&eval.head_input, &eval.labels)?
            .into_iter()
            .map(|(k, (c, _))| (k, c))
            .collect();
        let collapse = match model.head().etf() {
            Some(etf) => Some(collapse_diagnostics(&eval.head_input, &eval.labels, etf)?),
            None => None,
        };
        log::info!("{label}: stage {t} accuracy {:.2}% loss {final_loss:.5}", eval.accuracy);
        stages.push(StageRecord {
            stage: t,
            new_classes: stream.tasks()[t].label_set.clone(),
            num_classes: model.head().num_classes(),
            accuracy: eval.accuracy,
            old_accuracy: eval.old_accuracy,
            new_accuracy: eval.new_accuracy,
            final_loss,
            learning_rate: opt.learning_rate(),
            etf_gram_error,
            frozen_digest_before,
            frozen_digest_after,
            param_count: model.param_count(),
            mean_cka: mean_off_diagonal(&eval.cka),
            cka: eval.cka,
            collapse,
            drift,
        });
    }
    let arch = model.arch();
    let mut report = RunReport {
        label: label.to_string(),
        seed: sched.seed,
        wiring: arch.wiring.to_string(),
        head: arch.head.to_string(),
        adapt: arch.adapt,
        lambda: sched.loss.lambda,
        dataset: stream.dataset().provenance().to_string(),
        accuracies: vec![],
        acc_avg: 0.0,
        performance_drop: None,
        forbidden_reads: stream.access_log().forbidden_reads,
        stages,
    };
    report.finalize()?;
    report.validate()?;
    Ok(report)
}
