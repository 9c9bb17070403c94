//! Training objectives: dot-regression toward fixed prototypes, cosine
//! distillation between consecutive expand-layers, and their weighted sum.
//!
//! Every function records onto a [`Tape`] so the result can be differentiated.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::EtfClassifier;

/// Weight of the quadratic penalty used by [`ConstraintMode::Penalty`].
pub const PENALTY_WEIGHT: f64 = 1.0;

/// How the feature-norm budget `|z|^2 <= E_Z` is enforced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintMode {
    /// Rows above the budget are rescaled onto the sphere of radius `sqrt(E_Z)`.
    #[default]
    Rescale,
    /// Adds `PENALTY_WEIGHT * mean(max(0, |z|^2 - E_Z))` to the loss.
    Penalty,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub feature_budget: f64,
    pub lambda: f64,
    pub constraint: ConstraintMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            feature_budget: 1.0,
            lambda: 0.5,
            constraint: ConstraintMode::Rescale,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.feature_budget > 0.0 && self.feature_budget.is_finite()) {
            return Err(Error::config("loss.E_Z", "must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("loss.lambda", "must be >= 0"));
        }
        Ok(())
    }
}

fn check_budgets(e_w: f64, e_z: f64) -> Result<f64> {
    if !(e_w > 0.0 && e_z > 0.0) {
        return Err(Error::Contract(format!("norm budgets must be positive (E_W={e_w}, E_Z={e_z})")));
    }
    Ok((e_w * e_z).sqrt())
}

/// `(w_k . z - sqrt(E_W E_Z))^2 / (2 sqrt(E_W E_Z))`, averaged over rows when
/// `z` and `w_k` are batches.
pub fn dot_regression_loss(tape: &mut Tape, z: Var, w_k: Var, e_w: f64, e_z: f64) -> Result<Var> {
    let target = check_budgets(e_w, e_z)?;
    let dots = tape.row_dot(z, w_k)?;
    let resid = tape.add_scalar(dots, -target)?;
    let sq = tape.square(resid)?;
    let m = tape.mean(sq)?;
    tape.scale(m, 0.5 / target)
}

/// Applies the feature-norm budget to a batch of features. Returns the
/// constrained features and, in penalty mode, the penalty term.
pub fn constrain_features(tape: &mut Tape, z: Var, cfg: &LossConfig) -> Result<(Var, Option<Var>)> {
    match cfg.constraint {
        ConstraintMode::Rescale => Ok((tape.clip_norm(z, cfg.feature_budget.sqrt())?, None)),
        ConstraintMode::Penalty => {
            let sq = tape.row_dot(z, z)?;
            let excess = tape.add_scalar(sq, -cfg.feature_budget)?;
            let hinge = tape.relu(excess)?;
            let mean = tape.mean(hinge)?;
            Ok((z, Some(tape.scale(mean, PENALTY_WEIGHT)?)))
        }
    }
}

/// Mean dot-regression loss of a labelled batch against the fixed frame.
/// The norm budget is enforced before the loss.
pub fn dot_regression_total(
    tape: &mut Tape,
    z: Var,
    labels: &[usize],
    etf: &EtfClassifier,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let shape = tape.shape(z).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || shape[1] != etf.dim() {
        return Err(Error::dim("dot_regression_total", &shape, &[labels.len(), etf.dim()]));
    }
    let targets = tape.constant(etf.prototypes_for(labels)?);
    let (z, penalty) = constrain_features(tape, z, cfg)?;
    let loss = dot_regression_loss(tape, z, targets, etf.norm_budget(), cfg.feature_budget)?;
    match penalty {
        Some(p) => tape.add(loss, p),
        None => Ok(loss),
    }
}

/// `0.5 (cos(prev, curr) - 1)^2`, batch-averaged. `prev` is detached: it is
/// the output of a frozen expand-layer.
pub fn distill_pair_loss(tape: &mut Tape, prev: Var, curr: Var) -> Result<Var> {
    if tape.shape(prev) != tape.shape(curr) {
        return Err(Error::dim("distill_pair_loss", tape.shape(prev), tape.shape(curr)));
    }
    let prev = tape.detach(prev);
    let a = tape.l2_normalize(prev)?;
    let b = tape.l2_normalize(curr)?;
    let cos = tape.row_dot(a, b)?;
    let gap = tape.add_scalar(cos, -1.0)?;
    let sq = tape.square(gap)?;
    let m = tape.mean(sq)?;
    tape.scale(m, 0.5)
}

/// Sum of [`distill_pair_loss`] over consecutive expand-layer pairs; a
/// constant zero when there are none.
pub fn distill_total(tape: &mut Tape, pairs: &[(Var, Var)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(prev, curr) in pairs {
        let l = distill_pair_loss(tape, prev, curr)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

/// `dr + lambda * distill`.
pub fn total_loss(tape: &mut Tape, dr: Var, distill: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let weighted = tape.scale(distill, cfg.lambda)?;
    tape.add(dr, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_etf;
    use proptest::prelude::*;

    fn vec_var(tape: &mut Tape, v: &[f64]) -> Var {
        tape.leaf(Tensor::vector(v.to_vec()).with_requires_grad(true))
    }

    fn dr(dot: f64, e_w: f64, e_z: f64) -> f64 {
        let mut t = Tape::new();
        let z = vec_var(&mut t, &[dot, 0.0]);
        let w = t.constant(Tensor::vector(vec![1.0, 0.0]));
        let l = dot_regression_loss(&mut t, z, w, e_w, e_z).unwrap();
        t.value(l).item().unwrap()
    }

    #[test]
    fn dot_regression_examples() {
        assert_eq!(dr(1.0, 1.0, 1.0), 0.0);
        assert!((dr(0.0, 1.0, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(dr(2.0, 4.0, 1.0), 0.0);
        let mut t = Tape::new();
        let z = vec_var(&mut t, &[1.0]);
        assert!(dot_regression_loss(&mut t, z, z, 0.0, 1.0).is_err());
    }

    fn pair(a: &[f64], b: &[f64]) -> f64 {
        let mut t = Tape::new();
        let x = vec_var(&mut t, a);
        let y = vec_var(&mut t, b);
        let l = distill_pair_loss(&mut t, x, y).unwrap();
        t.value(l).item().unwrap()
    }

    #[test]
    fn distill_pair_examples() {
        assert!(pair(&[1.0, 2.0], &[1.0, 2.0]).abs() < 1e-12);
        assert!((pair(&[1.0, 0.0], &[0.0, 3.0]) - 0.5).abs() < 1e-12);
        assert!((pair(&[1.0, -1.0], &[-2.0, 2.0]) - 2.0).abs() < 1e-12);
        let mut t = Tape::new();
        let x = vec_var(&mut t, &[1.0, 0.0]);
        let y = vec_var(&mut t, &[1.0, 0.0, 0.0]);
        assert!(matches!(distill_pair_loss(&mut t, x, y), Err(Error::Dimension { .. })));
    }

    #[test]
    fn distill_gradient_only_reaches_current() {
        let mut t = Tape::new();
        let x = vec_var(&mut t, &[1.0, 0.5]);
        let y = vec_var(&mut t, &[0.2, 1.0]);
        let l = distill_pair_loss(&mut t, x, y).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.get(x).is_none());
        assert!(g.get(y).unwrap().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn distill_total_examples() {
        let mut t = Tape::new();
        let empty = distill_total(&mut t, &[]).unwrap();
        assert_eq!(t.value(empty).item().unwrap(), 0.0);

        let a = vec_var(&mut t, &[1.0, 0.0]);
        let b = vec_var(&mut t, &[2.0, 0.0]);
        let c = vec_var(&mut t, &[0.0, 1.0]);
        let one = distill_total(&mut t, &[(a, b)]).unwrap();
        assert!(t.value(one).item().unwrap().abs() < 1e-12);
        let two = distill_total(&mut t, &[(a, b), (b, c)]).unwrap();
        assert!((t.value(two).item().unwrap() - 0.5).abs() < 1e-12);
    }

    fn total(dr: f64, distill: f64, lambda: f64) -> f64 {
        let mut t = Tape::new();
        let a = t.constant(Tensor::scalar(dr));
        let b = t.constant(Tensor::scalar(distill));
        let cfg = LossConfig { lambda, ..LossConfig::default() };
        let l = total_loss(&mut t, a, b, &cfg).unwrap();
        t.value(l).item().unwrap()
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total(0.3, 7.0, 0.0), 0.3);
        assert!((total(0.5, 0.5, 0.4) - 0.7).abs() < 1e-15);
        assert_eq!(LossConfig::default().lambda, 0.5);
        assert!((total(1.0, 2.0, LossConfig::default().lambda) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn batch_total_examples() {
        let etf = build_etf(2, 2, 1.0, 4).unwrap();
        let cfg = LossConfig::default();
        let w0 = etf.prototype(0);
        let w1 = etf.prototype(1);
        // perfect sample: z = sqrt(E_Z) * w0 / |w0|
        let perfect = w0.clone();
        // orthogonal sample for class 1: w1 . z = 0
        let ortho = vec![-w1[1], w1[0]];

        let run = |rows: Vec<Vec<f64>>, labels: Vec<usize>| {
            let mut t = Tape::new();
            let z = t.leaf(Tensor::from_rows(&rows).unwrap().with_requires_grad(true));
            let l = dot_regression_total(&mut t, z, &labels, &etf, &cfg).unwrap();
            t.value(l).item().unwrap()
        };
        assert!(run(vec![perfect.clone()], vec![0]).abs() < 1e-12);
        assert!((run(vec![ortho.clone()], vec![1]) - 0.5).abs() < 1e-12);
        assert!((run(vec![perfect, ortho], vec![0, 1]) - 0.25).abs() < 1e-12);

        let mut t = Tape::new();
        let z = t.leaf(Tensor::from_rows(&[[0.0, 1.0]]).unwrap());
        assert!(matches!(
            dot_regression_total(&mut t, z, &[5], &etf, &cfg),
            Err(Error::UnknownLabel(5))
        ));
    }

    #[test]
    fn rescale_mode_caps_feature_norm() {
        let etf = build_etf(2, 2, 1.0, 4).unwrap();
        let w0 = etf.prototype(0);
        let big: Vec<f64> = w0.iter().map(|v| v * 10.0).collect();
        let mut t = Tape::new();
        let z = t.leaf(Tensor::from_rows(&[big]).unwrap());
        let l = dot_regression_total(&mut t, z, &[0], &etf, &LossConfig::default()).unwrap();
        assert!(t.value(l).item().unwrap().abs() < 1e-12);

        let cfg = LossConfig { constraint: ConstraintMode::Penalty, ..LossConfig::default() };
        let mut t = Tape::new();
        let z = t.leaf(Tensor::from_rows(&[[2.0, 0.0]]).unwrap());
        let (_, penalty) = constrain_features(&mut t, z, &cfg).unwrap();
        assert!((t.value(penalty.unwrap()).item().unwrap() - 3.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn dot_regression_nonnegative(dot in -10.0f64..10.0, e_w in 0.1f64..5.0, e_z in 0.1f64..5.0) {
            let v = dr(dot, e_w, e_z);
            prop_assert!(v >= 0.0);
            if (dot - (e_w * e_z).sqrt()).abs() > 1e-6 {
                prop_assert!(v > 0.0);
            }
        }

        #[test]
        fn distill_is_scale_invariant(
            x in prop::collection::vec(-3.0f64..3.0, 4),
            y in prop::collection::vec(-3.0f64..3.0, 4),
            a in 0.1f64..10.0,
            b in 0.1f64..10.0,
        ) {
            prop_assume!(x.iter().any(|v| v.abs() > 0.1) && y.iter().any(|v| v.abs() > 0.1));
            let xs: Vec<f64> = x.iter().map(|v| v * a).collect();
            let ys: Vec<f64> = y.iter().map(|v| v * b).collect();
            prop_assert!((pair(&x, &y) - pair(&xs, &ys)).abs() < 1e-9);
        }

        #[test]
        fn total_monotone_in_lambda(dr in 0.0f64..5.0, distill in 1e-3f64..5.0, l1 in 0.0f64..2.0, dl in 0.0f64..2.0) {
            prop_assert!(total(dr, distill, l1 + dl) >= total(dr, distill, l1));
        }
    }
}
