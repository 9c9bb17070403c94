use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::geometry::EtfClassifier;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCollapse {
    pub class: usize,
    pub samples: usize,
    /// Cosine between the class feature mean and the class prototype.
    pub cosine: f64,
    /// Mean squared distance of the class features to their mean.
    pub within_variance: f64,
    /// Fewer than two samples: the variance is not meaningful.
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub classes: Vec<ClassCollapse>,
    /// Between-class spread of the class means over the mean within-class
    /// variance; `None` when the within-class variance vanishes.
    pub between_within_ratio: Option<f64>,
}

impl CollapseReport {
    pub fn min_cosine(&self) -> Option<f64> {
        self.classes.iter().map(|c| c.cosine).reduce(f64::min)
    }

    pub fn mean_cosine(&self) -> Option<f64> {
        if self.classes.is_empty() {
            return None;
        }
        Some(self.classes.iter().map(|c| c.cosine).sum::<f64>() / self.classes.len() as f64)
    }
}

/// Per-class feature means, in class-id order.
pub fn class_centroids(features: &Tensor, labels: &[usize]) -> Result<BTreeMap<usize, (Vec<f64>, usize)>> {
    if features.rows() != labels.len() {
        return Err(Error::dim("class_centroids", features.shape(), &[labels.len()]));
    }
    let d = features.cols();
    let mut acc: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        let e = acc.entry(y).or_insert_with(|| (vec![0.0; d], 0));
        e.0.iter_mut().zip(features.row(i)).for_each(|(a, v)| *a += v);
        e.1 += 1;
    }
    for (sum, n) in acc.values_mut() {
        sum.iter_mut().for_each(|v| *v /= *n as f64);
    }
    Ok(acc)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Alignment of class means with their prototypes and within-class spread.
pub fn collapse_diagnostics(features: &Tensor, labels: &[usize], etf: &EtfClassifier) -> Result<CollapseReport> {
    if features.cols() != etf.dim() {
        return Err(Error::dim("collapse_diagnostics", features.shape(), &[etf.dim()]));
    }
    let centroids = class_centroids(features, labels)?;
    let mut within: BTreeMap<usize, f64> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        *within.entry(y).or_default() += sq_dist(features.row(i), &centroids[&y].0);
    }
    let mut classes = Vec::with_capacity(centroids.len());
    for (&class, (mean, n)) in &centroids {
        let col = etf.column_of(class).ok_or(Error::UnknownLabel(class))?;
        classes.push(ClassCollapse {
            class,
            samples: *n,
            cosine: cosine(mean, &etf.prototype(col)),
            within_variance: within[&class] / *n as f64,
            flagged: *n < 2,
        });
    }
    let d = features.cols();
    let k = centroids.len() as f64;
    let mut global = vec![0.0; d];
    for (mean, _) in centroids.values() {
        global.iter_mut().zip(mean).for_each(|(g, m)| *g += m / k);
    }
    let between = centroids.values().map(|(m, _)| sq_dist(m, &global)).sum::<f64>() / k;
    let within_mean = classes.iter().map(|c| c.within_variance).sum::<f64>() / k;
    // rounding leaves squared distances near 1e-32 of the feature scale
    let between_within_ratio = (within_mean > 1e-24 * between.max(f64::MIN_POSITIVE)).then(|| between / within_mean);
    Ok(CollapseReport {
        classes,
        between_within_ratio,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftEntry {
    pub class: usize,
    /// Euclidean distance between the old and new centroid; `None` when the
    /// class has no samples in the new features.
    pub displacement: Option<f64>,
}

/// Displacement of each old class centroid under new features.
pub fn centroid_drift(old: &BTreeMap<usize, Vec<f64>>, features: &Tensor, labels: &[usize]) -> Result<Vec<DriftEntry>> {
    let new = class_centroids(features, labels)?;
    old.iter()
        .map(|(&class, prev)| {
            let displacement = match new.get(&class) {
                Some((c, _)) if c.len() == prev.len() => Some(sq_dist(c, prev).sqrt()),
                Some((c, _)) => return Err(Error::dim("centroid_drift", &[prev.len()], &[c.len()])),
                None => None,
            };
            Ok(DriftEntry { class, displacement })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_etf;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn perfect_collapse() {
        let etf = build_etf(3, 4, 1.0, 8).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..3 {
            for _ in 0..5 {
                rows.push(etf.prototype(c));
                labels.push(c);
            }
        }
        let f = Tensor::from_rows(&rows).unwrap();
        let r = collapse_diagnostics(&f, &labels, &etf).unwrap();
        for c in &r.classes {
            assert!((c.cosine - 1.0).abs() < 1e-12);
            assert!(c.within_variance.abs() < 1e-20);
        }
        assert_eq!(r.between_within_ratio, None);
    }

    #[test]
    fn anti_aligned_features() {
        let etf = build_etf(2, 3, 1.0, 8).unwrap();
        let neg: Vec<f64> = etf.prototype(0).iter().map(|v| -v).collect();
        let f = Tensor::from_rows(&[neg.clone(), neg]).unwrap();
        let r = collapse_diagnostics(&f, &[0, 0], &etf).unwrap();
        assert!((r.classes[0].cosine + 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_sample_class_is_flagged() {
        let etf = build_etf(2, 3, 1.0, 8).unwrap();
        let f = Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let r = collapse_diagnostics(&f, &[0, 0, 1], &etf).unwrap();
        assert!(!r.classes[0].flagged);
        assert!(r.classes[1].flagged);
    }

    #[test]
    fn isotropic_noise_has_small_cosine() {
        // Monte-Carlo oracle: class means of isotropic noise shrink like
        // 1/sqrt(n), so their direction is unrelated to the prototypes.
        let etf = build_etf(4, 16, 1.0, 5).unwrap();
        let mut rng = crate::diffcore::seeded_rng(77, 0);
        let n = 200;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..16).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let r = collapse_diagnostics(&Tensor::from_rows(&rows).unwrap(), &labels, &etf).unwrap();
        let mean_abs = r.classes.iter().map(|c| c.cosine.abs()).sum::<f64>() / r.classes.len() as f64;
        assert!(mean_abs < 0.5, "mean |cosine| {mean_abs}");
    }

    #[test]
    fn drift_of_translated_features() {
        let f = Tensor::from_rows(&[[0.0, 0.0], [2.0, 0.0], [5.0, 5.0]]).unwrap();
        let labels = [0, 0, 1];
        let old: BTreeMap<usize, Vec<f64>> = class_centroids(&f, &labels).unwrap().into_iter().map(|(k, (c, _))| (k, c)).collect();
        let same = centroid_drift(&old, &f, &labels).unwrap();
        assert!(same.iter().all(|d| d.displacement == Some(0.0)));

        let moved: Vec<Vec<f64>> = (0..3).map(|i| vec![f.row(i)[0] + 3.0, f.row(i)[1] + 4.0]).collect();
        let drift = centroid_drift(&old, &Tensor::from_rows(&moved).unwrap(), &labels).unwrap();
        assert!(drift.iter().all(|d| (d.displacement.unwrap() - 5.0).abs() < 1e-12));

        let missing = centroid_drift(&old, &Tensor::from_rows(&[[1.0, 1.0]]).unwrap(), &[0]).unwrap();
        assert_eq!(missing[1].displacement, None);
    }
}
