//! Simplex equiangular tight frames that grow with the class count.
//!
//! Column `k` of the classifier is
//! `sqrt(E_W) * sqrt(K / (K - 1)) * U (e_k - 1/K)`, where `U` is a `d x K`
//! matrix with orthonormal columns. With that scaling every column has
//! squared norm `E_W` and every pair has inner product `-E_W / (K - 1)`.
//! The weights are fixed; they never receive a gradient.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::{seeded_rng, Tensor};
use crate::error::{Error, Result};

const EMBEDDING_SALT: u64 = 0x45_54_46;
const ORTHO_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct EtfClassifier {
    /// `d x K`, one prototype per column.
    weights: Tensor,
    /// `d x K` with orthonormal columns.
    embedding: Tensor,
    norm_budget: f64,
    seed: u64,
    /// class id of each column
    column_class: Vec<usize>,
    class_column: BTreeMap<usize, usize>,
}

fn check_shape(k: usize, d: usize, norm_budget: f64) -> Result<()> {
    if k < 2 {
        return Err(Error::DegenerateFrame { k });
    }
    if d < k {
        return Err(Error::Capacity { k, d });
    }
    if !(norm_budget > 0.0 && norm_budget.is_finite()) {
        return Err(Error::Contract(format!("E_W must be positive, got {norm_budget}")));
    }
    Ok(())
}

/// Orthonormal `d x k` embedding from a seeded Gaussian draw.
///
/// Entries are drawn column by column, so the first `k` columns are the same
/// for every `k` at a given `(d, seed)`.
fn seeded_embedding(k: usize, d: usize, seed: u64) -> Result<Tensor> {
    let mut rng = seeded_rng(seed, EMBEDDING_SALT ^ ((d as u64) << 32));
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        cols.push(v);
    }
    let cols = gram_schmidt(cols)?;
    let mut data = vec![0.0; d * k];
    for (j, c) in cols.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            data[i * k + j] = *v;
        }
    }
    Tensor::new(vec![d, k], data)
}

/// Modified Gram-Schmidt with one re-orthogonalization pass.
fn gram_schmidt(mut cols: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    for j in 0..cols.len() {
        for _ in 0..2 {
            for i in 0..j {
                let (done, rest) = cols.split_at_mut(j);
                let q = &done[i];
                let dot: f64 = q.iter().zip(&rest[0]).map(|(a, b)| a * b).sum();
                rest[0].iter_mut().zip(q).for_each(|(x, qv)| *x -= dot * qv);
            }
        }
        let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-10 {
            return Err(Error::Numeric { op: "gram_schmidt" });
        }
        cols[j].iter_mut().for_each(|v| *v /= norm);
    }
    Ok(cols)
}

fn frame_from_embedding(embedding: &Tensor, norm_budget: f64) -> Tensor {
    let (d, k) = (embedding.shape()[0], embedding.shape()[1]);
    let scale = norm_budget.sqrt() * (k as f64 / (k as f64 - 1.0)).sqrt();
    let mut data = vec![0.0; d * k];
    for i in 0..d {
        let row = embedding.row(i);
        let mean = row.iter().sum::<f64>() / k as f64;
        for j in 0..k {
            data[i * k + j] = scale * (row[j] - mean);
        }
    }
    Tensor::new(vec![d, k], data).expect("shape is d x k")
}

impl EtfClassifier {
    /// Builds a `K`-class frame in `d` dimensions. Class ids are `0..K`.
    pub fn build(k: usize, d: usize, norm_budget: f64, seed: u64) -> Result<Self> {
        check_shape(k, d, norm_budget)?;
        let embedding = seeded_embedding(k, d, seed)?;
        Ok(Self::assemble(embedding, norm_budget, seed, (0..k).collect()))
    }

    /// Builds a frame from an explicit orthonormal embedding `U` (`d x K`).
    pub fn from_embedding(embedding: Tensor, norm_budget: f64, seed: u64) -> Result<Self> {
        if embedding.shape().len() != 2 {
            return Err(Error::dim("from_embedding", embedding.shape(), &[2]));
        }
        let (d, k) = (embedding.shape()[0], embedding.shape()[1]);
        check_shape(k, d, norm_budget)?;
        let gram = embedding.transpose()?.matmul(&embedding)?;
        for i in 0..k {
            for j in 0..k {
                let target = if i == j { 1.0 } else { 0.0 };
                if (gram.get(i, j) - target).abs() > ORTHO_TOL {
                    return Err(Error::Contract("embedding columns are not orthonormal".into()));
                }
            }
        }
        Ok(Self::assemble(embedding, norm_budget, seed, (0..k).collect()))
    }

    /// Wraps an arbitrary `d x K` weight matrix without checking the frame
    /// conditions; [`verify_etf`] reports how far it is from one. The
    /// embedding is regenerated from `seed`.
    pub fn from_weights(weights: Tensor, norm_budget: f64, seed: u64) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(Error::dim("from_weights", weights.shape(), &[2]));
        }
        let (d, k) = (weights.shape()[0], weights.shape()[1]);
        check_shape(k, d, norm_budget)?;
        let mut etf = Self::assemble(seeded_embedding(k, d, seed)?, norm_budget, seed, (0..k).collect());
        etf.weights = weights;
        Ok(etf)
    }

    fn assemble(embedding: Tensor, norm_budget: f64, seed: u64, column_class: Vec<usize>) -> Self {
        let weights = frame_from_embedding(&embedding, norm_budget);
        let class_column = column_class.iter().enumerate().map(|(c, &id)| (id, c)).collect();
        EtfClassifier {
            weights,
            embedding,
            norm_budget,
            seed,
            column_class,
            class_column,
        }
    }

    /// Regenerates the frame at `k_new` classes. Existing class ids keep
    /// their columns; new columns get ids following the current maximum.
    pub fn expand(&self, k_new: usize) -> Result<Self> {
        if k_new <= self.num_classes() {
            return Err(Error::Contract(format!(
                "expansion must add classes: {} -> {}",
                self.num_classes(),
                k_new
            )));
        }
        let next = self.column_class.iter().max().map_or(0, |m| m + 1);
        let ids: Vec<usize> = (next..next + (k_new - self.num_classes())).collect();
        self.expand_with_ids(&ids)
    }

    /// Regenerates the frame with `new_ids` appended as new columns.
    pub fn expand_with_ids(&self, new_ids: &[usize]) -> Result<Self> {
        if new_ids.is_empty() {
            return Err(Error::Contract("expansion must add at least one class".into()));
        }
        let mut column_class = self.column_class.clone();
        for &id in new_ids {
            if self.class_column.contains_key(&id) || column_class[self.num_classes()..].contains(&id) {
                return Err(Error::Contract(format!("class {id} is already mapped")));
            }
            column_class.push(id);
        }
        let k_new = column_class.len();
        let d = self.dim();
        check_shape(k_new, d, self.norm_budget)?;
        let embedding = seeded_embedding(k_new, d, self.seed)?;
        Ok(Self::assemble(embedding, self.norm_budget, self.seed, column_class))
    }

    /// Replaces the class ids of the columns (column order unchanged).
    pub fn with_class_ids(mut self, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != self.num_classes() {
            return Err(Error::dim("with_class_ids", &[self.num_classes()], &[ids.len()]));
        }
        let map: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(c, &id)| (id, c)).collect();
        if map.len() != ids.len() {
            return Err(Error::Contract("class ids must be distinct".into()));
        }
        self.column_class = ids;
        self.class_column = map;
        Ok(self)
    }

    pub fn num_classes(&self) -> usize {
        self.column_class.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn norm_budget(&self) -> f64 {
        self.norm_budget
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn embedding(&self) -> &Tensor {
        &self.embedding
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.column_class
    }

    pub fn column_of(&self, class_id: usize) -> Option<usize> {
        self.class_column.get(&class_id).copied()
    }

    /// Prototype `w_k` of a column.
    pub fn prototype(&self, column: usize) -> Vec<f64> {
        (0..self.dim()).map(|i| self.weights.get(i, column)).collect()
    }

    /// Prototype rows for a batch of labels (`n x d`), used as the regression
    /// targets of the dot-regression loss.
    pub fn prototypes_for(&self, labels: &[usize]) -> Result<Tensor> {
        let d = self.dim();
        let mut data = Vec::with_capacity(labels.len() * d);
        for &y in labels {
            let c = self.column_of(y).ok_or(Error::UnknownLabel(y))?;
            data.extend(self.prototype(c));
        }
        Tensor::new(vec![labels.len(), d], data)
    }

    /// Scores `w_k . z` for every column.
    pub fn scores(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(Error::dim("classify", &[self.dim()], &[z.len()]));
        }
        let k = self.num_classes();
        let mut s = vec![0.0; k];
        for (i, zi) in z.iter().enumerate() {
            let row = self.weights.row(i);
            s.iter_mut().zip(row).for_each(|(acc, w)| *acc += w * zi);
        }
        Ok(s)
    }

    /// Class id with the largest `w_k . z`; ties go to the lowest class id.
    pub fn classify(&self, z: &[f64]) -> Result<usize> {
        let scores = self.scores(z)?;
        Ok(argmax_lowest_id(&scores, &self.column_class))
    }

    pub fn to_text(&self) -> String {
        let (d, k) = (self.dim(), self.num_classes());
        let mut out = format!("{k} {d} {} {}\n", self.norm_budget, self.seed);
        for i in 0..d {
            let row: Vec<String> = self.weights.row(i).iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        out
    }

    /// Parses the plain-text frame format: a `K d E_W seed` header followed by
    /// `d` rows of `K` values. Class ids are the column indices.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            column: 1,
            msg: "missing header".into(),
        })?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: 1,
                column: 1,
                msg: format!("header needs `K d E_W seed`, got {} fields", fields.len()),
            });
        }
        let bad = |col: usize, what: &str| Error::Parse {
            line: 1,
            column: col,
            msg: format!("invalid {what}"),
        };
        let k: usize = fields[0].parse().map_err(|_| bad(1, "K"))?;
        let d: usize = fields[1].parse().map_err(|_| bad(2, "d"))?;
        let e_w: f64 = fields[2].parse().map_err(|_| bad(3, "E_W"))?;
        let seed: u64 = fields[3].parse().map_err(|_| bad(4, "seed"))?;
        let mut data = Vec::with_capacity(d * k);
        let mut rows = 0;
        for (lineno, line) in lines {
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != k {
                return Err(Error::Schema(format!(
                    "line {}: expected {k} values, found {}",
                    lineno + 1,
                    vals.len()
                )));
            }
            for (c, v) in vals.iter().enumerate() {
                data.push(v.parse::<f64>().map_err(|_| Error::Parse {
                    line: lineno + 1,
                    column: c + 1,
                    msg: format!("`{v}` is not a number"),
                })?);
            }
            rows += 1;
        }
        if rows != d {
            return Err(Error::Schema(format!("expected {d} rows, found {rows}")));
        }
        Self::from_weights(Tensor::new(vec![d, k], data)?, e_w, seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

pub(crate) fn argmax_lowest_id(scores: &[f64], ids: &[usize]) -> usize {
    let mut best = 0;
    for c in 1..scores.len() {
        let tol = 1e-12 * scores[c].abs().max(scores[best].abs()).max(1.0);
        if scores[c] > scores[best] + tol || ((scores[c] - scores[best]).abs() <= tol && ids[c] < ids[best]) {
            best = c;
        }
    }
    ids[best]
}

/// Largest entrywise deviation of `W^T W` from
/// `E_W (K/(K-1) I - 1/(K-1) 11^T)`.
pub fn verify_etf(etf: &EtfClassifier) -> f64 {
    let k = etf.num_classes();
    let e_w = etf.norm_budget();
    let w = etf.weights();
    let d = w.shape()[0];
    let mut worst: f64 = 0.0;
    for i in 0..k {
        for j in i..k {
            let dot: f64 = (0..d).map(|r| w.get(r, i) * w.get(r, j)).sum();
            let target = if i == j { e_w } else { -e_w / (k as f64 - 1.0) };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

pub fn build_etf(k: usize, d: usize, norm_budget: f64, seed: u64) -> Result<EtfClassifier> {
    EtfClassifier::build(k, d, norm_budget, seed)
}

pub fn expand_etf(old: &EtfClassifier, k_new: usize) -> Result<EtfClassifier> {
    old.expand(k_new)
}
