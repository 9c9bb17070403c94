//! Labelled datasets with fixed train/test tags: a seeded Gaussian-blob
//! generator and a delimited text loader (`label,f0,...,f{p-1}[,split]`).

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{seeded_rng, Tensor};
use crate::error::{Error, Result};

/// Fraction of each class tagged as training data.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    splits: Vec<Split>,
    num_classes: usize,
    provenance: String,
}

impl Dataset {
    /// Validates the dataset invariants: dense labels, finite features and
    /// every class present in both splits.
    pub fn new(features: Tensor, labels: Vec<usize>, splits: Vec<Split>, provenance: impl Into<String>) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::Schema(format!("features must be a matrix, got {:?}", features.shape())));
        }
        let n = features.shape()[0];
        if labels.len() != n || splits.len() != n {
            return Err(Error::Schema(format!(
                "{n} feature rows but {} labels and {} split tags",
                labels.len(),
                splits.len()
            )));
        }
        if !features.is_finite() {
            return Err(Error::Schema("features contain NaN or infinite values".into()));
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![(false, false); num_classes];
        for (&y, &s) in labels.iter().zip(&splits) {
            match s {
                Split::Train => seen[y].0 = true,
                Split::Test => seen[y].1 = true,
            }
        }
        if let Some(c) = seen.iter().position(|&(tr, te)| !(tr && te)) {
            return Err(Error::Schema(format!("class {c} is missing from the train or test split")));
        }
        Ok(Dataset {
            features,
            labels,
            splits,
            num_classes,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Sample indices of `class` in `split`, in file order.
    pub fn indices(&self, class: usize, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.labels[i] == class && self.splits[i] == split)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobConfig {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub noise: f64,
    pub seed: u64,
}

/// Isotropic Gaussian blobs around class means drawn uniformly on a sphere
/// of radius `separation`. The first 80% of each class is the training split.
pub fn make_blobs(cfg: &BlobConfig) -> Result<Dataset> {
    if cfg.classes < 2 {
        return Err(Error::config("dataset.classes", "need at least 2 classes"));
    }
    if cfg.per_class < 4 {
        return Err(Error::config("dataset.per_class", "need at least 4 samples per class"));
    }
    if cfg.dim < 2 {
        return Err(Error::config("dataset.dim", "need at least 2 features"));
    }
    if !(cfg.separation >= 0.0 && cfg.noise >= 0.0 && cfg.separation.is_finite() && cfg.noise.is_finite()) {
        return Err(Error::config("dataset.separation", "separation and noise must be finite and >= 0"));
    }
    let mut rng = seeded_rng(cfg.seed, 0x626c_6f62);
    let means: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| {
            let v: Vec<f64> = (0..cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm * cfg.separation).collect()
        })
        .collect();
    let n_train = train_count(cfg.per_class);
    let mut data = Vec::with_capacity(cfg.classes * cfg.per_class * cfg.dim);
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for (c, mean) in means.iter().enumerate() {
        for i in 0..cfg.per_class {
            for m in mean {
                let e: f64 = StandardNormal.sample(&mut rng);
                data.push(m + cfg.noise * e);
            }
            labels.push(c);
            splits.push(if i < n_train { Split::Train } else { Split::Test });
        }
    }
    let n = labels.len();
    Dataset::new(
        Tensor::new(vec![n, cfg.dim], data)?,
        labels,
        splits,
        format!(
            "blobs(classes={}, per_class={}, dim={}, separation={}, noise={}, seed={})",
            cfg.classes, cfg.per_class, cfg.dim, cfg.separation, cfg.noise, cfg.seed
        ),
    )
}

fn train_count(n: usize) -> usize {
    ((n as f64 * TRAIN_FRACTION).floor() as usize).clamp(1, n - 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelimitedFormat {
    pub delimiter: u8,
    /// Seed for the per-class split when the file has no `split` column.
    pub split_seed: u64,
}

impl Default for DelimitedFormat {
    fn default() -> Self {
        DelimitedFormat {
            delimiter: b',',
            split_seed: 0,
        }
    }
}

fn parse_err(line: usize, column: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        column,
        msg: msg.into(),
    }
}

/// Loads `label,f0,...,f{p-1}` rows with an optional `split` column.
/// Gapped labels are relabelled densely in ascending order; the mapping is
/// recorded in the provenance string.
pub fn load_delimited(path: &Path, format: &DelimitedFormat) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_delimited(&text, format, &path.display().to_string())
}

pub fn parse_delimited(text: &str, format: &DelimitedFormat, source: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.delimiter)
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| parse_err(1, 1, e.to_string()))?
        .clone();
    if header.get(0) != Some("label") {
        return Err(Error::Schema("first column must be `label`".into()));
    }
    let split_col = header.iter().position(|h| h == "split");
    let feature_cols: Vec<usize> = (1..header.len()).filter(|&c| Some(c) != split_col).collect();
    for (k, &c) in feature_cols.iter().enumerate() {
        if header.get(c) != Some(format!("f{k}").as_str()) {
            return Err(Error::Schema(format!(
                "column {} should be `f{k}`, found `{}`",
                c + 1,
                header.get(c).unwrap_or("")
            )));
        }
    }
    if feature_cols.is_empty() {
        return Err(Error::Schema("no feature columns".into()));
    }
    let p = feature_cols.len();

    let mut raw_labels = Vec::new();
    let mut splits = Vec::new();
    let mut data = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, 1, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != header.len() {
            return Err(Error::Schema(format!(
                "line {line}: expected {} fields, found {}",
                header.len(),
                rec.len()
            )));
        }
        let label: i64 = rec[0]
            .parse()
            .map_err(|_| parse_err(line, 1, format!("label `{}` is not an integer", &rec[0])))?;
        if label < 0 {
            return Err(parse_err(line, 1, format!("label {label} is negative")));
        }
        raw_labels.push(label as usize);
        for &c in &feature_cols {
            let v: f64 = rec[c]
                .parse()
                .map_err(|_| parse_err(line, c + 1, format!("`{}` is not a number", &rec[c])))?;
            if !v.is_finite() {
                return Err(parse_err(line, c + 1, "non-finite feature"));
            }
            data.push(v);
        }
        if let Some(sc) = split_col {
            splits.push(match &rec[sc] {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(parse_err(line, sc + 1, format!("split must be train or test, got `{other}`"))),
            });
        }
    }
    if raw_labels.is_empty() {
        return Err(Error::Schema("no data rows".into()));
    }

    let distinct: BTreeMap<usize, usize> = {
        let mut ids: Vec<usize> = raw_labels.clone();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter().enumerate().map(|(dense, raw)| (raw, dense)).collect()
    };
    let labels: Vec<usize> = raw_labels.iter().map(|r| distinct[r]).collect();
    let mut provenance = format!("delimited({source})");
    if distinct.iter().any(|(raw, dense)| raw != dense) {
        let pairs: Vec<String> = distinct.iter().map(|(r, d)| format!("{r}->{d}")).collect();
        provenance.push_str(&format!(" relabel[{}]", pairs.join(",")));
    }

    if split_col.is_none() {
        splits = seeded_split(&labels, distinct.len(), format.split_seed)?;
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, p], data)?, labels, splits, provenance)
}

fn seeded_split(labels: &[usize], classes: usize, seed: u64) -> Result<Vec<Split>> {
    let mut splits = vec![Split::Test; labels.len()];
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.len() < 2 {
            return Err(Error::Schema(format!("class {c} needs at least 2 samples to split")));
        }
        let mut rng = seeded_rng(seed, 0x7370_6c69 ^ c as u64);
        idx.shuffle(&mut rng);
        for &i in &idx[..train_count(idx.len())] {
            splits[i] = Split::Train;
        }
    }
    Ok(splits)
}

/// Writes the dataset in the delimited format, including the split column.
pub fn write_delimited(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let mut header = vec!["label".to_string()];
    header.extend((0..ds.dim()).map(|k| format!("f{k}")));
    header.push("split".into());
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(&header).map_err(io)?;
    for i in 0..ds.len() {
        let mut row = vec![ds.labels[i].to_string()];
        row.extend(ds.features.row(i).iter().map(|v| format!("{v}")));
        row.push(ds.splits[i].as_str().into());
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
