//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//! wiring = "parallel"        # or "serial"
//! head = "etf"               # or "fc"
//!
//! [dataset]
//! kind = "blobs"             # or "delimited" with `path`, `delimiter`, `split_seed`
//! classes = 8
//! per_class = 100
//! dim = 16
//! separation = 6.0
//! noise = 0.5
//!
//! [split]
//! base = 4
//! inc = 2
//!
//! [model]
//! width = 32
//! etf_dim = 16
//! adapt = true
//!
//! [loss]
//! lambda = 0.5
//! E_W = 1.0
//! E_Z = 1.0
//! constraint = "rescale"     # or "penalty"
//!
//! [schedule]
//! epochs_base = 100
//! epochs_inc = 60
//! batch_size = 32
//! lr0 = 0.05
//! momentum = 0.9
//! decay_mode = "none"        # "step_mult" | "per_epoch_mult"
//! decay_at = 20
//! decay_factor = 0.1
//! ```
//!
//! Every section except `[dataset]` and `[split]` may be omitted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::schedule::{ScheduleConfig, TrainSchedule};
use super::stream::{split_stream, TaskStream};
use super::train::{build_model, run_incremental};
use crate::analysis::RunReport;
use crate::data::{load_delimited, make_blobs, BlobConfig, Dataset, DelimitedFormat};
use crate::error::{Error, Result};
use crate::network::{ArchConfig, HeadKind, ModelState, Wiring};
use crate::objectives::{ConstraintMode, LossConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Blobs {
        classes: usize,
        per_class: usize,
        dim: usize,
        separation: f64,
        noise: f64,
        /// Defaults to the run seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Delimited {
        /// Relative paths resolve against the config file's directory.
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        delimiter: Option<char>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        split_seed: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub base: usize,
    pub inc: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width: usize,
    /// Classifier dimension; defaults to `width`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub etf_dim: Option<usize>,
    pub adapt: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 32,
            etf_dim: None,
            adapt: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda: f64,
    #[serde(rename = "E_W")]
    pub e_w: f64,
    #[serde(rename = "E_Z")]
    pub e_z: f64,
    pub constraint: ConstraintMode,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            lambda: 0.5,
            e_w: 1.0,
            e_z: 1.0,
            constraint: ConstraintMode::Rescale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub wiring: Wiring,
    #[serde(default)]
    pub head: HeadKind,
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub schedule: ScheduleConfig,
}

/// Best-effort key path for a TOML error: the backticked field name in the
/// message, if any.
fn error_key(msg: &str) -> String {
    msg.split('`').nth(1).map_or_else(|| "config".to_string(), str::to_string)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let at = e
                .span()
                .map(|s| {
                    let line = text[..s.start.min(text.len())].lines().count().max(1);
                    format!(" (line {line})")
                })
                .unwrap_or_default();
            Error::config(error_key(&msg), format!("{msg}{at}"))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative dataset path is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let DatasetConfig::Delimited { path: data, .. } = &mut cfg.dataset {
            if data.is_relative() {
                if let Some(dir) = path.parent() {
                    *data = dir.join(&*data);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Contract(format!("config serialization: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.split.base == 0 {
            return Err(Error::config("split.base", "must be positive"));
        }
        if self.model.width == 0 {
            return Err(Error::config("model.width", "must be positive"));
        }
        if self.model.etf_dim == Some(0) {
            return Err(Error::config("model.etf_dim", "must be positive"));
        }
        if !(self.loss.e_w > 0.0 && self.loss.e_w.is_finite()) {
            return Err(Error::config("loss.E_W", "must be positive"));
        }
        if let DatasetConfig::Delimited { delimiter: Some(c), .. } = self.dataset {
            if !c.is_ascii() {
                return Err(Error::config("dataset.delimiter", "must be a single ASCII character"));
            }
        }
        self.loss_config().validate()?;
        self.schedule.validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            feature_budget: self.loss.e_z,
            lambda: self.loss.lambda,
            constraint: self.loss.constraint,
        }
    }

    pub fn train_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            schedule: self.schedule.clone(),
            loss: self.loss_config(),
            seed: self.seed,
        }
    }

    pub fn arch(&self, input_dim: usize) -> ArchConfig {
        ArchConfig {
            input_dim,
            width: self.model.width,
            head_dim: self.model.etf_dim.unwrap_or(self.model.width),
            adapt: self.model.adapt,
            wiring: self.wiring,
            head: self.head,
            etf_budget: self.loss.e_w,
            feature_budget: self.loss.e_z,
            seed: self.seed,
        }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetConfig::Blobs {
                classes,
                per_class,
                dim,
                separation,
                noise,
                seed,
            } => make_blobs(&BlobConfig {
                classes: *classes,
                per_class: *per_class,
                dim: *dim,
                separation: *separation,
                noise: *noise,
                seed: seed.unwrap_or(self.seed),
            }),
            DatasetConfig::Delimited {
                path,
                delimiter,
                split_seed,
            } => load_delimited(
                path,
                &DelimitedFormat {
                    delimiter: delimiter.map_or(b',', |c| c as u8),
                    split_seed: split_seed.unwrap_or(self.seed),
                },
            ),
        }
    }

    pub fn stream(&self) -> Result<TaskStream> {
        split_stream(self.dataset()?, self.split.base, self.split.inc, self.seed)
    }

    /// Builds the data, the stream and the model, then runs every task.
    pub fn execute(&self, label: &str) -> Result<(RunReport, ModelState)> {
        let mut stream = self.stream()?;
        let mut model = build_model(self.arch(stream.dim()), &stream)?;
        let report = run_incremental(&mut model, &mut stream, &self.train_schedule(), label)?;
        Ok((report, model))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
[dataset]
kind = "blobs"
classes = 6
per_class = 20
dim = 4
separation = 5.0
noise = 0.3
[split]
base = 4
inc = 2
[model]
width = 8
[schedule]
epochs_base = 2
epochs_inc = 2
"#;

    #[test]
    fn parses_with_defaults() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.wiring, Wiring::Parallel);
        assert_eq!(c.head, HeadKind::Etf);
        assert_eq!(c.loss.lambda, 0.5);
        assert_eq!(c.schedule.batch_size, 32);
        assert_eq!(c.arch(4).head_dim, 8);
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_toml(&MINIMAL.replace("width = 8", "widht = 8")).unwrap_err();
        match err {
            Error::Config { key, msg } => {
                assert_eq!(key, "widht");
                assert!(msg.contains("line"), "{msg}");
            }
            other => panic!("{other}"),
        }
        let err = RunConfig::from_toml(&MINIMAL.replace("noise = 0.3", "noise = 0.3\ncolor = 1")).unwrap_err();
        assert!(err.to_string().contains("color"), "{err}");
    }

    #[test]
    fn semantic_errors_are_keyed() {
        let err = RunConfig::from_toml(&MINIMAL.replace("seed = 3", "seed = 3\n[loss]\nlambda = -1.0")).unwrap_err();
        assert!(err.to_string().contains("loss.lambda"), "{err}");
        let err = RunConfig::from_toml(&MINIMAL.replace("epochs_base = 2", "epochs_base = 0")).unwrap_err();
        assert!(err.to_string().contains("schedule.epochs_base"), "{err}");
    }

    #[test]
    fn capacity_error_surfaces() {
        let c = RunConfig::from_toml(&MINIMAL.replace("width = 8", "width = 8\netf_dim = 5")).unwrap();
        let err = c.execute("cap").unwrap_err();
        assert!(err.to_string().contains("capacity"), "{err}");
    }

    #[test]
    fn delimited_dataset_resolves_relative_path() {
        let dir = tempfile::tempdir().unwrap();
        let ds = RunConfig::from_toml(MINIMAL).unwrap().dataset().unwrap();
        crate::data::write_delimited(&ds, &dir.path().join("d.csv")).unwrap();
        let text = MINIMAL.replace(
            "kind = \"blobs\"\nclasses = 6\nper_class = 20\ndim = 4\nseparation = 5.0\nnoise = 0.3",
            "kind = \"delimited\"\npath = \"d.csv\"",
        );
        let cfg_path = dir.path().join("run.toml");
        std::fs::write(&cfg_path, text).unwrap();
        let c = RunConfig::load(&cfg_path).unwrap();
        assert_eq!(c.dataset().unwrap().features(), ds.features());
    }
}
