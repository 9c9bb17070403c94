//! Config-driven experiment runner behind the `etfcil` binary.
//!
//! Output layout of a single run directory is the one written by
//! [`RunReport::write_dir`]. Grids and sweeps write one such directory per
//! cell plus a combined `ablation.csv` or `lambda_sweep.csv` in the root.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::analysis::{write_csv, RunReport};
use crate::error::{Error, Result};
use crate::network::{HeadKind, Wiring};
use crate::protocol::RunConfig;

/// Default output root when `-o` is not given.
pub const OUTPUT_ROOT_ENV: &str = "ETFCIL_OUTPUT_ROOT";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const SWEEP_FILE: &str = "lambda_sweep.csv";

/// Runs one config and writes its report directory.
pub fn run_config(config: &RunConfig, label: &str, out_dir: &Path) -> Result<RunReport> {
    let (report, _) = config.execute(label)?;
    report.validate()?;
    report.write_dir(out_dir)?;
    Ok(report)
}

/// Loads `path` and runs it into `out_dir`; the label is the file stem.
pub fn run_path(path: &Path, out_dir: &Path) -> Result<RunReport> {
    let config = RunConfig::load(path)?;
    run_config(&config, &stem(path), out_dir)
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "run".to_string(), |s| s.to_string_lossy().into_owned())
}

/// Human-readable per-stage accuracy table.
pub fn accuracy_table(report: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>5} {:>7} {:>9} {:>9} {:>9}", "stage", "classes", "acc", "old", "new");
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
    for st in &report.stages {
        let _ = writeln!(
            s,
            "{:>5} {:>7} {:>9.2} {:>9} {:>9}",
            st.stage,
            st.num_classes,
            st.accuracy,
            cell(st.old_accuracy),
            cell(st.new_accuracy)
        );
    }
    let _ = writeln!(s, "Acc_avg {:.2}  PD {}", report.acc_avg, cell(report.performance_drop));
    s
}

fn axis<T: Copy>(values: &[T], default: T) -> Vec<T> {
    if values.is_empty() {
        vec![default]
    } else {
        values.to_vec()
    }
}

/// Axes of an ablation grid. An empty axis keeps the base config's value;
/// a grid with every axis empty is rejected.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationGrid {
    pub wiring: Vec<Wiring>,
    pub head: Vec<HeadKind>,
    pub adapt: Vec<bool>,
}

impl AblationGrid {
    pub fn is_empty(&self) -> bool {
        self.wiring.is_empty() && self.head.is_empty() && self.adapt.is_empty()
    }

    /// Variant configs in row-major order (wiring, head, adapt).
    pub fn cells(&self, base: &RunConfig) -> Result<Vec<(String, RunConfig)>> {
        if self.is_empty() {
            return Err(Error::config("grid", "empty ablation grid: give at least one of wiring, head, adapt"));
        }
        let mut cells = Vec::new();
        for w in axis(&self.wiring, base.wiring) {
            for h in axis(&self.head, base.head) {
                for a in axis(&self.adapt, base.model.adapt) {
                    let mut c = base.clone();
                    c.wiring = w;
                    c.head = h;
                    c.model.adapt = a;
                    if h == HeadKind::Etf && !a {
                        // the head reads expand outputs directly
                        c.model.etf_dim = Some(c.model.width);
                    }
                    let label = format!("{w}-{h}-{}", if a { "adapt" } else { "noadapt" });
                    cells.push((label, c));
                }
            }
        }
        Ok(cells)
    }
}

#[derive(Debug)]
pub struct TableRow {
    pub variant: String,
    pub outcome: std::result::Result<RunReport, String>,
}

/// Combined result of a grid or sweep.
#[derive(Debug)]
pub struct ComparisonTable {
    pub key: String,
    pub rows: Vec<TableRow>,
}

impl ComparisonTable {
    pub fn all_ok(&self) -> bool {
        self.rows.iter().all(|r| r.outcome.is_ok())
    }

    pub fn reports(&self) -> impl Iterator<Item = (&str, &RunReport)> {
        self.rows.iter().filter_map(|r| r.outcome.as_ref().ok().map(|rep| (r.variant.as_str(), rep)))
    }

    fn stages(&self) -> usize {
        self.reports().map(|(_, r)| r.accuracies.len()).max().unwrap_or(0)
    }

    /// Columns: key, A_0..A_T, acc_avg, pd, final old-class accuracy, mean
    /// off-diagonal CKA at the last stage, status. Failed cells keep empty
    /// numeric cells and an `error: ...` status.
    pub fn records(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let t = self.stages();
        let mut header = vec![self.key.clone()];
        header.extend((0..t).map(|i| format!("A_{i}")));
        header.extend(["acc_avg", "pd", "old_accuracy", "mean_cka", "status"].map(String::from));
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let rows = self
            .rows
            .iter()
            .map(|row| {
                let mut cells = vec![row.variant.clone()];
                match &row.outcome {
                    Ok(r) => {
                        cells.extend((0..t).map(|i| opt(r.accuracies.get(i).copied())));
                        let last = r.stages.last();
                        cells.push(r.acc_avg.to_string());
                        cells.push(opt(r.performance_drop));
                        cells.push(opt(last.and_then(|s| s.old_accuracy)));
                        cells.push(opt(last.and_then(|s| s.mean_cka)));
                        cells.push("ok".into());
                    }
                    Err(e) => {
                        cells.extend(std::iter::repeat_n(String::new(), t + 4));
                        cells.push(format!("error: {e}"));
                    }
                }
                cells
            })
            .collect();
        (header, rows)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let (header, rows) = self.records();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(path, &header, rows)
    }

    /// Fixed-width text rendering.
    /// Aligned text table; accuracies to two decimals, CKA to four.
    pub fn render(&self) -> String {
        let (header, rows) = self.records();
        let rows: Vec<Vec<String>> = rows
            .into_iter()
            .map(|r| {
                r.into_iter()
                    .zip(&header)
                    .map(|(c, h)| match c.parse::<f64>() {
                        Ok(v) if c.contains('.') && h.contains("cka") => format!("{v:.4}"),
                        Ok(v) if c.contains('.') => format!("{v:.2}"),
                        _ => c,
                    })
                    .collect()
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|j| rows.iter().map(|r| r[j].len()).chain([header[j].len()]).max().unwrap_or(0))
            .collect();
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut s = line(&header) + "\n";
        for r in &rows {
            s += &line(r);
            s.push('\n');
        }
        s
    }
}

/// Runs every cell on its own thread; each writes only its own directory.
fn run_cells(cells: Vec<(String, RunConfig)>, out_root: &Path) -> Vec<TableRow> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = cells
            .into_iter()
            .map(|(variant, cfg)| {
                let dir: PathBuf = out_root.join(&variant);
                scope.spawn(move || {
                    let outcome = run_config(&cfg, &variant, &dir).map_err(|e| e.to_string());
                    TableRow { variant, outcome }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("grid cell panicked"))
            .collect()
    })
}

/// One run per grid cell with the base config's seed, plus `ablation.csv`.
pub fn ablate(base: &RunConfig, grid: &AblationGrid, out_root: &Path) -> Result<ComparisonTable> {
    let cells = grid.cells(base)?;
    let table = ComparisonTable {
        key: "variant".into(),
        rows: run_cells(cells, out_root),
    };
    std::fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    table.write_csv(&out_root.join(ABLATION_FILE))?;
    Ok(table)
}

/// Sorted, deduplicated sweep values. Negative or non-finite values are
/// rejected; duplicates are dropped with a warning.
pub fn normalize_lambdas(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::config("values", "need at least one lambda"));
    }
    if let Some(bad) = values.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::config("values", format!("lambda must be >= 0, got {bad}")));
    }
    let mut out = values.to_vec();
    out.sort_by(f64::total_cmp);
    let before = out.len();
    out.dedup();
    if out.len() < before {
        log::warn!("dropped {} duplicate lambda value(s)", before - out.len());
    }
    Ok(out)
}

/// One run per lambda with the base config's seed, plus `lambda_sweep.csv`.
pub fn sweep_lambda(base: &RunConfig, values: &[f64], out_root: &Path) -> Result<ComparisonTable> {
    let cells = normalize_lambdas(values)?
        .into_iter()
        .map(|l| {
            let mut c = base.clone();
            c.loss.lambda = l;
            (format!("lambda={l}"), c)
        })
        .collect();
    let table = ComparisonTable {
        key: "lambda".into(),
        rows: run_cells(cells, out_root),
    };
    std::fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    table.write_csv(&out_root.join(SWEEP_FILE))?;
    Ok(table)
}
