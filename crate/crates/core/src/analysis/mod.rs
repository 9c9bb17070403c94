//! Accuracy metrics, representation similarity, collapse and drift
//! diagnostics, and the run report.

mod cka;
mod collapse;
mod metrics;
mod report;

pub use cka::{cka_matrix, linear_cka, mean_off_diagonal};
pub use collapse::{centroid_drift, class_centroids, collapse_diagnostics, ClassCollapse, CollapseReport, DriftEntry};
pub use metrics::{acc_avg, accuracy, performance_drop};
pub use report::{RunReport, StageRecord, ACCURACY_FILE, CKA_FILE, DRIFT_FILE, REPORT_FILE};
pub(crate) use report::write_csv;

use crate::network::{ModelState, ParamCount};

/// Scalar parameter counts of `model` by component.
pub fn param_count(model: &ModelState) -> ParamCount {
    model.param_count()
}
