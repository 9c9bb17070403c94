use crate::error::{Error, Result};

/// Mean of the recorded stage accuracies, base stage included.
pub fn acc_avg(accs: &[f64]) -> Result<f64> {
    if accs.is_empty() {
        return Err(Error::Contract("acc_avg needs at least one accuracy".into()));
    }
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

/// Base-stage accuracy minus final-stage accuracy.
pub fn performance_drop(accs: &[f64]) -> Result<f64> {
    match accs {
        [first, .., last] => Ok(first - last),
        _ => Err(Error::Contract("performance_drop needs at least two accuracies".into())),
    }
}

/// Percentage of `predicted` equal to `truth`; `None` for empty input.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Option<f64> {
    if truth.is_empty() || predicted.len() != truth.len() {
        return None;
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Some(100.0 * hits as f64 / truth.len() as f64)
}
