//! Unweighted and weighted accuracy.

use crate::error::{Error, Result};

fn check(predictions: &[usize], labels: &[usize]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Metric("no samples".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Mean per-class recall in percent, over the classes present in `labels`.
pub fn ua(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    check(predictions, labels)?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        totals[l] += 1;
        if p == l {
            hits[l] += 1;
        }
    }
    let recalls: Vec<f64> = hits
        .iter()
        .zip(&totals)
        .filter(|(_, &t)| t > 0)
        .map(|(&h, &t)| h as f64 / t as f64)
        .collect();
    Ok(100.0 * recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Overall fraction correct in percent.
pub fn wa(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    check(predictions, labels)?;
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}
