//! Group accuracy and fairness metrics, all in percentage points.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

fn check_lengths(predictions: &[usize], labels: Option<&[usize]>, groups: &[u32]) -> Result<()> {
    if predictions.is_empty() {
        return Err(Error::Data("no predictions".into()));
    }
    if predictions.len() != groups.len() || labels.is_some_and(|l| l.len() != predictions.len()) {
        return Err(Error::Dimension(format!(
            "{} predictions, {} labels, {} groups",
            predictions.len(),
            labels.map_or(predictions.len(), <[usize]>::len),
            groups.len()
        )));
    }
    Ok(())
}

fn check_binary(values: &[usize], what: &str) -> Result<()> {
    if let Some(v) = values.iter().find(|&&v| v > 1) {
        return Err(Error::Data(format!("{what} must be binary, found {v}")));
    }
    Ok(())
}

/// Accuracy per group, in percent.
pub fn group_accuracy(predictions: &[usize], labels: &[usize], groups: &[u32]) -> Result<BTreeMap<u32, f64>> {
    check_lengths(predictions, Some(labels), groups)?;
    let mut counts: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for ((p, y), g) in predictions.iter().zip(labels).zip(groups) {
        let e = counts.entry(*g).or_default();
        e.0 += usize::from(p == y);
        e.1 += 1;
    }
    Ok(counts
        .into_iter()
        .map(|(g, (hit, n))| (g, 100.0 * hit as f64 / n as f64))
        .collect())
}

/// Population standard deviation of per-group accuracies.
pub fn degree_of_bias(per_group: &BTreeMap<u32, f64>) -> Result<f64> {
    if per_group.len() < 2 {
        return Err(Error::Data("degree of bias needs at least two groups".into()));
    }
    let n = per_group.len() as f64;
    let mean = per_group.values().sum::<f64>() / n;
    Ok((per_group.values().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// `100 * min / max` of per-group accuracies.
pub fn selection_rate(per_group: &BTreeMap<u32, f64>) -> Result<f64> {
    let (min, max) = min_max(per_group)?;
    if max <= 0.0 {
        return Err(Error::Data("selection rate undefined: every group accuracy is 0".into()));
    }
    Ok(100.0 * min / max)
}

fn min_max(per_group: &BTreeMap<u32, f64>) -> Result<(f64, f64)> {
    if per_group.is_empty() {
        return Err(Error::Data("no groups".into()));
    }
    let min = per_group.values().copied().fold(f64::INFINITY, f64::min);
    let max = per_group.values().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((min, max))
}

fn spread(rates: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = rates.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r), hi.max(r)));
    hi - lo
}

/// `100 * max(TPR gap, FPR gap)` across groups for a binary task.
pub fn equalized_odds_difference(predictions: &[usize], labels: &[usize], groups: &[u32]) -> Result<f64> {
    check_lengths(predictions, Some(labels), groups)?;
    check_binary(predictions, "predictions")?;
    check_binary(labels, "labels")?;
    // per group: [negatives, false positives, positives, true positives]
    let mut counts: BTreeMap<u32, [usize; 4]> = BTreeMap::new();
    for ((&p, &y), &g) in predictions.iter().zip(labels).zip(groups) {
        let c = counts.entry(g).or_default();
        c[2 * y] += 1;
        c[2 * y + 1] += p;
    }
    let mut tpr = Vec::new();
    let mut fpr = Vec::new();
    for (g, c) in &counts {
        for (class, total) in [(0, c[0]), (1, c[2])] {
            if total == 0 {
                return Err(Error::Data(format!(
                    "group {g} has no samples of class {class}; its {} is undefined",
                    if class == 1 { "TPR" } else { "FPR" }
                )));
            }
        }
        fpr.push(c[1] as f64 / c[0] as f64);
        tpr.push(c[3] as f64 / c[2] as f64);
    }
    Ok(100.0 * spread(tpr.into_iter()).max(spread(fpr.into_iter())))
}

/// `100 * (max - min)` of per-group positive-prediction rates.
pub fn demographic_parity_difference(predictions: &[usize], groups: &[u32]) -> Result<f64> {
    check_lengths(predictions, None, groups)?;
    check_binary(predictions, "predictions")?;
    let mut counts: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (&p, &g) in predictions.iter().zip(groups) {
        let e = counts.entry(g).or_default();
        e.0 += p;
        e.1 += 1;
    }
    Ok(100.0 * spread(counts.values().map(|(pos, n)| *pos as f64 / *n as f64)))
}
