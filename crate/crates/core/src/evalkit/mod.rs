//! Linear probing and fairness reporting. This is the only module that reads
//! group labels.

pub mod metrics;
pub mod probe;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub use metrics::{
    degree_of_bias, demographic_parity_difference, equalized_odds_difference, group_accuracy, selection_rate,
};
pub use probe::{train_probe, ProbeConfig, ProbeModel};

/// All metrics of one evaluated configuration, in percentage points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    /// Overall accuracy over all samples.
    pub avg_acc: f64,
    /// Unweighted mean of the per-group accuracies.
    pub group_mean_acc: f64,
    pub per_group_acc: BTreeMap<u32, f64>,
    pub std_acc: f64,
    pub ser: f64,
    pub eod: f64,
    pub dpd: f64,
    pub min_grp_acc: f64,
    pub max_grp_acc: f64,
    pub samples: usize,
}

pub fn build_report(predictions: &[usize], labels: &[usize], groups: &[u32]) -> Result<FairnessReport> {
    let per_group = group_accuracy(predictions, labels, groups)?;
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    let min = per_group.values().copied().fold(f64::INFINITY, f64::min);
    let max = per_group.values().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(FairnessReport {
        avg_acc: 100.0 * correct as f64 / predictions.len() as f64,
        group_mean_acc: per_group.values().sum::<f64>() / per_group.len() as f64,
        std_acc: degree_of_bias(&per_group)?,
        ser: selection_rate(&per_group)?,
        eod: equalized_odds_difference(predictions, labels, groups)?,
        dpd: demographic_parity_difference(predictions, groups)?,
        min_grp_acc: min,
        max_grp_acc: max,
        per_group_acc: per_group,
        samples: predictions.len(),
    })
}

const HEADERS: [&str; 8] = ["Config", "Avg. Acc", "STD", "SeR", "EOD", "DPD", "Min Grp Acc", "Max Grp Acc"];

/// Aligned text table, one row per named report.
pub fn render_table(rows: &[(&str, &FairnessReport)]) -> String {
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, r)| {
            let mut v = vec![name.to_string()];
            v.extend(
                [r.avg_acc, r.std_acc, r.ser, r.eod, r.dpd, r.min_grp_acc, r.max_grp_acc]
                    .iter()
                    .map(|x| format!("{x:.2}")),
            );
            v
        })
        .collect();
    let widths: Vec<usize> = (0..HEADERS.len())
        .map(|c| cells.iter().map(|r| r[c].len()).chain([HEADERS[c].len()]).max().unwrap())
        .collect();
    let line = |vals: Vec<&str>| {
        let parts: Vec<String> = vals
            .iter()
            .enumerate()
            .map(|(c, v)| if c == 0 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
            .collect();
        parts.join(" | ")
    };
    let mut out = String::new();
    writeln!(out, "{}", line(HEADERS.to_vec())).unwrap();
    writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-")).unwrap();
    for r in &cells {
        writeln!(out, "{}", line(r.iter().map(String::as_str).collect())).unwrap();
    }
    out
}
