use std::collections::BTreeMap;
use std::path::Path;

use super::experiment::{MetricsRecord, CSV_HEADER};
use crate::error::{Error, Result};

/// Mean and sample standard deviation of one (method, sparsity) group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupSummary {
    pub method: String,
    pub sparsity: f64,
    pub n: usize,
    pub failed: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub draw_objective_mean: f64,
    pub draw_objective_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Reads a results CSV written by the experiment runner.
pub fn read_results(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let header = reader.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::Format(format!("unexpected results header in {}", path.display())));
    }
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Format(format!("bad number {s:?}"))) };
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Format(e.to_string()))?;
        if &row[0] != "1" {
            return Err(Error::Format(format!("unsupported row version {:?}", &row[0])));
        }
        records.push(MetricsRecord {
            method: row[1].to_string(),
            sparsity: num(&row[2])?,
            density: num(&row[3])?,
            seed: row[4].parse().map_err(|_| Error::Format(format!("bad seed {:?}", &row[4])))?,
            test_accuracy: num(&row[5])?,
            test_loss: num(&row[6])?,
            draw_objective: num(&row[7])?,
            draw_accuracy: num(&row[8])?,
            wall_time_s: 0.0,
            layer_densities: Vec::new(),
            status: row[9].to_string(),
        });
    }
    Ok(records)
}

/// Groups by (method, sparsity), skipping failed rows in the statistics.
pub fn summarize(records: &[MetricsRecord]) -> Vec<GroupSummary> {
    let mut groups: BTreeMap<(String, u64), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.method.clone(), r.sparsity.to_bits())).or_default().push(r);
    }
    groups
        .into_values()
        .map(|rows| {
            let ok: Vec<&&MetricsRecord> = rows.iter().filter(|r| r.is_ok()).collect();
            let acc: Vec<f64> = ok.iter().map(|r| r.test_accuracy).collect();
            let obj: Vec<f64> = ok.iter().map(|r| r.draw_objective).collect();
            let (accuracy_mean, accuracy_std) = mean_std(&acc);
            let (draw_objective_mean, draw_objective_std) = mean_std(&obj);
            GroupSummary {
                method: rows[0].method.clone(),
                sparsity: rows[0].sparsity,
                n: ok.len(),
                failed: rows.len() - ok.len(),
                accuracy_mean,
                accuracy_std,
                draw_objective_mean,
                draw_objective_std,
            }
        })
        .collect()
}

pub fn summary_csv(groups: &[GroupSummary]) -> String {
    let mut out = String::from("method,sparsity,n,failed,accuracy_mean,accuracy_std,draw_objective_mean,draw_objective_std\n");
    for g in groups {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            g.method, g.sparsity, g.n, g.failed, g.accuracy_mean, g.accuracy_std, g.draw_objective_mean, g.draw_objective_std
        ));
    }
    out
}

pub fn summary_table(groups: &[GroupSummary]) -> String {
    let mut out = format!("{:<14} {:>9} {:>3} {:>20} {:>22}\n", "method", "sparsity", "n", "test acc", "draw objective");
    for g in groups {
        out.push_str(&format!(
            "{:<14} {:>9.4} {:>3} {:>11.4} ± {:<6.4} {:>12.4e} ± {:<8.2e}{}\n",
            g.method,
            g.sparsity,
            g.n,
            g.accuracy_mean,
            g.accuracy_std,
            g.draw_objective_mean,
            g.draw_objective_std,
            if g.failed > 0 { format!("  ({} failed)", g.failed) } else { String::new() }
        ));
    }
    out
}
