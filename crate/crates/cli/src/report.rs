use std::fmt::Write as _;

use fedsilo::data::{PartitionMode, PAPER_THEMES};
use fedsilo::orchestrator::{ExperimentConfig, Summary};

pub fn site_names(cfg: &ExperimentConfig) -> Vec<String> {
    let n = cfg.data.num_sites();
    if cfg.data.mode == PartitionMode::Paper && n == PAPER_THEMES.len() {
        PAPER_THEMES.iter().map(|(name, _)| name.to_string()).collect()
    } else {
        (0..n).map(|i| format!("Site {i}")).collect()
    }
}

/// Left-aligned text table, columns sized to their widest cell.
fn render(header: Vec<String>, rows: Vec<Vec<String>>) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    for row in std::iter::once(&header).chain(&rows) {
        let mut line = String::new();
        for (cell, w) in row.iter().zip(&widths) {
            write!(line, "{cell:<w$}  ").unwrap();
        }
        out += line.trim_end();
        out.push('\n');
    }
    out
}

fn header(cfg: &ExperimentConfig, first: &str) -> Vec<String> {
    let mut cols = vec![first.to_string()];
    cols.extend(site_names(cfg));
    cols.push("Avg".into());
    cols.push("Weighted".into());
    cols
}

/// Final-round accuracy (%) per site and on average, one row per run.
pub fn table(cfg: &ExperimentConfig, rows: &[(String, Summary)]) -> String {
    let body = rows
        .iter()
        .map(|(label, s)| {
            let mut cells = vec![label.clone()];
            cells.extend(s.final_per_client_acc.iter().map(|a| format!("{:.2}", 100.0 * a)));
            cells.push(format!("{:.2}", 100.0 * s.final_unweighted_avg));
            cells.push(format!("{:.2}", 100.0 * s.final_weighted_avg));
            cells
        })
        .collect();
    render(header(cfg, "Strategy"), body)
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Per-seed percentages: each site, then the unweighted and weighted averages.
pub fn columns(runs: &[Summary]) -> Vec<Vec<f64>> {
    let sites = runs.first().map_or(0, |s| s.final_per_client_acc.len());
    let mut cols: Vec<Vec<f64>> = (0..sites)
        .map(|i| runs.iter().map(|s| 100.0 * s.final_per_client_acc[i]).collect())
        .collect();
    cols.push(runs.iter().map(|s| 100.0 * s.final_unweighted_avg).collect());
    cols.push(runs.iter().map(|s| 100.0 * s.final_weighted_avg).collect());
    cols
}

/// Mean ± std over seeds, one row per grid point.
pub fn mean_std_table(cfg: &ExperimentConfig, rows: &[(String, Vec<Summary>)]) -> String {
    let body = rows
        .iter()
        .map(|(label, runs)| {
            let mut cells = vec![label.clone()];
            for col in columns(runs) {
                let (m, s) = mean_std(&col);
                cells.push(format!("{m:.2} ± {s:.2}"));
            }
            cells
        })
        .collect();
    render(header(cfg, "Setting"), body)
}
