//! Markdown and CSV summaries built only from recorded artifacts.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::pipeline::{ControlReport, EvaluationReport};

/// One aggregated table cell, traceable to its source rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub table: String,
    pub row: String,
    pub column: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    /// Source row ids joined by `;`.
    pub sources: String,
    /// Configured seeds with no recorded row, joined by `;`.
    pub missing_seeds: String,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Rows of `(row key, seed, row id, column values)` for one table.
struct Table {
    name: &'static str,
    columns: Vec<&'static str>,
    rows: Vec<(String, u64, String, Vec<f64>)>,
}

impl Table {
    fn aggregate(&self, seeds: &[u64]) -> Vec<Cell> {
        let mut groups: BTreeMap<&str, Vec<&(String, u64, String, Vec<f64>)>> = BTreeMap::new();
        let mut order = Vec::new();
        for r in &self.rows {
            if !groups.contains_key(r.0.as_str()) {
                order.push(r.0.as_str());
            }
            groups.entry(&r.0).or_default().push(r);
        }
        let mut cells = Vec::new();
        for key in order {
            let rows = &groups[key];
            let missing: Vec<String> = seeds
                .iter()
                .filter(|s| !rows.iter().any(|r| r.1 == **s))
                .map(|s| s.to_string())
                .collect();
            let sources: Vec<&str> = rows.iter().map(|r| r.2.as_str()).collect();
            for (c, col) in self.columns.iter().enumerate() {
                let vals: Vec<f64> = rows.iter().map(|r| r.3[c]).collect();
                let (mean, std) = mean_std(&vals);
                cells.push(Cell {
                    table: self.name.into(),
                    row: key.into(),
                    column: (*col).into(),
                    mean,
                    std,
                    n: vals.len(),
                    sources: sources.join(";"),
                    missing_seeds: missing.join(";"),
                });
            }
        }
        cells
    }
}

fn markdown(out: &mut String, title: &str, columns: &[&str], cells: &[Cell]) {
    let _ = writeln!(out, "## {title}\n");
    let _ = writeln!(out, "| run | {} | seeds | missing |", columns.join(" | "));
    let _ = writeln!(out, "|---|{}---|---|", "---|".repeat(columns.len()));
    for chunk in cells.chunks(columns.len()) {
        let first = &chunk[0];
        let vals: Vec<String> = chunk
            .iter()
            .map(|c| format!("{:.4} ± {:.4}", c.mean, c.std))
            .collect();
        let missing = if first.missing_seeds.is_empty() {
            "none".to_string()
        } else {
            format!("**{}**", first.missing_seeds)
        };
        let _ = writeln!(out, "| {} | {} | {} | {} |", first.row, vals.join(" | "), first.n, missing);
    }
    out.push('\n');
}

/// Renders the report. Cells are mean ± sample std over recorded seeds;
/// seeds without a record are listed, never filled in.
pub fn render(
    cfg: &ExperimentConfig,
    eval: Option<&EvaluationReport>,
    control: Option<&ControlReport>,
) -> (String, Vec<Cell>) {
    let mut md = String::from("# Results\n\n");
    let mut all = Vec::new();
    let _ = writeln!(md, "Configured seeds: {:?}\n", cfg.seeds);

    match eval {
        None => md.push_str("Offline evaluation: no results recorded (run `evaluate`).\n\n"),
        Some(e) => {
            let _ = writeln!(
                md,
                "Ground-truth model fidelity (R²): {:.4}; its own Return%: {:.2}\n",
                e.ground_truth_fidelity, e.ground_truth_self_return
            );
            let sens: Vec<&str> = e.sensitivity.iter().map(|s| s.run.as_str()).collect();
            let columns = vec!["return_percent", "r_s", "convergence_steps", "gradient_variance"];
            let mut main = Table { name: "offline", columns: columns.clone(), rows: Vec::new() };
            let mut side = Table { name: "sensitivity", columns: columns.clone(), rows: Vec::new() };
            for r in &e.runs {
                let res = &r.result;
                let row = (
                    r.run.clone(),
                    res.seed,
                    r.row_id.clone(),
                    vec![res.return_percent, res.r_s, res.convergence.steps, res.gradient_variance],
                );
                if sens.contains(&r.run.as_str()) && !cfg.methods.iter().any(|m| m.tag() == r.run) {
                    side.rows.push(row);
                } else {
                    main.rows.push(row);
                }
            }
            let cells = main.aggregate(&cfg.seeds);
            markdown(&mut md, "Offline evaluation", &columns, &cells);
            all.extend(cells);
            if !side.rows.is_empty() {
                let cells = side.aggregate(&cfg.seeds);
                markdown(&mut md, "Sensitivity", &columns, &cells);
                all.extend(cells);
            }
        }
    }

    match control {
        None => md.push_str("Closed-loop control: no results recorded (run `control`).\n\n"),
        Some(c) => {
            let _ = writeln!(
                md,
                "Decision pool from {} seed {}.\n",
                c.source_run, c.source_seed
            );
            let columns = vec!["mu", "nu"];
            let table = Table {
                name: "control",
                columns: columns.clone(),
                rows: c
                    .runs
                    .iter()
                    .map(|r| (r.controller.tag().to_string(), r.seed, r.row_id.clone(), vec![r.mu, r.nu]))
                    .collect(),
            };
            let cells = table.aggregate(&cfg.seeds);
            markdown(&mut md, "Closed-loop control", &columns, &cells);
            all.extend(cells);
        }
    }
    (md, all)
}
