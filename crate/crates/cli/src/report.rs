//! `report`: one row per run directory, accuracy recomputed from the graded dump.

use std::fs;
use std::path::Path;

use promptgrad::extract::GradedPrediction;
use promptgrad::ErrorCategory;

use crate::commands::Summary;
use crate::manifest::{self, io_err, RunManifest};
use crate::CliError;

const COLUMNS: [&str; 7] = [
    "run_id",
    "method",
    "dataset",
    "n",
    "accuracy_pct",
    "task_calls",
    "backward_calls",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub run_id: String,
    pub method: String,
    pub dataset: String,
    pub n: usize,
    pub accuracy_pct: f64,
    pub task_calls: usize,
    pub backward_calls: usize,
}

impl Row {
    fn cells(&self) -> [String; 7] {
        [
            self.run_id.clone(),
            self.method.clone(),
            self.dataset.clone(),
            self.n.to_string(),
            format!("{:.1}", self.accuracy_pct),
            self.task_calls.to_string(),
            self.backward_calls.to_string(),
        ]
    }
}

fn load_row(dir: &Path) -> Result<Row, CliError> {
    let manifest: RunManifest = manifest::read_json(&dir.join(manifest::MANIFEST))?;
    let summary: Summary = manifest::read_json(&dir.join(manifest::SUMMARY))?;
    let path = dir.join(manifest::GRADED);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let graded = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str::<GradedPrediction>)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::new(ErrorCategory::Data, format!("{}: {e}", path.display())))?;
    if graded.is_empty() {
        return Err(CliError::new(
            ErrorCategory::Data,
            format!("{} is empty", path.display()),
        ));
    }
    let correct = graded.iter().filter(|g| g.correct).count();
    Ok(Row {
        run_id: manifest.run_id,
        method: summary.method,
        dataset: summary.dataset,
        n: graded.len(),
        accuracy_pct: 100.0 * correct as f64 / graded.len() as f64,
        task_calls: summary.engine_calls.task,
        backward_calls: summary.engine_calls.backward,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

pub fn render_csv(rows: &[Row]) -> String {
    let mut out = COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(
            &r.cells()
                .iter()
                .map(|c| csv_field(c))
                .collect::<Vec<_>>()
                .join(","),
        );
        out.push('\n');
    }
    out
}

pub fn render_table(rows: &[Row]) -> String {
    let cells: Vec<[String; 7]> = rows.iter().map(Row::cells).collect();
    let mut widths = COLUMNS.map(str::len);
    for r in &cells {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |r: &[String]| {
        r.iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_owned()
    };
    let header: Vec<String> = COLUMNS.iter().map(|s| s.to_string()).collect();
    let mut out = line(&header);
    out.push('\n');
    for r in &cells {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

pub fn report(runs: &[std::path::PathBuf], csv: Option<&Path>) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for dir in runs {
        match load_row(dir) {
            Ok(r) => rows.push(r),
            Err(e) => tracing::warn!("skipping {}: {}", dir.display(), e.message),
        }
    }
    if rows.is_empty() {
        return Err(CliError::new(
            ErrorCategory::Data,
            "no readable run directories",
        ));
    }
    print!("{}", render_table(&rows));
    if let Some(path) = csv {
        fs::write(path, render_csv(&rows)).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}
