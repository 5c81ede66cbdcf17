//! Markdown rendering of metric reports in leaderboard layout. Each task
//! family shows its own columns, and values are percentages with two decimals.

use crate::error::{KgiError, Result};
use crate::metrics::MetricsReport;
use crate::tasks::TaskKind;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub dataset: String,
    pub task: TaskKind,
    pub system: String,
    pub report: MetricsReport,
}

type Column = (&'static str, fn(&MetricsReport) -> f64, fn(&mut MetricsReport, f64));

fn columns(task: TaskKind) -> Vec<Column> {
    let rprec: Column = ("R-Prec", |r| r.r_precision, |r, v| r.r_precision = v);
    let recall: Column = ("Recall@5", |r| r.recall_at_5, |r, v| r.recall_at_5 = v);
    let acc: Column = ("Accuracy", |r| r.accuracy, |r, v| r.accuracy = v);
    let f1: Column = ("F1", |r| r.f1, |r, v| r.f1 = v);
    let rl: Column = ("Rouge-L", |r| r.rouge_l, |r, v| r.rouge_l = v);
    let kac: Column = ("KILT-AC", |r| r.kilt_ac, |r, v| r.kilt_ac = v);
    let kf1: Column = ("KILT-F1", |r| r.kilt_f1, |r, v| r.kilt_f1 = v);
    let krl: Column = ("KILT-RL", |r| r.kilt_rl, |r, v| r.kilt_rl = v);
    match task {
        TaskKind::SlotFilling | TaskKind::QuestionAnswering => vec![rprec, recall, acc, f1, kac, kf1],
        TaskKind::FactChecking => vec![rprec, recall, acc, kac],
        TaskKind::Dialog => vec![rprec, recall, rl, f1, krl, kf1],
    }
}

fn header(dataset: &str, task: TaskKind) -> String {
    let cols = columns(task);
    let names: Vec<&str> = cols.iter().map(|c| c.0).collect();
    format!(
        "## {dataset} ({})\n\n| System | {} |\n|---|{}\n",
        task.as_str(),
        names.join(" | "),
        "---|".repeat(cols.len())
    )
}

/// Renders rows grouped by consecutive dataset, one table per dataset.
pub fn render_table(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    let mut current: Option<(&str, TaskKind)> = None;
    for row in rows {
        if current != Some((row.dataset.as_str(), row.task)) {
            if current.is_some() {
                out.push('\n');
            }
            out.push_str(&header(&row.dataset, row.task));
            current = Some((row.dataset.as_str(), row.task));
        }
        let cells: Vec<String> = columns(row.task)
            .iter()
            .map(|c| format!("{:.2}", c.1(&row.report) * 100.0))
            .collect();
        out.push_str(&format!("| {} | {} |\n", row.system, cells.join(" | ")));
    }
    out
}

/// Inverse of [`render_table`]. Columns a task does not display read back as 0.
pub fn parse_table(text: &str) -> Result<Vec<ReportRow>> {
    let bad = |line: usize, why: &str| KgiError::InvalidArgument(format!("report line {}: {why}", line + 1));
    let mut rows = Vec::new();
    let mut section: Option<(String, TaskKind)> = None;
    for (i, line) in text.lines().enumerate() {
        if let Some(rest) = line.strip_prefix("## ") {
            let (name, task) = rest
                .rsplit_once(" (")
                .and_then(|(n, t)| Some((n, t.strip_suffix(')')?)))
                .ok_or_else(|| bad(i, "section header must be `## <dataset> (<task>)`"))?;
            let task = TaskKind::parse(task).ok_or_else(|| bad(i, "unknown task"))?;
            section = Some((name.to_string(), task));
            continue;
        }
        if !line.starts_with('|') || line.starts_with("| System") || line.starts_with("|---") {
            continue;
        }
        let (dataset, task) = section.clone().ok_or_else(|| bad(i, "row outside a section"))?;
        let cells: Vec<&str> = line.trim_matches('|').split('|').map(str::trim).collect();
        let cols = columns(task);
        if cells.len() != cols.len() + 1 {
            return Err(bad(i, "wrong number of cells"));
        }
        let mut report = MetricsReport::default();
        for (col, cell) in cols.iter().zip(&cells[1..]) {
            let v: f64 = cell.parse().map_err(|_| bad(i, "cell is not a number"))?;
            col.2(&mut report, v / 100.0);
        }
        rows.push(ReportRow {
            dataset,
            task,
            system: cells[0].to_string(),
            report,
        });
    }
    Ok(rows)
}
