//! Metric time series and their CSV form.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRIC_COLUMNS: [&str; 10] =
    ["step", "phase", "kind", "task", "loss", "mlm_acc", "nsp_acc", "task_acc", "sparsity_prunable", "sparsity_all"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Train,
    Eval,
}

impl RowKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RowKind::Train => "train",
            RowKind::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub phase: String,
    pub kind: RowKind,
    pub task: Option<String>,
    pub loss: f64,
    pub mlm_acc: Option<f64>,
    pub nsp_acc: Option<f64>,
    pub task_acc: Option<f64>,
    pub sparsity_prunable: f64,
    pub sparsity_all: f64,
}

impl MetricRow {
    pub fn train(step: u64, phase: &str, loss: f64) -> Self {
        Self {
            step,
            phase: phase.to_string(),
            kind: RowKind::Train,
            task: None,
            loss,
            mlm_acc: None,
            nsp_acc: None,
            task_acc: None,
            sparsity_prunable: 0.0,
            sparsity_all: 0.0,
        }
    }
}

/// Rows from one protocol run plus free-form notes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub rows: Vec<MetricRow>,
    pub notes: Vec<String>,
    /// Set when a final hard-threshold top-up was applied.
    pub trimmed: bool,
    /// Set when the run stopped early (e.g. a non-finite loss).
    pub failure: Option<String>,
}

impl RunReport {
    pub fn extend(&mut self, other: RunReport) {
        self.rows.extend(other.rows);
        self.notes.extend(other.notes);
        self.trimmed |= other.trimmed;
        if self.failure.is_none() {
            self.failure = other.failure;
        }
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.rows.iter().filter(|r| r.kind == RowKind::Train).map(|r| r.loss).collect()
    }

    pub fn last_step(&self) -> Option<u64> {
        self.rows.last().map(|r| r.step)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Renders rows as CSV (header plus one line per row, `\n` endings).
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = METRIC_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let fields = [
            r.step.to_string(),
            csv_field(&r.phase),
            r.kind.as_str().to_string(),
            csv_field(r.task.as_deref().unwrap_or("")),
            r.loss.to_string(),
            opt(r.mlm_acc),
            opt(r.nsp_acc),
            opt(r.task_acc),
            r.sparsity_prunable.to_string(),
            r.sparsity_all.to_string(),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Loss curves side by side, one row per step index. Shorter curves leave
/// empty cells.
pub fn loss_curves_csv(curves: &[(&str, Vec<f64>)]) -> String {
    let mut out = String::from("step_index");
    for (name, _) in curves {
        out.push(',');
        out.push_str(&csv_field(name));
    }
    out.push('\n');
    let len = curves.iter().map(|c| c.1.len()).max().unwrap_or(0);
    for i in 0..len {
        out.push_str(&i.to_string());
        for (_, c) in curves {
            out.push(',');
            if let Some(v) = c.get(i) {
                out.push_str(&v.to_string());
            }
        }
        out.push('\n');
    }
    out
}

/// Quotes a field when it contains a delimiter, quote or newline.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Parses a CSV file with a header into `(header, rows)`. Handles quoted
/// fields; rows must have as many fields as the header.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = parse_csv(&text).map_err(|reason| Error::Format { path: path.into(), reason })?;
    if records.is_empty() {
        return Err(Error::Format { path: path.into(), reason: "empty file".into() });
    }
    let header = records.remove(0);
    for (i, r) in records.iter().enumerate() {
        if r.len() != header.len() {
            return Err(Error::Format {
                path: path.into(),
                reason: format!("line {} has {} fields, header has {}", i + 2, r.len(), header.len()),
            });
        }
    }
    Ok((header, records))
}

fn parse_csv(text: &str) -> std::result::Result<Vec<Vec<String>>, String> {
    let mut records = Vec::new();
    let mut record = Vec::new();
    let mut field = String::new();
    let mut chars = text.chars().peekable();
    let mut quoted = false;
    let mut any = false;
    while let Some(c) = chars.next() {
        any = true;
        if quoted {
            match c {
                '"' if chars.peek() == Some(&'"') => {
                    chars.next();
                    field.push('"');
                }
                '"' => quoted = false,
                c => field.push(c),
            }
            continue;
        }
        match c {
            '"' if field.is_empty() => quoted = true,
            ',' => record.push(std::mem::take(&mut field)),
            '\r' => {}
            '\n' => {
                record.push(std::mem::take(&mut field));
                records.push(std::mem::take(&mut record));
                any = false;
            }
            c => field.push(c),
        }
    }
    if quoted {
        return Err("unterminated quoted field".into());
    }
    if any {
        record.push(field);
        records.push(record);
    }
    Ok(records)
}
