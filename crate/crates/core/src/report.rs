//! Result tables: a long-format TSV and the text table rendered from it.
//!
//! The text table is always rendered from parsed TSV rows, so re-parsing the
//! TSV and rendering again reproduces the text exactly.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::CalibrationMode;
use crate::eval::{EvalResult, LayerCurve, TaskKind};

const MINUS: char = '\u{2212}';
const DASH: &str = "-";
const TSV_HEADER: &str = "task\trow\tcolumn\tmean\tsd\tn_runs\tp_value\tseed\tcalibration\tconfig_hash\tstatus";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("results mix tasks {0} and {1}")]
    MixedTasks(TaskKind, TaskKind),
    #[error("tsv line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// A (dataset, model, tag) combination skipped by zero-shot exclusion.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExcludedCell {
    pub dataset_id: String,
    pub model_id: String,
    pub tag: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Layout {
    /// Rows are (dataset, tag), columns are models.
    #[default]
    Models,
    /// Rows are (model, dataset, tag), columns are layers.
    Layers,
}

impl Layout {
    fn row(self, dataset: &str, model: &str, tag: &str) -> String {
        match self {
            Layout::Models => format!("{dataset} {tag}"),
            Layout::Layers => format!("{model} {dataset} {tag}"),
        }
    }

    fn column(self, model: &str, layer: Option<u32>) -> String {
        match (self, layer) {
            (Layout::Layers, Some(l)) => format!("L{l}"),
            _ => model.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    Excluded,
    Missing,
}

impl Status {
    fn as_str(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::Excluded => "excluded",
            Status::Missing => "missing",
        }
    }
}

/// One cell of the long-format table.
#[derive(Debug, Clone, PartialEq)]
pub struct TsvRow {
    pub task: TaskKind,
    pub row: String,
    pub column: String,
    pub status: Status,
    pub value: Option<CellValue>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellValue {
    pub mean: f64,
    pub sd: f64,
    pub n_runs: usize,
    pub p_value: Option<f64>,
    pub seed: u64,
    pub calibration: CalibrationMode,
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub text: String,
    pub tsv: String,
}

fn first_seen(order: &mut Vec<String>, key: &str) {
    if !order.iter().any(|k| k == key) {
        order.push(key.to_string());
    }
}

/// Lays results and exclusions out on a full grid, row-major.
pub fn tabulate(results: &[EvalResult], excluded: &[ExcludedCell], layout: Layout) -> Result<Vec<TsvRow>, ReportError> {
    let task = match results.first() {
        Some(first) => {
            if let Some(other) = results.iter().find(|r| r.task != first.task) {
                return Err(ReportError::MixedTasks(first.task, other.task));
            }
            first.task
        }
        None if excluded.is_empty() => return Ok(Vec::new()),
        None => TaskKind::Categorical,
    };
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    let mut cells: Vec<(String, String, Status, Option<CellValue>)> = Vec::new();
    for r in results {
        let row = layout.row(&r.dataset_id, &r.model_id, &r.tag);
        let col = layout.column(&r.model_id, Some(r.layer_id));
        first_seen(&mut rows, &row);
        first_seen(&mut cols, &col);
        cells.push((
            row,
            col,
            Status::Ok,
            Some(CellValue {
                mean: r.mean,
                sd: r.sd,
                n_runs: r.n_runs,
                p_value: r.p_value,
                seed: r.seed,
                calibration: r.calibration,
                config_hash: r.config_hash.clone(),
            }),
        ));
    }
    for e in excluded {
        let row = layout.row(&e.dataset_id, &e.model_id, &e.tag);
        let col = layout.column(&e.model_id, None);
        first_seen(&mut rows, &row);
        first_seen(&mut cols, &col);
        cells.push((row, col, Status::Excluded, None));
    }
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for row in &rows {
        for col in &cols {
            let found = cells.iter().find(|(r, c, _, _)| r == row && c == col);
            let (status, value) = match found {
                Some((_, _, s, v)) => (*s, v.clone()),
                None => (Status::Missing, None),
            };
            out.push(TsvRow {
                task,
                row: row.clone(),
                column: col.clone(),
                status,
                value,
            });
        }
    }
    Ok(out)
}

pub fn render_table(
    results: &[EvalResult],
    excluded: &[ExcludedCell],
    layout: Layout,
) -> Result<Rendered, ReportError> {
    let rows = tabulate(results, excluded, layout)?;
    Ok(Rendered {
        text: render_text(&rows),
        tsv: encode_tsv(&rows),
    })
}

fn format_p(p: f64) -> String {
    if p < 1e-6 {
        "p<1e-6".into()
    } else if p < 1e-3 {
        format!("p={p:.1e}")
    } else {
        format!("p={p:.3}")
    }
}

/// Accuracy as a percentage; rho signed with a true minus sign.
pub fn format_cell(task: TaskKind, v: &CellValue) -> String {
    let (mean, sd) = if task.is_accuracy() {
        (v.mean * 100.0, v.sd * 100.0)
    } else {
        (v.mean, v.sd)
    };
    let magnitude = format!("{:.2}", mean.abs());
    let sign = if mean < 0.0 && magnitude.bytes().any(|b| b.is_ascii_digit() && b != b'0') {
        MINUS.to_string()
    } else {
        String::new()
    };
    let mut cell = format!("{sign}{magnitude}");
    if v.n_runs > 1 {
        write!(cell, " \u{b1}{sd:.2}").unwrap();
    }
    if let Some(p) = v.p_value {
        write!(cell, " ({})", format_p(p)).unwrap();
    }
    cell
}

fn width(s: &str) -> usize {
    s.chars().count()
}

fn pad(s: &str, w: usize) -> String {
    format!("{s}{}", " ".repeat(w.saturating_sub(width(s))))
}

/// Renders the text table from long-format rows.
pub fn render_text(rows: &[TsvRow]) -> String {
    let mut row_keys = Vec::new();
    let mut col_keys = Vec::new();
    for r in rows {
        first_seen(&mut row_keys, &r.row);
        first_seen(&mut col_keys, &r.column);
    }
    let cell_text = |row: &str, col: &str| -> String {
        match rows.iter().find(|r| r.row == row && r.column == col) {
            Some(TsvRow {
                value: Some(v), task, ..
            }) => format_cell(*task, v),
            Some(TsvRow {
                status: Status::Excluded,
                ..
            }) => DASH.into(),
            _ => String::new(),
        }
    };
    let grid: Vec<Vec<String>> = row_keys
        .iter()
        .map(|r| col_keys.iter().map(|c| cell_text(r, c)).collect())
        .collect();
    let first_w = row_keys
        .iter()
        .map(|r| width(r))
        .chain([width("row")])
        .max()
        .unwrap_or(0);
    let col_w: Vec<usize> = col_keys
        .iter()
        .enumerate()
        .map(|(j, c)| grid.iter().map(|g| width(&g[j])).chain([width(c)]).max().unwrap_or(0))
        .collect();

    let mut out = String::new();
    let line = |first: &str, rest: Vec<String>| {
        let mut l = pad(first, first_w);
        for (cell, w) in rest.iter().zip(&col_w) {
            l.push_str(" | ");
            l.push_str(&pad(cell, *w));
        }
        l.trim_end().to_string()
    };
    out.push_str(&line("row", col_keys.clone()));
    out.push('\n');
    let mut rule = "-".repeat(first_w);
    for w in &col_w {
        rule.push_str("-+-");
        rule.push_str(&"-".repeat(*w));
    }
    out.push_str(&rule);
    out.push('\n');
    for (r, cells) in row_keys.iter().zip(grid) {
        out.push_str(&line(r, cells));
        out.push('\n');
    }

    let values: Vec<&CellValue> = rows.iter().filter_map(|r| r.value.as_ref()).collect();
    if !values.is_empty() {
        let join = |items: BTreeSet<String>| items.into_iter().collect::<Vec<_>>().join(", ");
        let seeds = join(values.iter().map(|v| v.seed.to_string()).collect());
        let modes = join(values.iter().map(|v| v.calibration.to_string()).collect());
        let hashes = join(
            values
                .iter()
                .map(|v| v.config_hash.clone().unwrap_or_else(|| DASH.into()))
                .collect(),
        );
        let runs = join(values.iter().map(|v| v.n_runs.to_string()).collect());
        let task = rows[0].task;
        let unit = if task.is_accuracy() {
            "accuracy %"
        } else {
            "spearman rho"
        };
        writeln!(
            out,
            "\ntask: {task} ({unit}); runs: {runs}; seed: {seeds}; calibration: {modes}; config: {hashes}"
        )
        .unwrap();
    }
    out
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn encode_tsv(rows: &[TsvRow]) -> String {
    let mut out = String::from(TSV_HEADER);
    out.push('\n');
    for r in rows {
        let v = r.value.as_ref();
        let fields = [
            r.task.to_string(),
            r.row.clone(),
            r.column.clone(),
            opt(v.map(|v| v.mean)),
            opt(v.map(|v| v.sd)),
            opt(v.map(|v| v.n_runs)),
            opt(v.and_then(|v| v.p_value)),
            opt(v.map(|v| v.seed)),
            opt(v.map(|v| v.calibration)),
            opt(v.and_then(|v| v.config_hash.clone())),
            r.status.as_str().to_string(),
        ];
        out.push_str(&fields.join("\t"));
        out.push('\n');
    }
    out
}

pub fn parse_tsv(text: &str) -> Result<Vec<TsvRow>, ReportError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == TSV_HEADER => {}
        _ => {
            return Err(ReportError::Parse {
                line: 1,
                message: "missing header".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let err = |message: String| ReportError::Parse { line: i + 1, message };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 11 {
            return Err(err(format!("expected 11 fields, found {}", f.len())));
        }
        let task: TaskKind = f[0].parse().map_err(err)?;
        let status = match f[10] {
            "ok" => Status::Ok,
            "excluded" => Status::Excluded,
            "missing" => Status::Missing,
            other => return Err(err(format!("unknown status {other:?}"))),
        };
        let value = if status == Status::Ok {
            let num = |s: &str, name: &str| s.parse::<f64>().map_err(|_| err(format!("bad {name} {s:?}")));
            Some(CellValue {
                mean: num(f[3], "mean")?,
                sd: num(f[4], "sd")?,
                n_runs: f[5].parse().map_err(|_| err(format!("bad n_runs {:?}", f[5])))?,
                p_value: if f[6].is_empty() {
                    None
                } else {
                    Some(num(f[6], "p_value")?)
                },
                seed: f[7].parse().map_err(|_| err(format!("bad seed {:?}", f[7])))?,
                calibration: f[8].parse().map_err(err)?,
                config_hash: (!f[9].is_empty()).then(|| f[9].to_string()),
            })
        } else {
            None
        };
        out.push(TsvRow {
            task,
            row: f[1].to_string(),
            column: f[2].to_string(),
            status,
            value,
        });
    }
    Ok(out)
}

/// Plot-ready series: one line per layer.
pub fn curve_tsv(curve: &LayerCurve) -> String {
    let mut out = String::from("task\ttag\tmodel\tlayer\tmean\tsd\n");
    for (layer, r) in &curve.points {
        writeln!(
            out,
            "{}\t{}\t{}\t{layer}\t{}\t{}",
            curve.task, curve.tag, r.model_id, r.mean, r.sd
        )
        .unwrap();
    }
    out
}
