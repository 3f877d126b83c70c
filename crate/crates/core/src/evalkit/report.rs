//! Comparison tables in the layouts of the published result tables.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MetricsReport;
use crate::error::{Error, Result};
use crate::scenario::io::{read_json, write_json};

pub const METRIC_COLUMNS: [&str; 6] = ["minADE1", "minFDE1", "minADE6", "minFDE6", "b-minFDE6", "MR6"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TableKind {
    /// Model comparison.
    #[serde(rename = "1")]
    Models,
    /// Foreign layer count.
    #[serde(rename = "3")]
    LayerCount,
    /// Foreign layer position.
    #[serde(rename = "4")]
    InsertionPosition,
    /// Stream and enhancer flags.
    #[serde(rename = "5")]
    StreamFlags,
}

impl TableKind {
    pub fn from_number(n: u32) -> Result<Self> {
        match n {
            1 => Ok(TableKind::Models),
            3 => Ok(TableKind::LayerCount),
            4 => Ok(TableKind::InsertionPosition),
            5 => Ok(TableKind::StreamFlags),
            _ => Err(Error::Config(format!("no table {n}; expected 1, 3, 4 or 5"))),
        }
    }

    pub fn number(self) -> u32 {
        match self {
            TableKind::Models => 1,
            TableKind::LayerCount => 3,
            TableKind::InsertionPosition => 4,
            TableKind::StreamFlags => 5,
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            TableKind::Models => "Performance comparison on the validation split",
            TableKind::LayerCount => "Comparison of foreign layer counts",
            TableKind::InsertionPosition => "Comparison of foreign layer positions",
            TableKind::StreamFlags => "Ablation of the context streams and the enhancer",
        }
    }

    /// Leading (non-metric) column headers.
    pub fn label_columns(self) -> &'static [&'static str] {
        match self {
            TableKind::Models => &["Model"],
            TableKind::LayerCount => &["Layer Selection"],
            TableKind::InsertionPosition => &["Insertion Position"],
            TableKind::StreamFlags => &["ID", "SC Strm", "AT Strm", "Enhancer"],
        }
    }

    pub fn header(self) -> Vec<&'static str> {
        self.label_columns().iter().chain(METRIC_COLUMNS.iter()).copied().collect()
    }
}

/// `[sc_stream, at_stream, enhancer]` of the flag-table rows, in ID order.
pub const STREAM_ROWS: [[bool; 3]; 5] = [
    [false, false, false],
    [false, false, true],
    [true, true, false],
    [true, true, true],
    [true, false, true],
];

pub fn stream_row_id(flags: [bool; 3]) -> Option<usize> {
    STREAM_ROWS.iter().position(|&f| f == flags).map(|i| i + 1)
}

/// Foreign layers `[first, first + count)` of a `total`-layer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpan {
    pub first: usize,
    pub count: usize,
    pub total: usize,
}

fn count_word(n: usize) -> String {
    const WORDS: [&str; 11] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"];
    WORDS.get(n).map_or_else(|| n.to_string(), |w| w.to_string())
}

impl LayerSpan {
    pub fn last(&self) -> usize {
        self.first + self.count - 1
    }

    /// Label in the layer-count table.
    pub fn count_label(&self) -> String {
        let at_end = self.last() + 1 == self.total;
        match (self.count, at_end) {
            (1, true) => format!("Last layer (layer {})", self.first),
            (c, true) => format!("Last {} layers (layers {}-{})", count_word(c), self.first, self.last()),
            (1, false) => format!("Layer {}", self.first),
            _ => format!("Layers {}-{}", self.first, self.last()),
        }
    }

    /// Label in the insertion-position table.
    pub fn position_label(&self) -> String {
        let base = if self.count == 1 {
            format!("Layer {}", self.first)
        } else {
            format!("Layers {}-{}", self.first, self.last())
        };
        if self.last() + 1 == self.total {
            format!("{base} (last)")
        } else {
            base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    /// `[sc_stream, at_stream, enhancer]`, shown by the flag table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flags: Option<[bool; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<LayerSpan>,
    pub metrics: MetricsReport,
}

impl ReportRow {
    /// Row label under `kind`, derived from the row's flags or layer span.
    pub fn label_for(&self, kind: TableKind) -> Result<String> {
        let missing = |what: &str| Error::Input(format!("row `{}` lacks {what} for table {}", self.label, kind.number()));
        match kind {
            TableKind::Models => Ok(self.label.clone()),
            TableKind::StreamFlags => {
                let f = self.flags.ok_or_else(|| missing("stream flags"))?;
                Ok(stream_row_id(f).map_or_else(|| "n/a".to_string(), |i| i.to_string()))
            }
            TableKind::LayerCount => Ok(self.layers.ok_or_else(|| missing("a foreign layer span"))?.count_label()),
            TableKind::InsertionPosition => Ok(self.layers.ok_or_else(|| missing("a foreign layer span"))?.position_label()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub table: TableKind,
    pub rows: Vec<ReportRow>,
}

fn mark(b: bool) -> &'static str {
    if b {
        "x"
    } else {
        ""
    }
}

impl ReportTable {
    pub fn new(table: TableKind) -> Self {
        ReportTable { table, rows: Vec::new() }
    }

    /// Collects rows from several reports into a `kind` table, relabeled.
    pub fn collect(kind: TableKind, inputs: &[ReportTable]) -> Result<Self> {
        let mut t = ReportTable::new(kind);
        for r in inputs.iter().flat_map(|i| &i.rows) {
            t.rows.push(ReportRow {
                label: r.label_for(kind)?,
                ..r.clone()
            });
        }
        Ok(t)
    }

    fn label_cells(&self, row: &ReportRow) -> Result<Vec<String>> {
        match self.table {
            TableKind::StreamFlags => {
                let f = row
                    .flags
                    .ok_or_else(|| Error::Input(format!("row `{}` lacks stream flags", row.label)))?;
                Ok(vec![row.label.clone(), mark(f[0]).into(), mark(f[1]).into(), mark(f[2]).into()])
            }
            _ => Ok(vec![row.label.clone()]),
        }
    }

    /// Text table with three decimals.
    pub fn render(&self) -> Result<String> {
        let header = self.table.header();
        let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            let mut line = self.label_cells(r)?;
            line.extend(r.metrics.values().iter().map(|v| format!("{v:.3}")));
            cells.push(line);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| cells.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = format!("Table {}: {}\n", self.table.number(), self.table.title());
        for (i, line) in cells.iter().enumerate() {
            let row: Vec<String> = line.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
            out.push_str(row.join(" | ").trim_end());
            out.push('\n');
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                out.push_str(&rule.join("-|-"));
                out.push('\n');
            }
        }
        Ok(out)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<&str> = self.table.header();
        header.push("scenarios");
        let csv_err = |e: csv::Error| Error::Input(format!("csv: {e}"));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut line = self.label_cells(r)?;
            line.extend(r.metrics.values().iter().map(|v| v.to_string()));
            line.push(r.metrics.scenarios.to_string());
            w.write_record(&line).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Input(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Input(format!("csv: {e}")))
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let parse = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            msg,
        };
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r
            .headers()
            .map_err(|e| parse(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let kind = [
            TableKind::Models,
            TableKind::LayerCount,
            TableKind::InsertionPosition,
            TableKind::StreamFlags,
        ]
        .into_iter()
        .find(|k| {
            let mut h = k.header();
            h.push("scenarios");
            h == header
        })
        .ok_or_else(|| parse(format!("unrecognized header {header:?}")))?;
        let nl = kind.label_columns().len();
        let mut table = ReportTable::new(kind);
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| parse(e.to_string()))?;
            let num = |c: usize| -> Result<f64> {
                rec[c]
                    .parse::<f64>()
                    .map_err(|e| parse(format!("row {}, column `{}`: {e}", i + 1, header[c])))
            };
            let v: Vec<f64> = (nl..nl + 6).map(num).collect::<Result<_>>()?;
            let scenarios = rec[nl + 6]
                .parse::<usize>()
                .map_err(|e| parse(format!("row {}, column `scenarios`: {e}", i + 1)))?;
            let flags = (kind == TableKind::StreamFlags).then(|| [&rec[1] == "x", &rec[2] == "x", &rec[3] == "x"]);
            table.rows.push(ReportRow {
                label: rec[0].to_string(),
                flags,
                layers: None,
                metrics: MetricsReport {
                    min_ade1: v[0],
                    min_fde1: v[1],
                    min_ade6: v[2],
                    min_fde6: v[3],
                    brier_min_fde6: v[4],
                    miss_rate6: v[5],
                    scenarios,
                },
            });
        }
        Ok(table)
    }
}

enum Format {
    Json,
    Csv,
}

fn format_of(path: &Path) -> Result<Format> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => Ok(Format::Json),
        Some("csv") => Ok(Format::Csv),
        _ => Err(Error::Config(format!("report {} must end in .json or .csv", path.display()))),
    }
}

/// Writes JSON or CSV by extension.
pub fn write_report(table: &ReportTable, path: &Path) -> Result<()> {
    let format = format_of(path)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    match format {
        Format::Json => write_json(table, path),
        Format::Csv => fs::write(path, table.to_csv()?).map_err(|e| Error::io(path, e)),
    }
}

pub fn read_report(path: &Path) -> Result<ReportTable> {
    match format_of(path)? {
        Format::Json => read_json(path),
        Format::Csv => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            ReportTable::from_csv(&text, path)
        }
    }
}
