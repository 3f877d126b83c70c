//! Grid runs over stream flags and foreign-layer choices.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Flags, ModelConfig, RunConfig, TrainConfig};
use super::train::{evaluate, train};
use crate::enhancer::read_manifest;
use crate::error::{Error, Result};
use crate::evalkit::{write_report, LayerSpan, MetricsReport, ReportRow, ReportTable, TableKind};
use crate::scenario::io::{read_json, to_json_bytes, write_json};
use crate::scenario::Dataset;

fn default_tables() -> Vec<TableKind> {
    vec![TableKind::StreamFlags, TableKind::LayerCount, TableKind::InsertionPosition]
}

fn default_counts() -> Vec<usize> {
    vec![1, 3, 6]
}

/// Contents of an `ablate --grid` file. Layer tables use the flagship flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_tables")]
    pub tables: Vec<TableKind>,
    /// Flag rows of tables 1 and 5; defaults to the table's own rows.
    #[serde(default)]
    pub flags: Option<Vec<Flags>>,
    /// Layer counts of table 3, each ending at the last layer.
    #[serde(default = "default_counts")]
    pub layer_counts: Vec<usize>,
    /// Single layers of table 4; defaults to `0, ⌊(L−1)/3⌋, ⌊2(L−1)/3⌋, L−1`.
    #[serde(default)]
    pub positions: Option<Vec<usize>>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            tables: default_tables(),
            flags: None,
            layer_counts: default_counts(),
            positions: None,
        }
    }
}

impl GridSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let mut g: GridSpec = read_json(path).map_err(super::config::config_error)?;
        if let Some(f) = g.model.foreign.as_mut() {
            if f.manifest.is_relative() {
                f.manifest = path.parent().unwrap_or(Path::new("")).join(&f.manifest);
            }
        }
        Ok(g)
    }
}

/// One trained configuration of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub table: TableKind,
    pub label: String,
    pub model: ModelConfig,
    pub span: Option<LayerSpan>,
}

pub fn table_positions(total: usize) -> Vec<usize> {
    let last = total - 1;
    let mut p = vec![0, last / 3, 2 * last / 3, last];
    p.dedup();
    p
}

fn invalid(label: &str, e: Error) -> Error {
    Error::Config(format!("grid point `{label}`: {e}"))
}

/// Expands and validates every grid point before anything trains.
pub fn plan(spec: &GridSpec) -> Result<Vec<GridPoint>> {
    spec.train.validate()?;
    let total = match &spec.model.foreign {
        Some(f) => Some(read_manifest(&f.manifest)?.layers),
        None => None,
    };
    let need_total = |what: &str| total.ok_or_else(|| Error::Config(format!("{what} needs a foreign weight manifest")));
    let with_layers = |flags: Flags, first: usize, count: usize| -> ModelConfig {
        let mut m = spec.model.clone();
        m.flags = flags;
        if let Some(f) = m.foreign.as_mut() {
            f.layer = Some(first);
            f.count = count;
        }
        m
    };
    let mut points = Vec::new();
    for &table in &spec.tables {
        match table {
            TableKind::Models | TableKind::StreamFlags => {
                let rows = spec.flags.clone().unwrap_or_else(|| match table {
                    TableKind::Models => vec![Flags::NONE, Flags::STREAMS, Flags::ENHANCER_ONLY, Flags::FLAGSHIP],
                    _ => Flags::ablation_rows().to_vec(),
                });
                for flags in rows {
                    let mut m = spec.model.clone();
                    m.flags = flags;
                    let label = match table {
                        TableKind::Models => flags.variant_name().to_string(),
                        _ => flags.ablation_id().map_or_else(|| "n/a".into(), |i| i.to_string()),
                    };
                    let span = match (flags.enhancer, &m.foreign) {
                        (true, Some(f)) => {
                            let (first, total) = f.check().map_err(|e| invalid(&label, e))?;
                            Some(LayerSpan {
                                first,
                                count: f.count,
                                total,
                            })
                        }
                        _ => None,
                    };
                    points.push(GridPoint {
                        table,
                        label,
                        model: m,
                        span,
                    });
                }
            }
            TableKind::LayerCount => {
                let total = need_total("the layer-count table")?;
                for &c in &spec.layer_counts {
                    let first = total.checked_sub(c).filter(|_| c > 0);
                    let Some(first) = first else {
                        return Err(Error::Config(format!("layer count {c} invalid for a {total}-layer manifest")));
                    };
                    let span = LayerSpan { first, count: c, total };
                    points.push(GridPoint {
                        table,
                        label: span.count_label(),
                        model: with_layers(Flags::FLAGSHIP, first, c),
                        span: Some(span),
                    });
                }
            }
            TableKind::InsertionPosition => {
                let total = need_total("the insertion-position table")?;
                for l in spec.positions.clone().unwrap_or_else(|| table_positions(total)) {
                    if l >= total {
                        return Err(Error::Config(format!("layer {l} outside a {total}-layer manifest")));
                    }
                    let span = LayerSpan { first: l, count: 1, total };
                    points.push(GridPoint {
                        table,
                        label: span.position_label(),
                        model: with_layers(Flags::FLAGSHIP, l, 1),
                        span: Some(span),
                    });
                }
            }
        }
    }
    for p in &points {
        p.model.validate().map_err(|e| invalid(&p.label, e))?;
        if let Some(f) = p.model.foreign.as_ref().filter(|_| p.model.flags.enhancer) {
            f.check().map_err(|e| invalid(&p.label, e))?;
        }
    }
    Ok(points)
}

/// Canonical key of a configuration; equal keys train once.
fn config_key(m: &ModelConfig) -> Result<String> {
    let mut m = m.clone();
    if !m.flags.enhancer {
        m.foreign = None;
    }
    if let Some(f) = m.foreign.as_mut() {
        f.layer = Some(f.check()?.0);
    }
    Ok(String::from_utf8(to_json_bytes(&m)?).expect("json is utf-8"))
}

/// Trains every distinct grid point once, evaluates its best checkpoint on
/// the validation split, and returns one table per requested axis.
pub fn ablate(spec: &GridSpec, data: &Dataset, out: Option<&Path>) -> Result<Vec<ReportTable>> {
    let points = plan(spec)?;
    if data.val.is_empty() {
        return Err(Error::Input("ablation needs a validation split".into()));
    }
    for p in &points {
        p.model.check_geometry(&data.limits)?;
    }
    let mut done: BTreeMap<String, MetricsReport> = BTreeMap::new();
    let mut tables: Vec<ReportTable> = Vec::new();
    for p in &points {
        let key = config_key(&p.model)?;
        let metrics = match done.get(&key) {
            Some(m) => *m,
            None => {
                let run_dir = out.map(|d| d.join("runs").join(format!("run{:02}", done.len())));
                let cfg = RunConfig {
                    model: p.model.clone(),
                    train: spec.train.clone(),
                };
                let outcome = train(&cfg, data, None, run_dir.as_deref())?;
                let model = outcome.best.model()?;
                let (m, _) = evaluate(&model, &data.val)?;
                if let Some(d) = &run_dir {
                    write_json(&cfg, &d.join("config.json"))?;
                }
                done.insert(key, m);
                m
            }
        };
        let row = ReportRow {
            label: p.label.clone(),
            flags: Some(p.model.flags.as_array()),
            layers: p.span,
            metrics,
        };
        match tables.iter_mut().find(|t| t.table == p.table) {
            Some(t) => t.rows.push(row),
            None => tables.push(ReportTable {
                table: p.table,
                rows: vec![row],
            }),
        }
    }
    if let Some(dir) = out {
        for t in &tables {
            let n = t.table.number();
            write_report(t, &dir.join(format!("table{n}.json")))?;
            write_report(t, &dir.join(format!("table{n}.csv")))?;
            std::fs::write(dir.join(format!("table{n}.txt")), t.render()?).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(tables)
}
