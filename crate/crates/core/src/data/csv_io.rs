//! CSV ingestion driven by a column schema, and dataset persistence as CSV
//! plus a JSON schema sidecar.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Dataset, Domain, FeatureSchema, Features};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    OneHot,
    Label,
    Drop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    /// One-hot: the category list (in output order). Inferred when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
    /// Categorical: cells are already integer ids below this bound. When
    /// absent, ids are assigned over the sorted distinct values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cardinality: Option<usize>,
}

impl ColumnSpec {
    pub fn new(name: impl Into<String>, kind: ColumnKind) -> Self {
        Self {
            name: name.into(),
            kind,
            categories: None,
            cardinality: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub columns: Vec<ColumnSpec>,
    /// Drop rows where any used cell is empty, NaN or -1.
    #[serde(default)]
    pub drop_invalid_rows: bool,
    /// Drop rows whose label exceeds this percentile (0–100) of all labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_outlier_percentile: Option<f64>,
}

impl CsvSchema {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn is_invalid_cell(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c.eq_ignore_ascii_case("nan") || c.parse::<f64>().map(|v| v == -1.0 || v.is_nan()).unwrap_or(false)
}

/// Distinct values, ordered numerically when every value parses as a number.
fn sorted_distinct<'a>(values: impl Iterator<Item = &'a str>) -> Vec<String> {
    let set: BTreeSet<&str> = values.collect();
    let mut v: Vec<String> = set.into_iter().map(str::to_owned).collect();
    if v.iter().all(|s| s.parse::<f64>().is_ok()) {
        v.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    v
}

/// Linear-interpolation percentile (`p` in 0–100).
fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn load_csv(path: &Path, schema: &CsvSchema, domain: Domain) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = reader.headers()?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].trim().is_empty()) {
        return Err(Error::Load {
            row: 1,
            column: String::new(),
            message: "file has no header".into(),
        });
    }
    let mut positions = Vec::with_capacity(schema.columns.len());
    for col in &schema.columns {
        let pos = header.iter().position(|h| h.trim() == col.name).ok_or_else(|| Error::Load {
            row: 1,
            column: col.name.clone(),
            message: "column missing from header".into(),
        })?;
        positions.push(pos);
    }
    let label_cols: Vec<usize> = schema
        .columns
        .iter()
        .enumerate()
        .filter(|(_, c)| c.kind == ColumnKind::Label)
        .map(|(i, _)| i)
        .collect();
    if label_cols.len() != 1 {
        return Err(Error::Config(format!(
            "schema needs exactly one label column, found {}",
            label_cols.len()
        )));
    }

    // (line number, cells)
    let mut rows: Vec<(usize, Vec<String>)> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let cells: Vec<String> = positions
            .iter()
            .zip(&schema.columns)
            .map(|(&p, col)| {
                rec.get(p).map(|s| s.trim().to_owned()).ok_or_else(|| Error::Load {
                    row: line,
                    column: col.name.clone(),
                    message: "row is too short".into(),
                })
            })
            .collect::<Result<_>>()?;
        if schema.drop_invalid_rows
            && cells
                .iter()
                .zip(&schema.columns)
                .any(|(c, spec)| spec.kind != ColumnKind::Drop && is_invalid_cell(c))
        {
            continue;
        }
        rows.push((line, cells));
    }
    if rows.is_empty() {
        return Err(Error::Load {
            row: 2,
            column: String::new(),
            message: "no data rows".into(),
        });
    }

    let label_idx = label_cols[0];
    let label_name = &schema.columns[label_idx].name;
    let mut labels = Vec::with_capacity(rows.len());
    for (line, cells) in &rows {
        let y: f64 = cells[label_idx].parse().map_err(|_| Error::Load {
            row: *line,
            column: label_name.clone(),
            message: format!("unparseable label `{}`", cells[label_idx]),
        })?;
        if !y.is_finite() {
            return Err(Error::Load {
                row: *line,
                column: label_name.clone(),
                message: "label is not finite".into(),
            });
        }
        labels.push(y);
    }
    if let Some(p) = schema.label_outlier_percentile {
        let cut = percentile(&labels, p);
        let keep: Vec<bool> = labels.iter().map(|&y| y <= cut).collect();
        let mut k = keep.iter();
        rows.retain(|_| *k.next().unwrap());
        let mut k = keep.iter();
        labels.retain(|_| *k.next().unwrap());
    }

    let n = rows.len();
    let mut numeric_cols: Vec<Vec<f64>> = Vec::new();
    let mut numeric_names = Vec::new();
    let mut categorical = Vec::new();
    let mut categorical_schema = Vec::new();

    for (ci, spec) in schema.columns.iter().enumerate() {
        let column = |r: &(usize, Vec<String>)| r.1[ci].clone();
        match spec.kind {
            ColumnKind::Label | ColumnKind::Drop => {}
            ColumnKind::Numeric => {
                let mut vals = Vec::with_capacity(n);
                for r in &rows {
                    let v: f64 = column(r).parse().map_err(|_| Error::Load {
                        row: r.0,
                        column: spec.name.clone(),
                        message: format!("unparseable number `{}`", r.1[ci]),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Load {
                            row: r.0,
                            column: spec.name.clone(),
                            message: "value is not finite".into(),
                        });
                    }
                    vals.push(v);
                }
                numeric_cols.push(vals);
                numeric_names.push(spec.name.clone());
            }
            ColumnKind::OneHot => {
                let cats = match &spec.categories {
                    Some(c) => c.clone(),
                    None => sorted_distinct(rows.iter().map(|r| r.1[ci].as_str())),
                };
                let mut blocks = vec![vec![0.0; n]; cats.len()];
                for (ri, r) in rows.iter().enumerate() {
                    let cell = &r.1[ci];
                    let k = cats.iter().position(|c| c == cell).ok_or_else(|| Error::Load {
                        row: r.0,
                        column: spec.name.clone(),
                        message: format!("value `{cell}` is not a declared category"),
                    })?;
                    blocks[k][ri] = 1.0;
                }
                for (c, b) in cats.iter().zip(blocks) {
                    numeric_names.push(format!("{}={}", spec.name, c));
                    numeric_cols.push(b);
                }
            }
            ColumnKind::Categorical => {
                let (ids, card) = match spec.cardinality {
                    Some(card) => {
                        let mut ids = Vec::with_capacity(n);
                        for r in &rows {
                            let id = r.1[ci].parse::<usize>().ok().filter(|&v| v < card).ok_or_else(|| {
                                Error::Load {
                                    row: r.0,
                                    column: spec.name.clone(),
                                    message: format!("`{}` is not an id below {card}", r.1[ci]),
                                }
                            })?;
                            ids.push(id);
                        }
                        (ids, card)
                    }
                    None => {
                        let vocab = sorted_distinct(rows.iter().map(|r| r.1[ci].as_str()));
                        let ids = rows
                            .iter()
                            .map(|r| vocab.iter().position(|v| *v == r.1[ci]).unwrap())
                            .collect();
                        (ids, vocab.len())
                    }
                };
                categorical.push(ids);
                categorical_schema.push((spec.name.clone(), card));
            }
        }
    }

    let d = numeric_cols.len();
    let numeric = Array2::from_shape_fn((n, d), |(i, j)| numeric_cols[j][i]);
    Dataset::new(
        Features {
            numeric,
            categorical,
        },
        labels,
        domain,
        FeatureSchema {
            numeric: numeric_names,
            categorical: categorical_schema,
        },
    )
}

/// Writes `dataset` as CSV (numeric columns, categorical ids, `label`) and
/// returns the schema that reloads it losslessly.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<CsvSchema> {
    let mut columns: Vec<ColumnSpec> = dataset
        .schema
        .numeric
        .iter()
        .map(|n| ColumnSpec::new(n.clone(), ColumnKind::Numeric))
        .collect();
    for (name, card) in &dataset.schema.categorical {
        let mut c = ColumnSpec::new(name.clone(), ColumnKind::Categorical);
        c.cardinality = Some(*card);
        columns.push(c);
    }
    columns.push(ColumnSpec::new("label", ColumnKind::Label));

    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<&str> = columns.iter().map(|c| c.name.as_str()).collect();
    writeln!(out, "{}", header.join(","))?;
    let mut line = String::new();
    for i in 0..dataset.len() {
        line.clear();
        for v in dataset.features.numeric.row(i) {
            line.push_str(&format!("{v},"));
        }
        for col in &dataset.features.categorical {
            line.push_str(&format!("{},", col[i]));
        }
        line.push_str(&format!("{}", dataset.labels[i]));
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(CsvSchema {
        columns,
        drop_invalid_rows: false,
        label_outlier_percentile: None,
    })
}
