//! CSV ingestion and re-emission. Columns are looked up by header name.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ptd::design::{Dataset, LabelingDesign};
use ptd::linalg::Matrix;

use crate::config::{DesignSource, RunConfig};
use crate::error::{CliError, Result};

/// Strict decimal grammar: `[+-]? (digits [. digits?] | . digits) ([eE] [+-]? digits)?`.
pub fn parse_number(s: &str) -> Option<f64> {
    let b = s.as_bytes();
    let mut i = 0;
    if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
        i += 1;
    }
    let int_start = i;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
    }
    let mut digits = i - int_start;
    if i < b.len() && b[i] == b'.' {
        i += 1;
        let frac_start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        digits += i - frac_start;
    }
    if digits == 0 {
        return None;
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        i += 1;
        if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
            i += 1;
        }
        let exp_start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i == exp_start {
            return None;
        }
    }
    if i != b.len() {
        return None;
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// A dataset with the names needed to report on it.
#[derive(Debug)]
pub struct Ingested {
    pub dataset: Dataset,
    /// Names of the dataset columns, response first.
    pub columns: Vec<String>,
    /// Original group labels (clusters or strata) by group index.
    pub group_labels: Vec<String>,
}

struct Table {
    header: HashMap<String, usize>,
    records: Vec<csv::StringRecord>,
}

impl Table {
    fn read(reader: impl Read, what: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let mut header = HashMap::new();
        let names = rdr.headers().map_err(|e| CliError::Data(format!("{what}: {e}")))?.clone();
        if names.is_empty() {
            return Err(CliError::Data(format!("{what}: missing header row")));
        }
        for (i, h) in names.iter().enumerate() {
            if header.insert(h.to_string(), i).is_some() {
                return Err(CliError::Data(format!("{what}: duplicate column {h:?}")));
            }
        }
        let records = rdr
            .records()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| CliError::Data(format!("{what}: {e}")))?;
        Ok(Self { header, records })
    }

    fn open(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
        Self::read(f, &path.display().to_string())
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.header.get(name).copied().ok_or_else(|| CliError::Data(format!("no column named {name:?}")))
    }

    fn cell(&self, row: usize, col: usize) -> &str {
        self.records[row].get(col).unwrap_or("")
    }

    /// Numeric cell; `None` when empty. Rows are reported 1-based.
    fn number(&self, row: usize, col: usize, name: &str) -> Result<Option<f64>> {
        let raw = self.cell(row, col);
        if raw.is_empty() {
            return Ok(None);
        }
        parse_number(raw)
            .map(Some)
            .ok_or_else(|| CliError::Parse { row: row + 1, column: name.to_string(), value: raw.to_string() })
    }

    fn required(&self, row: usize, col: usize, name: &str) -> Result<f64> {
        self.number(row, col, name)?
            .ok_or_else(|| CliError::Data(format!("row {}: column {name:?} is empty", row + 1)))
    }
}

/// Reads the file named in `cfg` into a dataset.
pub fn ingest_csv(cfg: &RunConfig) -> Result<Ingested> {
    let f = std::fs::File::open(&cfg.data).map_err(|e| CliError::io(&cfg.data, e))?;
    ingest_reader(f, cfg, &cfg.data.display().to_string())
}

pub fn ingest_reader(reader: impl Read, cfg: &RunConfig, what: &str) -> Result<Ingested> {
    let table = Table::read(reader, what)?;
    let n = table.records.len();
    if n == 0 {
        return Err(CliError::Data(format!("{what}: no data rows")));
    }
    let columns = cfg.used_columns();
    let d = columns.len();
    let label_col = table.column(&cfg.label_col)?;
    let truth_cols: Vec<usize> = columns.iter().map(|c| table.column(c)).collect::<Result<_>>()?;
    let proxy_cols: Vec<usize> = columns.iter().map(|c| table.column(cfg.proxy_of(c))).collect::<Result<_>>()?;

    let mut labeled = Vec::with_capacity(n);
    let mut truth = Matrix::zeros(n, d);
    let mut proxy = Matrix::zeros(n, d);
    for r in 0..n {
        let is_labeled = match table.cell(r, label_col) {
            "1" => true,
            "0" => false,
            other => return Err(CliError::InvalidLabel { row: r + 1, value: other.to_string() }),
        };
        labeled.push(is_labeled);
        for j in 0..d {
            let t = table.number(r, truth_cols[j], &columns[j])?;
            truth[(r, j)] = match t {
                Some(v) => v,
                None if is_labeled => return Err(CliError::MissingOnLabeled { row: r + 1, column: columns[j].clone() }),
                None => f64::NAN,
            };
            proxy[(r, j)] = match table.number(r, proxy_cols[j], cfg.proxy_of(&columns[j]))? {
                Some(v) => v,
                None if cfg.proxy_of(&columns[j]) == columns[j] => {
                    return Err(CliError::Data(format!(
                        "row {}: column {:?} is empty and has no proxy in --proxy-map",
                        r + 1,
                        columns[j]
                    )))
                }
                None => {
                    return Err(CliError::Data(format!(
                        "row {}: proxy column {:?} is empty",
                        r + 1,
                        cfg.proxy_of(&columns[j])
                    )))
                }
            };
        }
    }

    let (design, group_labels) = build_design(&table, cfg, &labeled)?;
    let dataset = Dataset::new(proxy, truth, labeled, design)?;
    Ok(Ingested { dataset, columns, group_labels })
}

fn build_design(table: &Table, cfg: &RunConfig, labeled: &[bool]) -> Result<(LabelingDesign, Vec<String>)> {
    let n = labeled.len();
    match &cfg.design {
        DesignSource::Pi { pi } => Ok((LabelingDesign::UniformBernoulli { pi: *pi }, Vec::new())),
        DesignSource::PiColumn { column } => {
            let c = table.column(column)?;
            let pi = (0..n).map(|r| table.required(r, c, column)).collect::<Result<_>>()?;
            Ok((LabelingDesign::WeightedBernoulli { pi }, Vec::new()))
        }
        DesignSource::Cluster { column, table: path } => {
            let pis = Table::open(path)?;
            let (id_col, pi_col) = (pis.column("cluster")?, pis.column("pi")?);
            let mut index = HashMap::new();
            let mut labels = Vec::new();
            let mut pi = Vec::new();
            for r in 0..pis.records.len() {
                let id = pis.cell(r, id_col).to_string();
                if index.insert(id.clone(), labels.len()).is_some() {
                    return Err(CliError::Data(format!("{}: cluster {id:?} listed twice", path.display())));
                }
                labels.push(id);
                pi.push(pis.required(r, pi_col, "pi")?);
            }
            let cluster_of = group_ids(table, column, &index, "cluster")?;
            Ok((LabelingDesign::Clustered { cluster_of, pi }, labels))
        }
        DesignSource::Stratum { column, table: path } => {
            let counts = Table::open(path)?;
            let (id_col, size_col) = (counts.column("stratum")?, counts.column("size")?);
            let mut index = HashMap::new();
            let mut labels = Vec::new();
            let mut sizes = Vec::new();
            for r in 0..counts.records.len() {
                let id = counts.cell(r, id_col).to_string();
                if index.insert(id.clone(), labels.len()).is_some() {
                    return Err(CliError::Data(format!("{}: stratum {id:?} listed twice", path.display())));
                }
                labels.push(id);
                sizes.push(counts.required(r, size_col, "size")?);
            }
            let stratum_of = group_ids(table, column, &index, "stratum")?;
            let k = labels.len();
            let mut n_complete = vec![0usize; k];
            let mut n_incomplete = vec![0usize; k];
            for (s, &l) in stratum_of.iter().zip(labeled) {
                if l {
                    n_complete[*s] += 1;
                } else {
                    n_incomplete[*s] += 1;
                }
            }
            // declared counts, when given, must agree with the file
            for (name, observed) in [("n_complete", &n_complete), ("n_incomplete", &n_incomplete)] {
                if let Ok(c) = counts.column(name) {
                    for r in 0..k {
                        let declared = counts.required(r, c, name)?;
                        if declared != observed[r] as f64 {
                            return Err(CliError::Data(format!(
                                "stratum {:?}: {name} is {declared} in {} but {} in the data",
                                labels[r],
                                path.display(),
                                observed[r]
                            )));
                        }
                    }
                }
            }
            Ok((LabelingDesign::Stratified { stratum_of, stratum_sizes: sizes, n_complete, n_incomplete }, labels))
        }
    }
}

fn group_ids(table: &Table, column: &str, index: &HashMap<String, usize>, what: &str) -> Result<Vec<usize>> {
    let c = table.column(column)?;
    (0..table.records.len())
        .map(|r| {
            let id = table.cell(r, c);
            index
                .get(id)
                .copied()
                .ok_or_else(|| CliError::Data(format!("row {}: {what} {id:?} is not in the {what} table", r + 1)))
        })
        .collect()
}

/// Writes the used columns back out: truths (empty where missing), then
/// proxies that live in their own columns, then labels and group ids.
pub fn write_csv(ing: &Ingested, cfg: &RunConfig, out: impl Write) -> Result<()> {
    let ds = &ing.dataset;
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ing.columns.clone();
    let proxied: Vec<usize> = (0..ing.columns.len()).filter(|&j| cfg.proxy_of(&ing.columns[j]) != ing.columns[j]).collect();
    header.extend(proxied.iter().map(|&j| cfg.proxy_of(&ing.columns[j]).to_string()));
    header.push(cfg.label_col.clone());
    let groups: Option<(&str, &[usize])> = match (&cfg.design, ds.design()) {
        (DesignSource::PiColumn { column }, _) => Some((column, &[])),
        (DesignSource::Cluster { column, .. }, LabelingDesign::Clustered { cluster_of, .. }) => {
            Some((column, cluster_of))
        }
        (DesignSource::Stratum { column, .. }, LabelingDesign::Stratified { stratum_of, .. }) => {
            Some((column, stratum_of))
        }
        _ => None,
    };
    if let Some((name, _)) = groups {
        header.push(name.to_string());
    }
    let csv_err = |e: csv::Error| CliError::Data(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for r in 0..ds.n_rows() {
        let mut rec: Vec<String> = (0..ing.columns.len())
            .map(|j| {
                let v = ds.truth()[(r, j)];
                if ds.labeled()[r] {
                    format!("{v:?}")
                } else if proxied.contains(&j) {
                    String::new()
                } else {
                    format!("{:?}", ds.proxy()[(r, j)])
                }
            })
            .collect();
        rec.extend(proxied.iter().map(|&j| format!("{:?}", ds.proxy()[(r, j)])));
        rec.push(if ds.labeled()[r] { "1" } else { "0" }.into());
        match (ds.design(), groups) {
            (LabelingDesign::WeightedBernoulli { pi }, Some(_)) => rec.push(format!("{:?}", pi[r])),
            (_, Some((_, ids))) if !ids.is_empty() => rec.push(ing.group_labels[ids[r]].clone()),
            _ => {}
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Data(e.to_string()))?;
    Ok(())
}
