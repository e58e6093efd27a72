//! Analysis configuration from flags and `key = value` files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ptd::estimators::EstimatorKind;
use ptd::intervals::{Method, TuningStrategy};
use serde::Serialize;

use crate::error::{CliError, Result};

/// Keys accepted in a config file, spelled as the long flag names.
pub const KEYS: &[&str] = &[
    "data",
    "response",
    "covariates",
    "proxy-map",
    "label-col",
    "pi",
    "pi-col",
    "cluster-col",
    "cluster-pi",
    "stratum-col",
    "stratum-counts",
    "estimator",
    "q",
    "intercept",
    "method",
    "B",
    "alpha",
    "tuning",
    "seed",
    "out",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DesignSource {
    Pi { pi: f64 },
    PiColumn { column: String },
    Cluster { column: String, table: PathBuf },
    Stratum { column: String, table: PathBuf },
}

impl DesignSource {
    pub fn name(&self) -> &'static str {
        match self {
            DesignSource::Pi { .. } => "uniform Bernoulli",
            DesignSource::PiColumn { .. } => "weighted Bernoulli",
            DesignSource::Cluster { .. } => "clustered",
            DesignSource::Stratum { .. } => "stratified",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProxyPair {
    pub truth: String,
    pub proxy: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub data: PathBuf,
    pub response: String,
    pub covariates: Vec<String>,
    pub proxy_map: Vec<ProxyPair>,
    pub label_col: String,
    pub design: DesignSource,
    pub estimator: EstimatorKind,
    pub intercept: bool,
    pub method: Method,
    #[serde(rename = "B")]
    pub b: usize,
    pub alpha: f64,
    pub tuning: String,
    pub seed: u64,
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

/// Parses a config file: one `key = value` per line, `#` starts a comment.
pub fn parse_kv(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| CliError::ConfigLine { path: path.to_path_buf(), line: i + 1, message };
        let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
        let key = key.trim();
        if !KEYS.contains(&key) {
            return Err(err(format!("unknown key {key:?}")));
        }
        if map.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(err(format!("duplicate key {key:?}")));
        }
    }
    Ok(map)
}

pub fn read_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_kv(&text, path)
}

fn list(value: &str) -> Vec<String> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn number<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Option<T>> {
    map.get(key)
        .map(|v| v.parse::<T>().map_err(|_| CliError::Usage(format!("--{key}: cannot parse {v:?}"))))
        .transpose()
}

impl RunConfig {
    /// Builds a config from merged settings; `map` keys are the flag names.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let required = |key: &str| {
            map.get(key).cloned().ok_or_else(|| CliError::Usage(format!("--{key} is required")))
        };
        let data = PathBuf::from(required("data")?);
        let response = required("response")?;
        let covariates = map.get("covariates").map(|v| list(v)).unwrap_or_default();
        let proxy_map = list(&required("proxy-map")?)
            .into_iter()
            .map(|pair| match pair.split_once('=') {
                Some((t, p)) if !t.trim().is_empty() && !p.trim().is_empty() => {
                    Ok(ProxyPair { truth: t.trim().into(), proxy: p.trim().into() })
                }
                _ => Err(CliError::Usage(format!("--proxy-map entry {pair:?} is not true=proxy"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if proxy_map.is_empty() {
            return Err(CliError::Usage("--proxy-map needs at least one true=proxy pair".into()));
        }
        let used: Vec<&String> = std::iter::once(&response).chain(&covariates).collect();
        for p in &proxy_map {
            if !used.contains(&&p.truth) {
                return Err(CliError::Usage(format!("--proxy-map names {:?}, which is not a used column", p.truth)));
            }
        }
        let label_col = map.get("label-col").cloned().unwrap_or_else(|| "labeled".into());

        let pi: Option<f64> = number(map, "pi")?;
        let mut designs = Vec::new();
        if let Some(pi) = pi {
            designs.push(DesignSource::Pi { pi });
        }
        if let Some(c) = map.get("pi-col") {
            designs.push(DesignSource::PiColumn { column: c.clone() });
        }
        match (map.get("cluster-col"), map.get("cluster-pi")) {
            (Some(c), Some(t)) => designs.push(DesignSource::Cluster { column: c.clone(), table: t.into() }),
            (None, None) => {}
            _ => return Err(CliError::Usage("--cluster-col and --cluster-pi go together".into())),
        }
        match (map.get("stratum-col"), map.get("stratum-counts")) {
            (Some(c), Some(t)) => designs.push(DesignSource::Stratum { column: c.clone(), table: t.into() }),
            (None, None) => {}
            _ => return Err(CliError::Usage("--stratum-col and --stratum-counts go together".into())),
        }
        if designs.len() != 1 {
            return Err(CliError::Usage(format!(
                "exactly one of --pi, --pi-col, --cluster-col, --stratum-col is required (got {})",
                designs.len()
            )));
        }
        let design = designs.pop().expect("one design");

        let q: Option<f64> = number(map, "q")?;
        let estimator = match map.get("estimator").map(String::as_str).unwrap_or("ols") {
            "mean" => EstimatorKind::Mean,
            "ols" => EstimatorKind::Ols,
            "logistic" => EstimatorKind::Logistic,
            "quantile" => EstimatorKind::Quantile {
                q: q.ok_or_else(|| CliError::Usage("--estimator quantile needs --q".into()))?,
            },
            other => return Err(CliError::Usage(format!("unknown estimator {other:?}"))),
        };
        if q.is_some() && !matches!(estimator, EstimatorKind::Quantile { .. }) {
            return Err(CliError::Usage("--q only applies to --estimator quantile".into()));
        }
        let intercept = match map.get("intercept").map(String::as_str) {
            None | Some("true") => true,
            Some("false") => false,
            Some(v) => return Err(CliError::Usage(format!("--intercept: expected true or false, got {v:?}"))),
        };
        let method = match map.get("method") {
            Some(m) => m.parse::<Method>().map_err(|_| CliError::Usage(format!("unknown method {m:?}")))?,
            None => default_method(&design),
        };
        let tuning = map.get("tuning").cloned().unwrap_or_else(|| "diag".into());
        tuning.parse::<TuningStrategy>().map_err(|_| CliError::Usage(format!("unknown tuning {tuning:?}")))?;

        let cfg = RunConfig {
            data,
            response,
            covariates,
            proxy_map,
            label_col,
            design,
            estimator,
            intercept,
            method,
            b: number(map, "B")?.unwrap_or(2000),
            alpha: number(map, "alpha")?.unwrap_or(0.1),
            tuning,
            seed: number(map, "seed")?.unwrap_or(0),
            out: map.get("out").map(PathBuf::from),
        };
        cfg.check_method()?;
        Ok(cfg)
    }

    /// Response first, then covariates: the column order of the dataset.
    pub fn used_columns(&self) -> Vec<String> {
        std::iter::once(self.response.clone()).chain(self.covariates.iter().cloned()).collect()
    }

    pub fn proxy_of<'a>(&'a self, column: &'a str) -> &'a str {
        self.proxy_map.iter().find(|p| p.truth == column).map_or(column, |p| p.proxy.as_str())
    }

    fn check_method(&self) -> Result<()> {
        let ok = match self.method {
            Method::FullBoot | Method::ConvBoot | Method::Clt => {
                matches!(self.design, DesignSource::Pi { .. } | DesignSource::PiColumn { .. })
            }
            Method::ClusterBoot | Method::ClusterConvBoot => matches!(self.design, DesignSource::Cluster { .. }),
            Method::StratifiedBoot => matches!(self.design, DesignSource::Stratum { .. }),
        };
        if ok {
            Ok(())
        } else {
            Err(CliError::IncompatibleMethodDesign {
                method: self.method.name().into(),
                design: self.design.name().into(),
            })
        }
    }
}

fn default_method(design: &DesignSource) -> Method {
    match design {
        DesignSource::Pi { .. } | DesignSource::PiColumn { .. } => Method::FullBoot,
        DesignSource::Cluster { .. } => Method::ClusterBoot,
        DesignSource::Stratum { .. } => Method::StratifiedBoot,
    }
}
