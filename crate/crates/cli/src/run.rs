//! The `analyze`, `simulate` and `generate` commands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ptd::design::LabelingDesign;
use ptd::estimators::{EstimatorKind, EstimatorSpec};
use ptd::intervals::{ptd_intervals, IntervalConfig, TuningStrategy};
use ptd::simulation::{generate_synthetic, run_coverage_experiment, CoverageReport, EstimatorChoice, ScenarioConfig};
use ptd::tuning::TuningMatrix;
use serde::Serialize;

use crate::config::{DesignSource, ProxyPair, RunConfig};
use crate::error::{CliError, Result};
use crate::ingest::{ingest_csv, write_csv, Ingested};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Record {
    pub name: String,
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub alpha: f64,
    pub method: String,
    pub tuning: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunDiagnostics {
    #[serde(rename = "B")]
    pub b: usize,
    pub redraws: usize,
    pub seed: u64,
    pub converged: bool,
    pub ridge_added: bool,
    pub inner_bootstrap: bool,
    pub n_rows: usize,
    pub n_labeled: usize,
    pub warnings: Vec<String>,
    /// Wall-clock seconds; printed to stderr rather than serialized so the
    /// output file is reproducible.
    #[serde(skip)]
    pub runtime: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutput {
    pub records: Vec<Record>,
    pub tuning_matrix: TuningMatrix,
    pub diagnostics: RunDiagnostics,
    pub config: RunConfig,
}

pub fn estimator_spec(cfg: &RunConfig) -> EstimatorSpec {
    let d = cfg.used_columns().len();
    let covs: Vec<usize> = (1..d).collect();
    match cfg.estimator {
        EstimatorKind::Mean => EstimatorSpec::mean(&(0..d).collect::<Vec<_>>()),
        EstimatorKind::Ols => EstimatorSpec::ols(0, &covs, cfg.intercept),
        EstimatorKind::Logistic => EstimatorSpec::logistic(0, &covs, cfg.intercept),
        EstimatorKind::Quantile { q } => EstimatorSpec::quantile(q, 0, &covs, cfg.intercept),
    }
}

pub fn interval_config(cfg: &RunConfig) -> Result<IntervalConfig> {
    let c = IntervalConfig {
        b: cfg.b,
        alpha: cfg.alpha,
        tuning: cfg.tuning.parse::<TuningStrategy>().map_err(|e| CliError::Usage(e.to_string()))?,
        method: cfg.method,
        redraw_limit: None,
        master_seed: cfg.seed,
    };
    c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(c)
}

pub fn run_analysis(cfg: &RunConfig) -> Result<RunOutput> {
    let icfg = interval_config(cfg)?;
    let ing = ingest_csv(cfg)?;
    analyze_ingested(cfg, &icfg, &ing)
}

pub fn analyze_ingested(cfg: &RunConfig, icfg: &IntervalConfig, ing: &Ingested) -> Result<RunOutput> {
    let start = Instant::now();
    let spec = estimator_spec(cfg);
    let res = ptd_intervals(&ing.dataset, &spec, icfg)?;
    let names = spec.coefficient_names(&ing.columns);
    let records = names
        .into_iter()
        .zip(res.point.iter().zip(&res.intervals))
        .map(|(name, (&point, &(lo, hi)))| Record {
            name,
            point,
            lo,
            hi,
            alpha: res.alpha,
            method: res.method.name().into(),
            tuning: cfg.tuning.clone(),
        })
        .collect();
    let d = &res.diagnostics;
    Ok(RunOutput {
        records,
        tuning_matrix: res.tuning.clone(),
        diagnostics: RunDiagnostics {
            b: d.replicates,
            redraws: d.redraws,
            seed: cfg.seed,
            converged: d.converged,
            ridge_added: d.ridge_added,
            inner_bootstrap: d.inner_bootstrap,
            n_rows: d.n_rows,
            n_labeled: d.n_labeled,
            warnings: d.warnings.clone(),
            runtime: start.elapsed().as_secs_f64(),
        },
        config: cfg.clone(),
    })
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_scenario(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_scenario(&text, path)
}

/// Parses a TOML scenario. Syntax errors carry the line they occur on.
pub fn parse_scenario(text: &str, path: &Path) -> Result<ScenarioConfig> {
    let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| {
        let line = e.span().map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
        CliError::ConfigLine { path: path.to_path_buf(), line, message: e.message().to_string() }
    })?;
    cfg.validate().map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

pub struct SimulationOutput {
    pub report: CoverageReport,
    pub json: String,
    /// Summed seconds per method, in method order.
    pub timing: BTreeMap<String, f64>,
}

pub fn run_simulation(scenario: &ScenarioConfig) -> Result<SimulationOutput> {
    let methods = scenario.methods().map_err(|e| CliError::Usage(e.to_string()))?;
    let report = run_coverage_experiment(scenario, &methods)?;
    let timing = report.methods.iter().map(|m| (m.method.clone(), m.seconds)).collect();
    Ok(SimulationOutput { json: to_json(&report), report, timing })
}

/// Path of the timing sidecar written next to a simulation report.
pub fn timing_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".timing.json");
    PathBuf::from(s)
}

/// Column names used for generated data: `x1..` for means, `y, z1..` otherwise.
pub fn scenario_columns(scenario: &ScenarioConfig) -> Vec<String> {
    let d = scenario.true_theta.len();
    match scenario.estimator {
        EstimatorChoice::Mean => (1..=d).map(|j| format!("x{j}")).collect(),
        _ => std::iter::once("y".to_string()).chain((1..d).map(|j| format!("z{j}"))).collect(),
    }
}

/// Writes simulated dataset `sim` of a scenario as CSV, plus the cluster or
/// stratum table when the design needs one. Returns a matching analysis
/// config.
pub fn generate(scenario: &ScenarioConfig, sim: u64, out: &Path, table: Option<&Path>) -> Result<RunConfig> {
    let data = generate_synthetic(scenario, sim)?;
    let columns = scenario_columns(scenario);
    let table_path = || {
        table.map(Path::to_path_buf).ok_or_else(|| CliError::Usage("this design needs --table".into()))
    };
    let (design, group_labels, table_text) = match data.dataset.design() {
        LabelingDesign::UniformBernoulli { pi } => (DesignSource::Pi { pi: *pi }, Vec::new(), None),
        LabelingDesign::WeightedBernoulli { .. } => (DesignSource::PiColumn { column: "pi".into() }, Vec::new(), None),
        LabelingDesign::Clustered { pi, .. } => {
            let labels: Vec<String> = (0..pi.len()).map(|k| format!("c{k}")).collect();
            let mut t = String::from("cluster,pi\n");
            for (l, p) in labels.iter().zip(pi) {
                t.push_str(&format!("{l},{p:?}\n"));
            }
            (DesignSource::Cluster { column: "cluster".into(), table: table_path()? }, labels, Some(t))
        }
        LabelingDesign::Stratified { stratum_sizes, n_complete, n_incomplete, .. } => {
            let labels: Vec<String> = (0..stratum_sizes.len()).map(|k| format!("s{k}")).collect();
            let mut t = String::from("stratum,size,n_complete,n_incomplete\n");
            for k in 0..labels.len() {
                t.push_str(&format!("{},{:?},{},{}\n", labels[k], stratum_sizes[k], n_complete[k], n_incomplete[k]));
            }
            (DesignSource::Stratum { column: "stratum".into(), table: table_path()? }, labels, Some(t))
        }
    };
    let method = match design {
        DesignSource::Cluster { .. } => ptd::intervals::Method::ClusterBoot,
        DesignSource::Stratum { .. } => ptd::intervals::Method::StratifiedBoot,
        _ => ptd::intervals::Method::FullBoot,
    };
    let cfg = RunConfig {
        data: out.to_path_buf(),
        response: columns[0].clone(),
        covariates: columns[1..].to_vec(),
        proxy_map: columns.iter().map(|c| ProxyPair { truth: c.clone(), proxy: format!("{c}_hat") }).collect(),
        label_col: "labeled".into(),
        design,
        estimator: match scenario.estimator {
            EstimatorChoice::Mean => EstimatorKind::Mean,
            EstimatorChoice::Ols => EstimatorKind::Ols,
            EstimatorChoice::Logistic => EstimatorKind::Logistic,
            EstimatorChoice::Quantile => EstimatorKind::Quantile { q: scenario.q },
        },
        intercept: true,
        method,
        b: scenario.b,
        alpha: scenario.alpha,
        tuning: scenario.tuning.clone(),
        seed: scenario.master_seed,
        out: None,
    };
    let ing = Ingested { dataset: data.dataset, columns, group_labels };
    let mut buf = Vec::new();
    write_csv(&ing, &cfg, &mut buf)?;
    std::fs::write(out, buf).map_err(|e| CliError::io(out, e))?;
    if let (Some(t), Some(p)) = (table_text, table) {
        write_text(p, &t)?;
    }
    Ok(cfg)
}
