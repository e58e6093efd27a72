//! Synthetic scenarios and Monte Carlo experiments: interval coverage and
//! width, naive-estimator bias, and the variance ratio of the debiased mean.

use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::design::{draw_bernoulli_labels, draw_cluster_labels, Dataset, LabelingDesign};
use crate::error::{Error, Result};
use crate::estimators::{fit, sandwich_covariance, EstimatorSpec, FitResult, WeightVector};
use crate::intervals::{
    compute_weights_checked, plugin_covariance_bundle, point_fits, ptd_intervals, single_fit_bootstrap, IntervalConfig,
    Method, TuningStrategy,
};
use crate::linalg::Matrix;
use crate::normal;
use crate::par_map;
use crate::rng::{Stream, StreamRng};
use crate::tuning::{optimal_diag_tuning, ptd_combine};

/// Rows used for the plug-in estimand of scenarios without a closed form.
pub const PLUGIN_ROWS: usize = 1_000_000;

/// Rows per simulated dataset in [`efficiency_ratio_check`].
pub const EFFICIENCY_ROWS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    ErrorInResponse,
    ErrorInCovariate,
    ErrorInBoth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorChoice {
    Mean,
    Ols,
    Logistic,
    Quantile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum DesignConfig {
    Uniform {
        pi: f64,
    },
    /// π = base·(1 + amplitude·tanh(x̃)) on the first proxied covariate.
    Weighted {
        base: f64,
        amplitude: f64,
    },
    /// Clusters of equal size labeled together. The ICCs are the shares of
    /// covariate and residual variance coming from a cluster effect.
    Clustered {
        cluster_size: usize,
        pi: f64,
        #[serde(default)]
        covariate_icc: f64,
        #[serde(default)]
        residual_icc: f64,
    },
    /// Fixed per-stratum sample counts; covariate means differ by `shift`
    /// between adjacent strata. The dataset holds only the sampled rows.
    Stratified {
        stratum_sizes: Vec<f64>,
        n_complete: Vec<usize>,
        n_incomplete: Vec<usize>,
        #[serde(default)]
        shift: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxyNoise {
    #[serde(default)]
    pub bias: f64,
    #[serde(default = "one")]
    pub slope: f64,
    #[serde(default)]
    pub sd: f64,
}

fn one() -> f64 {
    1.0
}

fn default_alpha() -> f64 {
    0.1
}

fn default_tuning() -> String {
    "diag".into()
}

fn default_q() -> f64 {
    0.5
}

/// A coverage (or width) band that a method must land in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Band {
    pub method: String,
    #[serde(default = "coverage_metric")]
    pub metric: String,
    /// Coefficient index; all coefficients when absent.
    #[serde(default)]
    pub coefficient: Option<usize>,
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
}

fn coverage_metric() -> String {
    "coverage".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub regime: Regime,
    pub estimator: EstimatorChoice,
    #[serde(default = "default_q")]
    pub q: f64,
    /// Rows per dataset (ignored by stratified designs, whose size is the
    /// sum of the sample counts).
    pub n: usize,
    /// Means for the mean estimator; (intercept, slopes...) otherwise.
    pub true_theta: Vec<f64>,
    #[serde(default = "one")]
    pub noise_sd: f64,
    /// Adds curvature·z₁² to the response, misspecifying the linear model.
    #[serde(default)]
    pub curvature: f64,
    pub design: DesignConfig,
    pub proxy: ProxyNoise,
    pub n_sims: usize,
    pub b: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_tuning")]
    pub tuning: String,
    pub methods: Vec<String>,
    pub master_seed: u64,
    #[serde(default)]
    pub bands: Vec<Band>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimMethod {
    Ptd(Method),
    Classical,
    Naive,
}

impl SimMethod {
    pub fn name(&self) -> &'static str {
        match self {
            SimMethod::Ptd(m) => m.name(),
            SimMethod::Classical => "classical",
            SimMethod::Naive => "naive",
        }
    }
}

impl FromStr for SimMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classical" => Ok(SimMethod::Classical),
            "naive" => Ok(SimMethod::Naive),
            _ => Ok(SimMethod::Ptd(s.parse()?)),
        }
    }
}

impl ScenarioConfig {
    pub fn spec(&self) -> EstimatorSpec {
        let d = self.true_theta.len();
        let covs: Vec<usize> = (1..d).collect();
        match self.estimator {
            EstimatorChoice::Mean => EstimatorSpec::mean(&(0..d).collect::<Vec<_>>()),
            EstimatorChoice::Ols => EstimatorSpec::ols(0, &covs, true),
            EstimatorChoice::Logistic => EstimatorSpec::logistic(0, &covs, true),
            EstimatorChoice::Quantile => EstimatorSpec::quantile(self.q, 0, &covs, true),
        }
    }

    pub fn methods(&self) -> Result<Vec<SimMethod>> {
        self.methods.iter().map(|m| m.parse()).collect()
    }

    pub fn interval_config(&self, method: Method, master_seed: u64) -> Result<IntervalConfig> {
        Ok(IntervalConfig {
            b: self.b,
            alpha: self.alpha,
            tuning: self.tuning.parse::<TuningStrategy>()?,
            method,
            redraw_limit: None,
            master_seed,
        })
    }

    /// Rows in each generated dataset.
    pub fn rows(&self) -> usize {
        match &self.design {
            DesignConfig::Stratified { n_complete, n_incomplete, .. } => {
                n_complete.iter().sum::<usize>() + n_incomplete.iter().sum::<usize>()
            }
            _ => self.n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let d = self.true_theta.len();
        if d == 0 {
            return bad("true_theta is empty".into());
        }
        if self.estimator != EstimatorChoice::Mean && d < 2 {
            return bad("regressions need an intercept and at least one slope".into());
        }
        if self.rows() < 10 * d {
            return bad(format!("{} rows is too few for {d} coefficients (need 10 per coefficient)", self.rows()));
        }
        if self.n_sims == 0 {
            return bad("n_sims must be positive".into());
        }
        if self.estimator == EstimatorChoice::Quantile && !(self.q > 0.0 && self.q < 1.0) {
            return bad(format!("quantile level {} outside (0, 1)", self.q));
        }
        if !(self.noise_sd >= 0.0) || !(self.proxy.sd >= 0.0) {
            return bad("noise scales must be nonnegative".into());
        }
        if self.estimator == EstimatorChoice::Logistic && self.regime != Regime::ErrorInCovariate && self.proxy.sd > 0.5 {
            return bad("label flip rate (proxy.sd) must be at most 0.5".into());
        }
        match &self.design {
            DesignConfig::Uniform { pi } => check_unit(*pi)?,
            DesignConfig::Weighted { base, amplitude } => {
                check_unit(*base)?;
                if !(amplitude.abs() < 1.0) || base * (1.0 + amplitude.abs()) >= 1.0 {
                    return bad("weighted design probabilities must stay inside (0, 1)".into());
                }
            }
            DesignConfig::Clustered { cluster_size, pi, covariate_icc, residual_icc } => {
                check_unit(*pi)?;
                if *cluster_size == 0 || self.n % cluster_size != 0 {
                    return bad(format!("n = {} is not a multiple of cluster_size = {cluster_size}", self.n));
                }
                for icc in [covariate_icc, residual_icc] {
                    if !(0.0..1.0).contains(icc) {
                        return bad(format!("intra-cluster correlation {icc} outside [0, 1)"));
                    }
                }
            }
            DesignConfig::Stratified { stratum_sizes, n_complete, n_incomplete, .. } => {
                let k = stratum_sizes.len();
                if k == 0 || n_complete.len() != k || n_incomplete.len() != k {
                    return bad("stratum tables must be nonempty and of equal length".into());
                }
                for s in 0..k {
                    if n_complete[s] == 0 || n_incomplete[s] == 0 || (n_complete[s] + n_incomplete[s]) as f64 > stratum_sizes[s] {
                        return bad(format!("stratum {s} counts are inconsistent with its size"));
                    }
                }
            }
        }
        self.methods()?;
        self.tuning.parse::<TuningStrategy>()?;
        self.interval_config(Method::FullBoot, 0)?.validate()?;
        for band in &self.bands {
            if !self.methods.contains(&band.method) {
                return bad(format!("band refers to method '{}' which is not run", band.method));
            }
            if band.metric != "coverage" && band.metric != "mean_width" {
                return bad(format!("unknown band metric '{}'", band.metric));
            }
            if band.coefficient.is_some_and(|c| c >= d) {
                return bad("band coefficient out of range".into());
            }
        }
        Ok(())
    }

    /// Whether `true_theta` is the estimand (correctly specified linear
    /// models and means).
    fn estimand_is_analytic(&self) -> bool {
        match self.estimator {
            EstimatorChoice::Mean => true,
            EstimatorChoice::Ols => self.curvature == 0.0,
            _ => false,
        }
    }
}

fn check_unit(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("probability {p} outside (0, 1)")))
    }
}

/// Truth and proxy rows with group structure, before any labeling.
struct Population {
    truth: Matrix,
    proxy: Matrix,
    /// cluster or stratum id per row (0 when ungrouped)
    group: Vec<usize>,
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

fn draw_population(cfg: &ScenarioConfig, rows: usize, group_of: &[usize], n_groups: usize, rng: &mut StreamRng) -> Population {
    let d = cfg.true_theta.len();
    let (cov_icc, res_icc) = match cfg.design {
        DesignConfig::Clustered { covariate_icc, residual_icc, .. } => (covariate_icc, residual_icc),
        _ => (0.0, 0.0),
    };
    let shift_of = |g: usize| match &cfg.design {
        DesignConfig::Stratified { shift, stratum_sizes, .. } => shift * (g as f64 - (stratum_sizes.len() as f64 - 1.0) / 2.0),
        _ => 0.0,
    };
    // group effects: d covariate/column effects and one residual effect
    let effects: Vec<f64> = (0..n_groups * (d + 1)).map(|_| rng.sample(StandardNormal)).collect();
    let mut truth = Matrix::zeros(rows, d);
    let mut proxy = Matrix::zeros(rows, d);
    let proxied_response = matches!(cfg.regime, Regime::ErrorInResponse | Regime::ErrorInBoth);
    let proxied_covariate = matches!(cfg.regime, Regime::ErrorInCovariate | Regime::ErrorInBoth);
    let noisy = |v: f64, rng: &mut StreamRng| cfg.proxy.bias + cfg.proxy.slope * v + cfg.proxy.sd * rng.sample::<f64, _>(StandardNormal);
    for i in 0..rows {
        let g = group_of[i];
        let eff = &effects[g * (d + 1)..(g + 1) * (d + 1)];
        let mix = |icc: f64, e: f64, rng: &mut StreamRng| icc.sqrt() * e + (1.0 - icc).sqrt() * rng.sample::<f64, _>(StandardNormal);
        match cfg.estimator {
            EstimatorChoice::Mean => {
                for j in 0..d {
                    let x = cfg.true_theta[j] + shift_of(g) + cfg.noise_sd * mix(cov_icc, eff[j], rng);
                    truth[(i, j)] = x;
                    proxy[(i, j)] = noisy(x, rng);
                }
            }
            _ => {
                let mut lin = cfg.true_theta[0];
                for j in 1..d {
                    let z = shift_of(g) + mix(cov_icc, eff[j], rng);
                    truth[(i, j)] = z;
                    lin += cfg.true_theta[j] * z;
                }
                let z1 = truth[(i, 1)];
                lin += cfg.curvature * z1 * z1;
                let y = match cfg.estimator {
                    EstimatorChoice::Ols => lin + cfg.noise_sd * mix(res_icc, eff[d], rng),
                    EstimatorChoice::Quantile => {
                        lin + cfg.noise_sd * (1.0 + 0.5 * z1.abs()) * mix(res_icc, eff[d], rng)
                    }
                    EstimatorChoice::Logistic => {
                        if rng.random::<f64>() < sigmoid(lin) { 1.0 } else { 0.0 }
                    }
                    EstimatorChoice::Mean => unreachable!(),
                };
                truth[(i, 0)] = y;
                proxy.row_mut(i).copy_from_slice(truth.row(i));
                if proxied_response {
                    proxy[(i, 0)] = if cfg.estimator == EstimatorChoice::Logistic {
                        if rng.random::<f64>() < cfg.proxy.sd { 1.0 - y } else { y }
                    } else {
                        noisy(y, rng)
                    };
                }
                if proxied_covariate {
                    proxy[(i, 1)] = noisy(z1, rng);
                }
            }
        }
    }
    Population { truth, proxy, group: group_of.to_vec() }
}

/// A validated scenario with its estimand.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub spec: EstimatorSpec,
    pub estimand: Vec<f64>,
}

pub struct SyntheticData {
    pub dataset: Dataset,
    pub estimand: Vec<f64>,
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.spec();
        let estimand = if config.estimand_is_analytic() {
            config.true_theta.clone()
        } else {
            plugin_estimand(&config, &spec)?
        };
        Ok(Self { config, spec, estimand })
    }

    pub fn generate(&self, sim_index: u64) -> Result<SyntheticData> {
        let mut rng = Stream::new(self.config.master_seed).lane("sim").derive(sim_index).lane("data").rng();
        let dataset = generate_dataset(&self.config, &mut rng)?;
        Ok(SyntheticData { dataset, estimand: self.estimand.clone() })
    }
}

/// Population fit on [`PLUGIN_ROWS`] fully observed generated rows.
fn plugin_estimand(cfg: &ScenarioConfig, spec: &EstimatorSpec) -> Result<Vec<f64>> {
    let mut rng = Stream::new(cfg.master_seed).lane("estimand").rng();
    let (group_of, n_groups) = population_groups(cfg, PLUGIN_ROWS, &mut rng);
    let pop = draw_population(cfg, PLUGIN_ROWS, &group_of, n_groups, &mut rng);
    // strata were drawn proportionally to their sizes, so unit weights
    let w = WeightVector::ones(PLUGIN_ROWS);
    Ok(fit(spec, &pop.truth, &w)?.theta)
}

/// Group ids for a population draw of `rows` rows.
fn population_groups(cfg: &ScenarioConfig, rows: usize, rng: &mut StreamRng) -> (Vec<usize>, usize) {
    match &cfg.design {
        DesignConfig::Clustered { cluster_size, .. } => {
            let k = rows.div_ceil(*cluster_size);
            ((0..rows).map(|i| i / cluster_size).collect(), k)
        }
        DesignConfig::Stratified { stratum_sizes, .. } => {
            let total: f64 = stratum_sizes.iter().sum();
            let ids = (0..rows)
                .map(|_| {
                    let mut u = rng.random::<f64>() * total;
                    for (k, s) in stratum_sizes.iter().enumerate() {
                        if u < *s {
                            return k;
                        }
                        u -= s;
                    }
                    stratum_sizes.len() - 1
                })
                .collect();
            (ids, stratum_sizes.len())
        }
        _ => (vec![0; rows], 1),
    }
}

fn generate_dataset(cfg: &ScenarioConfig, rng: &mut StreamRng) -> Result<Dataset> {
    let rows = cfg.rows();
    let (group_of, n_groups) = match &cfg.design {
        DesignConfig::Stratified { n_complete, n_incomplete, .. } => {
            let mut ids = Vec::with_capacity(rows);
            for k in 0..n_complete.len() {
                ids.extend(std::iter::repeat_n(k, n_complete[k] + n_incomplete[k]));
            }
            (ids, n_complete.len())
        }
        _ => population_groups(cfg, rows, rng),
    };
    let pop = draw_population(cfg, rows, &group_of, n_groups, rng);
    let (labeled, design) = match &cfg.design {
        DesignConfig::Uniform { pi } => {
            (draw_bernoulli_labels(&vec![*pi; rows], rng), LabelingDesign::UniformBernoulli { pi: *pi })
        }
        DesignConfig::Weighted { base, amplitude } => {
            let col = if cfg.estimator == EstimatorChoice::Mean { 0 } else { 1 };
            let pi: Vec<f64> = (0..rows).map(|i| base * (1.0 + amplitude * pop.proxy[(i, col)].tanh())).collect();
            (draw_bernoulli_labels(&pi, rng), LabelingDesign::WeightedBernoulli { pi })
        }
        DesignConfig::Clustered { pi, .. } => {
            let pis = vec![*pi; n_groups];
            let labels = draw_cluster_labels(&pop.group, &pis, rng);
            (labels, LabelingDesign::Clustered { cluster_of: pop.group.clone(), pi: pis })
        }
        DesignConfig::Stratified { stratum_sizes, n_complete, n_incomplete, .. } => {
            let mut labels = Vec::with_capacity(rows);
            for k in 0..n_complete.len() {
                labels.extend(std::iter::repeat_n(true, n_complete[k]));
                labels.extend(std::iter::repeat_n(false, n_incomplete[k]));
            }
            let design = LabelingDesign::Stratified {
                stratum_of: pop.group.clone(),
                stratum_sizes: stratum_sizes.clone(),
                n_complete: n_complete.clone(),
                n_incomplete: n_incomplete.clone(),
            };
            (labels, design)
        }
    };
    if !labeled.iter().any(|&l| l) {
        return Err(Error::InsufficientData { rows: 0, dim: cfg.true_theta.len() });
    }
    Dataset::new(pop.proxy, pop.truth, labeled, design)
}

/// One simulated dataset of the scenario described by `cfg`.
pub fn generate_synthetic(cfg: &ScenarioConfig, sim_index: u64) -> Result<SyntheticData> {
    Scenario::new(cfg.clone())?.generate(sim_index)
}

/// Point estimate with its interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub fit: FitResult,
    pub intervals: Vec<(f64, f64)>,
}

fn normal_intervals(theta: &[f64], var: &Matrix, alpha: f64) -> Vec<(f64, f64)> {
    let z = normal::inverse_cdf(1.0 - alpha / 2.0);
    theta
        .iter()
        .enumerate()
        .map(|(j, t)| {
            let h = z * var[(j, j)].max(0.0).sqrt();
            (t - h, t + h)
        })
        .collect()
}

fn fit_with_interval(spec: &EstimatorSpec, data: &Matrix, w: &WeightVector, cfg: &IntervalConfig) -> Result<Estimate> {
    let fit = fit(spec, data, w)?;
    let intervals = if spec.kind.is_smooth() {
        normal_intervals(&fit.theta, &sandwich_covariance(spec, data, w, &fit.theta)?, cfg.alpha)
    } else {
        single_fit_bootstrap(spec, data, w, cfg)?
    };
    Ok(Estimate { fit, intervals })
}

/// The weighted fit on the complete sample alone, with a sandwich interval
/// (percentile bootstrap for quantile regression).
pub fn classical_estimate(ds: &Dataset, spec: &EstimatorSpec, cfg: &IntervalConfig) -> Result<Estimate> {
    let w = compute_weights_checked(ds, spec)?;
    fit_with_interval(spec, ds.truth(), &w.w_complete, cfg)
}

/// Unweighted fit on every row, treating proxies as truth where the truth is
/// missing.
pub fn naive_estimate(ds: &Dataset, spec: &EstimatorSpec) -> Result<FitResult> {
    fit(spec, &ds.imputed(), &WeightVector::ones(ds.n_rows()))
}

/// [`naive_estimate`] with a sandwich interval that ignores the imputation.
pub fn naive_interval(ds: &Dataset, spec: &EstimatorSpec, cfg: &IntervalConfig) -> Result<Estimate> {
    fit_with_interval(spec, &ds.imputed(), &WeightVector::ones(ds.n_rows()), cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodReport {
    pub method: String,
    pub successes: usize,
    pub failures: usize,
    pub coverage: Vec<f64>,
    pub mean_width: Vec<f64>,
    pub width_sd: Vec<f64>,
    pub bias: Vec<f64>,
    /// Summed wall-clock seconds; kept out of serialized reports so they
    /// stay reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandResult {
    pub method: String,
    pub metric: String,
    pub coefficient: Option<usize>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub values: Vec<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub scenario: String,
    pub n_sims: usize,
    pub rows: usize,
    pub coefficients: Vec<String>,
    pub estimand: Vec<f64>,
    pub methods: Vec<MethodReport>,
    pub bands: Vec<BandResult>,
}

impl CoverageReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn all_bands_pass(&self) -> bool {
        self.bands.iter().all(|b| b.pass)
    }
}

/// Outcome of one method on one simulated dataset.
struct SimOutcome {
    point: Vec<f64>,
    intervals: Vec<(f64, f64)>,
    seconds: f64,
}

fn run_method(scn: &Scenario, ds: &Dataset, method: SimMethod, seed: u64) -> Result<SimOutcome> {
    let start = Instant::now();
    let cfg = scn.config.interval_config(match method {
        SimMethod::Ptd(m) => m,
        _ => Method::FullBoot,
    }, seed)?;
    let (point, intervals) = match method {
        SimMethod::Ptd(_) => {
            let r = ptd_intervals(ds, &scn.spec, &cfg)?;
            (r.point, r.intervals)
        }
        SimMethod::Classical => {
            let e = classical_estimate(ds, &scn.spec, &cfg)?;
            (e.fit.theta, e.intervals)
        }
        SimMethod::Naive => {
            let e = naive_interval(ds, &scn.spec, &cfg)?;
            (e.fit.theta, e.intervals)
        }
    };
    Ok(SimOutcome { point, intervals, seconds: start.elapsed().as_secs_f64() })
}

/// Runs every method on `n_sims` independent datasets and summarizes
/// coverage of the estimand, interval widths and bias. Failed runs are
/// counted and excluded from the summaries.
pub fn run_coverage_experiment(cfg: &ScenarioConfig, methods: &[SimMethod]) -> Result<CoverageReport> {
    let scn = Scenario::new(cfg.clone())?;
    let d = scn.spec.dim();
    let sims = par_map(cfg.n_sims, |s| -> Result<Vec<Option<SimOutcome>>> {
        let data = scn.generate(s as u64)?;
        let seed_stream = Stream::new(cfg.master_seed).lane("sim").derive(s as u64).lane("interval");
        Ok(methods
            .iter()
            .enumerate()
            .map(|(k, &m)| match run_method(&scn, &data.dataset, m, seed_stream.derive(k as u64).key()) {
                Ok(o) => Some(o),
                Err(e) if e.is_numerical() || matches!(e, Error::InsufficientData { .. }) => None,
                Err(e) => panic!("{}: {e}", m.name()),
            })
            .collect())
    });
    let sims: Vec<Vec<Option<SimOutcome>>> = sims.into_iter().collect::<Result<_>>()?;
    let mut reports = Vec::with_capacity(methods.len());
    for (k, m) in methods.iter().enumerate() {
        let ok: Vec<&SimOutcome> = sims.iter().filter_map(|s| s[k].as_ref()).collect();
        let cnt = ok.len().max(1) as f64;
        let mut coverage = vec![0.0; d];
        let mut mean_width = vec![0.0; d];
        let mut width_sq = vec![0.0; d];
        let mut bias = vec![0.0; d];
        for o in &ok {
            for j in 0..d {
                let (lo, hi) = o.intervals[j];
                if lo <= scn.estimand[j] && scn.estimand[j] <= hi {
                    coverage[j] += 1.0;
                }
                mean_width[j] += hi - lo;
                width_sq[j] += (hi - lo) * (hi - lo);
                bias[j] += o.point[j] - scn.estimand[j];
            }
        }
        let width_sd = (0..d)
            .map(|j| {
                let m = mean_width[j] / cnt;
                let var = if ok.len() > 1 { (width_sq[j] - cnt * m * m) / (cnt - 1.0) } else { 0.0 };
                var.max(0.0).sqrt()
            })
            .collect();
        reports.push(MethodReport {
            method: m.name().to_string(),
            successes: ok.len(),
            failures: cfg.n_sims - ok.len(),
            coverage: coverage.iter().map(|c| c / cnt).collect(),
            mean_width: mean_width.iter().map(|w| w / cnt).collect(),
            width_sd,
            bias: bias.iter().map(|b| b / cnt).collect(),
            seconds: ok.iter().map(|o| o.seconds).sum(),
        });
    }
    let bands = cfg
        .bands
        .iter()
        .map(|band| {
            let rep = reports.iter().find(|r| r.method == band.method).expect("validated band method");
            let source = if band.metric == "coverage" { &rep.coverage } else { &rep.mean_width };
            let values: Vec<f64> = match band.coefficient {
                Some(j) => vec![source[j]],
                None => source.clone(),
            };
            let pass = rep.successes > 0
                && values.iter().all(|v| band.min.is_none_or(|lo| *v >= lo) && band.max.is_none_or(|hi| *v <= hi));
            BandResult {
                method: band.method.clone(),
                metric: band.metric.clone(),
                coefficient: band.coefficient,
                min: band.min,
                max: band.max,
                values,
                pass,
            }
        })
        .collect();
    Ok(CoverageReport {
        scenario: cfg.name.clone(),
        n_sims: cfg.n_sims,
        rows: cfg.rows(),
        coefficients: scn.spec.coefficient_names(&default_names(cfg)),
        estimand: scn.estimand.clone(),
        methods: reports,
        bands,
    })
}

fn default_names(cfg: &ScenarioConfig) -> Vec<String> {
    let d = cfg.true_theta.len();
    match cfg.estimator {
        EstimatorChoice::Mean => (0..d).map(|j| format!("x{}", j + 1)).collect(),
        _ => std::iter::once("y".to_string()).chain((1..d).map(|j| format!("z{j}"))).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyReport {
    pub pi_l: f64,
    pub rho: f64,
    pub n_sims: usize,
    pub rows: usize,
    pub measured: f64,
    pub predicted: f64,
}

/// Mean estimation with a standard normal X and proxy X̃ of correlation
/// `rho`, labeled uniformly with probability `pi_l`. Compares the Monte Carlo
/// variance of the optimally tuned debiased mean with that of the
/// complete-sample mean against the prediction 1 − (1 − π)·ρ².
pub fn efficiency_ratio_check(pi_l: f64, rho: f64, n_sims: usize, master_seed: u64) -> Result<EfficiencyReport> {
    check_unit(pi_l)?;
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::InvalidConfig(format!("correlation {rho} outside [-1, 1]")));
    }
    if n_sims < 2 {
        return Err(Error::TooFewDraws(n_sims));
    }
    let n = EFFICIENCY_ROWS;
    let spec = EstimatorSpec::mean(&[0]);
    let base = Stream::new(master_seed).lane("efficiency");
    let pairs = par_map(n_sims, |s| -> Result<(f64, f64)> {
        let mut rng = base.derive(s as u64).rng();
        let mut truth = Matrix::zeros(n, 1);
        let mut proxy = Matrix::zeros(n, 1);
        for i in 0..n {
            let x: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            truth[(i, 0)] = x;
            proxy[(i, 0)] = rho * x + (1.0 - rho * rho).sqrt() * e;
        }
        let labels = draw_bernoulli_labels(&vec![pi_l; n], &mut rng);
        let ds = Dataset::new(proxy, truth, labels, LabelingDesign::UniformBernoulli { pi: pi_l })?;
        let w = compute_weights_checked(&ds, &spec)?;
        let fits = point_fits(&ds, &spec, &w)?;
        let omega = optimal_diag_tuning(&plugin_covariance_bundle(&ds, &spec)?)?;
        let ptd = ptd_combine(&omega, &fits.gamma_o, &fits.theta_c, &fits.gamma_c)?;
        Ok((fits.theta_c[0], ptd[0]))
    });
    let pairs: Vec<(f64, f64)> = pairs.into_iter().collect::<Result<_>>()?;
    let var = |f: &dyn Fn(&(f64, f64)) -> f64| {
        let m = pairs.iter().map(f).sum::<f64>() / n_sims as f64;
        pairs.iter().map(|p| (f(p) - m).powi(2)).sum::<f64>() / (n_sims - 1) as f64
    };
    let classical = var(&|p| p.0);
    let debiased = var(&|p| p.1);
    Ok(EfficiencyReport {
        pi_l,
        rho,
        n_sims,
        rows: n,
        measured: debiased / classical,
        predicted: 1.0 - (1.0 - pi_l) * rho * rho,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config() -> ScenarioConfig {
        ScenarioConfig {
            name: "test".into(),
            regime: Regime::ErrorInCovariate,
            estimator: EstimatorChoice::Ols,
            q: 0.5,
            n: 400,
            true_theta: vec![1.0, 2.0],
            noise_sd: 1.0,
            curvature: 0.0,
            design: DesignConfig::Uniform { pi: 0.3 },
            proxy: ProxyNoise { bias: 0.2, slope: 1.1, sd: 0.5 },
            n_sims: 4,
            b: 50,
            alpha: 0.1,
            tuning: "diag".into(),
            methods: vec!["full-boot".into(), "classical".into(), "naive".into()],
            master_seed: 3,
            bands: vec![],
        }
    }

    #[test]
    fn zero_proxy_noise_copies_truth() {
        let mut cfg = base_config();
        cfg.proxy = ProxyNoise { bias: 0.0, slope: 1.0, sd: 0.0 };
        cfg.regime = Regime::ErrorInBoth;
        let data = generate_synthetic(&cfg, 0).unwrap();
        assert_eq!(&data.dataset.imputed(), data.dataset.proxy());
    }

    #[test]
    fn near_one_labeling_labels_almost_everything() {
        let mut cfg = base_config();
        cfg.design = DesignConfig::Uniform { pi: 0.999 };
        cfg.n = 5000;
        let data = generate_synthetic(&cfg, 1).unwrap();
        assert!(data.dataset.n_labeled() as f64 / 5000.0 > 0.99);
    }

    #[test]
    fn generation_is_reproducible() {
        let cfg = base_config();
        let a = generate_synthetic(&cfg, 2).unwrap();
        let b = generate_synthetic(&cfg, 2).unwrap();
        // NaN sentinels defeat ==, so compare renderings
        assert_eq!(format!("{:?}", a.dataset), format!("{:?}", b.dataset));
        let c = generate_synthetic(&cfg, 3).unwrap();
        assert_ne!(format!("{:?}", a.dataset), format!("{:?}", c.dataset));
    }

    #[test]
    fn classical_ignores_proxies_and_naive_uses_them() {
        let cfg = base_config();
        let ds = generate_synthetic(&cfg, 0).unwrap().dataset;
        let spec = cfg.spec();
        let icfg = cfg.interval_config(Method::FullBoot, 0).unwrap();
        let a = classical_estimate(&ds, &spec, &icfg).unwrap();
        let mut scrambled = ds.proxy().clone();
        for i in 0..scrambled.rows() {
            scrambled[(i, 1)] = -3.0 * scrambled[(i, 1)] + 1.0;
        }
        let ds2 = Dataset::new(scrambled, ds.imputed(), ds.labeled().to_vec(), ds.design().clone()).unwrap();
        assert_eq!(classical_estimate(&ds2, &spec, &icfg).unwrap(), a);
        assert_ne!(naive_estimate(&ds2, &spec).unwrap(), naive_estimate(&ds, &spec).unwrap());
    }

    #[test]
    fn all_labeled_classical_is_unweighted_fit() {
        let mut truth = Matrix::zeros(50, 2);
        for i in 0..50 {
            truth.row_mut(i).copy_from_slice(&[(i as f64).sin(), (i as f64 * 0.3).cos()]);
        }
        let ds = Dataset::new(truth.clone(), truth.clone(), vec![true; 50], LabelingDesign::UniformBernoulli { pi: 0.5 }).unwrap();
        let spec = EstimatorSpec::ols(0, &[1], true);
        let got = classical_estimate(&ds, &spec, &IntervalConfig::default()).unwrap().fit.theta;
        let want = fit(&spec, &truth, &WeightVector::ones(50)).unwrap().theta;
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
        assert_eq!(naive_estimate(&ds, &spec).unwrap().theta, want);
    }

    #[test]
    fn coverage_report_is_reproducible() {
        let cfg = base_config();
        let methods = cfg.methods().unwrap();
        let a = run_coverage_experiment(&cfg, &methods).unwrap();
        let b = run_coverage_experiment(&cfg, &methods).unwrap();
        assert_eq!(serde_json::to_string(&a).ok(), serde_json::to_string(&b).ok());
        assert_eq!(a.methods.len(), 3);
        for m in &a.methods {
            assert!(m.coverage.iter().all(|c| (0.0..=1.0).contains(c)));
            assert!(m.mean_width.iter().all(|w| *w >= 0.0));
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = base_config();
        cfg.n = 15;
        assert!(cfg.validate().is_err());
        let mut cfg = base_config();
        cfg.methods.push("bogus".into());
        assert!(cfg.validate().is_err());
        let mut cfg = base_config();
        cfg.design = DesignConfig::Clustered { cluster_size: 7, pi: 0.2, covariate_icc: 0.0, residual_icc: 0.0 };
        assert!(cfg.validate().is_err());
        let mut cfg = base_config();
        cfg.bands.push(Band { method: "clt".into(), metric: "coverage".into(), coefficient: None, min: Some(0.8), max: None });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn efficiency_prediction_and_monotonicity() {
        let near_full = efficiency_ratio_check(0.99, 0.7, 2, 0).unwrap().predicted;
        assert!((near_full - (1.0 - 0.01 * 0.49)).abs() < 1e-15);
        let ratios: Vec<f64> =
            [0.0, 0.4, 0.8].iter().map(|&r| efficiency_ratio_check(0.2, r, 1500, 1).unwrap().measured).collect();
        assert!(ratios[0] > ratios[1] - 0.05 && ratios[1] > ratios[2] - 0.05, "{ratios:?}");
        assert!((ratios[2] - 0.488).abs() < 0.1, "{ratios:?}");
    }

    #[test]
    fn scenario_config_parses_from_json() {
        let text = r#"{"name":"s","regime":"error-in-response","estimator":"mean","n":200,"true_theta":[0.5],
            "design":{"type":"weighted","base":0.2,"amplitude":0.5},"proxy":{"sd":0.3},"n_sims":2,"b":20,
            "methods":["conv-boot"],"master_seed":1}"#;
        let cfg: ScenarioConfig = serde_json::from_str(text).unwrap();
        assert_eq!(cfg.proxy.slope, 1.0);
        assert!(cfg.validate().is_ok());
    }
}
