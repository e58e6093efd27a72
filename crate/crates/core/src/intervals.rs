//! Confidence intervals for the debiased estimator: percentile bootstraps
//! (full, convolution, cluster, stratified) and normal-approximation
//! intervals from plug-in covariances.
//!
//! Replicate `b` draws only from the stream `derive(master_seed, b)`, and
//! replicates are gathered in index order, so results do not depend on how
//! the work is scheduled across threads.

use std::str::FromStr;

use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::design::{compute_weights, resample_clusters, resample_iid, Dataset, LabelingDesign, StrataIndex, WeightPair};
use crate::error::{Error, Result};
use crate::estimators::{
    cluster_sandwich_covariance, cross_covariance_mest, fit, fit_rows, sandwich_covariance, EstimatorSpec, WeightVector,
    WeightedRows,
};
use crate::linalg::{cholesky, quantile_of_sorted, sample_covariance, sample_cross_covariance, Matrix};
use crate::normal;
use crate::par_map;
use crate::rng::{Stream, StreamRng};
use crate::tuning::{optimal_diag_tuning, optimal_full_tuning_ridged, ptd_asymptotic_variance, ptd_combine, CovarianceBundle, TuningMatrix};

/// Replicates used to estimate Var(γ̂°) by bootstrap when no sandwich is
/// available (quantile regression).
pub const INNER_BOOTSTRAP_REPLICATES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    FullBoot,
    ConvBoot,
    Clt,
    ClusterBoot,
    ClusterConvBoot,
    StratifiedBoot,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::FullBoot, Method::ConvBoot, Method::Clt, Method::ClusterBoot, Method::ClusterConvBoot, Method::StratifiedBoot];

    pub fn name(&self) -> &'static str {
        match self {
            Method::FullBoot => "full-boot",
            Method::ConvBoot => "conv-boot",
            Method::Clt => "clt",
            Method::ClusterBoot => "cluster-boot",
            Method::ClusterConvBoot => "cluster-conv-boot",
            Method::StratifiedBoot => "stratified-boot",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TuningStrategy {
    Identity,
    OptDiag,
    OptFull,
    /// A caller-supplied Ω.
    Fixed(TuningMatrix),
}

impl TuningStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            TuningStrategy::Identity => "identity",
            TuningStrategy::OptDiag => "diag",
            TuningStrategy::OptFull => "full",
            TuningStrategy::Fixed(_) => "fixed",
        }
    }
}

impl FromStr for TuningStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(TuningStrategy::Identity),
            "diag" | "opt-diag" => Ok(TuningStrategy::OptDiag),
            "full" | "opt-full" => Ok(TuningStrategy::OptFull),
            _ => Err(Error::InvalidConfig(format!("unknown tuning strategy '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalConfig {
    pub b: usize,
    pub alpha: f64,
    pub tuning: TuningStrategy,
    pub method: Method,
    /// Total replicate redraws allowed; `None` means 10·B.
    pub redraw_limit: Option<usize>,
    pub master_seed: u64,
}

impl Default for IntervalConfig {
    fn default() -> Self {
        Self { b: 2000, alpha: 0.1, tuning: TuningStrategy::OptDiag, method: Method::FullBoot, redraw_limit: None, master_seed: 0 }
    }
}

impl IntervalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b < 2 {
            return Err(Error::InvalidConfig(format!("B must be at least 2, got {}", self.b)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        Ok(())
    }

    pub fn redraw_limit(&self) -> usize {
        self.redraw_limit.unwrap_or(10 * self.b)
    }
}

/// Per-replicate estimates, one row per replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapDraws {
    pub theta_c: Matrix,
    pub gamma_c: Matrix,
    /// Absent when γ̂° is drawn from its normal approximation.
    pub gamma_o: Option<Matrix>,
    pub replicate_seeds: Vec<u64>,
    pub redraws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub replicates: usize,
    pub redraws: usize,
    pub converged: bool,
    pub ridge_added: bool,
    pub inner_bootstrap: bool,
    pub n_rows: usize,
    pub n_labeled: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PTDResult {
    pub point: Vec<f64>,
    pub intervals: Vec<(f64, f64)>,
    pub tuning: TuningMatrix,
    pub method: Method,
    pub alpha: f64,
    pub diagnostics: Diagnostics,
    #[serde(skip)]
    pub draws: Option<BootstrapDraws>,
    /// Debiased estimate per replicate (B×d).
    #[serde(skip)]
    pub ptd_draws: Option<Matrix>,
}

/// θ̂•, γ̂•, γ̂° on the original data.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFits {
    pub theta_c: Vec<f64>,
    pub gamma_c: Vec<f64>,
    pub gamma_o: Vec<f64>,
    pub converged: bool,
}

pub fn point_fits(ds: &Dataset, spec: &EstimatorSpec, w: &WeightPair) -> Result<PointFits> {
    let t = fit(spec, ds.truth(), &w.w_complete)?;
    let gc = fit(spec, ds.proxy(), &w.w_complete)?;
    let go = fit(spec, ds.proxy(), &w.w_incomplete)?;
    Ok(PointFits {
        converged: t.converged && gc.converged && go.converged,
        theta_c: t.theta,
        gamma_c: gc.theta,
        gamma_o: go.theta,
    })
}

/// [`compute_weights`] after checking the estimator fits the data.
pub fn compute_weights_checked(ds: &Dataset, spec: &EstimatorSpec) -> Result<WeightPair> {
    spec.validate(ds.truth().cols())?;
    compute_weights(ds)
}

/// Dispatches on `cfg.method`.
pub fn ptd_intervals(ds: &Dataset, spec: &EstimatorSpec, cfg: &IntervalConfig) -> Result<PTDResult> {
    match cfg.method {
        Method::FullBoot => full_percentile_bootstrap(ds, spec, cfg),
        Method::ConvBoot => convolution_bootstrap(ds, spec, cfg),
        Method::Clt => {
            let cov = plugin_covariance_bundle(ds, spec)?;
            clt_intervals(ds, spec, cfg, &cov)
        }
        Method::ClusterBoot | Method::ClusterConvBoot => cluster_bootstrap(ds, spec, cfg),
        Method::StratifiedBoot => stratified_bootstrap(ds, spec, cfg),
    }
}

fn check_common(ds: &Dataset, spec: &EstimatorSpec, cfg: &IntervalConfig) -> Result<()> {
    cfg.validate()?;
    spec.validate(ds.truth().cols())?;
    if let TuningStrategy::Fixed(t) = &cfg.tuning {
        t.check_dim(spec.dim())?;
    }
    Ok(())
}

/// Failures that a fresh resample can cure.
fn is_degenerate_resample(e: &Error) -> bool {
    matches!(e, Error::RankDeficient | Error::InsufficientData { .. } | Error::NoConvergence { .. })
}

struct ReplicateOut {
    theta_c: Vec<f64>,
    gamma_c: Vec<f64>,
    /// either a refit γ°(b) or a standard normal vector Z(b)
    third: Vec<f64>,
}

/// Runs B replicates in parallel, redrawing failed ones from derived streams.
fn run_replicates<F>(cfg: &IntervalConfig, lane: &str, d: usize, third_is_fit: bool, f: F) -> Result<(BootstrapDraws, Matrix)>
where
    F: Fn(&mut StreamRng) -> Result<ReplicateOut> + Sync,
{
    let base = Stream::new(cfg.master_seed).lane(lane);
    let limit = cfg.redraw_limit();
    let results = par_map(cfg.b, |b| {
        let first = base.derive(b as u64);
        let mut attempt = 0usize;
        loop {
            let s = if attempt == 0 { first } else { first.lane("redraw").derive(attempt as u64) };
            match f(&mut s.rng()) {
                Ok(out) => return Ok((out, s.key(), attempt)),
                Err(e) if is_degenerate_resample(&e) => {
                    if attempt >= limit {
                        return Err(Error::TooManyRedraws { limit });
                    }
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    });
    let b = cfg.b;
    let mut theta = Matrix::zeros(b, d);
    let mut gamma = Matrix::zeros(b, d);
    let mut third = Matrix::zeros(b, d);
    let mut seeds = Vec::with_capacity(b);
    let mut redraws = 0usize;
    for (i, r) in results.into_iter().enumerate() {
        let (out, key, attempts) = r?;
        theta.row_mut(i).copy_from_slice(&out.theta_c);
        gamma.row_mut(i).copy_from_slice(&out.gamma_c);
        third.row_mut(i).copy_from_slice(&out.third);
        seeds.push(key);
        redraws += attempts;
    }
    if redraws > limit {
        return Err(Error::TooManyRedraws { limit });
    }
    let draws = BootstrapDraws {
        theta_c: theta,
        gamma_c: gamma,
        gamma_o: if third_is_fit { Some(third.clone()) } else { None },
        replicate_seeds: seeds,
        redraws,
    };
    Ok((draws, third))
}

/// Row multiplicities folded into weights: row i drawn c times gets c·w_i.
fn rows_from_counts(counts: &[u32], w: &[f64]) -> WeightedRows {
    let mut out = WeightedRows::default();
    for (i, (&c, &wi)) in counts.iter().zip(w).enumerate() {
        if c > 0 {
            out.push(i, c as f64 * wi);
        }
    }
    out
}

/// Same as [`rows_from_counts`] for a sorted index list.
fn rows_from_sorted(idx: &[usize], w: &[f64]) -> WeightedRows {
    let mut out = WeightedRows::default();
    let mut k = 0;
    while k < idx.len() {
        let i = idx[k];
        let mut c = 0;
        while k < idx.len() && idx[k] == i {
            c += 1;
            k += 1;
        }
        out.push(i, c as f64 * w[i]);
    }
    out
}

fn counts_of(idx: &[usize], n: usize) -> Vec<u32> {
    let mut counts = vec![0u32; n];
    for &i in idx {
        counts[i] += 1;
    }
    counts
}

/// Three refits on a resample given as per-row counts.
fn refit_all(ds: &Dataset, spec: &EstimatorSpec, w: &WeightPair, counts: &[u32]) -> Result<ReplicateOut> {
    let rows_c = rows_from_counts(counts, w.w_complete.as_slice());
    let rows_o = rows_from_counts(counts, w.w_incomplete.as_slice());
    Ok(ReplicateOut {
        theta_c: fit_rows(spec, ds.truth(), &rows_c)?.theta,
        gamma_c: fit_rows(spec, ds.proxy(), &rows_c)?.theta,
        third: fit_rows(spec, ds.proxy(), &rows_o)?.theta,
    })
}

fn refit_complete(ds: &Dataset, spec: &EstimatorSpec, rows: &WeightedRows, z: Vec<f64>) -> Result<ReplicateOut> {
    Ok(ReplicateOut {
        theta_c: fit_rows(spec, ds.truth(), rows)?.theta,
        gamma_c: fit_rows(spec, ds.proxy(), rows)?.theta,
        third: z,
    })
}

fn standard_normals(d: usize, rng: &mut StreamRng) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Covariances of the replicate draws scaled by `n`. With an override,
/// `n·override` stands in for the γ° block.
fn draws_bundle(draws: &BootstrapDraws, n: usize, sigma_gamma_o_override: Option<&Matrix>) -> Result<CovarianceBundle> {
    let nf = n as f64;
    let gamma_o = match (sigma_gamma_o_override, &draws.gamma_o) {
        (Some(s), _) => s.clone(),
        (None, Some(g)) => sample_covariance(g)?,
        (None, None) => return Err(Error::InvalidConfig("no γ° draws and no covariance override".into())),
    };
    Ok(CovarianceBundle {
        sigma_theta_c: sample_covariance(&draws.theta_c)?.scale(nf),
        sigma_gamma_c: sample_covariance(&draws.gamma_c)?.scale(nf),
        sigma_gamma_o: gamma_o.scale(nf),
        sigma_cross: sample_cross_covariance(&draws.theta_c, &draws.gamma_c)?.scale(nf),
    })
}

fn tuning_from_bundle(cov: &CovarianceBundle, strategy: &TuningStrategy) -> Result<(TuningMatrix, bool)> {
    match strategy {
        TuningStrategy::Identity => Ok((TuningMatrix::Identity, false)),
        TuningStrategy::Fixed(t) => Ok((t.clone(), false)),
        TuningStrategy::OptDiag => Ok((optimal_diag_tuning(cov)?, false)),
        TuningStrategy::OptFull => optimal_full_tuning_ridged(cov),
    }
}

/// Ω̂ from bootstrap draws. `n` is the number of rows the estimates were
/// computed from; it cancels from Ω̂ but keeps the bundle on the asymptotic
/// scale. The override is Var(γ̂°) for convolution mode. Returns whether a
/// ridge was needed.
pub fn select_tuning(
    draws: &BootstrapDraws,
    n: usize,
    sigma_gamma_o_override: Option<&Matrix>,
    strategy: &TuningStrategy,
) -> Result<(TuningMatrix, bool)> {
    match strategy {
        TuningStrategy::Identity | TuningStrategy::Fixed(_) => tuning_from_bundle(&CovarianceBundle {
            sigma_theta_c: Matrix::zeros(0, 0),
            sigma_gamma_c: Matrix::zeros(0, 0),
            sigma_gamma_o: Matrix::zeros(0, 0),
            sigma_cross: Matrix::zeros(0, 0),
        }, strategy),
        _ => tuning_from_bundle(&draws_bundle(draws, n, sigma_gamma_o_override)?, strategy),
    }
}

/// Nearest-rank (α/2, 1−α/2) percentiles of each column.
fn percentile_intervals(draws: &Matrix, alpha: f64) -> Vec<(f64, f64)> {
    (0..draws.cols())
        .map(|j| {
            let mut col = draws.column(j);
            col.sort_by(f64::total_cmp);
            (quantile_of_sorted(&col, alpha / 2.0), quantile_of_sorted(&col, 1.0 - alpha / 2.0))
        })
        .collect()
}

/// Debiased replicate estimates. `gamma_o_rows` row b is either γ°(b) or,
/// when `center_chol` is given as (γ̂°, L), the normal draw γ̂° + L Z(b).
fn combine_draws(
    omega: &TuningMatrix,
    draws: &BootstrapDraws,
    third: &Matrix,
    center_chol: Option<(&[f64], &Matrix)>,
) -> Result<Matrix> {
    let (b, d) = (draws.theta_c.rows(), draws.theta_c.cols());
    let mut out = Matrix::zeros(b, d);
    for i in 0..b {
        let go = match center_chol {
            Some((center, l)) => l.mul_vec(third.row(i))?.iter().zip(center).map(|(a, c)| a + c).collect(),
            None => third.row(i).to_vec(),
        };
        let v = ptd_combine(omega, &go, draws.theta_c.row(i), draws.gamma_c.row(i))?;
        out.row_mut(i).copy_from_slice(&v);
    }
    Ok(out)
}

fn finish(
    ds: &Dataset,
    cfg: &IntervalConfig,
    fits: &PointFits,
    omega: TuningMatrix,
    draws: BootstrapDraws,
    ptd: Matrix,
    ridge_added: bool,
    inner_bootstrap: bool,
) -> Result<PTDResult> {
    let point = ptd_combine(&omega, &fits.gamma_o, &fits.theta_c, &fits.gamma_c)?;
    if !ptd.is_finite() {
        return Err(Error::NoConvergence { iterations: 0 });
    }
    Ok(PTDResult {
        intervals: percentile_intervals(&ptd, cfg.alpha),
        point,
        tuning: omega,
        method: cfg.method,
        alpha: cfg.alpha,
        diagnostics: Diagnostics {
            replicates: cfg.b,
            redraws: draws.redraws,
            converged: fits.converged,
            ridge_added,
            inner_bootstrap,
            n_rows: ds.n_rows(),
            n_labeled: ds.n_labeled(),
            warnings: ds.warnings(),
        },
        draws: Some(draws),
        ptd_draws: Some(ptd),
    })
}

/// Percentile bootstrap resampling whole rows, carrying (W, W̄, X, X̃)
/// jointly, with three refits per replicate. Row-level resampling also runs
/// on clustered designs, where it ignores the clustering.
pub fn full_percentile_bootstrap(ds: &Dataset, spec: &EstimatorSpec, cfg: &IntervalConfig) -> Result<PTDResult> {
    check_common(ds, spec, cfg)?;
    if matches!(ds.design(), LabelingDesign::Stratified { .. }) {
        return Err(Error::InvalidDesign("stratified designs need the stratified bootstrap".into()));
    }
    let w = compute_weights(ds)?;
    let fits = point_fits(ds, spec, &w)?;
    let n = ds.n_rows();
    let (draws, third) = run_replicates(cfg, "replicates", spec.dim(), true, |rng| {
        refit_all(ds, spec, &w, &counts_of(&resample_iid(n, rng), n))
    })?;
    let (omega, ridge) = select_tuning(&draws, n, None, &cfg.tuning)?;
    let ptd = combine_draws(&omega, &draws, &third, None)?;
    finish(ds, cfg, &fits, omega, draws, ptd, ridge, false)
}

/// Bootstrap estimate of Var(γ̂°) from IID row resamples.
fn inner_bootstrap_gamma_o(ds: &Dataset, spec: &EstimatorSpec, w: &WeightPair, seed: u64) -> Result<Matrix> {
    let n = ds.n_rows();
    let inner = IntervalConfig { b: INNER_BOOTSTRAP_REPLICATES, master_seed: seed, ..IntervalConfig::default() };
    let (draws, _) = run_replicates(&inner, "inner", spec.dim(), false, |rng| {
        let counts = counts_of(&resample_iid(n, rng), n);
        let g = fit_rows(spec, ds.proxy(), &rows_from_counts(&counts, w.w_incomplete.as_slice()))?.theta;
        Ok(ReplicateOut { theta_c: g.clone(), gamma_c: g, third: vec![0.0; spec.dim()] })
    })?;
    sample_covariance(&draws.theta_c)
}

/// Var(γ̂°): sandwich for smooth estimators, an inner bootstrap otherwise.
fn gamma_o_covariance(ds: &Dataset, spec: &EstimatorSpec, w: &WeightPair, fits: &PointFits, seed: u64) -> Result<(Matrix, bool)> {
    if spec.kind.is_smooth() {
        Ok((sandwich_covariance(spec, ds.proxy(), &w.w_incomplete, &fits.gamma_o)?, false))
    } else {
        Ok((inner_bootstrap_gamma_o(ds, spec, w, seed)?, true))
    }
}

/// Number of labeled rows among `n` IID draws, then that many uniform picks
/// among the labeled rows. Only the complete-sample fits need the labeled
/// part of a full resample, and this samples it directly.
fn resample_labeled(labeled: &[usize], n: usize, rng: &mut StreamRng) -> Vec<usize> {
    let p = labeled.len() as f64 / n as f64;
    let m = if p >= 1.0 { n as u64 } else { Binomial::new(n as u64, p).expect("valid binomial").sample(rng) };
    let mut idx: Vec<usize> = (0..m).map(|_| labeled[rng.random_range(0..labeled.len())]).collect();
    idx.sort_unstable();
    idx
}

/// Percentile bootstrap that refits only the complete-sample estimates and
/// replaces the γ°(b) refit with γ̂° + L Z(b), L L' = Var(γ̂°).
pub fn convolution_bootstrap(ds: &Dataset, spec: &EstimatorSpec, cfg: &IntervalConfig) -> Result<PTDResult> {
    check_common(ds, spec, cfg)?;
    if !ds.design().is_bernoulli() {
        return Err(Error::InvalidDesign(format!(
            "convolution bootstrap needs a Bernoulli design, got {}",
            ds.design().name()
        )));
    }
    let w = compute_weights(ds)?;
    let fits = point_fits(ds, spec, &w)?;
    let n = ds.n_rows();
    let d = spec.dim();
    let (s_gamma_o, inner) = gamma_o_covariance(ds, spec, &w, &fits, Stream::new(cfg.master_seed).lane("inner").key())?;
    let chol = cholesky(&s_gamma_o)?.into_matrix();
    let labeled: Vec<usize> = (0..n).filter(|&i| w.w_complete.as_slice()[i] > 0.0).collect();
    let (draws, z) = run_replicates(cfg, "conv", d, false, |rng| {
        let rows = rows_from_sorted(&resample_labeled(&labeled, n, rng), w.w_complete.as_slice());
        let zb = standard_normals(d, rng);
        refit_complete(ds, spec, &rows, zb)
    })?;
    let (omega, ridge) = select_tuning(&draws, n, Some(&s_gamma_o), &cfg.tuning)?;
    let ptd = combine_draws(&omega, &draws, &z, Some((&fits.gamma_o, &chol)))?;
    finish(ds, cfg, &fits, omega, draws, ptd, ridge, inner)
}

/// Plug-in sandwich estimates of the four covariance blocks (N-scaled).
pub fn plugin_covariance_bundle(ds: &Dataset, spec: &EstimatorSpec) -> Result<CovarianceBundle> {
    spec.validate(ds.truth().cols())?;
    if !spec.kind.is_smooth() {
        return Err(Error::UnsupportedKind(spec.kind.name()));
    }
    let w = compute_weights(ds)?;
    let fits = point_fits(ds, spec, &w)?;
    let nf = ds.n_rows() as f64;
    Ok(CovarianceBundle {
        sigma_theta_c: sandwich_covariance(spec, ds.truth(), &w.w_complete, &fits.theta_c)?.scale(nf),
        sigma_gamma_c: sandwich_covariance(spec, ds.proxy(), &w.w_complete, &fits.gamma_c)?.scale(nf),
        sigma_gamma_o: sandwich_covariance(spec, ds.proxy(), &w.w_incomplete, &fits.gamma_o)?.scale(nf),
        sigma_cross: cross_covariance_mest(spec, ds.truth(), ds.proxy(), &w.w_complete, &fits.theta_c, &fits.gamma_c)?,
    })
}

/// Normal-approximation intervals `point ± z·sqrt(Σ̂_jj / N)` where Σ̂ is the
/// asymptotic covariance at the chosen Ω̂.
pub fn clt_intervals(ds: &Dataset, spec: &EstimatorSpec, cfg: &IntervalConfig, cov: &CovarianceBundle) -> Result<PTDResult> {
    check_common(ds, spec, cfg)?;
    if !spec.kind.is_smooth() {
        return Err(Error::UnsupportedKind(spec.kind.name()));
    }
    if !ds.design().is_bernoulli() {
        return Err(Error::InvalidDesign(format!("normal intervals need a Bernoulli design, got {}", ds.design().name())));
    }
    cov.validate()?;
    if cov.dim() != spec.dim() {
        return Err(Error::ShapeMismatch("covariance bundle does not match the estimator".into()));
    }
    let w = compute_weights(ds)?;
    let fits = point_fits(ds, spec, &w)?;
    let (omega, ridge) = tuning_from_bundle(cov, &cfg.tuning)?;
    let sigma = ptd_asymptotic_variance(&omega, cov)?;
    let point = ptd_combine(&omega, &fits.gamma_o, &fits.theta_c, &fits.gamma_c)?;
    let z = normal::inverse_cdf(1.0 - cfg.alpha / 2.0);
    let n = ds.n_rows() as f64;
    let intervals = point
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let half = z * (sigma[(j, j)].max(0.0) / n).sqrt();
            (p - half, p + half)
        })
        .collect();
    Ok(PTDResult {
        point,
        intervals,
        tuning: omega,
        method: Method::Clt,
        alpha: cfg.alpha,
        diagnostics: Diagnostics {
            replicates: 0,
            redraws: 0,
            converged: fits.converged,
            ridge_added: ridge,
            inner_bootstrap: false,
            n_rows: ds.n_rows(),
            n_labeled: ds.n_labeled(),
            warnings: ds.warnings(),
        },
        draws: None,
        ptd_draws: None,
    })
}

/// Percentile bootstrap resampling whole clusters. With
/// `Method::ClusterConvBoot`, γ°(b) is drawn from a normal with the
/// cluster-robust sandwich covariance instead of being refit.
pub fn cluster_bootstrap(ds: &Dataset, spec: &EstimatorSpec, cfg: &IntervalConfig) -> Result<PTDResult> {
    check_common(ds, spec, cfg)?;
    let clusters = ds.clusters()?;
    let w = compute_weights(ds)?;
    let fits = point_fits(ds, spec, &w)?;
    let n = ds.n_rows();
    let d = spec.dim();
    if cfg.method != Method::ClusterConvBoot {
        let (draws, third) = run_replicates(cfg, "replicates", d, true, |rng| {
            refit_all(ds, spec, &w, &counts_of(&resample_clusters(&clusters, rng), n))
        })?;
        let (omega, ridge) = select_tuning(&draws, n, None, &cfg.tuning)?;
        let ptd = combine_draws(&omega, &draws, &third, None)?;
        return finish(ds, cfg, &fits, omega, draws, ptd, ridge, false);
    }
    if !spec.kind.is_smooth() {
        return Err(Error::UnsupportedKind(spec.kind.name()));
    }
    let LabelingDesign::Clustered { cluster_of, .. } = ds.design() else { unreachable!("clusters() checked the design") };
    let s_gamma_o = cluster_sandwich_covariance(spec, ds.proxy(), &w.w_incomplete, &fits.gamma_o, cluster_of)?;
    let chol = cholesky(&s_gamma_o)?.into_matrix();
    let labeled: Vec<usize> = (0..clusters.len()).filter(|&k| ds.labeled()[clusters[k][0]]).collect();
    let k = clusters.len();
    let (draws, z) = run_replicates(cfg, "cluster-conv", d, false, |rng| {
        let mut idx = Vec::new();
        for c in resample_labeled(&labeled, k, rng) {
            idx.extend_from_slice(&clusters[c]);
        }
        idx.sort_unstable();
        let rows = rows_from_sorted(&idx, w.w_complete.as_slice());
        let zb = standard_normals(d, rng);
        refit_complete(ds, spec, &rows, zb)
    })?;
    let (omega, ridge) = select_tuning(&draws, n, Some(&s_gamma_o), &cfg.tuning)?;
    let ptd = combine_draws(&omega, &draws, &z, Some((&fits.gamma_o, &chol)))?;
    finish(ds, cfg, &fits, omega, draws, ptd, ridge, false)
}

/// Percentile bootstrap resampling the complete and incomplete samples
/// separately within each stratum, keeping per-stratum counts fixed.
pub fn stratified_bootstrap(ds: &Dataset, spec: &EstimatorSpec, cfg: &IntervalConfig) -> Result<PTDResult> {
    check_common(ds, spec, cfg)?;
    let index = StrataIndex::new(ds)?;
    let w = compute_weights(ds)?;
    let fits = point_fits(ds, spec, &w)?;
    let (draws, third) = run_replicates(cfg, "stratified", spec.dim(), true, |rng| {
        let (mut comp, mut inc) = index.resample(rng);
        comp.sort_unstable();
        inc.sort_unstable();
        let rows_c = rows_from_sorted(&comp, w.w_complete.as_slice());
        let rows_o = rows_from_sorted(&inc, w.w_incomplete.as_slice());
        Ok(ReplicateOut {
            theta_c: fit_rows(spec, ds.truth(), &rows_c)?.theta,
            gamma_c: fit_rows(spec, ds.proxy(), &rows_c)?.theta,
            third: fit_rows(spec, ds.proxy(), &rows_o)?.theta,
        })
    })?;
    let (omega, ridge) = select_tuning(&draws, ds.n_rows(), None, &cfg.tuning)?;
    let ptd = combine_draws(&omega, &draws, &third, None)?;
    finish(ds, cfg, &fits, omega, draws, ptd, ridge, false)
}

/// Percentile bootstrap of a single weighted fit, resampling rows IID.
pub fn single_fit_bootstrap(
    spec: &EstimatorSpec,
    data: &Matrix,
    w: &WeightVector,
    cfg: &IntervalConfig,
) -> Result<Vec<(f64, f64)>> {
    cfg.validate()?;
    let n = data.rows();
    let (draws, _) = run_replicates(cfg, "single", spec.dim(), false, |rng| {
        let counts = counts_of(&resample_iid(n, rng), n);
        let t = fit_rows(spec, data, &rows_from_counts(&counts, w.as_slice()))?.theta;
        Ok(ReplicateOut { theta_c: t.clone(), gamma_c: t, third: vec![0.0; spec.dim()] })
    })?;
    Ok(percentile_intervals(&draws.theta_c, cfg.alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::draw_bernoulli_labels;

    /// y = 1 + 2 z + e, proxy z̃ = z + 0.5 u on every row.
    fn ols_dataset(n: usize, seed: u64, proxy_sd: f64) -> Dataset {
        let mut rng = Stream::new(seed).rng();
        let mut truth = Matrix::zeros(n, 2);
        let mut proxy = Matrix::zeros(n, 2);
        for i in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            let u: f64 = rng.sample(StandardNormal);
            let y = 1.0 + 2.0 * z + e;
            truth.row_mut(i).copy_from_slice(&[y, z]);
            proxy.row_mut(i).copy_from_slice(&[y, z + proxy_sd * u]);
        }
        let pi: Vec<f64> = (0..n).map(|i| 0.15 + 0.2 * ((proxy[(i, 1)]).tanh() + 1.0) / 2.0).collect();
        let labels = draw_bernoulli_labels(&pi, &mut rng);
        Dataset::new(proxy, truth, labels, LabelingDesign::WeightedBernoulli { pi }).unwrap()
    }

    fn cfg(method: Method, b: usize) -> IntervalConfig {
        IntervalConfig { b, method, master_seed: 7, ..IntervalConfig::default() }
    }

    #[test]
    fn perfect_proxies_cancel_exactly() {
        let ds = ols_dataset(400, 1, 0.0);
        let spec = EstimatorSpec::ols(0, &[1], true);
        let res = full_percentile_bootstrap(&ds, &spec, &IntervalConfig { tuning: TuningStrategy::Identity, ..cfg(Method::FullBoot, 50) }).unwrap();
        let draws = res.draws.as_ref().unwrap();
        let ptd = res.ptd_draws.as_ref().unwrap();
        assert_eq!(&draws.theta_c, &draws.gamma_c);
        assert_eq!(ptd, draws.gamma_o.as_ref().unwrap());
    }

    #[test]
    fn bootstraps_are_deterministic() {
        let ds = ols_dataset(300, 2, 0.5);
        let spec = EstimatorSpec::ols(0, &[1], true);
        for m in [Method::FullBoot, Method::ConvBoot] {
            let a = ptd_intervals(&ds, &spec, &cfg(m, 100)).unwrap();
            let b = ptd_intervals(&ds, &spec, &cfg(m, 100)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_tuning_conv_equals_complete_sample_bootstrap() {
        let ds = ols_dataset(300, 3, 0.5);
        let spec = EstimatorSpec::ols(0, &[1], true);
        let c = IntervalConfig { tuning: TuningStrategy::Fixed(TuningMatrix::zero(2)), ..cfg(Method::ConvBoot, 200) };
        let res = convolution_bootstrap(&ds, &spec, &c).unwrap();
        let draws = res.draws.unwrap();
        assert_eq!(res.ptd_draws.unwrap(), draws.theta_c);
        assert_eq!(res.intervals, percentile_intervals(&draws.theta_c, 0.1));
    }

    #[test]
    fn clt_standard_normal_interval() {
        let ds = ols_dataset(200, 4, 0.5);
        let spec = EstimatorSpec::mean(&[1]);
        let n = ds.n_rows() as f64;
        let cov = CovarianceBundle {
            sigma_theta_c: Matrix::identity(1).scale(n),
            sigma_gamma_c: Matrix::identity(1),
            sigma_gamma_o: Matrix::identity(1),
            sigma_cross: Matrix::zeros(1, 1),
        };
        let res = clt_intervals(&ds, &spec, &cfg(Method::Clt, 2), &cov).unwrap();
        let (lo, hi) = res.intervals[0];
        let p = res.point[0];
        assert!(((lo - p) + 1.6449).abs() < 1e-4 && ((hi - p) - 1.6449).abs() < 1e-4);
    }

    #[test]
    fn clt_zero_tuning_is_classical_sandwich() {
        let ds = ols_dataset(500, 5, 0.5);
        let spec = EstimatorSpec::ols(0, &[1], true);
        let cov = plugin_covariance_bundle(&ds, &spec).unwrap();
        let c = IntervalConfig { tuning: TuningStrategy::Fixed(TuningMatrix::zero(2)), ..cfg(Method::Clt, 2) };
        let res = clt_intervals(&ds, &spec, &c, &cov).unwrap();
        let w = compute_weights(&ds).unwrap();
        let theta = fit(&spec, ds.truth(), &w.w_complete).unwrap().theta;
        let v = sandwich_covariance(&spec, ds.truth(), &w.w_complete, &theta).unwrap();
        for j in 0..2 {
            let half = normal::inverse_cdf(0.95) * v[(j, j)].sqrt();
            assert!((res.intervals[j].0 - (theta[j] - half)).abs() < 1e-10);
        }
    }

    #[test]
    fn singleton_clusters_reproduce_row_bootstrap() {
        let base = ols_dataset(200, 6, 0.5);
        let n = base.n_rows();
        let LabelingDesign::WeightedBernoulli { .. } = base.design() else { unreachable!() };
        let clustered = Dataset::new(
            base.proxy().clone(),
            base.imputed(),
            base.labeled().to_vec(),
            LabelingDesign::Clustered { cluster_of: (0..n).collect(), pi: vec![0.3; n] },
        )
        .unwrap();
        let spec = EstimatorSpec::ols(0, &[1], true);
        let a = full_percentile_bootstrap(&clustered, &spec, &cfg(Method::FullBoot, 60)).unwrap();
        let b = cluster_bootstrap(&clustered, &spec, &cfg(Method::ClusterBoot, 60)).unwrap();
        assert_eq!(a.intervals, b.intervals);
        assert_eq!(a.ptd_draws, b.ptd_draws);
    }

    #[test]
    fn select_tuning_by_hand() {
        // three draws of a 1-d estimate
        let m = |v: &[f64]| Matrix::from_vec(3, 1, v.to_vec()).unwrap();
        let draws = BootstrapDraws {
            theta_c: m(&[1.0, 2.0, 4.0]),
            gamma_c: m(&[1.0, 3.0, 2.0]),
            gamma_o: Some(m(&[0.0, 1.0, 2.0])),
            replicate_seeds: vec![0, 1, 2],
            redraws: 0,
        };
        // Cov(θ, γ•) = 0.5, Var(γ•) = 1, Var(γ°) = 1
        let (t, _) = select_tuning(&draws, 10, None, &TuningStrategy::OptDiag).unwrap();
        assert_eq!(t, TuningMatrix::Diagonal(vec![0.25]));
        let (t, _) = select_tuning(&draws, 10, Some(&Matrix::identity(1).scale(3.0)), &TuningStrategy::OptDiag).unwrap();
        assert_eq!(t, TuningMatrix::Diagonal(vec![0.125]));
        assert_eq!(select_tuning(&draws, 10, None, &TuningStrategy::Identity).unwrap().0, TuningMatrix::Identity);
    }

    #[test]
    fn nested_intervals_in_alpha() {
        let ds = ols_dataset(300, 8, 0.5);
        let spec = EstimatorSpec::ols(0, &[1], true);
        let wide = full_percentile_bootstrap(&ds, &spec, &IntervalConfig { alpha: 0.05, ..cfg(Method::FullBoot, 200) }).unwrap();
        let narrow = full_percentile_bootstrap(&ds, &spec, &IntervalConfig { alpha: 0.2, ..cfg(Method::FullBoot, 200) }).unwrap();
        for (w, n) in wide.intervals.iter().zip(&narrow.intervals) {
            assert!(w.0 <= n.0 && n.1 <= w.1);
        }
    }

    #[test]
    fn percentiles_ignore_replicate_order() {
        let m = Matrix::from_vec(5, 1, vec![3.0, 1.0, 5.0, 2.0, 4.0]).unwrap();
        let r = Matrix::from_vec(5, 1, vec![5.0, 4.0, 3.0, 2.0, 1.0]).unwrap();
        assert_eq!(percentile_intervals(&m, 0.4), percentile_intervals(&r, 0.4));
        assert_eq!(percentile_intervals(&m, 0.4), vec![(1.0, 4.0)]);
    }

    #[test]
    fn quantile_conv_uses_inner_bootstrap() {
        let ds = ols_dataset(300, 9, 0.5);
        let spec = EstimatorSpec::quantile(0.5, 0, &[1], true);
        let res = convolution_bootstrap(&ds, &spec, &cfg(Method::ConvBoot, 50)).unwrap();
        assert!(res.diagnostics.inner_bootstrap);
        assert!(res.intervals.iter().all(|(lo, hi)| lo <= hi));
        assert!(matches!(clt_intervals(&ds, &spec, &cfg(Method::Clt, 2), &CovarianceBundle {
            sigma_theta_c: Matrix::identity(2),
            sigma_gamma_c: Matrix::identity(2),
            sigma_gamma_o: Matrix::identity(2),
            sigma_cross: Matrix::identity(2),
        }), Err(Error::UnsupportedKind(_))));
    }

    #[test]
    fn method_design_mismatch() {
        let ds = ols_dataset(100, 10, 0.5);
        let spec = EstimatorSpec::ols(0, &[1], true);
        assert!(matches!(cluster_bootstrap(&ds, &spec, &cfg(Method::ClusterBoot, 10)), Err(Error::InvalidDesign(_))));
        assert!(matches!(stratified_bootstrap(&ds, &spec, &cfg(Method::StratifiedBoot, 10)), Err(Error::InvalidDesign(_))));
        assert!(matches!(full_percentile_bootstrap(&ds, &spec, &cfg(Method::FullBoot, 1)), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn redraw_limit_enforced() {
        // two labeled rows: most resamples cannot identify a slope
        let mut truth = Matrix::zeros(30, 2);
        for i in 0..30 {
            truth.row_mut(i).copy_from_slice(&[i as f64, (i % 7) as f64]);
        }
        let labels: Vec<bool> = (0..30).map(|i| i < 2).collect();
        let ds = Dataset::new(truth.clone(), truth, labels, LabelingDesign::UniformBernoulli { pi: 0.1 }).unwrap();
        let spec = EstimatorSpec::ols(0, &[1], true);
        let res = full_percentile_bootstrap(&ds, &spec, &IntervalConfig { redraw_limit: Some(3), ..cfg(Method::FullBoot, 50) });
        assert_eq!(res, Err(Error::TooManyRedraws { limit: 3 }));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("boot".parse::<Method>().is_err());
        assert_eq!("diag".parse::<TuningStrategy>().unwrap(), TuningStrategy::OptDiag);
    }
}
