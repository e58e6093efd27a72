//! Weighted M-estimators: `A(data; weights) -> R^d`.
//!
//! Every fitter minimizes `Σ w_i · loss(θ; row_i)` over the rows with positive
//! weight. Rows with zero weight are never read, so truth cells of unlabeled
//! rows may hold NaN sentinels. Weights are normalized to sum to one before
//! fitting, which makes the coefficients invariant to rescaling the weights.
//!
//! Coefficient order is `(intercept, covariates...)` for regressions and
//! `(response, covariates...)` for the mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, solve_spd, solve_spd_vec, Matrix};
use crate::normal;

const LOGISTIC_TOL: f64 = 1e-8;
const LOGISTIC_MAX_ITER: usize = 100;
const QUANTILE_MAX_ITER: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EstimatorKind {
    Mean,
    Ols,
    Logistic,
    Quantile { q: f64 },
}

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Mean => "mean",
            EstimatorKind::Ols => "ols",
            EstimatorKind::Logistic => "logistic",
            EstimatorKind::Quantile { .. } => "quantile",
        }
    }

    pub fn is_smooth(&self) -> bool {
        !matches!(self, EstimatorKind::Quantile { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    pub response: usize,
    pub covariates: Vec<usize>,
    pub intercept: bool,
}

impl EstimatorSpec {
    /// Means of the given columns.
    pub fn mean(columns: &[usize]) -> Self {
        assert!(!columns.is_empty(), "mean needs at least one column");
        Self { kind: EstimatorKind::Mean, response: columns[0], covariates: columns[1..].to_vec(), intercept: false }
    }

    pub fn ols(response: usize, covariates: &[usize], intercept: bool) -> Self {
        Self { kind: EstimatorKind::Ols, response, covariates: covariates.to_vec(), intercept }
    }

    pub fn logistic(response: usize, covariates: &[usize], intercept: bool) -> Self {
        Self { kind: EstimatorKind::Logistic, response, covariates: covariates.to_vec(), intercept }
    }

    pub fn quantile(q: f64, response: usize, covariates: &[usize], intercept: bool) -> Self {
        Self { kind: EstimatorKind::Quantile { q }, response, covariates: covariates.to_vec(), intercept }
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            EstimatorKind::Mean => 1 + self.covariates.len(),
            _ => self.covariates.len() + usize::from(self.intercept),
        }
    }

    /// Data columns read by this estimator.
    pub fn columns(&self) -> Vec<usize> {
        std::iter::once(self.response).chain(self.covariates.iter().copied()).collect()
    }

    pub fn validate(&self, n_cols: usize) -> Result<()> {
        if let EstimatorKind::Quantile { q } = self.kind {
            if !(q > 0.0 && q < 1.0) {
                return Err(Error::InvalidConfig(format!("quantile level {q} outside (0, 1)")));
            }
        }
        if self.dim() == 0 {
            return Err(Error::InvalidConfig("estimator has no coefficients".into()));
        }
        if let Some(c) = self.columns().into_iter().find(|&c| c >= n_cols) {
            return Err(Error::InvalidConfig(format!("column {c} out of range for {n_cols} columns")));
        }
        if self.kind != EstimatorKind::Mean && self.covariates.contains(&self.response) {
            return Err(Error::InvalidConfig("response column also listed as covariate".into()));
        }
        Ok(())
    }

    /// Coefficient labels in output order.
    pub fn coefficient_names(&self, column_names: &[String]) -> Vec<String> {
        let name = |c: usize| column_names.get(c).cloned().unwrap_or_else(|| format!("col{c}"));
        match self.kind {
            EstimatorKind::Mean => self.columns().into_iter().map(name).collect(),
            _ => {
                let mut out = Vec::with_capacity(self.dim());
                if self.intercept {
                    out.push("(intercept)".to_string());
                }
                out.extend(self.covariates.iter().map(|&c| name(c)));
                out
            }
        }
    }
}

/// Nonnegative, finite row weights. An all-zero vector is allowed; fitting
/// it fails with `InsufficientData`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig("weights must be finite and nonnegative".into()));
        }
        Ok(Self(w))
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|v| v * c).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub theta: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub effective_rows: usize,
}

/// Sparse weighting: row indices into a data matrix with their (positive)
/// weights. Bootstrap replicates express resampling multiplicities this way.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightedRows {
    pub rows: Vec<usize>,
    pub weights: Vec<f64>,
}

impl WeightedRows {
    pub fn from_weights(w: &[f64]) -> Self {
        let mut out = WeightedRows::default();
        for (i, &v) in w.iter().enumerate() {
            if v > 0.0 {
                out.rows.push(i);
                out.weights.push(v);
            }
        }
        out
    }

    pub fn push(&mut self, row: usize, weight: f64) {
        if weight > 0.0 {
            self.rows.push(row);
            self.weights.push(weight);
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Positive-weight rows pulled out into contiguous design arrays.
struct Design {
    d: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    /// weights normalized to sum to one
    w: Vec<f64>,
}

impl Design {
    fn n(&self) -> usize {
        self.w.len()
    }

    #[inline]
    fn x(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    fn build(spec: &EstimatorSpec, data: &Matrix, rows: &WeightedRows) -> Result<Design> {
        let d = spec.dim();
        let n = rows.len();
        let total: f64 = rows.weights.iter().sum();
        if n == 0 || !(total > 0.0) {
            return Err(Error::InsufficientData { rows: 0, dim: d });
        }
        let mut x = Vec::with_capacity(n * d);
        let mut y = Vec::with_capacity(n);
        let w = rows.weights.iter().map(|v| v / total).collect();
        let read = |r: usize, c: usize| -> Result<f64> {
            let v = data[(r, c)];
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::MissingValue { row: r, column: c })
            }
        };
        for &r in &rows.rows {
            match spec.kind {
                EstimatorKind::Mean => {
                    x.push(read(r, spec.response)?);
                    for &c in &spec.covariates {
                        x.push(read(r, c)?);
                    }
                    y.push(0.0);
                }
                _ => {
                    if spec.intercept {
                        x.push(1.0);
                    }
                    for &c in &spec.covariates {
                        x.push(read(r, c)?);
                    }
                    y.push(read(r, spec.response)?);
                }
            }
        }
        Ok(Design { d, x, y, w })
    }

    /// Σ w x xᵀ scaled by per-row factors.
    fn gram(&self, factor: impl Fn(usize) -> f64) -> Matrix {
        let d = self.d;
        let mut g = Matrix::zeros(d, d);
        for i in 0..self.n() {
            let f = self.w[i] * factor(i);
            if f == 0.0 {
                continue;
            }
            let xi = self.x(i);
            for a in 0..d {
                let fa = f * xi[a];
                for b in 0..=a {
                    g[(a, b)] += fa * xi[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                g[(b, a)] = g[(a, b)];
            }
        }
        g
    }

    fn linear_predictor(&self, i: usize, theta: &[f64]) -> f64 {
        self.x(i).iter().zip(theta).map(|(a, b)| a * b).sum()
    }
}

fn check_inputs(spec: &EstimatorSpec, data: &Matrix, n_weights: usize) -> Result<()> {
    spec.validate(data.cols())?;
    if n_weights != data.rows() {
        return Err(Error::ShapeMismatch(format!("{} weights for {} rows", n_weights, data.rows())));
    }
    Ok(())
}

/// Fits the weighted estimator `A(data; w)`.
pub fn fit(spec: &EstimatorSpec, data: &Matrix, w: &WeightVector) -> Result<FitResult> {
    check_inputs(spec, data, w.len())?;
    fit_rows(spec, data, &WeightedRows::from_weights(w.as_slice()))
}

/// Same as [`fit`] with the weighting given sparsely.
pub fn fit_rows(spec: &EstimatorSpec, data: &Matrix, rows: &WeightedRows) -> Result<FitResult> {
    let design = Design::build(spec, data, rows)?;
    let n = design.n();
    let d = design.d;
    if spec.kind != EstimatorKind::Mean && n < d {
        return Err(Error::InsufficientData { rows: n, dim: d });
    }
    let (theta, converged, iterations) = match spec.kind {
        EstimatorKind::Mean => (fit_mean(&design), true, 0),
        EstimatorKind::Ols => (fit_ols(&design)?, true, 1),
        EstimatorKind::Logistic => fit_logistic(&design)?,
        EstimatorKind::Quantile { q } => fit_quantile(&design, q)?,
    };
    Ok(FitResult { theta, converged, iterations, effective_rows: n })
}

fn fit_mean(design: &Design) -> Vec<f64> {
    let mut theta = vec![0.0; design.d];
    for i in 0..design.n() {
        for (t, x) in theta.iter_mut().zip(design.x(i)) {
            *t += design.w[i] * x;
        }
    }
    theta
}

fn fit_ols(design: &Design) -> Result<Vec<f64>> {
    let gram = design.gram(|_| 1.0);
    let mut rhs = vec![0.0; design.d];
    for i in 0..design.n() {
        let f = design.w[i] * design.y[i];
        for (r, x) in rhs.iter_mut().zip(design.x(i)) {
            *r += f * x;
        }
    }
    solve_spd_vec(&gram, &rhs).map_err(|_| Error::RankDeficient)
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^t) without overflow.
#[inline]
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn logistic_loss(design: &Design, theta: &[f64]) -> f64 {
    (0..design.n())
        .map(|i| {
            let eta = design.linear_predictor(i, theta);
            design.w[i] * (softplus(eta) - design.y[i] * eta)
        })
        .sum()
}

fn fit_logistic(design: &Design) -> Result<(Vec<f64>, bool, usize)> {
    let d = design.d;
    cholesky(&design.gram(|_| 1.0)).map_err(|_| Error::RankDeficient)?;
    let mut theta = vec![0.0; d];
    let mut loss = logistic_loss(design, &theta);
    for iter in 0..LOGISTIC_MAX_ITER {
        let mut grad = vec![0.0; d];
        let mut probs = Vec::with_capacity(design.n());
        for i in 0..design.n() {
            let p = sigmoid(design.linear_predictor(i, &theta));
            probs.push(p);
            let f = design.w[i] * (p - design.y[i]);
            for (g, x) in grad.iter_mut().zip(design.x(i)) {
                *g += f * x;
            }
        }
        if grad.iter().all(|g| g.abs() <= LOGISTIC_TOL) {
            // a vanishing loss means the classes are separated and the
            // gradient only went flat because the coefficients ran off
            if loss < 1e-7 {
                return Err(Error::NoConvergence { iterations: iter });
            }
            return Ok((theta, true, iter));
        }
        let hess = design.gram(|i| probs[i] * (1.0 - probs[i]));
        let step = solve_spd_vec(&hess, &grad).map_err(|_| Error::NoConvergence { iterations: iter })?;
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = theta.iter().zip(&step).map(|(a, s)| a - t * s).collect();
            let cand_loss = logistic_loss(design, &cand);
            if cand_loss <= loss + 1e-15 * loss.abs().max(1.0) || t < 1e-10 {
                theta = cand;
                loss = cand_loss;
                break;
            }
            t *= 0.5;
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NoConvergence { iterations: iter });
        }
    }
    Err(Error::NoConvergence { iterations: LOGISTIC_MAX_ITER })
}

/// Check loss with the kink replaced by a quadratic on |r| < h.
#[inline]
fn smoothed_check(r: f64, q: f64, h: f64) -> f64 {
    if r >= h {
        q * r
    } else if r <= -h {
        (q - 1.0) * r
    } else {
        (q - 0.5) * r + r * r / (4.0 * h) + h / 4.0
    }
}

#[inline]
fn smoothed_check_slope(r: f64, q: f64, h: f64) -> f64 {
    if r >= h {
        q
    } else if r <= -h {
        q - 1.0
    } else {
        q - 0.5 + r / (2.0 * h)
    }
}

/// Unweighted interquartile range (nearest-rank quartiles).
fn iqr(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    crate::linalg::quantile_of_sorted(&v, 0.75) - crate::linalg::quantile_of_sorted(&v, 0.25)
}

fn residuals(design: &Design, theta: &[f64]) -> Vec<f64> {
    (0..design.n()).map(|i| design.y[i] - design.linear_predictor(i, theta)).collect()
}

fn quantile_objective(design: &Design, theta: &[f64], q: f64, h: f64) -> f64 {
    (0..design.n())
        .map(|i| design.w[i] * smoothed_check(design.y[i] - design.linear_predictor(i, theta), q, h))
        .sum()
}

/// Levenberg-damped Newton on the smoothed objective at bandwidth `h`.
/// Returns the number of iterations used.
fn quantile_newton(design: &Design, theta: &mut Vec<f64>, q: f64, h: f64, max_iter: usize, metric: &Matrix) -> usize {
    let d = design.d;
    let mut obj = quantile_objective(design, theta, q, h);
    let mut mu = 1e-8 / h;
    for iter in 0..max_iter {
        let r = residuals(design, theta);
        let mut grad = vec![0.0; d];
        for i in 0..design.n() {
            let f = -design.w[i] * smoothed_check_slope(r[i], q, h);
            for (g, x) in grad.iter_mut().zip(design.x(i)) {
                *g += f * x;
            }
        }
        let hess = design.gram(|i| if r[i].abs() < h { 0.5 / h } else { 0.0 });
        let mut accepted = false;
        let mut step_norm = 0.0;
        while mu < 1e12 / h {
            let damped = hess.add(&metric.scale(mu)).expect("same shape");
            let Ok(step) = solve_spd_vec(&damped, &grad) else {
                mu *= 10.0;
                continue;
            };
            let cand: Vec<f64> = theta.iter().zip(&step).map(|(a, s)| a - s).collect();
            let cand_obj = quantile_objective(design, &cand, q, h);
            if cand_obj <= obj {
                step_norm = step.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
                let decrease = obj - cand_obj;
                *theta = cand;
                obj = cand_obj;
                mu = (mu * 0.1).max(1e-12 / h);
                accepted = true;
                if decrease <= 1e-15 * obj.abs().max(1e-300) && step_norm <= 1e-12 * (1.0 + theta.iter().fold(0.0_f64, |m, v| m.max(v.abs()))) {
                    return iter + 1;
                }
                break;
            }
            mu *= 10.0;
        }
        if !accepted {
            return iter + 1;
        }
        let scale = 1.0 + theta.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if step_norm <= 1e-11 * scale {
            return iter + 1;
        }
    }
    max_iter
}

fn check_objective(design: &Design, theta: &[f64], q: f64) -> f64 {
    (0..design.n())
        .map(|i| {
            let r = design.y[i] - design.linear_predictor(i, theta);
            design.w[i] * r * (q - if r < 0.0 { 1.0 } else { 0.0 })
        })
        .sum()
}

/// The exact minimizer interpolates `d` rows. Near the optimum those are the
/// rows with the smallest residuals, so try the interpolating fit and keep it
/// if the unsmoothed objective improves.
fn snap_to_basis(design: &Design, theta: &mut Vec<f64>, q: f64) {
    let d = design.d;
    let mut best = check_objective(design, theta, q);
    for _ in 0..3 {
        let r = residuals(design, theta);
        let mut order: Vec<usize> = (0..design.n()).collect();
        order.sort_by(|&a, &b| r[a].abs().total_cmp(&r[b].abs()).then(a.cmp(&b)));
        let basis = &order[..d.min(order.len())];
        let mut xb = Matrix::zeros(d, d);
        let mut xty = vec![0.0; d];
        // normal equations of the square system, Xᵀ X θ = Xᵀ y
        for &i in basis {
            let x = design.x(i);
            for a in 0..d {
                xty[a] += x[a] * design.y[i];
                for b in 0..d {
                    xb[(a, b)] += x[a] * x[b];
                }
            }
        }
        let Ok(cand) = solve_spd_vec(&xb, &xty) else { return };
        let obj = check_objective(design, &cand, q);
        if obj < best {
            best = obj;
            *theta = cand;
        } else {
            return;
        }
    }
}

fn fit_quantile(design: &Design, q: f64) -> Result<(Vec<f64>, bool, usize)> {
    let n = design.n();
    let metric = design.gram(|_| 1.0);
    let mut theta = fit_ols(design)?;
    let y_iqr = iqr(&design.y);
    let spread = if y_iqr > 0.0 {
        y_iqr
    } else {
        let mean = design.y.iter().sum::<f64>() / n as f64;
        let sd = (design.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        if sd > 0.0 { sd } else { 1.0 }
    };
    let target = 0.05 * spread / (n as f64).sqrt();
    let r0 = residuals(design, &theta);
    let mut h = iqr(&r0).max(target);
    if !(h > 0.0) {
        h = target.max(f64::MIN_POSITIVE);
    }
    let mut iterations = 0;
    loop {
        iterations += quantile_newton(design, &mut theta, q, h, 200, &metric.scale(1.0 / h));
        if h <= target {
            break;
        }
        h = (h * 0.25).max(target);
    }
    // polish
    let fine = h / 10.0;
    iterations += quantile_newton(design, &mut theta, q, fine, 2, &metric.scale(1.0 / fine));
    snap_to_basis(design, &mut theta, q);
    if theta.iter().any(|v| !v.is_finite()) || iterations > QUANTILE_MAX_ITER {
        return Err(Error::NoConvergence { iterations });
    }
    Ok((theta, true, iterations))
}

/// Per-row loss, score (gradient) and Hessian factor for the smooth kinds.
struct RowTerms {
    residual: f64,
    /// gradient = grad_scale · x (regressions) or θ − x (mean)
    grad_scale: f64,
    /// Hessian = hess_scale · x xᵀ (regressions) or I (mean)
    hess_scale: f64,
}

fn row_terms(kind: EstimatorKind, x: &[f64], y: f64, theta: &[f64], powell_h: f64) -> RowTerms {
    let eta: f64 = x.iter().zip(theta).map(|(a, b)| a * b).sum();
    match kind {
        EstimatorKind::Mean => RowTerms { residual: 0.0, grad_scale: 0.0, hess_scale: 1.0 },
        EstimatorKind::Ols => {
            let r = y - eta;
            RowTerms { residual: r, grad_scale: -r, hess_scale: 1.0 }
        }
        EstimatorKind::Logistic => {
            let p = sigmoid(eta);
            RowTerms { residual: y - p, grad_scale: p - y, hess_scale: p * (1.0 - p) }
        }
        EstimatorKind::Quantile { q } => {
            let r = y - eta;
            let ind = if r < 0.0 { 1.0 } else { 0.0 };
            let k = if r.abs() <= powell_h { 0.5 / powell_h } else { 0.0 };
            RowTerms { residual: r, grad_scale: -(q - ind), hess_scale: k }
        }
    }
}

fn row_gradient(kind: EstimatorKind, x: &[f64], theta: &[f64], terms: &RowTerms, out: &mut [f64]) {
    match kind {
        EstimatorKind::Mean => {
            for ((o, t), xv) in out.iter_mut().zip(theta).zip(x) {
                *o = t - xv;
            }
        }
        _ => {
            for (o, xv) in out.iter_mut().zip(x) {
                *o = terms.grad_scale * xv;
            }
        }
    }
}

/// Weighted mean gradient of the loss, `Σ w ∇loss / Σ w`.
pub fn score(spec: &EstimatorSpec, data: &Matrix, w: &WeightVector, theta: &[f64]) -> Result<Vec<f64>> {
    check_inputs(spec, data, w.len())?;
    check_theta(spec, theta)?;
    let design = Design::build(spec, data, &WeightedRows::from_weights(w.as_slice()))?;
    let d = design.d;
    let mut total = vec![0.0; d];
    let mut g = vec![0.0; d];
    for i in 0..design.n() {
        let terms = row_terms(spec.kind, design.x(i), design.y[i], theta, 1.0);
        row_gradient(spec.kind, design.x(i), theta, &terms, &mut g);
        for (t, v) in total.iter_mut().zip(&g) {
            *t += design.w[i] * v;
        }
    }
    Ok(total)
}

/// Weighted mean loss `Σ w loss / Σ w` (unsmoothed check loss for quantiles).
pub fn weighted_loss(spec: &EstimatorSpec, data: &Matrix, w: &WeightVector, theta: &[f64]) -> Result<f64> {
    check_inputs(spec, data, w.len())?;
    check_theta(spec, theta)?;
    let design = Design::build(spec, data, &WeightedRows::from_weights(w.as_slice()))?;
    Ok((0..design.n())
        .map(|i| {
            let x = design.x(i);
            let eta: f64 = x.iter().zip(theta).map(|(a, b)| a * b).sum();
            let l = match spec.kind {
                EstimatorKind::Mean => 0.5 * x.iter().zip(theta).map(|(a, t)| (a - t).powi(2)).sum::<f64>(),
                EstimatorKind::Ols => 0.5 * (design.y[i] - eta).powi(2),
                EstimatorKind::Logistic => softplus(eta) - design.y[i] * eta,
                EstimatorKind::Quantile { q } => {
                    let r = design.y[i] - eta;
                    r * (q - if r < 0.0 { 1.0 } else { 0.0 })
                }
            };
            design.w[i] * l
        })
        .sum())
}

fn check_theta(spec: &EstimatorSpec, theta: &[f64]) -> Result<()> {
    if theta.len() != spec.dim() {
        return Err(Error::ShapeMismatch(format!("theta has length {}, expected {}", theta.len(), spec.dim())));
    }
    Ok(())
}

/// Hall–Sheather bandwidth mapped to the residual scale, for the Powell
/// kernel estimate of the quantile-regression Hessian.
fn powell_bandwidth(q: f64, residuals: &[f64]) -> f64 {
    let n = residuals.len() as f64;
    let z = normal::inverse_cdf(q);
    let z_level = normal::inverse_cdf(0.975);
    let dens = normal::pdf(z);
    let hs = n.powf(-1.0 / 3.0) * z_level.powf(2.0 / 3.0) * (1.5 * dens * dens / (2.0 * z * z + 1.0)).powf(1.0 / 3.0);
    let hi = (q + hs).min(1.0 - 1e-10);
    let lo = (q - hs).max(1e-10);
    let mean = residuals.iter().sum::<f64>() / n;
    let sd = (residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let spread = sd.min(iqr(residuals) / 1.34);
    let spread = if spread > 0.0 { spread } else { sd.max(1e-12) };
    (normal::inverse_cdf(hi) - normal::inverse_cdf(lo)) * spread
}

/// Per-row scores and the N-normalized Hessian `D = (1/N) Σ w ∇²loss`.
struct ScoreParts {
    design: Design,
    /// unnormalized weights of the design rows
    raw_w: Vec<f64>,
    rows: Vec<usize>,
    scores: Vec<f64>,
    hessian: Matrix,
}

fn score_parts(spec: &EstimatorSpec, data: &Matrix, w: &[f64], theta: &[f64]) -> Result<ScoreParts> {
    check_inputs(spec, data, w.len())?;
    check_theta(spec, theta)?;
    let wr = WeightedRows::from_weights(w);
    let design = Design::build(spec, data, &wr)?;
    let n_total = data.rows() as f64;
    let d = design.d;
    let powell_h = match spec.kind {
        EstimatorKind::Quantile { q } => powell_bandwidth(q, &residuals(&design, theta)),
        _ => 1.0,
    };
    let mut scores = vec![0.0; design.n() * d];
    let mut hessian = Matrix::zeros(d, d);
    for i in 0..design.n() {
        let x = design.x(i);
        let terms = row_terms(spec.kind, x, design.y[i], theta, powell_h);
        row_gradient(spec.kind, x, theta, &terms, &mut scores[i * d..(i + 1) * d]);
        let wi = wr.weights[i] / n_total;
        match spec.kind {
            EstimatorKind::Mean => {
                for a in 0..d {
                    hessian[(a, a)] += wi;
                }
            }
            _ => {
                let f = wi * terms.hess_scale;
                if f != 0.0 {
                    for a in 0..d {
                        for b in 0..d {
                            hessian[(a, b)] += f * x[a] * x[b];
                        }
                    }
                }
            }
        }
        let _ = terms.residual;
    }
    Ok(ScoreParts { design, raw_w: wr.weights, rows: wr.rows, scores, hessian })
}

/// D⁻¹ M D'⁻¹ for symmetric D, D'.
fn sandwich_product(d_left: &Matrix, middle: &Matrix, d_right: &Matrix) -> Result<Matrix> {
    let left = solve_spd(d_left, middle).map_err(|_| Error::RankDeficient)?;
    // (D'⁻¹ (D⁻¹M)ᵀ)ᵀ = D⁻¹ M D'⁻¹
    let right = solve_spd(d_right, &left.transpose()).map_err(|_| Error::RankDeficient)?;
    Ok(right.transpose())
}

/// Sandwich estimate of `Var(A(data; w))`: `D⁻¹ C D⁻¹ / N` with
/// `D = (1/N) Σ w ∇²loss` and `C = (1/N) Σ w² ∇loss ∇lossᵀ`, where N is the
/// total row count. `N · result` estimates the asymptotic covariance.
pub fn sandwich_covariance(spec: &EstimatorSpec, data: &Matrix, w: &WeightVector, theta: &[f64]) -> Result<Matrix> {
    let parts = score_parts(spec, data, w.as_slice(), theta)?;
    let d = parts.design.d;
    let n_total = data.rows() as f64;
    let mut meat = Matrix::zeros(d, d);
    for i in 0..parts.design.n() {
        let s = &parts.scores[i * d..(i + 1) * d];
        let f = parts.raw_w[i] * parts.raw_w[i] / n_total;
        for a in 0..d {
            for b in 0..d {
                meat[(a, b)] += f * s[a] * s[b];
            }
        }
    }
    Ok(sandwich_product(&parts.hessian, &meat, &parts.hessian)?.scale(1.0 / n_total).symmetrized())
}

/// Cluster-robust sandwich: scores are summed within clusters before forming
/// the middle matrix. `cluster_of` assigns every row a cluster id.
pub fn cluster_sandwich_covariance(
    spec: &EstimatorSpec,
    data: &Matrix,
    w: &WeightVector,
    theta: &[f64],
    cluster_of: &[usize],
) -> Result<Matrix> {
    if cluster_of.len() != data.rows() {
        return Err(Error::ShapeMismatch("cluster labels must cover every row".into()));
    }
    let parts = score_parts(spec, data, w.as_slice(), theta)?;
    let d = parts.design.d;
    let n_total = data.rows() as f64;
    let n_clusters = cluster_of.iter().max().map_or(0, |m| m + 1);
    let mut sums = vec![0.0; n_clusters * d];
    for i in 0..parts.design.n() {
        let k = cluster_of[parts.rows[i]];
        for a in 0..d {
            sums[k * d + a] += parts.raw_w[i] * parts.scores[i * d + a];
        }
    }
    let mut meat = Matrix::zeros(d, d);
    for k in 0..n_clusters {
        let s = &sums[k * d..(k + 1) * d];
        for a in 0..d {
            for b in 0..d {
                meat[(a, b)] += s[a] * s[b] / n_total;
            }
        }
    }
    Ok(sandwich_product(&parts.hessian, &meat, &parts.hessian)?.scale(1.0 / n_total).symmetrized())
}

/// Plug-in estimate of the N-scaled asymptotic cross-covariance between the
/// truth-data fit `theta` and the proxy-data fit `gamma`, both weighted by `w`:
/// `D₁⁻¹ C₁₂ D₂⁻¹` with `C₁₂ = (1/N) Σ w² ∇loss_θ(Xᵢ) ∇loss_γ(X̃ᵢ)ᵀ`.
pub fn cross_covariance_mest(
    spec: &EstimatorSpec,
    data_true: &Matrix,
    data_proxy: &Matrix,
    w: &WeightVector,
    theta: &[f64],
    gamma: &[f64],
) -> Result<Matrix> {
    if !spec.kind.is_smooth() {
        return Err(Error::UnsupportedKind(spec.kind.name()));
    }
    if data_true.rows() != data_proxy.rows() || data_true.cols() != data_proxy.cols() {
        return Err(Error::ShapeMismatch("truth and proxy matrices differ in shape".into()));
    }
    let truth = score_parts(spec, data_true, w.as_slice(), theta)?;
    let proxy = score_parts(spec, data_proxy, w.as_slice(), gamma)?;
    let d = truth.design.d;
    let n_total = data_true.rows() as f64;
    let mut middle = Matrix::zeros(d, d);
    for i in 0..truth.design.n() {
        let s1 = &truth.scores[i * d..(i + 1) * d];
        let s2 = &proxy.scores[i * d..(i + 1) * d];
        let f = truth.raw_w[i] * truth.raw_w[i] / n_total;
        for a in 0..d {
            for b in 0..d {
                middle[(a, b)] += f * s1[a] * s2[b];
            }
        }
    }
    sandwich_product(&truth.hessian, &middle, &proxy.hessian)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn w(v: &[f64]) -> WeightVector {
        WeightVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn mean_examples() {
        let data = m(&[&[1.0], &[2.0], &[3.0]]);
        let spec = EstimatorSpec::mean(&[0]);
        assert_eq!(fit(&spec, &data, &w(&[1.0, 1.0, 1.0])).unwrap().theta, vec![2.0]);
        assert_eq!(fit(&spec, &data, &w(&[0.0, 0.0, 3.0])).unwrap().theta, vec![3.0]);
    }

    #[test]
    fn ols_exact_line() {
        let data = m(&[&[2.0, 1.0], &[4.0, 2.0], &[6.0, 3.0]]);
        let spec = EstimatorSpec::ols(0, &[1], true);
        let fit = fit(&spec, &data, &WeightVector::ones(3)).unwrap();
        assert!(fit.theta[0].abs() < 1e-12 && (fit.theta[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_rows_may_hold_nan() {
        let data = m(&[&[2.0, 1.0], &[f64::NAN, 2.0], &[6.0, 3.0], &[7.0, 4.0]]);
        let spec = EstimatorSpec::ols(0, &[1], true);
        assert!(fit(&spec, &data, &w(&[1.0, 0.0, 1.0, 1.0])).is_ok());
        assert!(matches!(
            fit(&spec, &data, &w(&[1.0, 1.0, 1.0, 1.0])),
            Err(Error::MissingValue { row: 1, column: 0 })
        ));
    }

    #[test]
    fn ols_errors() {
        let spec = EstimatorSpec::ols(0, &[1, 2], true);
        let data = m(&[&[1.0, 1.0, 2.0], &[2.0, 2.0, 4.0], &[3.0, 3.0, 6.0], &[1.0, 4.0, 8.0]]);
        assert_eq!(fit(&spec, &data, &WeightVector::ones(4)), Err(Error::RankDeficient));
        assert!(matches!(
            fit(&spec, &data, &w(&[1.0, 1.0, 0.0, 0.0])),
            Err(Error::InsufficientData { rows: 2, dim: 3 })
        ));
    }

    /// Standalone Newton iteration for logistic regression, written against
    /// the textbook score equations rather than the library internals.
    fn newton_logistic_oracle(x: &[Vec<f64>], y: &[f64], wts: &[f64]) -> Vec<f64> {
        let d = x[0].len();
        let mut beta = vec![0.0; d];
        for _ in 0..50 {
            let mut g = vec![0.0; d];
            let mut h = vec![vec![0.0; d]; d];
            for i in 0..x.len() {
                let eta: f64 = (0..d).map(|j| x[i][j] * beta[j]).sum();
                let p = 1.0 / (1.0 + (-eta).exp());
                for a in 0..d {
                    g[a] += wts[i] * (y[i] - p) * x[i][a];
                    for b in 0..d {
                        h[a][b] += wts[i] * p * (1.0 - p) * x[i][a] * x[i][b];
                    }
                }
            }
            // Gauss-Jordan solve h·delta = g
            let mut aug: Vec<Vec<f64>> = (0..d).map(|a| { let mut r = h[a].clone(); r.push(g[a]); r }).collect();
            for c in 0..d {
                let piv = (c..d).max_by(|&a, &b| aug[a][c].abs().partial_cmp(&aug[b][c].abs()).unwrap()).unwrap();
                aug.swap(c, piv);
                for r in 0..d {
                    if r != c {
                        let f = aug[r][c] / aug[c][c];
                        for k in c..=d {
                            aug[r][k] -= f * aug[c][k];
                        }
                    }
                }
            }
            for a in 0..d {
                beta[a] += aug[a][d] / aug[a][a];
            }
        }
        beta
    }

    fn logistic_dataset() -> (Matrix, Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut rows = Vec::new();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut ws = Vec::new();
        for _ in 0..20 {
            let z: f64 = rng.sample(StandardNormal);
            let p = sigmoid(0.3 + 1.2 * z);
            let y = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
            rows.push(vec![y, z]);
            xs.push(vec![1.0, z]);
            ys.push(y);
            ws.push(0.5 + rng.random::<f64>());
        }
        (Matrix::from_rows(&rows).unwrap(), xs, ys, ws)
    }

    #[test]
    fn logistic_matches_newton_oracle() {
        let (data, xs, ys, ws) = logistic_dataset();
        let spec = EstimatorSpec::logistic(0, &[1], true);
        let got = fit(&spec, &data, &w(&ws)).unwrap();
        let want = newton_logistic_oracle(&xs, &ys, &ws);
        for (g, e) in got.theta.iter().zip(&want) {
            assert!((g - e).abs() < 1e-6, "{got:?} vs {want:?}");
        }
        let s = score(&spec, &data, &w(&ws), &got.theta).unwrap();
        assert!(s.iter().all(|v| v.abs() <= 1e-8));
    }

    #[test]
    fn logistic_separable_data_fails() {
        let data = m(&[&[0.0, -2.0], &[0.0, -1.0], &[1.0, 1.0], &[1.0, 2.0]]);
        let spec = EstimatorSpec::logistic(0, &[1], true);
        assert!(matches!(fit(&spec, &data, &WeightVector::ones(4)), Err(Error::NoConvergence { .. })));
    }

    #[test]
    fn logistic_score_matches_finite_differences() {
        let (data, _, _, ws) = logistic_dataset();
        let spec = EstimatorSpec::logistic(0, &[1], true);
        let wv = w(&ws);
        let theta = fit(&spec, &data, &wv).unwrap().theta;
        let perturbed = vec![theta[0] + 0.3, theta[1] - 0.2];
        let g = score(&spec, &data, &wv, &perturbed).unwrap();
        let eps = 1e-5;
        for j in 0..2 {
            let mut up = perturbed.clone();
            let mut dn = perturbed.clone();
            up[j] += eps;
            dn[j] -= eps;
            let fd = (weighted_loss(&spec, &data, &wv, &up).unwrap() - weighted_loss(&spec, &data, &wv, &dn).unwrap())
                / (2.0 * eps);
            assert!((fd - g[j]).abs() < 1e-5, "coord {j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn score_vanishes_at_fit() {
        let data = m(&[&[1.0], &[2.0], &[4.5]]);
        let spec = EstimatorSpec::mean(&[0]);
        let wv = w(&[1.0, 2.0, 3.0]);
        let theta = fit(&spec, &data, &wv).unwrap().theta;
        assert!(score(&spec, &data, &wv, &theta).unwrap()[0].abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                vec![1.0 + 2.0 * z + rng.sample::<f64, _>(StandardNormal), z]
            })
            .collect();
        let data = Matrix::from_rows(&rows).unwrap();
        let spec = EstimatorSpec::ols(0, &[1], true);
        let wv = WeightVector::new((0..50).map(|i| 1.0 + (i % 3) as f64).collect()).unwrap();
        let theta = fit(&spec, &data, &wv).unwrap().theta;
        let s = score(&spec, &data, &wv, &theta).unwrap();
        assert!(s.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-10);
    }

    /// Exact LP solution of small quantile regressions by enumerating
    /// interpolating bases (pairs of rows).
    fn quantile_lp_oracle(rows: &[(f64, f64)], q: f64) -> (Vec<f64>, f64) {
        let obj = |a: f64, b: f64| -> f64 {
            rows.iter().map(|(y, z)| { let r = y - a - b * z; r * (q - if r < 0.0 { 1.0 } else { 0.0 }) }).sum()
        };
        let mut best = (vec![0.0, 0.0], f64::INFINITY);
        for i in 0..rows.len() {
            for j in (i + 1)..rows.len() {
                let (y1, z1) = rows[i];
                let (y2, z2) = rows[j];
                if (z1 - z2).abs() < 1e-12 {
                    continue;
                }
                let b = (y1 - y2) / (z1 - z2);
                let a = y1 - b * z1;
                let o = obj(a, b);
                if o < best.1 {
                    best = (vec![a, b], o);
                }
            }
        }
        best
    }

    #[test]
    fn quantile_matches_lp_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for &q in &[0.25, 0.5, 0.8] {
            let rows: Vec<(f64, f64)> = (0..40)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    let e: f64 = rng.sample(StandardNormal);
                    (1.0 + 0.5 * z + (1.0 + 0.3 * z.abs()) * e, z)
                })
                .collect();
            let data = Matrix::from_rows(&rows.iter().map(|(y, z)| [*y, *z]).collect::<Vec<_>>()).unwrap();
            let spec = EstimatorSpec::quantile(q, 0, &[1], true);
            let got = fit(&spec, &data, &WeightVector::ones(40)).unwrap();
            let (lp, lp_obj) = quantile_lp_oracle(&rows, q);
            let our_obj = weighted_loss(&spec, &data, &WeightVector::ones(40), &got.theta).unwrap() * 40.0;
            assert!(our_obj - lp_obj <= 1e-4 * lp_obj, "q={q}: {our_obj} vs {lp_obj}");
            for (g, e) in got.theta.iter().zip(&lp) {
                assert!((g - e).abs() < 1e-3, "q={q}: {:?} vs {lp:?}", got.theta);
            }
        }
    }

    #[test]
    fn intercept_only_quantile_is_sample_quantile() {
        let data = Matrix::from_rows(&(1..=101).map(|v| [v as f64]).collect::<Vec<_>>()).unwrap();
        let spec = EstimatorSpec::quantile(0.5, 0, &[], true);
        let got = fit(&spec, &data, &WeightVector::ones(101)).unwrap();
        assert!((got.theta[0] - 51.0).abs() < 1e-4, "{:?}", got.theta);
    }

    #[test]
    fn sandwich_of_mean_is_variance_over_n() {
        let vals = [1.0, 4.0, 2.5, 7.0, -1.0];
        let data = Matrix::from_rows(&vals.iter().map(|v| [*v]).collect::<Vec<_>>()).unwrap();
        let spec = EstimatorSpec::mean(&[0]);
        let wv = WeightVector::ones(5);
        let theta = fit(&spec, &data, &wv).unwrap().theta;
        let mean = vals.iter().sum::<f64>() / 5.0;
        let s2 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        let v = sandwich_covariance(&spec, &data, &wv, &theta).unwrap();
        assert!((v[(0, 0)] - s2 / 5.0).abs() < 1e-10);
    }

    /// Direct evaluation of D⁻¹ C D⁻¹ / N for the OLS loss with explicit 2x2
    /// inverses.
    #[test]
    fn sandwich_matches_direct_formula_and_weight_doubling() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<[f64; 2]> = (0..30)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                [0.5 - z + rng.sample::<f64, _>(StandardNormal), z]
            })
            .collect();
        let ws: Vec<f64> = (0..30).map(|i| if i % 4 == 0 { 0.0 } else { 1.0 + (i % 5) as f64 }).collect();
        let data = Matrix::from_rows(&rows).unwrap();
        let spec = EstimatorSpec::ols(0, &[1], true);
        let wv = w(&ws);
        let theta = fit(&spec, &data, &wv).unwrap().theta;
        let n = 30.0;
        let (mut d, mut c) = ([[0.0; 2]; 2], [[0.0; 2]; 2]);
        for (r, wi) in rows.iter().zip(&ws) {
            let x = [1.0, r[1]];
            let res = r[0] - theta[0] - theta[1] * r[1];
            for a in 0..2 {
                for b in 0..2 {
                    d[a][b] += wi * x[a] * x[b] / n;
                    c[a][b] += wi * wi * res * res * x[a] * x[b] / n;
                }
            }
        }
        let det = d[0][0] * d[1][1] - d[0][1] * d[1][0];
        let inv = [[d[1][1] / det, -d[0][1] / det], [-d[1][0] / det, d[0][0] / det]];
        let mut expected = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        expected[a][b] += inv[a][k] * c[k][l] * inv[l][b] / n;
                    }
                }
            }
        }
        let got = sandwich_covariance(&spec, &data, &wv, &theta).unwrap();
        let doubled = sandwich_covariance(&spec, &data, &wv.scaled(2.0).unwrap(), &theta).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                assert!((got[(a, b)] - expected[a][b]).abs() < 1e-12 * expected[a][b].abs().max(1.0));
                // D doubles and C quadruples, so the sandwich is unchanged
                assert!((doubled[(a, b)] - got[(a, b)]).abs() < 1e-12 * got[(a, b)].abs().max(1.0));
            }
        }
    }

    #[test]
    fn cross_covariance_identical_proxies_equals_scaled_sandwich() {
        let (data, _, _, ws) = logistic_dataset();
        let wv = w(&ws);
        for spec in [EstimatorSpec::logistic(0, &[1], true), EstimatorSpec::ols(0, &[1], true), EstimatorSpec::mean(&[0, 1])] {
            let theta = fit(&spec, &data, &wv).unwrap().theta;
            let cross = cross_covariance_mest(&spec, &data, &data, &wv, &theta, &theta).unwrap();
            let sand = sandwich_covariance(&spec, &data, &wv, &theta).unwrap().scale(20.0);
            assert!(cross.sub(&sand).unwrap().max_abs() < 1e-10);
        }
    }

    #[test]
    fn cross_covariance_mean_by_hand() {
        let truth = m(&[&[1.0], &[3.0], &[f64::NAN], &[6.0]]);
        let proxy = m(&[&[1.5], &[2.0], &[4.0], &[7.0]]);
        let ws = [2.0, 1.0, 0.0, 1.0];
        let wv = w(&ws);
        let spec = EstimatorSpec::mean(&[0]);
        let theta = fit(&spec, &truth, &wv).unwrap().theta[0];
        let gamma = fit(&spec, &proxy, &wv).unwrap().theta[0];
        let n = 4.0;
        let wbar = ws.iter().sum::<f64>() / n;
        let c12: f64 = [0usize, 1, 3]
            .iter()
            .map(|&i| ws[i] * ws[i] * (truth[(i, 0)] - theta) * (proxy[(i, 0)] - gamma))
            .sum::<f64>()
            / n;
        let got = cross_covariance_mest(&spec, &truth, &proxy, &wv, &[theta], &[gamma]).unwrap();
        assert!((got[(0, 0)] - c12 / (wbar * wbar)).abs() < 1e-12);
    }

    #[test]
    fn cross_covariance_rejects_quantile() {
        let data = m(&[&[1.0, 0.0], &[2.0, 1.0], &[3.0, 2.0]]);
        let spec = EstimatorSpec::quantile(0.5, 0, &[1], true);
        assert_eq!(
            cross_covariance_mest(&spec, &data, &data, &WeightVector::ones(3), &[0.0, 1.0], &[0.0, 1.0]),
            Err(Error::UnsupportedKind("quantile"))
        );
    }

    #[test]
    fn spec_validation() {
        assert!(EstimatorSpec::quantile(1.0, 0, &[1], true).validate(2).is_err());
        assert!(EstimatorSpec::ols(0, &[0], true).validate(2).is_err());
        assert!(EstimatorSpec::ols(0, &[3], true).validate(2).is_err());
        assert_eq!(EstimatorSpec::mean(&[0, 2]).dim(), 2);
        assert_eq!(EstimatorSpec::ols(0, &[1, 2], false).dim(), 2);
        let names = vec!["y".to_string(), "z".to_string()];
        assert_eq!(EstimatorSpec::ols(0, &[1], true).coefficient_names(&names), vec!["(intercept)", "z"]);
    }
}
