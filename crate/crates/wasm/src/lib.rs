//! Browser bindings. Every export takes plain numbers or a JSON string and
//! returns a JSON string, so the page needs no generated TypeScript types.

use ptd::intervals::{ptd_intervals, IntervalConfig, Method, TuningStrategy};
use ptd::simulation::{
    classical_estimate, efficiency_ratio_check, generate_synthetic, naive_interval, DesignConfig, EstimatorChoice,
    ProxyNoise, Regime, ScenarioConfig,
};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

/// Demo dataset: OLS of y on one covariate observed through a noisy,
/// biased proxy, labeled uniformly at random.
#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct DemoParams {
    pub n: usize,
    pub pi: f64,
    pub proxy_sd: f64,
    pub proxy_bias: f64,
    pub b: usize,
    pub seed: u64,
}

impl Default for DemoParams {
    fn default() -> Self {
        Self { n: 2000, pi: 0.1, proxy_sd: 0.5, proxy_bias: 0.3, b: 500, seed: 1 }
    }
}

impl DemoParams {
    fn scenario(&self) -> ScenarioConfig {
        ScenarioConfig {
            name: "demo".into(),
            regime: Regime::ErrorInCovariate,
            estimator: EstimatorChoice::Ols,
            q: 0.5,
            n: self.n,
            true_theta: vec![1.0, 2.0],
            noise_sd: 1.0,
            curvature: 0.0,
            design: DesignConfig::Uniform { pi: self.pi },
            proxy: ProxyNoise { bias: self.proxy_bias, slope: 1.0, sd: self.proxy_sd },
            n_sims: 1,
            b: self.b,
            alpha: 0.1,
            tuning: "diag".into(),
            methods: vec![],
            master_seed: self.seed,
            bands: vec![],
        }
    }

    fn interval_config(&self, method: Method) -> IntervalConfig {
        IntervalConfig {
            b: self.b,
            alpha: 0.1,
            tuning: TuningStrategy::OptDiag,
            method,
            redraw_limit: None,
            master_seed: self.seed,
        }
    }
}

fn parse(json: &str) -> Result<DemoParams, String> {
    if json.trim().is_empty() {
        return Ok(DemoParams::default());
    }
    serde_json::from_str(json).map_err(|e| format!("bad parameters: {e}"))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

#[derive(Serialize)]
struct CurvePoint {
    rho: f64,
    predicted: f64,
    measured: f64,
}

/// Variance of the tuned debiased mean relative to the complete-sample mean,
/// predicted and simulated, for correlations 0, 0.1, ..., 0.9.
#[wasm_bindgen]
pub fn efficiency_curve(pi_l: f64, n_sims: usize, seed: u64) -> Result<String, String> {
    let points = (0..10)
        .map(|k| {
            let rho = k as f64 / 10.0;
            let r = efficiency_ratio_check(pi_l, rho, n_sims, seed + k).map_err(|e| e.to_string())?;
            Ok(CurvePoint { rho, predicted: r.predicted, measured: r.measured })
        })
        .collect::<Result<Vec<_>, String>>()?;
    Ok(to_json(&points))
}

#[derive(Serialize)]
struct IntervalRow {
    method: &'static str,
    point: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

#[derive(Serialize)]
struct Comparison {
    estimand: Vec<f64>,
    n_labeled: usize,
    rows: Vec<IntervalRow>,
}

/// Classical, naive and debiased 90% intervals on one simulated dataset.
#[wasm_bindgen]
pub fn compare_intervals(params: &str) -> Result<String, String> {
    let p = parse(params)?;
    let scn = p.scenario();
    scn.validate().map_err(|e| e.to_string())?;
    let data = generate_synthetic(&scn, 0).map_err(|e| e.to_string())?;
    let ds = &data.dataset;
    let spec = scn.spec();
    let cfg = p.interval_config(Method::FullBoot);
    let row = |method, point: Vec<f64>, iv: Vec<(f64, f64)>| IntervalRow {
        method,
        point,
        lo: iv.iter().map(|x| x.0).collect(),
        hi: iv.iter().map(|x| x.1).collect(),
    };
    let mut rows = Vec::new();
    let c = classical_estimate(ds, &spec, &cfg).map_err(|e| e.to_string())?;
    rows.push(row("classical", c.fit.theta, c.intervals));
    let n = naive_interval(ds, &spec, &cfg).map_err(|e| e.to_string())?;
    rows.push(row("naive", n.fit.theta, n.intervals));
    for m in [Method::FullBoot, Method::ConvBoot, Method::Clt] {
        let r = ptd_intervals(ds, &spec, &p.interval_config(m)).map_err(|e| e.to_string())?;
        rows.push(row(m.name(), r.point, r.intervals));
    }
    Ok(to_json(&Comparison { estimand: data.estimand, n_labeled: ds.n_labeled(), rows }))
}

#[derive(Serialize)]
struct Histogram {
    lo: f64,
    hi: f64,
    debiased: Vec<usize>,
    classical: Vec<usize>,
    interval: (f64, f64),
    estimand: f64,
}

/// Bootstrap distribution of the slope: debiased replicates against the
/// complete-sample replicates, on a shared grid of `bins` cells.
#[wasm_bindgen]
pub fn bootstrap_histogram(params: &str, bins: usize) -> Result<String, String> {
    let p = parse(params)?;
    if bins == 0 {
        return Err("bins must be positive".into());
    }
    let scn = p.scenario();
    scn.validate().map_err(|e| e.to_string())?;
    let data = generate_synthetic(&scn, 0).map_err(|e| e.to_string())?;
    let r = ptd_intervals(&data.dataset, &scn.spec(), &p.interval_config(Method::FullBoot)).map_err(|e| e.to_string())?;
    let debiased = r.ptd_draws.as_ref().ok_or("no replicates")?.column(1);
    let classical = r.draws.as_ref().ok_or("no replicates")?.theta_c.column(1);
    let all = debiased.iter().chain(&classical);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let count = |v: &[f64]| {
        let mut h = vec![0; bins];
        let span = (hi - lo).max(f64::MIN_POSITIVE);
        for x in v {
            h[(((x - lo) / span) * bins as f64).floor().clamp(0.0, (bins - 1) as f64) as usize] += 1;
        }
        h
    };
    Ok(to_json(&Histogram {
        lo,
        hi,
        debiased: count(&debiased),
        classical: count(&classical),
        interval: r.intervals[1],
        estimand: data.estimand[1],
    }))
}
