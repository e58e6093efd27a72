use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{error::ErrorKind, Args, Parser, Subcommand};
use ptd_cli::config::{read_kv_file, RunConfig};
use ptd_cli::run::{generate, read_scenario, run_analysis, run_simulation, timing_path, to_json, write_text};
use ptd_cli::{CliError, Result};

#[derive(Parser)]
#[command(name = "ptd", version, about = "Predict-then-debias confidence intervals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the debiased estimator to a CSV file and report intervals.
    Analyze(AnalyzeArgs),
    /// Run a coverage simulation described by a TOML scenario.
    Simulate(SimulateArgs),
    /// Write one simulated dataset of a scenario as CSV.
    Generate(GenerateArgs),
}

/// Every setting is also accepted in the `--config` file under its flag name.
#[derive(Args)]
struct AnalyzeArgs {
    /// `key = value` file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    response: Option<String>,
    /// Comma-separated covariate columns.
    #[arg(long)]
    covariates: Option<String>,
    /// Comma-separated `true=proxy` column pairs.
    #[arg(long)]
    proxy_map: Option<String>,
    #[arg(long)]
    label_col: Option<String>,
    /// Constant labeling probability.
    #[arg(long)]
    pi: Option<String>,
    /// Column of per-row labeling probabilities.
    #[arg(long)]
    pi_col: Option<String>,
    #[arg(long)]
    cluster_col: Option<String>,
    /// CSV with columns `cluster,pi`.
    #[arg(long)]
    cluster_pi: Option<String>,
    #[arg(long)]
    stratum_col: Option<String>,
    /// CSV with columns `stratum,size` and optionally `n_complete,n_incomplete`.
    #[arg(long)]
    stratum_counts: Option<String>,
    /// mean, ols, logistic or quantile.
    #[arg(long)]
    estimator: Option<String>,
    #[arg(long)]
    q: Option<String>,
    /// `false` drops the intercept from regressions.
    #[arg(long)]
    intercept: Option<String>,
    /// full-boot, conv-boot, clt, cluster-boot, cluster-conv-boot or stratified-boot.
    #[arg(long)]
    method: Option<String>,
    #[arg(long = "B")]
    b: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    /// identity, diag or full.
    #[arg(long)]
    tuning: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Report file; stdout when absent. Timings go to `<out>.timing.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Simulation index to draw.
    #[arg(long, default_value_t = 0)]
    sim: u64,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the cluster or stratum table, for designs that need one.
    #[arg(long)]
    table: Option<PathBuf>,
}

impl AnalyzeArgs {
    fn settings(self) -> Result<BTreeMap<String, String>> {
        let mut map = match &self.config {
            Some(p) => read_kv_file(p)?,
            None => BTreeMap::new(),
        };
        let flags = [
            ("data", self.data),
            ("response", self.response),
            ("covariates", self.covariates),
            ("proxy-map", self.proxy_map),
            ("label-col", self.label_col),
            ("pi", self.pi),
            ("pi-col", self.pi_col),
            ("cluster-col", self.cluster_col),
            ("cluster-pi", self.cluster_pi),
            ("stratum-col", self.stratum_col),
            ("stratum-counts", self.stratum_counts),
            ("estimator", self.estimator),
            ("q", self.q),
            ("intercept", self.intercept),
            ("method", self.method),
            ("B", self.b),
            ("alpha", self.alpha),
            ("tuning", self.tuning),
            ("seed", self.seed),
            ("out", self.out),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                map.insert(k.to_string(), v);
            }
        }
        Ok(map)
    }
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let cfg = RunConfig::from_map(&args.settings()?)?;
    let out = run_analysis(&cfg)?;
    eprintln!("runtime: {:.3}s", out.diagnostics.runtime);
    for w in &out.diagnostics.warnings {
        eprintln!("warning: {w}");
    }
    emit(cfg.out.as_deref(), &to_json(&out))
}

fn emit(path: Option<&std::path::Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let scenario = read_scenario(&args.scenario)?;
    let sim = run_simulation(&scenario)?;
    let timing = to_json(&sim.timing);
    match &args.out {
        Some(p) => {
            write_text(p, &sim.json)?;
            write_text(&timing_path(p), &timing)?;
        }
        None => {
            print!("{}", sim.json);
            eprint!("{timing}");
        }
    }
    let failed = sim.report.bands.iter().filter(|b| !b.pass).count();
    for b in sim.report.bands.iter().filter(|b| !b.pass) {
        eprintln!("band failed: {} {} {:?} not in [{:?}, {:?}]", b.method, b.metric, b.values, b.min, b.max);
    }
    if failed > 0 {
        return Err(CliError::BandsFailed(failed));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Simulate(s) => simulate(s),
        Command::Generate(g) => read_scenario(&g.scenario)
            .and_then(|s| generate(&s, g.sim, &g.out, g.table.as_deref()))
            .map(|_| ()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
