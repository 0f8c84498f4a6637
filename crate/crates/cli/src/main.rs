use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use disentangle::estimate::{fit, fit_baseline_with, FitOptions, FitReport, FitReportJson};
use disentangle::experiments::{
    aggregate, format_table, read_metrics_csv, run_stroke, run_synthetic, write_aggregate_csv, write_metrics_csv,
    MetricsRecord, StrokeConfig, SyntheticConfig,
};
use disentangle::gaussian::CovMatrix;
use disentangle::identify::{verify_cu_dependence, verify_gaussian_pair, verify_discrete_pair, VerifyReport, VerifyStatus};
use disentangle::infer::{cate, decompose, Query};
use disentangle::io::{pool_files, write_dataset_file, ScmJson};
use disentangle::model::{random_scm, sample, CovariateLaw, Interval, InterventionSet, Regime, SymmetricAnm, ValuePolicy};
use disentangle::rng::child_stream;

#[derive(Parser)]
#[command(name = "disentangle", version, about = "Fit symmetric additive-noise causal models and predict single-intervention outcomes")]
struct Cli {
    /// Suppress human-readable summaries on stdout.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a random SCM and sample one dataset CSV per configured regime.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the model to one or more dataset CSVs.
    Fit {
        /// Dataset CSV files; pooled before fitting.
        #[arg(required = true)]
        data: Vec<PathBuf>,
        /// Fit options JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also fit the pooled regression baseline.
        #[arg(long)]
        baseline: bool,
    },
    /// Predict the mean outcome of a query from a fitted model.
    Predict {
        /// fit.json written by `fit`.
        #[arg(long)]
        fit: PathBuf,
        /// Query JSON: {"c": [...], "do": {"i": v}, "obs": {"j": v}}.
        #[arg(long)]
        query: PathBuf,
        /// Average over the other treatments (query must intervene on exactly one).
        #[arg(long)]
        cate: bool,
        #[arg(long, default_value_t = 10_000)]
        n_mc: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Drop the noise conditioning term.
        #[arg(long)]
        no_correction: bool,
    },
    /// Check the counterexample models.
    Verify(VerifyArgs),
    /// Run an evaluation sweep.
    Experiment {
        kind: ExperimentKind,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads for experiment cells (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Aggregate a raw metrics CSV and print the summary table.
    Report {
        metrics: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct VerifyArgs {
    which: Which,
    /// Bernoulli parameter of the discrete counterexamples.
    #[arg(long, default_value_t = 0.3)]
    p: f64,
    /// Monte Carlo draws for the Gaussian counterexample.
    #[arg(long, default_value_t = 200_000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    All,
    S31,
    G32,
    Cu,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentKind {
    Synthetic,
    Stroke,
}

/// Failure classes, one per exit code.
enum Failure {
    Usage(anyhow::Error),
    Verification(String),
    Numerical(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Verification(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

type Outcome = Result<(), Failure>;

fn numerical<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Numerical(e.into())
}

/// Reads a JSON config, naming the offending field on schema violations.
fn load_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        anyhow!("{}: at `{}`: {}", path.display(), at, e.into_inner())
    })
}

fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    path.map_or_else(|| Ok(T::default()), load_json)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegimeSpec {
    #[serde(default)]
    intervened: Vec<usize>,
    n: usize,
    #[serde(default)]
    policy: ValuePolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenConfig {
    #[serde(rename = "K")]
    k: usize,
    covariate_dim: usize,
    theta_range: Interval,
    cov_range: Interval,
    /// Multiplies the drawn noise covariance; 0 gives a noiseless SCM.
    noise_scale: f64,
    /// Replaces the default standard normal covariates.
    covariate_law: Option<CovariateLaw>,
    regimes: Vec<RegimeSpec>,
}

impl Default for GenConfig {
    fn default() -> Self {
        let regime = |intervened: Vec<usize>| RegimeSpec { intervened, n: 2048, policy: ValuePolicy::default() };
        Self {
            k: 4,
            covariate_dim: 4,
            theta_range: Interval::new(-2.0, 2.0),
            cov_range: Interval::new(-1.0, 1.0),
            noise_scale: 1.0,
            covariate_law: None,
            regimes: vec![regime(vec![]), regime(vec![0, 1]), regime(vec![1, 2]), regime(vec![2, 3])],
        }
    }
}

impl GenConfig {
    fn validate(&self) -> anyhow::Result<()> {
        if self.k == 0 {
            bail!("K must be at least 1");
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            bail!("noise_scale must be a finite nonnegative number");
        }
        if let Some(law) = &self.covariate_law {
            if law.dim() != self.covariate_dim {
                bail!("covariate_law has dimension {}, covariate_dim is {}", law.dim(), self.covariate_dim);
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for (j, r) in self.regimes.iter().enumerate() {
            if !seen.insert(r.intervened.iter().copied().collect::<InterventionSet>()) {
                bail!("regimes[{j}] repeats an earlier intervention set");
            }
            Regime::with_policy(&r.intervened.iter().copied().collect(), r.policy)
                .validate(self.k)
                .with_context(|| format!("regimes[{j}]"))?;
        }
        Ok(())
    }
}

fn regime_file_name(set: &InterventionSet) -> String {
    if set.is_empty() {
        "data_obs.csv".into()
    } else {
        let idx: Vec<String> = set.iter().map(|i| i.to_string()).collect();
        format!("data_do_{}.csv", idx.join("_"))
    }
}

fn cmd_gen(config: Option<&Path>, seed: u64, out: &Path, quiet: bool) -> Outcome {
    let cfg: GenConfig = load_or_default(config)?;
    cfg.validate()?;
    ensure_dir(out)?;
    let drawn = random_scm(cfg.k, cfg.covariate_dim, cfg.theta_range, cfg.cov_range, seed).map_err(|e| Failure::Usage(e.into()))?;
    let sigma = CovMatrix::new(drawn.params.sigma.matrix() * cfg.noise_scale).map_err(numerical)?;
    let law = cfg.covariate_law.clone().unwrap_or(drawn.covariate_law);
    let scm = SymmetricAnm::new(drawn.params.with_sigma(sigma), law).map_err(|e| Failure::Usage(e.into()))?;
    write_json(&out.join("scm.json"), &ScmJson::from(&scm))?;
    for (j, spec) in cfg.regimes.iter().enumerate() {
        let set: InterventionSet = spec.intervened.iter().copied().collect();
        let data = sample(&scm, &Regime::with_policy(&set, spec.policy), spec.n, child_stream(seed, 1 + j as u64))
            .map_err(numerical)?;
        let path = out.join(regime_file_name(&set));
        write_dataset_file(&path, &data).with_context(|| format!("writing {}", path.display()))?;
        if !quiet {
            println!("{set}: {} records -> {}", spec.n, path.display());
        }
    }
    Ok(())
}

fn cmd_fit(data: &[PathBuf], config: Option<&Path>, out: &Path, baseline: bool, quiet: bool) -> Outcome {
    let opts: FitOptions = load_or_default(config)?;
    opts.validate().map_err(|e| Failure::Usage(e.into()))?;
    let paths: Vec<&Path> = data.iter().map(PathBuf::as_path).collect();
    let pooled = pool_files(&paths).map_err(|e| Failure::Usage(e.into()))?;
    ensure_dir(out)?;
    let report = fit(&pooled, &opts).map_err(numerical)?;
    write_json(&out.join("fit.json"), &FitReportJson::from(&report))?;
    if !quiet {
        println!("records: {} in {} regimes", pooled.len(), pooled.regimes().len());
        println!("final log-likelihood: {:.6}", report.ll_trace.last().copied().unwrap_or(f64::NAN));
        println!("iterations: {}", report.iterations);
        println!("converged: {}", report.converged);
        if !report.unfitted.is_empty() {
            println!("never observed, left at initial value: {:?}", report.unfitted);
        }
    }
    if baseline {
        let theta = fit_baseline_with(&pooled, opts.rank_policy).map_err(numerical)?;
        #[derive(Serialize)]
        struct BaselineJson<'a> {
            #[serde(rename = "K")]
            k: usize,
            covariate_dim: usize,
            outcome: &'a [f64],
        }
        write_json(
            &out.join("baseline_fit.json"),
            &BaselineJson { k: pooled.treatments(), covariate_dim: pooled.covariate_dim(), outcome: &theta },
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Prediction {
    prediction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    structural: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    correction: Option<f64>,
}

fn cmd_predict(fit_path: &Path, query_path: &Path, use_cate: bool, n_mc: usize, seed: u64, no_correction: bool) -> Outcome {
    let report: FitReport = load_json::<FitReportJson>(fit_path)?
        .try_into()
        .map_err(|e: disentangle::estimate::EstimateError| Failure::Usage(anyhow!("{}: {e}", fit_path.display())))?;
    let params = &report.params;
    let query: Query = load_json(query_path)?;
    let invalid = |e: disentangle::infer::InferError| Failure::Usage(anyhow!("{}: {e}", query_path.display()));
    let out = if use_cate {
        let single = query.intervened.len() == 1 && query.observed.is_empty();
        if !single || query.intervened.keys().any(|&i| i >= params.treatments()) {
            return Err(Failure::Usage(anyhow!(
                "{}: --cate needs exactly one intervened treatment below K = {} and no observed ones",
                query_path.display(),
                params.treatments()
            )));
        }
        if query.c.len() != params.covariate_dim {
            return Err(Failure::Usage(anyhow!("{}: c has {} entries, expected {}", query_path.display(), query.c.len(), params.covariate_dim)));
        }
        if n_mc == 0 {
            return Err(Failure::Usage(anyhow!("--n-mc must be at least 1")));
        }
        let (&i, &x) = query.intervened.iter().next().expect("one entry");
        Prediction { prediction: cate(params, &query.c, i, x, n_mc, seed).map_err(numerical)?, structural: None, correction: None }
    } else {
        query.validate(params.treatments(), params.covariate_dim).map_err(invalid)?;
        let d = decompose(params, &query).map_err(numerical)?;
        if no_correction {
            Prediction { prediction: d.structural, structural: Some(d.structural), correction: None }
        } else {
            Prediction { prediction: d.total(), structural: Some(d.structural), correction: Some(d.correction) }
        }
    };
    println!("{}", serde_json::to_string(&out).map_err(|e| Failure::Usage(e.into()))?);
    Ok(())
}

fn cmd_verify(args: &VerifyArgs, quiet: bool) -> Outcome {
    let mut reports: Vec<(&str, VerifyReport)> = Vec::new();
    let bad_param = |e: disentangle::identify::IdentifyError| Failure::Usage(e.into());
    if matches!(args.which, Which::All | Which::S31) {
        reports.push(("s31", verify_discrete_pair(args.p).map_err(bad_param)?));
    }
    if matches!(args.which, Which::All | Which::G32) {
        reports.push(("g32", verify_gaussian_pair(args.n, args.seed).map_err(bad_param)?));
    }
    if matches!(args.which, Which::All | Which::Cu) {
        reports.push(("cu", verify_cu_dependence(args.p).map_err(bad_param)?));
    }
    if let Some(out) = &args.out {
        ensure_dir(out)?;
        for (name, r) in &reports {
            write_json(&out.join(format!("verify_{name}.json")), r)?;
        }
    }
    let mut failing = Vec::new();
    for (name, r) in &reports {
        if !quiet {
            println!("{name}: {:?} ({} checks)", r.status, r.checks.len());
            for note in &r.notes {
                println!("  note: {note}");
            }
        }
        if r.status == VerifyStatus::Fail {
            for c in r.checks.iter().filter(|c| !c.pass) {
                failing.push(format!("{name}: {} {}", c.regime, c.quantity));
            }
        }
    }
    if failing.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!("relation violated in {}", failing.join("; "))))
    }
}

fn write_metrics(out: &Path, records: &[MetricsRecord], quiet: bool) -> Outcome {
    ensure_dir(out)?;
    let raw = out.join("metrics.csv");
    write_metrics_csv(fs::File::create(&raw).with_context(|| format!("writing {}", raw.display()))?, records)
        .map_err(|e| Failure::Usage(e.into()))?;
    let agg = aggregate(records);
    let path = out.join("aggregate.csv");
    write_aggregate_csv(fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?, &agg)
        .map_err(|e| Failure::Usage(e.into()))?;
    if !quiet {
        print!("{}", format_table(&agg));
        std::io::stdout().flush().ok();
    }
    Ok(())
}

fn cmd_experiment(kind: ExperimentKind, config: Option<&Path>, out: &Path, quiet: bool) -> Outcome {
    let run = |r: Result<Vec<MetricsRecord>, disentangle::experiments::ExperimentError>| {
        r.map_err(|e| match e {
            disentangle::experiments::ExperimentError::InvalidConfig(_) => Failure::Usage(e.into()),
            other => numerical(other),
        })
    };
    let records = match kind {
        ExperimentKind::Synthetic => {
            let cfg: SyntheticConfig = load_or_default(config)?;
            cfg.validate().map_err(|e| Failure::Usage(e.into()))?;
            run(run_synthetic(&cfg))?
        }
        ExperimentKind::Stroke => {
            let cfg: StrokeConfig = load_or_default(config)?;
            cfg.validate().map_err(|e| Failure::Usage(e.into()))?;
            run(run_stroke(&cfg))?
        }
    };
    write_metrics(out, &records, quiet)
}

fn cmd_report(metrics: &Path, out: Option<&Path>, quiet: bool) -> Outcome {
    let file = fs::File::open(metrics).with_context(|| format!("reading {}", metrics.display()))?;
    let records = read_metrics_csv(file).map_err(|e| Failure::Usage(anyhow!("{}: {e}", metrics.display())))?;
    let agg = aggregate(&records);
    if let Some(out) = out {
        ensure_dir(out)?;
        let path = out.join("aggregate.csv");
        write_aggregate_csv(fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?, &agg)
            .map_err(|e| Failure::Usage(e.into()))?;
    }
    if !quiet {
        print!("{}", format_table(&agg));
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    // only experiment cells run in parallel
    let threads = match &cli.command {
        Command::Experiment { threads, .. } => threads.unwrap_or(0),
        _ => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Usage(anyhow!("thread pool: {e}")))?;
    let quiet = cli.quiet;
    match cli.command {
        Command::Gen { config, seed, out } => cmd_gen(config.as_deref(), seed, &out, quiet),
        Command::Fit { data, config, out, baseline } => cmd_fit(&data, config.as_deref(), &out, baseline, quiet),
        Command::Predict { fit, query, cate, n_mc, seed, no_correction } => {
            cmd_predict(&fit, &query, cate, n_mc, seed, no_correction)
        }
        Command::Verify(args) => cmd_verify(&args, quiet),
        Command::Experiment { kind, config, out, .. } => cmd_experiment(kind, config.as_deref(), &out, quiet),
        Command::Report { metrics, out } => cmd_report(&metrics, out.as_deref(), quiet),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let code = f.code();
            match f {
                Failure::Usage(e) | Failure::Numerical(e) => eprintln!("error: {e:#}"),
                Failure::Verification(m) => eprintln!("verification failed: {m}"),
            }
            ExitCode::from(code)
        }
    }
}
