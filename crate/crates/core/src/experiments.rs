//! Synthetic and semi-synthetic evaluation sweeps.
//!
//! Each cell of a sweep (seed × sample size, or seed × confounding bound)
//! owns its random streams, so cells run in parallel and the merged output
//! does not depend on scheduling.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::estimate::{eval_outcome, fit, fit_baseline_with, EstimateError, FitOptions};
use crate::gaussian::{conditional_variance, psd_shrink, CovMatrix, GaussianError};
use crate::infer::{correction_weights, InferError};
use crate::model::{
    random_scm, sample, sample_regimes, AnmParams, CategoricalTable, CovariateLaw, Dataset, Interval, InterventionSet,
    ModelError, PolyBasis, Regime, StructuralEq, SymmetricAnm, ValuePolicy,
};
use crate::rng::{child_stream, stream_rng};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Bayes-optimal mean absolute error of the outcome given the noise of the
/// `observed` treatments: `√(2/π)` times the conditional standard deviation
/// of `U_Y`, which sits in the last slot of `sigma`.
pub fn oracle_mae(sigma: &CovMatrix, observed: &[usize]) -> Result<f64, GaussianError> {
    let y = sigma.dim() - 1;
    let var = if observed.is_empty() { sigma.get(y, y) } else { conditional_variance(sigma, y, observed)? };
    Ok((2.0 / PI).sqrt() * var.max(0.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ours,
    Baseline,
    Oracle,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ours, Method::Baseline, Method::Oracle];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Baseline => "baseline",
            Method::Oracle => "oracle",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ours" => Ok(Method::Ours),
            "baseline" => Ok(Method::Baseline),
            "oracle" => Ok(Method::Oracle),
            other => Err(ExperimentError::InvalidConfig(format!("unknown method {other}"))),
        }
    }
}

/// One scored (method, regime, cell). Error fields are `None` where they do
/// not apply or the fit failed.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub method: Method,
    pub regime: String,
    pub n: usize,
    pub seed: u64,
    /// Confounding bound of the stroke sweep.
    pub bound: Option<f64>,
    pub mae: Option<f64>,
    pub theta_mae: Option<f64>,
    pub sigma_mae: Option<f64>,
    pub converged: bool,
}

fn default_sizes() -> Vec<usize> {
    (5..=13).map(|i| 1usize << i).collect()
}

fn default_training() -> Vec<Vec<usize>> {
    vec![vec![], vec![0, 1], vec![1, 2], vec![2, 3]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub covariate_dim: usize,
    pub sample_sizes: Vec<usize>,
    pub training_regimes: Vec<Vec<usize>>,
    pub seeds: Vec<u64>,
    pub eval_draws: usize,
    pub theta_range: Interval,
    pub cov_range: Interval,
    /// Law of intervened treatment values in training and evaluation.
    pub intervention_policy: ValuePolicy,
    pub fit: FitOptions,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            k: 4,
            covariate_dim: 4,
            sample_sizes: default_sizes(),
            training_regimes: default_training(),
            seeds: (0..10).collect(),
            eval_draws: 10_000,
            theta_range: Interval::new(-2.0, 2.0),
            cov_range: Interval::new(-1.0, 1.0),
            intervention_policy: ValuePolicy::default(),
            fit: FitOptions::default(),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::InvalidConfig(m));
        if self.k == 0 {
            return bad("K must be at least 1".into());
        }
        if self.sample_sizes.is_empty() || self.seeds.is_empty() || self.eval_draws == 0 {
            return bad("sample_sizes, seeds and eval_draws must be non-empty".into());
        }
        if self.sample_sizes.iter().any(|&n| n < self.training_regimes.len()) {
            return bad("every sample size needs at least one record per training regime".into());
        }
        if let Some(r) = self.training_regimes.iter().find(|r| r.iter().any(|&i| i >= self.k)) {
            return bad(format!("training regime {r:?} names a treatment outside 0..{}", self.k));
        }
        if !self.training_regimes.iter().any(|r| r.is_empty()) {
            return bad("training regimes must include the observational regime".into());
        }
        if let Some(i) = (0..self.k).find(|i| !self.training_regimes.iter().any(|r| r.contains(i))) {
            return bad(format!("treatment {i} is never intervened on in training"));
        }
        Regime::with_policy(&[0].into_iter().collect(), self.intervention_policy).validate(self.k)?;
        self.fit.validate()?;
        Ok(())
    }
}

/// Scores one fitted model, its baseline and the truth on an evaluation set
/// drawn under `set`.
struct Scorer<'a> {
    truth: &'a AnmParams,
    fitted: Option<&'a AnmParams>,
    baseline: Option<&'a [f64]>,
}

impl Scorer<'_> {
    /// Mean absolute errors for (ours, baseline, oracle) over `eval`, where
    /// `observed` lists the non-intervened treatments.
    fn score(&self, eval: &Dataset, observed: &[usize]) -> Result<[Option<f64>; 3], ExperimentError> {
        let w_true = correction_weights(self.truth, observed)?;
        let w_fit = self.fitted.map(|p| correction_weights(p, observed)).transpose()?;
        let mut sums = [0.0; 3];
        for r in eval.records() {
            let c = &r.covariates;
            let x = &r.treatments;
            let predict = |p: &AnmParams, w: &nalgebra::DVector<f64>| -> Result<f64, ExperimentError> {
                let mut y = p.outcome_mean(c, x)?;
                for (wi, &i) in w.iter().zip(observed) {
                    y += wi * (x[i] - p.treatment_mean(i, c)?);
                }
                Ok(y)
            };
            if let (Some(p), Some(w)) = (self.fitted, &w_fit) {
                sums[0] += (r.outcome - predict(p, w)?).abs();
            }
            if let Some(b) = self.baseline {
                sums[1] += (r.outcome - eval_outcome(b, c, x)?).abs();
            }
            sums[2] += (r.outcome - predict(self.truth, &w_true)?).abs();
        }
        let n = eval.len() as f64;
        Ok([
            self.fitted.map(|_| sums[0] / n),
            self.baseline.map(|_| sums[1] / n),
            Some(sums[2] / n),
        ])
    }
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Output of one cell: records in (regime, method) order.
fn score_cell(
    truth: &AnmParams,
    train: &Dataset,
    evals: &[(InterventionSet, Dataset)],
    opts: &FitOptions,
    n: usize,
    seed: u64,
    bound: Option<f64>,
) -> Result<Vec<MetricsRecord>, ExperimentError> {
    let fitted = fit(train, opts);
    let baseline = fit_baseline_with(train, opts.rank_policy);
    let (params, converged) = match &fitted {
        Ok(r) => (Some(&r.params), r.converged),
        Err(_) => (None, false),
    };
    let base = baseline.as_ref().ok().map(|b| b.as_slice());
    let k = truth.treatments();
    let theta_true = truth.outcome_eq.theta();
    let scorer = Scorer { truth, fitted: params, baseline: base };
    let mut out = Vec::with_capacity(evals.len() * 3);
    for (set, eval) in evals {
        let observed: Vec<usize> = (0..k).filter(|&i| !set.contains(i)).collect();
        let maes = scorer.score(eval, &observed)?;
        for (m, mae) in Method::ALL.into_iter().zip(maes) {
            let (theta_mae, sigma_mae, ok) = match m {
                Method::Ours => (
                    params.map(|p| mean_abs(p.outcome_eq.theta(), theta_true)),
                    params.map(|p| p.sigma.mean_abs_diff(&truth.sigma)),
                    converged,
                ),
                Method::Baseline => (base.map(|b| mean_abs(b, theta_true)), None, base.is_some()),
                Method::Oracle => (None, None, true),
            };
            out.push(MetricsRecord { method: m, regime: set.to_string(), n, seed, bound, mae, theta_mae, sigma_mae, converged: ok });
        }
    }
    Ok(out)
}

/// The synthetic sweep. For every seed a random SCM is drawn; for every
/// sample size a pooled training set split evenly across the training
/// regimes is fitted, and all `2^K` intervention sets are scored on an
/// evaluation set shared by the sizes of that seed.
pub fn run_synthetic(cfg: &SyntheticConfig) -> Result<Vec<MetricsRecord>, ExperimentError> {
    cfg.validate()?;
    let cells: Vec<(u64, usize)> = cfg.seeds.iter().flat_map(|&s| cfg.sample_sizes.iter().map(move |&n| (s, n))).collect();
    let sets = InterventionSet::all_subsets(cfg.k);
    let per_seed: BTreeMap<u64, (SymmetricAnm, Vec<(InterventionSet, Dataset)>)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let scm = random_scm(cfg.k, cfg.covariate_dim, cfg.theta_range, cfg.cov_range, seed)?;
            let evals = sets
                .iter()
                .enumerate()
                .map(|(j, set)| {
                    let regime = Regime::with_policy(set, cfg.intervention_policy);
                    Ok((set.clone(), sample(&scm, &regime, cfg.eval_draws, child_stream(child_stream(seed, 2), j as u64))?))
                })
                .collect::<Result<Vec<_>, ModelError>>()?;
            Ok((seed, (scm, evals)))
        })
        .collect::<Result<_, ExperimentError>>()?;
    let results = cells
        .par_iter()
        .map(|&(seed, n)| {
            let (scm, evals) = &per_seed[&seed];
            let r = cfg.training_regimes.len();
            let plan: Vec<(Regime, usize)> = cfg
                .training_regimes
                .iter()
                .enumerate()
                .map(|(j, set)| {
                    let share = n / r + usize::from(j < n % r);
                    (Regime::with_policy(&set.iter().copied().collect(), cfg.intervention_policy), share)
                })
                .collect();
            let train = sample_regimes(scm, &plan, child_stream(child_stream(seed, 1), n as u64))?;
            score_cell(&scm.params, &train, evals, &cfg.fit, n, seed, None)
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    Ok(results.into_iter().flatten().collect())
}

/// Term order of the stroke outcome basis over `(S, A, C, α_a, α_h)`.
const STROKE_INPUTS: [&str; 5] = ["S", "A", "C", "a_a", "a_h"];

/// The stroke outcome polynomial as coefficients over the basis of
/// `(S, A, C, α_a, α_h)`.
pub fn stroke_outcome_theta() -> Vec<f64> {
    let terms: [(&str, f64); 12] = [
        ("1", -0.25),
        ("S", 0.1),
        ("A", -0.1),
        ("C", 0.25),
        ("a_a", 1.0),
        ("a_h", 0.75),
        ("S*A", -3.0),
        ("S*a_a", -0.1),
        ("A*a_a", -0.3),
        ("S*a_h", 0.1),
        ("A*a_h", 0.2),
        ("C*a_h", 0.3),
    ];
    let names = PolyBasis::new(5).term_names(&STROKE_INPUTS);
    let mut theta = vec![0.0; names.len()];
    for (t, v) in terms {
        theta[names.iter().position(|n| n == t).expect("term in basis")] = v;
    }
    theta[names.iter().position(|n| n == "a_a*a_h").expect("term in basis")] = -0.45;
    theta
}

/// Default covariate table over gender `S ∈ {0,1}`, age group `A ∈ {0,1}`
/// and conscious state `C ∈ {0,1,2}`.
pub fn default_stroke_table() -> CategoricalTable {
    let probs = [0.10, 0.09, 0.07, 0.09, 0.08, 0.07, 0.10, 0.09, 0.08, 0.08, 0.08, 0.07];
    let mut points = Vec::with_capacity(12);
    for s in 0..2 {
        for a in 0..2 {
            for c in 0..3 {
                points.push(vec![s as f64, a as f64, c as f64]);
            }
        }
    }
    CategoricalTable::new(points, probs.to_vec()).expect("default table is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrokeConfig {
    pub covariate_table: CategoricalTable,
    /// Per treatment (aspirin, heparin): intercept then coefficients of
    /// `S`, `A`, `C`.
    pub treatment_coefficients: Vec<Vec<f64>>,
    /// Coefficients over the basis of `(S, A, C, α_a, α_h)`.
    pub outcome_theta: Vec<f64>,
    pub bounds: Vec<f64>,
    /// Variance of every noise term before shrinkage.
    pub noise_variance: f64,
    pub n_obs: usize,
    pub n_joint: usize,
    pub n_eval: usize,
    pub seeds: Vec<u64>,
    pub intervention_policy: ValuePolicy,
    pub fit: FitOptions,
}

impl Default for StrokeConfig {
    fn default() -> Self {
        Self {
            covariate_table: default_stroke_table(),
            treatment_coefficients: vec![vec![0.0, 0.3, 0.3, 0.3]; 2],
            outcome_theta: stroke_outcome_theta(),
            bounds: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            noise_variance: 1.0,
            n_obs: 512,
            n_joint: 512,
            n_eval: 5000,
            seeds: (0..5).collect(),
            intervention_policy: ValuePolicy::default(),
            fit: FitOptions::default(),
        }
    }
}

impl StrokeConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::InvalidConfig(m));
        self.covariate_table.validate()?;
        if self.covariate_table.dim() != 3 {
            return bad(format!("covariate table has dimension {}, expected 3", self.covariate_table.dim()));
        }
        if self.treatment_coefficients.len() != 2 || self.treatment_coefficients.iter().any(|c| c.len() != 4) {
            return bad("treatment_coefficients must be two rows of four".into());
        }
        if self.outcome_theta.len() != PolyBasis::new(5).dim() {
            return bad(format!("outcome_theta must have {} entries", PolyBasis::new(5).dim()));
        }
        if self.bounds.is_empty() || self.bounds.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return bad("bounds must be a non-empty list in [0, 1]".into());
        }
        if !(self.noise_variance > 0.0) || !self.noise_variance.is_finite() {
            return bad("noise_variance must be positive".into());
        }
        if self.n_obs == 0 || self.n_joint == 0 || self.n_eval == 0 || self.seeds.is_empty() {
            return bad("sample counts and seeds must be non-empty".into());
        }
        Regime::with_policy(&[0].into_iter().collect(), self.intervention_policy).validate(2)?;
        self.fit.validate()?;
        Ok(())
    }

    /// The stroke SCM with noise covariance `sigma` over `(U_a, U_h, U_Y)`.
    pub fn scm(&self, sigma: CovMatrix) -> Result<SymmetricAnm, ExperimentError> {
        let tb = PolyBasis::new(3);
        let treatment_eqs = self
            .treatment_coefficients
            .iter()
            .map(|c| {
                let mut theta = c.clone();
                theta.resize(tb.dim(), 0.0);
                StructuralEq::new(tb, theta)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let outcome = StructuralEq::new(PolyBasis::new(5), self.outcome_theta.clone())?;
        Ok(SymmetricAnm::new(
            AnmParams::new(3, treatment_eqs, outcome, sigma)?,
            CovariateLaw::Categorical(self.covariate_table.clone()),
        )?)
    }

    /// Noise covariance for `bound`: unit-pattern off-diagonals drawn once
    /// per seed in `[-1, 1]` and scaled by `bound`, so a seed sees the same
    /// confounding direction at every bound; then shrunk to PSD.
    pub fn sigma(&self, bound: f64, seed: u64) -> Result<CovMatrix, ExperimentError> {
        let mut rng = stream_rng(seed, 0);
        let mut raw = nalgebra::DMatrix::from_diagonal_element(3, 3, self.noise_variance);
        for i in 0..3 {
            for j in (i + 1)..3 {
                let u: f64 = rand::Rng::random_range(&mut rng, -1.0..=1.0);
                raw[(i, j)] = bound * self.noise_variance * u;
                raw[(j, i)] = raw[(i, j)];
            }
        }
        Ok(psd_shrink(&raw)?.cov)
    }
}

/// The stroke sweep: for every bound and seed, fit on observational plus
/// joint-interventional data and score the single intervention on aspirin.
/// Training and evaluation draws of a seed are shared across bounds.
pub fn run_stroke(cfg: &StrokeConfig) -> Result<Vec<MetricsRecord>, ExperimentError> {
    cfg.validate()?;
    let cells: Vec<(usize, u64)> = (0..cfg.bounds.len()).flat_map(|b| cfg.seeds.iter().map(move |&s| (b, s))).collect();
    let both: InterventionSet = [0, 1].into_iter().collect();
    let aspirin: InterventionSet = [0].into_iter().collect();
    let results = cells
        .par_iter()
        .map(|&(b, seed)| {
            let bound = cfg.bounds[b];
            let scm = cfg.scm(cfg.sigma(bound, seed)?)?;
            let plan = [
                (Regime::observational(), cfg.n_obs),
                (Regime::with_policy(&both, cfg.intervention_policy), cfg.n_joint),
            ];
            let train = sample_regimes(&scm, &plan, child_stream(seed, 1))?;
            let eval = sample(&scm, &Regime::with_policy(&aspirin, cfg.intervention_policy), cfg.n_eval, child_stream(seed, 2))?;
            score_cell(&scm.params, &train, &[(aspirin.clone(), eval)], &cfg.fit, cfg.n_obs + cfg.n_joint, seed, Some(bound))
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    Ok(results.into_iter().flatten().collect())
}

/// Mean and 95% Student-t interval of one (method, regime, n, bound) group.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRecord {
    pub method: Method,
    pub regime: String,
    pub n: usize,
    pub bound: Option<f64>,
    /// Records with a finite MAE.
    pub count: usize,
    pub mae_mean: Option<f64>,
    /// Half-width of the interval; `None` with fewer than two records.
    pub mae_ci: Option<f64>,
    pub theta_mae_mean: Option<f64>,
    pub sigma_mae_mean: Option<f64>,
    pub converged_fraction: f64,
}

impl AggregateRecord {
    pub fn ci_low(&self) -> Option<f64> {
        Some(self.mae_mean? - self.mae_ci?)
    }

    pub fn ci_high(&self) -> Option<f64> {
        Some(self.mae_mean? + self.mae_ci?)
    }
}

/// Mean and half-width of a 95% Student-t interval.
pub fn mean_ci(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (Some(mean), None);
    }
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = StudentsT::new(0.0, 1.0, n - 1.0).expect("positive degrees of freedom").inverse_cdf(0.975);
    (Some(mean), Some(t * sd / n.sqrt()))
}

/// Groups records by (method, regime, n, bound) in first-seen order of the
/// sorted keys.
pub fn aggregate(records: &[MetricsRecord]) -> Vec<AggregateRecord> {
    type Key = (Method, String, usize, Option<u64>);
    let mut groups: BTreeMap<Key, Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.method, r.regime.clone(), r.n, r.bound.map(f64::to_bits))).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((method, regime, n, bound), rs)| {
            let maes: Vec<f64> = rs.iter().filter_map(|r| r.mae).collect();
            let (mae_mean, mae_ci) = mean_ci(&maes);
            let mean_of = |f: fn(&MetricsRecord) -> Option<f64>| mean_ci(&rs.iter().filter_map(|r| f(r)).collect::<Vec<_>>()).0;
            AggregateRecord {
                method,
                regime,
                n,
                bound: bound.map(f64::from_bits),
                count: maes.len(),
                mae_mean,
                mae_ci,
                theta_mae_mean: mean_of(|r| r.theta_mae),
                sigma_mae_mean: mean_of(|r| r.sigma_mae),
                converged_fraction: rs.iter().filter(|r| r.converged).count() as f64 / rs.len() as f64,
            }
        })
        .collect()
}

/// Round-trippable float text; empty for missing values.
pub fn fmt_float(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.16e}"))
}

fn parse_float(s: &str) -> Result<Option<f64>, ExperimentError> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| ExperimentError::InvalidConfig(format!("bad number {s:?}")))
}

pub const METRICS_HEADER: [&str; 9] = ["method", "regime", "n", "seed", "bound", "mae", "theta_mae", "sigma_mae", "converged"];

pub fn write_metrics_csv<W: Write>(w: W, records: &[MetricsRecord]) -> Result<(), ExperimentError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(METRICS_HEADER)?;
    for r in records {
        out.write_record([
            r.method.as_str().to_string(),
            r.regime.clone(),
            r.n.to_string(),
            r.seed.to_string(),
            fmt_float(r.bound),
            fmt_float(r.mae),
            fmt_float(r.theta_mae),
            fmt_float(r.sigma_mae),
            r.converged.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(r: R) -> Result<Vec<MetricsRecord>, ExperimentError> {
    let mut rdr = csv::Reader::from_reader(r);
    if rdr.headers()?.iter().ne(METRICS_HEADER) {
        return Err(ExperimentError::InvalidConfig(format!("metrics header must be {}", METRICS_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row?;
        let at = |e: ExperimentError| ExperimentError::InvalidConfig(format!("line {}: {e}", line + 2));
        let int = |s: &str| s.parse::<u64>().map_err(|_| at(ExperimentError::InvalidConfig(format!("bad integer {s:?}"))));
        out.push(MetricsRecord {
            method: row[0].parse().map_err(at)?,
            regime: row[1].to_string(),
            n: int(&row[2])? as usize,
            seed: int(&row[3])?,
            bound: parse_float(&row[4]).map_err(at)?,
            mae: parse_float(&row[5]).map_err(at)?,
            theta_mae: parse_float(&row[6]).map_err(at)?,
            sigma_mae: parse_float(&row[7]).map_err(at)?,
            converged: row[8].parse().map_err(|_| at(ExperimentError::InvalidConfig(format!("bad flag {:?}", &row[8]))))?,
        });
    }
    Ok(out)
}

pub const AGGREGATE_HEADER: [&str; 12] = [
    "method",
    "regime",
    "n",
    "bound",
    "count",
    "mae_mean",
    "mae_ci_half_width",
    "mae_ci_low",
    "mae_ci_high",
    "theta_mae_mean",
    "sigma_mae_mean",
    "converged_fraction",
];

pub fn write_aggregate_csv<W: Write>(w: W, rows: &[AggregateRecord]) -> Result<(), ExperimentError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(AGGREGATE_HEADER)?;
    for r in rows {
        out.write_record([
            r.method.as_str().to_string(),
            r.regime.clone(),
            r.n.to_string(),
            fmt_float(r.bound),
            r.count.to_string(),
            fmt_float(r.mae_mean),
            fmt_float(r.mae_ci),
            fmt_float(r.ci_low()),
            fmt_float(r.ci_high()),
            fmt_float(r.theta_mae_mean),
            fmt_float(r.sigma_mae_mean),
            fmt_float(Some(r.converged_fraction)),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Text table of mean MAE: one row per (regime, n, bound), one column per
/// method.
pub fn format_table(rows: &[AggregateRecord]) -> String {
    let mut grid: BTreeMap<(Option<u64>, usize, String), [Option<f64>; 3]> = BTreeMap::new();
    for r in rows {
        let slot = Method::ALL.iter().position(|m| *m == r.method).expect("known method");
        grid.entry((r.bound.map(f64::to_bits), r.n, r.regime.clone())).or_default()[slot] = r.mae_mean;
    }
    let with_bound = rows.iter().any(|r| r.bound.is_some());
    let mut s = String::new();
    if with_bound {
        s.push_str(&format!("{:>6} ", "bound"));
    }
    s.push_str(&format!("{:>6} {:<14} {:>10} {:>10} {:>10}\n", "n", "regime", "ours", "baseline", "oracle"));
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    for ((bound, n, regime), v) in grid {
        if with_bound {
            s.push_str(&format!("{:>6} ", bound.map_or_else(|| "-".into(), |b| format!("{:.2}", f64::from_bits(b)))));
        }
        s.push_str(&format!("{n:>6} {regime:<14} {:>10} {:>10} {:>10}\n", cell(v[0]), cell(v[1]), cell(v[2])));
    }
    s
}
