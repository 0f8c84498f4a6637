//! Maximum-likelihood estimation of a symmetric ANM from pooled multi-regime
//! data.
//!
//! Each record contributes a Gaussian likelihood term over the residuals
//! of the variables that were *not* intervened on in its regime (the outcome
//! is never intervened on). With `Σ` fixed, every structural equation is
//! linear in its coefficients, so the negative log-likelihood is a convex
//! quadratic in `θ`, maximized either exactly or with Adam. With `θ` fixed,
//! `Σ` is re-estimated from the residuals, skipping the cells of intervened
//! variables.
//!
//! Plain alternation between the two steps converges very slowly when `Σ`
//! is close to singular, so the default search profiles `θ` out and runs
//! L-BFGS over a square root of `Σ` after a first alternating sweep.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::{em_cov, mle_cov, CovMatrix, GaussianError, ResidualTable};
use crate::model::{concat, dot, AnmParams, Dataset, ModelError, PolyBasis, StructuralEq};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error("dataset has no records")]
    EmptyDataset,
    #[error("record {record}: {reason}")]
    InvalidData { record: usize, reason: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("equation {equation} is underdetermined by the available records")]
    Underdetermined { equation: String },
    #[error("optimizer diverged after {} steps", trace.len())]
    OptimizationFailure { trace: Vec<f64> },
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which Gaussian density each record contributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    /// Joint density of the non-intervened residuals under the matching
    /// principal submatrix of `Σ`.
    #[default]
    Joint,
    /// Product of univariate densities with the marginal variances `σ_vv`.
    Marginal,
}

/// How the θ-step maximizes the likelihood for fixed `Σ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaSolver {
    /// Adam on the analytic gradient.
    Adam,
    /// Normal equations of the quadratic objective.
    #[default]
    Exact,
}

/// How the Σ-step estimates the noise covariance for fixed `θ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaStep {
    /// Pairwise-complete second moments of the masked residuals.
    Pairwise,
    /// Missing-data maximum likelihood by EM, warm-started from the previous
    /// estimate.
    #[default]
    Em,
}

/// Outer strategy of [`fit`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    /// Alternate the θ-step and the Σ-step until the log-likelihood settles.
    Alternating,
    /// One alternating sweep, then L-BFGS on the likelihood profiled over
    /// `θ` (a function of `Σ` alone), parameterized by a square root of `Σ`.
    #[default]
    Profile,
}

/// What the exact θ-step does when the records do not pin down every
/// coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankPolicy {
    /// Report [`EstimateError::Underdetermined`].
    Error,
    /// Take the minimum-norm minimizer, the point gradient descent from
    /// zero converges to.
    #[default]
    MinNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub epsilon: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Outer loop: per-record log-likelihood change. Inner loop: gradient
    /// norm of the per-record objective.
    pub tolerance: f64,
    /// Floor on variances (marginal) or eigenvalues (joint) of the noise
    /// blocks inside the likelihood.
    pub variance_floor: f64,
    pub likelihood: Likelihood,
    pub solver: ThetaSolver,
    pub sigma_step: SigmaStep,
    pub method: FitMethod,
    /// Iteration cap of the profile search.
    pub max_profile_iter: usize,
    pub rank_policy: RankPolicy,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            betas: (0.9, 0.999),
            epsilon: 1e-8,
            max_outer: 50,
            max_inner: 5000,
            tolerance: 1e-6,
            variance_floor: 1e-6,
            likelihood: Likelihood::Joint,
            solver: ThetaSolver::Exact,
            sigma_step: SigmaStep::Em,
            method: FitMethod::Profile,
            max_profile_iter: 1000,
            rank_policy: RankPolicy::MinNorm,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<(), EstimateError> {
        let bad = |m: &str| Err(EstimateError::InvalidOptions(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        let (b1, b2) = self.betas;
        if !(b1 > 0.0 && b1 < 1.0 && b2 > 0.0 && b2 < 1.0) {
            return bad("betas must lie in (0, 1)");
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be positive");
        }
        if !(self.epsilon > 0.0) || !(self.variance_floor > 0.0) {
            return bad("epsilon and variance_floor must be positive");
        }
        if self.max_outer == 0 || self.max_inner == 0 || self.max_profile_iter == 0 {
            return bad("iteration limits must be at least 1");
        }
        Ok(())
    }
}

/// Output of [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub params: AnmParams,
    /// Total log-likelihood after each outer iteration.
    pub ll_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Treatments whose equation had no non-intervened records and was left
    /// at its initial value.
    pub unfitted: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaJson {
    pub treatments: Vec<Vec<f64>>,
    pub outcome: Vec<f64>,
}

/// Serialized form of a [`FitReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitReportJson {
    #[serde(rename = "K")]
    pub k: usize,
    pub covariate_dim: usize,
    pub theta: ThetaJson,
    pub sigma: CovMatrix,
    pub ll_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    #[serde(default)]
    pub unfitted: Vec<usize>,
}

impl From<&FitReport> for FitReportJson {
    fn from(r: &FitReport) -> Self {
        let mut thetas = r.params.thetas();
        let outcome = thetas.pop().unwrap_or_default();
        Self {
            k: r.params.treatments(),
            covariate_dim: r.params.covariate_dim,
            theta: ThetaJson { treatments: thetas, outcome },
            sigma: r.params.sigma.clone(),
            ll_trace: r.ll_trace.clone(),
            converged: r.converged,
            iterations: r.iterations,
            unfitted: r.unfitted.clone(),
        }
    }
}

impl TryFrom<FitReportJson> for FitReport {
    type Error = EstimateError;

    fn try_from(j: FitReportJson) -> Result<Self, EstimateError> {
        if j.theta.treatments.len() != j.k {
            return Err(EstimateError::DimensionMismatch(format!(
                "K = {} but {} treatment coefficient vectors",
                j.k,
                j.theta.treatments.len()
            )));
        }
        let tb = PolyBasis::new(j.covariate_dim);
        let treatment_eqs = j
            .theta
            .treatments
            .into_iter()
            .map(|t| StructuralEq::new(tb, t))
            .collect::<Result<Vec<_>, _>>()?;
        let outcome_eq = StructuralEq::new(PolyBasis::new(j.covariate_dim + j.k), j.theta.outcome)?;
        let params = AnmParams::new(j.covariate_dim, treatment_eqs, outcome_eq, j.sigma)?;
        Ok(FitReport {
            params,
            ll_trace: j.ll_trace,
            converged: j.converged,
            iterations: j.iterations,
            unfitted: j.unfitted,
        })
    }
}

fn check_dims(data: &Dataset, params: &AnmParams) -> Result<(), EstimateError> {
    if data.treatments() != params.treatments() || data.covariate_dim() != params.covariate_dim {
        return Err(EstimateError::DimensionMismatch(format!(
            "data has K={}, |C|={}; model has K={}, |C|={}",
            data.treatments(),
            data.covariate_dim(),
            params.treatments(),
            params.covariate_dim
        )));
    }
    Ok(())
}

/// Slots (treatment indices, then `K` for the outcome) that contribute a
/// likelihood term under the given intervention flags.
fn active_slots(intervened: &[bool]) -> Vec<usize> {
    intervened
        .iter()
        .enumerate()
        .filter(|(_, &f)| !f)
        .map(|(i, _)| i)
        .chain(std::iter::once(intervened.len()))
        .collect()
}

/// Precision matrix and log-determinant of the noise block over `slots`.
#[derive(Debug, Clone)]
struct BlockDensity {
    precision: DMatrix<f64>,
    log_det: f64,
}

impl BlockDensity {
    fn new(sigma: &CovMatrix, slots: &[usize], kind: Likelihood, floor: f64) -> Self {
        match kind {
            Likelihood::Marginal => {
                let vars: Vec<f64> = slots.iter().map(|&s| sigma.get(s, s).max(floor)).collect();
                Self {
                    precision: DMatrix::from_diagonal(&DVector::from_iterator(vars.len(), vars.iter().map(|v| 1.0 / v))),
                    log_det: vars.iter().map(|v| v.ln()).sum(),
                }
            }
            Likelihood::Joint => {
                let eig = SymmetricEigen::new(sigma.submatrix(slots));
                let vals = eig.eigenvalues.map(|v| v.max(floor));
                let inv = vals.map(|v| 1.0 / v);
                let precision = &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose();
                Self { precision: (&precision + precision.transpose()) * 0.5, log_det: vals.iter().map(|v| v.ln()).sum() }
            }
        }
    }

    fn log_density(&self, r: &DVector<f64>) -> f64 {
        let quad = r.dot(&(&self.precision * r));
        -0.5 * (quad + self.log_det + r.len() as f64 * (2.0 * PI).ln())
    }
}

fn record_residuals(params: &AnmParams, rec: &crate::model::Record, slots: &[usize]) -> Result<Vec<f64>, ModelError> {
    let k = params.treatments();
    slots
        .iter()
        .map(|&s| {
            if s == k {
                Ok(rec.outcome - params.outcome_mean(&rec.covariates, &rec.treatments)?)
            } else {
                Ok(rec.treatments[s] - params.treatment_mean(s, &rec.covariates)?)
            }
        })
        .collect()
}

/// Pooled log-likelihood of `data` (sum over records).
pub fn log_likelihood(data: &Dataset, params: &AnmParams, kind: Likelihood, floor: f64) -> Result<f64, EstimateError> {
    check_dims(data, params)?;
    let mut cache: BTreeMap<Vec<bool>, (Vec<usize>, BlockDensity)> = BTreeMap::new();
    let mut total = 0.0;
    for (idx, rec) in data.records().iter().enumerate() {
        let (slots, density) = cache.entry(rec.intervened.clone()).or_insert_with(|| {
            let slots = active_slots(&rec.intervened);
            let d = BlockDensity::new(&params.sigma, &slots, kind, floor);
            (slots, d)
        });
        let r = record_residuals(params, rec, slots)?;
        if r.iter().any(|v| !v.is_finite()) {
            return Err(EstimateError::InvalidData { record: idx, reason: "non-finite residual".into() });
        }
        total += density.log_density(&DVector::from_vec(r));
    }
    Ok(total)
}

/// Gradient of [`log_likelihood`] with respect to each equation's
/// coefficients (treatments first, outcome last), accumulated record by
/// record.
pub fn log_likelihood_gradient(
    data: &Dataset,
    params: &AnmParams,
    kind: Likelihood,
    floor: f64,
) -> Result<Vec<Vec<f64>>, EstimateError> {
    check_dims(data, params)?;
    let k = params.treatments();
    let mut grad: Vec<Vec<f64>> = params.thetas().iter().map(|t| vec![0.0; t.len()]).collect();
    let tb = PolyBasis::new(params.covariate_dim);
    let ob = PolyBasis::new(params.covariate_dim + k);
    let mut cache: BTreeMap<Vec<bool>, (Vec<usize>, BlockDensity)> = BTreeMap::new();
    for rec in data.records() {
        let (slots, density) = cache.entry(rec.intervened.clone()).or_insert_with(|| {
            let slots = active_slots(&rec.intervened);
            let d = BlockDensity::new(&params.sigma, &slots, kind, floor);
            (slots, d)
        });
        let r = DVector::from_vec(record_residuals(params, rec, slots)?);
        let weighted = &density.precision * r;
        let phi_c = tb.features(&rec.covariates)?;
        let phi_y = ob.features(&concat(&rec.covariates, &rec.treatments))?;
        for (a, &s) in slots.iter().enumerate() {
            let phi = if s == k { &phi_y } else { &phi_c };
            for (g, f) in grad[s].iter_mut().zip(phi) {
                *g += weighted[a] * f;
            }
        }
    }
    Ok(grad)
}

/// Sufficient statistics of one intervention pattern: feature moments and
/// target cross-moments, independent of `θ` and `Σ`.
#[derive(Debug, Clone)]
struct PatternMoments {
    slots: Vec<usize>,
    count: usize,
    cc: DMatrix<f64>,
    cy: DMatrix<f64>,
    yy: DMatrix<f64>,
    /// Σ φ_c t_w per slot position (columns).
    ct: DMatrix<f64>,
    /// Σ φ_y t_w per slot position (columns).
    yt: DMatrix<f64>,
    /// Σ t_v t_w over slot positions.
    tt: DMatrix<f64>,
}

/// Precomputed moments of a dataset; turns the θ-step into a quadratic.
#[derive(Debug, Clone)]
pub struct Design {
    k: usize,
    p_t: usize,
    p_y: usize,
    n: usize,
    patterns: Vec<PatternMoments>,
}

impl Design {
    pub fn new(data: &Dataset) -> Result<Self, EstimateError> {
        if data.is_empty() {
            return Err(EstimateError::EmptyDataset);
        }
        let k = data.treatments();
        let tb = PolyBasis::new(data.covariate_dim());
        let ob = PolyBasis::new(data.covariate_dim() + k);
        let (p_t, p_y) = (tb.dim(), ob.dim());
        let mut by_pattern: BTreeMap<Vec<bool>, PatternMoments> = BTreeMap::new();
        let mut phi_c = Vec::new();
        let mut phi_y = Vec::new();
        for (idx, rec) in data.records().iter().enumerate() {
            let m = by_pattern.entry(rec.intervened.clone()).or_insert_with(|| {
                let slots = active_slots(&rec.intervened);
                let s = slots.len();
                PatternMoments {
                    slots,
                    count: 0,
                    cc: DMatrix::zeros(p_t, p_t),
                    cy: DMatrix::zeros(p_t, p_y),
                    yy: DMatrix::zeros(p_y, p_y),
                    ct: DMatrix::zeros(p_t, s),
                    yt: DMatrix::zeros(p_y, s),
                    tt: DMatrix::zeros(s, s),
                }
            });
            tb.features_into(&rec.covariates, &mut phi_c)?;
            ob.features_into(&concat(&rec.covariates, &rec.treatments), &mut phi_y)?;
            let targets: Vec<f64> =
                m.slots.iter().map(|&s| if s == k { rec.outcome } else { rec.treatments[s] }).collect();
            if targets.iter().chain(&phi_c).chain(&phi_y).any(|v| !v.is_finite()) {
                return Err(EstimateError::InvalidData { record: idx, reason: "non-finite value".into() });
            }
            let fc = DVector::from_column_slice(&phi_c);
            let fy = DVector::from_column_slice(&phi_y);
            let t = DVector::from_column_slice(&targets);
            m.count += 1;
            m.cc.ger(1.0, &fc, &fc, 1.0);
            m.cy.ger(1.0, &fc, &fy, 1.0);
            m.yy.ger(1.0, &fy, &fy, 1.0);
            m.ct.ger(1.0, &fc, &t, 1.0);
            m.yt.ger(1.0, &fy, &t, 1.0);
            m.tt.ger(1.0, &t, &t, 1.0);
        }
        Ok(Self {
            k,
            p_t,
            p_y,
            n: data.len(),
            patterns: by_pattern.into_values().collect(),
        })
    }

    fn n_params(&self) -> usize {
        self.k * self.p_t + self.p_y
    }

    fn offset(&self, slot: usize) -> usize {
        slot * self.p_t
    }

    fn width(&self, slot: usize) -> usize {
        if slot == self.k {
            self.p_y
        } else {
            self.p_t
        }
    }

    /// Treatments with no non-intervened records.
    fn unobserved_treatments(&self) -> Vec<usize> {
        (0..self.k)
            .filter(|i| !self.patterns.iter().any(|p| p.count > 0 && p.slots.contains(i)))
            .collect()
    }

    /// Per-record negative log-likelihood as `½ θᵀAθ − bᵀθ + c`.
    fn quadratic(&self, sigma: &CovMatrix, kind: Likelihood, floor: f64) -> Quadratic {
        let np = self.n_params();
        let mut a = DMatrix::<f64>::zeros(np, np);
        let mut b = DVector::<f64>::zeros(np);
        let mut c = 0.0;
        for p in &self.patterns {
            let dens = BlockDensity::new(sigma, &p.slots, kind, floor);
            let w = &dens.precision;
            for (ia, &va) in p.slots.iter().enumerate() {
                let (oa, wa) = (self.offset(va), self.width(va));
                for (ib, &vb) in p.slots.iter().enumerate() {
                    let (ob, wb) = (self.offset(vb), self.width(vb));
                    let coef = w[(ia, ib)];
                    if coef == 0.0 {
                        continue;
                    }
                    let block = match (va == self.k, vb == self.k) {
                        (false, false) => p.cc.clone(),
                        (false, true) => p.cy.clone(),
                        (true, false) => p.cy.transpose(),
                        (true, true) => p.yy.clone(),
                    };
                    let mut view = a.view_mut((oa, ob), (wa, wb));
                    view += block * coef;
                    let cross = if va == self.k { p.yt.column(ib).into_owned() } else { p.ct.column(ib).into_owned() };
                    let mut bview = b.rows_mut(oa, wa);
                    bview += cross * coef;
                }
            }
            let s = p.slots.len() as f64;
            c += 0.5 * w.component_mul(&p.tt).sum()
                + 0.5 * p.count as f64 * (dens.log_det + s * (2.0 * PI).ln());
        }
        let n = self.n as f64;
        Quadratic { a: a / n, b: b / n, c: c / n }
    }

    /// Residual scatter `Σ r_S r_Sᵀ` of one pattern at `theta` (flattened).
    fn scatter(&self, p: &PatternMoments, theta: &DVector<f64>) -> DMatrix<f64> {
        let s = p.slots.len();
        let part = |v: usize| theta.rows(self.offset(v), self.width(v));
        let mut out = p.tt.clone();
        for (ia, &va) in p.slots.iter().enumerate() {
            let ta = part(va);
            for (ib, &vb) in p.slots.iter().enumerate().skip(ia) {
                let tb = part(vb);
                let cross_a = if va == self.k { p.yt.column(ib) } else { p.ct.column(ib) };
                let cross_b = if vb == self.k { p.yt.column(ia) } else { p.ct.column(ia) };
                let quad = match (va == self.k, vb == self.k) {
                    (false, false) => ta.dot(&(&p.cc * tb)),
                    (false, true) => ta.dot(&(&p.cy * tb)),
                    (true, false) => tb.dot(&(&p.cy * ta)),
                    (true, true) => ta.dot(&(&p.yy * tb)),
                };
                let v = out[(ia, ib)] - ta.dot(&cross_a) - tb.dot(&cross_b) + quad;
                out[(ia, ib)] = v;
                out[(ib, ia)] = v;
            }
        }
        debug_assert_eq!(out.nrows(), s);
        out
    }

    fn flatten(&self, thetas: &[Vec<f64>]) -> DVector<f64> {
        DVector::from_iterator(self.n_params(), thetas.iter().flatten().copied())
    }

    fn unflatten(&self, v: &DVector<f64>) -> Vec<Vec<f64>> {
        (0..=self.k).map(|s| v.rows(self.offset(s), self.width(s)).iter().copied().collect()).collect()
    }
}

#[derive(Debug, Clone)]
struct Quadratic {
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: f64,
}

impl Quadratic {
    fn value(&self, theta: &DVector<f64>) -> f64 {
        0.5 * theta.dot(&(&self.a * theta)) - self.b.dot(theta) + self.c
    }

    fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.a * theta - &self.b
    }
}

/// Result of the θ-step.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaFit {
    /// Coefficients per equation, treatments first, outcome last.
    pub thetas: Vec<Vec<f64>>,
    pub unfitted: Vec<usize>,
    pub steps: usize,
    pub grad_norm: f64,
}

/// Maximizes the pooled log-likelihood over `θ` with `sigma` held fixed,
/// using Adam on the analytic gradient. Starts from `init` (zeros when
/// `None`) and returns the best iterate seen.
pub fn fit_theta(
    data: &Dataset,
    sigma: &CovMatrix,
    opts: &FitOptions,
    init: Option<&[Vec<f64>]>,
) -> Result<ThetaFit, EstimateError> {
    opts.validate()?;
    let design = Design::new(data)?;
    fit_theta_with(&design, sigma, opts, init)
}

fn fit_theta_with(
    design: &Design,
    sigma: &CovMatrix,
    opts: &FitOptions,
    init: Option<&[Vec<f64>]>,
) -> Result<ThetaFit, EstimateError> {
    if sigma.dim() != design.k + 1 {
        return Err(EstimateError::DimensionMismatch(format!(
            "sigma has dimension {}, expected {}",
            sigma.dim(),
            design.k + 1
        )));
    }
    let q = design.quadratic(sigma, opts.likelihood, opts.variance_floor);
    let mut theta = match init {
        Some(t) => {
            if t.len() != design.k + 1 || (0..=design.k).any(|s| t[s].len() != design.width(s)) {
                return Err(EstimateError::DimensionMismatch("initial coefficients have the wrong shape".into()));
            }
            design.flatten(t)
        }
        None => DVector::zeros(design.n_params()),
    };
    let np = design.n_params();
    let (b1, b2) = opts.betas;
    let mut m = DVector::<f64>::zeros(np);
    let mut v = DVector::<f64>::zeros(np);
    let mut best = theta.clone();
    let mut best_value = q.value(&theta);
    let mut prev_value = best_value;
    let mut worsening = 0usize;
    let mut trace = Vec::new();
    let mut lr = opts.learning_rate;
    let mut since_best = 0usize;
    let mut grad_norm = f64::INFINITY;
    let mut steps = 0;
    for t in 1..=opts.max_inner {
        let g = q.gradient(&theta);
        grad_norm = g.norm();
        if grad_norm < opts.tolerance {
            break;
        }
        steps = t;
        m = &m * b1 + &g * (1.0 - b1);
        v = &v * b2 + g.component_mul(&g) * (1.0 - b2);
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        for j in 0..np {
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            theta[j] -= lr * mh / (vh.sqrt() + opts.epsilon);
        }
        let value = q.value(&theta);
        if !value.is_finite() {
            trace.push(value);
            return Err(EstimateError::OptimizationFailure { trace });
        }
        trace.push(value);
        if value > prev_value {
            worsening += 1;
            if worsening >= 50 {
                return Err(EstimateError::OptimizationFailure { trace });
            }
        } else {
            worsening = 0;
        }
        prev_value = value;
        if value < best_value {
            best_value = value;
            best.copy_from(&theta);
            since_best = 0;
        } else {
            since_best += 1;
            // oscillating around the optimum: restart from the best iterate
            // with a smaller step
            if since_best >= 25 {
                lr *= 0.5;
                theta.copy_from(&best);
                m.fill(0.0);
                v.fill(0.0);
                since_best = 0;
                worsening = 0;
                prev_value = best_value;
            }
        }
    }
    let final_grad = q.gradient(&best).norm();
    Ok(ThetaFit {
        thetas: design.unflatten(&best),
        unfitted: design.unobserved_treatments(),
        steps,
        grad_norm: final_grad.min(grad_norm),
    })
}

/// Exact maximizer of the pooled log-likelihood over `θ` for fixed `sigma`
/// (the normal equations of the quadratic objective). Equations without
/// data are left at zero.
pub fn solve_theta_exact(data: &Dataset, sigma: &CovMatrix, kind: Likelihood, floor: f64) -> Result<Vec<Vec<f64>>, EstimateError> {
    let design = Design::new(data)?;
    check_sigma(&design, sigma)?;
    let q = design.quadratic(sigma, kind, floor);
    let zero = DVector::zeros(design.n_params());
    Ok(design.unflatten(&solve_quadratic(&design, &q, &zero, RankPolicy::Error)?))
}

fn check_sigma(design: &Design, sigma: &CovMatrix) -> Result<(), EstimateError> {
    if sigma.dim() != design.k + 1 {
        return Err(EstimateError::DimensionMismatch(format!(
            "sigma has dimension {}, expected {}",
            sigma.dim(),
            design.k + 1
        )));
    }
    Ok(())
}

/// Minimizer of the quadratic over the equations that have data; the
/// remaining coefficients are copied from `prev`.
fn solve_quadratic(design: &Design, q: &Quadratic, prev: &DVector<f64>, policy: RankPolicy) -> Result<DVector<f64>, EstimateError> {
    let unfitted = design.unobserved_treatments();
    let keep: Vec<usize> = (0..design.n_params())
        .filter(|j| !unfitted.iter().any(|&s| *j >= design.offset(s) && *j < design.offset(s) + design.p_t))
        .collect();
    let a = DMatrix::from_fn(keep.len(), keep.len(), |i, j| q.a[(keep[i], keep[j])]);
    let b = DVector::from_fn(keep.len(), |i, _| q.b[keep[i]]);
    let sol = solve_with(a, b, policy).ok_or_else(|| EstimateError::Underdetermined { equation: "joint system".into() })?;
    let mut full = prev.clone();
    for (i, &j) in keep.iter().enumerate() {
        full[j] = sol[i];
    }
    Ok(full)
}

/// Solves `A x = b` for symmetric PSD `A` with a relative rank check.
fn solve_spd(mut a: DMatrix<f64>, b: DVector<f64>) -> Option<DVector<f64>> {
    let n = a.nrows();
    if n == 0 {
        return Some(DVector::zeros(0));
    }
    // equilibrate so the rank check is scale free
    let scale: Vec<f64> = (0..n).map(|i| a[(i, i)].max(0.0).sqrt()).collect();
    if scale.contains(&0.0) {
        return None;
    }
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] /= scale[i] * scale[j];
        }
    }
    let eig = SymmetricEigen::new(a.clone()).eigenvalues;
    if eig.min() < 1e-12 * eig.max() {
        return None;
    }
    let bs = DVector::from_fn(n, |i, _| b[i] / scale[i]);
    let y = a.cholesky()?.solve(&bs);
    Some(DVector::from_fn(n, |i, _| y[i] / scale[i]))
}

fn solve_with(a: DMatrix<f64>, b: DVector<f64>, policy: RankPolicy) -> Option<DVector<f64>> {
    match policy {
        RankPolicy::Error => solve_spd(a, b),
        RankPolicy::MinNorm => solve_spd(a.clone(), b.clone()).or_else(|| solve_min_norm(a, b)),
    }
}

/// Minimum-norm solution of `A x = b` for symmetric PSD `A`, through the
/// eigenvectors with eigenvalues above a relative cutoff.
fn solve_min_norm(a: DMatrix<f64>, b: DVector<f64>) -> Option<DVector<f64>> {
    let n = a.nrows();
    let eig = SymmetricEigen::new(a);
    let top = eig.eigenvalues.amax();
    if !(top > 0.0) || !top.is_finite() {
        return if n == 0 || b.amax() == 0.0 { Some(DVector::zeros(n)) } else { None };
    }
    let mut x = DVector::zeros(n);
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > 1e-10 * top {
            let v = eig.eigenvectors.column(k);
            x.axpy(v.dot(&b) / lambda, &v, 1.0);
        }
    }
    Some(x)
}

/// Ordinary least squares of `targets` on the rows of `design`, with a ridge
/// of 1e-8 and a rank check.
fn least_squares(rows: &[Vec<f64>], targets: &[f64], equation: &str, policy: RankPolicy) -> Result<Vec<f64>, EstimateError> {
    let p = rows.first().map_or(0, |r| r.len());
    if p == 0 || (rows.len() < p && policy == RankPolicy::Error) {
        return Err(EstimateError::Underdetermined { equation: equation.to_string() });
    }
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    for (row, &t) in rows.iter().zip(targets) {
        let f = DVector::from_column_slice(row);
        gram.ger(1.0, &f, &f, 1.0);
        rhs.axpy(t, &f, 1.0);
    }
    for i in 0..p {
        gram[(i, i)] += 1e-8;
    }
    solve_with(gram, rhs, policy)
        .map(|v| v.iter().copied().collect())
        .ok_or_else(|| EstimateError::Underdetermined { equation: equation.to_string() })
}

/// Per-equation least squares: each treatment equation over the records
/// where that treatment was not intervened on, the outcome over all records.
pub fn closed_form_theta(data: &Dataset) -> Result<Vec<Vec<f64>>, EstimateError> {
    if data.is_empty() {
        return Err(EstimateError::EmptyDataset);
    }
    let k = data.treatments();
    let tb = PolyBasis::new(data.covariate_dim());
    let mut out = Vec::with_capacity(k + 1);
    for i in 0..k {
        let (rows, targets): (Vec<Vec<f64>>, Vec<f64>) = data
            .records()
            .iter()
            .filter(|r| !r.intervened[i])
            .map(|r| Ok((tb.features(&r.covariates)?, r.treatments[i])))
            .collect::<Result<Vec<_>, ModelError>>()?
            .into_iter()
            .unzip();
        out.push(least_squares(&rows, &targets, &format!("X{i}"), RankPolicy::Error)?);
    }
    out.push(fit_baseline(data)?);
    Ok(out)
}

/// Residual table over `(U_1..U_K, U_Y)` with intervened cells masked.
pub fn residual_table(data: &Dataset, params: &AnmParams) -> Result<ResidualTable, EstimateError> {
    check_dims(data, params)?;
    let k = params.treatments();
    let n = data.len();
    let mut values = DMatrix::<f64>::zeros(n, k + 1);
    let mut present = vec![true; n * (k + 1)];
    for (r, rec) in data.records().iter().enumerate() {
        for i in 0..k {
            if rec.intervened[i] {
                present[r * (k + 1) + i] = false;
            } else {
                values[(r, i)] = rec.treatments[i] - params.treatment_mean(i, &rec.covariates)?;
            }
        }
        values[(r, k)] = rec.outcome - params.outcome_mean(&rec.covariates, &rec.treatments)?;
    }
    Ok(ResidualTable::new(values, present)?)
}

/// Σ-step: pairwise-complete covariance of the masked residuals.
pub fn fit_sigma(data: &Dataset, params: &AnmParams) -> Result<CovMatrix, EstimateError> {
    Ok(mle_cov(&residual_table(data, params)?)?)
}

/// Σ-step by EM over the masked residuals, starting from `init`.
pub fn fit_sigma_em(data: &Dataset, params: &AnmParams, init: &CovMatrix) -> Result<CovMatrix, EstimateError> {
    Ok(em_cov(&residual_table(data, params)?, init, EM_MAX_SWEEPS, EM_TOLERANCE)?)
}

const EM_MAX_SWEEPS: usize = 2000;
const EM_TOLERANCE: f64 = 1e-12;

/// Maximum-likelihood fit from `θ = 0`, `Σ = I`.
pub fn fit(data: &Dataset, opts: &FitOptions) -> Result<FitReport, EstimateError> {
    let k = data.treatments();
    fit_from(data, opts, AnmParams::zeros(k, data.covariate_dim(), CovMatrix::identity(k + 1)))
}

/// [`fit`] from a given starting point.
pub fn fit_from(data: &Dataset, opts: &FitOptions, init: AnmParams) -> Result<FitReport, EstimateError> {
    opts.validate()?;
    if data.is_empty() {
        return Err(EstimateError::EmptyDataset);
    }
    check_dims(data, &init)?;
    let design = Design::new(data)?;
    let n = data.len() as f64;
    let unfitted = design.unobserved_treatments();
    let mut params = init;
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let sweeps = match (opts.method, opts.likelihood) {
        (FitMethod::Profile, Likelihood::Joint) => 1,
        _ => opts.max_outer,
    };
    for it in 1..=sweeps {
        iterations = it;
        params = alternating_sweep(data, &design, &params, opts)?;
        let ll = log_likelihood(data, &params, opts.likelihood, opts.variance_floor)?;
        let done = trace.last().is_some_and(|prev| ((ll - prev) / n).abs() < opts.tolerance);
        trace.push(ll);
        if done {
            converged = true;
            break;
        }
    }
    if let (FitMethod::Profile, Likelihood::Joint) = (opts.method, opts.likelihood) {
        let out = profile_search(&design, &params, opts)?;
        iterations += out.iterations;
        converged = out.converged;
        // the search only ever reports its best point, so this cannot lower ℓ
        let candidate = params.with_thetas(&design.unflatten(&out.theta))?.with_sigma(out.sigma);
        let ll = log_likelihood(data, &candidate, opts.likelihood, opts.variance_floor)?;
        let start = trace.last().copied().unwrap_or(f64::NEG_INFINITY);
        if ll >= start {
            params = candidate;
            trace.extend(out.trace.iter().map(|c| -c * n).filter(|v| *v > start && *v < ll));
            trace.push(ll);
        }
    }
    Ok(FitReport { params, ll_trace: trace, converged, iterations, unfitted })
}

/// One θ-step followed by one Σ-step.
fn alternating_sweep(data: &Dataset, design: &Design, params: &AnmParams, opts: &FitOptions) -> Result<AnmParams, EstimateError> {
    let thetas = match opts.solver {
        ThetaSolver::Adam => fit_theta_with(design, &params.sigma, opts, Some(&params.thetas()))?.thetas,
        ThetaSolver::Exact => {
            let q = design.quadratic(&params.sigma, opts.likelihood, opts.variance_floor);
            design.unflatten(&solve_quadratic(design, &q, &design.flatten(&params.thetas()), opts.rank_policy)?)
        }
    };
    let params = params.with_thetas(&thetas)?;
    let sigma = match opts.sigma_step {
        SigmaStep::Pairwise => fit_sigma(data, &params)?,
        SigmaStep::Em => fit_sigma_em(data, &params, &params.sigma)?,
    };
    Ok(params.with_sigma(sigma))
}

struct ProfileOutcome {
    theta: DVector<f64>,
    sigma: CovMatrix,
    /// Best per-record cost after each iteration.
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
}

/// Per-record negative log-likelihood maximized over `θ`, as a function of a
/// square root `L` of `Σ = L Lᵀ` (row-major, unconstrained).
struct ProfileProblem<'a> {
    design: &'a Design,
    prev: DVector<f64>,
    floor: f64,
    policy: RankPolicy,
}

impl ProfileProblem<'_> {
    fn sigma(&self, l: &[f64]) -> DMatrix<f64> {
        let d = self.design.k + 1;
        let l = DMatrix::from_row_slice(d, d, l);
        &l * l.transpose()
    }

    /// Cost, gradient with respect to `L`, and the profiled `θ`.
    fn evaluate(&self, l: &[f64]) -> Result<(f64, Vec<f64>, DVector<f64>), EstimateError> {
        let d = self.design.k + 1;
        let sigma = CovMatrix::new(self.sigma(l))?;
        let q = self.design.quadratic(&sigma, Likelihood::Joint, self.floor);
        let theta = solve_quadratic(self.design, &q, &self.prev, self.policy)?;
        let cost = q.value(&theta);
        // envelope theorem: θ is optimal, so only the explicit Σ-dependence
        // contributes; dℓ/dΣ_SS = ½ (W R W − n W) per pattern
        let mut g = DMatrix::<f64>::zeros(d, d);
        for p in &self.design.patterns {
            let dens = BlockDensity::new(&sigma, &p.slots, Likelihood::Joint, self.floor);
            let w = &dens.precision;
            let r = self.design.scatter(p, &theta);
            let gp = (w * r * w - w * p.count as f64) * 0.5;
            for (a, &i) in p.slots.iter().enumerate() {
                for (b, &j) in p.slots.iter().enumerate() {
                    g[(i, j)] += gp[(a, b)];
                }
            }
        }
        let lm = DMatrix::from_row_slice(d, d, l);
        // cost is −ℓ/n and dℓ/dL = 2 G L for symmetric G
        let grad = (g * lm) * (-2.0 / self.design.n as f64);
        let grad_rm: Vec<f64> = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| grad[(i, j)]).collect();
        Ok((cost, grad_rm, theta))
    }
}

impl argmin::core::CostFunction for ProfileProblem<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, l: &Self::Param) -> Result<f64, argmin::core::Error> {
        // an infeasible point reads as an infinitely bad one to the line search
        Ok(self.evaluate(l).map(|(c, _, _)| c).unwrap_or(f64::INFINITY))
    }
}

impl argmin::core::Gradient for ProfileProblem<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, l: &Self::Param) -> Result<Vec<f64>, argmin::core::Error> {
        Ok(self.evaluate(l)?.1)
    }
}

#[derive(Clone, Default)]
struct TraceObserver(std::sync::Arc<std::sync::Mutex<Vec<f64>>>);

impl<I: argmin::core::State<Float = f64>> argmin::core::observers::Observe<I> for TraceObserver {
    fn observe_iter(&mut self, state: &I, _kv: &argmin::core::KV) -> Result<(), argmin::core::Error> {
        if let Ok(mut t) = self.0.lock() {
            t.push(state.get_best_cost());
        }
        Ok(())
    }
}

fn profile_search(design: &Design, start: &AnmParams, opts: &FitOptions) -> Result<ProfileOutcome, EstimateError> {
    use argmin::core::observers::ObserverMode;
    use argmin::core::{Executor, State, TerminationReason, TerminationStatus};
    use argmin::solver::linesearch::MoreThuenteLineSearch;
    use argmin::solver::quasinewton::LBFGS;

    let d = design.k + 1;
    let eig = SymmetricEigen::new(start.sigma.matrix().clone());
    let roots = eig.eigenvalues.map(|v| v.max(opts.variance_floor).sqrt());
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&roots);
    let problem = ProfileProblem { design, prev: design.flatten(&start.thetas()), floor: opts.variance_floor, policy: opts.rank_policy };
    let mut best: Vec<f64> = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| root[(i, j)]).collect();
    let (mut best_cost, _, mut best_theta) = problem.evaluate(&best)?;
    let mut trace = Vec::new();
    let mut iterations = 0usize;
    let mut converged = false;
    // L-BFGS may stop early when its curvature model goes stale; restart it
    // from the best point with an empty memory while it keeps improving
    while iterations < opts.max_profile_iter {
        let solver = LBFGS::new(MoreThuenteLineSearch::new(), 10)
            .with_tolerance_grad(opts.tolerance)
            .and_then(|s| s.with_tolerance_cost(opts.tolerance * 1e-3))
            .map_err(|e| EstimateError::InvalidOptions(e.to_string()))?;
        let observer = TraceObserver::default();
        let budget = (opts.max_profile_iter - iterations) as u64;
        let run = Executor::new(ProfileProblem { prev: problem.prev.clone(), ..problem }, solver)
            .configure(|state| state.param(best.clone()).max_iters(budget))
            .add_observer(observer.clone(), ObserverMode::Always)
            .run();
        let Ok(run) = run else { break };
        let state = run.state();
        iterations += state.get_iter() as usize;
        if let Ok(t) = observer.0.lock() {
            trace.extend(t.iter().copied().filter(|c| *c < best_cost));
        }
        let improved = match state.get_best_param() {
            Some(p) if state.get_best_cost() < best_cost => {
                let (c, _, theta) = problem.evaluate(p)?;
                let gain = best_cost - c;
                if c < best_cost {
                    best = p.clone();
                    best_cost = c;
                    best_theta = theta;
                }
                gain
            }
            _ => 0.0,
        };
        match state.get_termination_status() {
            TerminationStatus::Terminated(TerminationReason::SolverConverged) => {
                converged = true;
                break;
            }
            TerminationStatus::Terminated(TerminationReason::SolverExit(_)) if improved > opts.tolerance * 1e-3 => {
                iterations += 1;
            }
            TerminationStatus::Terminated(TerminationReason::SolverExit(_)) => {
                // no further progress from a fresh start: a stationary point
                // up to line-search precision
                converged = problem.evaluate(&best)?.1.iter().map(|g| g * g).sum::<f64>().sqrt() < opts.tolerance.sqrt();
                break;
            }
            _ => break,
        }
    }
    trace.dedup();
    Ok(ProfileOutcome { theta: best_theta, sigma: CovMatrix::new(problem.sigma(&best))?, trace, iterations, converged })
}

/// Pooled regression baseline: least squares of `Y` on the outcome features
/// over every record, ignoring regimes and noise correlation.
pub fn fit_baseline(data: &Dataset) -> Result<Vec<f64>, EstimateError> {
    fit_baseline_with(data, RankPolicy::Error)
}

/// [`fit_baseline`] with a choice of behavior on rank-deficient designs.
pub fn fit_baseline_with(data: &Dataset, policy: RankPolicy) -> Result<Vec<f64>, EstimateError> {
    if data.is_empty() {
        return Err(EstimateError::EmptyDataset);
    }
    let ob = PolyBasis::new(data.covariate_dim() + data.treatments());
    let rows = data
        .records()
        .iter()
        .map(|r| ob.features(&concat(&r.covariates, &r.treatments)))
        .collect::<Result<Vec<_>, _>>()?;
    let targets: Vec<f64> = data.records().iter().map(|r| r.outcome).collect();
    least_squares(&rows, &targets, "Y", policy)
}

/// Prediction of an outcome coefficient vector at `(c, x)`.
pub fn eval_outcome(theta_y: &[f64], c: &[f64], x: &[f64]) -> Result<f64, ModelError> {
    let ob = PolyBasis::new(c.len() + x.len());
    Ok(dot(&ob.features(&concat(c, x))?, theta_y))
}
