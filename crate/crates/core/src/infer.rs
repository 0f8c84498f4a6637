//! Interventional prediction from a fitted symmetric ANM.
//!
//! Under a set of interventions the expected outcome splits into the
//! structural term `f_Y(c, x)` and the expected outcome noise given the
//! residuals of the treatments that were observed rather than set. The
//! second term is a Gaussian conditional expectation under `Σ`.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimate::{fit_baseline, EstimateError};
use crate::gaussian::{conditional_weights, CovMatrix, GaussianError, MvnSampler};
use crate::model::{concat, dot, AnmParams, Dataset, ModelError, PolyBasis};
use crate::rng::stream_rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferError {
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
}

/// Covariates plus a value for every treatment, each either set by
/// intervention or observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Query {
    pub c: Vec<f64>,
    #[serde(rename = "do", default)]
    pub intervened: BTreeMap<usize, f64>,
    #[serde(rename = "obs", default)]
    pub observed: BTreeMap<usize, f64>,
}

impl Query {
    pub fn validate(&self, k: usize, covariate_dim: usize) -> Result<(), InferError> {
        if self.c.len() != covariate_dim {
            return Err(InferError::InvalidQuery(format!(
                "{} covariates given, model has {covariate_dim}",
                self.c.len()
            )));
        }
        if let Some(i) = self.intervened.keys().find(|i| self.observed.contains_key(i)) {
            return Err(InferError::InvalidQuery(format!("treatment {i} is both intervened and observed")));
        }
        for i in 0..k {
            if !self.intervened.contains_key(&i) && !self.observed.contains_key(&i) {
                return Err(InferError::InvalidQuery(format!("treatment {i} has no value")));
            }
        }
        if let Some(i) = self.intervened.keys().chain(self.observed.keys()).find(|&&i| i >= k) {
            return Err(InferError::InvalidQuery(format!("treatment index {i} out of range for K = {k}")));
        }
        let values = self.c.iter().chain(self.intervened.values()).chain(self.observed.values());
        if values.into_iter().any(|v| !v.is_finite()) {
            return Err(InferError::InvalidQuery("non-finite value".into()));
        }
        Ok(())
    }

    /// Treatment values in index order.
    pub fn treatments(&self) -> Vec<f64> {
        let k = self.intervened.len() + self.observed.len();
        (0..k).map(|i| self.intervened.get(&i).or_else(|| self.observed.get(&i)).copied().unwrap_or(f64::NAN)).collect()
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        self.observed.keys().copied().collect()
    }
}

/// The two terms of an interventional prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decomposition {
    /// `f̂_Y(c, x)`.
    pub structural: f64,
    /// `E[U_Y | U_obs = u_obs]` under `Σ̂`.
    pub correction: f64,
}

impl Decomposition {
    pub fn total(&self) -> f64 {
        self.structural + self.correction
    }
}

/// Regression weights of `U_Y` on the residuals of `observed` under the
/// fitted covariance. Empty when nothing is observed.
pub fn correction_weights(params: &AnmParams, observed: &[usize]) -> Result<DVector<f64>, InferError> {
    if observed.is_empty() {
        return Ok(DVector::zeros(0));
    }
    Ok(conditional_weights(&params.sigma, params.treatments(), observed)?)
}

/// [`decompose`] with weights from [`correction_weights`] for the query's
/// observed set, so repeated queries can share them.
pub fn decompose_with(params: &AnmParams, q: &Query, weights: &DVector<f64>) -> Result<Decomposition, InferError> {
    let k = params.treatments();
    q.validate(k, params.covariate_dim)?;
    if weights.len() != q.observed.len() {
        return Err(InferError::InvalidQuery(format!(
            "{} weights for {} observed treatments",
            weights.len(),
            q.observed.len()
        )));
    }
    let x = q.treatments();
    let structural = params.outcome_mean(&q.c, &x)?;
    let mut correction = 0.0;
    for (w, (&i, &v)) in weights.iter().zip(&q.observed) {
        correction += w * (v - params.treatment_mean(i, &q.c)?);
    }
    Ok(Decomposition { structural, correction })
}

pub fn decompose(params: &AnmParams, q: &Query) -> Result<Decomposition, InferError> {
    q.validate(params.treatments(), params.covariate_dim)?;
    let weights = correction_weights(params, &q.observed_indices())?;
    decompose_with(params, q, &weights)
}

/// `E[Y | c, do(x_int), x_obs]` under the fitted model.
pub fn predict_outcome(params: &AnmParams, q: &Query) -> Result<f64, InferError> {
    Ok(decompose(params, q)?.total())
}

/// Conditional average effect of `do(X_i = x_i)` at covariates `c`,
/// marginalizing the other treatments over their observational law given
/// `c` by Monte Carlo (stream 0 of `seed`).
pub fn cate(params: &AnmParams, c: &[f64], i: usize, x_i: f64, n_mc: usize, seed: u64) -> Result<f64, InferError> {
    let k = params.treatments();
    if i >= k {
        return Err(InferError::InvalidQuery(format!("treatment index {i} out of range for K = {k}")));
    }
    if n_mc == 0 {
        return Err(InferError::InvalidQuery("n_mc must be at least 1".into()));
    }
    let others: Vec<usize> = (0..k).filter(|&m| m != i).collect();
    let base = Query { c: c.to_vec(), intervened: BTreeMap::from([(i, x_i)]), observed: BTreeMap::new() };
    if others.is_empty() {
        return predict_outcome(params, &base);
    }
    let weights = correction_weights(params, &others)?;
    let means = others.iter().map(|&m| params.treatment_mean(m, c)).collect::<Result<Vec<_>, _>>()?;
    let block = CovMatrix::new(params.sigma.submatrix(&others))?;
    let sampler = MvnSampler::new(&block);
    let mut rng = stream_rng(seed, 0);
    let mut q = base;
    let mut total = 0.0;
    for _ in 0..n_mc {
        let u = sampler.draw(&mut rng);
        q.observed = others.iter().zip(&means).zip(u.iter()).map(|((&m, mu), v)| (m, mu + v)).collect();
        total += decompose_with(params, &q, &weights)?.total();
    }
    Ok(total / n_mc as f64)
}

/// Estimator for the two-treatment chain `X_i → X_j`, where only the effect
/// of the consequence `X_j` is identified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymmetricEstimator {
    pub covariate_dim: usize,
    /// Coefficients of `f̂_i` over the covariate basis.
    pub cause_theta: Vec<f64>,
    /// Coefficients of `f̂_Y` over the basis of `(C, X_i, X_j)`.
    pub outcome_theta: Vec<f64>,
    pub sigma_ii: f64,
    pub sigma_yi: f64,
    /// Standard error of `σ̂_Yi / σ̂_ii` as a regression slope of the
    /// outcome residual on the cause residual.
    pub slope_std_error: f64,
}

/// Variance floor below which the cause residual cannot be conditioned on.
pub const CAUSE_VARIANCE_FLOOR: f64 = 1e-6;

/// Fits the chain estimator from an observational sample and a sample that
/// intervenes on both treatments (index 0 is the cause, 1 the consequence).
pub fn fit_asymmetric(obs: &Dataset, joint: &Dataset) -> Result<AsymmetricEstimator, InferError> {
    for (name, data) in [("observational", obs), ("joint", joint)] {
        if data.treatments() != 2 {
            return Err(InferError::InvalidData(format!("{name} data has {} treatments, expected 2", data.treatments())));
        }
        if data.is_empty() {
            return Err(InferError::Estimate(EstimateError::EmptyDataset));
        }
    }
    if obs.covariate_dim() != joint.covariate_dim() {
        return Err(InferError::InvalidData("covariate dimensions differ".into()));
    }
    if let Some(r) = obs.records().iter().position(|r| r.intervened.iter().any(|&f| f)) {
        return Err(InferError::InvalidData(format!("observational record {r} carries an intervention")));
    }
    if let Some(r) = joint.records().iter().position(|r| !r.intervened.iter().all(|&f| f)) {
        return Err(InferError::InvalidData(format!("joint record {r} does not intervene on both treatments")));
    }
    let d = obs.covariate_dim();
    let tb = PolyBasis::new(d);
    let cause_theta = crate::estimate::closed_form_theta(&cause_only(obs)?)?.remove(0);
    let outcome_theta = fit_baseline(joint)?;
    let ob = PolyBasis::new(d + 2);
    let mut residuals = Vec::with_capacity(obs.len());
    for r in obs.records() {
        let ui = r.treatments[0] - dot(&tb.features(&r.covariates)?, &cause_theta);
        let uy = r.outcome - dot(&ob.features(&concat(&r.covariates, &r.treatments))?, &outcome_theta);
        residuals.push((ui, uy));
    }
    let n = residuals.len() as f64;
    let sigma_ii = residuals.iter().map(|(a, _)| a * a).sum::<f64>() / n;
    let sigma_yi = residuals.iter().map(|(a, b)| a * b).sum::<f64>() / n;
    let slope_std_error = if sigma_ii > 0.0 && n > 1.0 {
        let slope = sigma_yi / sigma_ii;
        let rss: f64 = residuals.iter().map(|(a, b)| (b - slope * a).powi(2)).sum();
        (rss / (n - 1.0) / (sigma_ii * n)).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(AsymmetricEstimator { covariate_dim: d, cause_theta, outcome_theta, sigma_ii, sigma_yi, slope_std_error })
}

/// The observational records viewed as a one-treatment dataset over `X_i`,
/// so the cause equation can reuse the least-squares routine.
fn cause_only(obs: &Dataset) -> Result<Dataset, InferError> {
    let mut regimes = BTreeMap::new();
    regimes.insert(0, crate::model::InterventionSet::observational());
    let records = obs
        .records()
        .iter()
        .map(|r| crate::model::Record {
            regime: 0,
            covariates: r.covariates.clone(),
            treatments: vec![r.treatments[0]],
            outcome: 0.0,
            intervened: vec![false],
        })
        .collect();
    Ok(Dataset::new(1, obs.covariate_dim(), regimes, records)?)
}

impl AsymmetricEstimator {
    /// `σ̂_Yi / σ̂_ii`.
    pub fn slope(&self) -> Result<f64, InferError> {
        if !(self.sigma_ii >= CAUSE_VARIANCE_FLOOR) {
            return Err(InferError::Gaussian(GaussianError::SingularConditioning { indices: vec![0] }));
        }
        Ok(self.sigma_yi / self.sigma_ii)
    }

    pub fn cause_mean(&self, c: &[f64]) -> Result<f64, InferError> {
        Ok(dot(&PolyBasis::new(self.covariate_dim).features(c)?, &self.cause_theta))
    }

    pub fn decompose(&self, c: &[f64], x_i: f64, x_j: f64) -> Result<Decomposition, InferError> {
        let structural = dot(&PolyBasis::new(self.covariate_dim + 2).features(&concat(c, &[x_i, x_j]))?, &self.outcome_theta);
        let correction = self.slope()? * (x_i - self.cause_mean(c)?);
        Ok(Decomposition { structural, correction })
    }
}

/// `E[Y | c, X_i = x_i, do(X_j = x_j)]` from the chain estimator.
pub fn predict_asymmetric(est: &AsymmetricEstimator, c: &[f64], x_i: f64, x_j: f64) -> Result<f64, InferError> {
    Ok(est.decompose(c, x_i, x_j)?.total())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        random_scm, sample, sample_with_noise, AsymmetricPair, CovariateLaw, Interval, Regime, StructuralEq, SymmetricAnm,
        ValuePolicy,
    };
    use crate::rng::stream_rng;
    use nalgebra::DMatrix;

    fn query(c: &[f64], int: &[(usize, f64)], obs: &[(usize, f64)]) -> Query {
        Query { c: c.to_vec(), intervened: int.iter().copied().collect(), observed: obs.iter().copied().collect() }
    }

    fn scm(k: usize, d: usize, seed: u64) -> SymmetricAnm {
        random_scm(k, d, Interval::new(-2.0, 2.0), Interval::new(-1.0, 1.0), seed).unwrap()
    }

    #[test]
    fn fully_intervened_query_is_structural_term() {
        let model = scm(3, 2, 1);
        let q = query(&[0.2, -0.4], &[(0, 1.0), (1, -2.0), (2, 0.5)], &[]);
        let d = decompose(&model.params, &q).unwrap();
        assert_eq!(d.correction, 0.0);
        assert_eq!(d.structural, model.params.outcome_mean(&q.c, &[1.0, -2.0, 0.5]).unwrap());
    }

    #[test]
    fn diagonal_noise_has_no_correction() {
        let model = scm(3, 1, 2);
        let params = model.params.with_sigma(CovMatrix::diagonal(&[0.4, 1.0, 2.0, 0.7]).unwrap());
        let q = query(&[0.3], &[(1, 1.0)], &[(0, 5.0), (2, -3.0)]);
        assert_eq!(decompose(&params, &q).unwrap().correction, 0.0);
    }

    #[test]
    fn one_observed_treatment_uses_scalar_ratio() {
        let model = scm(2, 1, 3);
        let sigma = CovMatrix::from_row_major(3, &[1.5, 0.2, 0.6, 0.2, 1.0, -0.3, 0.6, -0.3, 2.0]).unwrap();
        let params = model.params.with_sigma(sigma);
        let c = [0.7];
        let q = query(&c, &[(1, -0.4)], &[(0, 1.3)]);
        let expected = params.outcome_mean(&c, &[1.3, -0.4]).unwrap()
            + 0.6 / 1.5 * (1.3 - params.treatment_mean(0, &c).unwrap());
        assert!((predict_outcome(&params, &q).unwrap() - expected).abs() < 1e-8);
    }

    #[test]
    fn query_validation() {
        let model = scm(2, 1, 4);
        let bad = [
            query(&[0.0], &[(0, 1.0)], &[]),
            query(&[0.0], &[(0, 1.0), (1, 1.0)], &[(1, 2.0)]),
            query(&[0.0, 1.0], &[(0, 1.0), (1, 1.0)], &[]),
            query(&[0.0], &[(0, 1.0), (1, 1.0), (2, 1.0)], &[]),
            query(&[f64::NAN], &[(0, 1.0), (1, 1.0)], &[]),
        ];
        for q in bad {
            assert!(matches!(predict_outcome(&model.params, &q), Err(InferError::InvalidQuery(_))), "{q:?}");
        }
    }

    #[test]
    fn query_json_shape() {
        let q: Query = serde_json::from_str(r#"{"c": [0.5], "do": {"1": 2.0}, "obs": {"0": -1.0}}"#).unwrap();
        assert_eq!(q, query(&[0.5], &[(1, 2.0)], &[(0, -1.0)]));
        let back: Query = serde_json::from_str(&serde_json::to_string(&q).unwrap()).unwrap();
        assert_eq!(back, q);
    }

    /// Simulation oracle: draws the query's regime and keeps the records
    /// whose observed treatments fall in a small window around the query.
    #[test]
    fn truth_prediction_matches_simulation() {
        let model = scm(2, 1, 5);
        let c = 0.4;
        let mut sim_model = model.clone();
        sim_model.covariate_law = CovariateLaw::Categorical(crate::model::CategoricalTable::new(vec![vec![c]], vec![1.0]).unwrap());
        let regime = Regime::fixed(&[(1, 0.8)]);
        let mut rng = stream_rng(5, 0);
        let draws = sample_with_noise(&sim_model, &regime, 400_000, &mut rng).unwrap();
        let x0 = model.params.treatment_mean(0, &[c]).unwrap() + 0.3;
        let kept: Vec<f64> = draws
            .data
            .records()
            .iter()
            .filter(|r| (r.treatments[0] - x0).abs() < 0.02)
            .map(|r| r.outcome)
            .collect();
        let n = kept.len() as f64;
        let mean = kept.iter().sum::<f64>() / n;
        let sd = (kept.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let pred = predict_outcome(&model.params, &query(&[c], &[(1, 0.8)], &[(0, x0)])).unwrap();
        // window half-width 0.02 adds a small smoothing bias on top of MC error
        assert!((pred - mean).abs() < 3.0 * sd / n.sqrt() + 0.02, "{pred} vs {mean} (n = {n})");
    }

    #[test]
    fn uncorrelated_observed_treatment_changes_nothing() {
        let model = scm(3, 1, 6);
        let mut m = model.params.sigma.matrix().clone();
        for j in 0..4 {
            if j != 2 {
                m[(2, j)] = 0.0;
                m[(j, 2)] = 0.0;
            }
        }
        let params = model.params.with_sigma(CovMatrix::new(m).unwrap());
        let without = predict_outcome(&params, &query(&[0.1], &[(1, 0.5), (2, 0.3)], &[(0, 1.0)])).unwrap();
        let with = predict_outcome(&params, &query(&[0.1], &[(1, 0.5)], &[(0, 1.0), (2, 0.3)])).unwrap();
        assert!((with - without).abs() < 1e-10);
    }

    #[test]
    fn intervened_values_only_move_the_structural_term() {
        let model = scm(3, 1, 7);
        let a = decompose(&model.params, &query(&[0.1], &[(1, 0.5)], &[(0, 1.0), (2, 0.3)])).unwrap();
        let b = decompose(&model.params, &query(&[0.1], &[(1, -4.0)], &[(0, 1.0), (2, 0.3)])).unwrap();
        assert_eq!(a.correction, b.correction);
        assert_ne!(a.structural, b.structural);
    }

    #[test]
    fn cate_with_one_treatment_is_a_point_prediction() {
        let model = scm(1, 2, 8);
        let c = [0.3, 0.9];
        let direct = predict_outcome(&model.params, &query(&c, &[(0, 1.5)], &[])).unwrap();
        assert_eq!(cate(&model.params, &c, 0, 1.5, 10, 1).unwrap(), direct);
    }

    #[test]
    fn cate_of_linear_outcome_collapses_to_plug_in() {
        let model = scm(3, 1, 9);
        // outcome linear in the treatments (no products) and no outcome confounding
        let ob = PolyBasis::new(4);
        let names = ob.term_names(&["c", "x0", "x1", "x2"]);
        let theta: Vec<f64> = names.iter().enumerate().map(|(j, n)| if n.contains('*') { 0.0 } else { 0.3 * j as f64 - 0.5 }).collect();
        let mut thetas = model.params.thetas();
        thetas[3] = theta;
        let mut m = model.params.sigma.matrix().clone();
        for j in 0..3 {
            m[(3, j)] = 0.0;
            m[(j, 3)] = 0.0;
        }
        let params = model.params.with_thetas(&thetas).unwrap().with_sigma(CovMatrix::new(m).unwrap());
        let c = [0.6];
        let n_mc = 20_000;
        let mc = cate(&params, &c, 1, -0.7, n_mc, 3).unwrap();
        let x: Vec<f64> = (0..3).map(|i| if i == 1 { -0.7 } else { params.treatment_mean(i, &c).unwrap() }).collect();
        let plug_in = params.outcome_mean(&c, &x).unwrap();
        let slope_sd = (0..3).filter(|&i| i != 1).map(|i| {
            let coef = thetas[3][names.iter().position(|n| *n == format!("x{i}")).unwrap()];
            coef * coef * params.sigma.get(i, i)
        }).sum::<f64>().sqrt();
        assert!((mc - plug_in).abs() < 3.0 * slope_sd / (n_mc as f64).sqrt() + 1e-9, "{mc} vs {plug_in}");
    }

    #[test]
    fn cate_matches_simulated_intervention() {
        let model = scm(2, 1, 10);
        let c = 0.5;
        let mut sim = model.clone();
        sim.covariate_law = CovariateLaw::Categorical(crate::model::CategoricalTable::new(vec![vec![c]], vec![1.0]).unwrap());
        let draws = sample(&sim, &Regime::fixed(&[(0, 1.2)]), 100_000, 10).unwrap();
        let ys: Vec<f64> = draws.records().iter().map(|r| r.outcome).collect();
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let sd = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let n_mc = 100_000;
        let est = cate(&model.params, &[c], 0, 1.2, n_mc, 4).unwrap();
        assert!((est - mean).abs() < 3.0 * sd * (1.0 / n + 1.0 / n_mc as f64).sqrt(), "{est} vs {mean}");
    }

    #[test]
    fn cate_rejects_bad_arguments() {
        let model = scm(2, 1, 11);
        assert!(cate(&model.params, &[0.0], 2, 1.0, 10, 0).is_err());
        assert!(cate(&model.params, &[0.0], 0, 1.0, 0, 0).is_err());
    }

    /// `X1 = U1`, `X2 = X1 + U2`, `Y = X1 X2 + U_Y` with all three noises
    /// equal to one standard normal.
    pub(crate) fn degenerate_chain() -> AsymmetricPair {
        AsymmetricPair::new(
            StructuralEq::new(PolyBasis::new(0), vec![0.0]).unwrap(),
            StructuralEq::new(PolyBasis::new(1), vec![0.0, 1.0]).unwrap(),
            StructuralEq::new(PolyBasis::new(2), vec![0.0, 0.0, 0.0, 1.0]).unwrap(),
            CovMatrix::new(DMatrix::from_element(3, 3, 1.0)).unwrap(),
            CovariateLaw::StandardNormal { dim: 0 },
        )
        .unwrap()
    }

    fn both(model: &AsymmetricPair, n: usize, seed: u64) -> (Dataset, Dataset) {
        let obs = sample(model, &Regime::observational(), n, seed).unwrap();
        let joint_regime = Regime::with_policy(&[0, 1].into_iter().collect(), ValuePolicy::default());
        let joint = sample(model, &joint_regime, n, seed + 1).unwrap();
        (obs, joint)
    }

    #[test]
    fn chain_estimator_recovers_analytic_estimand() {
        let (obs, joint) = both(&degenerate_chain(), 40_000, 20);
        let est = fit_asymmetric(&obs, &joint).unwrap();
        for (x1, b) in [(0.5, 1.0), (-1.0, 2.0), (1.5, -0.5), (0.0, 0.0)] {
            let pred = predict_asymmetric(&est, &[], x1, b).unwrap();
            assert!((pred - (x1 * b + x1)).abs() < 0.05, "x1 = {x1}, b = {b}: {pred}");
        }
    }

    #[test]
    fn chain_estimator_without_confounding_has_no_correction() {
        let mut model = degenerate_chain();
        model.sigma = CovMatrix::identity(3);
        let (obs, joint) = both(&model, 10_000, 21);
        let est = fit_asymmetric(&obs, &joint).unwrap();
        assert!(est.slope().unwrap().abs() < 3.0 * est.slope_std_error);
    }

    #[test]
    fn chain_prediction_edge_cases() {
        let (obs, joint) = both(&degenerate_chain(), 500, 22);
        let mut est = fit_asymmetric(&obs, &joint).unwrap();
        let f_y = dot(&PolyBasis::new(2).features(&[0.3, 0.4]).unwrap(), &est.outcome_theta);
        let at_mean = est.cause_mean(&[]).unwrap();
        let d = est.decompose(&[], at_mean, 0.4).unwrap();
        assert_eq!(d.correction, 0.0);
        est.sigma_yi = 0.0;
        assert_eq!(predict_asymmetric(&est, &[], 0.3, 0.4).unwrap(), f_y);
        est.sigma_ii = 1e-9;
        assert!(matches!(predict_asymmetric(&est, &[], 0.3, 0.4), Err(InferError::Gaussian(_))));
    }

    #[test]
    fn chain_estimator_checks_regimes() {
        let (obs, joint) = both(&degenerate_chain(), 50, 23);
        assert!(matches!(fit_asymmetric(&joint, &joint), Err(InferError::InvalidData(_))));
        assert!(matches!(fit_asymmetric(&obs, &obs), Err(InferError::InvalidData(_))));
        assert!(fit_asymmetric(&Dataset::empty(2, 0), &joint).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn zero_covariance_observations_are_inert(seed in 0u64..500, v in -3.0..3.0f64) {
                let model = scm(3, 1, seed);
                let mut m = model.params.sigma.matrix().clone();
                for j in 0..4 {
                    if j != 0 {
                        m[(0, j)] = 0.0;
                        m[(j, 0)] = 0.0;
                    }
                }
                let params = model.params.with_sigma(CovMatrix::new(m).unwrap());
                let a = predict_outcome(&params, &query(&[0.2], &[(0, v), (2, 0.1)], &[(1, 0.4)])).unwrap();
                let b = predict_outcome(&params, &query(&[0.2], &[(2, 0.1)], &[(0, v), (1, 0.4)])).unwrap();
                // the conditioning ridge scales with the block, so agreement is to rounding of the ridge
                prop_assert!((a - b).abs() < 1e-6 * (1.0 + a.abs()), "{} vs {}", a, b);
            }

            #[test]
            fn correction_ignores_intervened_values(seed in 0u64..500, v in -3.0..3.0f64, w in -3.0..3.0f64) {
                let model = scm(3, 2, seed);
                let a = decompose(&model.params, &query(&[0.2, 0.1], &[(1, v)], &[(0, 0.5), (2, -0.2)])).unwrap();
                let b = decompose(&model.params, &query(&[0.2, 0.1], &[(1, w)], &[(0, 0.5), (2, -0.2)])).unwrap();
                prop_assert_eq!(a.correction, b.correction);
            }
        }
    }
}
