//! Structural causal models with additive Gaussian noise.
//!
//! Two model families are supported:
//!
//! * [`SymmetricAnm`]: `K` treatments that each depend only on the covariates
//!   and their own noise, `X_i = f_i(C) + U_i`, and an outcome
//!   `Y = f_Y(C, X) + U_Y`. The noise vector `(U_1..U_K, U_Y) ~ N(0, Σ)` is
//!   arbitrary, so off-diagonal entries of `Σ` play the role of unobserved
//!   confounders. Covariates are drawn independently of the noise.
//! * [`AsymmetricPair`]: two treatments where the second depends on the
//!   first, `X_j = f_j(C, X_i) + U_j`.
//!
//! All structural equations are second-order polynomials without squares
//! (see [`PolyBasis`]) and are linear in their coefficients.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::{psd_shrink, symmetrize, CovMatrix, GaussianError, MvnSampler};
use crate::rng::{stream_rng, StreamRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("arity mismatch: expected {expected} inputs, got {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("coefficient vector has length {got}, basis needs {expected}")]
    ThetaLength { expected: usize, got: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid regime: {0}")]
    InvalidRegime(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid covariate law: {0}")]
    InvalidCovariateLaw(String),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
}

/// Second-order polynomial features without squared terms:
/// `[1, z_1..z_d, z_1 z_2, z_1 z_3, .., z_{d-1} z_d]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolyBasis {
    arity: usize,
}

impl PolyBasis {
    pub fn new(arity: usize) -> Self {
        Self { arity }
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn dim(&self) -> usize {
        1 + self.arity + self.arity * self.arity.saturating_sub(1) / 2
    }

    pub fn features(&self, z: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut out = Vec::with_capacity(self.dim());
        self.features_into(z, &mut out)?;
        Ok(out)
    }

    /// Clears `out` and writes the feature vector into it.
    pub fn features_into(&self, z: &[f64], out: &mut Vec<f64>) -> Result<(), ModelError> {
        if z.len() != self.arity {
            return Err(ModelError::ArityMismatch { expected: self.arity, got: z.len() });
        }
        out.clear();
        out.push(1.0);
        out.extend_from_slice(z);
        for i in 0..z.len() {
            for j in (i + 1)..z.len() {
                out.push(z[i] * z[j]);
            }
        }
        Ok(())
    }

    /// Human-readable term labels given input names, in feature order.
    pub fn term_names(&self, inputs: &[&str]) -> Vec<String> {
        let mut names = vec!["1".to_string()];
        names.extend(inputs.iter().map(|s| s.to_string()));
        for i in 0..inputs.len() {
            for j in (i + 1)..inputs.len() {
                names.push(format!("{}*{}", inputs[i], inputs[j]));
            }
        }
        names
    }
}

/// A polynomial structural equation `f(z) = θ · features(z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralEq {
    basis: PolyBasis,
    theta: Vec<f64>,
}

impl StructuralEq {
    pub fn new(basis: PolyBasis, theta: Vec<f64>) -> Result<Self, ModelError> {
        if theta.len() != basis.dim() {
            return Err(ModelError::ThetaLength { expected: basis.dim(), got: theta.len() });
        }
        Ok(Self { basis, theta })
    }

    pub fn zeros(basis: PolyBasis) -> Self {
        Self { basis, theta: vec![0.0; basis.dim()] }
    }

    pub fn basis(&self) -> PolyBasis {
        self.basis
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn eval(&self, z: &[f64]) -> Result<f64, ModelError> {
        let phi = self.basis.features(z)?;
        Ok(dot(&phi, &self.theta))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A finite joint distribution over covariate vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalTable {
    pub points: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

impl CategoricalTable {
    pub fn new(points: Vec<Vec<f64>>, probs: Vec<f64>) -> Result<Self, ModelError> {
        let table = Self { points, probs };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.points.is_empty() || self.points.len() != self.probs.len() {
            return Err(ModelError::InvalidCovariateLaw(format!(
                "{} support points but {} probabilities",
                self.points.len(),
                self.probs.len()
            )));
        }
        let dim = self.points[0].len();
        if self.points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
            return Err(ModelError::InvalidCovariateLaw("support points differ in length or are not finite".into()));
        }
        if self.probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(ModelError::InvalidCovariateLaw("probability outside [0, 1]".into()));
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(ModelError::InvalidCovariateLaw(format!("probabilities sum to {total}")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (p, point) in self.probs.iter().zip(&self.points) {
            acc += p;
            if u < acc {
                return point.clone();
            }
        }
        self.points.last().cloned().unwrap_or_default()
    }
}

/// Distribution of the observed covariates, drawn independently of the noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateLaw {
    /// Independent standard normal coordinates.
    StandardNormal { dim: usize },
    Categorical(CategoricalTable),
}

impl CovariateLaw {
    pub fn dim(&self) -> usize {
        match self {
            CovariateLaw::StandardNormal { dim } => *dim,
            CovariateLaw::Categorical(t) => t.dim(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            CovariateLaw::StandardNormal { dim } => (0..*dim).map(|_| rng.sample(StandardNormal)).collect(),
            CovariateLaw::Categorical(t) => t.sample(rng),
        }
    }
}

/// How an intervened treatment's value is chosen for each generated record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValuePolicy {
    Fixed { value: f64 },
    Normal { mean: f64, sd: f64 },
}

impl Default for ValuePolicy {
    fn default() -> Self {
        ValuePolicy::Normal { mean: 0.0, sd: 1.0 }
    }
}

impl ValuePolicy {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ValuePolicy::Fixed { value } => value,
            ValuePolicy::Normal { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
        }
    }
}

/// A set of intervened treatment indices. Empty means observational.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct InterventionSet(BTreeSet<usize>);

impl InterventionSet {
    pub fn observational() -> Self {
        Self::default()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.contains(&i)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    /// Flags per treatment for `k` treatments.
    pub fn flags(&self, k: usize) -> Vec<bool> {
        (0..k).map(|i| self.contains(i)).collect()
    }

    pub fn from_flags(flags: &[bool]) -> Self {
        flags.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect()
    }

    /// All `2^k` subsets of `0..k`, ordered by bitmask.
    pub fn all_subsets(k: usize) -> Vec<InterventionSet> {
        (0..1usize << k).map(|mask| (0..k).filter(|i| mask >> i & 1 == 1).collect()).collect()
    }
}

impl FromIterator<usize> for InterventionSet {
    fn from_iter<T: IntoIterator<Item = usize>>(iter: T) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl fmt::Display for InterventionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "obs");
        }
        let names: Vec<String> = self.0.iter().map(|i| format!("X{i}")).collect();
        write!(f, "do({})", names.join(","))
    }
}

/// A data-generating regime: which treatments are intervened and how their
/// values are chosen.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Regime {
    pub intervened: BTreeMap<usize, ValuePolicy>,
}

impl Regime {
    pub fn observational() -> Self {
        Self::default()
    }

    /// Intervenes on every index in `set` with the same policy.
    pub fn with_policy(set: &InterventionSet, policy: ValuePolicy) -> Self {
        Self { intervened: set.iter().map(|i| (i, policy)).collect() }
    }

    pub fn fixed(values: &[(usize, f64)]) -> Self {
        Self { intervened: values.iter().map(|&(i, v)| (i, ValuePolicy::Fixed { value: v })).collect() }
    }

    pub fn set(&self) -> InterventionSet {
        self.intervened.keys().copied().collect()
    }

    pub fn validate(&self, k: usize) -> Result<(), ModelError> {
        if let Some(&i) = self.intervened.keys().find(|&&i| i >= k) {
            return Err(ModelError::InvalidRegime(format!("treatment index {i} out of range for K = {k}")));
        }
        for (i, p) in &self.intervened {
            let ok = match *p {
                ValuePolicy::Fixed { value } => value.is_finite(),
                ValuePolicy::Normal { mean, sd } => mean.is_finite() && sd.is_finite() && sd >= 0.0,
            };
            if !ok {
                return Err(ModelError::InvalidRegime(format!("invalid value policy for treatment {i}")));
            }
        }
        Ok(())
    }
}

/// One sample tagged with its regime.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub regime: usize,
    pub covariates: Vec<f64>,
    pub treatments: Vec<f64>,
    pub outcome: f64,
    pub intervened: Vec<bool>,
}

/// Samples pooled across regimes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    treatments: usize,
    covariate_dim: usize,
    regimes: BTreeMap<usize, InterventionSet>,
    records: Vec<Record>,
}

impl Dataset {
    pub fn new(
        treatments: usize,
        covariate_dim: usize,
        regimes: BTreeMap<usize, InterventionSet>,
        records: Vec<Record>,
    ) -> Result<Self, ModelError> {
        let ds = Self { treatments, covariate_dim, regimes, records };
        ds.validate()?;
        Ok(ds)
    }

    pub fn empty(treatments: usize, covariate_dim: usize) -> Self {
        Self { treatments, covariate_dim, regimes: BTreeMap::new(), records: Vec::new() }
    }

    fn validate(&self) -> Result<(), ModelError> {
        for (id, set) in &self.regimes {
            if set.iter().any(|i| i >= self.treatments) {
                return Err(ModelError::InvalidDataset(format!("regime {id} intervenes outside 0..{}", self.treatments)));
            }
        }
        for (r, rec) in self.records.iter().enumerate() {
            let set = self
                .regimes
                .get(&rec.regime)
                .ok_or_else(|| ModelError::InvalidDataset(format!("record {r} refers to unknown regime {}", rec.regime)))?;
            if rec.covariates.len() != self.covariate_dim || rec.treatments.len() != self.treatments {
                return Err(ModelError::InvalidDataset(format!("record {r} has wrong dimensions")));
            }
            if rec.intervened != set.flags(self.treatments) {
                return Err(ModelError::InvalidDataset(format!(
                    "record {r} intervention flags do not match regime {}",
                    rec.regime
                )));
            }
            let finite = rec.covariates.iter().chain(&rec.treatments).all(|v| v.is_finite()) && rec.outcome.is_finite();
            if !finite {
                return Err(ModelError::InvalidDataset(format!("record {r} has a non-finite value")));
            }
        }
        Ok(())
    }

    pub fn treatments(&self) -> usize {
        self.treatments
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariate_dim
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn regimes(&self) -> &BTreeMap<usize, InterventionSet> {
        &self.regimes
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Returns the id registered for `set`, adding it if new.
    pub fn regime_id(&mut self, set: &InterventionSet) -> usize {
        if let Some((&id, _)) = self.regimes.iter().find(|(_, s)| *s == set) {
            return id;
        }
        let id = self.regimes.keys().next_back().map_or(0, |k| k + 1);
        self.regimes.insert(id, set.clone());
        id
    }

    /// Appends the records of `other`, merging regimes by intervention set.
    pub fn extend(&mut self, other: &Dataset) -> Result<(), ModelError> {
        if other.treatments != self.treatments || other.covariate_dim != self.covariate_dim {
            return Err(ModelError::InvalidDataset(format!(
                "cannot pool K={}, |C|={} with K={}, |C|={}",
                self.treatments, self.covariate_dim, other.treatments, other.covariate_dim
            )));
        }
        let mut remap = BTreeMap::new();
        for (id, set) in &other.regimes {
            remap.insert(*id, self.regime_id(set));
        }
        self.records.extend(other.records.iter().map(|r| Record { regime: remap[&r.regime], ..r.clone() }));
        Ok(())
    }

    pub fn pool<'a, I: IntoIterator<Item = &'a Dataset>>(parts: I) -> Result<Dataset, ModelError> {
        let mut iter = parts.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| ModelError::InvalidDataset("nothing to pool".into()))?;
        let mut out = Dataset::empty(first.treatments, first.covariate_dim);
        out.extend(first)?;
        for part in iter {
            out.extend(part)?;
        }
        Ok(out)
    }

    /// Records whose regime intervenes on exactly `set`.
    pub fn filter_regime(&self, set: &InterventionSet) -> Dataset {
        let mut out = Dataset::empty(self.treatments, self.covariate_dim);
        let ids: BTreeSet<usize> = self.regimes.iter().filter(|(_, s)| *s == set).map(|(id, _)| *id).collect();
        if !ids.is_empty() {
            let id = out.regime_id(set);
            out.records = self
                .records
                .iter()
                .filter(|r| ids.contains(&r.regime))
                .map(|r| Record { regime: id, ..r.clone() })
                .collect();
        }
        out
    }

    /// Multiplies every outcome by `s`.
    pub fn scale_outcomes(&self, s: f64) -> Dataset {
        let mut out = self.clone();
        out.records.iter_mut().for_each(|r| r.outcome *= s);
        out
    }
}

/// Common interface of the generative models.
pub trait Scm {
    fn treatments(&self) -> usize;
    fn covariate_dim(&self) -> usize;
    /// Noise covariance over `(U_1..U_K, U_Y)`.
    fn sigma(&self) -> &CovMatrix;
    fn covariate_law(&self) -> &CovariateLaw;
    /// Treatment values given covariates, a full noise draw and the
    /// intervention values (`Some` for intervened treatments).
    fn treatment_values(&self, c: &[f64], noise: &[f64], fixed: &[Option<f64>]) -> Vec<f64>;
    /// `f_Y(c, x)`.
    fn outcome_mean(&self, c: &[f64], x: &[f64]) -> f64;
}

/// Ground-truth outcome mean `f_Y(c, x)`.
pub fn true_mean<M: Scm + ?Sized>(scm: &M, c: &[f64], x: &[f64]) -> Result<f64, ModelError> {
    if c.len() != scm.covariate_dim() || x.len() != scm.treatments() {
        return Err(ModelError::ArityMismatch {
            expected: scm.covariate_dim() + scm.treatments(),
            got: c.len() + x.len(),
        });
    }
    Ok(scm.outcome_mean(c, x))
}

/// A dataset together with the full noise draws that generated it
/// (row per record, columns `U_1..U_K, U_Y`).
#[derive(Debug, Clone)]
pub struct Sampled {
    pub data: Dataset,
    pub noise: Vec<Vec<f64>>,
}

/// Draws `n` records from `scm` under `regime`, using stream 0 of `seed`.
pub fn sample<M: Scm + ?Sized>(scm: &M, regime: &Regime, n: usize, seed: u64) -> Result<Dataset, ModelError> {
    Ok(sample_with_noise(scm, regime, n, &mut stream_rng(seed, 0))?.data)
}

pub fn sample_with_noise<M: Scm + ?Sized>(
    scm: &M,
    regime: &Regime,
    n: usize,
    rng: &mut StreamRng,
) -> Result<Sampled, ModelError> {
    let k = scm.treatments();
    regime.validate(k)?;
    let sampler = MvnSampler::new(scm.sigma());
    let set = regime.set();
    let mut data = Dataset::empty(k, scm.covariate_dim());
    let id = data.regime_id(&set);
    let flags = set.flags(k);
    let mut noise = Vec::with_capacity(n);
    data.records.reserve(n);
    for _ in 0..n {
        let c = scm.covariate_law().sample(rng);
        let u: Vec<f64> = sampler.draw(rng).iter().copied().collect();
        let fixed: Vec<Option<f64>> = (0..k).map(|i| regime.intervened.get(&i).map(|p| p.draw(rng))).collect();
        let x = scm.treatment_values(&c, &u, &fixed);
        let y = scm.outcome_mean(&c, &x) + u[k];
        data.records.push(Record { regime: id, covariates: c, treatments: x, outcome: y, intervened: flags.clone() });
        noise.push(u);
    }
    Ok(Sampled { data, noise })
}

/// Pooled sample over several regimes; regime `r` in the list uses stream `r`.
pub fn sample_regimes<M: Scm + Sync + ?Sized>(
    scm: &M,
    plan: &[(Regime, usize)],
    seed: u64,
) -> Result<Dataset, ModelError> {
    let mut out = Dataset::empty(scm.treatments(), scm.covariate_dim());
    for (r, (regime, n)) in plan.iter().enumerate() {
        let part = sample_with_noise(scm, regime, *n, &mut stream_rng(seed, r as u64))?;
        out.extend(&part.data)?;
    }
    Ok(out)
}

/// Structural equations and noise covariance of a symmetric ANM, without the
/// covariate law. This is also the shape of a fitted model.
#[derive(Debug, Clone, PartialEq)]
pub struct AnmParams {
    pub covariate_dim: usize,
    pub treatment_eqs: Vec<StructuralEq>,
    pub outcome_eq: StructuralEq,
    pub sigma: CovMatrix,
}

impl AnmParams {
    pub fn new(
        covariate_dim: usize,
        treatment_eqs: Vec<StructuralEq>,
        outcome_eq: StructuralEq,
        sigma: CovMatrix,
    ) -> Result<Self, ModelError> {
        let p = Self { covariate_dim, treatment_eqs, outcome_eq, sigma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let k = self.treatment_eqs.len();
        if let Some(i) = self.treatment_eqs.iter().position(|e| e.basis().arity() != self.covariate_dim) {
            return Err(ModelError::InvalidModel(format!(
                "treatment equation {i} has arity {}, expected {}",
                self.treatment_eqs[i].basis().arity(),
                self.covariate_dim
            )));
        }
        if self.outcome_eq.basis().arity() != self.covariate_dim + k {
            return Err(ModelError::InvalidModel(format!(
                "outcome equation has arity {}, expected {}",
                self.outcome_eq.basis().arity(),
                self.covariate_dim + k
            )));
        }
        if self.sigma.dim() != k + 1 {
            return Err(ModelError::InvalidModel(format!("sigma has dimension {}, expected {}", self.sigma.dim(), k + 1)));
        }
        Ok(())
    }

    /// Zero coefficients with the given noise covariance.
    pub fn zeros(treatments: usize, covariate_dim: usize, sigma: CovMatrix) -> Self {
        Self {
            covariate_dim,
            treatment_eqs: vec![StructuralEq::zeros(PolyBasis::new(covariate_dim)); treatments],
            outcome_eq: StructuralEq::zeros(PolyBasis::new(covariate_dim + treatments)),
            sigma,
        }
    }

    pub fn treatments(&self) -> usize {
        self.treatment_eqs.len()
    }

    pub fn treatment_mean(&self, i: usize, c: &[f64]) -> Result<f64, ModelError> {
        self.treatment_eqs[i].eval(c)
    }

    pub fn outcome_mean(&self, c: &[f64], x: &[f64]) -> Result<f64, ModelError> {
        self.outcome_eq.eval(&concat(c, x))
    }

    /// Per-equation coefficient vectors: treatments first, outcome last.
    pub fn thetas(&self) -> Vec<Vec<f64>> {
        self.treatment_eqs
            .iter()
            .chain(std::iter::once(&self.outcome_eq))
            .map(|e| e.theta().to_vec())
            .collect()
    }

    pub fn with_thetas(&self, thetas: &[Vec<f64>]) -> Result<Self, ModelError> {
        let k = self.treatments();
        if thetas.len() != k + 1 {
            return Err(ModelError::InvalidModel(format!("expected {} coefficient vectors, got {}", k + 1, thetas.len())));
        }
        let treatment_eqs = thetas[..k]
            .iter()
            .map(|t| StructuralEq::new(PolyBasis::new(self.covariate_dim), t.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let outcome_eq = StructuralEq::new(PolyBasis::new(self.covariate_dim + k), thetas[k].clone())?;
        Ok(Self { covariate_dim: self.covariate_dim, treatment_eqs, outcome_eq, sigma: self.sigma.clone() })
    }

    pub fn with_sigma(&self, sigma: CovMatrix) -> Self {
        Self { sigma, ..self.clone() }
    }
}

pub(crate) fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

/// `X_i = f_i(C) + U_i`, `Y = f_Y(C, X) + U_Y`, `U ~ N(0, Σ)`, `C ⫫ U`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricAnm {
    pub params: AnmParams,
    pub covariate_law: CovariateLaw,
}

impl SymmetricAnm {
    pub fn new(params: AnmParams, covariate_law: CovariateLaw) -> Result<Self, ModelError> {
        params.validate()?;
        if covariate_law.dim() != params.covariate_dim {
            return Err(ModelError::InvalidModel(format!(
                "covariate law has dimension {}, model expects {}",
                covariate_law.dim(),
                params.covariate_dim
            )));
        }
        Ok(Self { params, covariate_law })
    }
}

impl Scm for SymmetricAnm {
    fn treatments(&self) -> usize {
        self.params.treatments()
    }

    fn covariate_dim(&self) -> usize {
        self.params.covariate_dim
    }

    fn sigma(&self) -> &CovMatrix {
        &self.params.sigma
    }

    fn covariate_law(&self) -> &CovariateLaw {
        &self.covariate_law
    }

    fn treatment_values(&self, c: &[f64], noise: &[f64], fixed: &[Option<f64>]) -> Vec<f64> {
        self.params
            .treatment_eqs
            .iter()
            .enumerate()
            .map(|(i, eq)| fixed[i].unwrap_or_else(|| eq.eval(c).expect("covariate arity checked") + noise[i]))
            .collect()
    }

    fn outcome_mean(&self, c: &[f64], x: &[f64]) -> f64 {
        self.params.outcome_mean(c, x).expect("arity checked")
    }
}

/// Two treatments with `X_i → X_j`: `X_i = f_i(C) + U_i`,
/// `X_j = f_j(C, X_i) + U_j`, `Y = f_Y(C, X_i, X_j) + U_Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct AsymmetricPair {
    pub covariate_dim: usize,
    pub cause_eq: StructuralEq,
    pub effect_eq: StructuralEq,
    pub outcome_eq: StructuralEq,
    pub sigma: CovMatrix,
    pub covariate_law: CovariateLaw,
}

impl AsymmetricPair {
    pub fn new(
        cause_eq: StructuralEq,
        effect_eq: StructuralEq,
        outcome_eq: StructuralEq,
        sigma: CovMatrix,
        covariate_law: CovariateLaw,
    ) -> Result<Self, ModelError> {
        let d = covariate_law.dim();
        let arities = [cause_eq.basis().arity(), effect_eq.basis().arity(), outcome_eq.basis().arity()];
        if arities != [d, d + 1, d + 2] {
            return Err(ModelError::InvalidModel(format!(
                "equation arities {arities:?} do not match covariate dimension {d}"
            )));
        }
        if sigma.dim() != 3 {
            return Err(ModelError::InvalidModel(format!("sigma has dimension {}, expected 3", sigma.dim())));
        }
        Ok(Self { covariate_dim: d, cause_eq, effect_eq, outcome_eq, sigma, covariate_law })
    }
}

impl Scm for AsymmetricPair {
    fn treatments(&self) -> usize {
        2
    }

    fn covariate_dim(&self) -> usize {
        self.covariate_dim
    }

    fn sigma(&self) -> &CovMatrix {
        &self.sigma
    }

    fn covariate_law(&self) -> &CovariateLaw {
        &self.covariate_law
    }

    fn treatment_values(&self, c: &[f64], noise: &[f64], fixed: &[Option<f64>]) -> Vec<f64> {
        let xi = fixed[0].unwrap_or_else(|| self.cause_eq.eval(c).expect("arity checked") + noise[0]);
        let xj = fixed[1].unwrap_or_else(|| {
            self.effect_eq.eval(&concat(c, &[xi])).expect("arity checked") + noise[1]
        });
        vec![xi, xj]
    }

    fn outcome_mean(&self, c: &[f64], x: &[f64]) -> f64 {
        self.outcome_eq.eval(&concat(c, x)).expect("arity checked")
    }
}

/// Closed interval for uniform draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn uniform(&self) -> Result<Uniform<f64>, ModelError> {
        Uniform::new_inclusive(self.lo, self.hi)
            .map_err(|e| ModelError::InvalidModel(format!("bad interval [{}, {}]: {e}", self.lo, self.hi)))
    }
}

/// Random symmetric ANM with standard-normal covariates.
///
/// Coefficients are i.i.d. uniform over `theta_range`. The raw noise
/// covariance has i.i.d. uniform entries over `cov_range` (upper triangle,
/// mirrored); diagonal entries become `|v| + 0.1` so every variance is
/// positive, and the result is shrunk toward the scaled identity until it
/// is positive definite.
pub fn random_scm(
    treatments: usize,
    covariate_dim: usize,
    theta_range: Interval,
    cov_range: Interval,
    seed: u64,
) -> Result<SymmetricAnm, ModelError> {
    let mut rng = stream_rng(seed, 0);
    let theta_dist = theta_range.uniform()?;
    let cov_dist = cov_range.uniform()?;
    let tb = PolyBasis::new(covariate_dim);
    let ob = PolyBasis::new(covariate_dim + treatments);
    let treatment_eqs = (0..treatments)
        .map(|_| StructuralEq::new(tb, (0..tb.dim()).map(|_| theta_dist.sample(&mut rng)).collect()))
        .collect::<Result<Vec<_>, _>>()?;
    let outcome_eq = StructuralEq::new(ob, (0..ob.dim()).map(|_| theta_dist.sample(&mut rng)).collect())?;
    let d = treatments + 1;
    let mut raw = nalgebra::DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let v: f64 = cov_dist.sample(&mut rng);
            raw[(i, j)] = if i == j { v.abs() + 0.1 } else { v };
            raw[(j, i)] = raw[(i, j)];
        }
    }
    let sigma = psd_shrink(&symmetrize(&raw))?.cov;
    SymmetricAnm::new(
        AnmParams::new(covariate_dim, treatment_eqs, outcome_eq, sigma)?,
        CovariateLaw::StandardNormal { dim: covariate_dim },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::CovMatrix;
    use nalgebra::DMatrix;

    fn linear_anm(sigma: CovMatrix) -> SymmetricAnm {
        // K = 2, one covariate
        let t0 = StructuralEq::new(PolyBasis::new(1), vec![0.5, 1.0]).unwrap();
        let t1 = StructuralEq::new(PolyBasis::new(1), vec![-0.5, 2.0]).unwrap();
        let y = StructuralEq::new(PolyBasis::new(3), vec![1.0, 0.3, 1.5, -2.0, 0.0, 0.1, 0.7]).unwrap();
        SymmetricAnm::new(
            AnmParams::new(1, vec![t0, t1], y, sigma).unwrap(),
            CovariateLaw::Categorical(CategoricalTable::new(vec![vec![0.0], vec![1.0]], vec![0.4, 0.6]).unwrap()),
        )
        .unwrap()
    }

    #[test]
    fn feature_dimensions() {
        assert_eq!(PolyBasis::new(4).features(&[0.1, 0.2, 0.3, 0.4]).unwrap().len(), 11);
        assert_eq!(PolyBasis::new(8).features(&[1.0; 8]).unwrap().len(), 37);
        assert_eq!(PolyBasis::new(0).dim(), 1);
    }

    #[test]
    fn zero_input_features() {
        let f = PolyBasis::new(4).features(&[0.0; 4]).unwrap();
        assert_eq!(f[0], 1.0);
        assert!(f[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pair_order_is_lexicographic() {
        let f = PolyBasis::new(3).features(&[2.0, 3.0, 5.0]).unwrap();
        assert_eq!(f, vec![1.0, 2.0, 3.0, 5.0, 6.0, 10.0, 15.0]);
        assert_eq!(PolyBasis::new(3).term_names(&["a", "b", "c"])[4..], ["a*b", "a*c", "b*c"]);
    }

    #[test]
    fn arity_mismatch_is_an_error() {
        assert_eq!(
            PolyBasis::new(2).features(&[1.0]).unwrap_err(),
            ModelError::ArityMismatch { expected: 2, got: 1 }
        );
        assert!(StructuralEq::new(PolyBasis::new(2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn true_mean_matches_dot_product() {
        let scm = random_scm(3, 2, Interval::new(-2.0, 2.0), Interval::new(-1.0, 1.0), 5).unwrap();
        let c = [0.3, -1.1];
        let x = [0.5, 2.0, -0.7];
        let z = [0.3, -1.1, 0.5, 2.0, -0.7];
        let phi = PolyBasis::new(5).features(&z).unwrap();
        let expected: f64 = phi.iter().zip(scm.params.outcome_eq.theta()).map(|(a, b)| a * b).sum();
        assert!((true_mean(&scm, &c, &x).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn true_mean_constant_models() {
        let mut scm = random_scm(2, 1, Interval::new(0.0, 0.0), Interval::new(-1.0, 1.0), 1).unwrap();
        assert_eq!(true_mean(&scm, &[3.0], &[1.0, 2.0]).unwrap(), 0.0);
        let mut theta = vec![0.0; 7];
        theta[0] = 1.0;
        scm.params.outcome_eq = StructuralEq::new(PolyBasis::new(3), theta).unwrap();
        assert_eq!(true_mean(&scm, &[-9.0], &[4.0, 0.5]).unwrap(), 1.0);
    }

    #[test]
    fn random_scm_dimensions() {
        let scm = random_scm(4, 4, Interval::new(-2.0, 2.0), Interval::new(-1.0, 1.0), 3).unwrap();
        assert!(scm.params.treatment_eqs.iter().all(|e| e.theta().len() == 11));
        assert_eq!(scm.params.outcome_eq.theta().len(), 37);
        assert_eq!(scm.params.sigma.dim(), 5);
        assert!(scm.params.sigma.min_eigenvalue() >= 0.0);
        let all: Vec<f64> = scm.params.thetas().concat();
        assert!(all.iter().all(|v| (-2.0..=2.0).contains(v)));
    }

    #[test]
    fn random_scm_is_deterministic() {
        let a = random_scm(4, 4, Interval::new(-2.0, 2.0), Interval::new(-1.0, 1.0), 42).unwrap();
        let b = random_scm(4, 4, Interval::new(-2.0, 2.0), Interval::new(-1.0, 1.0), 42).unwrap();
        assert_eq!(a, b);
        let c = random_scm(4, 4, Interval::new(-2.0, 2.0), Interval::new(-1.0, 1.0), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_theta_outcome_is_pure_noise() {
        let scm = random_scm(2, 2, Interval::new(0.0, 0.0), Interval::new(-1.0, 1.0), 8).unwrap();
        let mut rng = stream_rng(1, 0);
        let s = sample_with_noise(&scm, &Regime::observational(), 50, &mut rng).unwrap();
        for (rec, u) in s.data.records().iter().zip(&s.noise) {
            assert_eq!(rec.outcome, u[2]);
        }
    }

    #[test]
    fn zero_noise_full_intervention_is_deterministic() {
        let scm = linear_anm(CovMatrix::zeros(3));
        let data = sample(&scm, &Regime::fixed(&[(0, 1.5), (1, -0.5)]), 200, 3).unwrap();
        for rec in data.records() {
            assert_eq!(rec.treatments, vec![1.5, -0.5]);
            assert_eq!(rec.outcome, scm.outcome_mean(&rec.covariates, &[1.5, -0.5]));
        }
    }

    #[test]
    fn interventional_mean_matches_outcome_equation() {
        let sigma = CovMatrix::new(DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.6, 0.5, 1.0, 0.4, 0.6, 0.4, 1.0])).unwrap();
        let scm = linear_anm(sigma);
        let n = 100_000;
        let data = sample(&scm, &Regime::fixed(&[(0, 0.8), (1, -1.2)]), n, 5).unwrap();
        let at_one: Vec<f64> = data.records().iter().filter(|r| r.covariates[0] == 1.0).map(|r| r.outcome).collect();
        let mean = at_one.iter().sum::<f64>() / at_one.len() as f64;
        let expected = scm.outcome_mean(&[1.0], &[0.8, -1.2]);
        assert!((mean - expected).abs() < 3.0 / (at_one.len() as f64).sqrt(), "{mean} vs {expected}");
    }

    #[test]
    fn observational_treatment_mean_given_covariate() {
        let sigma = CovMatrix::new(DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.6, 0.5, 1.0, 0.4, 0.6, 0.4, 1.0])).unwrap();
        let scm = linear_anm(sigma);
        let data = sample(&scm, &Regime::observational(), 100_000, 6).unwrap();
        for c in [0.0, 1.0] {
            let xs: Vec<f64> = data.records().iter().filter(|r| r.covariates[0] == c).map(|r| r.treatments[1]).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let expected = scm.params.treatment_mean(1, &[c]).unwrap();
            assert!((mean - expected).abs() < 4.0 / (xs.len() as f64).sqrt());
        }
    }

    #[test]
    fn intervened_column_is_constant() {
        let scm = random_scm(3, 2, Interval::new(-2.0, 2.0), Interval::new(-1.0, 1.0), 2).unwrap();
        let mut regime = Regime::with_policy(&[1].into_iter().collect(), ValuePolicy::default());
        regime.intervened.insert(2, ValuePolicy::Fixed { value: 0.25 });
        let mut rng = stream_rng(4, 0);
        let s = sample_with_noise(&scm, &regime, 500, &mut rng).unwrap();
        assert!(s.data.records().iter().all(|r| r.treatments[2] == 0.25 && r.intervened == vec![false, true, true]));
    }

    #[test]
    fn outcome_residual_is_drawn_noise() {
        let scm = random_scm(4, 4, Interval::new(-2.0, 2.0), Interval::new(-1.0, 1.0), 9).unwrap();
        let mut rng = stream_rng(1, 0);
        let s = sample_with_noise(&scm, &Regime::observational(), 1000, &mut rng).unwrap();
        for (rec, u) in s.data.records().iter().zip(&s.noise) {
            let f = scm.outcome_mean(&rec.covariates, &rec.treatments);
            let resid = rec.outcome - f;
            // additive generation; exact up to the rounding of one addition
            assert!((resid - u[4]).abs() <= f64::EPSILON * rec.outcome.abs().max(f.abs()));
            for i in 0..4 {
                let fi = scm.params.treatment_mean(i, &rec.covariates).unwrap();
                assert!((rec.treatments[i] - fi - u[i]).abs() <= f64::EPSILON * rec.treatments[i].abs().max(fi.abs()));
            }
        }
    }

    #[test]
    fn permutation_symmetry_in_distribution() {
        let scm = random_scm(2, 1, Interval::new(-1.0, 1.0), Interval::new(-0.5, 0.5), 31).unwrap();
        // swap treatments 0 and 1 in every equation and in sigma
        let perm = [1usize, 0, 2];
        let p = &scm.params;
        let sigma = DMatrix::from_fn(3, 3, |i, j| p.sigma.get(perm[i], perm[j]));
        let names_theta = p.outcome_eq.theta();
        // outcome inputs (c, x0, x1): features [1, c, x0, x1, c*x0, c*x1, x0*x1]
        let swapped_y = vec![
            names_theta[0],
            names_theta[1],
            names_theta[3],
            names_theta[2],
            names_theta[5],
            names_theta[4],
            names_theta[6],
        ];
        let permuted = SymmetricAnm::new(
            AnmParams::new(
                1,
                vec![p.treatment_eqs[1].clone(), p.treatment_eqs[0].clone()],
                StructuralEq::new(PolyBasis::new(3), swapped_y).unwrap(),
                CovMatrix::new(sigma).unwrap(),
            )
            .unwrap(),
            scm.covariate_law.clone(),
        )
        .unwrap();
        let n = 100_000;
        let a = sample(&scm, &Regime::observational(), n, 1).unwrap();
        let b = sample(&permuted, &Regime::observational(), n, 2).unwrap();
        let moments = |d: &Dataset, swap: bool| {
            let mut m = [0.0; 5];
            for r in d.records() {
                let (x0, x1) = if swap { (r.treatments[1], r.treatments[0]) } else { (r.treatments[0], r.treatments[1]) };
                m[0] += x0;
                m[1] += x1;
                m[2] += r.outcome;
                m[3] += x0 * x1;
                m[4] += x0 * r.outcome;
            }
            m.map(|v| v / d.len() as f64)
        };
        let ma = moments(&a, false);
        let mb = moments(&b, true);
        for (x, y) in ma.iter().zip(&mb) {
            assert!((x - y).abs() <= 0.02 * (1.0 + x.abs()), "{ma:?} vs {mb:?}");
        }
    }

    #[test]
    fn asymmetric_pair_uses_realized_cause() {
        let law = CovariateLaw::StandardNormal { dim: 0 };
        let pair = AsymmetricPair::new(
            StructuralEq::new(PolyBasis::new(0), vec![0.0]).unwrap(),
            StructuralEq::new(PolyBasis::new(1), vec![0.0, 2.0]).unwrap(),
            StructuralEq::new(PolyBasis::new(2), vec![0.0, 0.0, 0.0, 1.0]).unwrap(),
            CovMatrix::zeros(3),
            law,
        )
        .unwrap();
        let data = sample(&pair, &Regime::fixed(&[(0, 1.5)]), 3, 0).unwrap();
        for r in data.records() {
            assert_eq!(r.treatments, vec![1.5, 3.0]);
            assert_eq!(r.outcome, 4.5);
        }
    }

    #[test]
    fn pooling_merges_regimes_by_set() {
        let scm = random_scm(2, 1, Interval::new(-1.0, 1.0), Interval::new(-1.0, 1.0), 1).unwrap();
        let obs = sample(&scm, &Regime::observational(), 5, 1).unwrap();
        let joint = sample(&scm, &Regime::with_policy(&[0, 1].into_iter().collect(), ValuePolicy::default()), 4, 2).unwrap();
        let obs2 = sample(&scm, &Regime::observational(), 3, 3).unwrap();
        let pooled = Dataset::pool([&obs, &joint, &obs2]).unwrap();
        assert_eq!(pooled.len(), 12);
        assert_eq!(pooled.regimes().len(), 2);
        assert_eq!(pooled.filter_regime(&InterventionSet::observational()).len(), 8);
    }

    #[test]
    fn dataset_rejects_mismatched_flags() {
        let mut regimes = BTreeMap::new();
        regimes.insert(0, InterventionSet::observational());
        let rec = Record { regime: 0, covariates: vec![], treatments: vec![1.0], outcome: 0.0, intervened: vec![true] };
        assert!(Dataset::new(1, 0, regimes, vec![rec]).is_err());
    }

    #[test]
    fn regime_rejects_out_of_range_index() {
        assert!(Regime::fixed(&[(3, 1.0)]).validate(3).is_err());
    }

    #[test]
    fn subsets_and_display() {
        let all = InterventionSet::all_subsets(3);
        assert_eq!(all.len(), 8);
        assert_eq!(all[0].to_string(), "obs");
        assert_eq!(all[5].to_string(), "do(X0,X2)");
    }
}
