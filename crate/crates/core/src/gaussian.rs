//! Multivariate-normal utilities over small dense symmetric matrices.
//!
//! The noise law of every model in this crate is a zero-mean Gaussian
//! `N(0, Σ)`, and `Σ` is allowed to be rank deficient: perfectly confounded
//! noise (for instance every coordinate equal to one scalar normal) is a
//! legitimate model. Sampling therefore factorizes through the spectral
//! decomposition instead of Cholesky, and conditioning adds a small ridge
//! before solving.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::rng::{stream_rng, StreamRng};

/// Relative tolerance for symmetry checks.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Most negative eigenvalue still accepted as positive semi-definite.
pub const PSD_TOL: f64 = 1e-10;
/// Ridge factor (times the mean diagonal) applied before conditioning.
pub const CONDITIONING_RIDGE: f64 = 1e-9;
/// Minimum eigenvalue targeted by [`psd_shrink`].
pub const SHRINK_MIN_EIGENVALUE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaussianError {
    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),
    #[error("conditioning block over indices {indices:?} is singular")]
    SingularConditioning { indices: Vec<usize> },
    #[error("columns {0} and {1} are jointly observed in {2} rows, at least 2 are required")]
    InsufficientOverlap(usize, usize, usize),
    #[error("indefinite matrix with non-positive mean diagonal {0} cannot be shrunk to the identity")]
    Unshrinkable(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid residual table: {0}")]
    InvalidResiduals(String),
}

/// A validated symmetric positive semi-definite covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrix(DMatrix<f64>);

impl CovMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self, GaussianError> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(GaussianError::InvalidCovariance(format!(
                "expected a non-empty square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GaussianError::InvalidCovariance("non-finite entry".into()));
        }
        let scale = m.amax().max(1.0);
        let d = m.nrows();
        for i in 0..d {
            for j in (i + 1)..d {
                if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(GaussianError::InvalidCovariance(format!(
                        "not symmetric at ({i}, {j}): {} vs {}",
                        m[(i, j)],
                        m[(j, i)]
                    )));
                }
            }
        }
        let m = symmetrize(&m);
        let min_eig = SymmetricEigen::new(m.clone()).eigenvalues.min();
        if min_eig < -PSD_TOL {
            return Err(GaussianError::InvalidCovariance(format!(
                "indefinite: minimum eigenvalue {min_eig:e}"
            )));
        }
        Ok(Self(m))
    }

    pub fn from_row_major(dim: usize, entries: &[f64]) -> Result<Self, GaussianError> {
        if entries.len() != dim * dim {
            return Err(GaussianError::DimensionMismatch(format!(
                "{} entries cannot form a {dim}x{dim} matrix",
                entries.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(dim, dim, entries))
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(DMatrix::zeros(dim, dim))
    }

    pub fn diagonal(values: &[f64]) -> Result<Self, GaussianError> {
        Self::new(DMatrix::from_diagonal(&DVector::from_row_slice(values)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        let d = self.dim();
        (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| self.0[(i, j)]).collect()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.0.clone()).eigenvalues.min()
    }

    /// Principal submatrix over `idx` (in the given order).
    pub fn submatrix(&self, idx: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(idx.len(), idx.len(), |a, b| self.0[(idx[a], idx[b])])
    }

    /// Mean absolute entrywise difference.
    pub fn mean_abs_diff(&self, other: &CovMatrix) -> f64 {
        let n = self.0.len() as f64;
        (&self.0 - &other.0).iter().map(|v| v.abs()).sum::<f64>() / n
    }
}

impl Serialize for CovMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_row_major().serialize(s)
    }
}

impl<'de> Deserialize<'de> for CovMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let flat = Vec::<f64>::deserialize(d)?;
        let dim = (flat.len() as f64).sqrt().round() as usize;
        CovMatrix::from_row_major(dim, &flat).map_err(serde::de::Error::custom)
    }
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Projects a symmetric matrix onto the PSD cone by clamping eigenvalues at 0.
pub fn project_psd(m: &DMatrix<f64>) -> CovMatrix {
    let eig = SymmetricEigen::new(symmetrize(m));
    if eig.eigenvalues.min() >= 0.0 {
        return CovMatrix(symmetrize(m));
    }
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    CovMatrix(symmetrize(&rebuilt))
}

/// Draws from `N(0, Σ)` through a spectral square root `Σ = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct MvnSampler {
    factor: DMatrix<f64>,
}

impl MvnSampler {
    pub fn new(sigma: &CovMatrix) -> Self {
        let eig = SymmetricEigen::new(sigma.0.clone());
        let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        let factor = &eig.eigenvectors * DMatrix::from_diagonal(&roots);
        Self { factor }
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.factor * z
    }
}

/// `n` i.i.d. rows from `N(0, sigma)`, drawn from stream 0 of `seed`.
pub fn sample_mvn(sigma: &CovMatrix, n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng: StreamRng = stream_rng(seed, 0);
    sample_mvn_with(sigma, n, &mut rng)
}

pub fn sample_mvn_with<R: Rng + ?Sized>(sigma: &CovMatrix, n: usize, rng: &mut R) -> DMatrix<f64> {
    let sampler = MvnSampler::new(sigma);
    let mut out = DMatrix::zeros(n, sigma.dim());
    for r in 0..n {
        out.set_row(r, &sampler.draw(rng).transpose());
    }
    out
}

fn check_indices(sigma: &CovMatrix, idx: &[usize]) -> Result<(), GaussianError> {
    match idx.iter().find(|&&i| i >= sigma.dim()) {
        Some(i) => Err(GaussianError::DimensionMismatch(format!(
            "index {i} out of range for dimension {}",
            sigma.dim()
        ))),
        None => Ok(()),
    }
}

/// Regression weights `Σ_{t,G} Σ_{G,G}⁻¹` of coordinate `target` on the
/// coordinates in `given`. Empty `given` yields an empty vector.
pub fn conditional_weights(sigma: &CovMatrix, target: usize, given: &[usize]) -> Result<DVector<f64>, GaussianError> {
    check_indices(sigma, given)?;
    check_indices(sigma, &[target])?;
    if given.is_empty() {
        return Ok(DVector::zeros(0));
    }
    let mut block = sigma.submatrix(given);
    let mu = block.diagonal().mean();
    if mu > 0.0 {
        for i in 0..given.len() {
            block[(i, i)] += CONDITIONING_RIDGE * mu;
        }
    }
    let chol = block
        .cholesky()
        .ok_or_else(|| GaussianError::SingularConditioning { indices: given.to_vec() })?;
    let cross = DVector::from_fn(given.len(), |a, _| sigma.get(given[a], target));
    let w = chol.solve(&cross);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(GaussianError::SingularConditioning { indices: given.to_vec() });
    }
    Ok(w)
}

/// Conditional mean `E[U_target | U_given = u]` of a zero-mean Gaussian.
pub fn cond_expectation(sigma: &CovMatrix, target: usize, given: &[usize], u: &[f64]) -> Result<f64, GaussianError> {
    if given.len() != u.len() {
        return Err(GaussianError::DimensionMismatch(format!(
            "{} conditioning indices but {} values",
            given.len(),
            u.len()
        )));
    }
    if given.is_empty() {
        return Ok(0.0);
    }
    let w = conditional_weights(sigma, target, given)?;
    Ok(w.iter().zip(u).map(|(a, b)| a * b).sum())
}

/// Conditional variance of `U_target` given `U_given`, floored at 0.
pub fn conditional_variance(sigma: &CovMatrix, target: usize, given: &[usize]) -> Result<f64, GaussianError> {
    let w = conditional_weights(sigma, target, given)?;
    let explained: f64 = w.iter().zip(given).map(|(a, &g)| a * sigma.get(g, target)).sum();
    Ok((sigma.get(target, target) - explained).max(0.0))
}

/// Residual noise realizations with a presence mask. The last column is the
/// outcome noise and is never masked.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTable {
    values: DMatrix<f64>,
    present: Vec<bool>,
}

impl ResidualTable {
    /// `present` is row-major with one flag per cell.
    pub fn new(values: DMatrix<f64>, present: Vec<bool>) -> Result<Self, GaussianError> {
        let (n, cols) = values.shape();
        if cols == 0 {
            return Err(GaussianError::InvalidResiduals("no columns".into()));
        }
        if present.len() != n * cols {
            return Err(GaussianError::InvalidResiduals(format!(
                "mask has {} cells, table has {}",
                present.len(),
                n * cols
            )));
        }
        for r in 0..n {
            if !present[r * cols + cols - 1] {
                return Err(GaussianError::InvalidResiduals(format!("outcome column masked in row {r}")));
            }
            for c in 0..cols {
                if present[r * cols + c] && !values[(r, c)].is_finite() {
                    return Err(GaussianError::InvalidResiduals(format!("non-finite cell ({r}, {c})")));
                }
            }
        }
        Ok(Self { values, present })
    }

    pub fn fully_observed(values: DMatrix<f64>) -> Result<Self, GaussianError> {
        let cells = values.len();
        Self::new(values, vec![true; cells])
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_present(&self, row: usize, col: usize) -> bool {
        self.present[row * self.ncols() + col]
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[(row, col)]
    }
}

/// Pairwise-complete zero-mean covariance estimate, projected to the PSD cone.
pub fn mle_cov(residuals: &ResidualTable) -> Result<CovMatrix, GaussianError> {
    let d = residuals.ncols();
    let mut sums = DMatrix::<f64>::zeros(d, d);
    let mut counts = vec![0usize; d * d];
    for r in 0..residuals.nrows() {
        for i in 0..d {
            if !residuals.is_present(r, i) {
                continue;
            }
            let vi = residuals.value(r, i);
            for j in i..d {
                if residuals.is_present(r, j) {
                    sums[(i, j)] += vi * residuals.value(r, j);
                    counts[i * d + j] += 1;
                }
            }
        }
    }
    let mut raw = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let c = counts[i * d + j];
            if c < 2 {
                return Err(GaussianError::InsufficientOverlap(i, j, c));
            }
            let v = sums[(i, j)] / c as f64;
            raw[(i, j)] = v;
            raw[(j, i)] = v;
        }
    }
    Ok(project_psd(&raw))
}

/// Zero-mean covariance maximum-likelihood estimate for a table whose
/// missing cells are missing at random, by EM started from `init`.
///
/// Rows are grouped by presence pattern; each sweep replaces the missing
/// block of every row's second moment by its conditional expectation under
/// the current estimate. Stops after `max_iter` sweeps or when no entry
/// moves by more than `tol`.
pub fn em_cov(residuals: &ResidualTable, init: &CovMatrix, max_iter: usize, tol: f64) -> Result<CovMatrix, GaussianError> {
    let d = residuals.ncols();
    if init.dim() != d {
        return Err(GaussianError::DimensionMismatch(format!(
            "initial covariance has dimension {}, table has {d}",
            init.dim()
        )));
    }
    let n = residuals.nrows();
    if n < 2 {
        return Err(GaussianError::InsufficientOverlap(0, 0, n));
    }
    // per-pattern scatter over the observed columns
    let mut patterns: BTreeMap<Vec<bool>, (usize, DMatrix<f64>)> = BTreeMap::new();
    for r in 0..n {
        let flags: Vec<bool> = (0..d).map(|c| residuals.is_present(r, c)).collect();
        let obs: Vec<usize> = (0..d).filter(|&c| flags[c]).collect();
        let u = DVector::from_iterator(obs.len(), obs.iter().map(|&c| residuals.value(r, c)));
        let entry = patterns.entry(flags).or_insert_with(|| (0, DMatrix::zeros(obs.len(), obs.len())));
        entry.0 += 1;
        entry.1.ger(1.0, &u, &u, 1.0);
    }
    let mut sigma = init.matrix().clone();
    for _ in 0..max_iter {
        let mut next = DMatrix::<f64>::zeros(d, d);
        for (flags, (count, scatter)) in &patterns {
            let obs: Vec<usize> = (0..d).filter(|&c| flags[c]).collect();
            let mis: Vec<usize> = (0..d).filter(|&c| !flags[c]).collect();
            for (a, &i) in obs.iter().enumerate() {
                for (b, &j) in obs.iter().enumerate() {
                    next[(i, j)] += scatter[(a, b)];
                }
            }
            if mis.is_empty() {
                continue;
            }
            let s_oo = DMatrix::from_fn(obs.len(), obs.len(), |a, b| sigma[(obs[a], obs[b])]);
            let s_mo = DMatrix::from_fn(mis.len(), obs.len(), |a, b| sigma[(mis[a], obs[b])]);
            let s_mm = DMatrix::from_fn(mis.len(), mis.len(), |a, b| sigma[(mis[a], mis[b])]);
            let ridge = CONDITIONING_RIDGE * (s_oo.trace() / obs.len() as f64).max(f64::MIN_POSITIVE);
            let chol = (s_oo + DMatrix::identity(obs.len(), obs.len()) * ridge)
                .cholesky()
                .ok_or_else(|| GaussianError::SingularConditioning { indices: obs.clone() })?;
            // B = Σ_MO Σ_OO⁻¹
            let b = chol.solve(&s_mo.transpose()).transpose();
            let mo = &b * scatter;
            let mm = &mo * b.transpose() + (&s_mm - &b * s_mo.transpose()) * (*count as f64);
            for (a, &i) in mis.iter().enumerate() {
                for (c, &j) in obs.iter().enumerate() {
                    next[(i, j)] += mo[(a, c)];
                    next[(j, i)] += mo[(a, c)];
                }
                for (c, &j) in mis.iter().enumerate() {
                    next[(i, j)] += mm[(a, c)];
                }
            }
        }
        next /= n as f64;
        let next = symmetrize(&next);
        let delta = (&next - &sigma).amax();
        sigma = next;
        if delta < tol {
            break;
        }
    }
    Ok(project_psd(&sigma))
}

/// Result of [`psd_shrink`].
#[derive(Debug, Clone, PartialEq)]
pub struct Shrunk {
    pub cov: CovMatrix,
    pub lambda: f64,
}

/// Shrinks a symmetric matrix toward `μ·I` (μ = mean diagonal) with the
/// smallest weight that makes it positive definite with minimum eigenvalue
/// at least [`SHRINK_MIN_EIGENVALUE`]. PSD input is returned unchanged.
///
/// The minimum eigenvalue of `(1-λ)·S + λ·μ·I` is `(1-λ)·e + λ·μ` with `e`
/// the minimum eigenvalue of `S`, so the smallest admissible weight has a
/// closed form.
pub fn psd_shrink(raw: &DMatrix<f64>) -> Result<Shrunk, GaussianError> {
    if !raw.is_square() || raw.nrows() == 0 {
        return Err(GaussianError::DimensionMismatch("psd_shrink expects a non-empty square matrix".into()));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(GaussianError::InvalidCovariance("non-finite entry".into()));
    }
    let s = symmetrize(raw);
    let e = SymmetricEigen::new(s.clone()).eigenvalues.min();
    if e >= 0.0 {
        return Ok(Shrunk { cov: CovMatrix(s), lambda: 0.0 });
    }
    let mu = s.diagonal().mean();
    if mu <= SHRINK_MIN_EIGENVALUE {
        return Err(GaussianError::Unshrinkable(mu));
    }
    let d = s.nrows();
    let target = DMatrix::<f64>::identity(d, d) * mu;
    let blend = |lambda: f64| symmetrize(&(&s * (1.0 - lambda) + &target * lambda));
    let mut lambda = ((SHRINK_MIN_EIGENVALUE - e) / (mu - e)).clamp(0.0, 1.0);
    let mut out = blend(lambda);
    // rounding can leave the minimum a hair under target
    while SymmetricEigen::new(out.clone()).eigenvalues.min() < SHRINK_MIN_EIGENVALUE && lambda < 1.0 {
        lambda = (lambda + 1e-12_f64.max(lambda * 1e-12)).min(1.0);
        out = blend(lambda);
    }
    Ok(Shrunk { cov: CovMatrix(out), lambda })
}
