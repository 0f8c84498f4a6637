//! Machine checks of which regimes pin down single-intervention effects.
//!
//! Finite models are enumerated exactly: every noise atom is pushed through
//! the structural tables in topological order. The degenerate Gaussian pair
//! is checked by Monte Carlo with a single common normal factor.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{child_stream, stream_rng};

/// Slack for probability sums and distance comparisons.
pub const PROB_TOL: f64 = 1e-12;

/// Standardized distance separating "agree" from "differ" in Monte Carlo
/// checks.
pub const Z_THRESHOLD: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IdentifyError {
    #[error("invalid model: {0}")]
    InvalidScm(String),
    #[error("unknown variable {0}")]
    UnknownVariable(String),
    #[error("value {value} is outside the support of {variable}")]
    OutOfSupport { variable: String, value: i64 },
    #[error("distributions are over different variables: {0}")]
    SupportMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("counterexample broken at {regime}")]
    CounterexampleBroken { regime: String },
}

/// An endogenous variable with a finite support and a total lookup table
/// from `(parent values, noise values)` to its value.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteVar {
    pub name: String,
    pub support: Vec<i64>,
    pub parents: Vec<usize>,
    pub noises: Vec<usize>,
    pub table: BTreeMap<Vec<i64>, i64>,
}

/// Joint pmf over the exogenous noise, as a list of atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePmf {
    pub names: Vec<String>,
    pub atoms: Vec<(Vec<i64>, f64)>,
}

impl NoisePmf {
    /// Distinct values taken by noise coordinate `j`.
    pub fn support(&self, j: usize) -> Vec<i64> {
        let mut s: Vec<i64> = self.atoms.iter().map(|(v, _)| v[j]).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Product pmf of independent Bernoulli coordinates where each group of
    /// names shares one draw.
    pub fn bernoulli_groups(groups: &[(&[&str], f64)]) -> Self {
        let names: Vec<String> = groups.iter().flat_map(|(g, _)| g.iter().map(|s| s.to_string())).collect();
        let mut atoms = Vec::with_capacity(1 << groups.len());
        for mask in 0..(1usize << groups.len()) {
            let mut values = Vec::with_capacity(names.len());
            let mut prob = 1.0;
            for (g, (members, q)) in groups.iter().enumerate() {
                let bit = (mask >> g) & 1;
                prob *= if bit == 1 { *q } else { 1.0 - q };
                values.extend(std::iter::repeat_n(bit as i64, members.len()));
            }
            atoms.push((values, prob));
        }
        Self { names, atoms }
    }
}

/// A finite SCM whose variables are listed in topological order.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteScm {
    pub noise: NoisePmf,
    pub vars: Vec<FiniteVar>,
}

impl FiniteScm {
    pub fn new(noise: NoisePmf) -> Self {
        Self { noise, vars: Vec::new() }
    }

    /// Appends a variable whose table is filled by evaluating `f` on every
    /// combination of parent and noise values.
    pub fn tabulate(
        mut self,
        name: &str,
        support: &[i64],
        parents: &[&str],
        noises: &[&str],
        f: impl Fn(&[i64], &[i64]) -> i64,
    ) -> Result<Self, IdentifyError> {
        let parent_idx = parents.iter().map(|p| self.var_index(p)).collect::<Result<Vec<_>, _>>()?;
        let noise_idx = noises
            .iter()
            .map(|u| self.noise.names.iter().position(|n| n == u).ok_or_else(|| IdentifyError::UnknownVariable(u.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let mut domains: Vec<Vec<i64>> = parent_idx.iter().map(|&p| self.vars[p].support.clone()).collect();
        domains.extend(noise_idx.iter().map(|&u| self.noise.support(u)));
        let mut table = BTreeMap::new();
        for key in cartesian(&domains) {
            let (pv, uv) = key.split_at(parent_idx.len());
            let v = f(pv, uv);
            table.insert(key, v);
        }
        self.vars.push(FiniteVar { name: name.to_string(), support: support.to_vec(), parents: parent_idx, noises: noise_idx, table });
        self.validate()?;
        Ok(self)
    }

    pub fn var_index(&self, name: &str) -> Result<usize, IdentifyError> {
        self.vars.iter().position(|v| v.name == name).ok_or_else(|| IdentifyError::UnknownVariable(name.to_string()))
    }

    pub fn validate(&self) -> Result<(), IdentifyError> {
        if self.noise.atoms.iter().any(|(v, p)| v.len() != self.noise.names.len() || !(*p >= 0.0)) {
            return Err(IdentifyError::InvalidScm("noise atom of wrong length or negative mass".into()));
        }
        let total: f64 = self.noise.atoms.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(IdentifyError::InvalidScm(format!("noise pmf sums to {total}")));
        }
        for (i, v) in self.vars.iter().enumerate() {
            if v.parents.iter().any(|&p| p >= i) {
                return Err(IdentifyError::InvalidScm(format!("{} has a parent later in the order", v.name)));
            }
            if v.noises.iter().any(|&u| u >= self.noise.names.len()) {
                return Err(IdentifyError::InvalidScm(format!("{} reads an undeclared noise", v.name)));
            }
            let mut domains: Vec<Vec<i64>> = v.parents.iter().map(|&p| self.vars[p].support.clone()).collect();
            domains.extend(v.noises.iter().map(|&u| self.noise.support(u)));
            for key in cartesian(&domains) {
                match v.table.get(&key) {
                    None => return Err(IdentifyError::InvalidScm(format!("{} has no entry for {key:?}", v.name))),
                    Some(out) if !v.support.contains(out) => {
                        return Err(IdentifyError::OutOfSupport { variable: v.name.clone(), value: *out })
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(())
    }

    /// Names the regime in `do(X1=1,X2=0)` form, or `obs`.
    pub fn describe(&self, regime: &BTreeMap<usize, i64>) -> String {
        if regime.is_empty() {
            return "obs".into();
        }
        let parts: Vec<String> = regime.iter().map(|(&i, v)| format!("{}={v}", self.vars[i].name)).collect();
        format!("do({})", parts.join(","))
    }

    /// Resolves `[("X1", 1)]` style pins into a regime map.
    pub fn regime(&self, pins: &[(&str, i64)]) -> Result<BTreeMap<usize, i64>, IdentifyError> {
        pins.iter().map(|(n, v)| Ok((self.var_index(n)?, *v))).collect()
    }
}

fn cartesian(domains: &[Vec<i64>]) -> Vec<Vec<i64>> {
    let mut out = vec![Vec::new()];
    for d in domains {
        out = out.into_iter().flat_map(|prefix| d.iter().map(move |&v| [prefix.clone(), vec![v]].concat())).collect();
    }
    out
}

/// Exact pmf of the non-intervened variables under a regime.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeDistribution {
    pub regime: String,
    pub variables: Vec<String>,
    pub pmf: BTreeMap<Vec<i64>, f64>,
}

impl RegimeDistribution {
    /// Mass of one joint outcome, in the order of `variables`.
    pub fn prob(&self, values: &[i64]) -> f64 {
        self.pmf.get(values).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.pmf.values().sum()
    }
}

pub fn enumerate_distribution(m: &FiniteScm, regime: &BTreeMap<usize, i64>) -> Result<RegimeDistribution, IdentifyError> {
    for (&i, &v) in regime {
        let var = m.vars.get(i).ok_or_else(|| IdentifyError::UnknownVariable(format!("#{i}")))?;
        if !var.support.contains(&v) {
            return Err(IdentifyError::OutOfSupport { variable: var.name.clone(), value: v });
        }
    }
    let free: Vec<usize> = (0..m.vars.len()).filter(|i| !regime.contains_key(i)).collect();
    let mut pmf = BTreeMap::new();
    let mut values = vec![0i64; m.vars.len()];
    let mut key = Vec::new();
    for (u, p) in &m.noise.atoms {
        if *p == 0.0 {
            continue;
        }
        for (i, var) in m.vars.iter().enumerate() {
            values[i] = match regime.get(&i) {
                Some(&v) => v,
                None => {
                    key.clear();
                    key.extend(var.parents.iter().map(|&q| values[q]));
                    key.extend(var.noises.iter().map(|&j| u[j]));
                    *var.table.get(&key).ok_or_else(|| IdentifyError::InvalidScm(format!("{} has no entry for {key:?}", var.name)))?
                }
            };
        }
        *pmf.entry(free.iter().map(|&i| values[i]).collect()).or_insert(0.0) += p;
    }
    Ok(RegimeDistribution { regime: m.describe(regime), variables: free.iter().map(|&i| m.vars[i].name.clone()).collect(), pmf })
}

/// Total-variation distance between two pmfs over the same variables.
pub fn compare_distributions(a: &RegimeDistribution, b: &RegimeDistribution) -> Result<f64, IdentifyError> {
    if a.variables != b.variables {
        return Err(IdentifyError::SupportMismatch(format!("{:?} vs {:?}", a.variables, b.variables)));
    }
    let mut sum = 0.0;
    for (k, p) in &a.pmf {
        sum += (p - b.prob(k)).abs();
    }
    for (k, p) in &b.pmf {
        if !a.pmf.contains_key(k) {
            sum += p.abs();
        }
    }
    Ok(0.5 * sum)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Equal,
    Different,
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Relation::Equal => "equal",
            Relation::Different => "different",
        })
    }
}

/// One asserted relation between the two models of a counterexample pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationCheck {
    pub regime: String,
    /// `pmf` for exact checks, otherwise the Monte Carlo statistic compared.
    pub quantity: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tv_distance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value_m_prime: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_score: Option<f64>,
    pub expected_relation: Relation,
    pub pass: bool,
}

impl RelationCheck {
    fn exact(regime: String, tv: f64, expected: Relation) -> Self {
        let pass = match expected {
            Relation::Equal => tv <= PROB_TOL,
            Relation::Different => tv > PROB_TOL,
        };
        Self { regime, quantity: "pmf".into(), tv_distance: Some(tv), value_m: None, value_m_prime: None, z_score: None, expected_relation: expected, pass }
    }

    fn monte_carlo(regime: &str, quantity: &str, a: &Summary, b: &Summary, expected: Relation) -> Self {
        let se = (a.se * a.se + b.se * b.se).sqrt();
        let gap = (a.mean - b.mean).abs();
        let z = if se > 0.0 { gap / se } else if gap == 0.0 { 0.0 } else { f64::INFINITY };
        let pass = match expected {
            Relation::Equal => z <= Z_THRESHOLD,
            Relation::Different => z > Z_THRESHOLD,
        };
        Self {
            regime: regime.into(),
            quantity: quantity.into(),
            tv_distance: None,
            value_m: Some(a.mean),
            value_m_prime: Some(b.mean),
            z_score: Some(z),
            expected_relation: expected,
            pass,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyStatus {
    Pass,
    Fail,
    /// No reading of the model pair reproduces the stated claim, so
    /// nothing was asserted.
    Unresolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub verifier: String,
    pub parameters: BTreeMap<String, f64>,
    pub status: VerifyStatus,
    pub checks: Vec<RelationCheck>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl VerifyReport {
    fn from_checks(verifier: &str, parameters: BTreeMap<String, f64>, checks: Vec<RelationCheck>) -> Self {
        let status = if checks.iter().all(|c| c.pass) { VerifyStatus::Pass } else { VerifyStatus::Fail };
        Self { verifier: verifier.into(), parameters, status, checks, notes: Vec::new() }
    }

    /// Errors with the first failing regime, if any.
    pub fn ensure(&self) -> Result<(), IdentifyError> {
        match self.checks.iter().find(|c| !c.pass) {
            Some(c) => Err(IdentifyError::CounterexampleBroken { regime: format!("{} ({})", c.regime, c.quantity) }),
            None => Ok(()),
        }
    }

    pub fn check(&self, regime: &str, quantity: &str) -> Option<&RelationCheck> {
        self.checks.iter().find(|c| c.regime == regime && c.quantity == quantity)
    }
}

fn check_probability(p: f64, closed_upper: bool) -> Result<(), IdentifyError> {
    let ok = p > 0.0 && (p < 1.0 || (closed_upper && p == 1.0));
    if ok {
        Ok(())
    } else {
        Err(IdentifyError::InvalidParameter(format!("probability {p} out of range")))
    }
}

/// The pair `(M, M′)` with one shared Bernoulli(p) noise driving all three
/// variables. `M`: `X1 = U1, X2 = X1·U2, Y = X1·X2·U_Y`; `M′` differs only
/// in `X2 = U2`.
pub fn discrete_pair_models(p: f64) -> Result<(FiniteScm, FiniteScm), IdentifyError> {
    check_probability(p, false)?;
    let noise = NoisePmf::bernoulli_groups(&[(&["U1", "U2", "UY"], p)]);
    let build = |x2_reads_x1: bool| -> Result<FiniteScm, IdentifyError> {
        let m = FiniteScm::new(noise.clone()).tabulate("X1", &[0, 1], &[], &["U1"], |_, u| u[0])?;
        let m = if x2_reads_x1 {
            m.tabulate("X2", &[0, 1], &["X1"], &["U2"], |x, u| x[0] * u[0])?
        } else {
            m.tabulate("X2", &[0, 1], &[], &["U2"], |_, u| u[0])?
        };
        m.tabulate("Y", &[0, 1], &["X1", "X2"], &["UY"], |x, u| x[0] * x[1] * u[0])
    };
    Ok((build(true)?, build(false)?))
}

/// Enumerates both finite models over observational, every joint and every
/// single-treatment regime. Only `do(X1=0)` is expected to differ.
pub fn verify_discrete_pair(p: f64) -> Result<VerifyReport, IdentifyError> {
    let (m, mp) = discrete_pair_models(p)?;
    let mut regimes: Vec<(Vec<(&str, i64)>, Relation)> = vec![(vec![], Relation::Equal)];
    for a in 0..2 {
        for b in 0..2 {
            regimes.push((vec![("X1", a), ("X2", b)], Relation::Equal));
        }
    }
    for b in 0..2 {
        regimes.push((vec![("X2", b)], Relation::Equal));
    }
    regimes.push((vec![("X1", 0)], Relation::Different));
    regimes.push((vec![("X1", 1)], Relation::Equal));
    let mut checks = Vec::with_capacity(regimes.len());
    for (pins, expected) in regimes {
        let r = m.regime(&pins)?;
        let tv = compare_distributions(&enumerate_distribution(&m, &r)?, &enumerate_distribution(&mp, &r)?)?;
        checks.push(RelationCheck::exact(m.describe(&r), tv, expected));
    }
    Ok(VerifyReport::from_checks("s31", BTreeMap::from([("p".to_string(), p)]), checks))
}

/// Mean of a sample and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub se: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Self { mean, se: (var / n).sqrt() }
    }
}

/// Noise loadings on the common factor `Z` for `(U1, U2, U_Y)`, and the
/// coefficient of `X1` in `f_2`.
#[derive(Debug, Clone, Copy)]
struct DegenerateChain {
    loadings: [f64; 3],
    slope: f64,
}

impl DegenerateChain {
    fn draw(&self, z: f64, do_x1: Option<f64>, do_x2: Option<f64>) -> [f64; 3] {
        let [l1, l2, ly] = self.loadings;
        let x1 = do_x1.unwrap_or(l1 * z);
        let x2 = do_x2.unwrap_or(self.slope * x1 + l2 * z);
        [x1, x2, x1 * x2 + ly * z]
    }
}

/// Checks the Gaussian pair `X2 = X1 + U2` under the all-ones covariance
/// against `X2 = 2·X1 + U2` with `U2 = 0`, both with `Y = X1·X2 + U_Y`.
pub fn verify_gaussian_pair(n_mc: usize, seed: u64) -> Result<VerifyReport, IdentifyError> {
    if n_mc < 100_000 {
        return Err(IdentifyError::InvalidParameter(format!("n_mc = {n_mc} is below 100000")));
    }
    let m = DegenerateChain { loadings: [1.0, 1.0, 1.0], slope: 1.0 };
    let mp = DegenerateChain { loadings: [1.0, 0.0, 1.0], slope: 2.0 };
    type Stat = fn(&[f64; 3]) -> f64;
    let moments: [(&str, Stat); 9] = [
        ("mean(X1)", |v| v[0]),
        ("mean(X2)", |v| v[1]),
        ("mean(Y)", |v| v[2]),
        ("E[X1^2]", |v| v[0] * v[0]),
        ("E[X2^2]", |v| v[1] * v[1]),
        ("E[Y^2]", |v| v[2] * v[2]),
        ("E[X1*X2]", |v| v[0] * v[1]),
        ("E[X1*Y]", |v| v[0] * v[2]),
        ("E[X2*Y]", |v| v[1] * v[2]),
    ];
    let mut regimes: Vec<(String, Option<f64>, Option<f64>, Vec<(&str, Stat, Relation)>)> = Vec::new();
    let all_equal = |names: &[&str]| -> Vec<(&str, Stat, Relation)> {
        moments.iter().filter(|(n, _)| names.contains(n)).map(|&(n, f)| (n, f, Relation::Equal)).collect()
    };
    regimes.push(("obs".into(), None, None, all_equal(&moments.map(|(n, _)| n))));
    for (a, b) in [(0.0, 0.0), (1.0, 1.0), (-1.0, 2.0), (0.5, -1.5)] {
        regimes.push((format!("do(X1={a},X2={b})"), Some(a), Some(b), all_equal(&["mean(Y)", "E[Y^2]"])));
    }
    for b in [0.0, 1.0] {
        regimes.push((format!("do(X2={b})"), None, Some(b), all_equal(&["mean(X1)", "mean(Y)", "E[X1^2]", "E[Y^2]", "E[X1*Y]"])));
    }
    regimes.push((
        "do(X1=1)".into(),
        Some(1.0),
        None,
        vec![("mean(Y)", moments[2].1, Relation::Different), ("E[X2^2]", moments[4].1, Relation::Different)],
    ));
    regimes.push((
        "do(X1=0)".into(),
        Some(0.0),
        None,
        vec![("mean(Y)", moments[2].1, Relation::Equal), ("E[X2^2]", moments[4].1, Relation::Different)],
    ));

    let mut checks = Vec::new();
    let mut one_draws = None;
    for (r, (name, do_x1, do_x2, stats)) in regimes.iter().enumerate() {
        let simulate = |model: &DegenerateChain, label: u64| -> Vec<[f64; 3]> {
            let mut rng = stream_rng(seed, child_stream(r as u64, label));
            (0..n_mc).map(|_| model.draw(rng.sample(StandardNormal), *do_x1, *do_x2)).collect()
        };
        let (a, b) = (simulate(&m, 0), simulate(&mp, 1));
        for (q, f, rel) in stats {
            let sa = Summary::of(&a.iter().map(f).collect::<Vec<_>>());
            let sb = Summary::of(&b.iter().map(f).collect::<Vec<_>>());
            checks.push(RelationCheck::monte_carlo(name, q, &sa, &sb, *rel));
        }
        if name == "do(X1=1)" {
            one_draws = Some((a, b));
        }
    }
    // closed-form means under do(X1=1): Y = 1 + 2Z under M, Y = 2 + Z under M'
    if let Some((a, b)) = one_draws {
        for (label, draws, truth) in [("M", &a, 1.0), ("M'", &b, 2.0)] {
            let s = Summary::of(&draws.iter().map(|v| v[2]).collect::<Vec<_>>());
            let exact = Summary { mean: truth, se: 0.0 };
            let mut c = RelationCheck::monte_carlo("do(X1=1)", &format!("mean(Y) under {label} vs analytic"), &s, &exact, Relation::Equal);
            c.value_m_prime = Some(truth);
            checks.push(c);
        }
    }
    let params = BTreeMap::from([("n_mc".to_string(), n_mc as f64), ("seed".to_string(), seed as f64)]);
    Ok(VerifyReport::from_checks("g32", params, checks))
}

/// Probability parameters of a Bernoulli noise declaration.
#[derive(Debug, Clone, Copy)]
struct Declared {
    name: &'static str,
    q: f64,
}

/// All set partitions of `0..n`, each as a list of blocks.
fn set_partitions(n: usize) -> Vec<Vec<Vec<usize>>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in set_partitions(n - 1) {
        for i in 0..rest.len() {
            let mut p = rest.clone();
            p[i].push(n - 1);
            out.push(p);
        }
        let mut p = rest;
        p.push(vec![n - 1]);
        out.push(p);
    }
    out
}

fn coupling_pmf(decl: &[Declared], blocks: &[Vec<usize>]) -> Option<NoisePmf> {
    let mut groups = Vec::with_capacity(blocks.len());
    let mut order = Vec::new();
    for b in blocks {
        let q = decl[b[0]].q;
        if b.iter().any(|&i| decl[i].q != q) {
            return None;
        }
        groups.push(q);
        order.extend(b.iter().copied());
    }
    let names: Vec<&str> = order.iter().map(|&i| decl[i].name).collect();
    let mut start = 0;
    let spec: Vec<(&[&str], f64)> = blocks
        .iter()
        .zip(&groups)
        .map(|(b, &q)| {
            let s = &names[start..start + b.len()];
            start += b.len();
            (s, q)
        })
        .collect();
    Some(NoisePmf::bernoulli_groups(&spec))
}

/// The XOR pair with covariates correlated with the noise. `M`:
/// `X1 = U1, X2 = C ⊕ U2`; `M′`: `X1 = C ⊕ U1, X2 = U2`; both with
/// `Y = X1·X2·C ⊕ U_Y` and `C` read from its own noise `UC`.
fn cu_models(pm: NoisePmf, pmp: NoisePmf) -> Result<(FiniteScm, FiniteScm), IdentifyError> {
    let m = FiniteScm::new(pm)
        .tabulate("C", &[0, 1], &[], &["UC"], |_, u| u[0])?
        .tabulate("X1", &[0, 1], &[], &["U1"], |_, u| u[0])?
        .tabulate("X2", &[0, 1], &["C"], &["U2"], |x, u| x[0] ^ u[0])?
        .tabulate("Y", &[0, 1], &["C", "X1", "X2"], &["UY"], |x, u| (x[0] * x[1] * x[2]) ^ u[0])?;
    let mp = FiniteScm::new(pmp)
        .tabulate("C", &[0, 1], &[], &["UC"], |_, u| u[0])?
        .tabulate("X1", &[0, 1], &["C"], &["U1"], |x, u| x[0] ^ u[0])?
        .tabulate("X2", &[0, 1], &[], &["U2"], |_, u| u[0])?
        .tabulate("Y", &[0, 1], &["C", "X1", "X2"], &["UY"], |x, u| (x[0] * x[1] * x[2]) ^ u[0])?;
    Ok((m, mp))
}

struct CuOutcome {
    agree: bool,
    y1_m: f64,
    y1_mp: f64,
}

fn cu_evaluate(m: &FiniteScm, mp: &FiniteScm) -> Result<CuOutcome, IdentifyError> {
    let mut agree = true;
    let mut regimes = vec![vec![]];
    for a in 0..2 {
        for b in 0..2 {
            regimes.push(vec![("X1", a), ("X2", b)]);
        }
    }
    for pins in regimes {
        let r = m.regime(&pins)?;
        agree &= compare_distributions(&enumerate_distribution(m, &r)?, &enumerate_distribution(mp, &r)?)? <= PROB_TOL;
    }
    let r = m.regime(&[("X1", 1)])?;
    let y_one = |d: RegimeDistribution| {
        let y = d.variables.iter().position(|v| v == "Y").expect("Y is never intervened");
        d.pmf.iter().filter(|(k, _)| k[y] == 1).map(|(_, p)| p).sum::<f64>()
    };
    Ok(CuOutcome { agree, y1_m: y_one(enumerate_distribution(m, &r)?), y1_mp: y_one(enumerate_distribution(mp, &r)?) })
}

/// Searches the couplings of the declared Bernoulli noises (each group of
/// equal-parameter noises either shares one draw or not) for a pair that
/// agrees on observational and joint regimes and reproduces
/// `P(Y=1 | do(X1=1))` of `1 − p` under `M` and `(1 − p)²` under `M′`.
/// If none does, the report is unresolved and asserts nothing.
pub fn verify_cu_dependence(p: f64) -> Result<VerifyReport, IdentifyError> {
    check_probability(p, true)?;
    let decl_m = [
        Declared { name: "UC", q: p },
        Declared { name: "U1", q: p },
        Declared { name: "U2", q: p },
        Declared { name: "UY", q: 1.0 },
    ];
    let decl_mp = [
        Declared { name: "UC", q: p },
        Declared { name: "U1", q: 1.0 },
        Declared { name: "U2", q: p },
        Declared { name: "UY", q: 1.0 },
    ];
    let target = (1.0 - p, (1.0 - p).powi(2));
    let partitions = set_partitions(4);
    let describe = |decl: &[Declared], blocks: &[Vec<usize>]| -> String {
        let parts: Vec<String> = blocks.iter().map(|b| b.iter().map(|&i| decl[i].name).collect::<Vec<_>>().join("=")).collect();
        parts.join(" ")
    };
    let mut tried = 0usize;
    for bm in &partitions {
        let Some(pm) = coupling_pmf(&decl_m, bm) else { continue };
        for bmp in &partitions {
            let Some(pmp) = coupling_pmf(&decl_mp, bmp) else { continue };
            tried += 1;
            let (m, mp) = cu_models(pm.clone(), pmp)?;
            let out = cu_evaluate(&m, &mp)?;
            if out.agree && (out.y1_m - target.0).abs() <= PROB_TOL && (out.y1_mp - target.1).abs() <= PROB_TOL {
                let mut checks = Vec::new();
                for pins in [vec![], vec![("X1", 0), ("X2", 0)], vec![("X1", 0), ("X2", 1)], vec![("X1", 1), ("X2", 0)], vec![("X1", 1), ("X2", 1)]] {
                    let r = m.regime(&pins)?;
                    let tv = compare_distributions(&enumerate_distribution(&m, &r)?, &enumerate_distribution(&mp, &r)?)?;
                    checks.push(RelationCheck::exact(m.describe(&r), tv, Relation::Equal));
                }
                let gap = (out.y1_m - out.y1_mp).abs();
                let r = m.regime(&[("X1", 1)])?;
                let tv = compare_distributions(&enumerate_distribution(&m, &r)?, &enumerate_distribution(&mp, &r)?)?;
                let expected = if gap > PROB_TOL { Relation::Different } else { Relation::Equal };
                checks.push(RelationCheck::exact(m.describe(&r), tv, expected));
                let mut report = VerifyReport::from_checks("cu", BTreeMap::from([("p".to_string(), p)]), checks);
                report.notes.push(format!("coupling M: {}; coupling M': {}", describe(&decl_m, bm), describe(&decl_mp, bmp)));
                return Ok(report);
            }
        }
    }
    // literal reading: UC and U2 share one draw in M, everything else independent
    let literal_m = coupling_pmf(&decl_m, &[vec![0, 2], vec![1], vec![3]]).expect("equal parameters");
    let literal_mp = coupling_pmf(&decl_mp, &[vec![0], vec![1], vec![2], vec![3]]).expect("singletons");
    let (m, mp) = cu_models(literal_m, literal_mp)?;
    let out = cu_evaluate(&m, &mp)?;
    let mut report = VerifyReport {
        verifier: "cu".into(),
        parameters: BTreeMap::from([("p".to_string(), p)]),
        status: VerifyStatus::Unresolved,
        checks: Vec::new(),
        notes: Vec::new(),
    };
    report.notes.push(format!(
        "no coupling among {tried} candidate pairs reproduces P(Y=1|do(X1=1)) = {} under M and {} under M'",
        target.0, target.1
    ));
    report.notes.push(format!(
        "shared UC=U2 reading gives {} under M and {} under M'; observational and joint regimes {}",
        out.y1_m,
        out.y1_mp,
        if out.agree { "agree" } else { "disagree" }
    ));
    Ok(report)
}
