//! File formats: SCMs as JSON and datasets as CSV.
//!
//! Dataset CSV columns are `regime_id, c_0.., x_0.., i_0.., y`, where the
//! `i_*` columns are 0/1 intervention flags. Floats are written with 17
//! significant digits so a write/read cycle is lossless.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimate::ThetaJson;
use crate::gaussian::CovMatrix;
use crate::model::{AnmParams, CovariateLaw, Dataset, InterventionSet, ModelError, PolyBasis, Record, StructuralEq, SymmetricAnm};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{source_name}:{line}: {message}")]
    Parse { source_name: String, line: u64, message: String },
    #[error("{source_name}: {message}")]
    Format { source_name: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Serialized form of a [`SymmetricAnm`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmJson {
    #[serde(rename = "K")]
    pub k: usize,
    pub covariate_dim: usize,
    pub theta: ThetaJson,
    pub sigma: CovMatrix,
    pub covariate_law: CovariateLaw,
}

impl From<&SymmetricAnm> for ScmJson {
    fn from(scm: &SymmetricAnm) -> Self {
        let mut thetas = scm.params.thetas();
        let outcome = thetas.pop().unwrap_or_default();
        Self {
            k: scm.params.treatments(),
            covariate_dim: scm.params.covariate_dim,
            theta: ThetaJson { treatments: thetas, outcome },
            sigma: scm.params.sigma.clone(),
            covariate_law: scm.covariate_law.clone(),
        }
    }
}

impl TryFrom<ScmJson> for SymmetricAnm {
    type Error = ModelError;

    fn try_from(j: ScmJson) -> Result<Self, ModelError> {
        if j.theta.treatments.len() != j.k {
            return Err(ModelError::InvalidModel(format!(
                "K = {} but {} treatment coefficient vectors",
                j.k,
                j.theta.treatments.len()
            )));
        }
        let tb = PolyBasis::new(j.covariate_dim);
        let eqs = j.theta.treatments.into_iter().map(|t| StructuralEq::new(tb, t)).collect::<Result<Vec<_>, _>>()?;
        let outcome = StructuralEq::new(PolyBasis::new(j.covariate_dim + j.k), j.theta.outcome)?;
        SymmetricAnm::new(AnmParams::new(j.covariate_dim, eqs, outcome, j.sigma)?, j.covariate_law)
    }
}

pub fn dataset_header(k: usize, covariate_dim: usize) -> Vec<String> {
    let mut h = vec!["regime_id".to_string()];
    h.extend((0..covariate_dim).map(|j| format!("c_{j}")));
    h.extend((0..k).map(|i| format!("x_{i}")));
    h.extend((0..k).map(|i| format!("i_{i}")));
    h.push("y".into());
    h
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_dataset_csv<W: Write>(w: W, data: &Dataset) -> Result<(), IoError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(dataset_header(data.treatments(), data.covariate_dim()))?;
    let mut row = Vec::new();
    for r in data.records() {
        row.clear();
        row.push(r.regime.to_string());
        row.extend(r.covariates.iter().chain(&r.treatments).map(|&v| fmt(v)));
        row.extend(r.intervened.iter().map(|&b| if b { "1" } else { "0" }.to_string()));
        row.push(fmt(r.outcome));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Parses a dataset CSV. Dimensions come from the header; the regime of
/// each id is read from its flags and must agree across rows. Errors name
/// `source_name` and the 1-based line.
pub fn read_dataset_csv<R: Read>(r: R, source_name: &str) -> Result<Dataset, IoError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let k = header.iter().filter(|h| h.starts_with("x_")).count();
    let d = header.iter().filter(|h| h.starts_with("c_")).count();
    if header != dataset_header(k, d) {
        return Err(IoError::Parse {
            source_name: source_name.into(),
            line: 1,
            message: format!("expected header {}", dataset_header(k, d).join(",")),
        });
    }
    let width = header.len();
    let mut regimes: BTreeMap<usize, InterventionSet> = BTreeMap::new();
    let mut records = Vec::new();
    let mut row = csv::StringRecord::new();
    loop {
        let more = rdr.read_record(&mut row).map_err(|e| IoError::Parse {
            source_name: source_name.into(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        if !more {
            break;
        }
        let line = row.position().map_or(0, |p| p.line());
        let bad = |message: String| IoError::Parse { source_name: source_name.into(), line, message };
        if row.len() != width {
            return Err(bad(format!("expected {width} fields, found {}", row.len())));
        }
        let num = |j: usize| -> Result<f64, IoError> {
            let v: f64 = row[j].trim().parse().map_err(|_| bad(format!("column {}: not a number: {:?}", header[j], &row[j])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(bad(format!("column {}: non-finite value", header[j])))
            }
        };
        let regime: usize = row[0].trim().parse().map_err(|_| bad(format!("regime_id: not an integer: {:?}", &row[0])))?;
        let covariates = (1..=d).map(num).collect::<Result<Vec<_>, _>>()?;
        let treatments = (1 + d..1 + d + k).map(num).collect::<Result<Vec<_>, _>>()?;
        let intervened = (1 + d + k..1 + d + 2 * k)
            .map(|j| match row[j].trim() {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(bad(format!("column {}: flag must be 0 or 1, found {other:?}", header[j]))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let outcome = num(width - 1)?;
        let set = InterventionSet::from_flags(&intervened);
        match regimes.get(&regime) {
            Some(s) if *s != set => return Err(bad(format!("regime {regime} has flags {set}, earlier rows had {s}"))),
            Some(_) => {}
            None => {
                regimes.insert(regime, set);
            }
        }
        records.push(Record { regime, covariates, treatments, outcome, intervened });
    }
    Ok(Dataset::new(k, d, regimes, records)?)
}

pub fn read_dataset_file(path: &Path) -> Result<Dataset, IoError> {
    read_dataset_csv(BufReader::new(File::open(path)?), &path.display().to_string())
}

pub fn write_dataset_file(path: &Path, data: &Dataset) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset_csv(&mut w, data)?;
    w.flush()?;
    Ok(())
}

/// Pools datasets read from several files, remapping regime ids so that
/// equal intervention sets share one id.
pub fn pool_files(paths: &[&Path]) -> Result<Dataset, IoError> {
    let parts = paths.iter().map(|p| read_dataset_file(p)).collect::<Result<Vec<_>, _>>()?;
    if parts.is_empty() {
        return Err(IoError::Format { source_name: "<inputs>".into(), message: "no dataset files given".into() });
    }
    Ok(Dataset::pool(&parts)?)
}
