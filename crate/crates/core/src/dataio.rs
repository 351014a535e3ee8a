//! Synthetic residual generators, CSV ingestion and model persistence.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{McpError, Result};
use crate::evalharness::RunReport;
use crate::model::{CalibratedModel, CalibrationDetails, Certificate, Method};
use crate::residuals::ResidualSet;
use crate::rng::SeededRng;
use crate::scores::{ParamVector, ScoreFamily};

/// Version written by [`save_model`] and the only one [`load_model`] accepts.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariance {
    Diagonal(Vec<f64>),
    /// Row-major square matrix.
    Full(Vec<Vec<f64>>),
}

impl Covariance {
    pub fn dim(&self) -> usize {
        match self {
            Covariance::Diagonal(d) => d.len(),
            Covariance::Full(m) => m.len(),
        }
    }

    fn dense(&self) -> Result<Vec<f64>> {
        let n = self.dim();
        match self {
            Covariance::Diagonal(d) => {
                let mut a = vec![0.0; n * n];
                for (i, v) in d.iter().enumerate() {
                    a[i * n + i] = *v;
                }
                Ok(a)
            }
            Covariance::Full(m) => {
                let mut a = Vec::with_capacity(n * n);
                for row in m {
                    if row.len() != n {
                        return Err(McpError::DimensionMismatch {
                            expected: n,
                            got: row.len(),
                        });
                    }
                    a.extend_from_slice(row);
                }
                Ok(a)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub mean: Vec<f64>,
    pub covariance: Covariance,
}

/// Distribution of synthetic residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    Gaussian {
        mean: Vec<f64>,
        covariance: Covariance,
    },
    Mixture {
        weights: Vec<f64>,
        components: Vec<Component>,
    },
}

impl GeneratorSpec {
    /// Zero-mean Gaussian with the given variances.
    pub fn gaussian_diag(variances: &[f64]) -> Self {
        GeneratorSpec::Gaussian {
            mean: vec![0.0; variances.len()],
            covariance: Covariance::Diagonal(variances.to_vec()),
        }
    }

    pub fn standard_gaussian(n_y: usize) -> Self {
        Self::gaussian_diag(&vec![1.0; n_y])
    }

    /// Tri-modal 2-D mixture standing in for residuals of a vehicle
    /// trajectory predictor.
    pub fn vehicle_analog() -> Self {
        let full = |a: f64, b: f64, c: f64| Covariance::Full(vec![vec![a, b], vec![b, c]]);
        GeneratorSpec::Mixture {
            weights: vec![0.5, 0.3, 0.2],
            components: vec![
                Component {
                    mean: vec![0.0, 0.0],
                    covariance: full(0.5, 0.15, 0.12),
                },
                Component {
                    mean: vec![3.0, 1.0],
                    covariance: full(0.1, -0.05, 0.3),
                },
                Component {
                    mean: vec![-2.0, 2.5],
                    covariance: full(0.25, 0.1, 0.1),
                },
            ],
        }
    }

    pub fn n_y(&self) -> usize {
        match self {
            GeneratorSpec::Gaussian { mean, .. } => mean.len(),
            GeneratorSpec::Mixture { components, .. } => components.first().map_or(0, |c| c.mean.len()),
        }
    }

    fn components(&self) -> Vec<(f64, &[f64], &Covariance)> {
        match self {
            GeneratorSpec::Gaussian { mean, covariance } => vec![(1.0, mean.as_slice(), covariance)],
            GeneratorSpec::Mixture { weights, components } => weights
                .iter()
                .zip(components)
                .map(|(w, c)| (*w, c.mean.as_slice(), &c.covariance))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n_y = self.n_y();
        if n_y == 0 {
            return Err(McpError::UnsupportedDimension(
                "generator dimension must be at least 1".into(),
            ));
        }
        if let GeneratorSpec::Mixture { weights, components } = self {
            if weights.len() != components.len() || weights.is_empty() {
                return Err(McpError::InvalidConfig(format!(
                    "{} weights for {} components",
                    weights.len(),
                    components.len()
                )));
            }
            let total: f64 = weights.iter().sum();
            if weights.iter().any(|w| !(*w > 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(McpError::InvalidConfig(
                    "mixture weights must be positive and sum to 1".into(),
                ));
            }
        }
        for (_, mean, cov) in self.components() {
            if mean.len() != n_y || cov.dim() != n_y {
                return Err(McpError::DimensionMismatch {
                    expected: n_y,
                    got: if mean.len() != n_y { mean.len() } else { cov.dim() },
                });
            }
            psd_factor(&cov.dense()?, n_y)?;
        }
        Ok(())
    }
}

/// Lower factor `L` with `L Lᵀ = a` for symmetric positive semidefinite `a`.
/// Columns with a vanishing pivot are zeroed.
fn psd_factor(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max).max(1.0);
    let tol = 1e-12 * scale;
    for i in 0..n {
        for j in 0..i {
            if (a[i * n + j] - a[j * n + i]).abs() > tol {
                return Err(McpError::NonPsdCovariance);
            }
        }
        if !a[i * n..(i + 1) * n].iter().all(|v| v.is_finite()) {
            return Err(McpError::NonPsdCovariance);
        }
    }
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let pivot = a[j * n + j] - (0..j).map(|k| l[j * n + k] * l[j * n + k]).sum::<f64>();
        if pivot < -tol {
            return Err(McpError::NonPsdCovariance);
        }
        if pivot <= tol {
            for i in j + 1..n {
                let rest = a[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
                if rest.abs() > 1e-6 * scale.sqrt() {
                    return Err(McpError::NonPsdCovariance);
                }
            }
            continue;
        }
        let d = pivot.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let rest = a[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            l[i * n + j] = rest / d;
        }
    }
    Ok(l)
}

/// Draws `n` i.i.d. residuals.
pub fn gen_residuals(spec: &GeneratorSpec, n: usize, seed: u64) -> Result<ResidualSet> {
    spec.validate()?;
    let n_y = spec.n_y();
    let parts: Vec<(f64, &[f64], Vec<f64>)> = spec
        .components()
        .into_iter()
        .map(|(w, mean, cov)| Ok((w, mean, psd_factor(&cov.dense()?, n_y)?)))
        .collect::<Result<_>>()?;
    let mut rng = SeededRng::new(seed);
    let mut data = Vec::with_capacity(n * n_y);
    let mut z = vec![0.0; n_y];
    for _ in 0..n {
        let mut pick = 0;
        if parts.len() > 1 {
            let u = rng.uniform();
            let mut acc = 0.0;
            pick = parts.len() - 1;
            for (k, (w, _, _)) in parts.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = k;
                    break;
                }
            }
        }
        let (_, mean, l) = &parts[pick];
        z.iter_mut().for_each(|v| *v = rng.normal());
        for i in 0..n_y {
            data.push(mean[i] + (0..=i).map(|k| l[i * n_y + k] * z[k]).sum::<f64>());
        }
    }
    ResidualSet::new(n_y, data)
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn csv_error(e: csv::Error) -> McpError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => McpError::Io(io),
        kind => McpError::Parse {
            line,
            message: format!("{kind:?}"),
        },
    }
}

/// Reads residuals from CSV with a header row naming one column per dimension.
pub fn read_residuals<R: Read>(reader: R) -> Result<ResidualSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let n_y = rdr.headers().map_err(csv_error)?.len();
    if n_y == 0 || rdr.headers().map_err(csv_error)?.iter().all(str::is_empty) {
        return Err(McpError::Parse {
            line: 1,
            message: "missing header row".into(),
        });
    }
    let mut data = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != n_y {
            return Err(McpError::RaggedRows {
                line,
                found: record.len(),
                expected: n_y,
            });
        }
        for field in record.iter() {
            let v = field.parse::<f64>().map_err(|_| McpError::Parse {
                line,
                message: format!("not a number: {field:?}"),
            })?;
            data.push(v);
        }
    }
    ResidualSet::new(n_y, data)
}

pub fn write_residuals<W: Write>(set: &ResidualSet, writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(writer);
    w.write_record((1..=set.n_y()).map(|j| format!("r{j}")))
        .map_err(csv_error)?;
    for row in set.rows() {
        w.write_record(row.iter().map(|v| fmt_f64(*v))).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_residuals_csv(path: impl AsRef<Path>) -> Result<ResidualSet> {
    read_residuals(BufReader::new(File::open(path)?))
}

pub fn write_residuals_csv(set: &ResidualSet, path: impl AsRef<Path>) -> Result<()> {
    write_residuals(set, BufWriter::new(File::create(path)?))
}

pub const REPORT_COLUMNS: [&str; 9] = [
    "run_id",
    "method",
    "seed",
    "n_cal",
    "eps",
    "coverage",
    "volume",
    "volume_stderr",
    "time_ms",
];

/// Writes one row per report. Failed runs leave the measured columns empty.
pub fn write_reports<W: Write>(reports: &[RunReport], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(writer);
    w.write_record(REPORT_COLUMNS).map_err(csv_error)?;
    for r in reports {
        w.write_record(report_row(r)).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Appends report rows, writing the header only if the file is new or empty.
pub fn append_reports_csv(reports: &[RunReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().from_writer(BufWriter::new(file));
    if fresh {
        w.write_record(REPORT_COLUMNS).map_err(csv_error)?;
    }
    for r in reports {
        w.write_record(report_row(r)).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn report_row(r: &RunReport) -> Vec<String> {
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    vec![
        r.run_id.to_string(),
        r.method.clone(),
        r.seed.to_string(),
        r.n_cal.to_string(),
        fmt_f64(r.eps),
        opt(r.coverage),
        opt(r.volume),
        opt(r.volume_stderr),
        fmt_f64(r.calibration_time_ms),
    ]
}

pub fn write_reports_csv(reports: &[RunReport], path: impl AsRef<Path>) -> Result<()> {
    write_reports(reports, BufWriter::new(File::create(path)?))
}

/// Two-column `coverage,density` table.
pub fn write_curve_csv(points: &[(f64, f64)], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["coverage", "density"]).map_err(csv_error)?;
    for (x, y) in points {
        w.write_record([fmt_f64(*x), fmt_f64(*y)]).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Persisted form of a [`CalibratedModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRecord {
    pub schema_version: u32,
    pub family: ScoreFamily,
    pub q: Vec<f64>,
    pub method: Method,
    pub n_cal: usize,
    pub eps: f64,
    pub seed: u64,
    pub calibration: CalibrationDetails,
    pub certificate: Certificate,
}

impl From<&CalibratedModel> for ModelRecord {
    fn from(m: &CalibratedModel) -> Self {
        ModelRecord {
            schema_version: SCHEMA_VERSION,
            family: m.family,
            q: m.q.0.clone(),
            method: m.method,
            n_cal: m.n_cal,
            eps: m.eps,
            seed: m.seed,
            calibration: m.details.clone(),
            certificate: m.certificate.clone(),
        }
    }
}

impl TryFrom<ModelRecord> for CalibratedModel {
    type Error = McpError;

    fn try_from(r: ModelRecord) -> Result<Self> {
        Ok(CalibratedModel {
            q: ParamVector::new(&r.family, r.q)?,
            family: r.family,
            method: r.method,
            n_cal: r.n_cal,
            eps: r.eps,
            seed: r.seed,
            details: r.calibration,
            certificate: r.certificate,
        })
    }
}

fn json_error(e: serde_json::Error) -> McpError {
    if e.is_io() {
        return McpError::Io(e.into());
    }
    McpError::Parse {
        line: e.line() as u64,
        message: e.to_string(),
    }
}

pub fn model_to_json(record: &ModelRecord) -> Result<String> {
    let mut s = serde_json::to_string_pretty(record).map_err(json_error)?;
    s.push('\n');
    Ok(s)
}

pub fn model_from_json(text: &str) -> Result<ModelRecord> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(json_error)?;
    let version = value
        .get("schema_version")
        .ok_or_else(|| McpError::SchemaMismatch("model record has no schema_version".into()))?;
    if version.as_u64() != Some(SCHEMA_VERSION as u64) {
        return Err(McpError::SchemaMismatch(format!(
            "model record has schema_version {version}, this build reads version {SCHEMA_VERSION}"
        )));
    }
    serde_json::from_value(value).map_err(|e| McpError::SchemaMismatch(e.to_string()))
}

pub fn save_model(record: &ModelRecord, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, model_to_json(record)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelRecord> {
    model_from_json(&std::fs::read_to_string(path)?)
}
