//! Coverage and volume measurement, seeded multi-run experiments and summary
//! statistics.

use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{gen_residuals, read_residuals_csv, GeneratorSpec};
use crate::error::{McpError, Result};
use crate::model::{CalibratedModel, Certificate, Method};
use crate::numerics::special::ln_beta;
use crate::relmcp::{relmcp_calibrate, relmcp_model, NoCertificate, RelmcpConfig, RelmcpOutcome};
use crate::remmcp::remmcp_calibrate;
use crate::residuals::ResidualSet;
use crate::rng::SeededRng;
use crate::scores::{make_family, FamilyKind, PredictionSet};
use crate::scp::calibrate_scp;

const MC_STREAM: u64 = 1;
const POOL_STREAM: u64 = 2;

/// Fraction of `test` inside `set`.
pub fn empirical_coverage(set: &PredictionSet, test: &ResidualSet) -> Result<f64> {
    if test.is_empty() {
        return Err(McpError::EmptyInput("test set is empty".into()));
    }
    if test.n_y() != set.family.n_y {
        return Err(McpError::DimensionMismatch {
            expected: set.family.n_y,
            got: test.n_y(),
        });
    }
    let hits = test.rows().filter(|r| set.contains(r)).count();
    Ok(hits as f64 / test.len() as f64)
}

/// Hit-or-miss volume estimate inside the set's bounding box, with its
/// standard error.
pub fn mc_volume(set: &PredictionSet, cal: &ResidualSet, n_samples: usize, seed: u64) -> Result<(f64, f64)> {
    if n_samples == 0 {
        return Err(McpError::Domain("need at least one Monte Carlo sample".into()));
    }
    let bbox = set.bounding_box(cal)?;
    let box_volume = bbox.volume();
    if !box_volume.is_finite() {
        return Err(McpError::SingularShape(format!(
            "bounding box volume is {box_volume}"
        )));
    }
    if box_volume == 0.0 {
        return Ok((0.0, 0.0));
    }
    let mut rng = SeededRng::derive(seed, MC_STREAM);
    let mut point = vec![0.0; set.family.n_y];
    let mut hits = 0usize;
    for _ in 0..n_samples {
        for (x, (lo, hi)) in point.iter_mut().zip(bbox.lo.iter().zip(&bbox.hi)) {
            *x = rng.uniform_range(*lo, *hi);
        }
        if set.contains(&point) {
            hits += 1;
        }
    }
    let p = hits as f64 / n_samples as f64;
    Ok((box_volume * p, box_volume * (p * (1.0 - p) / n_samples as f64).sqrt()))
}

/// One method under test; `score` selects the family for RemMCP and RelMCP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub method: Method,
    #[serde(default)]
    pub score: Option<FamilyKind>,
}

impl MethodSpec {
    pub fn label(&self) -> String {
        match (self.method.uses_score_family(), self.score) {
            (true, Some(kind)) => format!("{}/{}", self.method, kind),
            _ => self.method.to_string(),
        }
    }
}

/// Inputs shared by every calibration method.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSettings {
    pub spec: MethodSpec,
    pub eps: f64,
    pub beta: f64,
    pub seed: u64,
    pub split_fraction: f64,
    pub clusters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Calibration {
    Model(Box<CalibratedModel>),
    NotCertified(NoCertificate),
}

/// Dispatches to the calibration routine for `settings.spec.method`.
pub fn calibrate(cal: &ResidualSet, settings: &CalibrationSettings) -> Result<Calibration> {
    let method = settings.spec.method;
    if !method.uses_score_family() {
        return calibrate_scp(
            method,
            cal,
            settings.eps,
            settings.split_fraction,
            settings.clusters,
            settings.seed,
        )
        .map(|m| Calibration::Model(Box::new(m)));
    }
    let kind = settings.spec.score.ok_or_else(|| {
        McpError::InvalidConfig(format!("method {method} needs a score family"))
    })?;
    let family = make_family(kind, cal.n_y())?;
    match method {
        Method::Remmcp => {
            let (model, _, _) = remmcp_calibrate(&family, cal, settings.eps, settings.seed)?;
            Ok(Calibration::Model(Box::new(model)))
        }
        _ => {
            let config = RelmcpConfig::for_family(&family, settings.eps, settings.beta, settings.seed);
            match relmcp_calibrate(&family, cal, &config)? {
                RelmcpOutcome::Certified(result) => Ok(Calibration::Model(Box::new(relmcp_model(
                    &family, cal, &config, &result,
                )))),
                RelmcpOutcome::NotCertified { reason, .. } => Ok(Calibration::NotCertified(reason)),
            }
        }
    }
}

fn default_beta() -> f64 {
    0.1
}
fn default_mc_samples() -> usize {
    100_000
}
fn default_split_fraction() -> f64 {
    0.25
}
fn default_clusters() -> usize {
    3
}
fn default_curve_points() -> usize {
    400
}

/// Multi-run experiment. Exactly one of `generator` and `input` is set; with
/// `input`, each run draws its calibration and test sets from a shuffle of
/// the file's rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub methods: Vec<MethodSpec>,
    #[serde(default)]
    pub generator: Option<GeneratorSpec>,
    #[serde(default)]
    pub input: Option<PathBuf>,
    pub n_runs: usize,
    pub n_cal: usize,
    pub n_test: usize,
    pub eps: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    pub base_seed: u64,
    #[serde(default = "default_split_fraction")]
    pub split_fraction: f64,
    #[serde(default = "default_clusters")]
    pub clusters: usize,
    /// Thread count; all cores when absent.
    #[serde(default)]
    pub workers: Option<usize>,
    /// Measure calibration wall time. Off by default so reports are
    /// reproducible byte for byte.
    #[serde(default)]
    pub record_timing: bool,
    #[serde(default = "default_curve_points")]
    pub curve_points: usize,
}

impl ExperimentConfig {
    pub fn new(methods: Vec<MethodSpec>, generator: GeneratorSpec, n_runs: usize, n_cal: usize, n_test: usize, eps: f64, base_seed: u64) -> Self {
        Self {
            methods,
            generator: Some(generator),
            input: None,
            n_runs,
            n_cal,
            n_test,
            eps,
            beta: default_beta(),
            mc_samples: default_mc_samples(),
            base_seed,
            split_fraction: default_split_fraction(),
            clusters: default_clusters(),
            workers: None,
            record_timing: false,
            curve_points: default_curve_points(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(McpError::InvalidConfig(m.into()));
        if self.methods.is_empty() {
            return bad("no methods listed");
        }
        if self.generator.is_some() == self.input.is_some() {
            return bad("set exactly one of generator and input");
        }
        if self.n_runs == 0 || self.mc_samples == 0 || self.n_test == 0 || self.n_cal == 0 {
            return bad("n_runs, n_cal, n_test and mc_samples must be positive");
        }
        if !(self.eps > 0.0 && self.eps < 1.0) || !(self.beta > 0.0 && self.beta < 1.0) {
            return bad("eps and beta must lie in (0, 1)");
        }
        if self.workers == Some(0) {
            return bad("workers must be positive");
        }
        for spec in &self.methods {
            if spec.method.uses_score_family() && spec.score.is_none() {
                return Err(McpError::InvalidConfig(format!(
                    "method {} needs a score family",
                    spec.method
                )));
            }
        }
        if let Some(g) = &self.generator {
            g.validate()?;
        }
        Ok(())
    }
}

/// Outcome of one method on one run. Failed runs carry `failure` and no
/// measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: usize,
    pub method: String,
    pub seed: u64,
    pub n_cal: usize,
    pub eps: f64,
    pub coverage: Option<f64>,
    pub volume: Option<f64>,
    pub volume_stderr: Option<f64>,
    pub calibration_time_ms: f64,
    pub certificate: Option<Certificate>,
    pub failure: Option<String>,
}

fn run_seed(base_seed: u64, run: usize) -> u64 {
    base_seed ^ run as u64
}

fn draw_data(config: &ExperimentConfig, pool: Option<&ResidualSet>, seed: u64) -> Result<(ResidualSet, ResidualSet)> {
    let n = config.n_cal + config.n_test;
    let all = match pool {
        Some(pool) => {
            let mut order: Vec<usize> = (0..pool.len()).collect();
            SeededRng::derive(seed, POOL_STREAM).shuffle(&mut order);
            pool.select(&order[..n])
        }
        None => gen_residuals(config.generator.as_ref().expect("validated"), n, seed)?,
    };
    let idx: Vec<usize> = (0..n).collect();
    Ok((all.select(&idx[..config.n_cal]), all.select(&idx[config.n_cal..])))
}

fn run_method(config: &ExperimentConfig, spec: MethodSpec, run: usize, seed: u64, cal: &ResidualSet, test: &ResidualSet) -> RunReport {
    let mut report = RunReport {
        run_id: run,
        method: spec.label(),
        seed,
        n_cal: cal.len(),
        eps: config.eps,
        coverage: None,
        volume: None,
        volume_stderr: None,
        calibration_time_ms: 0.0,
        certificate: None,
        failure: None,
    };
    let settings = CalibrationSettings {
        spec,
        eps: config.eps,
        beta: config.beta,
        seed,
        split_fraction: config.split_fraction,
        clusters: config.clusters,
    };
    let start = Instant::now();
    let outcome = calibrate(cal, &settings);
    if config.record_timing {
        report.calibration_time_ms = start.elapsed().as_secs_f64() * 1e3;
    }
    let model = match outcome {
        Ok(Calibration::Model(m)) => m,
        Ok(Calibration::NotCertified(reason)) => {
            report.failure = Some(format!("not certified: {}", reason.as_str()));
            return report;
        }
        Err(e) => {
            report.failure = Some(e.to_string());
            return report;
        }
    };
    let set = model.prediction_set();
    let measured = empirical_coverage(&set, test)
        .and_then(|c| Ok((c, mc_volume(&set, cal, config.mc_samples, seed)?)));
    match measured {
        Ok((coverage, (volume, stderr))) => {
            report.coverage = Some(coverage);
            report.volume = Some(volume);
            report.volume_stderr = Some(stderr);
        }
        Err(e) => report.failure = Some(e.to_string()),
    }
    report.certificate = Some(model.certificate.clone());
    report
}

/// Runs every method on every run, ordered by run then method. Runs share
/// data across methods and use seed `base_seed ^ run`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunReport>> {
    config.validate()?;
    let pool = match &config.input {
        Some(path) => {
            let pool = read_residuals_csv(path)?;
            if pool.len() < config.n_cal + config.n_test {
                return Err(McpError::InsufficientData(format!(
                    "{} rows in {}, need n_cal + n_test = {}",
                    pool.len(),
                    path.display(),
                    config.n_cal + config.n_test
                )));
            }
            Some(pool)
        }
        None => None,
    };
    let work = || -> Result<Vec<RunReport>> {
        let runs: Vec<Result<Vec<RunReport>>> = (0..config.n_runs)
            .into_par_iter()
            .map(|run| {
                let seed = run_seed(config.base_seed, run);
                let (cal, test) = draw_data(config, pool.as_ref(), seed)?;
                Ok(config
                    .methods
                    .iter()
                    .map(|spec| run_method(config, *spec, run, seed, &cal, &test))
                    .collect())
            })
            .collect();
        Ok(runs.into_iter().collect::<Result<Vec<_>>>()?.concat())
    };
    match config.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| McpError::InvalidConfig(e.to_string()))?
            .install(work),
        None => work(),
    }
}

/// Beta(a, b) density on an even grid over `mean ± 8 sd` clipped to [0, 1],
/// rescaled so its trapezoid integral is 1.
pub fn beta_curve(a: f64, b: f64, n_points: usize) -> Result<Vec<(f64, f64)>> {
    if !(a > 0.0 && b > 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(McpError::Domain(format!("Beta parameters must be positive, got ({a}, {b})")));
    }
    if n_points < 2 {
        return Err(McpError::Domain("need at least two grid points".into()));
    }
    let mean = a / (a + b);
    let sd = (a * b / ((a + b).powi(2) * (a + b + 1.0))).sqrt();
    let lo = (mean - 8.0 * sd).max(0.0);
    let hi = (mean + 8.0 * sd).min(1.0);
    let norm = ln_beta(a, b);
    let log_term = |p: f64, x: f64| if p == 1.0 { 0.0 } else { (p - 1.0) * x.ln() };
    let step = (hi - lo) / (n_points - 1) as f64;
    let mut curve: Vec<(f64, f64)> = (0..n_points)
        .map(|i| {
            let x = if i == n_points - 1 { hi } else { lo + step * i as f64 };
            let ln_pdf = log_term(a, x) + log_term(b, 1.0 - x) - norm;
            (x, ln_pdf.exp().min(f64::MAX))
        })
        .collect();
    let area: f64 = curve.windows(2).map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0)).sum();
    if area > 0.0 && area.is_finite() {
        curve.iter_mut().for_each(|p| p.1 /= area);
    }
    Ok(curve)
}

/// Box-plot statistics. Whiskers reach the most extreme observations within
/// 1.5 IQR of the quartiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single observation.
    pub std: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
}

/// Linearly interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let i = h.floor() as usize;
    let frac = h - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

impl Stats {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(McpError::EmptyInput("no values to summarise".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let mean = sorted.iter().sum::<f64>() / n;
        let std = if sorted.len() > 1 {
            (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let q1 = quantile(&sorted, 0.25);
        let q3 = quantile(&sorted, 0.75);
        let iqr = q3 - q1;
        let whisker_lo = *sorted.iter().find(|&&v| v >= q1 - 1.5 * iqr).expect("non-empty");
        let whisker_hi = *sorted.iter().rev().find(|&&v| v <= q3 + 1.5 * iqr).expect("non-empty");
        Ok(Stats {
            mean,
            std,
            median: quantile(&sorted, 0.5),
            q1,
            q3,
            whisker_lo,
            whisker_hi,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub runs: usize,
    pub failures: usize,
    pub coverage: Option<Stats>,
    pub volume: Option<Stats>,
}

/// Per-method statistics, sorted by method label.
pub fn aggregate(reports: &[RunReport]) -> Result<Vec<MethodSummary>> {
    if reports.is_empty() {
        return Err(McpError::EmptyInput("no reports".into()));
    }
    let mut labels: Vec<&str> = reports.iter().map(|r| r.method.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    labels
        .into_iter()
        .map(|label| {
            let mine: Vec<&RunReport> = reports.iter().filter(|r| r.method == label).collect();
            let coverage: Vec<f64> = mine.iter().filter_map(|r| r.coverage).collect();
            let volume: Vec<f64> = mine.iter().filter_map(|r| r.volume).collect();
            Ok(MethodSummary {
                method: label.to_string(),
                runs: mine.len(),
                failures: mine.iter().filter(|r| r.failure.is_some()).count(),
                coverage: (!coverage.is_empty()).then(|| Stats::from_values(&coverage)).transpose()?,
                volume: (!volume.is_empty()).then(|| Stats::from_values(&volume)).transpose()?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(radius: f64) -> PredictionSet {
        PredictionSet::new(make_family(FamilyKind::Sphere, 2).unwrap(), vec![radius]).unwrap()
    }

    #[test]
    fn coverage_of_unit_disk_under_gaussian() {
        let test = gen_residuals(&GeneratorSpec::standard_gaussian(2), 10_000, 5).unwrap();
        let c = empirical_coverage(&disk(1.0), &test).unwrap();
        assert!((c - (1.0 - (-0.5f64).exp())).abs() < 0.02, "{c}");
        assert_eq!(empirical_coverage(&disk(1e6), &test).unwrap(), 1.0);
        let point = PredictionSet::new(make_family(FamilyKind::Interval, 2).unwrap(), vec![0.0, 0.0]).unwrap();
        assert_eq!(empirical_coverage(&point, &test).unwrap(), 0.0);
        assert!(empirical_coverage(&disk(1.0), &ResidualSet::empty(2).unwrap()).is_err());
    }

    #[test]
    fn volume_of_simple_shapes() {
        let cal = ResidualSet::empty(2).unwrap();
        let (v, se) = mc_volume(&disk(1.0), &cal, 100_000, 0).unwrap();
        assert!((v - std::f64::consts::PI).abs() < 0.05 && se > 0.0);
        let boxed = PredictionSet::new(make_family(FamilyKind::Interval, 2).unwrap(), vec![1.0, 2.0]).unwrap();
        assert_eq!(mc_volume(&boxed, &cal, 1000, 0).unwrap(), (8.0, 0.0));
        let union = make_family(FamilyKind::UnionEllipsoid { components: 2 }, 2).unwrap();
        let two = PredictionSet::new(union, vec![-3.0, 0.0, 1.0, 0.0, 1.0, 3.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let (v, _) = mc_volume(&two, &cal, 100_000, 1).unwrap();
        assert!((v - 2.0 * std::f64::consts::PI).abs() < 0.1, "{v}");
    }

    #[test]
    fn flat_and_peaked_beta_curves() {
        let flat = beta_curve(1.0, 1.0, 11).unwrap();
        assert!(flat.iter().all(|p| (p.1 - 1.0).abs() < 1e-12));
        let peaked = beta_curve(1901.0, 100.0, 2001).unwrap();
        let mode = peaked.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
        assert!((mode - 1900.0 / 1999.0).abs() < 2e-4, "{mode}");
        let area: f64 = peaked.windows(2).map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0)).sum();
        assert!((area - 1.0).abs() < 1e-3);
        assert!(beta_curve(0.0, 1.0, 10).is_err());
    }

    fn report(method: &str, coverage: f64) -> RunReport {
        RunReport {
            run_id: 0,
            method: method.into(),
            seed: 0,
            n_cal: 1,
            eps: 0.1,
            coverage: Some(coverage),
            volume: Some(1.0),
            volume_stderr: Some(0.0),
            calibration_time_ms: 0.0,
            certificate: None,
            failure: None,
        }
    }

    #[test]
    fn summary_statistics() {
        let one = aggregate(&[report("a", 0.7)]).unwrap();
        let c = one[0].coverage.as_ref().unwrap();
        assert_eq!((c.mean, c.median, c.std), (0.7, 0.7, 0.0));
        let three = [report("a", 0.9), report("a", 1.0), report("a", 0.95)];
        let c = aggregate(&three).unwrap()[0].coverage.clone().unwrap();
        assert!((c.mean - 0.95).abs() < 1e-12 && (c.median - 0.95).abs() < 1e-12);
        let mut reversed = three.to_vec();
        reversed.reverse();
        assert_eq!(aggregate(&reversed).unwrap(), aggregate(&three).unwrap());
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn whiskers_exclude_outliers() {
        let s = Stats::from_values(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!((s.q1, s.q3, s.whisker_lo, s.whisker_hi), (2.0, 4.0, 1.0, 4.0));
    }
}
