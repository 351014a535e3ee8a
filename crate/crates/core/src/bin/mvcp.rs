//! `mvcp`: calibrate, certify and evaluate multi-variable conformal
//! prediction sets from the command line.
//!
//! Exit codes: 0 success, 1 usage or invalid arguments, 2 insufficient
//! calibration data, 3 RelMCP found no certified solution, 4 I/O, parse or
//! schema errors, 5 numerical failure.

use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::warn;

use mvcp::dataio::{
    append_reports_csv, fmt_f64, gen_residuals, load_model, read_residuals_csv, save_model,
    write_curve_csv, write_reports_csv, write_residuals, GeneratorSpec, ModelRecord,
};
use mvcp::evalharness::{
    aggregate, beta_curve, calibrate, empirical_coverage, mc_volume, run_experiment,
    Calibration, CalibrationSettings, ExperimentConfig, MethodSpec, RunReport,
};
use mvcp::model::{CalibrationDetails, Certificate};
use mvcp::relmcp::certified_miscoverage;
use mvcp::remmcp::remmcp_certificate;
use mvcp::{CalibratedModel, FamilyKind, McpError, Method, ResidualSet};

#[derive(Parser)]
#[command(name = "mvcp", version, about = "Multi-variable conformal prediction sets with coverage certificates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate a prediction set on residuals and write the model as JSON.
    Calibrate(CalibrateArgs),
    /// Print a coverage certificate for a model or for raw parameters.
    Certify(CertifyArgs),
    /// Write a membership column for query residuals.
    Predict(PredictArgs),
    /// Measure test coverage and Monte Carlo volume of a model.
    Evaluate(EvaluateArgs),
    /// Write synthetic residuals as CSV.
    Synth(SynthArgs),
    /// Run a multi-run experiment from a JSON configuration.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct DataSource {
    /// Residual CSV with a header row.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Generator: a JSON spec file, `standard-gaussian:N` or `vehicle-analog`.
    #[arg(long)]
    synth_spec: Option<String>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    method: Method,
    /// Score family for remmcp and relmcp: sphere, interval, ellipsoid, union:K or rbf:N.
    #[arg(long)]
    score: Option<FamilyKind>,
    #[arg(long)]
    eps: f64,
    /// Confidence parameter for the relmcp certificate.
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.25)]
    split_fraction: f64,
    #[arg(long, default_value_t = 3)]
    clusters: usize,
    #[command(flatten)]
    data: DataSource,
    /// Sample count when generating calibration data.
    #[arg(long, default_value_t = 2000)]
    n_cal: usize,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct CertifyArgs {
    /// Model JSON; otherwise the certificate is computed from the numeric flags.
    #[arg(long, conflicts_with_all = ["n_q", "rho", "d", "n_eval"])]
    model: Option<PathBuf>,
    #[arg(long, required_unless_present = "model")]
    n_cal: Option<usize>,
    /// Parameter count (removal certificate).
    #[arg(long, requires = "rho", conflicts_with = "d")]
    n_q: Option<usize>,
    /// Outlier budget (removal certificate).
    #[arg(long, requires = "n_q")]
    rho: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    /// Solution complexity (relaxation certificate).
    #[arg(long)]
    d: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    #[arg(long, default_value_t = 1)]
    n_eval: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Query residual CSV.
    #[arg(long)]
    input: PathBuf,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Test residual CSV.
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report CSV to append a row to.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Generator: a JSON spec file, `standard-gaussian:N` or `vehicle-analog`.
    #[arg(long)]
    synth_spec: String,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Report CSV. A JSON report and per-method Beta curves are written next to it.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    mc_samples: Option<usize>,
}

/// Failure with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<McpError> for Failure {
    fn from(e: McpError) -> Self {
        let code = match &e {
            McpError::InsufficientData(_) => 2,
            McpError::Io(_)
            | McpError::Parse { .. }
            | McpError::RaggedRows { .. }
            | McpError::SchemaMismatch(_)
            | McpError::EmptyInput(_)
            | McpError::DimensionMismatch { .. } => 4,
            McpError::InvalidConfig(_) | McpError::Domain(_) | McpError::UnsupportedDimension(_) => 1,
            McpError::Infeasible { .. }
            | McpError::NonFiniteObjective
            | McpError::NoBracket { .. }
            | McpError::SingularShape(_)
            | McpError::NonPsdCovariance
            | McpError::DegenerateTrace { .. } => 5,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        McpError::Io(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

type CmdResult = Result<(), Failure>;

fn check_unit(name: &str, v: f64) -> CmdResult {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(usage(format!("--{name} must lie in (0, 1), got {v}")))
    }
}

fn parse_generator(spec: &str) -> Result<GeneratorSpec, Failure> {
    if spec == "vehicle-analog" {
        return Ok(GeneratorSpec::vehicle_analog());
    }
    if let Some(n) = spec.strip_prefix("standard-gaussian:") {
        let n: usize = n
            .parse()
            .map_err(|_| usage(format!("bad dimension in {spec:?}")))?;
        return Ok(GeneratorSpec::standard_gaussian(n));
    }
    let text = std::fs::read_to_string(spec)?;
    serde_json::from_str(&text).map_err(|e| {
        McpError::Parse {
            line: e.line() as u64,
            message: e.to_string(),
        }
        .into()
    })
}

fn summary_line(model: &CalibratedModel) -> String {
    let cert = &model.certificate;
    let mut line = format!(
        "method={} score={} n_q={} n_cal={}",
        model.method,
        model.family.kind,
        model.q.0.len(),
        model.n_cal
    );
    match &model.details {
        CalibrationDetails::Scp { rho, .. } | CalibrationDetails::Remmcp { rho, .. } => {
            line += &format!(" rho={rho}");
        }
        CalibrationDetails::Relmcp { phi, d, .. } => {
            line += &format!(" phi={} d={d}", fmt_f64(*phi));
        }
    }
    if let Some(bound) = cert.expected_bound {
        line += &format!(" expected_bound={}", fmt_f64(bound));
    }
    if let Some(eps) = cert.eps_certified {
        line += &format!(" eps_certified={}", fmt_f64(eps));
    }
    line + &format!(" beta={}", fmt_f64(cert.beta))
}

fn cmd_calibrate(args: CalibrateArgs) -> CmdResult {
    check_unit("eps", args.eps)?;
    check_unit("beta", args.beta)?;
    if args.method.uses_score_family() && args.score.is_none() {
        return Err(usage(format!("--method {} needs --score", args.method)));
    }
    if !args.method.uses_score_family() && args.score.is_some() {
        warn!("--score is ignored by {}", args.method);
    }
    let cal = match (&args.data.input, &args.data.synth_spec) {
        (Some(path), _) => read_residuals_csv(path)?,
        (None, Some(spec)) => gen_residuals(&parse_generator(spec)?, args.n_cal, args.seed)?,
        (None, None) => unreachable!("clap requires one data source"),
    };
    if cal.is_empty() {
        return Err(McpError::InsufficientData("calibration set is empty".into()).into());
    }
    let settings = CalibrationSettings {
        spec: MethodSpec {
            method: args.method,
            score: args.score,
        },
        eps: args.eps,
        beta: args.beta,
        seed: args.seed,
        split_fraction: args.split_fraction,
        clusters: args.clusters,
    };
    match calibrate(&cal, &settings)? {
        Calibration::Model(model) => {
            save_model(&ModelRecord::from(model.as_ref()), &args.output)?;
            println!("{}", summary_line(&model));
            Ok(())
        }
        Calibration::NotCertified(reason) => Err(Failure {
            code: 3,
            message: format!("no certified solution: reason={}", reason.as_str()),
        }),
    }
}

fn print_certificate(out: &mut impl Write, cert: &Certificate) -> io::Result<()> {
    let method = serde_json::to_value(cert.method).expect("enum serializes");
    writeln!(out, "method {}", method.as_str().unwrap_or_default())?;
    writeln!(out, "eps_target {}", fmt_f64(cert.eps_target))?;
    if let Some(b) = cert.expected_bound {
        writeln!(out, "expected_bound {}", fmt_f64(b))?;
    }
    writeln!(out, "beta {}", fmt_f64(cert.beta))?;
    if let Some((a, b)) = cert.beta_dist {
        writeln!(out, "beta_dist_a {}", fmt_f64(a))?;
        writeln!(out, "beta_dist_b {}", fmt_f64(b))?;
        writeln!(out, "beta_mean {}", fmt_f64(a / (a + b)))?;
    }
    if let Some(e) = cert.eps_certified {
        writeln!(out, "eps_certified {}", fmt_f64(e))?;
    }
    writeln!(out, "assumptions_convex {}", cert.assumptions_convex)?;
    writeln!(out, "adaptive_penalty {}", cert.adaptive_penalty)
}

fn cmd_certify(args: CertifyArgs) -> CmdResult {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    if let Some(path) = &args.model {
        let record = load_model(path)?;
        print_certificate(&mut out, &record.certificate)?;
        return Ok(());
    }
    let n_cal = args.n_cal.expect("clap enforces --n-cal");
    check_unit("beta", args.beta)?;
    if let Some(d) = args.d {
        let eps = certified_miscoverage(n_cal, d, args.beta, args.n_eval)?;
        writeln!(out, "method relmcp")?;
        writeln!(out, "beta {}", fmt_f64(args.beta))?;
        writeln!(out, "eps_certified {}", fmt_f64(eps))?;
        return Ok(());
    }
    let (Some(n_q), Some(rho)) = (args.n_q, args.rho) else {
        return Err(usage("give --model, --n-q with --rho, or --d"));
    };
    let eps = args.eps.ok_or_else(|| usage("--eps is required with --n-q and --rho"))?;
    check_unit("eps", eps)?;
    print_certificate(&mut out, &remmcp_certificate(n_cal, n_q, rho, eps)?)?;
    Ok(())
}

fn load_calibrated(path: &Path) -> Result<CalibratedModel, Failure> {
    Ok(CalibratedModel::try_from(load_model(path)?)?)
}

fn check_dim(model: &CalibratedModel, set: &ResidualSet) -> CmdResult {
    if set.n_y() != model.family.n_y {
        return Err(McpError::DimensionMismatch {
            expected: model.family.n_y,
            got: set.n_y(),
        }
        .into());
    }
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> CmdResult {
    let model = load_calibrated(&args.model)?;
    let queries = read_residuals_csv(&args.input)?;
    check_dim(&model, &queries)?;
    let set = model.prediction_set();
    let sink: Box<dyn Write> = match &args.output {
        Some(path) => Box::new(BufWriter::new(std::fs::File::create(path)?)),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    let header: Vec<String> = (1..=queries.n_y()).map(|j| format!("r{j}")).chain(["member".into()]).collect();
    let csv_err = |e: csv::Error| Failure::from(McpError::Io(e.into()));
    w.write_record(&header).map_err(csv_err)?;
    for r in queries.rows() {
        let mut row: Vec<String> = r.iter().map(|v| fmt_f64(*v)).collect();
        row.push(set.contains(r).to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> CmdResult {
    let model = load_calibrated(&args.model)?;
    let test = read_residuals_csv(&args.test)?;
    check_dim(&model, &test)?;
    let set = model.prediction_set();
    let coverage = empirical_coverage(&set, &test)?;
    let empty = ResidualSet::empty(model.family.n_y)?;
    let (volume, stderr) = mc_volume(&set, &empty, args.mc_samples, args.seed)?;
    println!("coverage {}", fmt_f64(coverage));
    println!("volume {}", fmt_f64(volume));
    println!("volume_stderr {}", fmt_f64(stderr));
    if let Some(path) = &args.output {
        let method = match model.method.uses_score_family() {
            true => format!("{}/{}", model.method, model.family.kind),
            false => model.method.to_string(),
        };
        let report = RunReport {
            run_id: 0,
            method,
            seed: model.seed,
            n_cal: model.n_cal,
            eps: model.eps,
            coverage: Some(coverage),
            volume: Some(volume),
            volume_stderr: Some(stderr),
            calibration_time_ms: 0.0,
            certificate: Some(model.certificate.clone()),
            failure: None,
        };
        append_reports_csv(&[report], path)?;
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> CmdResult {
    let set = gen_residuals(&parse_generator(&args.synth_spec)?, args.n, args.seed)?;
    match &args.output {
        Some(path) => write_residuals(&set, BufWriter::new(std::fs::File::create(path)?))?,
        None => write_residuals(&set, io::stdout().lock())?,
    }
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "report".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}{suffix}"))
}

fn cmd_experiment(args: ExperimentArgs) -> CmdResult {
    let text = std::fs::read_to_string(&args.config)?;
    let mut config: ExperimentConfig = serde_json::from_str(&text).map_err(|e| {
        Failure::from(McpError::Parse {
            line: e.line() as u64,
            message: e.to_string(),
        })
    })?;
    if let Some(w) = args.workers {
        config.workers = Some(w);
    }
    if let Some(m) = args.mc_samples {
        config.mc_samples = m;
    }
    if let Some(input) = config.input.take() {
        // Relative input paths resolve against the config file's directory.
        let base = args.config.parent().unwrap_or(Path::new("."));
        config.input = Some(base.join(input));
    }
    let reports = run_experiment(&config)?;
    write_reports_csv(&reports, &args.output)?;
    let mut json = serde_json::to_string_pretty(&reports).expect("reports serialize");
    json.push('\n');
    std::fs::write(sibling(&args.output, ".json"), json)?;

    for spec in &config.methods {
        let label = spec.label();
        let dist = reports
            .iter()
            .filter(|r| r.method == label)
            .find_map(|r| r.certificate.as_ref().and_then(|c| c.beta_dist));
        if let Some((a, b)) = dist {
            let name = label.replace(['/', ':'], "-");
            write_curve_csv(&beta_curve(a, b, config.curve_points)?, sibling(&args.output, &format!(".beta-{name}.csv")))?;
        }
    }
    let failures = reports.iter().filter(|r| r.failure.is_some()).count();
    if failures > 0 {
        warn!("{failures} of {} runs failed; see the JSON report", reports.len());
    }
    let summary = serde_json::to_string_pretty(&aggregate(&reports)?).expect("summary serializes");
    println!("{summary}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Certify(a) => cmd_certify(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Experiment(a) => cmd_experiment(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("mvcp: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

