use std::path::Path;
use std::process::{Command, Output};

fn mvcp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvcp"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn synth(dir: &Path, n: &str, file: &str) {
    let out = mvcp(dir, &["synth", "--synth-spec", "standard-gaussian:2", "--n", n, "--seed", "1", "--output", file]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "30", "small.csv");
    let base = ["calibrate", "--input", "small.csv", "--score", "sphere", "--output", "m.json"];

    let usage = mvcp(d, &["calibrate", "--input", "small.csv", "--method", "remmcp"]);
    assert_eq!(code(&usage), 1);
    let bad_eps = mvcp(d, &[&base[..], &["--method", "remmcp", "--eps", "1.5"]].concat());
    assert_eq!(code(&bad_eps), 1);

    let few = mvcp(d, &[&base[..], &["--method", "remmcp", "--eps", "0.01"]].concat());
    assert_eq!(code(&few), 2);
    assert!(String::from_utf8_lossy(&few.stderr).contains("99 samples"));

    let uncertified = mvcp(d, &[&base[..], &["--method", "relmcp", "--eps", "0.01", "--beta", "0.01"]].concat());
    assert_eq!(code(&uncertified), 3);
    assert!(String::from_utf8_lossy(&uncertified.stderr).contains("reason=target_unreachable"));
    assert!(!d.join("m.json").exists());

    let missing = mvcp(d, &["calibrate", "--input", "absent.csv", "--method", "scp1", "--eps", "0.1", "--output", "m.json"]);
    assert_eq!(code(&missing), 4);

    std::fs::write(d.join("ragged.csv"), "r1,r2\n1,2\n3\n").unwrap();
    let ragged = mvcp(d, &["calibrate", "--input", "ragged.csv", "--method", "scp1", "--eps", "0.1", "--output", "m.json"]);
    assert_eq!(code(&ragged), 4);
    assert!(String::from_utf8_lossy(&ragged.stderr).contains("line 3"));
}

#[test]
fn certify_from_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = mvcp(dir.path(), &["certify", "--n-cal", "2000", "--n-q", "1", "--rho", "98", "--eps", "0.05"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("expected_bound 0.0494752623688"), "{text}");
    assert!(text.contains("beta_dist_a 1902.0") && text.contains("beta_dist_b 99.0"));

    let out = mvcp(dir.path(), &["certify", "--n-cal", "500", "--d", "20", "--beta", "0.1", "--n-eval", "3"]);
    assert_eq!(code(&out), 0);
    let line = stdout(&out).lines().find(|l| l.starts_with("eps_certified")).unwrap().to_string();
    let eps: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    let want = mvcp::relmcp::certified_miscoverage(500, 20, 0.1, 3).unwrap();
    assert_eq!(eps, want);
}

#[test]
fn kept_calibration_points_are_predicted_members() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "400", "cal.csv");
    let out = mvcp(d, &["calibrate", "--input", "cal.csv", "--method", "remmcp", "--score", "interval", "--eps", "0.1", "--output", "m.json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = mvcp(d, &["predict", "--model", "m.json", "--input", "cal.csv", "--output", "pred.csv"]);
    assert_eq!(code(&out), 0);

    let record = mvcp::dataio::load_model(&d.join("m.json")).unwrap();
    let mvcp::model::CalibrationDetails::Remmcp { removed, .. } = &record.calibration else {
        panic!("expected removal details");
    };
    let pred = std::fs::read_to_string(d.join("pred.csv")).unwrap();
    let mut lines = pred.lines();
    assert_eq!(lines.next(), Some("r1,r2,member"));
    let members: Vec<bool> = lines.map(|l| l.rsplit(',').next().unwrap() == "true").collect();
    assert_eq!(members.len(), 400);
    for (m, member) in members.iter().enumerate() {
        if !removed.contains(&m) {
            assert!(member, "kept sample {m} predicted outside");
        }
    }
    assert!(members.iter().filter(|m| !**m).count() <= removed.len());
}

#[test]
fn evaluate_reports_coverage_and_volume() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "400", "cal.csv");
    let out = mvcp(d, &["synth", "--synth-spec", "standard-gaussian:2", "--n", "2000", "--seed", "2", "--output", "test.csv"]);
    assert_eq!(code(&out), 0);
    mvcp(d, &["calibrate", "--input", "cal.csv", "--method", "remmcp", "--score", "sphere", "--eps", "0.1", "--output", "m.json"]);
    let args = ["evaluate", "--model", "m.json", "--test", "test.csv", "--mc-samples", "20000", "--seed", "3", "--output", "r.csv"];
    let out = mvcp(d, &args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let value = |key: &str| -> f64 {
        text.lines().find_map(|l| l.strip_prefix(key)).unwrap().trim().parse().unwrap()
    };
    assert!((0.8..0.97).contains(&value("coverage ")));
    assert!(value("volume ") > 0.0 && value("volume_stderr ") > 0.0);
    mvcp(d, &args);
    let report = std::fs::read_to_string(d.join("r.csv")).unwrap();
    assert_eq!(report.lines().count(), 3);
    assert!(report.starts_with("run_id,method,seed,n_cal,eps,coverage,volume,volume_stderr,time_ms\n"));
}
