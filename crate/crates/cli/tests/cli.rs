use std::path::Path;
use std::process::{Command, Output};

fn enspost(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_enspost")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = enspost(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path) -> (String, String) {
    ok(&["simulate", "--preset", "underdispersed", "--days", "32", "--seed", "5", "-o", s(dir)]);
    (s(&dir.join("forecasts.csv")).to_string(), s(&dir.join("stations.csv")).to_string())
}

#[test]
fn calibrate_then_verify_reproduces_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let (f, st) = simulate(&tmp.path().join("data"));
    let run = tmp.path().join("run");
    let stdout = ok(&["calibrate", "--forecasts", &f, "--stations", &st, "--method", "bma", "--hours", "6,18", "-o", s(&run)]);
    assert!(stdout.contains("raw") && stdout.contains("bma"), "{stdout}");
    let re = tmp.path().join("re");
    ok(&["verify", "--input", s(&run.join("forecasts.csv")), "-o", s(&re)]);
    let a = std::fs::read_to_string(run.join("scores.csv")).unwrap();
    let b = std::fs::read_to_string(re.join("scores.csv")).unwrap();
    assert_eq!(a, b);
    assert!(a.starts_with("model,hour,crps,rmse,mae,coverage_pct,n_cases"));
}

#[test]
fn cluster_sweep_and_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let (f, st) = simulate(&tmp.path().join("data"));
    let common = ["--forecasts", f.as_str(), "--stations", st.as_str(), "--hours", "12"];

    let cl = tmp.path().join("clusters");
    let mut args = vec!["cluster", "--clustering", "kmeans:2", "--method", "emos-c", "-o", s(&cl)];
    args.extend(common);
    ok(&args);
    let text = std::fs::read_to_string(cl.join("clusters.csv")).unwrap();
    assert!(text.starts_with("target_date,hour,method,station_id,cluster_id"));

    let sw = tmp.path().join("sweep");
    let mut args = vec!["sweep", "--method", "emos", "--lengths", "10,20", "-o", s(&sw)];
    args.extend(common);
    ok(&args);
    let sweep = std::fs::read_to_string(sw.join("sweep.csv")).unwrap();
    assert!(sweep.lines().any(|l| l.starts_with("emos,20,overall")), "{sweep}");

    let mut runs = Vec::new();
    for (name, method, clustering) in [("raw", "raw", "regional"), ("emosc", "emos-c", "expert-altitude")] {
        let dir = tmp.path().join(name);
        let mut args = vec!["calibrate", "--method", method, "--clustering", clustering, "-o", s(&dir)];
        args.extend(common);
        ok(&args);
        runs.push(dir);
    }
    let dm = tmp.path().join("dm");
    let stdout = ok(&["compare", s(&runs[0]), s(&runs[1]), "-o", s(&dm)]);
    assert!(stdout.contains("emos-c"), "{stdout}");
    for name in ["dm_matrix.csv", "dm_matrix_crps.csv", "dm_matrix_ae.csv"] {
        assert!(dm.join(name).exists(), "missing {name}");
    }
}

#[test]
fn invalid_configurations_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let out = enspost(&["calibrate", "--method", "emos", "--clustering", "expert-altitude", "-o", s(tmp.path())]);
    assert!(!out.status.success());
    let out = enspost(&["calibrate", "--set", "no_such_key=1", "-o", s(tmp.path())]);
    assert!(!out.status.success());
    let out = enspost(&["compare", s(tmp.path()), "-o", s(tmp.path())]);
    assert!(!out.status.success());
}

#[test]
fn print_config_round_trips_through_file() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(&["calibrate", "--method", "bma", "--bias-mode", "additive", "--training-length", "30", "--print-config"]);
    let path = tmp.path().join("run.cfg");
    std::fs::write(&path, &text).unwrap();
    let again = ok(&["calibrate", "--config", s(&path), "--print-config"]);
    assert_eq!(text, again);
    assert!(text.contains("additive"));
}
