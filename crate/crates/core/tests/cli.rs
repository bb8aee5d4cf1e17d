//! End-to-end runs of the command-line tool.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
train_start = "2000-01-01"
train_end = "2000-12-31"
test_start = "2001-01-01"
test_end = "2001-12-31"
basis_size = 8
hidden = [8]
batch_size = 32
learning_rate = 0.01
max_epochs = 10
neighbors = 2
seed = 3
"#;

fn spcde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spcde"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = spcde(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    config: PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data.csv");
    let config = root.join("run.toml");
    std::fs::write(&config, CONFIG).unwrap();
    ok(&[
        "synth", "--out", p(&data), "--nx", "2", "--ny", "2", "--days", "731", "--tmax-shift", "2", "--drizzle", "1",
    ]);
    Workspace {
        _dir: dir,
        root,
        data,
        config,
    }
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn stages_chain_into_an_evaluation() {
    let ws = workspace();
    let header = read(&ws.data).lines().next().unwrap().to_string();
    assert_eq!(header, "date,location,x,y,tmax,prcp,source");
    assert!(ws.root.join("data.csv.manifest.json").exists());

    let model_dir = ws.root.join("model");
    ok(&["fit", "--data", p(&ws.data), "--config", p(&ws.config), "--model-dir", p(&model_dir)]);
    let models = std::fs::read_dir(model_dir.join("models")).unwrap().count();
    assert_eq!(models, 12 * 4 * 2);
    let run: serde_json::Value = serde_json::from_str(&read(&model_dir.join("run.json"))).unwrap();
    assert_eq!(run["command"], "fit");
    assert_eq!(run["inputs"].as_array().unwrap().len(), 2);

    let cal = ws.root.join("cal.csv");
    ok(&[
        "calibrate", "--data", p(&ws.data), "--model-dir", p(&model_dir), "--config", p(&ws.config), "--out", p(&cal),
    ]);
    let cal_text = read(&cal);
    // 365 days of 2001 at 4 locations, plus the header.
    assert_eq!(cal_text.lines().count(), 365 * 4 + 1);
    assert!(cal_text.lines().skip(1).all(|l| l.ends_with(",calibrated")));
    assert!(cal_text.lines().nth(1).unwrap().starts_with("2001-01-01,"));

    let qm = ws.root.join("qm.csv");
    ok(&["qm", "--data", p(&ws.data), "--config", p(&ws.config), "--out", p(&qm)]);
    assert_eq!(read(&qm).lines().count(), 365 * 4 + 1);

    let eval_dir = ws.root.join("eval");
    let out = ok(&[
        "evaluate",
        "--data",
        p(&ws.data),
        "--method",
        &format!("SPCDE={}", p(&cal)),
        "--method",
        &format!("QM={}", p(&qm)),
        "--out-dir",
        p(&eval_dir),
    ]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("SPCDE") && table.contains("QM") && table.contains("Model"));
    assert!(table.contains("Proportion of zeros"));
    let summary = read(&eval_dir.join("metrics_summary.csv"));
    assert!(summary.starts_with("metric,variable,method,value,best"));
    let cells = read(&eval_dir.join("metrics_cells.csv"));
    assert!(cells.starts_with("month,unit,metric,variable,method,value"));
    assert!(eval_dir.join("manifest.json").exists());
}

fn report(ws: &Workspace, dir: &Path, sequential: bool) {
    let mut args = vec!["report", "--data", p(&ws.data), "--config", p(&ws.config), "--out-dir", p(dir)];
    if sequential {
        args.push("--sequential");
    }
    ok(&args);
}

#[test]
fn report_outputs_are_reproducible() {
    let ws = workspace();
    let a = ws.root.join("a");
    let b = ws.root.join("b");
    report(&ws, &a, false);
    report(&ws, &b, true);
    for f in ["calibrated.csv", "qm.csv", "metrics_cells.csv", "metrics_summary.csv", "metrics_table.txt"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f} differs");
    }
    let manifest: serde_json::Value = serde_json::from_str(&read(&a.join("manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "report");
    assert_eq!(manifest["seed"], 3);
    let model: serde_json::Value = serde_json::from_str(&read(&a.join("model/manifest.json"))).unwrap();
    assert!(model.is_object());
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // Usage errors.
    assert_eq!(spcde(&["frobnicate"]).status.code(), Some(2));

    // Configuration errors.
    let bad_cfg = root.join("bad.toml");
    std::fs::write(&bad_cfg, "no_such_key = 1\n").unwrap();
    let data = root.join("data.csv");
    ok(&["synth", "--out", p(&data), "--nx", "1", "--ny", "2", "--days", "60"]);
    let out = spcde(&["qm", "--data", p(&data), "--config", p(&bad_cfg), "--out", p(&root.join("q.csv"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(spcde(&["synth", "--out", p(&data), "--drizzle", "2"]).status.code(), Some(2));

    // Input errors: malformed number, negative precipitation, missing cells.
    let text = read(&data);
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let set_field = |l: &str, k: usize, v: &str| {
        let mut f: Vec<&str> = l.split(',').collect();
        f[k] = v;
        f.join(",")
    };
    let cases = [("bad_number.csv", 3usize, 4usize, "warm"), ("negative.csv", 5, 5, "-1")];
    for (name, line, field, value) in cases {
        let mut copy = lines.clone();
        copy[line] = set_field(&copy[line], field, value);
        let path = root.join(name);
        std::fs::write(&path, copy.join("\n") + "\n").unwrap();
        let out = spcde(&["qm", "--data", p(&path), "--out", p(&root.join("q.csv"))]);
        assert_eq!(out.status.code(), Some(3), "{name}: {}", String::from_utf8_lossy(&out.stderr));
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(&format!("line {}", line + 1)), "{name}: {err}");
    }
    lines.remove(7);
    let path = root.join("missing.csv");
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    let out = spcde(&["qm", "--data", p(&path), "--out", p(&root.join("q.csv"))]);
    assert_eq!(out.status.code(), Some(3));
}
