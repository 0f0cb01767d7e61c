use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn graphite(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graphite"))
        .args(args)
        .env_remove("GRAPHITE_OUTPUT_ROOT")
        .output()
        .expect("spawn graphite")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_dataset(dir: &Path) -> String {
    let data = dir.join("data");
    let d = data.to_str().unwrap();
    let o = graphite(&[
        "synth", "--out", d, "--n-train", "8", "--n-test", "4", "--feature-dim", "4", "--num-levels", "2", "--seed", "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    d.to_string()
}

const FAST: [&str; 4] = ["--stage1-max-epochs", "4", "--stage2-max-epochs", "2"];

fn run_args<'a>(data: &'a str, out: &'a str) -> Vec<&'a str> {
    let mut a = vec!["run", "--data", data, "--output-dir", out];
    a.extend(FAST);
    a
}

#[test]
fn run_writes_ranked_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let out = tmp.path().join("out");
    let o = graphite(&run_args(&data, out.to_str().unwrap()));
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some("Method,mAP,AUROC,AUPRC,mIoU,ThS,ThR,BA,CXPS,AUDC"));
    assert_eq!(lines.count(), 7);
    assert_eq!(String::from_utf8_lossy(&o.stdout), report);
    for f in ["checkpoints/stage1.ckpt", "checkpoints/stage2.ckpt", "run_manifest.json", "summary.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    assert!(out.join("saliency/graphite-v2/core_008.png").is_file());
    assert!(out.join("saliency/graphite-v2/core_008_color.png").is_file());
    assert!(out.join("curves/graphite-v2_roc.csv").is_file());
}

#[test]
fn staged_verbs_match_full_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let full = tmp.path().join("full");
    assert!(graphite(&run_args(&data, full.to_str().unwrap())).status.success());

    let staged = tmp.path().join("staged");
    let s = staged.to_str().unwrap();
    for verb in ["build-graph", "train-mil", "train-ssl", "saliency", "eval"] {
        let mut a = vec![verb, "--data", data.as_str(), "--output-dir", s];
        a.extend(FAST);
        let o = graphite(&a);
        assert!(o.status.success(), "{verb}: {}", stderr(&o));
    }
    assert!(staged.join("graphs/core_000.json").is_file());
    assert_eq!(
        fs::read(full.join("report.csv")).unwrap(),
        fs::read(staged.join("report.csv")).unwrap()
    );
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 7, "variant": "v1", "stage1": {"max_epochs": 3}}"#).unwrap();
    let out = tmp.path().join("out");
    let o = graphite(&[
        "run",
        "--data",
        &data,
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "5",
        "--stage2-max-epochs",
        "1",
        "--output-dir",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["config"]["variant"], "v1");
    assert_eq!(manifest["config"]["stage1"]["max_epochs"], 3);
    assert_eq!(manifest["config"]["stage2"]["train"]["max_epochs"], 1);
}

#[test]
fn output_root_comes_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let root = tmp.path().join("env-root");
    let mut a = vec!["train-mil", "--data", data.as_str()];
    a.extend(FAST);
    let o = Command::new(env!("CARGO_BIN_EXE_graphite"))
        .args(&a)
        .env("GRAPHITE_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(root.join("checkpoints/stage1.ckpt").is_file());
}

#[test]
fn compare_prefixes_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(graphite(&run_args(&data, a.to_str().unwrap())).status.success());
    let mut args = run_args(&data, b.to_str().unwrap());
    args.extend(["--variant", "base"]);
    assert!(graphite(&args).status.success());
    let csv = tmp.path().join("cmp.csv");
    let o = graphite(&["compare", a.to_str().unwrap(), b.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 15);
    assert!(text.contains("a/GRAPHITE-V2,") && text.contains("b/uniform,"));
}

#[test]
fn validation_failures_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().to_str().unwrap();
    let o = graphite(&["run", "--data", empty]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no manifest"), "{}", stderr(&o));

    let data = small_dataset(tmp.path());
    let out = tmp.path().join("fresh");
    let o = graphite(&["run", "--data", &data, "--skip-train", "--output-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stage1.ckpt"), "{}", stderr(&o));

    let o = graphite(&["run", "--data", &data, "--variant", "v9"]);
    assert_eq!(o.status.code(), Some(1));
    let o = graphite(&["run", "--data", &data, "--tau", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("tau"));
    let o = graphite(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    let o = graphite(&["synth", "--out", empty, "--grid-rows", "4", "--grid-cols", "4"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("exceeds"));
}

#[test]
fn runtime_failure_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let blocker = tmp.path().join("not-a-dir");
    fs::write(&blocker, "x").unwrap();
    let mut a = vec!["train-mil", "--data", data.as_str(), "--output-dir", blocker.to_str().unwrap()];
    a.extend(FAST);
    let o = graphite(&a);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn help_exits_zero() {
    let o = graphite(&["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for verb in ["synth", "build-graph", "train-mil", "train-ssl", "saliency", "eval", "compare", "run"] {
        assert!(text.contains(verb), "{verb}");
    }
}
