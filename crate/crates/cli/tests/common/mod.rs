//! Helpers shared by the CLI and acceptance test targets.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use physgraph::ppo::{EPISODES_FILE, LATEST_CHECKPOINT, METRICS_FILE};
use physgraph::RunConfig;
use physgraph_cli::inspect::COEFFICIENTS_FILE;

pub fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn golden_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares against `tests/golden/<name>`; `UPDATE_GOLDEN=1` rewrites it.
pub fn golden(name: &str, actual: &str) {
    let p = golden_path(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::write(&p, actual).unwrap();
        return;
    }
    let want = fs::read_to_string(&p).unwrap_or_else(|_| panic!("missing golden file {}", p.display()));
    assert_eq!(actual, want, "golden file {name} differs");
}

pub fn bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_physgraph"))
        .args(args)
        .current_dir(cwd)
        .env("PHYSGRAPH_DETERMINISTIC", "1")
        .output()
        .unwrap()
}

pub fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn err(out: &Output) -> String {
    assert!(!out.status.success(), "expected failure, got success");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Writes a self-contained smoke config into `dir` with the given extra lines.
pub fn smoke(dir: &Path, extra: &[&str]) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let mut text = fs::read_to_string(configs().join("smoke.toml")).unwrap();
    text = text.replace(
        "graph_spec = \"graphs/bimanual_f2l2.toml\"",
        &format!("graph_spec = {:?}", configs().join("graphs/bimanual_f2l2.toml").display().to_string()),
    );
    text = text.replace("output_dir = \"runs/smoke\"", &format!("output_dir = {:?}", dir.join("run").display().to_string()));
    let cfg = RunConfig::from_toml_str(&text, &extra.iter().map(|s| s.to_string()).collect::<Vec<_>>(), None).unwrap();
    let path = dir.join("smoke.toml");
    fs::write(&path, cfg.to_toml_string()).unwrap();
    path
}

pub fn records(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

pub fn key_set(v: &serde_json::Value, prefix: &str, out: &mut BTreeSet<String>) {
    if let Some(m) = v.as_object() {
        for (k, x) in m {
            let name = format!("{prefix}{k}");
            out.insert(name.clone());
            key_set(x, &format!("{name}."), out);
        }
    }
}

pub fn schema(recs: &[serde_json::Value]) -> String {
    let mut keys = BTreeSet::new();
    for r in recs {
        key_set(r, "", &mut keys);
    }
    keys.into_iter().map(|k| k + "\n").collect()
}

pub fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let head = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect();
    (head, rows)
}

pub fn matrix(path: &Path) -> Vec<Vec<f64>> {
    read_csv(path).1.iter().map(|r| r[1..].iter().map(|x| x.parse().unwrap()).collect()).collect()
}

/// True when `tests/golden/<name>` exists and equals `actual`.
pub fn golden_matches(name: &str, actual: &str) -> bool {
    fs::read_to_string(golden_path(name)).is_ok_and(|want| want == actual)
}

/// Metrics and episode JSONL key sets from a tiny run whose episodes finish.
pub fn log_schemas(dir: &Path) -> (String, String) {
    let cfg = smoke(dir, &["ppo.max_updates=2", "ppo.eval_every=2", "ppo.eval_episodes=2", "env.horizon=12", "env.limits.wrist_pos=0.05", "env.limits.wrist_rot=0.5", "env.limits.joint=1.0"]);
    ok(&bin(&["train", "--config", cfg.to_str().unwrap(), "--quiet"], dir));
    let seed0 = dir.join("run/seed0");
    let e = records(&seed0.join(EPISODES_FILE));
    assert!(!e.is_empty());
    (schema(&records(&seed0.join(METRICS_FILE))), schema(&e))
}

/// First line of the eval CSV for a one-update checkpoint.
pub fn eval_header(dir: &Path) -> String {
    let cfg = smoke(dir, &["ppo.max_updates=1", "ppo.eval_every=0"]);
    ok(&bin(&["train", "--config", cfg.to_str().unwrap(), "--quiet"], dir));
    let csv_path = dir.join("header.csv");
    let ckpt = dir.join("run/seed0").join(LATEST_CHECKPOINT);
    ok(&bin(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--episodes", "1", "--out", csv_path.to_str().unwrap()], dir));
    fs::read_to_string(&csv_path).unwrap().lines().next().unwrap().to_string() + "\n"
}

pub fn inspect(dir: &Path, out: &str, extra: &[&str]) -> PathBuf {
    let cfg = smoke(dir, &[]);
    let o = dir.join(out);
    let mut args = vec!["inspect-bias", "--config", cfg.to_str().unwrap(), "--out", o.to_str().unwrap()];
    args.extend_from_slice(extra);
    ok(&bin(&args, dir));
    o
}

/// Sorted file list and CSV headers written by `inspect-bias`.
pub fn inspect_layout(dir: &Path) -> String {
    let o = inspect(dir, "layout", &[]);
    let mut names: Vec<String> = fs::read_dir(&o).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    let (head, _) = read_csv(&o.join("edge_h0.csv"));
    let (chead, _) = read_csv(&o.join(COEFFICIENTS_FILE));
    format!("files:\n{}\nmatrix header:\n{}\ncoefficients header:\n{}\n", names.join("\n"), head.join(","), chead.join(","))
}

pub fn count_params_default() -> String {
    physgraph_cli::count::run(&physgraph_cli::count::CountArgs {
        config: Default::default(),
        compare: true,
    })
    .unwrap()
}
