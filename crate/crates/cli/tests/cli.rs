use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BASE: &str = r#"
eta = 0.05
mu = 0.05
lambda = 0.1
k_init = 2
reduction_dim = 8
rounds = 3
sample_fraction = 0.5
local_epochs = 2
batch_size = 16
map_refresh_period = 2
cnt_period = 2
seed = 1

[model]
hidden = [8]

[data]
kind = "synthetic"
groups = 2
clients_per_group = 3
input_dim = 5
class_count = 3
task_shift = 1.0
noise = 0.1
seed = 4

[data.allocation]
min_size = 20
max_size = 40
test_fraction = 0.25
"#;

fn fedac(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedac"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_rectangular(csv: &str) {
    let mut lines = csv.lines();
    let width = lines.next().unwrap().split(',').count();
    for l in lines {
        assert_eq!(l.split(',').count(), width, "ragged row `{l}`");
    }
}

fn run_dir(tmp: &TempDir, name: &str, extra: &[&str]) -> PathBuf {
    let cfg = write_config(tmp.path(), "base.toml", BASE);
    let out = tmp.path().join(name);
    let mut args = vec![
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let o = fedac(&args, tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn single_round_writes_one_metrics_row() {
    let tmp = TempDir::new().unwrap();
    let out = run_dir(&tmp, "r", &["--set", "rounds=1"]);
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "round,mean_acc,std_acc,mean_loss,K,gc_mean,gc_std,ari");
    assert_eq!(lines.len(), 2);
    assert_rectangular(&metrics);
    for f in [
        "cluster_trace.csv",
        "config.resolved.toml",
        "snapshot/clients.bin",
        "snapshot/map.bin",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let resolved = fs::read_to_string(out.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("rounds = 1"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let a = run_dir(&tmp, "a", &["--set", "seed=7"]);
    let b = run_dir(&tmp, "b", &["--set", "seed=7", "--threads", "1"]);
    for f in [
        "metrics.csv",
        "cluster_trace.csv",
        "config.resolved.toml",
        "snapshot/clients.bin",
        "snapshot/centers.bin",
        "snapshot/assignment.bin",
        "snapshot/map.bin",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = TempDir::new().unwrap();
    let a = run_dir(&tmp, "a", &["--seed", "9"]);
    let resolved = fs::read_to_string(a.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("seed = 9"));
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let no_eta = BASE.replace("eta = 0.05\n", "");
    let cfg = write_config(tmp.path(), "no_eta.toml", &no_eta);
    let o = fedac(&["run", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("eta"), "{}", stderr(&o));

    let cfg = write_config(tmp.path(), "base.toml", BASE);
    for bad in [
        "eta=-1",
        "k_init=0",
        "data.unknown=3",
        "cnt_lower=0.9",
        "mode=sideways",
    ] {
        let o = fedac(
            &["run", "--config", cfg.to_str().unwrap(), "--set", bad],
            tmp.path(),
        );
        assert_eq!(o.status.code(), Some(2), "{bad}: {}", stderr(&o));
    }
    let o = fedac(&["run", "--config", "missing.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let tmp = TempDir::new().unwrap();
    let text = r#"
eta = 0.05
rounds = 1
[data]
kind = "dirichlet"
clients = 4
alpha = 0.5
[data.source]
path = "does_not_exist.txt"
"#;
    let cfg = write_config(tmp.path(), "dir.toml", text);
    let o = fedac(&["run", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn partition_sources_run() {
    let tmp = TempDir::new().unwrap();
    let text = r#"
eta = 0.05
k_init = 2
reduction_dim = 4
rounds = 2
sample_fraction = 0.5
[data]
kind = "pathological"
clients = 6
labels_per_client = 2
[data.allocation]
min_size = 20
max_size = 30
[data.source.teacher]
samples = 400
input_dim = 4
class_count = 4
"#;
    let cfg = write_config(tmp.path(), "path.toml", text);
    let o = fedac(
        &["run", "--config", cfg.to_str().unwrap(), "--out", "p"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fedac(&["report", "p", "--kind", "partition"], tmp.path());
    let text = stdout(&report);
    assert_rectangular(&text);
    for row in text.lines().skip(1) {
        let nonzero = row.split(',').skip(3).filter(|v| *v != "0").count();
        assert!(nonzero <= 2, "{row}");
    }

    let dirichlet = r#"
eta = 0.05
k_init = 1
rounds = 2
[data]
kind = "dirichlet"
clients = 5
alpha = 0.3
[data.source]
path = "pool.txt"
"#;
    fs::write(
        tmp.path().join("pool.txt"),
        "d=2,C=2,N=6\n0.1,0.2,0\n0.3,-1,1\n1,1,0\n-0.5,0.5,1\n2,0,0\n0,2,1\n",
    )
    .unwrap();
    let cfg = write_config(tmp.path(), "dir.toml", dirichlet);
    let o = fedac(
        &[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            "d",
            "--set",
            "data.allocation={min_size=2,max_size=4,test_fraction=0.5}",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn reports_from_run_and_snapshot_dirs() {
    let tmp = TempDir::new().unwrap();
    let out = run_dir(&tmp, "r", &[]);
    let m = 6;
    let sim = stdout(&fedac(
        &["report", out.to_str().unwrap(), "--kind", "similarity"],
        tmp.path(),
    ));
    assert_rectangular(&sim);
    let lines: Vec<&str> = sim.lines().collect();
    assert_eq!(lines[0].split(',').count(), m + 2);
    for block in ["lrcos", "l2", "kl"] {
        let rows: Vec<&&str> = lines
            .iter()
            .filter(|l| l.starts_with(&format!("{block},")))
            .collect();
        assert_eq!(rows.len(), m, "{block}");
    }
    let k = fs::read_to_string(out.join("metrics.csv"))
        .unwrap()
        .lines()
        .last()
        .unwrap()
        .split(',')
        .nth(4)
        .unwrap()
        .parse::<usize>()
        .unwrap();
    assert_eq!(lines.iter().filter(|l| l.starts_with("lrcos_center,")).count(), k);
    for row in lines.iter().filter(|l| l.starts_with("lrcos,")) {
        let i: usize = row.split(',').nth(1).unwrap().parse().unwrap();
        let diag: f64 = row.split(',').nth(i + 2).unwrap().parse().unwrap();
        assert!((diag - 1.0).abs() < 1e-9 || diag == 0.0);
    }

    let snap = out.join("snapshot");
    let clusters = stdout(&fedac(
        &["report", snap.to_str().unwrap(), "--kind", "clusters"],
        tmp.path(),
    ));
    assert_eq!(
        clusters,
        fs::read_to_string(out.join("cluster_trace.csv")).unwrap()
    );
    assert_rectangular(&clusters);

    let o = fedac(&["report", "nowhere", "--kind", "partition"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweep_writes_points_and_summary() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "base.toml", BASE);
    let o = fedac(
        &[
            "sweep",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            "s",
            "--grid",
            "mu=0,0.5",
            "--grid",
            "model.hidden=[4],[6,6]",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(tmp.path().join("s/summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("point,mu,model.hidden,status"));
    assert!(lines[1].starts_with("point_000,0,[4],ok"));
    assert!(lines[4].starts_with("point_003,0.5,\"[6,6]\",ok"));
    for i in 0..4 {
        assert!(tmp.path().join(format!("s/point_{i:03}/metrics.csv")).exists());
    }
}

#[test]
fn sweep_marks_failed_points() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "base.toml", BASE);
    let o = fedac(
        &[
            "sweep",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            "s",
            "--grid",
            "eta=0.05,-1",
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    let summary = fs::read_to_string(tmp.path().join("s/summary.csv")).unwrap();
    assert_rectangular(&summary);
    assert!(summary.lines().nth(1).unwrap().contains(",ok,"));
    assert!(summary.lines().nth(2).unwrap().contains(",failed,"));
}

#[test]
fn sweep_point_matches_standalone_fedavg() {
    let tmp = TempDir::new().unwrap();
    let text = BASE
        .replace(
            "seed = 1\n",
            "seed = 1\nmode = \"fedavg\"\nsample_fraction = 1.0\n",
        )
        .replace("sample_fraction = 0.5\n", "")
        .replace("local_epochs = 2", "local_epochs = 1");
    let cfg = write_config(tmp.path(), "avg.toml", &text);
    let o = fedac(
        &[
            "sweep",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            "s",
            "--grid",
            "mu=0",
            "--grid",
            "lambda=0",
            "--grid",
            "k_init=1",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = fedac(
        &["run", "--config", cfg.to_str().unwrap(), "--out", "solo"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));

    let summary = fs::read_to_string(tmp.path().join("s/summary.csv")).unwrap();
    let acc = summary
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(5)
        .unwrap()
        .to_string();
    let metrics = fs::read_to_string(tmp.path().join("solo/metrics.csv")).unwrap();
    let solo = metrics
        .lines()
        .last()
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .to_string();
    assert_eq!(acc, solo);
    assert_eq!(
        fs::read(tmp.path().join("s/point_000/metrics.csv")).unwrap(),
        metrics.into_bytes()
    );
}
