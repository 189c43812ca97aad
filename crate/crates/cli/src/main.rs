use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use fedac_core::engine::{run_experiment, run_experiment_with_threads, ExperimentResult};
use fedac_core::io::{metrics_csv, similarity_report, trace_csv, write_text, Snapshot};
use toml::{Table, Value};

mod settings;

use settings::{
    apply_override, load_table, parse_value, resolve, set_path, split_values, to_toml, ConfigError,
};

#[derive(Parser)]
#[command(
    name = "fedac",
    version,
    about = "Adaptive clustered federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Print a CSV report from a run or snapshot directory.
    Report {
        /// Run directory or its `snapshot` subdirectory.
        dir: PathBuf,
        #[arg(long, value_enum)]
        kind: ReportKind,
    },
    /// Run the Cartesian product of a parameter grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// KEY=v1,v2,... (repeatable).
        #[arg(long = "grid", value_name = "KEY=VALUES", required = true)]
        grid: Vec<String>,
    },
}

#[derive(clap::Args)]
struct Common {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// KEY=VALUE override, dotted keys allowed (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportKind {
    Partition,
    Similarity,
    Clusters,
}

impl Common {
    fn table(&self) -> Result<Table, ConfigError> {
        let mut table = load_table(&self.config)?;
        for s in &self.set {
            apply_override(&mut table, s)?;
        }
        if let Some(seed) = self.seed {
            table.insert("seed".into(), Value::Integer(seed as i64));
        }
        Ok(table)
    }

    fn out_dir(&self, from_config: Option<PathBuf>) -> PathBuf {
        self.out
            .clone()
            .or(from_config)
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

fn execute(config: fedac_core::config::RunConfig, threads: Option<usize>) -> Result<ExperimentResult> {
    Ok(match threads {
        Some(n) => run_experiment_with_threads(config, n)?,
        None => run_experiment(config)?,
    })
}

fn write_run(dir: &Path, config_toml: &str, result: &ExperimentResult) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    write_text(&dir.join("metrics.csv"), &metrics_csv(&result.metrics))?;
    write_text(&dir.join("cluster_trace.csv"), &trace_csv(&result.trace))?;
    write_text(&dir.join("config.resolved.toml"), config_toml)?;
    Snapshot::from_simulation(&result.simulation, &result.trace)?.write(&dir.join("snapshot"))?;
    Ok(())
}

fn cmd_run(common: &Common) -> Result<()> {
    let resolved = resolve(common.table()?)?;
    let dir = common.out_dir(resolved.out_dir);
    let config_toml = to_toml(&resolved.config)?;
    log::info!(
        "running {} rounds, output in {}",
        resolved.config.rounds,
        dir.display()
    );
    let result = execute(resolved.config, common.threads)?;
    write_run(&dir, &config_toml, &result)?;
    if let Some(last) = result.metrics.last() {
        log::info!(
            "final round {}: accuracy {:.4} +- {:.4}, K = {}",
            last.round,
            last.mean_test_accuracy,
            last.std_test_accuracy,
            last.k
        );
    }
    Ok(())
}

fn cmd_report(dir: &Path, kind: ReportKind) -> Result<()> {
    let snap_dir = if dir.join("snapshot").is_dir() {
        dir.join("snapshot")
    } else {
        dir.to_path_buf()
    };
    if !snap_dir.join("clients.bin").exists() {
        bail!("{} is not a run or snapshot directory", dir.display());
    }
    let text = match kind {
        ReportKind::Partition => fs::read_to_string(snap_dir.join("partition.csv"))?,
        ReportKind::Clusters => fs::read_to_string(snap_dir.join("cluster_trace.csv"))?,
        ReportKind::Similarity => similarity_report(&Snapshot::read(&snap_dir)?)?,
    };
    print!("{text}");
    Ok(())
}

fn cmd_sweep(common: &Common, grid: &[String]) -> Result<bool> {
    let base = common.table()?;
    let mut axes = Vec::with_capacity(grid.len());
    for g in grid {
        let (key, raw) = g
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("grid `{g}` is not KEY=v1,v2,...")))?;
        let values = split_values(raw);
        if values.iter().any(String::is_empty) {
            return Err(ConfigError(format!("grid `{g}` has an empty value")).into());
        }
        axes.push((key.trim().to_string(), values));
    }
    // base must resolve on its own so config mistakes surface before any run
    let root = common.out_dir(resolve(base.clone())?.out_dir);

    let mut points: Vec<Vec<usize>> = vec![vec![]];
    for (_, values) in &axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                (0..values.len()).map(move |i| {
                    let mut q = p.clone();
                    q.push(i);
                    q
                })
            })
            .collect();
    }

    let mut summary = String::from("point");
    for (key, _) in &axes {
        write!(summary, ",{key}").unwrap();
    }
    summary.push_str(",status,final_mean_acc,final_std_acc,final_K,final_ari,dir\n");
    let mut all_ok = true;
    for (n, point) in points.iter().enumerate() {
        let name = format!("point_{n:03}");
        let dir = root.join(&name);
        let mut table = base.clone();
        for ((key, values), &i) in axes.iter().zip(point) {
            set_path(&mut table, key, parse_value(&values[i]))?;
        }
        let outcome = resolve(table).map_err(anyhow::Error::from).and_then(|r| {
            let config_toml = to_toml(&r.config)?;
            let result = execute(r.config, common.threads)?;
            write_run(&dir, &config_toml, &result)?;
            Ok(result)
        });
        write!(summary, "{name}").unwrap();
        for ((_, values), &i) in axes.iter().zip(point) {
            write!(summary, ",{}", csv_field(&values[i])).unwrap();
        }
        match outcome {
            Ok(result) => {
                let last = result.metrics.last();
                let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                writeln!(
                    summary,
                    ",ok,{},{},{},{},{name}",
                    f(last.map(|m| m.mean_test_accuracy)),
                    f(last.map(|m| m.std_test_accuracy)),
                    last.map(|m| m.k.to_string()).unwrap_or_default(),
                    f(last.and_then(|m| m.ari)),
                )
                .unwrap();
            }
            Err(e) => {
                log::error!("{name} failed: {e:#}");
                all_ok = false;
                writeln!(summary, ",failed,,,,,{name}").unwrap();
            }
        }
    }
    write_text(&root.join("summary.csv"), &summary)?;
    Ok(all_ok)
}

fn csv_field(v: &str) -> String {
    if v.contains([',', '"', '\n']) {
        format!("\"{}\"", v.replace('"', "\"\""))
    } else {
        v.to_string()
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { common } => cmd_run(common).map(|_| true),
        Command::Report { dir, kind } => cmd_report(dir, *kind).map(|_| true),
        Command::Sweep { common, grid } => cmd_sweep(common, grid),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) if e.is::<ConfigError>() => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
