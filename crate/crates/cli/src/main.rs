use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hilo_core::experiment::{
    compare, resolve_out_dir, run_experiment, write_outputs, ExperimentConfig, ExperimentReport, MetricRow,
};
use hilo_core::synthdata::{distortion_table, generate, TaskConfig};
use hilo_core::trainer::Ablations;

#[derive(Parser)]
#[command(name = "hilo", version, about = "Category discovery under domain shift on synthetic patch data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Hilo,
    Simgcd,
    Both,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON experiment config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `train.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate, writing metrics.csv and report.json.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// `table3`, `leave_one_out`, or comma-separated preset names.
        #[arg(long)]
        ablation: Option<String>,
        /// A count `N` (seeds 0..N), a list `a,b,c`, or a range `a..b`.
        #[arg(long)]
        seeds: Option<String>,
        /// Worker threads; defaults to the available cores.
        #[arg(long)]
        jobs: Option<usize>,
        /// Output directory; falls back to the config's `output_dir`, then
        /// `$HILO_OUT_DIR`, then `hilo-out`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// No per-evaluation progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Mean metric differences between two reports (second minus first).
    Compare { a: PathBuf, b: PathBuf },
    /// Export a generated dataset in the text format.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Added to `task.seed`, as in a run.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distortion (MSE) of every corruption kind and severity.
    BenchCorrupt {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

type CliResult<T> = std::result::Result<T, String>;

fn parse_seeds(s: &str) -> CliResult<Vec<u64>> {
    let bad = |_| format!("cannot parse seeds {s:?}");
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(bad)?, b.trim().parse().map_err(bad)?);
        return if a < b {
            Ok((a..b).collect())
        } else {
            Err(format!("empty seed range {s:?}"))
        };
    }
    if s.contains(',') {
        return s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| p.trim().parse().map_err(bad))
            .collect();
    }
    let n: u64 = s.trim().parse().map_err(bad)?;
    if n == 0 {
        return Err("--seeds needs at least one seed".into());
    }
    Ok((0..n).collect())
}

fn run_names(mode: Option<ModeArg>, ablation: Option<&str>) -> CliResult<Vec<String>> {
    let mut runs: Vec<String> = match mode {
        None => Vec::new(),
        Some(ModeArg::Hilo) => vec!["hilo".into()],
        Some(ModeArg::Simgcd) => vec!["simgcd".into()],
        Some(ModeArg::Both) => vec!["simgcd".into(), "hilo".into()],
    };
    let Some(ablation) = ablation else {
        return Ok(runs);
    };
    if matches!(mode, Some(ModeArg::Simgcd)) {
        return Err("ablations apply to hilo mode only".into());
    }
    let extra: Vec<String> = match ablation {
        "table3" => Ablations::TABLE3.iter().map(|s| s.to_string()).collect(),
        "leave_one_out" => std::iter::once("hilo")
            .chain(Ablations::LEAVE_ONE_OUT)
            .map(str::to_string)
            .collect(),
        list => list.split(',').map(|s| s.trim().to_string()).collect(),
    };
    for name in extra {
        if Ablations::preset(&name).is_none() {
            return Err(format!("unknown ablation {name:?}"));
        }
        if !runs.contains(&name) {
            runs.push(name);
        }
    }
    Ok(runs)
}

fn load_config(args: &ConfigArgs, extra: Vec<String>) -> CliResult<ExperimentConfig> {
    let mut overrides = args.set.clone();
    overrides.extend(extra);
    ExperimentConfig::load_with_overrides(args.config.as_deref(), &overrides).map_err(|e| e.to_string())
}

fn progress_line(row: &MetricRow) {
    eprintln!(
        "{} seed {} epoch {}: loss {:.4} seen {:.4} unseen {:.4}",
        row.run, row.seed, row.epoch, row.loss, row.seen_all, row.unseen_all
    );
}

fn cmd_run(
    cfg_args: &ConfigArgs,
    mode: Option<ModeArg>,
    ablation: Option<&str>,
    seeds: Option<&str>,
    jobs: Option<usize>,
    out: Option<&Path>,
    quiet: bool,
) -> CliResult<()> {
    let mut extra = Vec::new();
    let runs = run_names(mode, ablation)?;
    if !runs.is_empty() {
        extra.push(format!("runs={}", serde_json::json!(runs)));
    }
    if let Some(s) = seeds {
        extra.push(format!("seeds={}", serde_json::json!(parse_seeds(s)?)));
    }
    let cfg = load_config(cfg_args, extra)?;
    let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let silent = |_: &MetricRow| {};
    let progress: &(dyn Fn(&MetricRow) + Sync) = if quiet { &silent } else { &progress_line };
    let (rows, report) = run_experiment(&cfg, jobs, progress).map_err(|e| e.to_string())?;
    let dir = resolve_out_dir(out, &cfg);
    write_outputs(&dir, &rows, &report).map_err(|e| format!("writing {}: {e}", dir.display()))?;
    println!("{:<16} {:>18} {:>18}", "run", "seen acc_all", "unseen acc_all");
    for (name, run) in &report.runs {
        let (s, u) = (&run.summary["seen_all"], &run.summary["unseen_all"]);
        println!(
            "{name:<16} {:>9.4} ± {:<6.4} {:>9.4} ± {:<6.4}",
            s.mean, s.std, u.mean, u.std
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_compare(a: &Path, b: &Path) -> CliResult<()> {
    let load = |p: &Path| ExperimentReport::load(p).map_err(|e| format!("{}: {e}", p.display()));
    let deltas = compare(&load(a)?, &load(b)?).map_err(|e| e.to_string())?;
    println!("run_a,run_b,metric,a,b,delta");
    for d in deltas {
        println!("{},{},{},{:.6},{:.6},{:.6}", d.run_a, d.run_b, d.metric, d.a, d.b, d.delta);
    }
    Ok(())
}

fn seeded_task(cfg: &ExperimentConfig, seed: u64) -> TaskConfig {
    TaskConfig {
        seed: cfg.task.seed.wrapping_add(seed),
        ..cfg.task.clone()
    }
}

fn cmd_gen_data(cfg_args: &ConfigArgs, seed: u64, out: &Path) -> CliResult<()> {
    let cfg = load_config(cfg_args, Vec::new())?;
    let data = generate(&seeded_task(&cfg, seed)).map_err(|e| e.to_string())?;
    data.save(out).map_err(|e| format!("{}: {e}", out.display()))?;
    println!("wrote {} samples to {}", data.len(), out.display());
    Ok(())
}

fn cmd_bench_corrupt(cfg_args: &ConfigArgs, seed: u64, out: Option<&Path>) -> CliResult<()> {
    let cfg = load_config(cfg_args, Vec::new())?;
    let data = generate(&seeded_task(&cfg, seed)).map_err(|e| e.to_string())?;
    let rows = distortion_table(&data, seed).map_err(|e| e.to_string())?;
    let mut csv = String::from("kind,severity,mse\n");
    for r in rows {
        csv.push_str(&format!("{},{},{:.6}\n", r.kind.name(), r.severity, r.mse));
    }
    match out {
        Some(p) => std::fs::write(p, csv).map_err(|e| format!("{}: {e}", p.display())),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            cfg,
            mode,
            ablation,
            seeds,
            jobs,
            out,
            quiet,
        } => cmd_run(cfg, *mode, ablation.as_deref(), seeds.as_deref(), *jobs, out.as_deref(), *quiet),
        Command::Compare { a, b } => cmd_compare(a, b),
        Command::GenData { cfg, seed, out } => cmd_gen_data(cfg, *seed, out),
        Command::BenchCorrupt { cfg, seed, out } => cmd_bench_corrupt(cfg, *seed, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
