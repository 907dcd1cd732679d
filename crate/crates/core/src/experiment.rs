//! Experiment orchestration: configuration schema, multi-seed runs, metric
//! files and report comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::bounds::BoundsConfig;
use crate::curriculum::CurriculumConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::patchmix::PatchMixConfig;
use crate::synthdata::{generate, TaskConfig};
use crate::trainer::{evaluate, Ablations, EpochStats, EvalReport, Trainer};

/// Environment variable naming the default output root.
pub const OUT_DIR_ENV: &str = "HILO_OUT_DIR";

/// Everything a run needs. Unknown keys are rejected at every level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub patchmix: PatchMixConfig,
    pub curriculum: CurriculumConfig,
    pub train: crate::trainer::TrainConfig,
    pub bounds: BoundsConfig,
    pub output_dir: Option<PathBuf>,
    /// Each seed generates its own task instance (`task.seed + seed`) and
    /// initialization.
    pub seeds: Vec<u64>,
    /// Named presets to run (see [`Ablations::preset`]); empty runs
    /// `train.mode` with `train.ablations` as given.
    pub runs: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskConfig::default(),
            encoder: EncoderConfig::default(),
            loss: LossConfig::default(),
            patchmix: PatchMixConfig::default(),
            curriculum: CurriculumConfig::default(),
            train: crate::trainer::TrainConfig::default(),
            bounds: BoundsConfig::default(),
            output_dir: None,
            seeds: (0..5).collect(),
            runs: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(text)?)
    }

    pub fn from_value(v: Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Reads `path` (or the defaults), applies `key.path=value` overrides and
    /// validates the result.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut v = match path {
            Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
            None => serde_json::to_value(Self::default())?,
        };
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        Self::from_value(v)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.encoder.validate()?;
        self.loss.validate()?;
        self.patchmix.validate()?;
        self.curriculum.validate(self.train.epochs)?;
        self.train.validate()?;
        self.bounds.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.encoder.patch_count != self.task.patch_count || self.encoder.input_dim != self.task.input_dim {
            return Err(Error::Config("encoder patch_count/input_dim must match the task".into()));
        }
        if self.encoder.k_s < self.task.num_classes {
            return Err(Error::Config(format!(
                "encoder.k_s = {} cannot cover {} classes",
                self.encoder.k_s, self.task.num_classes
            )));
        }
        for r in &self.runs {
            if Ablations::preset(r).is_none() {
                return Err(Error::Config(format!("unknown run preset {r:?}")));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = self.runs.iter().find(|r| !seen.insert(r.as_str())) {
            return Err(Error::Config(format!("run {dup:?} listed twice")));
        }
        Ok(())
    }

    /// `(name, train config)` of every requested run.
    pub fn run_specs(&self) -> Vec<(String, crate::trainer::TrainConfig)> {
        if self.runs.is_empty() {
            let name = if self.train.ablations.is_empty() {
                self.train.mode.name().to_string()
            } else {
                "custom".to_string()
            };
            return vec![(name, self.train.clone())];
        }
        self.runs
            .iter()
            .map(|r| {
                let (mode, ablations) = Ablations::preset(r).expect("validated preset");
                let train = crate::trainer::TrainConfig {
                    mode,
                    ablations,
                    ..self.train.clone()
                };
                (r.clone(), train)
            })
            .collect()
    }

    /// SHA-256 of the task section, identifying the data a report was made on.
    pub fn task_hash(&self) -> String {
        let text = serde_json::to_string(&self.task).expect("task config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// Sets `a.b.c=value` in a JSON tree. The value is read as JSON when it
/// parses and as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override path {path:?}")));
    }
    let mut node = root;
    for k in &keys[..keys.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override path {path:?} crosses a non-object")))?;
        node = obj.entry(k.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("override path {path:?} crosses a non-object")))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// One evaluation point of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run: String,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub l_s: f64,
    pub l_d: f64,
    pub l_m: f64,
    pub delta_s: f64,
    pub delta_d: f64,
    pub seen_all: f64,
    pub seen_old: f64,
    pub seen_new: f64,
    pub unseen_all: f64,
    pub unseen_old: f64,
    pub unseen_new: f64,
    pub labelled_acc: f64,
    pub d_hat: f64,
    pub mi_estimate: f64,
    pub thm1_rhs: f64,
    pub thm2_rhs: f64,
    pub e_u: f64,
    pub thm1_slack: f64,
    pub thm2_slack: f64,
}

/// Column order of `metrics.csv` after `run,seed,epoch`.
pub const METRIC_COLUMNS: [&str; 21] = [
    "lr",
    "loss",
    "l_s",
    "l_d",
    "l_m",
    "delta_s",
    "delta_d",
    "seen_all",
    "seen_old",
    "seen_new",
    "unseen_all",
    "unseen_old",
    "unseen_new",
    "labelled_acc",
    "d_hat",
    "mi_estimate",
    "thm1_rhs",
    "thm2_rhs",
    "e_u",
    "thm1_slack",
    "thm2_slack",
];

impl MetricRow {
    pub fn new(run: &str, seed: u64, stats: &EpochStats, eval: &EvalReport) -> Self {
        let b = &eval.bounds;
        Self {
            run: run.to_string(),
            seed,
            epoch: stats.epoch + 1,
            lr: stats.lr,
            loss: stats.mean.total,
            l_s: stats.mean.l_s,
            l_d: stats.mean.l_d,
            l_m: stats.mean.l_m,
            delta_s: stats.mean.delta_s,
            delta_d: stats.mean.delta_d,
            seen_all: eval.seen.acc_all,
            seen_old: eval.seen.acc_old,
            seen_new: eval.seen.acc_new,
            unseen_all: eval.unseen.acc_all,
            unseen_old: eval.unseen.acc_old,
            unseen_new: eval.unseen.acc_new,
            labelled_acc: eval.labelled_acc,
            d_hat: b.d_hat,
            mi_estimate: b.mi_estimate,
            thm1_rhs: b.thm1_rhs,
            thm2_rhs: b.thm2_rhs,
            e_u: b.e_u,
            thm1_slack: b.thm1_slack,
            thm2_slack: b.thm2_slack,
        }
    }

    /// Values in [`METRIC_COLUMNS`] order.
    pub fn values(&self) -> [f64; 21] {
        [
            self.lr,
            self.loss,
            self.l_s,
            self.l_d,
            self.l_m,
            self.delta_s,
            self.delta_d,
            self.seen_all,
            self.seen_old,
            self.seen_new,
            self.unseen_all,
            self.unseen_old,
            self.unseen_new,
            self.labelled_acc,
            self.d_hat,
            self.mi_estimate,
            self.thm1_rhs,
            self.thm2_rhs,
            self.e_u,
            self.thm1_slack,
            self.thm2_slack,
        ]
    }
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seeds: Vec<u64>,
    /// Last evaluation row of every seed.
    pub final_rows: Vec<MetricRow>,
    /// Per metric over `final_rows`.
    pub summary: BTreeMap<String, Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub task_hash: String,
    pub runs: BTreeMap<String, RunSummary>,
}

impl ExperimentReport {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn stat(&self, run: &str, metric: &str) -> Result<Stat> {
        self.runs
            .get(run)
            .and_then(|r| r.summary.get(metric))
            .copied()
            .ok_or_else(|| Error::invalid(format!("report has no metric {metric:?} for run {run:?}")))
    }
}

/// Trains one run for one seed, returning its evaluation rows.
pub fn run_single(
    cfg: &ExperimentConfig,
    name: &str,
    train: &crate::trainer::TrainConfig,
    seed: u64,
    progress: &(dyn Fn(&MetricRow) + Sync),
) -> Result<Vec<MetricRow>> {
    let task = TaskConfig {
        seed: cfg.task.seed.wrapping_add(seed),
        ..cfg.task.clone()
    };
    let data = generate(&task)?;
    let mut trainer = Trainer::new(
        &data,
        &cfg.encoder,
        train.clone(),
        cfg.loss.clone(),
        cfg.patchmix,
        cfg.curriculum.clone(),
        seed,
    )?;
    let mut rows = Vec::with_capacity(train.epochs / train.eval_every);
    for t in 0..train.epochs {
        let stats = trainer.train_epoch(&data, t)?;
        if (t + 1) % train.eval_every == 0 {
            let eval = evaluate(&trainer.state, &data, &cfg.bounds)?;
            let row = MetricRow::new(name, seed, &stats, &eval);
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Runs every requested preset for every seed on up to `jobs` threads.
/// Results are ordered by run, then seed, whatever the scheduling.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    jobs: usize,
    progress: &(dyn Fn(&MetricRow) + Sync),
) -> Result<(Vec<MetricRow>, ExperimentReport)> {
    cfg.validate()?;
    let specs = cfg.run_specs();
    let work: Vec<(usize, u64)> = (0..specs.len())
        .flat_map(|r| cfg.seeds.iter().map(move |&s| (r, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(e.to_string()))?;
    let results: Vec<Result<Vec<MetricRow>>> = pool.install(|| {
        use rayon::prelude::*;
        work.par_iter()
            .map(|&(r, s)| run_single(cfg, &specs[r].0, &specs[r].1, s, progress))
            .collect()
    });
    let results: Vec<Vec<MetricRow>> = results.into_iter().collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut runs = BTreeMap::new();
    for (r, (name, _)) in specs.iter().enumerate() {
        let mut finals = Vec::new();
        for ((wr, _), res) in work.iter().zip(&results) {
            if *wr != r {
                continue;
            }
            let seed_rows = res;
            finals.push(seed_rows.last().cloned().ok_or_else(|| Error::invalid("run produced no rows"))?);
            rows.extend(seed_rows.iter().cloned());
        }
        let summary = METRIC_COLUMNS
            .iter()
            .enumerate()
            .map(|(j, m)| {
                let vals: Vec<f64> = finals.iter().map(|row| row.values()[j]).collect();
                (m.to_string(), Stat::of(&vals))
            })
            .collect();
        runs.insert(
            name.clone(),
            RunSummary {
                seeds: cfg.seeds.clone(),
                final_rows: finals,
                summary,
            },
        );
    }
    let report = ExperimentReport {
        config: cfg.clone(),
        task_hash: cfg.task_hash(),
        runs,
    };
    Ok((rows, report))
}

/// `metrics.csv`: header row, then one row per evaluation point; floats have
/// six decimals.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("run,seed,epoch");
    for c in METRIC_COLUMNS {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{},{}", r.run, r.seed, r.epoch);
        for v in r.values() {
            let _ = write!(out, ",{v:.6}");
        }
        out.push('\n');
    }
    out
}

/// Output directory: explicit choice, then the config, then `$HILO_OUT_DIR`,
/// then `hilo-out`.
pub fn resolve_out_dir(explicit: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("hilo-out"))
}

/// Writes `metrics.csv` and `report.json` into `dir`. On failure neither
/// file is left behind.
pub fn write_outputs(dir: &Path, rows: &[MetricRow], report: &ExperimentReport) -> Result<()> {
    let created = !dir.exists();
    let csv = dir.join("metrics.csv");
    let json = dir.join("report.json");
    let attempt = || -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(&csv, metrics_csv(rows))?;
        std::fs::write(&json, serde_json::to_string_pretty(report)? + "\n")?;
        Ok(())
    };
    attempt().inspect_err(|_| {
        let _ = std::fs::remove_file(&csv);
        let _ = std::fs::remove_file(&json);
        if created {
            let _ = std::fs::remove_dir(dir);
        }
    })
}

/// One line of a report comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub run_a: String,
    pub run_b: String,
    pub metric: String,
    pub a: f64,
    pub b: f64,
    /// `b - a`.
    pub delta: f64,
}

/// Per-metric mean differences `b - a`. Runs are paired by name; two
/// single-run reports are paired whatever their names.
pub fn compare(a: &ExperimentReport, b: &ExperimentReport) -> Result<Vec<Delta>> {
    if a.task_hash != b.task_hash {
        return Err(Error::invalid(format!(
            "reports were made on different tasks ({} vs {})",
            a.task_hash, b.task_hash
        )));
    }
    let mut pairs: Vec<(&String, &RunSummary, &String, &RunSummary)> = a
        .runs
        .iter()
        .filter_map(|(name, ra)| b.runs.get(name).map(|rb| (name, ra, name, rb)))
        .collect();
    if pairs.is_empty() && a.runs.len() == 1 && b.runs.len() == 1 {
        let (na, ra) = a.runs.iter().next().expect("one run");
        let (nb, rb) = b.runs.iter().next().expect("one run");
        pairs.push((na, ra, nb, rb));
    }
    if pairs.is_empty() {
        return Err(Error::invalid("reports share no run to compare"));
    }
    let mut out = Vec::new();
    for (na, ra, nb, rb) in pairs {
        let metrics: std::collections::BTreeSet<&String> = ra.summary.keys().chain(rb.summary.keys()).collect();
        for m in metrics {
            let (Some(x), Some(y)) = (ra.summary.get(m), rb.summary.get(m)) else {
                return Err(Error::invalid(format!("metric {m:?} missing from one report")));
            };
            out.push(Delta {
                run_a: na.clone(),
                run_b: nb.clone(),
                metric: m.clone(),
                a: x.mean,
                b: y.mean,
                delta: y.mean - x.mean,
            });
        }
    }
    Ok(out)
}
