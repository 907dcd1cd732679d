use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "task": {"num_classes": 4, "num_old": 2, "samples_per_class": 6, "patch_count": 4, "input_dim": 3},
  "encoder": {"num_layers": 2, "patch_count": 4, "input_dim": 3, "token_dim": 8, "head_count": 2,
              "proj_dim": 4, "critic_hidden": 4, "k_s": 4},
  "train": {"epochs": 2, "eval_every": 1, "batch_size": 8},
  "curriculum": {"switch_epoch": 1},
  "seeds": [0]
}"#;

fn hilo(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hilo"));
    cmd.args(args).env_remove("HILO_OUT_DIR");
    if let Some(dir) = env_out {
        cmd.env("HILO_OUT_DIR", dir);
    }
    cmd.output().expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.json");
    std::fs::write(&path, TINY).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn run_writes_outputs_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let o = hilo(
            &["run", "--config", &cfg, "--mode", "both", "--jobs", "1", "--quiet", "--out", out.to_str().unwrap()],
            None,
        );
        assert!(o.status.success(), "{}", text(&o.stderr));
        assert!(text(&o.stdout).contains("unseen acc_all"));
    }
    let csv_a = std::fs::read(out_a.join("metrics.csv")).unwrap();
    assert_eq!(csv_a, std::fs::read(out_b.join("metrics.csv")).unwrap());
    let csv = text(&csv_a);
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("simgcd,0,1,"));

    let o = hilo(
        &["compare", out_a.join("report.json").to_str().unwrap(), out_b.join("report.json").to_str().unwrap()],
        None,
    );
    assert!(o.status.success(), "{}", text(&o.stderr));
    let table = text(&o.stdout);
    assert!(table.starts_with("run_a,run_b,metric,a,b,delta"));
    assert!(table.lines().skip(1).all(|l| l.ends_with(",0.000000") || l.ends_with(",-0.000000")));
}

#[test]
fn env_var_sets_the_default_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let env_dir = dir.path().join("from_env");
    let o = hilo(&["run", "--config", &cfg, "--quiet", "--set", "train.epochs=1", "--set", "curriculum.switch_epoch=0"], Some(&env_dir));
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(env_dir.join("report.json").exists());
    assert!(env_dir.join("metrics.csv").exists());
}

#[test]
fn bad_input_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("never");
    let o = hilo(&["run", "--config", &cfg, "--set", "train.warmup=3", "--out", out.to_str().unwrap()], None);
    assert!(!o.status.success());
    assert!(text(&o.stderr).contains("warmup"), "{}", text(&o.stderr));
    assert!(!out.exists());

    let o = hilo(&["run", "--config", &cfg, "--mode", "simgcd", "--ablation", "no_mi"], None);
    assert!(!o.status.success());
    let o = hilo(&["run", "--config", "/nonexistent/cfg.json"], None);
    assert!(!o.status.success());
    let o = hilo(&["compare", "/nonexistent/a.json", "/nonexistent/b.json"], None);
    assert!(!o.status.success());
}

#[test]
fn reports_from_different_tasks_do_not_compare() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let base = ["run", "--config", &cfg, "--quiet", "--set", "train.epochs=1", "--set", "curriculum.switch_epoch=0"];
    let mut args_a = base.to_vec();
    args_a.extend(["--out", a.to_str().unwrap()]);
    assert!(hilo(&args_a, None).status.success());
    let mut args_b = base.to_vec();
    args_b.extend(["--set", "task.style_strength=0.5", "--out", b.to_str().unwrap()]);
    assert!(hilo(&args_b, None).status.success());
    let o = hilo(&["compare", a.join("report.json").to_str().unwrap(), b.join("report.json").to_str().unwrap()], None);
    assert!(!o.status.success());
    assert!(text(&o.stderr).contains("different tasks"));
}

#[test]
fn gen_data_and_bench_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data.txt");
    let o = hilo(&["gen-data", "--config", &cfg, "--seed", "3", "--out", data.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let loaded = hilo_core::synthdata::Dataset::load(&data).unwrap();
    assert_eq!(loaded.len(), 4 * 6 * 2);

    let table = dir.path().join("corrupt.csv");
    let o = hilo(&["bench-corrupt", "--config", &cfg, "--out", table.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let csv = std::fs::read_to_string(&table).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 * 5);
    assert!(csv.starts_with("kind,severity,mse\ngaussian,1,"));
}
