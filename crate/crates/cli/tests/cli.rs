use std::fs;
use std::path::Path;
use std::process::Command;

use metaplast::data::{write_split, DatasetSplit, IdxImages, Split};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_metaplast"));
    c.env("RUST_LOG", "warn");
    c
}

fn tiny_split(n: usize, shift: usize) -> DatasetSplit {
    let mut pixels = vec![0u8; n * 784];
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    for (i, &l) in labels.iter().enumerate() {
        let p = 28 * (2 + 2 * l as usize) + 4 + shift;
        pixels[i * 784 + p..i * 784 + p + 8].fill(255);
    }
    DatasetSplit::from_parts("t", IdxImages { count: n, rows: 28, cols: 28, pixels }, labels).unwrap()
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    for (name, shift) in [("a", 0), ("b", 10)] {
        let d = dir.join(name);
        write_split(&d, Split::Train, &tiny_split(60, shift)).unwrap();
        write_split(&d, Split::Test, &tiny_split(20, shift)).unwrap();
    }
    let text = format!(
        r#"seed = 4
output_dir = "{out}"

[model]
hidden = [8]

[grid]
kind = "device"

[train]
eta = 0.02
batch_size = 10
m_star = 3.0
pretrain_epochs = 1
weight_source = "crossbar"
{extra}

[[tasks]]
name = "mnist"
dir = "{a}"
epochs = 2

[[tasks]]
name = "fmnist"
dir = "{b}"
epochs = 1
"#,
        out = dir.join("run").display(),
        a = dir.join("a").display(),
        b = dir.join("b").display(),
    );
    let path = dir.join("exp.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn train_hist_and_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = bin().arg("train").arg("--config").arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "epoch,task,acc_mnist,acc_fmnist,cum_ops");
    assert_eq!(metrics.lines().count(), 4);

    let hist = bin().arg("hist-ops").arg(run.join("devices-final.tsv")).output().unwrap();
    assert!(hist.status.success());
    let csv = String::from_utf8(hist.stdout).unwrap();
    assert!(csv.starts_with("ops_lo,ops_hi,devices,percent_devices\n"));
    let total: f64 = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 100.0).abs() < 0.01);

    let last = metrics.lines().last().unwrap().split(',').collect::<Vec<_>>();
    let eval = bin()
        .args(["eval", "--checkpoint"])
        .arg(run.join("final.ckpt"))
        .arg("--config")
        .arg(&cfg)
        .arg("--devices")
        .arg(run.join("devices-final.tsv"))
        .output()
        .unwrap();
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let stdout = String::from_utf8(eval.stdout).unwrap();
    assert!(stdout.contains(&format!("mnist: {}%", last[2])), "{stdout}");
    assert!(stdout.contains(&format!("fmnist: {}%", last[3])), "{stdout}");
}

#[test]
fn invalid_config_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let text = fs::read_to_string(&cfg).unwrap().replace("batch_size = 10", "batch_size = 0");
    fs::write(&cfg, text).unwrap();
    let out = bin().arg("train").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_size"));

    let unknown = write_config(dir.path(), "momentum = 0.9");
    let out = bin().arg("train").arg("--config").arg(&unknown).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_rejects_empty_value_list() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = bin().args(["sweep", "--values", ""]).arg("--config").arg(&cfg).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn hist_ops_requires_readable_dumps() {
    let out = bin().args(["hist-ops", "/nonexistent/dump.tsv"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = bin().arg("hist-ops").output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn print_config_emits_preset() {
    let out = bin().args(["train", "--preset", "full", "--print-config"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let parsed = metaplast::harness::ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(parsed.model.hidden, vec![512, 512]);
}
