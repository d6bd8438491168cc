use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adamct_cli::config::load_config;
use tempfile::TempDir;

fn adamct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adamct")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn preset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("presets").join(format!("{name}.toml"))
}

const SMALL: &str = r#"
[data]
seed = 3

[data.synthetic]
num_users = 30
num_items = 20
pattern = "cyclic"
min_len = 6
max_len = 10

[model]
d_model = 8
num_heads = 2
max_len = 8

[train]
max_epochs = 3
batch_size = 16
lr = 0.005

[eval]
num_negatives = 8
"#;

fn write_config(dir: &TempDir, body: &str) -> String {
    let path = dir.path().join("run.toml");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_artifacts_and_reruns_identically() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = adamct(&["train", "--config", &cfg, "--out", s(out), "--deterministic"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let stdout = String::from_utf8_lossy(&o.stdout);
        assert!(stdout.starts_with("split,num_users,recall@1"), "{stdout}");
    }
    for f in [
        "config.toml",
        "checkpoint.bin",
        "history.json",
        "history.csv",
        "coefficients.csv",
        "metrics_test.json",
        "metrics_test.csv",
        "stats.json",
    ] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    for f in ["history.csv", "checkpoint.bin", "coefficients.csv", "metrics_test.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let history = fs::read_to_string(a.join("history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("epoch,loss,val_ndcg10,val_recall10,lr"));
    assert_eq!(history.lines().count(), 4);

    // The resolved config records the catalog size taken from the data.
    let resolved = fs::read_to_string(a.join("config.toml")).unwrap();
    assert!(resolved.contains("num_items = 20"), "{resolved}");

    let eval_dir = dir.path().join("eval");
    let ckpt = a.join("checkpoint.bin");
    let o = adamct(&["evaluate", "--config", &cfg, "--checkpoint", s(&ckpt), "--out", s(&eval_dir)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read(eval_dir.join("metrics_test.json")).unwrap(),
        fs::read(a.join("metrics_test.json")).unwrap()
    );
    let o = adamct(&["evaluate", "--config", &cfg, "--checkpoint", s(&ckpt), "--out", s(&eval_dir), "--split", "valid"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(eval_dir.join("metrics_valid.csv").is_file());

    // A checkpoint evaluated against a different architecture is refused.
    let other = write_config(&dir, &SMALL.replace("d_model = 8", "d_model = 16"));
    let o = adamct(&["evaluate", "--config", &other, "--checkpoint", s(&ckpt), "--out", s(&eval_dir)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("d_model"), "{}", stderr(&o));
}

#[test]
fn missing_data_file_exits_3() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "[data]\npath = \"nowhere.csv\"\n");
    let o = adamct(&["train", "--config", &cfg, "--out", s(dir.path())]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("nowhere.csv"));
}

#[test]
fn bad_configs_exit_2() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "[data]\npath = \"x.csv\"\n[model]\nd_model = 30\nnum_heads = 4\n");
    let o = adamct(&["train", "--config", &cfg]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("model.d_model (30) must be divisible by num_heads (4)"), "{}", stderr(&o));

    let cfg = write_config(&dir, "[train]\nlearning_rate = 0.1\n");
    let o = adamct(&["train", "--config", &cfg]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    let o = adamct(&["train", "--config", s(&dir.path().join("absent.toml"))]);
    assert_eq!(code(&o), 2);
    let o = adamct(&["train"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_reports_every_tensor_and_catches_faults() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("gc");
    let o = adamct(&["gradcheck", "--config", s(&preset("gradcheck")), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    let rows: Vec<&str> = stdout.lines().skip(1).take_while(|l| !l.is_empty()).collect();
    assert!(rows[0].starts_with("embedding.item"), "{stdout}");
    assert!(rows[1].starts_with("embedding.position"));
    assert!(rows.last().unwrap().starts_with("head."));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report["tensors"].as_array().unwrap().len(), rows.len());

    let o = adamct(&["gradcheck", "--config", s(&preset("gradcheck")), "--out", s(&out), "--inject-fault", "unfold"]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("gradient check failed") && err.contains("conv"), "{err}");
}

#[test]
fn stats_prints_and_writes_columns() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("ratings.csv");
    let mut rows = String::new();
    for u in 0..3 {
        for t in 0..5 {
            rows += &format!("u{u}\ti{}\t5\t{t}\n", (u + t) % 4);
        }
    }
    rows += "u9\ti0\t5\t1\n";
    fs::write(&data, rows).unwrap();
    let cfg = write_config(&dir, "[data]\npath = \"ratings.csv\"\ndelimiter = \"\\t\"\ncolumns = [0, 1, 3]\n");
    let out = dir.path().join("st");
    let o = adamct(&["stats", "--config", &cfg, "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stats: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stats["interactions"], 15);
    assert_eq!(stats["users"], 3);
    assert_eq!(stats["items"], 4);
    let csv = fs::read_to_string(out.join("stats.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("interactions,users,items,avg_user_len,avg_item_len,sparsity"));
}

#[test]
fn ablation_grids_have_fixed_shapes() {
    let dir = TempDir::new().unwrap();
    let tiny = SMALL.replace("max_epochs = 3", "max_epochs = 1");
    let cfg = write_config(&dir, &tiny);
    let out = dir.path().join("abl");
    for (grid, rows) in [("mixture", 6), ("seatt", 4), ("components", 5)] {
        let o = adamct(&["ablate", "--config", &cfg, "--out", s(&out), "--grid", grid, "--seeds", "1,2"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let csv = fs::read_to_string(out.join(format!("ablate_{grid}")).join("report.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), rows + 1, "{csv}");
        assert!(lines[0].contains("ndcg10_seed1") && lines[0].contains("recall10_seed2"));
        assert!(lines[1..].iter().all(|l| l.ends_with(",ok")), "{csv}");
    }
    let o = adamct(&["ablate", "--config", &cfg, "--out", s(&out), "--grid", "nope"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn presets_load() {
    for name in ["toys", "beauty", "sports", "cyclic", "uniform", "gradcheck"] {
        let cfg = load_config(&preset(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        if ["toys", "beauty", "sports"].contains(&name) {
            assert_eq!(cfg.model.max_len, 50);
            assert_eq!(cfg.train.batch_size, 2048);
            assert_eq!(cfg.train.patience, 20);
            assert_eq!(cfg.data.columns, [0, 1, 3]);
        }
    }
}
