use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
samples_per_class = 6
points = 256
classes = ["sphere", "box", "torus"]

[model]
embed_dim = 32
encoder_depth = 2
decoder_depth = 1
heads = 4
mlp_ratio = 2
patch_count = 8
patch_size = 16
embed_hidden = [32, 64]
pe_hidden = 32

[train]
epochs = 2
batch_size = 8

[finetune]
epochs = 2

[probe]
epochs = 1

[vis]
samples = 2
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_masksurf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path
}

fn run_json(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("run.json")).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn seeded_pretrain_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let dirs = [tmp.path().join("a"), tmp.path().join("b")];
    for d in &dirs {
        let out = run(&["pretrain", "--config", s(&cfg), "--set", "train.seed=7", "--out", s(d)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["checkpoint.bin", "metrics.csv"] {
        assert!(fs::read(dirs[0].join(f)).unwrap() == fs::read(dirs[1].join(f)).unwrap(), "{f} differs");
    }
    let rec = run_json(&dirs[0]);
    assert_eq!(rec["status"], "ok");
    assert_eq!(rec["seed"], 7);
    assert_eq!(rec["config"]["train"]["epochs"], "2");
    assert!(rec.get("error").is_none());
}

#[test]
fn unknown_override_fails_with_an_error_record() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["pretrain", "--set", "train.epoch=3", "--out", s(tmp.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.epoch"));
    let rec = run_json(tmp.path());
    assert_eq!(rec["status"], "error");
    assert!(rec["error"].as_str().unwrap().contains("train.epoch"));
}

#[test]
fn config_errors_name_the_line_or_key() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[train]\nepochs = 2\nbatch_size = = 3\n").unwrap();
    let out = run(&["param-count", "--config", s(&bad)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    fs::write(&bad, "[model]\nwidth = 3\n").unwrap();
    let out = run(&["param-count", "--config", s(&bad)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.width"));
}

#[test]
fn successful_runs_write_no_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["param-count", "--set", "model.preset=paper", "--out", s(tmp.path())]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("(28.7M)") && text.contains("(22.0M)") && text.contains("0.13%"), "{text}");
    let rec = run_json(tmp.path());
    assert_eq!(rec["status"], "ok");
    assert_eq!(rec["result"]["pretrain"], 28681152);
}

#[test]
fn missing_out_dir_is_an_error() {
    let out = run(&["pretrain", "--set", "train.epochs=1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
}

#[test]
fn gradcheck_reports_the_max_error() {
    let out = run(&["gradcheck"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    let last = text.lines().last().unwrap();
    assert!(last.starts_with("max relative error") && last.ends_with("PASS"), "{last}");
}

#[test]
fn downstream_commands_consume_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let pre = tmp.path().join("pre");
    assert!(run(&["pretrain", "--config", s(&cfg), "--out", s(&pre)]).status.success());
    let ck = pre.join("checkpoint.bin");

    let ft = tmp.path().join("ft");
    let out = run(&["finetune", "--config", s(&cfg), "--checkpoint", s(&ck), "--out", s(&ft)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let acc = run_json(&ft)["result"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(ft.join("finetune.bin").exists());

    let pr = tmp.path().join("probe");
    let out = run(&["probe", "--config", s(&cfg), "--checkpoint", s(&ck), "--out", s(&pr)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run_json(&pr)["result"]["l_n"].as_f64().unwrap() > 0.0);

    let fs_dir = tmp.path().join("fewshot");
    let out = run(&[
        "fewshot", "--config", s(&cfg), "--checkpoint", s(&ck), "--out", s(&fs_dir),
        "-s", "fewshot.n_way=2", "-s", "fewshot.m_shot=2", "-s", "fewshot.query_per_class=2",
        "-s", "fewshot.trials=2", "-s", "fewshot.epochs=1", "-s", "fewshot.protocol=linear_frozen",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains('±'));

    let vis = tmp.path().join("vis");
    let out = run(&["export-vis", "--config", s(&cfg), "--checkpoint", s(&ck), "--out", s(&vis)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for suffix in ["input", "visible", "pred_points", "pred_surfels"] {
        assert!(vis.join(format!("sample001_{suffix}.ply")).exists(), "{suffix}");
    }
    let ply = fs::read_to_string(vis.join("sample000_pred_surfels.ply")).unwrap();
    assert!(ply.contains("property double angular_error"));
    let (header, body) = ply.split_once("end_header\n").unwrap();
    let count: usize = header
        .lines()
        .find_map(|l| l.strip_prefix("element vertex "))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(body.lines().count(), count);
    for line in body.lines() {
        let v: Vec<f64> = line.split(' ').map(|t| t.parse().unwrap()).collect();
        assert!((0.0..=90.0).contains(&v[6]));
        assert_eq!(v[7], if v[6] <= 30.0 { 1.0 } else { 0.0 });
    }

    // A fine-tuned checkpoint seeds further fine-tuning but has no decoder to export.
    let out = run(&["finetune", "--config", s(&cfg), "--checkpoint", s(&ft.join("finetune.bin")), "-s", "finetune.protocol=transfer_all", "--out", s(&tmp.path().join("ft2"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&["export-vis", "--config", s(&cfg), "--checkpoint", s(&ft.join("finetune.bin")), "--out", s(&tmp.path().join("v2"))]);
    assert!(!out.status.success());
}

#[test]
fn ablate_writes_one_row_per_configuration() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out_dir = tmp.path().join("ablate");
    let out = run(&[
        "ablate", "--config", s(&cfg), "--out", s(&out_dir),
        "-s", "ablate.sweeps=mask_strategy,alpha", "-s", "ablate.alphas=0,0.01", "-s", "train.epochs=1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "sweep,value,pretrain_l_all,probe_l_p,probe_l_n,accuracy");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("mask_strategy,random,"));
    assert!(lines[4].starts_with("alpha,0.01,"));
    for l in &lines[1..] {
        assert!(l.split(',').skip(2).all(|f| f.parse::<f64>().is_ok()), "{l}");
    }
}

#[test]
fn gen_data_writes_every_sample() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out_dir = tmp.path().join("data");
    assert!(run(&["gen-data", "--config", s(&cfg), "--out", s(&out_dir)]).status.success());
    let manifest = fs::read_to_string(out_dir.join("manifest.csv")).unwrap();
    let rows: Vec<&str> = manifest.lines().skip(1).collect();
    assert_eq!(rows.len(), 18);
    for r in rows {
        let path = r.split(',').nth(3).unwrap();
        let text = fs::read_to_string(out_dir.join(path)).unwrap();
        assert_eq!(text.lines().count(), 256);
    }
}
