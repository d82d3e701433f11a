//! End-to-end checks of the command-line surface: exit codes, report
//! round-trips, ablation artifacts, and the weights file.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sherl_core::report::RunReport;

fn sherl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sherl"))
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("sherl-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("temp dir");
    dir
}

const BASE_CONFIG: &str = "\
[backbone]
family = transformer
layers = 3
model_dim = 16
heads = 4
seq_len = 5
input_dim = 12
seed = 7

[task]
kind = token_pattern
classes = 3
train = 24
val = 8
test = 8
angle = 0.5
remap = false
noise = 0.05
stress = true
seed = 11

[strategy]
kind = sherl
aggregator = mtsa
reduction = 4

[train]
learning_rate = 3e-3
epochs = 1
batch_size = 8
warmup = none
adam_beta1 = 0.9
adam_beta2 = 0.999
weight_decay = 1e-2
seed = 1
";

fn write_config(dir: &Path, name: &str, contents: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, contents).expect("write config");
    p
}

fn run_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn missing_field_exits_2_and_names_it() {
    let dir = tmp_dir("badcfg");
    let broken = BASE_CONFIG.replace("classes = 3\n", "");
    let cfg = write_config(&dir, "bad.cfg", &broken);
    let out = sherl()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("classes"), "{stderr}");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn unknown_verify_suite_exits_2() {
    let out = sherl().args(["verify", "--suite", "vibes"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invariant_suite_passes_with_per_check_lines() {
    let out = sherl().args(["verify", "--suite", "invariants"]).output().unwrap();
    run_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.matches("[pass]").count() >= 5, "{stdout}");
    assert!(!stdout.contains("[FAIL]"), "{stdout}");
}

#[test]
fn run_writes_valid_report_and_reruns_bit_identically() {
    let dir = tmp_dir("run");
    let cfg = write_config(&dir, "run.cfg", BASE_CONFIG);
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for out in [&out_a, &out_b] {
        let res = sherl()
            .args(["run", "--config"])
            .arg(&cfg)
            .args(["--seed", "42", "--out"])
            .arg(out)
            .output()
            .unwrap();
        run_ok(&res);
    }
    let ja = std::fs::read_to_string(out_a.join("report.json")).unwrap();
    let jb = std::fs::read_to_string(out_b.join("report.json")).unwrap();
    let ra = RunReport::from_json(&ja).expect("report re-validates against the schema");
    let rb = RunReport::from_json(&jb).unwrap();
    assert_eq!(ra.metrics_json(), rb.metrics_json(), "metrics must be byte-identical");
    assert_eq!(ra.config.train.seed, 42, "--seed must override the config");
    // The report self-describes its configuration.
    assert_eq!(ra.config.backbone.n_layers, 3);
    assert_eq!(ra.config.task.n_classes, 3);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn report_fields_match_published_schema() {
    let dir = tmp_dir("schema");
    let cfg = write_config(&dir, "run.cfg", BASE_CONFIG);
    let res = sherl()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    run_ok(&res);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    let schema: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(
            Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas/run_report.schema.json"),
        )
        .unwrap(),
    )
    .unwrap();
    let required = schema["required"].as_array().unwrap();
    for key in required {
        assert!(
            report.get(key.as_str().unwrap()).is_some(),
            "report missing required key {key}"
        );
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn divergent_run_exits_3() {
    let dir = tmp_dir("diverge");
    let broken = BASE_CONFIG
        .replace("learning_rate = 3e-3", "learning_rate = 1e30")
        .replace("epochs = 1", "epochs = 4");
    let cfg = write_config(&dir, "diverge.cfg", &broken);
    let out = sherl()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("divergence"), "{stderr}");
    std::fs::remove_dir_all(&dir).ok();
}

fn csv_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(str::to_string)
        .collect()
}

#[test]
fn single_cell_ablation_yields_one_csv_row() {
    let dir = tmp_dir("ab1");
    let cfg_text = format!("{BASE_CONFIG}\n[ablate]\nstrategies = sherl:mtsa\n");
    let cfg = write_config(&dir, "ab.cfg", &cfg_text);
    let out = sherl()
        .args(["ablate", "--config"])
        .arg(&cfg)
        .args(["--seeds", "1", "--out"])
        .arg(&dir)
        .output()
        .unwrap();
    run_ok(&out);
    assert_eq!(csv_rows(&dir.join("ablate.csv")).len(), 1);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn reduction_sweep_emits_four_points_with_decreasing_params() {
    let dir = tmp_dir("sweep");
    let cfg_text = format!("{BASE_CONFIG}\n[ablate]\nreductions = 16,8,4,2\n");
    let cfg = write_config(&dir, "sweep.cfg", &cfg_text);
    let out = sherl()
        .args(["ablate", "--config"])
        .arg(&cfg)
        .args(["--seeds", "1", "--out"])
        .arg(&dir)
        .env("SHERL_THREADS", "2")
        .output()
        .unwrap();
    run_ok(&out);
    let rows = csv_rows(&dir.join("ablate.csv"));
    assert_eq!(rows.len(), 4);
    // Column 7 is trainable_scalars; r shrinks down the rows, params grow.
    let params: Vec<usize> = rows
        .iter()
        .map(|r| r.split(',').nth(7).unwrap().parse().unwrap())
        .collect();
    for w in params.windows(2) {
        assert!(w[0] < w[1], "{params:?}");
    }
    // The plot is well-formed and carries one marker per CSV row.
    let svg = std::fs::read_to_string(dir.join("ablate.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<circle").count(), rows.len());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn backbone_command_writes_loadable_weights() {
    let dir = tmp_dir("weights");
    let wpath = dir.join("bb.shrl");
    let out = sherl()
        .args([
            "backbone",
            "--family",
            "transformer",
            "--layers",
            "3",
            "--drop",
            "0,1",
            "--seed",
            "7",
            "--model-dim",
            "16",
            "--heads",
            "4",
            "--seq-len",
            "5",
            "--input-dim",
            "12",
            "--out",
        ])
        .arg(&wpath)
        .output()
        .unwrap();
    run_ok(&out);
    let bytes = std::fs::read(&wpath).unwrap();
    assert_eq!(&bytes[..4], b"SHRL");
    let entries = sherl_core::weights::parse(&bytes).unwrap();
    assert!(entries.iter().any(|(n, _)| n == "layer.0.wq"));

    // A run can consume the file (backbone params come from disk).
    let cfg_text = BASE_CONFIG.replace("seed = 7\n", "seed = 7\nweights = bb.shrl\n");
    let cfg = write_config(&dir, "wrun.cfg", &cfg_text);
    let res = sherl()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    run_ok(&res);
    std::fs::remove_dir_all(&dir).ok();
}
