use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rvsa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rvsa")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn verify_reports_json_and_writes_report_file() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let o = rvsa(&["verify", "--seed", "3", "--report", report.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["seed"], 3);
    assert_eq!(v["passed"], true);
    assert_eq!(fs::read_to_string(report).unwrap(), stdout(&o));
}

#[test]
fn injected_sampling_fault_fails_verify() {
    let o = rvsa(&["verify", "--inject-fault", "sampling-weights"]);
    assert_eq!(o.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let failed: Vec<&str> =
        v["checks"].as_array().unwrap().iter().filter(|c| c["passed"] == false).map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(failed, ["sampling_oracle"]);
}

#[test]
fn verify_in_32_bit_mode() {
    let o = rvsa(&["verify", "--precision", "32"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("\"precision\": 32"));
    assert_eq!(rvsa(&["verify", "--precision", "16"]).status.code(), Some(2));
}

#[test]
fn flops_csv_states_convention_and_sums() {
    let o = rvsa(&["flops", "--preset", "vit-b", "--tokens", "64x64", "--variant", "rvsa"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("# flops: multiply = 1, add = 1"));
    let rows: Vec<Vec<&str>> = text.lines().skip(2).map(|l| l.split(',').collect()).collect();
    let (layers, total) = rows.split_at(rows.len() - 1);
    assert_eq!(layers.len(), 14);
    let sum: u128 = layers.iter().map(|r| r[1].parse::<u128>().unwrap()).sum();
    assert_eq!(total[0][1].parse::<u128>().unwrap(), sum);
    assert_eq!(rvsa(&["flops", "--preset", "vit-b", "--tokens", "64", "--variant", "rvsa"]).status.code(), Some(2));
    assert_eq!(rvsa(&["flops", "--preset", "huge", "--tokens", "8x8", "--variant", "rvsa"]).status.code(), Some(2));
}

#[test]
fn bench_emits_csv() {
    let o = rvsa(&["bench", "--preset", "desk", "--repeat", "1", "--tokens", "7x7"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("preset,tokens,precision,component,variant,pass,repeat,mean_us,min_us,max_us\n"));
    assert_eq!(text.lines().count(), 1 + 12);
}

#[test]
fn gradcheck_module_and_unknown_module() {
    let o = rvsa(&["gradcheck", "--module", "bilinear"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("PASS"));
    assert_eq!(rvsa(&["gradcheck", "--module", "nonexistent"]).status.code(), Some(2));
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("toy.ini");
    fs::write(
        &path,
        format!(
            "[model]\nembed_dim = 16\nheads = 2\n\n[train]\nsteps = 3\nbatch_size = 2\n\n[data]\ncount = 4\n\n\
             [output]\nloss_csv = run/loss.csv\ncheckpoint = run/encoder\n{extra}"
        ),
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn pretrain_then_visualize() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = rvsa(&["pretrain-toy", "--config", &cfg, "--seed", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["steps"], 3);
    assert_eq!(fs::read_to_string(dir.path().join("run/loss.csv")).unwrap().lines().count(), 4);

    let mut img = String::from("P2\n32 32\n255\n");
    for i in 0..32 * 32 {
        img.push_str(&format!("{}\n", (i * 13) % 256));
    }
    let image = dir.path().join("img.pgm");
    fs::write(&image, img).unwrap();
    let ckpt = dir.path().join("run/encoder");
    let out = dir.path().join("viz");
    let args = |layer: &'static str| {
        vec![
            "viz".to_string(),
            "--ckpt".into(),
            ckpt.to_str().unwrap().into(),
            "--image".into(),
            image.to_str().unwrap().into(),
            "--layer".into(),
            layer.into(),
            "--out".into(),
            out.to_str().unwrap().into(),
        ]
    };
    let run = |a: Vec<String>| Command::new(env!("CARGO_BIN_EXE_rvsa")).args(a).output().unwrap();
    assert!(run(args("1")).status.success());
    assert!(out.join("layer1_geometry.csv").exists() && out.join("layer1_geometry.svg").exists());
    assert_eq!(run(args("7")).status.code(), Some(2));
}

#[test]
fn config_errors_exit_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "colour = blue\n");
    let o = rvsa(&["pretrain-toy", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key `colour`"));
}
