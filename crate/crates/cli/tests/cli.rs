use std::path::Path;
use std::process::{Command, Output};

use csattn_core::config::TrainConfig;
use csattn_core::data::{read_png, write_png};
use csattn_core::net::Net;
use csattn_core::Tensor;

const TINY: &str = r#"{
    "patch": 16, "batch": 2, "total_steps": 2, "seed": 4,
    "net": {"base_channels": 4, "blocks_per_level": [1, 1, 1]},
    "data": {"synthetic": {"count": 2, "size": 16}}
}"#;

fn csattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csattn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn count_reports_the_built_parameter_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "{}");
    let csv = dir.path().join("ops.csv");
    let out = csattn(&[
        "count",
        "--config",
        &cfg,
        "--hw",
        "32",
        "48",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");

    let (_, store) = Net::build::<f32>(&TrainConfig::default().net, 0).unwrap();
    let text = stdout(&out);
    assert!(text.contains("input: 32x48"), "{text}");
    assert!(text.contains(&format!("params: {}\n", store.numel())), "{text}");
    assert!(std::fs::read_to_string(csv).unwrap().starts_with("scope,op,macs"));
}

#[test]
fn train_then_infer_keeps_image_size() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    let out = csattn(&["train", "--config", &cfg, "--output-dir", run.to_str().unwrap()]);
    assert!(out.status.success(), "{out:?}");
    assert!(stdout(&out).contains("psnr"));
    assert!(run.join("train_log.csv").exists());

    let input = dir.path().join("in.png");
    let img = Tensor::from_fn(vec![1, 3, 37, 41], |i| (i % 97) as f32 / 96.0);
    write_png(&input, &img).unwrap();
    let output = dir.path().join("out.png");
    let ckpt = run.join("final.csat");
    let out = csattn(&[
        "infer",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--in",
        input.to_str().unwrap(),
        "--out",
        output.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    assert_eq!(read_png(&output).unwrap().shape(), &[1, 3, 37, 41]);

    let svg = dir.path().join("loss.svg");
    let log = format!("{}=tiny", run.join("train_log.csv").display());
    let out = csattn(&["plot", &log, "--out", svg.to_str().unwrap(), "--log-y"]);
    assert!(out.status.success(), "{out:?}");
    assert!(std::fs::read_to_string(svg).unwrap().contains("tiny"));
}

#[test]
fn ablate_writes_one_log_per_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let rows = dir.path().join("rows");
    let out = csattn(&[
        "ablate",
        "--config",
        &cfg,
        "--rows",
        "b,f",
        "--output-dir",
        rows.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    for key in ["b", "f"] {
        assert!(rows.join(key).join("train_log.csv").exists());
    }
    assert_eq!(stdout(&out).lines().count(), 3);

    let out = csattn(&["ablate", "--config", &cfg, "--rows", "b,f", "--cost-only"]);
    let text = stdout(&out);
    let b = text.lines().find(|l| l.starts_with("b,")).unwrap();
    let delta: i64 = b.split(',').nth(3).unwrap().parse().unwrap();
    assert!(delta < 0, "{text}");
}

#[test]
fn gradcheck_tensor_module_passes() {
    let out = csattn(&["gradcheck", "--module", "tensor"]);
    assert!(out.status.success(), "{out:?}");
    let text = stdout(&out);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 3 * 15);
    assert!(text.trim_end().ends_with("0 failed"));
}

#[test]
fn exit_codes() {
    assert_eq!(csattn(&[]).status.code(), Some(2));
    assert_eq!(csattn(&["gradcheck", "--module", "everything"]).status.code(), Some(2));
    assert_eq!(csattn(&["count", "--config"]).status.code(), Some(2));
    assert_eq!(csattn(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    assert_eq!(
        csattn(&["count", "--config", missing.to_str().unwrap()]).status.code(),
        Some(1)
    );
    let cfg = write_config(dir.path(), r#"{"learning_rate": 1}"#);
    let out = csattn(&["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    let cfg = write_config(dir.path(), r#"{"patch": 20}"#);
    assert_eq!(csattn(&["train", "--config", &cfg]).status.code(), Some(1));
}
