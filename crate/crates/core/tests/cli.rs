use std::path::Path;
use std::process::{Command, Output};

use rfssl::config::{ENV_DATA_DIR, ENV_OUT_DIR};

fn rfssl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfssl"))
        .args(args)
        .env(ENV_DATA_DIR, dir.join("data"))
        .env(ENV_OUT_DIR, dir.join("out"))
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = rfssl(
        dir.path(),
        &["synth", "--profile", "smoke", "--config", "/nonexistent/cfg.toml"],
    );
    assert_eq!(o.status.code(), Some(2));
    let o = rfssl(dir.path(), &["synth", "--profile", "tiny"]);
    assert_eq!(o.status.code(), Some(2));
    let o = rfssl(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    let cfg = dir.path().join("noversion.toml");
    std::fs::write(&cfg, "seed = 3\n").unwrap();
    let o = rfssl(
        dir.path(),
        &["synth", "--profile", "smoke", "-c", cfg.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn smoke_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let o = rfssl(d, &["synth", "--profile", "smoke"]);
    assert_ok(&o);
    let first = stdout(&o);
    assert!(first.contains("checksum"));
    assert!(first.contains("wrote"));
    let again = rfssl(d, &["synth", "--profile", "smoke", "--sequential"]);
    assert_ok(&again);
    let checksum = |s: &str| s.lines().next().unwrap().to_string();
    assert_eq!(checksum(&first), checksum(&stdout(&again)));

    let o = rfssl(d, &["pretrain", "--profile", "smoke"]);
    assert_ok(&o);
    assert!(stdout(&o).contains("final loss"));
    let trace = std::fs::read_to_string(d.join("out/pretrain/loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "step,lr,tau,m,loss");
    assert_eq!(trace.lines().count(), 101);

    let o = rfssl(d, &["eval", "--profile", "smoke"]);
    assert_ok(&o);
    let matrix = d.join("out/eval/matrix.json");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&matrix).unwrap()).unwrap();
    assert_eq!(json["cells"].as_array().unwrap().len(), 4);
    for f in ["cells.csv", "comparisons.csv", "data_efficiency.csv", "summary.txt"] {
        assert!(d.join("out/eval").join(f).exists(), "{f}");
    }

    let o = rfssl(
        d,
        &[
            "report",
            "--profile",
            "smoke",
            "--out-dir",
            d.join("rep").to_str().unwrap(),
        ],
    );
    assert_ok(&o);
    assert!(stdout(&o).contains("IMPROVEMENT"));
    assert_eq!(
        std::fs::read_to_string(d.join("rep/cells.csv")).unwrap(),
        std::fs::read_to_string(d.join("out/eval/cells.csv")).unwrap()
    );

    // The stored checkpoint is a small encoder; asking for another tier is a mismatch.
    let cfg = d.join("medium.toml");
    std::fs::write(
        &cfg,
        "version = 1\n[pretrain.encoder]\ncapacity = \"medium\"\nembedding_dim = 128\n",
    )
    .unwrap();
    let o = rfssl(d, &["eval", "--profile", "smoke", "-c", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));

    let o = rfssl(
        d,
        &[
            "eval",
            "--profile",
            "smoke",
            "--checkpoint",
            d.join("missing.ckpt").to_str().unwrap(),
        ],
    );
    assert_ne!(o.status.code(), Some(0));
}
