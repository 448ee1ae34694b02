//! Acceptance criterion 11: pipeline determinism through the binary.

use std::fs;
use std::process::Command;

#[test]
fn criterion_11_pipeline_determinism() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("config.txt"),
        "seed = 19\nframes = 4\nframe_period = 1.0\nazimuths = 60\nrings = 8\n",
    )
    .unwrap();
    let mut problems: Vec<String> = Vec::new();
    for name in ["a", "b"] {
        let out = Command::new(env!("CARGO_BIN_EXE_drivekit"))
            .args(["run", "--config", "config.txt", "--out", name])
            .current_dir(dir.path())
            .output()
            .unwrap();
        if !out.status.success() {
            problems.push(format!(
                "run {name} failed: {}",
                String::from_utf8_lossy(&out.stderr)
            ));
        }
    }
    if problems.is_empty() {
        let a = fs::read(dir.path().join("a/metrics.json")).unwrap();
        let b = fs::read(dir.path().join("b/metrics.json")).unwrap();
        if a.is_empty() {
            problems.push("metric report is empty".into());
        }
        if a != b {
            problems.push("metric reports differ between identical runs".into());
        }
    }
    if problems.is_empty() {
        println!("criterion 11: PASS - fixed config yields bit-identical metric reports");
    } else {
        println!("criterion 11: FAIL - fixed config yields bit-identical metric reports");
        for p in &problems {
            println!("  {p}");
        }
        panic!("criterion 11 failed");
    }
}
