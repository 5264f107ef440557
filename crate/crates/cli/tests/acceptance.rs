//! End-to-end acceptance check for the `reloc-kit` binary: the full
//! pipeline must be deterministic — two runs with the same seed produce
//! byte-identical artifact trees — and must finish within a fixed time
//! budget. Exit codes for the documented failure classes are also pinned.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

/// Wall-clock budget for the two pipeline runs together.
const PIPELINE_BUDGET: Duration = Duration::from_secs(300);
/// Seed used for both runs; any fixed value works, the point is equality.
const PIPELINE_SEED: &str = "1";

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_reloc-kit"))
}

fn check(name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("acceptance {name}: {verdict} — {detail}");
    assert!(pass, "acceptance criterion failed: {name}: {detail}");
}

/// Every file under `root`, keyed by its path relative to `root`.
fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).expect("read_dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .expect("path under root")
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, std::fs::read(&path).expect("read file"));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn run_pipeline(out_dir: &Path) {
    let status = binary()
        .args(["pipeline", "--seed", PIPELINE_SEED, "--out"])
        .arg(out_dir)
        .status()
        .expect("spawn reloc-kit");
    assert!(status.success(), "pipeline run failed: {status}");
}

#[test]
fn criterion_11_pipeline_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let first_dir = tmp.path().join("first");
    let second_dir = tmp.path().join("second");

    let start = Instant::now();
    run_pipeline(&first_dir);
    run_pipeline(&second_dir);
    let elapsed = start.elapsed();

    let first = tree_bytes(&first_dir);
    let second = tree_bytes(&second_dir);

    let first_names: Vec<&String> = first.keys().collect();
    let second_names: Vec<&String> = second.keys().collect();
    assert_eq!(
        first_names, second_names,
        "the two runs produced different file sets"
    );

    let mismatched: Vec<&String> = first
        .iter()
        .filter(|(name, bytes)| &second[*name] != *bytes)
        .map(|(name, _)| name)
        .collect();

    check(
        "11 pipeline runs are byte-identical",
        !first.is_empty() && mismatched.is_empty() && elapsed < PIPELINE_BUDGET,
        &format!(
            "{} files per run, {} differ ({:?}); both runs in {:.1?} (budget {:?})",
            first.len(),
            mismatched.len(),
            mismatched,
            elapsed,
            PIPELINE_BUDGET
        ),
    );
}

#[test]
fn missing_input_exits_with_the_io_code() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let output = binary()
        .args(["iou", "--data"])
        .arg(tmp.path().join("does_not_exist"))
        .arg("--out")
        .arg(tmp.path().join("out"))
        .output()
        .expect("spawn reloc-kit");
    check(
        "exit code for a missing input",
        output.status.code() == Some(1),
        &format!("expected exit 1, got {:?}", output.status.code()),
    );
}

#[test]
fn invalid_flag_value_exits_with_the_usage_code() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let output = binary()
        .args(["train-encoder", "--scale", "13", "--data"])
        .arg(tmp.path().join("data"))
        .arg("--truth")
        .arg(tmp.path().join("truth.csv"))
        .arg("--out")
        .arg(tmp.path().join("out"))
        .output()
        .expect("spawn reloc-kit");
    check(
        "exit code for an invalid flag value",
        output.status.code() == Some(2),
        &format!("expected exit 2, got {:?}", output.status.code()),
    );
}
