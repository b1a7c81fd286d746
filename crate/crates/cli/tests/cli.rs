use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sensa::export::read_indices_csv;
use sensa_core::CampaignState;

const SENSA: &str = env!("CARGO_BIN_EXE_sensa");

fn sensa(args: &[&str]) -> Output {
    Command::new(SENSA).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = sensa(args);
    assert!(
        out.status.success(),
        "sensa {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, batch: usize) -> std::path::PathBuf {
    let path = dir.join("campaign.json");
    let config = serde_json::json!({
        "m": 3,
        "n": 3,
        "batch_size": batch,
        "evaluator": {"kind": "builtin", "model": "synthetic"},
    });
    fs::write(&path, config.to_string()).unwrap();
    path
}

#[test]
fn demo_eval_prints_one_row_per_time() {
    let text = ok(&["demo", "eval", "--x", "0.1,0.2,0.3", "--times", "0,2.5,5,10"]);
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), [0.0, 2.5, 5.0, 10.0]);
    assert!(rows.iter().all(|r| r.len() == 4));

    let out = sensa(&["demo", "eval", "--x", "0.1,0.2"]);
    assert!(!out.status.success());
}

#[test]
fn zero_batches_creates_state_and_indices_need_data() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 8);
    let state = dir.path().join("state.json");
    ok(&["run", "--config", p(&config), "--state", p(&state), "--batches", "0"]);
    let loaded = CampaignState::load(&state).unwrap();
    assert_eq!(loaded.batches().len(), 0);
    assert_eq!(loaded.version(), 1);

    let out = sensa(&["indices", "--state", p(&state)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("insufficient data"));
}

#[test]
fn run_writes_log_and_exports() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 20);
    let state = dir.path().join("state.json");
    ok(&["run", "--config", p(&config), "--state", p(&state), "--batches", "2"]);
    ok(&["run", "--state", p(&state), "--batches", "1"]);
    let loaded = CampaignState::load(&state).unwrap();
    assert_eq!(loaded.batches().len(), 3);
    let log = fs::read_to_string(dir.path().join("state.json.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3 * 20 * 5);

    let csv_path = dir.path().join("indices.csv");
    ok(&["indices", "--state", p(&state), "--out", p(&csv_path)]);
    let rows = read_indices_csv(fs::File::open(&csv_path).unwrap()).unwrap();
    let idx = loaded.indices().unwrap();
    assert_eq!(rows.len(), 9);
    for row in rows {
        let (i, j) = (row.input - 1, row.output - 1);
        assert_eq!(row.s.to_bits(), idx.first_order[i][j].to_bits());
        assert_eq!(row.t.to_bits(), idx.total[i][j].to_bits());
        assert_eq!(row.v.to_bits(), idx.variance[j].to_bits());
        assert!(row.biased);
    }
    let uniform = ok(&["indices", "--state", p(&state), "--uniform-only"]);
    assert!(uniform.lines().skip(1).all(|l| l.ends_with(",false")));

    let density = ok(&["density", "--state", p(&state), "--dim", "1", "--output", "2"]);
    let density: serde_json::Value = serde_json::from_str(&density).unwrap();
    let cum = density["cumulative"]["cumulative"].as_array().unwrap();
    let terminal = cum.last().unwrap().as_f64().unwrap();
    assert!((terminal - idx.total[0][1]).abs() <= 1e-9 * idx.total[0][1]);

    let boot_path = dir.path().join("boot.json");
    ok(&[
        "bootstrap", "--state", p(&state), "--dim", "1", "--output", "1", "-R", "5", "--seed", "3", "--out",
        p(&boot_path),
    ]);
    let boot: serde_json::Value = serde_json::from_str(&fs::read_to_string(&boot_path).unwrap()).unwrap();
    assert_eq!(boot["curves"].as_array().unwrap().len(), 5);
    assert!(boot["coverage"].as_f64().is_some());

    let out = sensa(&["density", "--state", p(&state), "--dim", "0"]);
    assert!(!out.status.success());
}

#[test]
fn ingest_reproduces_native_indices() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 12);
    let native = dir.path().join("native.json");
    ok(&["run", "--config", p(&config), "--state", p(&native), "--batches", "1"]);

    let other = dir.path().join("other.json");
    ok(&["run", "--config", p(&config), "--state", p(&other), "--batches", "0"]);
    ok(&["ingest", "--state", p(&other), "--log", p(&dir.path().join("native.json.jsonl"))]);

    let a = ok(&["indices", "--state", p(&native)]);
    let b = ok(&["indices", "--state", p(&other)]);
    assert_eq!(a.replace(",true", ",false"), b);
    let loaded = CampaignState::load(&other).unwrap();
    assert_eq!(loaded.ingested_blocks(), 12);
}
