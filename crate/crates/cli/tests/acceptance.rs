//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::Instant;

use sensa_core::campaign::CampaignConfig;
use sensa_core::estimators::{estimate_indices, EvaluationBlock, SensitivityIndices};
use sensa_core::model::{BuiltinModel, Evaluator, EvaluatorSpec, ExternalEvaluator, ExternalEvaluatorSpec};
use sensa_core::regional::{boxcar_contributions, cumulative_local, AlphaEpsilon, BoxcarSet};
use sensa_core::uncertainty::{bootstrap_curves, bootstrap_indices, quantile, uniform_grid, BootstrapSpec, PercentileBand};
use sensa_core::{CampaignState, SensaError, SobolStream};

type Outcome = Result<String, String>;

const SENSA: &str = env!("CARGO_BIN_EXE_sensa");

fn builtin(model: BuiltinModel, m: usize, n: usize, batch: usize) -> (CampaignState, Box<dyn Evaluator>) {
    let config = CampaignConfig::new(m, n, batch, EvaluatorSpec::Builtin { model });
    let ev = config.evaluator.instantiate(m).unwrap();
    (CampaignState::new(config).unwrap(), ev)
}

fn synthetic_campaign(batch: usize, alpha: f64) -> (CampaignState, Box<dyn Evaluator>) {
    let (mut state, ev) = builtin(BuiltinModel::Synthetic, 3, 3, batch);
    if alpha != state.alpha() {
        state.set_alpha(alpha).unwrap();
    }
    (state, ev)
}

fn non_adaptive_synthetic(n: usize) -> Vec<EvaluationBlock> {
    let (mut state, mut ev) = synthetic_campaign(n, 2.0);
    state.run_batch(ev.as_mut()).unwrap();
    state.blocks().to_vec()
}

fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn reference_indices() -> Outcome {
    // Rows are outputs y1..y3, columns inputs x1..x3.
    let s_ref = [[0.01, 0.00, 0.98], [0.62, 0.00, 0.06], [0.13, 0.00, 0.59]];
    let t_ref = [[0.01, 0.00, 0.99], [0.94, 0.00, 0.38], [0.41, 0.00, 0.87]];
    let start = Instant::now();
    let idx = estimate_indices(&non_adaptive_synthetic(1000)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let mut worst = 0.0f64;
    for j in 0..3 {
        for i in 0..3 {
            let ds = (idx.first_order[i][j] - s_ref[j][i]).abs();
            let dt = (idx.total[i][j] - t_ref[j][i]).abs();
            worst = worst.max(if ds.is_nan() || dt.is_nan() { f64::INFINITY } else { ds.max(dt) });
        }
    }
    let detail = format!("max |diff| = {worst:.4} over 18 entries (tol 0.06), {secs:.1} s (limit 30 s)");
    if worst <= 0.06 && secs < 30.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn reference_trajectory() -> Outcome {
    let expected = [
        (0.0, [-0.1900320, 0.5144967, 0.4093612]),
        (5.0, [-0.1478757, 0.5489932, 0.3864914]),
        (10.0, [-0.1024813, 0.5854096, 0.3659173]),
    ];
    let out = Command::new(SENSA)
        .args(["demo", "eval", "--x", "0.1,0.2,0.3", "--times", "0,5,10"])
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("exit {}: {}", out.status, String::from_utf8_lossy(&out.stderr)));
    }
    let text = String::from_utf8(out.stdout).map_err(|e| e.to_string())?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
        .collect();
    if rows.len() != 3 {
        return Err(format!("expected 3 rows, got {}", rows.len()));
    }
    let mut worst_t0 = 0.0f64;
    let mut worst = 0.0f64;
    for (row, (t, y)) in rows.iter().zip(expected) {
        if row.len() != 4 || row[0] != t {
            return Err(format!("bad row {row:?}"));
        }
        let d = y.iter().zip(&row[1..]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if t == 0.0 {
            worst_t0 = d;
        }
        worst = worst.max(d);
    }
    let detail = format!("max |diff| = {worst:.2e} (tol 5e-3), t=0 max |diff| = {worst_t0:.2e} (tol 1e-4)");
    if worst <= 5e-3 && worst_t0 <= 1e-4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn global_recovery() -> Outcome {
    let blocks = non_adaptive_synthetic(1000);
    let params = AlphaEpsilon::new(2.0, 1e-4).unwrap();
    let mut worst = 0.0f64;
    for n in [100, 1000] {
        let set = &blocks[..n];
        let idx = estimate_indices(set).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let (t, _) = boxcar_contributions(set, i, j, params).unwrap();
                let curve = cumulative_local(&t, idx.variance[j], n).unwrap();
                worst = worst.max(rel_err(curve.terminal(), idx.total[i][j]));
            }
        }
    }
    let detail = format!("max relative error {worst:.2e} over N in {{100, 1000}} (tol 1e-9)");
    if worst <= 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ishigami() -> Outcome {
    // Closed form with a = 7, b = 0.1.
    let s_ref = [0.313905, 0.442411, 0.0];
    let t_ref = [0.557589, 0.442411, 0.243684];
    let (mut state, mut ev) = builtin(BuiltinModel::Ishigami, 3, 1, 4096);
    state.run_batch(ev.as_mut()).unwrap();
    let idx = state.indices().unwrap();
    let mut worst = 0.0f64;
    for i in 0..3 {
        worst = worst
            .max((idx.first_order[i][0] - s_ref[i]).abs())
            .max((idx.total[i][0] - t_ref[i]).abs());
    }
    let detail = format!(
        "S = ({:.4}, {:.4}, {:.4}), T = ({:.4}, {:.4}, {:.4}), max |diff| = {worst:.4} (tol 0.03)",
        idx.first_order[0][0], idx.first_order[1][0], idx.first_order[2][0],
        idx.total[0][0], idx.total[1][0], idx.total[2][0]
    );
    if worst <= 0.03 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn first_input() -> Outcome {
    let sizes = [2, 3, 7, 64, 1000];
    let mut worst = 0.0f64;
    for n in sizes {
        let (mut state, mut ev) = builtin(BuiltinModel::FirstInput, 3, 1, n);
        state.run_batch(ev.as_mut()).unwrap();
        let idx = state.indices().unwrap();
        for i in 0..3 {
            let expected = if i == 0 { 1.0 } else { 0.0 };
            let d = (idx.first_order[i][0] - expected).abs().max((idx.total[i][0] - expected).abs());
            worst = worst.max(if d.is_nan() { f64::INFINITY } else { d });
        }
    }
    let detail = format!("max |diff| from (1,0,0) = {worst:.1e} for N in {sizes:?} (tol 1e-12)");
    if worst <= 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn deciles(values: impl Iterator<Item = f64>) -> [usize; 10] {
    let mut counts = [0usize; 10];
    for v in values {
        counts[((v * 10.0) as usize).min(9)] += 1;
    }
    counts
}

fn argmax(counts: &[usize; 10]) -> usize {
    (0..10).max_by_key(|&d| (counts[d], std::cmp::Reverse(d))).unwrap()
}

fn adaptive_concentration() -> Outcome {
    let start = Instant::now();
    let (mut state, mut ev) = synthetic_campaign(10, 2.0);
    for _ in 0..100 {
        state.run_batch(ev.as_mut()).unwrap();
    }
    let secs = start.elapsed().as_secs_f64();
    let points = state.sample_points();
    let counts: Vec<[usize; 10]> = (0..3).map(|i| deciles(points.iter().map(|p| p[i]))).collect();
    let peak1 = argmax(&counts[0]);
    let peak2 = argmax(&counts[1]);
    let contains = |d: usize, x: f64| (d as f64) / 10.0 <= x && x < (d as f64 + 1.0) / 10.0;
    let min_count = counts.iter().flatten().copied().min().unwrap();
    let detail = format!(
        "x1 peak decile [{:.1},{:.1}), x2 peak decile [{:.1},{:.1}), fewest samples in a decile {min_count}, {secs:.1} s (limit 120 s)",
        peak1 as f64 / 10.0,
        (peak1 + 1) as f64 / 10.0,
        peak2 as f64 / 10.0,
        (peak2 + 1) as f64 / 10.0
    );
    if contains(peak1, 0.5934) && contains(peak2, 0.9485) && min_count >= 1 && secs < 120.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn percentile_interval(values: &[f64]) -> (f64, f64) {
    (quantile(values, 0.025).unwrap(), quantile(values, 0.975).unwrap())
}

fn alpha_zero_equivalence() -> Outcome {
    let reference = non_adaptive_synthetic(1000);
    let replicates = bootstrap_indices(&reference, BootstrapSpec { replicates: 200, seed: 7 }).unwrap();

    let (mut state, mut ev) = synthetic_campaign(10, 0.0);
    for _ in 0..100 {
        state.run_batch(ev.as_mut()).unwrap();
    }
    let idx = state.indices().unwrap();

    let pick = |ix: &SensitivityIndices, total: bool, i: usize, j: usize| {
        if total {
            ix.total[i][j]
        } else {
            ix.first_order[i][j]
        }
    };
    // Rounding-level slack for intervals that collapse to a point.
    let slack = 1e-12;
    let mut outside = Vec::new();
    for total in [false, true] {
        for i in 0..3 {
            for j in 0..3 {
                let reps: Vec<f64> = replicates.iter().map(|r| pick(r, total, i, j)).filter(|v| v.is_finite()).collect();
                let (lo, hi) = percentile_interval(&reps);
                let v = pick(&idx, total, i, j);
                if !(v >= lo - slack && v <= hi + slack) {
                    let name = if total { "T" } else { "S" };
                    outside.push(format!("{name}(x{},y{}) = {v:.4} not in [{lo:.4}, {hi:.4}]", i + 1, j + 1));
                }
            }
        }
    }
    if outside.is_empty() {
        Ok("all 18 S/T estimates inside the 95% bootstrap intervals (200 replicates)".into())
    } else {
        Err(outside.join("; "))
    }
}

fn incremental_equals_batch() -> Outcome {
    let (mut state, mut ev) = synthetic_campaign(10, 2.0);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        state.run_batch(ev.as_mut()).unwrap();
        let inc = state.indices().unwrap();
        let full = estimate_indices(state.blocks()).unwrap();
        for j in 0..3 {
            worst = worst.max(rel_err(inc.variance[j], full.variance[j]));
            for i in 0..3 {
                worst = worst
                    .max(rel_err(inc.total[i][j], full.total[i][j]))
                    .max(rel_err(inc.first_order[i][j], full.first_order[i][j]));
            }
        }
        for i in 0..3 {
            let inc = state.density(i, None).unwrap();
            let set = BoxcarSet::from_blocks(state.blocks(), i, state.config().epsilon).unwrap();
            let full = set.sampling_density(state.alpha(), &[0, 1, 2]).unwrap().density;
            if inc.breakpoints() != full.breakpoints() {
                return Err(format!("sampling density breakpoints differ for x{}", i + 1));
            }
            for (a, b) in inc.values().iter().zip(full.values()) {
                worst = worst.max(rel_err(*a, *b));
            }
        }
    }
    let detail = format!("max relative difference {worst:.2e} across 20 batches (tol 1e-9)");
    if worst <= 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bits(blocks: &[EvaluationBlock]) -> Vec<u64> {
    blocks
        .iter()
        .flat_map(|b| b.xa.iter().chain(&b.xb).map(|x| x.to_bits()))
        .collect()
}

fn persistence_determinism() -> Outcome {
    let (mut straight, mut ev) = synthetic_campaign(10, 2.0);
    for _ in 0..12 {
        straight.run_batch(ev.as_mut()).unwrap();
    }
    let (mut first, mut ev) = synthetic_campaign(10, 2.0);
    for _ in 0..6 {
        first.run_batch(ev.as_mut()).unwrap();
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("state.json");
    first.save(&path).map_err(|e| e.to_string())?;
    drop(first);
    let mut resumed = CampaignState::load(&path).map_err(|e| e.to_string())?;
    let mut ev = resumed.config().evaluator.instantiate(3).unwrap();
    for _ in 0..6 {
        resumed.run_batch(ev.as_mut()).unwrap();
    }
    let (a, b) = (bits(straight.blocks()), bits(resumed.blocks()));
    if a == b && a.len() == 12 * 10 * 6 {
        Ok(format!("{} design coordinates bit-identical after save/load at batch 6 of 12", a.len()))
    } else {
        let first_diff = a.iter().zip(&b).position(|(x, y)| x != y);
        Err(format!("design points differ (lengths {} vs {}, first difference at {first_diff:?})", a.len(), b.len()))
    }
}

fn bootstrap_band() -> Outcome {
    let blocks = non_adaptive_synthetic(1000);
    let idx = estimate_indices(&blocks).unwrap();
    let params = AlphaEpsilon::new(2.0, 1e-4).unwrap();
    let grid = uniform_grid(0.0, 1.0, 100);
    let mut worst = (f64::INFINITY, 0, 0);
    for i in 0..3 {
        for j in 0..3 {
            let (t, _) = boxcar_contributions(&blocks, i, j, params).unwrap();
            let point = cumulative_local(&t, idx.variance[j], blocks.len()).unwrap();
            let curves: Vec<_> = bootstrap_curves(&blocks, i, j, params, BootstrapSpec { replicates: 25, seed: 11 })
                .unwrap()
                .into_iter()
                .flatten()
                .collect();
            if curves.len() != 25 {
                return Err(format!("only {} of 25 replicates defined for (x{},y{})", curves.len(), i + 1, j + 1));
            }
            let coverage = PercentileBand::new(&curves, &grid, 0.95).unwrap().coverage(&point);
            if coverage < worst.0 {
                worst = (coverage, i, j);
            }
        }
    }
    let detail = format!(
        "lowest band coverage {:.0}% at (x{},y{}) over all 9 input/output pairs (need >= 95%)",
        worst.0 * 100.0,
        worst.1 + 1,
        worst.2 + 1
    );
    if worst.0 >= 0.95 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sh_spec(script: &str) -> ExternalEvaluatorSpec {
    let mut spec = ExternalEvaluatorSpec::new(vec!["sh".into(), "-c".into(), script.into()], 3, 3);
    spec.handshake_timeout_ms = 5_000;
    spec.eval_timeout_ms = 500;
    spec
}

/// Snapshot JSON without the fields a failed batch may legitimately touch.
fn comparable(state: &CampaignState) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(&state.to_json()).unwrap();
    let obj = v.as_object_mut().unwrap();
    obj.remove("version");
    obj.remove("updated_unix_ms");
    v
}

fn designated(err: &SensaError, want: fn(&SensaError) -> bool) -> bool {
    match err {
        SensaError::BatchFailed { source, .. } => want(source),
        other => want(other),
    }
}

fn evaluator_protocol() -> Outcome {
    let worker = vec![SENSA.to_string(), "worker".into(), "--model".into(), "echo".into(), "--m".into(), "3".into()];
    let mut echo = ExternalEvaluator::start(ExternalEvaluatorSpec::new(worker.clone(), 3, 3)).map_err(|e| e.to_string())?;
    let xs: Vec<Vec<f64>> = SobolStream::new(3)
        .unwrap()
        .next_points(10_000)
        .into_iter()
        .enumerate()
        .map(|(q, p)| p.iter().map(|u| (u - 0.5) * 10f64.powi(q as i32 % 7 - 3)).collect())
        .collect();
    let ys = echo.evaluate(&xs).map_err(|e| e.to_string())?;
    let mismatches = xs
        .iter()
        .zip(&ys)
        .filter(|(x, y)| x.iter().map(|v| v.to_bits()).ne(y.iter().map(|v| v.to_bits())))
        .count()
        + xs.len().abs_diff(ys.len());
    if mismatches != 0 {
        return Err(format!("{mismatches} mismatches in 10000 echo round-trips"));
    }

    let mut spec = ExternalEvaluatorSpec::new(worker, 3, 3);
    spec.eval_timeout_ms = 2_000;
    let config = CampaignConfig::new(3, 3, 5, EvaluatorSpec::External(spec));
    let mut state = CampaignState::new(config).map_err(|e| e.to_string())?;
    let mut good = state.config().evaluator.instantiate(3).unwrap();
    state.run_batch(good.as_mut()).map_err(|e| e.to_string())?;
    let untouched = state.clone();
    let before = comparable(&state);

    let faults: [(&str, &str, fn(&SensaError) -> bool); 2] = [
        ("timeout", r#"read hello; echo '{"ready":true}'; sleep 30"#, |e| matches!(e, SensaError::EvaluationTimeout { .. })),
        ("malformed line", r#"read hello; echo '{"ready":true}'; while read line; do echo 'not json'; done"#, |e| {
            matches!(e, SensaError::Protocol { .. })
        }),
    ];
    let mut notes = Vec::new();
    for (name, script, want) in faults {
        let mut bad = ExternalEvaluator::start(sh_spec(script)).map_err(|e| e.to_string())?;
        let version = state.version();
        match state.run_batch(&mut bad) {
            Ok(()) => return Err(format!("{name} fault did not fail the batch")),
            Err(e) if designated(&e, want) => notes.push(format!("{name} -> {e}")),
            Err(e) => return Err(format!("{name} fault produced the wrong error: {e}")),
        }
        if comparable(&state) != before || state.version() < version || state.status() != sensa_core::CampaignStatus::Idle {
            return Err(format!("campaign state changed after {name} fault"));
        }
    }

    // The campaign continues exactly as if the faults had not happened.
    let mut reference = untouched;
    reference.run_batch(good.as_mut()).map_err(|e| e.to_string())?;
    state.run_batch(good.as_mut()).map_err(|e| e.to_string())?;
    if bits(state.blocks()) != bits(reference.blocks()) {
        return Err("batch after faults differs from an undisturbed campaign".into());
    }
    Ok(format!("10000 echo round-trips, 0 mismatches; {}; state intact", notes.join("; ")))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("Synthetic model reference indices", reference_indices),
        ("Synthetic model reference trajectory", reference_trajectory),
        ("Global-recovery identity", global_recovery),
        ("Analytic-oracle check (Ishigami)", ishigami),
        ("Exact trivial model Y = X1", first_input),
        ("Adaptive concentration", adaptive_concentration),
        ("alpha = 0 equivalence", alpha_zero_equivalence),
        ("Incremental-equals-batch", incremental_equals_batch),
        ("Persistence determinism", persistence_determinism),
        ("Bootstrap sanity", bootstrap_band),
        ("Evaluator protocol", evaluator_protocol),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of 11 criteria passed", 11 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
