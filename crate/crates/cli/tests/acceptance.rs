//! Acceptance criteria. Prints one `criterion N: PASS|FAIL` line each with the
//! measured value, its limit and the time taken, then exits non-zero if any
//! failed. Pass criterion numbers as arguments to run a subset.

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use vf_cli::{cmd_bench, cmd_gen_scene, cmd_reconstruct, cmd_train_tiny, load_config};
use vf_core::grad::Precision;
use vf_core::verify::{self, Check};

/// Window attention against the dense oracle, f64.
const ORACLE_F64: f64 = 1e-10;
/// Window attention against the dense oracle, f32 rounding of every stage.
const ORACLE_F32: f64 = 1e-5;
/// Sparse over dense pair ratio at 100³, 10% occupancy, window 10.
const RATIO_RANGE: (f64, f64) = (0.5e-5, 2e-5);
/// Finite-difference relative error.
const GRAD_REL: f64 = 1e-4;
/// Mean radial error of marching cubes on the r = 0.5 m sphere, metres.
const MC_MEAN_ERROR: f64 = 0.02;
/// F-score at 5 cm after the tiny overfit.
const TINY_FSCORE: f64 = 0.9;
const SOFTMAX_SUM: f64 = 1e-6;

const SEED: u64 = 7;

type Outcome = (bool, String);

fn checks_line(checks: &[Check]) -> Outcome {
    let pass = checks.iter().all(|c| c.pass);
    let values = checks.iter().map(|c| format!("{}={:.2e}", c.name, c.value)).collect::<Vec<_>>().join(", ");
    (pass, values)
}

fn attention_oracle() -> Outcome {
    let a = verify::attention_oracle(Precision::F64, SEED).unwrap();
    let b = verify::attention_oracle(Precision::F32, SEED).unwrap();
    assert_eq!(a.limit, ORACLE_F64);
    assert_eq!(b.limit, ORACLE_F32);
    let pass = a.pass && b.pass && a.value <= ORACLE_F64 && b.value <= ORACLE_F32;
    (pass, format!("f64 {:.2e} <= {ORACLE_F64:e}, f32 {:.2e} <= {ORACLE_F32:e}", a.value, b.value))
}

fn complexity_ratio() -> Outcome {
    let r = cmd_bench([100; 3], 0.10, 10, 1, SEED, false).unwrap();
    let pass = r.ratio >= RATIO_RANGE.0 && r.ratio <= RATIO_RANGE.1 && r.recount_agrees;
    let detail =
        format!("ratio {:.3e} in [{:e}, {:e}], recount agrees {}", r.ratio, RATIO_RANGE.0, RATIO_RANGE.1, r.recount_agrees);
    (pass, detail)
}

fn gradient_suite() -> Outcome {
    let checks = verify::gradient_suite(SEED).unwrap();
    assert!(checks.iter().all(|c| c.limit == GRAD_REL));
    assert_eq!(checks.len(), 10);
    checks_line(&checks)
}

fn shape_preservation() -> Outcome {
    let c = verify::shape_preservation(100, SEED).unwrap();
    (c.pass, c.detail)
}

fn translation_invariance() -> Outcome {
    let c = verify::translation_invariance(50, SEED).unwrap();
    (c.pass, c.detail)
}

fn marching_cubes_sphere() -> Outcome {
    let c = verify::marching_cubes_sphere().unwrap();
    assert_eq!(c.limit, MC_MEAN_ERROR);
    (c.pass && c.value < MC_MEAN_ERROR, format!("mean radial error {:.4} m < {MC_MEAN_ERROR} m", c.value))
}

fn tiny_overfit() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    let run = dir.path().join("run");
    let s = cmd_gen_scene(&scene, 0).unwrap();
    assert_eq!(s.views.len(), 8);
    assert_eq!(s.spec.shapes.len(), 3);
    let config = load_config(None).unwrap();
    let train = cmd_train_tiny(&scene, &config, 2000, &run).unwrap();
    let rec = cmd_reconstruct(&scene, &config, &train.checkpoint, &run).unwrap();
    let f = rec.metrics.fscore.unwrap();
    let detail = format!(
        "F-score {f:.4} >= {TINY_FSCORE} at tau {} m, final loss {:.4}",
        config.metrics.tau,
        train.losses.last().unwrap()
    );
    (f >= TINY_FSCORE, detail)
}

fn metric_self_consistency() -> Outcome {
    let c = verify::metric_self_consistency(SEED).unwrap();
    (c.pass, c.detail)
}

fn softmax_and_ranges() -> Outcome {
    let c = verify::range_invariants(SEED).unwrap();
    assert_eq!(c.limit, SOFTMAX_SUM);
    (c.pass, format!("max |sum - 1| {:.2e}, heads inside their ranges", c.value))
}

fn sparsification_and_view_gates() -> Outcome {
    let c = verify::gates(1000, SEED).unwrap();
    (c.pass, c.detail)
}

const CRITERIA: [(u32, fn() -> Outcome, u64); 10] = [
    (1, attention_oracle, 10),
    (2, complexity_ratio, 30),
    (3, gradient_suite, 300),
    (4, shape_preservation, 60),
    (5, translation_invariance, 60),
    (6, marching_cubes_sphere, 5),
    (7, tiny_overfit, 1800),
    (8, metric_self_consistency, 5),
    (9, softmax_and_ranges, 10),
    (10, sparsification_and_view_gates, 10),
];

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, run, budget) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let budget = Duration::from_secs(budget);
        let t0 = Instant::now();
        let (pass, detail) = match panic::catch_unwind(AssertUnwindSafe(run)) {
            Ok(outcome) => outcome,
            Err(e) => {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                (false, format!("panicked: {}", msg.unwrap_or_default()))
            }
        };
        let elapsed = t0.elapsed();
        let ok = pass && elapsed <= budget;
        failed += !ok as u32;
        println!(
            "criterion {n}: {} {detail} [{:.2}s of {:.0}s]",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
