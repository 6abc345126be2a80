//! Acceptance criteria, one PASS/FAIL line each. Exits nonzero on any FAIL.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use dsa_core::backbone::{run_order_experiment, OrderExperiment};
use dsa_core::conv4d::oracle_grid;
use dsa_core::cost::{arch_cost, dsa_overhead, ArchSpec, DsaPlacementSpec};
use dsa_core::dsa::{dsa_forward, generate_kernel, pool_context, segment_conv, DsaConfig, DsaParams, DynamicKernel};
use dsa_core::ops::{concat_channels, split_channels};
use dsa_core::{gradcheck, rng, Mode, Tensor};
use rand::Rng;

const ORACLE_TOL: f64 = 1e-12;
const ORACLE_BUDGET: Duration = Duration::from_secs(60);
const GRAD_SEEDS: usize = 10;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const KERNEL_DRAWS: u64 = 1000;
const KERNEL_TOL: f64 = 1e-12;
const GFLOPS_8X1: f64 = 41.9;
const GFLOPS_4X4: f64 = 83.8;
const GFLOPS_TOL: f64 = 0.02;
const R18_MPARAMS: f64 = 32.3;
const R18_TOL: f64 = 0.03;
const OVERHEAD_FLOPS_MAX: f64 = 1e-3;
const OVERHEAD_PARAMS_MAX: f64 = 5e-3;
const ORDER_SAMPLES: usize = 2000;
const ORDER_SEEDS: [u64; 3] = [0, 1, 2];
const ORDER_GAP_POINTS: f64 = 10.0;
const ORDER_BUDGET: Duration = Duration::from_secs(600);

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let seeds: Vec<u64> = (0..5).collect();
    let cells = oracle_grid(3, &seeds, None);
    let mut worst = 0.0f64;
    for cell in &cells {
        let d = cell.deviation().map_err(|e| e.to_string())?;
        if d.is_nan() || d >= ORACLE_TOL {
            return Err(format!("deviation {d:.3e} at {cell:?}"));
        }
        worst = worst.max(d);
    }
    let took = start.elapsed();
    let detail = format!(
        "{} cells, max deviation {worst:.3e} (< {ORACLE_TOL:e}), {took:.2?}",
        cells.len()
    );
    if cells.len() != 3 * 3 * 8 * 5 || took > ORACLE_BUDGET {
        return Err(detail);
    }
    Ok(detail)
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let cases = gradcheck::cases();
    let report = gradcheck::run(&cases, &gradcheck::seeds(0, GRAD_SEEDS)).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let worst = report
        .cases
        .iter()
        .max_by(|a, b| a.worst_rel_error.total_cmp(&b.worst_rel_error))
        .ok_or("no cases")?;
    let failed: Vec<_> = report
        .cases
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.op.as_str())
        .collect();
    let has_net = report.cases.iter().any(|c| c.op == "toy_net");
    let detail = format!(
        "{} ops x {GRAD_SEEDS} seeds, worst {:.3e} ({} seed {}), tolerance {:e}, {took:.2?}",
        report.cases.len(),
        worst.worst_rel_error,
        worst.op,
        worst.worst_seed,
        report.tolerance
    );
    if !report.passed || !has_net || took > GRAD_BUDGET {
        return Err(format!("{detail}; failed {failed:?}"));
    }
    Ok(detail)
}

fn kernel_normalization() -> Outcome {
    let mut worst = 0.0f64;
    let mut rows = 0usize;
    for draw in 0..KERNEL_DRAWS {
        let mut r = rng::stream(draw, "kernel-normalization");
        let cfg = DsaConfig {
            snippets: r.random_range(1..=8),
            kernel_size: [1, 3, 5, 7][r.random_range(0..4)],
            alpha: r.random_range(1..=4),
            beta: 1.0,
            channels: r.random_range(1..=6),
            ..DsaConfig::default()
        };
        let n = r.random_range(1..=4);
        let scale = 10f64.powf(r.random_range(-1.0..1.0));
        let mut params = DsaParams::init(&cfg, &mut r);
        let v = Tensor::uniform(&[n, cfg.channels, cfg.snippets, 2, 2, 2], -scale, scale, &mut r);
        let ctx = pool_context(&v).map_err(|e| e.to_string())?;
        for mode in [Mode::Train, Mode::Eval] {
            let k = generate_kernel(&ctx, &mut params, &cfg, mode).map_err(|e| e.to_string())?;
            let (err, positive) = k.normalization_error();
            if !positive || err.is_nan() || err > KERNEL_TOL {
                return Err(format!(
                    "draw {draw} {mode:?}: row-sum error {err:.3e}, positive {positive}"
                ));
            }
            worst = worst.max(err);
            rows += k.rows().count();
        }
    }
    Ok(format!(
        "{KERNEL_DRAWS} draws, {rows} rows, max |sum - 1| {worst:.3e}, all entries > 0"
    ))
}

fn identity_degeneracies() -> Outcome {
    let mut r = rng::stream(0, "identity");
    for draw in 0..50 {
        let c = r.random_range(1..=9);
        let u = r.random_range(1..=6);
        let v = Tensor::uniform(&[2, c, u, 2, 3, 2], -3.0, 3.0, &mut r);

        let cfg = DsaConfig {
            snippets: u,
            beta: 0.0,
            channels: c,
            ..DsaConfig::default()
        };
        let mut params = DsaParams::init(&cfg, &mut r);
        let y = dsa_forward(&v, &mut params, &cfg, Mode::Train).map_err(|e| e.to_string())?;
        if !y.bitwise_eq(&v) {
            return Err(format!("draw {draw}: beta = 0 changed the input"));
        }

        for l in [1, 3, 5] {
            let mut row = vec![0.0; l];
            row[l / 2] = 1.0;
            let y = segment_conv(&v, &DynamicKernel::broadcast(&row, 2, c)).map_err(|e| e.to_string())?;
            if !y.bitwise_eq(&v) {
                return Err(format!("draw {draw}: centered delta of size {l} changed the input"));
            }
        }

        for count in 0..=c {
            let (a, b) = split_channels(&v, count).map_err(|e| e.to_string())?;
            let back = concat_channels(&a, &b).map_err(|e| e.to_string())?;
            if !back.bitwise_eq(&v) {
                return Err(format!("draw {draw}: concat(split(v, {count})) differs"));
            }
        }
    }
    Ok("50 draws: beta = 0 forward, centered-delta segment conv, concat of split all bitwise identical".into())
}

fn cost_reproduction() -> Outcome {
    let r50 = ArchSpec::builtin("i3d_r50").ok_or("missing i3d_r50")?;
    let r18 = ArchSpec::builtin("i3d_r18").ok_or("missing i3d_r18")?.with_classes(200);
    let one = arch_cost(&r50, 8, 224, 1).map_err(|e| e.to_string())?;
    let four = arch_cost(&r50, 4, 224, 4).map_err(|e| e.to_string())?;
    let small = arch_cost(&r18, 8, 224, 1).map_err(|e| e.to_string())?;
    let within = |v: f64, target: f64, tol: f64| ((v - target) / target).abs() <= tol;
    let checks = [
        within(one.gmacs, GFLOPS_8X1, GFLOPS_TOL),
        within(four.gmacs, GFLOPS_4X4, GFLOPS_TOL),
        within(small.mparams, R18_MPARAMS, R18_TOL),
        four.backbone_macs == 2 * one.backbone_macs,
    ];
    let detail = format!(
        "R50 8x1 {:.3} G (target {GFLOPS_8X1} +-{}%), R50 4x4 {:.3} G (target {GFLOPS_4X4} +-{}%), \
         R18/200 {:.3} M (target {R18_MPARAMS} +-{}%), backbone 4x4 {} vs 8x1 {} (exact 2x required), clip totals ratio {:.6}",
        one.gmacs,
        GFLOPS_TOL * 100.0,
        four.gmacs,
        GFLOPS_TOL * 100.0,
        small.mparams,
        R18_TOL * 100.0,
        four.backbone_macs,
        one.backbone_macs,
        four.total_macs as f64 / one.total_macs as f64
    );
    if checks.iter().all(|&c| c) {
        Ok(detail)
    } else {
        Err(format!("{detail}; checks {checks:?}"))
    }
}

fn overhead_claim() -> Outcome {
    let r50 = ArchSpec::builtin("i3d_r50").ok_or("missing i3d_r50")?;
    let placement = DsaPlacementSpec::default();
    let cfg = DsaConfig::default();
    let report = arch_cost(&r50, 4, 224, 4).map_err(|e| e.to_string())?;
    let overhead = dsa_overhead(&r50, &placement, &cfg, 4, 224, 4).map_err(|e| e.to_string())?;
    let report = report.with_dsa(overhead);
    let (macs, params) = report.dsa_relative().ok_or("no overhead")?;
    let dsa = report.dsa.as_ref().ok_or("no overhead")?;
    let detail = format!(
        "{} modules, +{} MACs ({:.4}%, limit {}%), +{} params ({:.4}%, limit {}%), total {:.2} G",
        dsa.lines.len(),
        dsa.macs,
        macs * 100.0,
        OVERHEAD_FLOPS_MAX * 100.0,
        dsa.params,
        params * 100.0,
        OVERHEAD_PARAMS_MAX * 100.0,
        (report.total_macs + dsa.macs) as f64 / 1e9
    );
    if dsa.lines.len() == 5 && macs < OVERHEAD_FLOPS_MAX && params < OVERHEAD_PARAMS_MAX {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn order_sensitivity() -> Outcome {
    let start = Instant::now();
    let cfg = OrderExperiment {
        samples: ORDER_SAMPLES,
        ..OrderExperiment::default()
    };
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in ORDER_SEEDS {
        let (run, _) = run_order_experiment(&cfg, seed).map_err(|e| format!("seed {seed}: {e}"))?;
        ok &=
            run.gap_points >= ORDER_GAP_POINTS && run.baseline_permutation_invariant && !run.dsa_permutation_invariant;
        lines.push(format!(
            "seed {seed}: dsa {:.1}% vs baseline {:.1}% (gap {:+.1}), invariant {}/{}",
            run.dsa.holdout_accuracy * 100.0,
            run.baseline.holdout_accuracy * 100.0,
            run.gap_points,
            run.baseline_permutation_invariant,
            run.dsa_permutation_invariant
        ));
    }
    let took = start.elapsed();
    ok &= took <= ORDER_BUDGET;
    let detail = format!("{}; {took:.1?}", lines.join("; "));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn determinism() -> Outcome {
    let commands: [&[&str]; 5] = [
        &["gradcheck"],
        &["oracle"],
        &["flops", "--dsa"],
        &["flops", "--arch", "i3d_r18", "--classes", "200", "--params"],
        &["train-demo", "--epochs", "2", "--n", "400", "--runs", "2"],
    ];
    for args in commands {
        let run = || {
            Command::new(env!("CARGO_BIN_EXE_dsa"))
                .args(["--format", "json", "--seed", "7"])
                .args(args)
                .output()
                .map_err(|e| e.to_string())
        };
        let (a, b) = (run()?, run()?);
        if a.status.code() != Some(0) {
            return Err(format!(
                "{args:?} exited {:?}: {}",
                a.status.code(),
                String::from_utf8_lossy(&a.stderr)
            ));
        }
        if a.stdout != b.stdout || a.stdout.is_empty() {
            return Err(format!("{args:?}: outputs differ"));
        }
        serde_json::from_slice::<serde_json::Value>(&a.stdout).map_err(|e| format!("{args:?}: {e}"))?;
    }
    Ok(format!(
        "{} commands rerun with identical flags: byte-identical JSON",
        commands.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("oracle equivalence", oracle_equivalence),
        ("gradient suite", gradient_suite),
        ("kernel normalization", kernel_normalization),
        ("identity degeneracies", identity_degeneracies),
        ("cost reproduction", cost_reproduction),
        ("overhead claim", overhead_claim),
        ("order sensitivity", order_sensitivity),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                println!("FAIL {name}: {detail}");
                failed += 1;
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
