use std::fmt::Write as _;

use dsa_core::backbone::{OrderExperiment, OrderRun, TrainConfig};
use dsa_core::checkpoint;
use dsa_core::conv4d::{oracle_grid, OracleCell};
use dsa_core::cost::{self, arch_cost, dsa_overhead, ArchSpec, DsaPlacementSpec};
use dsa_core::gradcheck::{self, GradcheckReport};
use rayon::prelude::*;
use serde::Serialize;

use crate::output::{json, sci, CliError, Format, Output};
use crate::{FlopsArgs, GradcheckArgs, OracleArgs, TrainArgs};

pub const ORACLE_TOLERANCE: f64 = 1e-12;

pub struct Context {
    pub seed: u64,
    pub format: Format,
    pub pool: rayon::ThreadPool,
}

impl Context {
    /// Maps `f` over `items` on the worker pool, keeping input order.
    fn map<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
        self.pool.install(|| items.par_iter().map(f).collect())
    }
}

#[derive(Serialize)]
struct GradcheckOutput<'a> {
    seed: u64,
    seeds: usize,
    #[serde(flatten)]
    report: &'a GradcheckReport,
}

pub fn gradcheck(ctx: &Context, a: &GradcheckArgs) -> Result<Output, CliError> {
    let mut cases = match &a.inject_fault {
        Some(op) => gradcheck::cases_with_fault(op).map_err(CliError::usage)?,
        None => gradcheck::cases(),
    };
    for op in &a.ops {
        if !cases.iter().any(|c| &c.name == op) {
            return Err(CliError::usage(format!("unknown op {op:?}; see --list")));
        }
    }
    if !a.ops.is_empty() {
        cases.retain(|c| a.ops.contains(&c.name));
    }
    if a.list {
        let text = cases.iter().map(|c| format!("{}\n", c.name)).collect();
        return Ok(Output { text, passed: true });
    }
    if a.seeds == 0 {
        return Err(CliError::usage("--seeds must be at least 1"));
    }
    let seeds = gradcheck::seeds(ctx.seed, a.seeds);
    let cells: Vec<(usize, u64)> = (0..cases.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results = ctx.map(&cells, |&(i, s)| cases[i].check(s));
    let mut errors = Vec::with_capacity(cells.len());
    for (&(i, s), r) in cells.iter().zip(results) {
        let e = r.map_err(|e| CliError::runtime(format!("{} (seed {s}): {e}", cases[i].name)))?;
        log::debug!("{} seed {s}: {e:.3e}", cases[i].name);
        errors.push((i, s, e));
    }
    let report = gradcheck::summarize(&cases, &errors);
    for c in report.cases.iter().filter(|c| !c.passed) {
        eprintln!(
            "FAIL {}: relative error {} at seed {}",
            c.op,
            sci(c.worst_rel_error),
            c.worst_seed
        );
    }
    let text = match ctx.format {
        Format::Json => json(&GradcheckOutput {
            seed: ctx.seed,
            seeds: a.seeds,
            report: &report,
        }),
        Format::Table => {
            let mut t = String::new();
            let _ = writeln!(
                t,
                "{:<26} {:>5} {:>15} {:>10}  status",
                "op", "seeds", "worst rel err", "worst seed"
            );
            for c in &report.cases {
                let _ = writeln!(
                    t,
                    "{:<26} {:>5} {:>15} {:>10}  {}",
                    c.op,
                    c.seeds,
                    sci(c.worst_rel_error),
                    c.worst_seed,
                    if c.passed { "ok" } else { "FAIL" }
                );
            }
            let _ = writeln!(
                t,
                "step {}, tolerance {}, seeds {}..{}: {}",
                sci(report.step),
                sci(report.tolerance),
                ctx.seed,
                ctx.seed + a.seeds as u64 - 1,
                if report.passed { "PASS" } else { "FAIL" }
            );
            t
        }
    };
    Ok(Output {
        text,
        passed: report.passed,
    })
}

#[derive(Serialize)]
struct OracleReport {
    seed: u64,
    seeds: usize,
    kernel_size: usize,
    max_extent: Option<usize>,
    cells: usize,
    tolerance: f64,
    max_deviation: f64,
    worst_cell: Option<OracleCell>,
    passed: bool,
}

fn describe(c: &OracleCell) -> String {
    format!(
        "C={} U={} T={} H={} W={} seed={}",
        c.channels, c.snippets, c.frames, c.height, c.width, c.seed
    )
}

pub fn oracle(ctx: &Context, a: &OracleArgs) -> Result<Output, CliError> {
    if a.seeds == 0 {
        return Err(CliError::usage("--seeds must be at least 1"));
    }
    if a.l.is_multiple_of(2) {
        return Err(CliError::usage(format!("kernel size {} must be odd", a.l)));
    }
    let seeds = gradcheck::seeds(ctx.seed, a.seeds);
    let cells = oracle_grid(a.l, &seeds, a.max_extent);
    if cells.is_empty() {
        return Err(CliError::usage("--max-extent leaves no grid cells"));
    }
    let devs = ctx.map(&cells, OracleCell::deviation);
    let mut worst: Option<(OracleCell, f64)> = None;
    for (cell, d) in cells.iter().zip(devs) {
        let d = d.map_err(|e| CliError::runtime(format!("{}: {e}", describe(cell))))?;
        if d.is_nan() || d >= ORACLE_TOLERANCE {
            eprintln!("FAIL deviation {} at {}", sci(d), describe(cell));
        }
        if worst.is_none_or(|(_, w)| d > w || d.is_nan()) {
            worst = Some((*cell, d));
        }
    }
    let (worst_cell, max_deviation) = worst.map_or((None, 0.0), |(c, d)| (Some(c), d));
    let report = OracleReport {
        seed: ctx.seed,
        seeds: a.seeds,
        kernel_size: a.l,
        max_extent: a.max_extent,
        cells: cells.len(),
        tolerance: ORACLE_TOLERANCE,
        max_deviation,
        worst_cell,
        passed: max_deviation < ORACLE_TOLERANCE,
    };
    let text = match ctx.format {
        Format::Json => json(&report),
        Format::Table => {
            let mut t = String::new();
            let _ = writeln!(t, "cells          {}", report.cells);
            let _ = writeln!(t, "kernel size    {}", report.kernel_size);
            let _ = writeln!(t, "max deviation  {}", sci(report.max_deviation));
            if let Some(c) = &report.worst_cell {
                let _ = writeln!(t, "worst cell     {}", describe(c));
            }
            let _ = writeln!(t, "tolerance      {}", sci(report.tolerance));
            let _ = writeln!(t, "status         {}", if report.passed { "PASS" } else { "FAIL" });
            t
        }
    };
    Ok(Output {
        text,
        passed: report.passed,
    })
}

#[derive(Serialize)]
struct ParamsReport {
    arch: String,
    classes: usize,
    params: u64,
    mparams: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    dsa_params: Option<u64>,
}

pub fn flops(ctx: &Context, a: &FlopsArgs) -> Result<Output, CliError> {
    let mut arch = ArchSpec::resolve(&a.arch).map_err(CliError::usage)?;
    if let Some(k) = a.classes {
        arch = arch.with_classes(k);
    }
    let frames = a.frames.unwrap_or(arch.reference_input.frames);
    let res = a.res.unwrap_or(arch.reference_input.resolution);
    let mut report = arch_cost(&arch, frames, res, a.dsa_args.u).map_err(CliError::usage)?;
    if a.dsa {
        let placement = DsaPlacementSpec::parse(a.dsa_args.position, &a.dsa_stages).map_err(CliError::usage)?;
        let cfg = a.dsa_args.config(1)?;
        let overhead = dsa_overhead(&arch, &placement, &cfg, frames, res, a.dsa_args.u).map_err(CliError::usage)?;
        report = report.with_dsa(overhead);
    }
    let text = if a.params {
        let p = ParamsReport {
            arch: report.arch.clone(),
            classes: report.classes,
            params: report.params,
            mparams: report.mparams,
            dsa_params: report.dsa.as_ref().map(|d| d.params),
        };
        match ctx.format {
            Format::Json => json(&p),
            Format::Table => {
                let mut t = format!(
                    "arch     {}\nclasses  {}\nparams   {} ({:.2} M)\n",
                    p.arch, p.classes, p.params, p.mparams
                );
                if let Some(d) = p.dsa_params {
                    let _ = writeln!(t, "dsa      {d}");
                }
                t
            }
        }
    } else {
        cost::render(
            &report,
            match ctx.format {
                Format::Table => cost::Format::Table,
                Format::Json => cost::Format::Json,
            },
        )
    };
    Ok(Output { text, passed: true })
}

#[derive(Serialize)]
#[serde(untagged)]
enum RunOutcome {
    Done(OrderRun),
    Failed { seed: u64, error: String },
}

impl RunOutcome {
    fn run(&self) -> Option<&OrderRun> {
        match self {
            Self::Done(r) => Some(r),
            Self::Failed { .. } => None,
        }
    }
}

#[derive(Serialize)]
struct TrainDemoReport {
    experiment: OrderExperiment,
    runs: Vec<RunOutcome>,
    mean_gap_points: Option<f64>,
}

fn pct(v: f64) -> String {
    format!("{:.1}%", 100.0 * v)
}

fn render_run(t: &mut String, r: &OrderRun) {
    let _ = writeln!(t, "seed {}", r.seed);
    let _ = writeln!(
        t,
        "{:>5}  {:>9} {:>7} {:>7}  {:>9} {:>7} {:>7}",
        "epoch", "base loss", "train", "holdout", "dsa loss", "train", "holdout"
    );
    let loss = |l: Option<f64>| l.map_or("-".to_string(), |v| format!("{v:.4}"));
    for (b, d) in r.baseline.history.iter().zip(&r.dsa.history) {
        let _ = writeln!(
            t,
            "{:>5}  {:>9} {:>7} {:>7}  {:>9} {:>7} {:>7}",
            b.epoch,
            loss(b.mean_loss),
            pct(b.train_accuracy),
            pct(b.holdout_accuracy),
            loss(d.mean_loss),
            pct(d.train_accuracy),
            pct(d.holdout_accuracy)
        );
    }
    let _ = writeln!(
        t,
        "holdout: baseline {}, dsa {}, gap {:+.1} points",
        pct(r.baseline.holdout_accuracy),
        pct(r.dsa.holdout_accuracy),
        r.gap_points
    );
    let yn = |b: bool| if b { "yes" } else { "no" };
    let _ = writeln!(
        t,
        "consensus invariant under snippet permutation: baseline {}, dsa {}",
        yn(r.baseline_permutation_invariant),
        yn(r.dsa_permutation_invariant)
    );
}

pub fn train_demo(ctx: &Context, a: &TrainArgs) -> Result<Output, CliError> {
    let order_u = dsa_core::backbone::ORDER_SHAPE[1];
    if a.dsa_args.u != order_u {
        return Err(CliError::usage(format!(
            "the order task has {order_u} snippets; got --u {}",
            a.dsa_args.u
        )));
    }
    if !a.n.is_multiple_of(2) || a.n < 2 {
        return Err(CliError::usage("--n must be a positive even number"));
    }
    if a.runs == 0 || a.batch_size == 0 {
        return Err(CliError::usage("--runs and --batch-size must be at least 1"));
    }
    let experiment = OrderExperiment {
        samples: a.n,
        train: TrainConfig {
            epochs: a.epochs,
            lr: a.lr,
            batch_size: a.batch_size,
            seed: ctx.seed,
            ..TrainConfig::default()
        },
        dsa: a.dsa_args.config(8)?,
        position: a.dsa_args.position,
    };
    dsa_core::backbone::ToyNetSpec::two_block_at(experiment.position, Some(experiment.dsa))
        .validate()
        .map_err(CliError::usage)?;
    let seeds = gradcheck::seeds(ctx.seed, a.runs);
    let results = ctx.map(&seeds, |&s| dsa_core::backbone::run_order_experiment(&experiment, s));
    let mut runs = Vec::with_capacity(seeds.len());
    for (&seed, r) in seeds.iter().zip(results) {
        match r {
            Ok((run, artifacts)) => {
                if let Some(dir) = &a.save_dir {
                    let dir = dir.join(format!("seed-{seed}"));
                    checkpoint::save_dataset(dir.join("dataset"), &artifacts.data)
                        .and_then(|_| checkpoint::save_toy_net(dir.join("baseline"), &artifacts.baseline))
                        .and_then(|_| checkpoint::save_toy_net(dir.join("dsa"), &artifacts.dsa))
                        .map_err(|e| CliError::runtime(format!("saving to {}: {e}", dir.display())))?;
                }
                runs.push(RunOutcome::Done(run));
            }
            Err(e) => {
                eprintln!("FAIL seed {seed}: {e}");
                runs.push(RunOutcome::Failed {
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }
    let gaps: Vec<f64> = runs.iter().filter_map(|r| r.run().map(|r| r.gap_points)).collect();
    let mean_gap_points = (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64);
    let passed = runs.iter().all(|r| r.run().is_some());
    let report = TrainDemoReport {
        experiment,
        runs,
        mean_gap_points,
    };
    let text = match ctx.format {
        Format::Json => json(&report),
        Format::Table => {
            let mut t = String::new();
            for (i, r) in report.runs.iter().enumerate() {
                if i > 0 {
                    t.push('\n');
                }
                match r {
                    RunOutcome::Done(run) => render_run(&mut t, run),
                    RunOutcome::Failed { seed, error } => {
                        let _ = writeln!(t, "seed {seed}: {error}");
                    }
                }
            }
            if let Some(g) = report.mean_gap_points.filter(|_| report.runs.len() > 1) {
                let _ = writeln!(t, "\nmean gap over {} runs: {g:+.1} points", gaps.len());
            }
            t
        }
    };
    Ok(Output { text, passed })
}
