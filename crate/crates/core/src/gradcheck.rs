//! Central finite-difference checks of every differentiable operation.
//!
//! Each case draws inputs in `[-1, 1]` from a seed, reduces the outputs to a
//! scalar with random weights and compares the tape gradient `a` against
//! the numerical one `n` over all inputs at once:
//! `|a - n| / max(|a|, |n|, 1e-8)` with Euclidean norms.

use serde::{Deserialize, Serialize};

use crate::backbone::{ToyNet, ToyNetSpec};
use crate::dsa::{dsa_forward_on, generate_kernel_on, ContextSource, DsaConfig, DsaParams};
use crate::error::{invalid, Result};
use crate::ops::{ConvGeometry, Mode, RunningStats};
use crate::rng::{self, SeedRng};
use crate::tape::{Tape, Var};
use crate::tensor::{axis, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: usize = 10;

type Build = Box<dyn Fn(&mut SeedRng) -> Vec<Tensor> + Send + Sync>;
/// Records the op on the tape from primal inputs and returns
/// `(input leaves, outputs)`.
type Apply = Box<dyn Fn(&mut Tape, &[Tensor]) -> Result<(Vec<Var>, Vec<Var>)> + Send + Sync>;

pub struct GradCase {
    pub name: String,
    build: Build,
    apply: Apply,
    fault: Option<f64>,
}

impl std::fmt::Debug for GradCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GradCase")
            .field("name", &self.name)
            .field("fault", &self.fault)
            .finish()
    }
}

fn uniform(shape: &[usize], rng: &mut SeedRng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Uniform in `[-1, -0.05] ∪ [0.05, 1]`, clear of the ReLU kink.
fn off_zero(shape: &[usize], rng: &mut SeedRng) -> Tensor {
    uniform(shape, rng).map(|v| v.signum() * (0.05 + 0.95 * v.abs()))
}

fn leaves(tape: &mut Tape, inputs: &[Tensor]) -> Vec<Var> {
    inputs.iter().map(|t| tape.leaf(t.clone())).collect()
}

impl GradCase {
    pub fn new<B, A>(name: &str, build: B, apply: A) -> Self
    where
        B: Fn(&mut SeedRng) -> Vec<Tensor> + Send + Sync + 'static,
        A: Fn(&mut Tape, &[Tensor]) -> Result<(Vec<Var>, Vec<Var>)> + Send + Sync + 'static,
    {
        Self {
            name: name.to_string(),
            build: Box::new(build),
            apply: Box::new(apply),
            fault: None,
        }
    }

    /// Case over plain leaves: `f` receives one leaf per input.
    pub fn simple<B, F>(name: &str, build: B, f: F) -> Self
    where
        B: Fn(&mut SeedRng) -> Vec<Tensor> + Send + Sync + 'static,
        F: Fn(&mut Tape, &[Var]) -> Result<Vec<Var>> + Send + Sync + 'static,
    {
        Self::new(name, build, move |tape, inputs| {
            let xs = leaves(tape, inputs);
            let out = f(tape, &xs)?;
            Ok((xs, out))
        })
    }

    /// Same case with every output's backward scaled by `factor`, a
    /// deliberately wrong gradient.
    pub fn with_fault(mut self, factor: f64) -> Self {
        self.fault = Some(factor);
        self
    }

    fn record(&self, tape: &mut Tape, inputs: &[Tensor]) -> Result<(Vec<Var>, Vec<Var>)> {
        let (xs, mut outs) = (self.apply)(tape, inputs)?;
        if let Some(factor) = self.fault {
            for o in &mut outs {
                let value = tape.value(*o).clone();
                *o = tape.record("fault", &[*o], value, Box::new(move |g, _, _| vec![g.scale(factor)]));
            }
        }
        Ok((xs, outs))
    }

    fn loss(&self, inputs: &[Tensor], weights: &[Tensor]) -> Result<f64> {
        let mut tape = Tape::new();
        let (_, outs) = self.record(&mut tape, inputs)?;
        let mut total = 0.0;
        for (o, w) in outs.iter().zip(weights) {
            total += tape
                .value(*o)
                .data()
                .iter()
                .zip(w.data())
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        Ok(total)
    }

    /// Relative error for one seed.
    pub fn check(&self, seed: u64) -> Result<f64> {
        let mut rng = rng::stream(seed, &self.name);
        let inputs = (self.build)(&mut rng);
        let mut tape = Tape::new();
        let (xs, outs) = self.record(&mut tape, &inputs)?;
        let weights: Vec<Tensor> = outs.iter().map(|&o| uniform(tape.shape(o), &mut rng)).collect();
        let mut loss = None;
        for (&o, w) in outs.iter().zip(&weights) {
            let term = tape.weighted_sum(o, w)?;
            loss = Some(match loss {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let loss = loss.ok_or_else(|| invalid("gradcheck", format!("{}: no outputs", self.name)))?;
        let grads = tape.backward(loss)?;

        let (mut diff, mut analytic_sq, mut numeric_sq) = (0.0, 0.0, 0.0);
        let mut probe = inputs.clone();
        for (i, &x) in xs.iter().enumerate() {
            let analytic = grads.wrt(&tape, x);
            for j in 0..inputs[i].numel() {
                let orig = inputs[i].data()[j];
                probe[i].data_mut()[j] = orig + STEP;
                let up = self.loss(&probe, &weights)?;
                probe[i].data_mut()[j] = orig - STEP;
                let down = self.loss(&probe, &weights)?;
                probe[i].data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * STEP);
                let a = analytic.data()[j];
                diff += (a - numeric).powi(2);
                analytic_sq += a * a;
                numeric_sq += numeric * numeric;
            }
        }
        Ok(diff.sqrt() / analytic_sq.sqrt().max(numeric_sq.sqrt()).max(1e-8))
    }
}

/// Train-mode batch norm with throwaway statistics.
fn bn_train(tape: &mut Tape, x: &[Var]) -> Result<Vec<Var>> {
    let mut stats = RunningStats::new(tape.shape(x[1])[0]);
    Ok(vec![tape.batch_norm(x[0], x[1], x[2], Mode::Train, &mut stats)?])
}

fn dsa_case(name: &str, cfg: DsaConfig, shape: [usize; 6]) -> GradCase {
    let param_shapes: Vec<Vec<usize>> = DsaParams::zeros(&cfg)
        .learnable()
        .iter()
        .map(|t| t.shape().to_vec())
        .collect();
    GradCase::new(
        name,
        move |rng| {
            let mut v = vec![uniform(&shape, rng)];
            v.extend(param_shapes.iter().map(|s| uniform(s, rng)));
            v
        },
        move |tape, inputs| {
            let mut params = DsaParams::zeros(&cfg);
            for (slot, t) in params.learnable_mut().into_iter().zip(&inputs[1..]) {
                *slot = t.clone();
            }
            let x = tape.leaf(inputs[0].clone());
            let vars = params.bind(tape);
            let y = dsa_forward_on(tape, x, &vars, &mut params.bn_stats, &cfg, Mode::Train)?;
            let mut xs = vec![x];
            xs.extend(vars.all());
            Ok((xs, vec![y]))
        },
    )
}

fn kernel_case(cfg: DsaConfig, n: usize) -> GradCase {
    let param_shapes: Vec<Vec<usize>> = DsaParams::zeros(&cfg)
        .learnable()
        .iter()
        .map(|t| t.shape().to_vec())
        .collect();
    let ctx_channels = match cfg.context {
        ContextSource::Split => cfg.split_count(),
        ContextSource::Full => cfg.channels,
    };
    GradCase::new(
        "generate_kernel",
        move |rng| {
            let mut v = vec![uniform(&[n, ctx_channels, cfg.snippets], rng)];
            v.extend(param_shapes.iter().map(|s| uniform(s, rng)));
            v
        },
        move |tape, inputs| {
            let mut params = DsaParams::zeros(&cfg);
            for (slot, t) in params.learnable_mut().into_iter().zip(&inputs[1..]) {
                *slot = t.clone();
            }
            let ctx = tape.leaf(inputs[0].clone());
            let vars = params.bind(tape);
            let k = generate_kernel_on(tape, ctx, &vars, &mut params.bn_stats, &cfg, Mode::Train)?;
            let mut xs = vec![ctx];
            xs.extend(vars.all());
            Ok((xs, vec![k]))
        },
    )
}

/// Two-block network with DSA at position II of both blocks.
pub fn toy_net_case() -> GradCase {
    let spec = ToyNetSpec::two_block(Some(DsaConfig {
        beta: 0.5,
        ..DsaConfig::default()
    }));
    let shape = [3, spec.in_channels, 4, 1, 2, 2];
    let template = spec.clone();
    GradCase::new(
        "toy_net",
        move |rng| {
            let mut net = ToyNet::init(spec.clone(), rng).expect("valid spec");
            let mut v = vec![uniform(&shape, rng)];
            v.extend(net.learnable_mut().into_iter().map(|t| t.map(|x| x + 0.1 * x.signum())));
            v
        },
        move |tape, inputs| {
            let mut net = ToyNet::init(template.clone(), &mut rng::rng(0))?;
            for (slot, t) in net.learnable_mut().into_iter().zip(&inputs[1..]) {
                *slot = t.clone();
            }
            let x = tape.leaf(inputs[0].clone());
            let vars = net.bind(tape);
            let out = net.forward_on(tape, x, &vars, Mode::Train)?;
            let mut xs = vec![x];
            xs.extend(vars.all());
            Ok((xs, vec![out.snippet_logits, out.logits]))
        },
    )
}

/// Every differentiable operation plus the end-to-end module and network.
pub fn cases() -> Vec<GradCase> {
    let dsa_cfg = DsaConfig {
        beta: 0.5,
        ..DsaConfig::default()
    };
    vec![
        GradCase::simple(
            "add",
            |r| vec![uniform(&[2, 3], r), uniform(&[2, 3], r)],
            |t, x| Ok(vec![t.add(x[0], x[1])?]),
        ),
        GradCase::simple("relu", |r| vec![off_zero(&[3, 4], r)], |t, x| Ok(vec![t.relu(x[0])])),
        GradCase::simple(
            "scale",
            |r| vec![uniform(&[5], r)],
            |t, x| Ok(vec![t.scale(x[0], -1.5)]),
        ),
        GradCase::simple(
            "add_bias",
            |r| vec![uniform(&[3, 4], r), uniform(&[4], r)],
            |t, x| Ok(vec![t.add_bias(x[0], x[1])?]),
        ),
        GradCase::simple(
            "reshape",
            |r| vec![uniform(&[2, 6], r)],
            |t, x| Ok(vec![t.reshape(x[0], &[3, 4])?]),
        ),
        GradCase::simple("sum", |r| vec![uniform(&[2, 3], r)], |t, x| Ok(vec![t.sum(x[0])])),
        GradCase::simple(
            "matmul",
            |r| vec![uniform(&[3, 4], r), uniform(&[4, 2], r)],
            |t, x| Ok(vec![t.matmul(x[0], x[1])?]),
        ),
        GradCase::simple(
            "softmax",
            |r| vec![uniform(&[2, 3, 4], r)],
            |t, x| Ok(vec![t.softmax(x[0], 1)?, t.softmax(x[0], 2)?]),
        ),
        GradCase::simple(
            "global_avg_pool",
            |r| vec![uniform(&[2, 3, 2, 2, 2, 2], r)],
            |t, x| Ok(vec![t.global_avg_pool(x[0], &[axis::T, axis::H, axis::W])?]),
        ),
        GradCase::simple(
            "permute",
            |r| vec![uniform(&[2, 3, 4], r)],
            |t, x| Ok(vec![t.permute(x[0], &[2, 0, 1])?]),
        ),
        GradCase::simple(
            "batch_norm",
            |r| vec![uniform(&[4, 3, 2], r), uniform(&[3], r), uniform(&[3], r)],
            bn_train,
        ),
        GradCase::simple(
            "batch_norm_eval",
            |r| vec![uniform(&[4, 3, 2], r), uniform(&[3], r), uniform(&[3], r)],
            |t, x| {
                let mut stats = RunningStats {
                    mean: Tensor::from_vec(vec![0.1, -0.2, 0.3]),
                    var: Tensor::from_vec(vec![0.5, 1.5, 2.0]),
                };
                Ok(vec![t.batch_norm(x[0], x[1], x[2], Mode::Eval, &mut stats)?])
            },
        ),
        GradCase::simple(
            "conv_spatial",
            |r| vec![uniform(&[2, 2, 2, 1, 4, 4], r), uniform(&[3, 2, 3, 3], r)],
            |t, x| Ok(vec![t.conv_spatial(x[0], x[1], ConvGeometry::same(3))?]),
        ),
        GradCase::simple(
            "conv_spatial_strided",
            |r| vec![uniform(&[1, 2, 1, 2, 5, 5], r), uniform(&[2, 2, 3, 3], r)],
            |t, x| Ok(vec![t.conv_spatial(x[0], x[1], ConvGeometry::new(2, 1))?]),
        ),
        GradCase::simple(
            "conv_temporal",
            |r| vec![uniform(&[2, 2, 2, 4, 2, 2], r), uniform(&[3, 2, 3], r)],
            |t, x| Ok(vec![t.conv_temporal(x[0], x[1], ConvGeometry::same(3))?]),
        ),
        GradCase::simple(
            "split_channels",
            |r| vec![uniform(&[2, 5, 2, 1, 2, 2], r)],
            |t, x| {
                let (a, b) = t.split_channels(x[0], 2)?;
                Ok(vec![a, b])
            },
        ),
        GradCase::simple(
            "concat_channels",
            |r| vec![uniform(&[2, 2, 2, 1, 2, 2], r), uniform(&[2, 3, 2, 1, 2, 2], r)],
            |t, x| Ok(vec![t.concat_channels(x[0], x[1])?]),
        ),
        GradCase::simple(
            "cross_entropy",
            |r| vec![uniform(&[4, 3], r)],
            |t, x| Ok(vec![t.cross_entropy(x[0], &[0, 2, 1, 2])?]),
        ),
        GradCase::simple(
            "segment_conv",
            |r| vec![uniform(&[2, 3, 4, 1, 2, 2], r), uniform(&[2, 3, 3], r)],
            |t, x| Ok(vec![t.segment_conv(x[0], x[1])?]),
        ),
        GradCase::simple(
            "temporal_shift",
            |r| vec![uniform(&[2, 8, 2, 3, 2, 2], r)],
            |t, x| Ok(vec![t.temporal_shift(x[0], 0.25)?]),
        ),
        GradCase::simple(
            "consensus",
            |r| vec![uniform(&[2, 4, 3], r)],
            |t, x| Ok(vec![t.consensus(x[0])?]),
        ),
        kernel_case(dsa_cfg, 3),
        dsa_case("dsa_forward", dsa_cfg, [2, 8, 4, 2, 2, 2]),
        dsa_case(
            "dsa_forward_full_context",
            DsaConfig {
                context: ContextSource::Full,
                ..dsa_cfg
            },
            [2, 8, 4, 2, 2, 2],
        ),
        dsa_case(
            "dsa_forward_l5",
            DsaConfig {
                kernel_size: 5,
                snippets: 3,
                alpha: 1,
                ..dsa_cfg
            },
            [2, 8, 3, 1, 2, 2],
        ),
        toy_net_case(),
    ]
}

/// Case list with a wrong backward injected into the case called `op`.
pub fn cases_with_fault(op: &str) -> Result<Vec<GradCase>> {
    let mut all = cases();
    let case = all
        .iter_mut()
        .find(|c| c.name == op)
        .ok_or_else(|| invalid("gradcheck", format!("no case named {op:?}")))?;
    case.fault = Some(1.5);
    Ok(all)
}

/// Seeds `base, base + 1, ...`.
pub fn seeds(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base.wrapping_add(i)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub op: String,
    pub seeds: usize,
    pub worst_rel_error: f64,
    pub worst_seed: u64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub cases: Vec<CaseResult>,
    pub passed: bool,
}

/// Folds per-seed errors, listed as `(case index, seed, error)` in any
/// order, into one line per case.
pub fn summarize(cases: &[GradCase], errors: &[(usize, u64, f64)]) -> GradcheckReport {
    let results: Vec<CaseResult> = cases
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mine: Vec<_> = errors.iter().filter(|e| e.0 == i).collect();
            // NaN ranks above every finite error
            let key = |e: &&&(usize, u64, f64)| if e.2.is_nan() { f64::INFINITY } else { e.2 };
            let worst = mine.iter().max_by(|a, b| key(a).total_cmp(&key(b)));
            let (worst_seed, worst_rel_error) = worst.map_or((0, 0.0), |e| (e.1, e.2));
            CaseResult {
                op: c.name.clone(),
                seeds: mine.len(),
                worst_rel_error,
                worst_seed,
                passed: !mine.is_empty() && worst_rel_error < TOLERANCE,
            }
        })
        .collect();
    GradcheckReport {
        step: STEP,
        tolerance: TOLERANCE,
        passed: results.iter().all(|r| r.passed),
        cases: results,
    }
}

/// Runs every case on every seed, sequentially.
pub fn run(cases: &[GradCase], seeds: &[u64]) -> Result<GradcheckReport> {
    let mut errors = Vec::new();
    for (i, c) in cases.iter().enumerate() {
        for &s in seeds {
            errors.push((i, s, c.check(s)?));
        }
    }
    Ok(summarize(cases, &errors))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case(name: &str) -> GradCase {
        cases().into_iter().find(|c| c.name == name).unwrap()
    }

    #[test]
    fn names_are_unique() {
        let mut names: Vec<_> = cases().into_iter().map(|c| c.name).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn simple_ops_pass() {
        for name in ["add", "matmul", "softmax", "batch_norm", "segment_conv"] {
            let e = case(name).check(3).unwrap();
            assert!(e < TOLERANCE, "{name}: {e}");
        }
    }

    #[test]
    fn injected_fault_is_caught_and_named() {
        let faulty = cases_with_fault("matmul").unwrap();
        let i = faulty.iter().position(|c| c.name == "matmul").unwrap();
        let report = run(&faulty[i..=i], &[0]).unwrap();
        assert!(!report.passed);
        assert_eq!(report.cases[0].op, "matmul");
        assert!(report.cases[0].worst_rel_error > 0.1);
        assert!(cases_with_fault("nope").is_err());
    }

    #[test]
    fn summary_keeps_worst_seed() {
        let cs = vec![case("add")];
        let r = summarize(&cs, &[(0, 4, 1e-9), (0, 7, 2e-9), (0, 5, 1e-10)]);
        assert_eq!((r.cases[0].worst_seed, r.cases[0].seeds), (7, 3));
        let r = summarize(&cs, &[(0, 4, 1e-9), (0, 7, f64::NAN)]);
        assert!(!r.passed);
        assert_eq!(r.cases[0].worst_seed, 7);
    }
}
