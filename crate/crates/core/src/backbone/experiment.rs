use serde::{Deserialize, Serialize};

use crate::dsa::DsaConfig;
use crate::error::Result;
use crate::ops::Mode;
use crate::rng;

use super::block::Position;
use super::data::{make_order_dataset, OrderDataset};
use super::net::{permute_snippets, ToyNet, ToyNetSpec};
use super::train::{train_toy, TrainConfig, TrainReport};

/// Samples used for the permutation check.
pub const PERMUTATION_PROBE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderExperiment {
    pub samples: usize,
    pub train: TrainConfig,
    /// Configuration of the DSA net; the baseline uses the same with `beta = 0`.
    pub dsa: DsaConfig,
    pub position: Position,
}

impl Default for OrderExperiment {
    fn default() -> Self {
        Self {
            samples: 2000,
            train: TrainConfig {
                epochs: 15,
                ..TrainConfig::default()
            },
            dsa: DsaConfig::default(),
            position: Position::II,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderRun {
    pub seed: u64,
    pub baseline: TrainReport,
    pub dsa: TrainReport,
    /// DSA minus baseline holdout accuracy, in percentage points.
    pub gap_points: f64,
    pub baseline_permutation_invariant: bool,
    pub dsa_permutation_invariant: bool,
}

/// Whether the consensus logits on `x` are bitwise unchanged under every
/// reordering of its snippets.
pub fn permutation_invariant(net: &mut ToyNet, x: &crate::Tensor) -> Result<bool> {
    let u = x.shape()[2];
    let (_, reference) = net.forward(x, Mode::Eval)?;
    let mut order: Vec<usize> = (0..u).collect();
    // Heap's algorithm visits every permutation
    let mut c = vec![0; u];
    let mut i = 1;
    while i < u {
        if c[i] < i {
            let j = if i % 2 == 0 { 0 } else { c[i] };
            order.swap(j, i);
            let (_, logits) = net.forward(&permute_snippets(x, &order)?, Mode::Eval)?;
            if !logits.bitwise_eq(&reference) {
                return Ok(false);
            }
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(true)
}

/// The dataset and trained networks behind an [`OrderRun`].
#[derive(Debug, Clone)]
pub struct OrderArtifacts {
    pub data: OrderDataset,
    pub baseline: ToyNet,
    pub dsa: ToyNet,
}

fn train_one(cfg: &OrderExperiment, data: &OrderDataset, beta: f64, seed: u64) -> Result<(ToyNet, TrainReport, bool)> {
    let spec = ToyNetSpec::two_block_at(cfg.position, Some(DsaConfig { beta, ..cfg.dsa }));
    let mut net = ToyNet::init(spec, &mut rng::stream(seed, "init"))?;
    let report = train_toy(&mut net, data, &TrainConfig { seed, ..cfg.train })?;
    let (_, holdout) = data.split(cfg.train.holdout_fraction);
    let probe: Vec<usize> = holdout.into_iter().take(PERMUTATION_PROBE).collect();
    let (x, _) = data.batch(&probe);
    let invariant = permutation_invariant(&mut net, &x)?;
    Ok((net, report, invariant))
}

/// Trains a `beta = 0` baseline and a DSA net from identical seeds on the
/// same data.
pub fn run_order_experiment(cfg: &OrderExperiment, seed: u64) -> Result<(OrderRun, OrderArtifacts)> {
    let data = make_order_dataset(cfg.samples, seed)?;
    let (baseline_net, baseline, baseline_inv) = train_one(cfg, &data, 0.0, seed)?;
    let (dsa_net, dsa, dsa_inv) = train_one(cfg, &data, cfg.dsa.beta, seed)?;
    let run = OrderRun {
        seed,
        gap_points: 100.0 * (dsa.holdout_accuracy - baseline.holdout_accuracy),
        baseline,
        dsa,
        baseline_permutation_invariant: baseline_inv,
        dsa_permutation_invariant: dsa_inv,
    };
    Ok((
        run,
        OrderArtifacts {
            data,
            baseline: baseline_net,
            dsa: dsa_net,
        },
    ))
}
