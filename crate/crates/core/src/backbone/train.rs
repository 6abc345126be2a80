use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::rng;
use crate::tape::Tape;

use super::data::OrderDataset;
use super::net::ToyNet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.1,
            batch_size: 32,
            seed: 0,
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch; absent before training.
    pub mean_loss: Option<f64>,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Entry 0 is the untrained network.
    pub history: Vec<EpochRecord>,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
}

/// Eval-mode accuracy of the consensus prediction over `indices`.
pub fn evaluate(net: &mut ToyNet, data: &OrderDataset, indices: &[usize], batch_size: usize) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk);
        let (_, logits) = net.forward(&x, Mode::Eval)?;
        let k = logits.shape()[1];
        for (row, &label) in logits.data().chunks(k).zip(&labels) {
            // first maximum wins ties
            let pred = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            correct += usize::from(pred == label);
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Mini-batch SGD on the cross-entropy of the consensus logits.
pub fn train_toy(net: &mut ToyNet, data: &OrderDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    let (mut train_idx, holdout_idx) = data.split(cfg.holdout_fraction);
    let eval_idx = train_idx.clone();
    let mut shuffle_rng = rng::stream(cfg.seed, "shuffle");
    let eval = |net: &mut ToyNet, epoch: usize, mean_loss: Option<f64>| -> Result<EpochRecord> {
        Ok(EpochRecord {
            epoch,
            mean_loss,
            train_accuracy: evaluate(net, data, &eval_idx, 128)?,
            holdout_accuracy: evaluate(net, data, &holdout_idx, 128)?,
        })
    };
    let mut history = vec![eval(net, 0, None)?];
    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in train_idx.chunks(cfg.batch_size.max(1)).enumerate() {
            let (x, labels) = data.batch(chunk);
            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let vars = net.bind(&mut tape);
            let out = net.forward_on(&mut tape, xv, &vars, Mode::Train)?;
            let loss = tape.cross_entropy(out.logits, &labels)?;
            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: loss_value,
                });
            }
            let grads = tape.backward(loss)?;
            for (param, var) in net.learnable_mut().into_iter().zip(vars.all()) {
                if let Some(g) = grads.get(var) {
                    for (p, d) in param.data_mut().iter_mut().zip(g.data()) {
                        *p -= cfg.lr * d;
                    }
                }
            }
            total += loss_value;
            steps += 1;
        }
        let record = eval(net, epoch, Some(total / steps.max(1) as f64))?;
        log::info!(
            "epoch {epoch}: loss {:.4} train {:.3} holdout {:.3}",
            total / steps.max(1) as f64,
            record.train_accuracy,
            record.holdout_accuracy
        );
        history.push(record);
    }
    let last = history.last().unwrap();
    Ok(TrainReport {
        train_accuracy: last.train_accuracy,
        holdout_accuracy: last.holdout_accuracy,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{make_order_dataset, ToyNetSpec};
    use crate::dsa::DsaConfig;

    #[test]
    fn zero_learning_rate_leaves_parameters_learnable_untouched() {
        let data = make_order_dataset(40, 3).unwrap();
        let mut net = ToyNet::init(ToyNetSpec::two_block(Some(DsaConfig::default())), &mut rng::rng(1)).unwrap();
        let before: Vec<_> = net.learnable_mut().into_iter().map(|t| t.clone()).collect();
        let cfg = TrainConfig {
            epochs: 1,
            lr: 0.0,
            batch_size: 8,
            ..TrainConfig::default()
        };
        train_toy(&mut net, &data, &cfg).unwrap();
        let after: Vec<_> = net.learnable_mut().into_iter().map(|t| t.clone()).collect();
        assert!(before.iter().zip(&after).all(|(a, b)| a.bitwise_eq(b)));
    }

    #[test]
    fn divergence_is_reported() {
        let data = make_order_dataset(16, 3).unwrap();
        let mut net = ToyNet::init(ToyNetSpec::two_block(None), &mut rng::rng(1)).unwrap();
        net.fc_w.data_mut()[0] = f64::INFINITY;
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_toy(&mut net, &data, &cfg),
            Err(Error::Divergence { .. })
        ));
    }
}
