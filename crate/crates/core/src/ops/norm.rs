//! Batch normalization over channel axis 1.
//!
//! Statistics for feature `f` are taken over every element whose axis-1
//! index is `f`: for a `(B, F)` matrix that is the batch of rows, for a
//! `(N, C, U, T, H, W)` video feature it is everything but the channel.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::ops::around_axis;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[features]),
            var: Tensor::ones(&[features]),
        }
    }

    pub fn features(&self) -> usize {
        self.mean.numel()
    }
}

/// Saved per-feature quantities needed by the backward pass.
struct Saved {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

fn check(x: &Tensor, gamma: &Tensor, beta: &Tensor, stats: &RunningStats) -> Result<usize> {
    if x.rank() < 2 {
        return Err(invalid("batch_norm", format!("input rank {} < 2", x.rank())));
    }
    let f = x.shape()[1];
    for p in [gamma, beta, &stats.mean, &stats.var] {
        if p.shape() != [f] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: x.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    Ok(f)
}

fn forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, mode: Mode, stats: &mut RunningStats) -> Result<(Tensor, Saved)> {
    let f = check(x, gamma, beta, stats)?;
    let (outer, _, inner) = around_axis(x.shape(), 1);
    let count = outer * inner;
    let xd = x.data();
    let at = |o: usize, c: usize, i: usize| (o * f + c) * inner + i;

    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Train => {
            if count == 0 {
                return Err(invalid("batch_norm", "empty batch"));
            }
            let mut mean = vec![0.0; f];
            let mut var = vec![0.0; f];
            for c in 0..f {
                let mut s = 0.0;
                for o in 0..outer {
                    for i in 0..inner {
                        s += xd[at(o, c, i)];
                    }
                }
                let m = s / count as f64;
                let mut sq = 0.0;
                for o in 0..outer {
                    for i in 0..inner {
                        let d = xd[at(o, c, i)] - m;
                        sq += d * d;
                    }
                }
                mean[c] = m;
                var[c] = sq / count as f64;
            }
            let unbias = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            for c in 0..f {
                let rm = &mut stats.mean.data_mut()[c];
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[c];
                let rv = &mut stats.var.data_mut()[c];
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[c] * unbias;
            }
            (mean, var)
        }
        Mode::Eval => (stats.mean.data().to_vec(), stats.var.data().to_vec()),
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    {
        let (hd, yd) = (xhat.data_mut(), y.data_mut());
        for o in 0..outer {
            for c in 0..f {
                let (g, b) = (gamma.data()[c], beta.data()[c]);
                for i in 0..inner {
                    let k = at(o, c, i);
                    let h = (xd[k] - mean[c]) * inv_std[c];
                    hd[k] = h;
                    yd[k] = g * h + b;
                }
            }
        }
    }
    Ok((y, Saved { xhat, inv_std }))
}

/// Forward-only batch normalization; train mode updates `stats`.
pub fn batch_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, mode: Mode, stats: &mut RunningStats) -> Result<Tensor> {
    forward(x, gamma, beta, mode, stats).map(|(y, _)| y)
}

impl Tape {
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: Mode, stats: &mut RunningStats) -> Result<Var> {
        let (y, saved) = forward(self.value(x), self.value(gamma), self.value(beta), mode, stats)?;
        Ok(self.record(
            "batch_norm",
            &[x, gamma, beta],
            y,
            Box::new(move |g, inputs, _| {
                let shape = inputs[0].shape();
                let f = shape[1];
                let (outer, _, inner) = around_axis(shape, 1);
                let count = (outer * inner) as f64;
                let at = |o: usize, c: usize, i: usize| (o * f + c) * inner + i;
                let (gd, hd) = (g.data(), saved.xhat.data());
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                for c in 0..f {
                    for o in 0..outer {
                        for i in 0..inner {
                            let k = at(o, c, i);
                            dbeta[c] += gd[k];
                            dgamma[c] += gd[k] * hd[k];
                        }
                    }
                }
                let mut dx = Tensor::zeros(shape);
                let dxd = dx.data_mut();
                for c in 0..f {
                    let scale = inputs[1].data()[c] * saved.inv_std[c];
                    for o in 0..outer {
                        for i in 0..inner {
                            let k = at(o, c, i);
                            dxd[k] = match mode {
                                Mode::Train => scale * (gd[k] - dbeta[c] / count - hd[k] * dgamma[c] / count),
                                Mode::Eval => scale * gd[k],
                            };
                        }
                    }
                }
                vec![dx, Tensor::from_vec(dgamma), Tensor::from_vec(dbeta)]
            }),
        ))
    }
}
