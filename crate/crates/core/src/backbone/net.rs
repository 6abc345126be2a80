use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsa::DsaConfig;
use crate::error::{invalid, Result};
use crate::ops::{ConvGeometry, Mode};
use crate::tape::{Tape, Var};
use crate::tensor::{axis, Tensor};

use super::block::{run_block_on, BlockParams, BlockSpec, BlockVars, BnParams, Position};

/// Stem, residual blocks, per-snippet classifier, average consensus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyNetSpec {
    pub in_channels: usize,
    pub width: usize,
    pub blocks: Vec<BlockSpec>,
    pub classes: usize,
}

impl ToyNetSpec {
    /// Two TSM blocks of width 8 on 4-channel input, DSA at position II of
    /// each block when `dsa` is given.
    pub fn two_block(dsa: Option<DsaConfig>) -> Self {
        Self::two_block_at(Position::II, dsa)
    }

    pub fn two_block_at(position: Position, dsa: Option<DsaConfig>) -> Self {
        let width = 8;
        let block = |d: Option<DsaConfig>| match d {
            Some(cfg) => BlockSpec::tsm(width).with_dsa(position, DsaConfig { channels: width, ..cfg }),
            None => BlockSpec::tsm(width),
        };
        Self {
            in_channels: 4,
            width,
            blocks: vec![block(dsa), block(dsa)],
            classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate()?;
            if b.channels != self.width {
                return Err(invalid(
                    "toy_net",
                    format!("block {i} has {} channels, net width is {}", b.channels, self.width),
                ));
            }
        }
        if self.classes == 0 || self.width == 0 || self.in_channels == 0 {
            return Err(invalid("toy_net", "extents must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    pub spec: ToyNetSpec,
    pub stem: Tensor,
    pub stem_bn: BnParams,
    pub blocks: Vec<BlockParams>,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
}

#[derive(Debug, Clone)]
pub struct ToyNetVars {
    pub stem: Var,
    pub stem_bn: (Var, Var),
    pub blocks: Vec<BlockVars>,
    pub fc_w: Var,
    pub fc_b: Var,
}

impl ToyNetVars {
    /// Same order as [`ToyNet::learnable_mut`].
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.stem, self.stem_bn.0, self.stem_bn.1];
        for b in &self.blocks {
            v.extend(b.all());
        }
        v.extend([self.fc_w, self.fc_b]);
        v
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ToyNetOutput {
    /// `(N, U, classes)`
    pub snippet_logits: Var,
    /// `(N, classes)`
    pub logits: Var,
}

impl ToyNet {
    pub fn init<R: Rng + ?Sized>(spec: ToyNetSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let (cin, w, k) = (spec.in_channels, spec.width, spec.classes);
        let stem = Tensor::randn(&[w, cin, 3, 3], (2.0 / (cin * 9) as f64).sqrt(), rng);
        let blocks = spec.blocks.iter().map(|b| BlockParams::init(b, rng)).collect();
        let bound = 1.0 / (w as f64).sqrt();
        let fc_w = Tensor::uniform(&[w, k], -bound, bound, rng);
        Ok(Self {
            stem,
            stem_bn: BnParams::identity(w),
            blocks,
            fc_w,
            fc_b: Tensor::zeros(&[k]),
            spec,
        })
    }

    pub fn learnable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.stem, &mut self.stem_bn.gamma, &mut self.stem_bn.beta];
        for b in &mut self.blocks {
            v.extend(b.learnable_mut());
        }
        v.push(&mut self.fc_w);
        v.push(&mut self.fc_b);
        v
    }

    pub fn param_count(&self) -> usize {
        self.stem.numel()
            + 2 * self.stem_bn.gamma.numel()
            + self.blocks.iter().map(BlockParams::param_count).sum::<usize>()
            + self.fc_w.numel()
            + self.fc_b.numel()
    }

    /// Every tensor, running statistics included, under a stable name.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("stem.conv".to_string(), &self.stem),
            ("stem.bn.gamma".to_string(), &self.stem_bn.gamma),
            ("stem.bn.beta".to_string(), &self.stem_bn.beta),
            ("stem.bn.running_mean".to_string(), &self.stem_bn.stats.mean),
            ("stem.bn.running_var".to_string(), &self.stem_bn.stats.var),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named(&format!("block{i}")));
        }
        out.push(("fc.weight".to_string(), &self.fc_w));
        out.push(("fc.bias".to_string(), &self.fc_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("stem.conv".to_string(), &mut self.stem),
            ("stem.bn.gamma".to_string(), &mut self.stem_bn.gamma),
            ("stem.bn.beta".to_string(), &mut self.stem_bn.beta),
            ("stem.bn.running_mean".to_string(), &mut self.stem_bn.stats.mean),
            ("stem.bn.running_var".to_string(), &mut self.stem_bn.stats.var),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.named_mut(&format!("block{i}")));
        }
        out.push(("fc.weight".to_string(), &mut self.fc_w));
        out.push(("fc.bias".to_string(), &mut self.fc_b));
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> ToyNetVars {
        ToyNetVars {
            stem: tape.leaf(self.stem.clone()),
            stem_bn: (
                tape.leaf(self.stem_bn.gamma.clone()),
                tape.leaf(self.stem_bn.beta.clone()),
            ),
            blocks: self.blocks.iter().map(|b| b.bind(tape)).collect(),
            fc_w: tape.leaf(self.fc_w.clone()),
            fc_b: tape.leaf(self.fc_b.clone()),
        }
    }

    /// Records the network on `tape` for an `(N, C_in, U, T, H, W)` input.
    pub fn forward_on(&mut self, tape: &mut Tape, x: Var, vars: &ToyNetVars, mode: Mode) -> Result<ToyNetOutput> {
        let [n, c, u, ..] = tape.value(x).expect_video("toy_net")?;
        if c != self.spec.in_channels {
            return Err(invalid(
                "toy_net",
                format!("input has {c} channels, net expects {}", self.spec.in_channels),
            ));
        }
        let mut h = tape.conv_spatial(x, vars.stem, ConvGeometry::same(3))?;
        h = tape.batch_norm(h, vars.stem_bn.0, vars.stem_bn.1, mode, &mut self.stem_bn.stats)?;
        h = tape.relu(h);
        for ((spec, params), bv) in self.spec.blocks.iter().zip(&mut self.blocks).zip(&vars.blocks) {
            h = run_block_on(tape, h, spec, params, bv, mode)?;
        }
        let pooled = tape.global_avg_pool(h, &[axis::T, axis::H, axis::W])?;
        let per_snippet = tape.permute(pooled, &[0, 2, 1])?;
        let rows = tape.reshape(per_snippet, &[n * u, self.spec.width])?;
        let scores = tape.matmul(rows, vars.fc_w)?;
        let scores = tape.add_bias(scores, vars.fc_b)?;
        let snippet_logits = tape.reshape(scores, &[n, u, self.spec.classes])?;
        let logits = tape.consensus(snippet_logits)?;
        Ok(ToyNetOutput { snippet_logits, logits })
    }

    /// Forward-only evaluation returning `(snippet_logits, logits)`.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let vars = self.bind(&mut tape);
        let out = self.forward_on(&mut tape, xv, &vars, mode)?;
        Ok((tape.value(out.snippet_logits).clone(), tape.value(out.logits).clone()))
    }
}

/// Reorders the snippet axis of a video: snippet `u` of the result is
/// snippet `order[u]` of `x`.
pub fn permute_snippets(x: &Tensor, order: &[usize]) -> Result<Tensor> {
    let [n, c, u, ..] = x.expect_video("permute_snippets")?;
    let mut seen = vec![false; u];
    if order.len() != u || !order.iter().all(|&o| o < u && !std::mem::replace(&mut seen[o], true)) {
        return Err(invalid(
            "permute_snippets",
            format!("{order:?} is not a permutation of 0..{u}"),
        ));
    }
    let block = x.numel() / (n * c * u).max(1);
    let mut out = Vec::with_capacity(x.numel());
    for plane in x.data().chunks(u * block) {
        for &o in order {
            out.extend_from_slice(&plane[o * block..(o + 1) * block]);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Mean of `(N, U, K)` snippet scores over `U`.
///
/// Each mean is accumulated in ascending value order, so the result does
/// not depend on the order of snippets, bit for bit.
pub fn consensus(logits: &Tensor) -> Result<Tensor> {
    let &[n, u, k] = logits.shape() else {
        return Err(invalid(
            "consensus",
            format!("expected (N, U, K), got {:?}", logits.shape()),
        ));
    };
    if u == 0 {
        return Err(invalid("consensus", "no snippets"));
    }
    let mut out = Tensor::zeros(&[n, k]);
    let mut column = vec![0.0; u];
    for b in 0..n {
        for c in 0..k {
            for (s, v) in column.iter_mut().enumerate() {
                *v = logits.data()[(b * u + s) * k + c];
            }
            column.sort_by(f64::total_cmp);
            out.data_mut()[b * k + c] = column.iter().sum::<f64>() / u as f64;
        }
    }
    Ok(out)
}

impl Tape {
    pub fn consensus(&mut self, logits: Var) -> Result<Var> {
        let value = consensus(self.value(logits))?;
        Ok(self.record(
            "consensus",
            &[logits],
            value,
            Box::new(|g, inputs, _| {
                let &[n, u, k] = inputs[0].shape() else { unreachable!() };
                let mut d = Tensor::zeros(&[n, u, k]);
                for b in 0..n {
                    for s in 0..u {
                        for c in 0..k {
                            d.data_mut()[(b * u + s) * k + c] = g.data()[b * k + c] / u as f64;
                        }
                    }
                }
                vec![d]
            }),
        ))
    }
}
