use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsa::{dsa_forward_on, DsaConfig, DsaParams, DsaVars};
use crate::error::{invalid, Result};
use crate::ops::{ConvGeometry, Mode, RunningStats};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::shift::TSM_SHIFT_FRACTION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    /// `[kt×1², width] → [1×3², width] → [1×1², channels]`
    I3dBottleneck,
    /// temporal shift, then `[1×3², C] → [1×3², C]`
    TsmBasic,
}

/// Where DSA sits inside a residual branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Position {
    /// Before the first convolution.
    I,
    /// Between the first and second convolutions.
    II,
    /// Between the second and third convolutions (bottleneck only).
    III,
    /// After the last convolution, before the residual addition.
    IV,
}

impl std::str::FromStr for Position {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Self::I),
            "II" | "2" => Ok(Self::II),
            "III" | "3" => Ok(Self::III),
            "IV" | "4" => Ok(Self::IV),
            _ => Err(invalid("position", format!("unknown DSA position {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DsaPlacement {
    pub position: Position,
    pub cfg: DsaConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    /// Input and output channels (identity shortcut).
    pub channels: usize,
    /// Inner width of a bottleneck; equals `channels` for TSM blocks.
    pub width: usize,
    /// Use a 3-tap temporal first convolution instead of 1×1².
    pub temporal: bool,
    pub dsa: Option<DsaPlacement>,
}

impl BlockSpec {
    pub fn tsm(channels: usize) -> Self {
        Self {
            kind: BlockKind::TsmBasic,
            channels,
            width: channels,
            temporal: false,
            dsa: None,
        }
    }

    pub fn i3d(channels: usize, width: usize, temporal: bool) -> Self {
        Self {
            kind: BlockKind::I3dBottleneck,
            channels,
            width,
            temporal,
            dsa: None,
        }
    }

    pub fn with_dsa(mut self, position: Position, cfg: DsaConfig) -> Self {
        self.dsa = Some(DsaPlacement { position, cfg });
        self
    }

    /// Channel width seen by DSA at `position`.
    pub fn host_channels(&self, position: Position) -> usize {
        match position {
            Position::I | Position::IV => self.channels,
            Position::II | Position::III => self.width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == BlockKind::TsmBasic && self.width != self.channels {
            return Err(invalid("block", "TSM basic blocks have width == channels"));
        }
        if self.kind == BlockKind::TsmBasic && self.temporal {
            return Err(invalid("block", "TSM basic blocks have no temporal convolution"));
        }
        if let Some(d) = &self.dsa {
            if d.position == Position::III && self.kind == BlockKind::TsmBasic {
                return Err(invalid("block", "position III needs a three-convolution block"));
            }
            d.cfg.validate()?;
            let host = self.host_channels(d.position);
            if d.cfg.channels != host {
                return Err(invalid(
                    "block",
                    format!("DSA configured for {} channels, host has {host}", d.cfg.channels),
                ));
            }
        }
        Ok(())
    }

    /// Convolution weight shapes in execution order.
    pub fn conv_shapes(&self) -> Vec<Vec<usize>> {
        let (c, w) = (self.channels, self.width);
        match self.kind {
            BlockKind::TsmBasic => vec![vec![c, c, 3, 3], vec![c, c, 3, 3]],
            BlockKind::I3dBottleneck => vec![
                if self.temporal { vec![w, c, 3] } else { vec![w, c, 1, 1] },
                vec![w, w, 3, 3],
                vec![c, w, 1, 1],
            ],
        }
    }

    fn dsa_at(&self, position: Position) -> Option<&DsaConfig> {
        self.dsa.as_ref().filter(|d| d.position == position).map(|d| &d.cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: RunningStats,
}

impl BnParams {
    pub fn identity(features: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[features]),
            beta: Tensor::zeros(&[features]),
            stats: RunningStats::new(features),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub convs: Vec<Tensor>,
    pub bns: Vec<BnParams>,
    pub dsa: Option<DsaParams>,
}

#[derive(Debug, Clone)]
pub struct BlockVars {
    pub convs: Vec<Var>,
    pub bns: Vec<(Var, Var)>,
    pub dsa: Option<DsaVars>,
}

impl BlockVars {
    /// Same order as [`BlockParams::learnable_mut`].
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.convs.clone();
        for &(g, b) in &self.bns {
            v.extend([g, b]);
        }
        if let Some(d) = &self.dsa {
            v.extend(d.all());
        }
        v
    }
}

impl BlockParams {
    /// Kaiming-normal convolutions, identity batch norm.
    pub fn init<R: Rng + ?Sized>(spec: &BlockSpec, rng: &mut R) -> Self {
        let convs = spec
            .conv_shapes()
            .iter()
            .map(|s| {
                let fan_in: usize = s[1..].iter().product();
                Tensor::randn(s, (2.0 / fan_in as f64).sqrt(), rng)
            })
            .collect();
        let mut p = Self::zeros(spec);
        p.convs = convs;
        p.dsa = spec.dsa.as_ref().map(|d| DsaParams::init(&d.cfg, rng));
        p
    }

    /// Zero convolutions, identity batch norm, zero DSA generator.
    pub fn zeros(spec: &BlockSpec) -> Self {
        let shapes = spec.conv_shapes();
        Self {
            bns: shapes.iter().map(|s| BnParams::identity(s[0])).collect(),
            convs: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            dsa: spec.dsa.as_ref().map(|d| DsaParams::zeros(&d.cfg)),
        }
    }

    pub fn learnable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.convs.iter_mut().collect();
        for bn in &mut self.bns {
            v.push(&mut bn.gamma);
            v.push(&mut bn.beta);
        }
        if let Some(d) = &mut self.dsa {
            v.extend(d.learnable_mut());
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(Tensor::numel).sum::<usize>()
            + self.bns.iter().map(|b| 2 * b.gamma.numel()).sum::<usize>()
            + self.dsa.as_ref().map_or(0, DsaParams::param_count)
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("{prefix}.conv{}", i + 1), c));
        }
        for (i, bn) in self.bns.iter().enumerate() {
            let p = format!("{prefix}.bn{}", i + 1);
            out.push((format!("{p}.gamma"), &bn.gamma));
            out.push((format!("{p}.beta"), &bn.beta));
            out.push((format!("{p}.running_mean"), &bn.stats.mean));
            out.push((format!("{p}.running_var"), &bn.stats.var));
        }
        if let Some(d) = &self.dsa {
            for (name, t) in d.named() {
                out.push((format!("{prefix}.dsa.{name}"), t));
            }
        }
        out
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter_mut().enumerate() {
            out.push((format!("{prefix}.conv{}", i + 1), c));
        }
        for (i, bn) in self.bns.iter_mut().enumerate() {
            let p = format!("{prefix}.bn{}", i + 1);
            out.push((format!("{p}.gamma"), &mut bn.gamma));
            out.push((format!("{p}.beta"), &mut bn.beta));
            out.push((format!("{p}.running_mean"), &mut bn.stats.mean));
            out.push((format!("{p}.running_var"), &mut bn.stats.var));
        }
        if let Some(d) = &mut self.dsa {
            for (name, t) in d.named_mut() {
                out.push((format!("{prefix}.dsa.{name}"), t));
            }
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> BlockVars {
        BlockVars {
            convs: self.convs.iter().map(|c| tape.leaf(c.clone())).collect(),
            bns: self
                .bns
                .iter()
                .map(|b| (tape.leaf(b.gamma.clone()), tape.leaf(b.beta.clone())))
                .collect(),
            dsa: self.dsa.as_ref().map(|d| d.bind(tape)),
        }
    }

    pub fn validate(&self, spec: &BlockSpec) -> Result<()> {
        let shapes = spec.conv_shapes();
        let conv_ok =
            shapes.len() == self.convs.len() && shapes.iter().zip(&self.convs).all(|(s, c)| c.shape() == s.as_slice());
        let bn_ok =
            self.bns.len() == shapes.len() && shapes.iter().zip(&self.bns).all(|(s, b)| b.gamma.numel() == s[0]);
        if !conv_ok || !bn_ok {
            return Err(invalid("block", "parameters do not match block spec"));
        }
        match (&spec.dsa, &self.dsa) {
            (Some(d), Some(p)) => p.validate(&d.cfg),
            (None, None) => Ok(()),
            _ => Err(invalid(
                "block",
                "DSA parameters present without placement or vice versa",
            )),
        }
    }
}

fn conv(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    match tape.shape(w).len() {
        3 => tape.conv_temporal(x, w, ConvGeometry::same(tape.shape(w)[2])),
        _ => tape.conv_spatial(x, w, ConvGeometry::same(tape.shape(w)[2])),
    }
}

/// Records one residual block.
pub fn run_block_on(
    tape: &mut Tape,
    x: Var,
    spec: &BlockSpec,
    params: &mut BlockParams,
    vars: &BlockVars,
    mode: Mode,
) -> Result<Var> {
    let [_, c, ..] = tape.value(x).expect_video("run_block")?;
    if c != spec.channels {
        return Err(invalid(
            "run_block",
            format!("input has {c} channels, block expects {}", spec.channels),
        ));
    }
    let n_convs = params.convs.len();
    let apply_dsa = |tape: &mut Tape, h: Var, pos: Position, params: &mut BlockParams| -> Result<Var> {
        match (spec.dsa_at(pos), params.dsa.as_mut(), vars.dsa.as_ref()) {
            (Some(cfg), Some(p), Some(v)) => dsa_forward_on(tape, h, v, &mut p.bn_stats, cfg, mode),
            _ => Ok(h),
        }
    };

    let mut h = x;
    if spec.kind == BlockKind::TsmBasic {
        h = tape.temporal_shift(h, TSM_SHIFT_FRACTION)?;
    }
    h = apply_dsa(tape, h, Position::I, params)?;
    for i in 0..n_convs {
        h = conv(tape, h, vars.convs[i])?;
        let (g, b) = vars.bns[i];
        h = tape.batch_norm(h, g, b, mode, &mut params.bns[i].stats)?;
        if i + 1 < n_convs {
            h = tape.relu(h);
            let pos = if i == 0 { Position::II } else { Position::III };
            h = apply_dsa(tape, h, pos, params)?;
        }
    }
    h = apply_dsa(tape, h, Position::IV, params)?;
    let sum = tape.add(h, x)?;
    Ok(tape.relu(sum))
}

/// Forward-only block evaluation.
pub fn run_block(x: &Tensor, spec: &BlockSpec, params: &mut BlockParams, mode: Mode) -> Result<Tensor> {
    spec.validate()?;
    params.validate(spec)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let vars = params.bind(&mut tape);
    let y = run_block_on(&mut tape, xv, spec, params, &vars, mode)?;
    Ok(tape.value(y).clone())
}
