use serde::{Deserialize, Serialize};

use super::arch::{ArchSpec, BlockType, StageSpec};
use super::report::{CostLine, CostReport, DsaOverhead, DsaOverheadLine};
use crate::backbone::Position;
use crate::dsa::{dsa_flops, dsa_param_count, DsaConfig};
use crate::error::{invalid, Result};

/// `[C, T, H, W]` of one snippet.
pub type FeatureShape = [usize; 4];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    /// 3D convolution with `k / 2` padding per axis.
    Conv {
        name: String,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        bias: bool,
        bn: bool,
    },
    MaxPool {
        name: String,
        kernel: [usize; 3],
        stride: [usize; 3],
    },
    GlobalAvgPool {
        name: String,
    },
    Linear {
        name: String,
        inputs: usize,
        outputs: usize,
    },
}

impl Layer {
    pub fn name(&self) -> &str {
        match self {
            Layer::Conv { name, .. }
            | Layer::MaxPool { name, .. }
            | Layer::GlobalAvgPool { name }
            | Layer::Linear { name, .. } => name,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::MaxPool { .. } => "maxpool",
            Layer::GlobalAvgPool { .. } => "avgpool",
            Layer::Linear { .. } => "linear",
        }
    }

    fn conv(name: String, cin: usize, cout: usize, kernel: [usize; 3], stride: [usize; 3]) -> Self {
        Layer::Conv {
            name,
            cin,
            cout,
            kernel,
            stride,
            bias: false,
            bn: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerCost {
    pub macs: u64,
    pub params: u64,
    pub output: FeatureShape,
}

fn extent(op: &'static str, input: usize, k: usize, s: usize) -> Result<usize> {
    let pad = k / 2;
    if s == 0 || k == 0 {
        return Err(invalid(op, "kernel and stride must be positive"));
    }
    if input + 2 * pad < k {
        return Err(invalid(
            op,
            format!("kernel {k} exceeds padded extent {}", input + 2 * pad),
        ));
    }
    Ok((input + 2 * pad - k) / s + 1)
}

fn spatial_out(op: &'static str, input: FeatureShape, kernel: [usize; 3], stride: [usize; 3]) -> Result<[usize; 3]> {
    Ok([
        extent(op, input[1], kernel[0], stride[0])?,
        extent(op, input[2], kernel[1], stride[1])?,
        extent(op, input[3], kernel[2], stride[2])?,
    ])
}

/// Per-sample, per-snippet cost of one layer on a `[C, T, H, W]` input.
pub fn layer_cost(layer: &Layer, input: FeatureShape) -> Result<LayerCost> {
    let u = |v: usize| v as u64;
    match layer {
        Layer::Conv {
            cin,
            cout,
            kernel,
            stride,
            bias,
            bn,
            ..
        } => {
            if input[0] != *cin {
                return Err(invalid("conv", format!("expects {cin} channels, got {}", input[0])));
            }
            let [t, h, w] = spatial_out("conv", input, *kernel, *stride)?;
            let taps = u(*cin) * u(kernel.iter().product());
            let macs = u(*cout) * taps * u(t * h * w);
            let params = u(*cout) * taps + if *bias { u(*cout) } else { 0 } + if *bn { 2 * u(*cout) } else { 0 };
            Ok(LayerCost {
                macs,
                params,
                output: [*cout, t, h, w],
            })
        }
        Layer::MaxPool { kernel, stride, .. } => {
            let [t, h, w] = spatial_out("maxpool", input, *kernel, *stride)?;
            Ok(LayerCost {
                macs: 0,
                params: 0,
                output: [input[0], t, h, w],
            })
        }
        Layer::GlobalAvgPool { .. } => Ok(LayerCost {
            macs: 0,
            params: 0,
            output: [input[0], 1, 1, 1],
        }),
        Layer::Linear { inputs, outputs, .. } => {
            if input != [*inputs, 1, 1, 1] {
                return Err(invalid(
                    "linear",
                    format!("expects a pooled [{inputs}, 1, 1, 1] input, got {input:?}"),
                ));
            }
            Ok(LayerCost {
                macs: u(*inputs) * u(*outputs),
                params: u(*inputs) * u(*outputs) + u(*outputs),
                output: [*outputs, 1, 1, 1],
            })
        }
    }
}

/// Shapes around one residual block; `mid` is the feature between the first
/// and second convolutions, `inner` between the second and third.
#[derive(Debug, Clone)]
struct BlockGeometry {
    name: String,
    block: BlockType,
    input: FeatureShape,
    mid: FeatureShape,
    inner: FeatureShape,
    output: FeatureShape,
    layers: Vec<Layer>,
}

fn stage_blocks(stage: &StageSpec, mut input: FeatureShape) -> Result<Vec<BlockGeometry>> {
    let mut blocks = Vec::with_capacity(stage.repeat);
    for b in 0..stage.repeat {
        let name = format!("{}.{b}", stage.name);
        let (st, ss) = if b == 0 {
            (stage.stride[0], stage.stride[1])
        } else {
            (1, 1)
        };
        let (w, c, kt) = (stage.width, stage.channels, stage.temporal_kernel);
        let mut layers = match stage.block {
            BlockType::Bottleneck => vec![
                Layer::conv(format!("{name}.conv_a"), input[0], w, [kt, 1, 1], [1, 1, 1]),
                Layer::conv(format!("{name}.conv_b"), w, w, [1, 3, 3], [st, ss, ss]),
                Layer::conv(format!("{name}.conv_c"), w, c, [1, 1, 1], [1, 1, 1]),
            ],
            BlockType::Basic => vec![
                Layer::conv(format!("{name}.conv_a"), input[0], w, [kt, 3, 3], [st, ss, ss]),
                Layer::conv(format!("{name}.conv_b"), w, c, [kt, 3, 3], [1, 1, 1]),
            ],
        };
        let mut shapes = Vec::with_capacity(layers.len());
        let mut x = input;
        for layer in &layers {
            x = layer_cost(layer, x)?.output;
            shapes.push(x);
        }
        let output = x;
        if input[0] != c || st != 1 || ss != 1 {
            layers.push(Layer::conv(
                format!("{name}.shortcut"),
                input[0],
                c,
                [1, 1, 1],
                [st, ss, ss],
            ));
            let projected = layer_cost(layers.last().unwrap(), input)?.output;
            if projected != output {
                return Err(invalid(
                    "arch",
                    format!("{name}: shortcut {projected:?} vs branch {output:?}"),
                ));
            }
        }
        blocks.push(BlockGeometry {
            name,
            block: stage.block,
            input,
            mid: shapes[0],
            inner: shapes[shapes.len() - 2],
            output,
            layers,
        });
        input = output;
    }
    Ok(blocks)
}

struct Lowered {
    stem: Vec<Layer>,
    stages: Vec<(String, Vec<BlockGeometry>)>,
    head: Vec<Layer>,
}

fn lower(arch: &ArchSpec, frames: usize, resolution: usize) -> Result<Lowered> {
    arch.validate()?;
    let input = [arch.input_channels, frames, resolution, resolution];
    let mut stem = vec![Layer::conv(
        "stem".into(),
        arch.input_channels,
        arch.stem.channels,
        arch.stem.kernel,
        arch.stem.stride,
    )];
    if let Some(p) = &arch.pool {
        stem.push(Layer::MaxPool {
            name: "pool".into(),
            kernel: p.kernel,
            stride: p.stride,
        });
    }
    let mut x = input;
    for layer in &stem {
        x = layer_cost(layer, x)?.output;
    }
    let mut stages = Vec::with_capacity(arch.stages.len());
    for stage in &arch.stages {
        let blocks = stage_blocks(stage, x)?;
        x = blocks.last().map_or(x, |b| b.output);
        stages.push((stage.name.clone(), blocks));
    }
    let head = if arch.classes == 0 {
        Vec::new()
    } else {
        vec![
            Layer::GlobalAvgPool { name: "avgpool".into() },
            Layer::Linear {
                name: "fc".into(),
                inputs: x[0],
                outputs: arch.classes,
            },
        ]
    };
    Ok(Lowered { stem, stages, head })
}

impl ArchSpec {
    /// Output `[T, H, W]` of the stem, the pool and every stage.
    pub fn output_sizes(&self, frames: usize, resolution: usize) -> Result<Vec<(String, [usize; 3])>> {
        let lowered = lower(self, frames, resolution)?;
        let mut x = [self.input_channels, frames, resolution, resolution];
        let mut out = Vec::new();
        for layer in &lowered.stem {
            x = layer_cost(layer, x)?.output;
            out.push((layer.name().to_string(), [x[1], x[2], x[3]]));
        }
        for (name, blocks) in &lowered.stages {
            if let Some(b) = blocks.last() {
                out.push((name.clone(), [b.output[1], b.output[2], b.output[3]]));
            }
        }
        Ok(out)
    }

    /// Compares [`ArchSpec::output_sizes`] at the reference input against the
    /// declared `output_size` entries.
    pub fn check_output_sizes(&self) -> Result<()> {
        let r = self.reference_input;
        let actual = self.output_sizes(r.frames, r.resolution)?;
        let declared = std::iter::once(("stem", self.stem.output_size))
            .chain(self.pool.iter().map(|p| ("pool", p.output_size)))
            .chain(self.stages.iter().map(|s| (s.name.as_str(), s.output_size)));
        for (name, want) in declared {
            let Some(want) = want else { continue };
            let got = actual.iter().find(|(n, _)| n == name).map(|(_, s)| *s);
            if got != Some(want) {
                return Err(invalid("arch", format!("{name}: declared {want:?}, computed {got:?}")));
            }
        }
        Ok(())
    }
}

/// Cost of one clip of `snippets` snippets, each `frames × resolution²`.
pub fn arch_cost(arch: &ArchSpec, frames: usize, resolution: usize, snippets: usize) -> Result<CostReport> {
    if frames == 0 || resolution == 0 || snippets == 0 {
        return Err(invalid("arch_cost", "frames, resolution and snippets must be positive"));
    }
    let lowered = lower(arch, frames, resolution)?;
    let mut x = [arch.input_channels, frames, resolution, resolution];
    let mut lines = Vec::new();
    let mut push = |layer: &Layer, x: &mut FeatureShape, head: bool| -> Result<()> {
        let c = layer_cost(layer, *x)?;
        *x = c.output;
        lines.push(CostLine {
            name: layer.name().to_string(),
            kind: layer.kind().to_string(),
            output: c.output,
            macs: c.macs,
            params: c.params,
            head,
        });
        Ok(())
    };
    for layer in &lowered.stem {
        push(layer, &mut x, false)?;
    }
    for (_, blocks) in &lowered.stages {
        for b in blocks {
            let mut y = b.input;
            for layer in &b.layers {
                if layer.name().ends_with(".shortcut") {
                    push(layer, &mut b.input.clone(), false)?;
                } else {
                    push(layer, &mut y, false)?;
                }
            }
            x = b.output;
        }
    }
    for layer in &lowered.head {
        push(layer, &mut x, true)?;
    }
    Ok(CostReport::from_lines(arch, frames, resolution, snippets, lines))
}

/// Which blocks of which stages carry a DSA module.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DsaPlacementSpec {
    pub position: Position,
    /// `(stage, modules)`; modules are spread over the stage at block
    /// indices `i * repeat / modules`.
    pub stages: Vec<(String, usize)>,
}

impl DsaPlacementSpec {
    /// Parses `res3:2,res4:3`.
    pub fn parse(position: Position, text: &str) -> Result<Self> {
        let mut stages = Vec::new();
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (name, count) = item
                .split_once(':')
                .ok_or_else(|| invalid("placement", format!("expected stage:count, got {item:?}")))?;
            let count = count
                .trim()
                .parse()
                .map_err(|_| invalid("placement", format!("bad module count in {item:?}")))?;
            stages.push((name.trim().to_string(), count));
        }
        Ok(Self { position, stages })
    }

    pub fn modules(&self) -> usize {
        self.stages.iter().map(|(_, k)| k).sum()
    }
}

impl Default for DsaPlacementSpec {
    fn default() -> Self {
        Self {
            position: Position::II,
            stages: vec![("res3".into(), 2), ("res4".into(), 3)],
        }
    }
}

/// Extra cost of DSA modules inserted into `arch` for one clip. The host
/// channel count and feature extent come from the insertion point; `cfg`
/// supplies `U`, `L`, `alpha`, `beta` and the context source, with `U`
/// overridden by `snippets`.
pub fn dsa_overhead(
    arch: &ArchSpec,
    placement: &DsaPlacementSpec,
    cfg: &DsaConfig,
    frames: usize,
    resolution: usize,
    snippets: usize,
) -> Result<DsaOverhead> {
    cfg.validate()?;
    let lowered = lower(arch, frames, resolution)?;
    let mut lines = Vec::new();
    for (stage, count) in &placement.stages {
        let blocks = lowered
            .stages
            .iter()
            .find(|(n, _)| n == stage)
            .map(|(_, b)| b)
            .ok_or_else(|| invalid("placement", format!("no stage named {stage:?}")))?;
        if *count > blocks.len() {
            return Err(invalid(
                "placement",
                format!(
                    "{count} modules requested in {stage}, which has {} blocks",
                    blocks.len()
                ),
            ));
        }
        for i in 0..*count {
            let b = &blocks[i * blocks.len() / count];
            let host = match (placement.position, b.block) {
                (Position::I, _) => b.input,
                (Position::II, _) => b.mid,
                (Position::III, BlockType::Bottleneck) => b.inner,
                (Position::III, BlockType::Basic) => {
                    return Err(invalid("placement", "position III needs a bottleneck block"))
                }
                (Position::IV, _) => b.output,
            };
            let module = DsaConfig {
                channels: host[0],
                snippets,
                ..*cfg
            };
            let active = module.split_count() > 0;
            let flops = dsa_flops(&module, [1, host[0], snippets, host[1], host[2], host[3]]);
            lines.push(DsaOverheadLine {
                name: format!("{}.dsa", b.name),
                host,
                aggregated_channels: module.split_count(),
                macs: flops.total(),
                params: if active { dsa_param_count(&module) as u64 } else { 0 },
            });
        }
    }
    Ok(DsaOverhead::from_lines(placement.position, lines))
}
