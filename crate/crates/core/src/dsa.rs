//! Dynamic segment aggregation.
//!
//! For a video feature `V` of shape `(N, C, U, T, H, W)` the module
//!
//! 1. splits the channels into `V1` (the first `round(beta * C)`) and `V2`,
//! 2. pools `V1` over `(T, H, W)` into one length-`U` context vector per
//!    `(n, c)`,
//! 3. maps every context vector through a channel-shared MLP
//!    `U -> U*alpha -> L` (affine, batch norm, ReLU, affine) and a softmax
//!    over the `L` outputs, giving one normalized kernel per `(n, c)`,
//! 4. convolves each channel of `V1` along `U` with its own kernel (centered
//!    taps, zero padding),
//! 5. concatenates the result with the untouched `V2`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::ops::{Mode, RunningStats};
use crate::tape::{Tape, Var};
use crate::tensor::{axis, Tensor};

/// Which channels feed the kernel generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextSource {
    /// Only the aggregated split `V1`.
    #[default]
    Split,
    /// All channels; batch-norm statistics span every channel and the rows
    /// belonging to `V1` are kept.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DsaConfig {
    /// Snippet count `U`.
    pub snippets: usize,
    /// Kernel size `L` along the snippet axis.
    pub kernel_size: usize,
    /// Hidden-width factor: the MLP hidden layer has `U * alpha` units.
    pub alpha: usize,
    /// Fraction of channels that are aggregated.
    pub beta: f64,
    /// Channel count `C` of the host feature.
    pub channels: usize,
    #[serde(default)]
    pub context: ContextSource,
}

impl Default for DsaConfig {
    fn default() -> Self {
        Self {
            snippets: 4,
            kernel_size: 3,
            alpha: 2,
            beta: 0.125,
            channels: 8,
            context: ContextSource::Split,
        }
    }
}

impl DsaConfig {
    pub fn with_channels(channels: usize) -> Self {
        Self {
            channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(invalid("dsa", format!("kernel size {} must be odd", self.kernel_size)));
        }
        if self.snippets == 0 {
            return Err(invalid("dsa", "snippet count must be at least 1"));
        }
        if self.alpha == 0 {
            return Err(invalid("dsa", "alpha must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(invalid("dsa", format!("beta {} outside [0, 1]", self.beta)));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.snippets * self.alpha
    }

    /// Number of aggregated channels, `round(beta * C)` with ties to even.
    pub fn split_count(&self) -> usize {
        split_count(self.beta, self.channels)
    }
}

pub fn split_count(beta: f64, channels: usize) -> usize {
    ((beta * channels as f64).round_ties_even() as usize).min(channels)
}

/// Channel-shared parameters of the kernel generator.
#[derive(Debug, Clone, PartialEq)]
pub struct DsaParams {
    /// `(U, U*alpha)`
    pub w1: Tensor,
    pub b1: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub bn_stats: RunningStats,
    /// `(U*alpha, L)`
    pub w2: Tensor,
    pub b2: Tensor,
}

/// [`DsaParams`] registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct DsaVars {
    pub w1: Var,
    pub b1: Var,
    pub bn_gamma: Var,
    pub bn_beta: Var,
    pub w2: Var,
    pub b2: Var,
}

impl DsaVars {
    pub fn all(&self) -> [Var; 6] {
        [self.w1, self.b1, self.bn_gamma, self.bn_beta, self.w2, self.b2]
    }
}

impl DsaParams {
    /// Zero affine maps and unit batch norm: every kernel comes out uniform.
    pub fn zeros(cfg: &DsaConfig) -> Self {
        let (u, h, l) = (cfg.snippets, cfg.hidden(), cfg.kernel_size);
        Self {
            w1: Tensor::zeros(&[u, h]),
            b1: Tensor::zeros(&[h]),
            bn_gamma: Tensor::ones(&[h]),
            bn_beta: Tensor::zeros(&[h]),
            bn_stats: RunningStats::new(h),
            w2: Tensor::zeros(&[h, l]),
            b2: Tensor::zeros(&[l]),
        }
    }

    /// Uniform `±1/sqrt(fan_in)` weights, zero biases, unit batch norm.
    pub fn init<R: Rng + ?Sized>(cfg: &DsaConfig, rng: &mut R) -> Self {
        let (u, h, l) = (cfg.snippets, cfg.hidden(), cfg.kernel_size);
        let b1 = 1.0 / (u as f64).sqrt();
        let b2 = 1.0 / (h as f64).sqrt();
        Self {
            w1: Tensor::uniform(&[u, h], -b1, b1, rng),
            w2: Tensor::uniform(&[h, l], -b2, b2, rng),
            ..Self::zeros(cfg)
        }
    }

    pub fn validate(&self, cfg: &DsaConfig) -> Result<()> {
        let (u, h, l) = (cfg.snippets, cfg.hidden(), cfg.kernel_size);
        let expected: [(&str, &Tensor, Vec<usize>); 8] = [
            ("w1", &self.w1, vec![u, h]),
            ("b1", &self.b1, vec![h]),
            ("bn.gamma", &self.bn_gamma, vec![h]),
            ("bn.beta", &self.bn_beta, vec![h]),
            ("bn.running_mean", &self.bn_stats.mean, vec![h]),
            ("bn.running_var", &self.bn_stats.var, vec![h]),
            ("w2", &self.w2, vec![h, l]),
            ("b2", &self.b2, vec![l]),
        ];
        for (name, t, shape) in expected {
            if t.shape() != shape.as_slice() {
                return Err(invalid(
                    "dsa",
                    format!("parameter {name} has shape {:?}, config needs {shape:?}", t.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Number of learnable scalars (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.learnable().iter().map(|t| t.numel()).sum()
    }

    pub fn learnable(&self) -> [&Tensor; 6] {
        [&self.w1, &self.b1, &self.bn_gamma, &self.bn_beta, &self.w2, &self.b2]
    }

    pub fn learnable_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.bn_gamma,
            &mut self.bn_beta,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    /// Every tensor, running statistics included, under a stable name.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("bn.gamma", &self.bn_gamma),
            ("bn.beta", &self.bn_beta),
            ("bn.running_mean", &self.bn_stats.mean),
            ("bn.running_var", &self.bn_stats.var),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("bn.gamma", &mut self.bn_gamma),
            ("bn.beta", &mut self.bn_beta),
            ("bn.running_mean", &mut self.bn_stats.mean),
            ("bn.running_var", &mut self.bn_stats.var),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> DsaVars {
        DsaVars {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            bn_gamma: tape.leaf(self.bn_gamma.clone()),
            bn_beta: tape.leaf(self.bn_beta.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
        }
    }
}

/// Learnable scalars in one DSA module. Independent of `C`: the generator
/// is shared by all channels.
pub fn dsa_param_count(cfg: &DsaConfig) -> usize {
    let (u, h, l) = (cfg.snippets, cfg.hidden(), cfg.kernel_size);
    u * h + h + 2 * h + h * l + l
}

/// Per-channel aggregation weights of shape `(N, C, L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicKernel {
    values: Tensor,
}

impl DynamicKernel {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::InvalidShape {
                shape: values.shape().to_vec(),
                reason: "dynamic kernel must be (N, C, L)".into(),
            });
        }
        Ok(Self { values })
    }

    /// The same row for every `(n, c)`.
    pub fn broadcast(row: &[f64], n: usize, c: usize) -> Self {
        let data = (0..n * c).flat_map(|_| row.iter().copied()).collect();
        Self {
            values: Tensor::new(vec![n, c, row.len()], data).unwrap(),
        }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.data().chunks(self.len().max(1))
    }

    /// Largest `|row sum - 1|` and whether every entry is strictly positive.
    pub fn normalization_error(&self) -> (f64, bool) {
        let mut worst = 0.0f64;
        let mut positive = true;
        for row in self.rows() {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            positive &= row.iter().all(|&v| v > 0.0);
        }
        (worst, positive)
    }
}

/// Mean over `(T, H, W)`: one length-`U` context vector per `(n, c)`.
pub fn pool_context(v: &Tensor) -> Result<Tensor> {
    v.expect_video("pool_context")?;
    crate::ops::global_avg_pool(v, &[axis::T, axis::H, axis::W])
}

struct SegmentDims {
    nc: usize,
    u: usize,
    inner: usize,
    l: usize,
    half: usize,
}

fn segment_dims(v: &Tensor, k: &Tensor) -> Result<SegmentDims> {
    let [n, c, u, t, h, w] = v.expect_video("segment_conv")?;
    let &[kn, kc, l] = k.shape() else {
        return Err(invalid(
            "segment_conv",
            format!("kernel must be (N, C, L), got {:?}", k.shape()),
        ));
    };
    if (kn, kc) != (n, c) {
        return Err(Error::ShapeMismatch {
            op: "segment_conv",
            lhs: v.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if l % 2 == 0 {
        return Err(invalid(
            "segment_conv",
            format!("kernel size {l} is even; centering undefined"),
        ));
    }
    Ok(SegmentDims {
        nc: n * c,
        u,
        inner: t * h * w,
        l,
        half: l / 2,
    })
}

/// Calls `f(out_offset, in_offset, kernel_offset)` for every in-range tap,
/// taps in increasing order for each output element.
fn for_each_segment_tap(d: &SegmentDims, mut f: impl FnMut(usize, usize, usize)) {
    for nc in 0..d.nc {
        let base = nc * d.u * d.inner;
        for u in 0..d.u {
            for l in 0..d.l {
                let Some(src) = (u + l).checked_sub(d.half) else {
                    continue;
                };
                if src >= d.u {
                    continue;
                }
                for p in 0..d.inner {
                    f(base + u * d.inner + p, base + src * d.inner + p, nc * d.l + l);
                }
            }
        }
    }
}

fn segment_conv_values(v: &Tensor, k: &Tensor) -> Result<Tensor> {
    let d = segment_dims(v, k)?;
    let mut out = Tensor::zeros(v.shape());
    let (vd, kd, od) = (v.data(), k.data(), out.data_mut());
    for_each_segment_tap(&d, |o, i, kk| od[o] += kd[kk] * vd[i]);
    Ok(out)
}

/// `O[n,c,u] = Σ_l K[n,c,l] · V[n,c,u+l-(L-1)/2]`, zero outside `[0, U)`.
pub fn segment_conv(v: &Tensor, k: &DynamicKernel) -> Result<Tensor> {
    segment_conv_values(v, k.values())
}

impl Tape {
    pub fn segment_conv(&mut self, v: Var, k: Var) -> Result<Var> {
        let value = segment_conv_values(self.value(v), self.value(k))?;
        Ok(self.record(
            "segment_conv",
            &[v, k],
            value,
            Box::new(|g, inputs, _| {
                let d = segment_dims(inputs[0], inputs[1]).unwrap();
                let mut dv = Tensor::zeros(inputs[0].shape());
                let mut dk = Tensor::zeros(inputs[1].shape());
                let (vd, kd, gd) = (inputs[0].data(), inputs[1].data(), g.data());
                let (dvd, dkd) = (dv.data_mut(), dk.data_mut());
                for_each_segment_tap(&d, |o, i, kk| {
                    dvd[i] += kd[kk] * gd[o];
                    dkd[kk] += vd[i] * gd[o];
                });
                vec![dv, dk]
            }),
        ))
    }
}

/// Records `softmax(w2 · relu(bn(w1 · ctx + b1)) + b2)` for every context row.
///
/// `ctx` is `(N, C, U)`; the result is `(N, C, L)`. Batch norm treats the
/// `N * C` context vectors as its batch.
pub fn generate_kernel_on(
    tape: &mut Tape,
    ctx: Var,
    vars: &DsaVars,
    stats: &mut RunningStats,
    cfg: &DsaConfig,
    mode: Mode,
) -> Result<Var> {
    let &[n, c, u] = tape.shape(ctx) else {
        return Err(invalid(
            "generate_kernel",
            format!("context must be (N, C, U), got {:?}", tape.shape(ctx)),
        ));
    };
    if u != cfg.snippets {
        return Err(invalid(
            "generate_kernel",
            format!("context has {u} snippets, config expects {}", cfg.snippets),
        ));
    }
    let rows = tape.reshape(ctx, &[n * c, u])?;
    let h = tape.matmul(rows, vars.w1)?;
    let h = tape.add_bias(h, vars.b1)?;
    let h = tape.batch_norm(h, vars.bn_gamma, vars.bn_beta, mode, stats)?;
    let h = tape.relu(h);
    let logits = tape.matmul(h, vars.w2)?;
    let logits = tape.add_bias(logits, vars.b2)?;
    let k = tape.softmax(logits, 1)?;
    tape.reshape(k, &[n, c, cfg.kernel_size])
}

pub fn generate_kernel(ctx: &Tensor, params: &mut DsaParams, cfg: &DsaConfig, mode: Mode) -> Result<DynamicKernel> {
    cfg.validate()?;
    params.validate(cfg)?;
    let mut tape = Tape::new();
    let c = tape.leaf(ctx.clone());
    let vars = params.bind(&mut tape);
    let k = generate_kernel_on(&mut tape, c, &vars, &mut params.bn_stats, cfg, mode)?;
    DynamicKernel::new(tape.value(k).clone())
}

/// Records the full module on a tape. With no aggregated channels the input
/// handle is returned unchanged.
pub fn dsa_forward_on(
    tape: &mut Tape,
    v: Var,
    vars: &DsaVars,
    stats: &mut RunningStats,
    cfg: &DsaConfig,
    mode: Mode,
) -> Result<Var> {
    let [_, c, u, ..] = tape.value(v).expect_video("dsa_forward")?;
    if c != cfg.channels {
        return Err(invalid(
            "dsa_forward",
            format!("input has {c} channels, config expects {}", cfg.channels),
        ));
    }
    if u != cfg.snippets {
        return Err(invalid(
            "dsa_forward",
            format!("input has {u} snippets, config expects {}", cfg.snippets),
        ));
    }
    let count = cfg.split_count();
    if count == 0 {
        return Ok(v);
    }
    let (v1, v2) = tape.split_channels(v, count)?;
    let kernel = match cfg.context {
        ContextSource::Split => {
            let ctx = tape.global_avg_pool(v1, &[axis::T, axis::H, axis::W])?;
            generate_kernel_on(tape, ctx, vars, stats, cfg, mode)?
        }
        ContextSource::Full => {
            let ctx = tape.global_avg_pool(v, &[axis::T, axis::H, axis::W])?;
            let all = generate_kernel_on(tape, ctx, vars, stats, cfg, mode)?;
            tape.split_channels(all, count)?.0
        }
    };
    let y1 = tape.segment_conv(v1, kernel)?;
    tape.concat_channels(y1, v2)
}

pub fn dsa_forward(v: &Tensor, params: &mut DsaParams, cfg: &DsaConfig, mode: Mode) -> Result<Tensor> {
    cfg.validate()?;
    params.validate(cfg)?;
    let mut tape = Tape::new();
    let x = tape.leaf(v.clone());
    let vars = params.bind(&mut tape);
    let y = dsa_forward_on(&mut tape, x, &vars, &mut params.bn_stats, cfg, mode)?;
    Ok(tape.value(y).clone())
}

/// Multiply-accumulate counts of one DSA module, itemized.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DsaFlops {
    pub pooling: u64,
    pub mlp: u64,
    pub softmax: u64,
    pub segment_conv: u64,
}

impl DsaFlops {
    pub fn total(&self) -> u64 {
        self.pooling + self.mlp + self.softmax + self.segment_conv
    }
}

/// MACs for one module on a `(N, C, U, T, H, W)` feature. Pooling counts one
/// accumulate per pooled element, the MLP its two matrix products, the
/// softmax one normalization per tap; batch norm and ReLU are free.
pub fn dsa_flops(cfg: &DsaConfig, shape: [usize; 6]) -> DsaFlops {
    let [n, c, u, t, h, w] = shape.map(|e| e as u64);
    let aggregated = split_count(cfg.beta, shape[1]) as u64;
    if aggregated == 0 {
        return DsaFlops::default();
    }
    let context_channels = match cfg.context {
        ContextSource::Split => aggregated,
        ContextSource::Full => c,
    };
    let (hidden, l) = (cfg.hidden() as u64, cfg.kernel_size as u64);
    let vectors = n * context_channels;
    DsaFlops {
        pooling: vectors * u * t * h * w,
        mlp: vectors * (u * hidden + hidden * l),
        softmax: vectors * l,
        segment_conv: n * aggregated * u * t * h * w * l,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn cfg(c: usize, beta: f64) -> DsaConfig {
        DsaConfig {
            channels: c,
            beta,
            ..DsaConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(DsaConfig::default().validate().is_ok());
        for bad in [
            DsaConfig {
                kernel_size: 2,
                ..DsaConfig::default()
            },
            DsaConfig {
                kernel_size: 0,
                ..DsaConfig::default()
            },
            DsaConfig {
                snippets: 0,
                ..DsaConfig::default()
            },
            DsaConfig {
                alpha: 0,
                ..DsaConfig::default()
            },
            DsaConfig {
                beta: 1.5,
                ..DsaConfig::default()
            },
            DsaConfig {
                beta: -0.1,
                ..DsaConfig::default()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn split_count_rounds_half_to_even() {
        assert_eq!(split_count(0.125, 8), 1);
        assert_eq!(split_count(0.125, 4), 0); // 0.5 -> 0
        assert_eq!(split_count(0.125, 12), 2); // 1.5 -> 2
        assert_eq!(split_count(0.125, 20), 2); // 2.5 -> 2
        assert_eq!(split_count(1.0, 5), 5);
        assert_eq!(split_count(0.0, 5), 0);
    }

    #[test]
    fn param_counts() {
        let c = DsaConfig::default();
        assert_eq!(dsa_param_count(&c), 83);
        assert_eq!(DsaParams::zeros(&c).param_count(), 83);
        let a1 = DsaConfig { alpha: 1, ..c };
        assert_eq!(dsa_param_count(&a1), 43);
        let a4 = DsaConfig { alpha: 4, ..c };
        // hidden width doubles: 163 vs 83
        assert_eq!(dsa_param_count(&a4), 163);
        assert_eq!(dsa_param_count(&cfg(512, 1.0)), 83);
    }

    #[test]
    fn pool_context_shapes_and_values() {
        let v = Tensor::full(&[1, 2, 4, 2, 3, 3], 3.0);
        let ctx = pool_context(&v).unwrap();
        assert_eq!(ctx.shape(), &[1, 2, 4]);
        assert!(ctx.data().iter().all(|&x| x == 3.0));
        let mut v = Tensor::zeros(&[1, 1, 4, 2, 2, 2]);
        for u in 0..4 {
            for t in 0..2 {
                for h in 0..2 {
                    for w in 0..2 {
                        v.set(&[0, 0, u, t, h, w], u as f64);
                    }
                }
            }
        }
        assert_eq!(pool_context(&v).unwrap().data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn zero_params_give_uniform_kernels() {
        let c = cfg(2, 1.0);
        let mut p = DsaParams::zeros(&c);
        let ctx = Tensor::uniform(&[3, 2, 4], -1.0, 1.0, &mut rng::rng(1));
        for mode in [Mode::Train, Mode::Eval] {
            let k = generate_kernel(&ctx, &mut p, &c, mode).unwrap();
            assert_eq!(k.values().shape(), &[3, 2, 3]);
            for row in k.rows() {
                for &v in row {
                    assert!((v - 1.0 / 3.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn hand_evaluated_kernel() {
        // C=1, U=2, L=3, alpha=1 (hidden width 2), eval-mode batch norm.
        let c = DsaConfig {
            snippets: 2,
            kernel_size: 3,
            alpha: 1,
            beta: 1.0,
            channels: 1,
            context: ContextSource::Split,
        };
        let mut p = DsaParams::zeros(&c);
        p.w1 = Tensor::new(vec![2, 2], vec![0.5, -0.25, 0.1, 0.3]).unwrap();
        p.b1 = Tensor::from_vec(vec![0.05, -0.1]);
        p.bn_gamma = Tensor::from_vec(vec![1.2, 0.8]);
        p.bn_beta = Tensor::from_vec(vec![0.1, -0.05]);
        p.bn_stats.mean = Tensor::from_vec(vec![0.2, -0.1]);
        p.bn_stats.var = Tensor::from_vec(vec![0.5, 2.0]);
        p.w2 = Tensor::new(vec![2, 3], vec![0.4, -0.3, 0.2, 0.1, 0.6, -0.5]).unwrap();
        p.b2 = Tensor::from_vec(vec![0.0, 0.1, -0.1]);
        let ctx = Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap();

        // scalar walk-through
        let a0 = 1.0 * 0.5 + 2.0 * 0.1 + 0.05; // 0.75
        let a1 = 1.0 * -0.25 + 2.0 * 0.3 - 0.1; // 0.25
        let n0 = 1.2 * (a0 - 0.2) / (0.5f64 + 1e-5).sqrt() + 0.1;
        let n1 = 0.8 * (a1 + 0.1) / (2.0f64 + 1e-5).sqrt() - 0.05;
        let (r0, r1) = (n0.max(0.0), n1.max(0.0));
        let z = [
            r0 * 0.4 + r1 * 0.1,
            r0 * -0.3 + r1 * 0.6 + 0.1,
            r0 * 0.2 + r1 * -0.5 - 0.1,
        ];
        let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        let expected: Vec<f64> = e.iter().map(|v| v / s).collect();

        let k = generate_kernel(&ctx, &mut p, &c, Mode::Eval).unwrap();
        for (a, b) in k.values().data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_mismatched_parameters() {
        let c = cfg(2, 1.0);
        let mut p = DsaParams::zeros(&DsaConfig { alpha: 1, ..c });
        let ctx = Tensor::zeros(&[1, 2, 4]);
        assert!(generate_kernel(&ctx, &mut p, &c, Mode::Eval).is_err());
        let mut p = DsaParams::zeros(&c);
        assert!(generate_kernel(&Tensor::zeros(&[1, 2, 3]), &mut p, &c, Mode::Eval).is_err());
    }

    #[test]
    fn segment_conv_examples() {
        let v = Tensor::new(vec![1, 1, 4, 1, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let delta = DynamicKernel::broadcast(&[0.0, 1.0, 0.0], 1, 1);
        assert!(segment_conv(&v, &delta).unwrap().bitwise_eq(&v));
        let third = 1.0 / 3.0;
        let uniform = DynamicKernel::broadcast(&[third; 3], 1, 1);
        let y = segment_conv(&v, &uniform).unwrap();
        for (a, b) in y.data().iter().zip([1.0, 2.0, 3.0, 7.0 / 3.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        let even = DynamicKernel::broadcast(&[0.5, 0.5], 1, 1);
        assert!(segment_conv(&v, &even).is_err());
        let wrong_c = DynamicKernel::broadcast(&[0.0, 1.0, 0.0], 1, 2);
        assert!(segment_conv(&v, &wrong_c).is_err());
    }

    #[test]
    fn dsa_forward_split_contract() {
        let c = cfg(4, 0.5);
        let mut p = DsaParams::init(&c, &mut rng::rng(5));
        let v = Tensor::uniform(&[2, 4, 4, 2, 2, 2], -1.0, 1.0, &mut rng::rng(6));
        let y = dsa_forward(&v, &mut p.clone(), &c, Mode::Train).unwrap();
        let (v1, v2) = crate::ops::split_channels(&v, 2).unwrap();
        let (y1, y2) = crate::ops::split_channels(&y, 2).unwrap();
        assert!(y2.bitwise_eq(&v2));
        let ctx = pool_context(&v1).unwrap();
        let k = generate_kernel(&ctx, &mut p, &c, Mode::Train).unwrap();
        assert!(y1.bitwise_eq(&segment_conv(&v1, &k).unwrap()));
    }

    #[test]
    fn beta_zero_is_bitwise_identity() {
        let c = cfg(4, 0.0);
        let mut p = DsaParams::init(&c, &mut rng::rng(2));
        let v = Tensor::uniform(&[1, 4, 4, 1, 2, 2], -1.0, 1.0, &mut rng::rng(3));
        assert!(dsa_forward(&v, &mut p, &c, Mode::Train).unwrap().bitwise_eq(&v));
    }

    #[test]
    fn beta_one_zero_params_is_moving_average() {
        let c = cfg(3, 1.0);
        let mut p = DsaParams::zeros(&c);
        let v = Tensor::uniform(&[1, 3, 4, 1, 1, 2], -1.0, 1.0, &mut rng::rng(4));
        let y = dsa_forward(&v, &mut p, &c, Mode::Eval).unwrap();
        for ch in 0..3 {
            for u in 0..4usize {
                for w in 0..2 {
                    let mut s = 0.0;
                    for src in u.saturating_sub(1)..=(u + 1).min(3) {
                        s += v.get(&[0, ch, src, 0, 0, w]);
                    }
                    assert!((y.get(&[0, ch, u, 0, 0, w]) - s / 3.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn full_context_variant_differs_only_through_statistics() {
        let split = cfg(4, 0.5);
        let full = DsaConfig {
            context: ContextSource::Full,
            ..split
        };
        let p = DsaParams::init(&split, &mut rng::rng(8));
        let v = Tensor::uniform(&[2, 4, 4, 1, 2, 2], -1.0, 1.0, &mut rng::rng(9));
        // eval mode: per-channel kernels do not see other channels
        let a = dsa_forward(&v, &mut p.clone(), &split, Mode::Eval).unwrap();
        let b = dsa_forward(&v, &mut p.clone(), &full, Mode::Eval).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-15);
        let a = dsa_forward(&v, &mut p.clone(), &split, Mode::Train).unwrap();
        let b = dsa_forward(&v, &mut p.clone(), &full, Mode::Train).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn flops_examples() {
        let c = cfg(16, 0.125);
        let f = dsa_flops(&c, [1, 16, 4, 2, 3, 3]);
        assert_eq!(f.segment_conv, 2 * 4 * 2 * 3 * 3 * 3);
        assert_eq!(f.pooling, 2 * 4 * 18);
        assert_eq!(f.mlp, 2 * (4 * 8 + 8 * 3));
        assert_eq!(f.softmax, 2 * 3);
        assert_eq!(dsa_flops(&cfg(16, 0.0), [1, 16, 4, 2, 3, 3]).total(), 0);
    }
}
