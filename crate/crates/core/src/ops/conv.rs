//! Per-snippet convolutions on `(N, C, U, T, H, W)` video features.
//!
//! `conv_spatial` is a 2D convolution over `(H, W)` applied identically at
//! every `(n, u, t)`; `conv_temporal` is a 1D convolution over `T` inside
//! each snippet. Padding is zero padding; neither op crosses snippets.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad }
    }

    /// Stride 1 with padding that preserves the extent of an odd kernel.
    pub const fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn output_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(invalid("conv", "stride must be at least 1"));
        }
        let padded = input + 2 * self.pad;
        if kernel == 0 || kernel > padded {
            return Err(invalid(
                "conv",
                format!("kernel {kernel} larger than padded input {padded}"),
            ));
        }
        Ok((padded - kernel) / self.stride + 1)
    }
}

struct SpatialDims {
    n: usize,
    ci: usize,
    u: usize,
    t: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn spatial_dims(x: &Tensor, w: &Tensor, geo: ConvGeometry) -> Result<SpatialDims> {
    let [n, ci, u, t, h, wd] = x.expect_video("conv_spatial")?;
    let &[co, wci, kh, kw] = w.shape() else {
        return Err(invalid(
            "conv_spatial",
            format!("weight must be (Cout, Cin, kh, kw), got {:?}", w.shape()),
        ));
    };
    if wci != ci {
        return Err(Error::ShapeMismatch {
            op: "conv_spatial",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let oh = geo.output_extent(h, kh)?;
    let ow = geo.output_extent(wd, kw)?;
    Ok(SpatialDims {
        n,
        ci,
        u,
        t,
        h,
        w: wd,
        co,
        kh,
        kw,
        oh,
        ow,
    })
}

/// Valid output range `lo..hi` for kernel tap `k` along an axis of extent
/// `input` with `out` outputs.
fn valid_range(input: usize, out: usize, k: usize, geo: ConvGeometry) -> (usize, usize) {
    let s = geo.stride;
    let lo = if k >= geo.pad { 0 } else { (geo.pad - k).div_ceil(s) };
    let hi = if input + geo.pad > k {
        ((input + geo.pad - k - 1) / s + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfolds `x` into a `(Cin·kh·kw, N·frames·oh·ow)` patch matrix.
fn im2col(x: &[f64], d: &SpatialDims, geo: ConvGeometry) -> Vec<f64> {
    let frames = d.u * d.t;
    let plane = d.oh * d.ow;
    let cols_n = d.n * frames * plane;
    let mut cols = vec![0.0; d.ci * d.kh * d.kw * cols_n];
    for ci in 0..d.ci {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = &mut cols[((ci * d.kh + ky) * d.kw + kx) * cols_n..][..cols_n];
                let (lo, hi) = valid_range(d.w, d.ow, kx, geo);
                for n in 0..d.n {
                    for f in 0..frames {
                        let src = ((n * d.ci + ci) * frames + f) * d.h * d.w;
                        let dst = (n * frames + f) * plane;
                        for oy in 0..d.oh {
                            let Some(iy) = (oy * geo.stride + ky).checked_sub(geo.pad) else {
                                continue;
                            };
                            if iy >= d.h {
                                continue;
                            }
                            for ox in lo..hi {
                                row[dst + oy * d.ow + ox] = x[src + iy * d.w + ox * geo.stride + kx - geo.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates patch-matrix entries back into `dx`.
fn col2im(cols: &[f64], dx: &mut [f64], d: &SpatialDims, geo: ConvGeometry) {
    let frames = d.u * d.t;
    let plane = d.oh * d.ow;
    let cols_n = d.n * frames * plane;
    for ci in 0..d.ci {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = &cols[((ci * d.kh + ky) * d.kw + kx) * cols_n..][..cols_n];
                let (lo, hi) = valid_range(d.w, d.ow, kx, geo);
                for n in 0..d.n {
                    for f in 0..frames {
                        let dst = ((n * d.ci + ci) * frames + f) * d.h * d.w;
                        let src = (n * frames + f) * plane;
                        for oy in 0..d.oh {
                            let Some(iy) = (oy * geo.stride + ky).checked_sub(geo.pad) else {
                                continue;
                            };
                            if iy >= d.h {
                                continue;
                            }
                            for ox in lo..hi {
                                dx[dst + iy * d.w + ox * geo.stride + kx - geo.pad] += row[src + oy * d.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Position-major index `(n, frame·plane)` to channel-major output offsets.
fn for_each_sample_block(d: &SpatialDims, mut f: impl FnMut(usize, usize, usize)) {
    let block = d.u * d.t * d.oh * d.ow;
    let cols_n = d.n * block;
    for n in 0..d.n {
        for co in 0..d.co {
            f(co * cols_n + n * block, (n * d.co + co) * block, block);
        }
    }
}

pub fn conv_spatial(x: &Tensor, w: &Tensor, geo: ConvGeometry) -> Result<Tensor> {
    let d = spatial_dims(x, w, geo)?;
    let cols = im2col(x.data(), &d, geo);
    let taps = d.ci * d.kh * d.kw;
    let cols_n = cols.len() / taps.max(1);
    let mut gemm = vec![0.0; d.co * cols_n];
    for (co, out_row) in gemm.chunks_mut(cols_n.max(1)).enumerate().take(d.co) {
        for (k, col) in cols.chunks(cols_n.max(1)).enumerate().take(taps) {
            let wv = w.data()[co * taps + k];
            for (y, &c) in out_row.iter_mut().zip(col) {
                *y += wv * c;
            }
        }
    }
    let mut out = Tensor::zeros(&[d.n, d.co, d.u, d.t, d.oh, d.ow]);
    let od = out.data_mut();
    for_each_sample_block(&d, |src, dst, len| {
        od[dst..dst + len].copy_from_slice(&gemm[src..src + len])
    });
    Ok(out)
}

struct TemporalDims {
    n: usize,
    ci: usize,
    u: usize,
    t: usize,
    hw: usize,
    co: usize,
    kt: usize,
    ot: usize,
}

fn temporal_dims(x: &Tensor, w: &Tensor, geo: ConvGeometry) -> Result<TemporalDims> {
    let [n, ci, u, t, h, wd] = x.expect_video("conv_temporal")?;
    let &[co, wci, kt] = w.shape() else {
        return Err(invalid(
            "conv_temporal",
            format!("weight must be (Cout, Cin, kt), got {:?}", w.shape()),
        ));
    };
    if wci != ci {
        return Err(Error::ShapeMismatch {
            op: "conv_temporal",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let ot = geo.output_extent(t, kt)?;
    Ok(TemporalDims {
        n,
        ci,
        u,
        t,
        hw: h * wd,
        co,
        kt,
        ot,
    })
}

/// Calls `f(out, inp, wi)` for every tap; each tap covers `hw` contiguous
/// positions in both the output and the input.
fn for_each_temporal_run(d: &TemporalDims, geo: ConvGeometry, mut f: impl FnMut(usize, usize, usize)) {
    for n in 0..d.n {
        for co in 0..d.co {
            for u in 0..d.u {
                for ot in 0..d.ot {
                    let out = (((n * d.co + co) * d.u + u) * d.ot + ot) * d.hw;
                    for ci in 0..d.ci {
                        for k in 0..d.kt {
                            let Some(it) = (ot * geo.stride + k).checked_sub(geo.pad) else {
                                continue;
                            };
                            if it >= d.t {
                                continue;
                            }
                            let inp = (((n * d.ci + ci) * d.u + u) * d.t + it) * d.hw;
                            f(out, inp, (co * d.ci + ci) * d.kt + k);
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_temporal(x: &Tensor, w: &Tensor, geo: ConvGeometry) -> Result<Tensor> {
    let d = temporal_dims(x, w, geo)?;
    let [_, _, _, _, h, wd] = x.expect_video("conv_temporal")?;
    let mut out = Tensor::zeros(&[d.n, d.co, d.u, d.ot, h, wd]);
    let (xd, wd_, od) = (x.data(), w.data(), out.data_mut());
    let hw = d.hw;
    for_each_temporal_run(&d, geo, |o, i, k| {
        let wv = wd_[k];
        for (y, &xv) in od[o..o + hw].iter_mut().zip(&xd[i..i + hw]) {
            *y += wv * xv;
        }
    });
    Ok(out)
}

impl Tape {
    pub fn conv_spatial(&mut self, x: Var, w: Var, geo: ConvGeometry) -> Result<Var> {
        let value = conv_spatial(self.value(x), self.value(w), geo)?;
        Ok(self.record(
            "conv_spatial",
            &[x, w],
            value,
            Box::new(move |g, inputs, _| {
                let d = spatial_dims(inputs[0], inputs[1], geo).unwrap();
                let cols = im2col(inputs[0].data(), &d, geo);
                let taps = d.ci * d.kh * d.kw;
                let cols_n = cols.len() / taps.max(1);
                let mut gm = vec![0.0; d.co * cols_n];
                for_each_sample_block(&d, |dst, src, len| {
                    gm[dst..dst + len].copy_from_slice(&g.data()[src..src + len])
                });
                let wd = inputs[1].data();
                let mut dw = Tensor::zeros(inputs[1].shape());
                let mut dcols = vec![0.0; cols.len()];
                if cols_n > 0 {
                    for (co, g_row) in gm.chunks(cols_n).enumerate() {
                        for (k, (col, dcol)) in cols.chunks(cols_n).zip(dcols.chunks_mut(cols_n)).enumerate() {
                            let wv = wd[co * taps + k];
                            let mut acc = 0.0;
                            for ((&c, dc), &gv) in col.iter().zip(dcol.iter_mut()).zip(g_row) {
                                acc += c * gv;
                                *dc += wv * gv;
                            }
                            dw.data_mut()[co * taps + k] = acc;
                        }
                    }
                }
                let mut dx = Tensor::zeros(inputs[0].shape());
                col2im(&dcols, dx.data_mut(), &d, geo);
                vec![dx, dw]
            }),
        ))
    }

    pub fn conv_temporal(&mut self, x: Var, w: Var, geo: ConvGeometry) -> Result<Var> {
        let value = conv_temporal(self.value(x), self.value(w), geo)?;
        Ok(self.record(
            "conv_temporal",
            &[x, w],
            value,
            Box::new(move |g, inputs, _| {
                let d = temporal_dims(inputs[0], inputs[1], geo).unwrap();
                let mut dx = Tensor::zeros(inputs[0].shape());
                let mut dw = Tensor::zeros(inputs[1].shape());
                let (xd, wd, gd) = (inputs[0].data(), inputs[1].data(), g.data());
                let (dxd, dwd) = (dx.data_mut(), dw.data_mut());
                let hw = d.hw;
                for_each_temporal_run(&d, geo, |o, i, k| {
                    let wv = wd[k];
                    let mut acc = 0.0;
                    for p in 0..hw {
                        dxd[i + p] += wv * gd[o + p];
                        acc += xd[i + p] * gd[o + p];
                    }
                    dwd[k] += acc;
                });
                vec![dx, dw]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_kernels_are_identity() {
        let x = Tensor::new(vec![1, 1, 2, 2, 2, 2], (0..16).map(f64::from).collect()).unwrap();
        let one = Tensor::ones(&[1, 1, 1, 1]);
        assert_eq!(conv_spatial(&x, &one, ConvGeometry::new(1, 0)).unwrap(), x);
        let one_t = Tensor::ones(&[1, 1, 1]);
        assert_eq!(conv_temporal(&x, &one_t, ConvGeometry::new(1, 0)).unwrap(), x);
        let centered = Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(conv_temporal(&x, &centered, ConvGeometry::same(3)).unwrap(), x);
    }

    #[test]
    fn ones_kernel_counts_overlap() {
        let x = Tensor::ones(&[1, 1, 1, 1, 3, 3]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv_spatial(&x, &w, ConvGeometry::same(3)).unwrap();
        assert_eq!(y.get(&[0, 0, 0, 0, 1, 1]), 9.0);
        for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.get(&[0, 0, 0, 0, r, c]), 4.0);
        }
        assert_eq!(y.get(&[0, 0, 0, 0, 0, 1]), 6.0);
    }

    #[test]
    fn strided_output_extent() {
        let g = ConvGeometry::new(2, 3);
        assert_eq!(g.output_extent(224, 7).unwrap(), 112);
        assert_eq!(ConvGeometry::new(2, 1).output_extent(56, 3).unwrap(), 28);
        assert_eq!(ConvGeometry::new(2, 0).output_extent(56, 1).unwrap(), 28);
    }

    #[test]
    fn rejects_oversized_kernel() {
        let x = Tensor::ones(&[1, 1, 1, 1, 2, 2]);
        let w = Tensor::ones(&[1, 1, 5, 5]);
        assert!(conv_spatial(&x, &w, ConvGeometry::new(1, 1)).is_err());
        assert!(conv_spatial(&x, &w, ConvGeometry::new(0, 2)).is_err());
        let wt = Tensor::ones(&[1, 2, 1]);
        assert!(conv_temporal(&x, &wt, ConvGeometry::new(1, 0)).is_err());
    }
}
