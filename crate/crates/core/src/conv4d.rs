//! Brute-force 4D convolution over `(U, T, H, W)`.
//!
//! This is a reference implementation: plain nested loops with centered
//! offsets and zero padding, written without reusing any of the optimized
//! kernels. Channel-wise segment aggregation is the special case of a
//! diagonal kernel with extents `(L, 1, 1, 1)`; [`embed_dsa_kernel`] builds
//! that kernel so the two can be compared.

use serde::{Deserialize, Serialize};

use crate::dsa::{generate_kernel, pool_context, segment_conv, DsaConfig, DsaParams, DynamicKernel};
use crate::error::{invalid, Error, Result};
use crate::ops::Mode;
use crate::rng;
use crate::tensor::Tensor;

/// Kernel of shape `(C_out, C_in, Lu, Lt, Lh, Lw)` with odd sliding extents.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel4D {
    values: Tensor,
}

impl Kernel4D {
    pub fn new(values: Tensor) -> Result<Self> {
        let shape = values.shape();
        if shape.len() != 6 {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: "4D kernel must be (C_out, C_in, Lu, Lt, Lh, Lw)".into(),
            });
        }
        if shape[2..].iter().any(|&e| e % 2 == 0) {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: "sliding extents must be odd".into(),
            });
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

fn shifted(i: usize, tap: usize, extent: usize, limit: usize) -> Option<usize> {
    let pos = i as isize + tap as isize - (extent / 2) as isize;
    (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
}

/// `O[n,c',u,t,h,w] = Σ K[c',c,l,k,i,j] · V[n,c,u+l̂,t+k̂,h+î,w+ĵ]`.
pub fn conv4d(v: &Tensor, k: &Kernel4D) -> Result<Tensor> {
    let [n, c_in, u, t, h, w] = v.expect_video("conv4d")?;
    let ks = k.values.shape();
    let (c_out, kc, lu, lt, lh, lw) = (ks[0], ks[1], ks[2], ks[3], ks[4], ks[5]);
    if kc != c_in {
        return Err(Error::ShapeMismatch {
            op: "conv4d",
            lhs: v.shape().to_vec(),
            rhs: ks.to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[n, c_out, u, t, h, w]);
    for b in 0..n {
        for co in 0..c_out {
            for uu in 0..u {
                for tt in 0..t {
                    for hh in 0..h {
                        for ww in 0..w {
                            let mut acc = 0.0;
                            for ci in 0..c_in {
                                for l in 0..lu {
                                    let Some(su) = shifted(uu, l, lu, u) else { continue };
                                    for kk in 0..lt {
                                        let Some(st) = shifted(tt, kk, lt, t) else { continue };
                                        for i in 0..lh {
                                            let Some(sh) = shifted(hh, i, lh, h) else { continue };
                                            for j in 0..lw {
                                                let Some(sw) = shifted(ww, j, lw, w) else {
                                                    continue;
                                                };
                                                acc += k.values.get(&[co, ci, l, kk, i, j])
                                                    * v.get(&[b, ci, su, st, sh, sw]);
                                            }
                                        }
                                    }
                                }
                            }
                            out.set(&[b, co, uu, tt, hh, ww], acc);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Places the rows of a single-sample dynamic kernel on the channel
/// diagonal of a `(C, C, L, 1, 1, 1)` 4D kernel.
pub fn embed_dsa_kernel(k: &DynamicKernel, channels: usize) -> Result<Kernel4D> {
    let shape = k.values().shape();
    if shape[0] != 1 || shape[1] != channels {
        return Err(invalid(
            "embed_dsa_kernel",
            format!("expected a (1, {channels}, L) kernel, got {shape:?}"),
        ));
    }
    let l = shape[2];
    let mut values = Tensor::zeros(&[channels, channels, l, 1, 1, 1]);
    for c in 0..channels {
        for tap in 0..l {
            values.set(&[c, c, tap, 0, 0, 0], k.values().get(&[0, c, tap]));
        }
    }
    Kernel4D::new(values)
}

/// One point of the equivalence sweep between [`segment_conv`] and
/// [`conv4d`] over the embedded kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleCell {
    pub channels: usize,
    pub snippets: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_size: usize,
    pub seed: u64,
}

impl OracleCell {
    pub fn shape(&self) -> [usize; 6] {
        [1, self.channels, self.snippets, self.frames, self.height, self.width]
    }

    /// Max absolute difference between the two paths on a random feature
    /// and a kernel produced by a randomly initialized generator.
    pub fn deviation(&self) -> Result<f64> {
        let mut r = rng::stream(self.seed, "oracle");
        let v = Tensor::uniform(&self.shape(), -1.0, 1.0, &mut r);
        let cfg = DsaConfig {
            snippets: self.snippets,
            kernel_size: self.kernel_size,
            channels: self.channels,
            beta: 1.0,
            ..DsaConfig::default()
        };
        cfg.validate()?;
        let mut params = DsaParams::init(&cfg, &mut r);
        let kernel = generate_kernel(&pool_context(&v)?, &mut params, &cfg, Mode::Train)?;
        let fast = segment_conv(&v, &kernel)?;
        let slow = conv4d(&v, &embed_dsa_kernel(&kernel, self.channels)?)?;
        Ok(fast.max_abs_diff(&slow))
    }
}

/// `C ∈ {1,2,3}`, `U ∈ {2,3,4}`, `T, H, W ∈ {1,2}`, every seed; cells with
/// any extent above `max_extent` are dropped.
pub fn oracle_grid(kernel_size: usize, seeds: &[u64], max_extent: Option<usize>) -> Vec<OracleCell> {
    let cap = max_extent.unwrap_or(usize::MAX);
    let mut cells = Vec::new();
    for channels in 1..=3 {
        for snippets in 2..=4 {
            for frames in 1..=2 {
                for height in 1..=2 {
                    for width in 1..=2 {
                        if [channels, snippets, frames, height, width].iter().any(|&e| e > cap) {
                            continue;
                        }
                        for &seed in seeds {
                            cells.push(OracleCell {
                                channels,
                                snippets,
                                frames,
                                height,
                                width,
                                kernel_size,
                                seed,
                            });
                        }
                    }
                }
            }
        }
    }
    cells
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn rejects_even_extents() {
        assert!(Kernel4D::new(Tensor::zeros(&[1, 1, 2, 1, 1, 1])).is_err());
        assert!(Kernel4D::new(Tensor::zeros(&[1, 1, 3, 1, 1])).is_err());
    }

    #[test]
    fn delta_and_zero_kernels() {
        let v = Tensor::uniform(&[1, 2, 3, 2, 2, 1], -1.0, 1.0, &mut rng::rng(0));
        let mut delta = Tensor::zeros(&[2, 2, 3, 3, 1, 1]);
        delta.set(&[0, 0, 1, 1, 0, 0], 1.0);
        delta.set(&[1, 1, 1, 1, 0, 0], 1.0);
        assert_eq!(conv4d(&v, &Kernel4D::new(delta).unwrap()).unwrap(), v);
        let zero = Kernel4D::new(Tensor::zeros(&[3, 2, 1, 1, 3, 1])).unwrap();
        let y = conv4d(&v, &zero).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3, 2, 2, 1]);
        assert!(y.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hand_expanded_two_snippets() {
        let (a, b) = (0.7, -1.3);
        let (k0, k1, k2) = (0.2, 0.5, 0.3);
        let v = Tensor::new(vec![1, 1, 2, 1, 1, 1], vec![a, b]).unwrap();
        let k = Kernel4D::new(Tensor::new(vec![1, 1, 3, 1, 1, 1], vec![k0, k1, k2]).unwrap()).unwrap();
        let y = conv4d(&v, &k).unwrap();
        assert!((y.data()[0] - (k1 * a + k2 * b)).abs() < 1e-15);
        assert!((y.data()[1] - (k0 * a + k1 * b)).abs() < 1e-15);
    }

    #[test]
    fn embedding_is_diagonal() {
        let third = 1.0 / 3.0;
        let k = DynamicKernel::broadcast(&[third; 3], 1, 3);
        let e = embed_dsa_kernel(&k, 3).unwrap();
        for co in 0..3 {
            for ci in 0..3 {
                for l in 0..3 {
                    let v = e.values().get(&[co, ci, l, 0, 0, 0]);
                    if co == ci {
                        assert_eq!(v, third);
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
        assert!(embed_dsa_kernel(&DynamicKernel::broadcast(&[1.0], 2, 3), 3).is_err());
    }
}
