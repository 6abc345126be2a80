use crate::error::{invalid, Error, Result};
use crate::ops::around_axis;
use crate::tape::{Tape, Var};
use crate::tensor::{strides_of, Tensor};

/// Max-subtracted softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::InvalidAxis { axis, rank: x.rank() });
    }
    let (outer, n, inner) = around_axis(x.shape(), axis);
    let mut out = x.clone();
    let d = out.data_mut();
    let mut e = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (k, ek) in e.iter_mut().enumerate() {
                *ek = (d[at(k)] - max).exp();
                total += *ek;
            }
            for (k, ek) in e.iter().enumerate() {
                d[at(k)] = ek / total;
            }
        }
    }
    Ok(out)
}

fn softmax_backward(g: &Tensor, y: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = around_axis(y.shape(), axis);
    let mut dx = Tensor::zeros(y.shape());
    let (yd, gd) = (y.data(), g.data());
    let out = dx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let dot: f64 = (0..n).map(|k| gd[at(k)] * yd[at(k)]).sum();
            for k in 0..n {
                out[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
            }
        }
    }
    dx
}

fn pooled_shape(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<bool>)> {
    if axes.is_empty() {
        return Err(invalid("global_avg_pool", "no axes to pool"));
    }
    let mut pooled = vec![false; shape.len()];
    for &a in axes {
        if a >= shape.len() {
            return Err(Error::InvalidAxis {
                axis: a,
                rank: shape.len(),
            });
        }
        pooled[a] = true;
    }
    let mut out: Vec<usize> = shape
        .iter()
        .zip(&pooled)
        .filter(|(_, &p)| !p)
        .map(|(&e, _)| e)
        .collect();
    if out.is_empty() {
        out.push(1);
    }
    Ok((out, pooled))
}

/// Maps each input offset to its output offset once pooled axes are dropped.
fn pooled_index_map(shape: &[usize], pooled: &[bool]) -> Vec<usize> {
    let kept_strides = {
        let kept: Vec<usize> = shape.iter().zip(pooled).filter(|(_, &p)| !p).map(|(&e, _)| e).collect();
        let s = strides_of(&kept);
        let mut it = s.into_iter();
        pooled
            .iter()
            .map(|&p| if p { 0 } else { it.next().unwrap() })
            .collect::<Vec<_>>()
    };
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..numel {
        map.push(idx.iter().zip(&kept_strides).map(|(i, s)| i * s).sum());
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

/// Mean over `axes`; pooled axes are removed from the shape (a full
/// reduction yields shape `[1]`).
pub fn global_avg_pool(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let (out_shape, pooled) = pooled_shape(x.shape(), axes)?;
    let count: usize = x
        .shape()
        .iter()
        .zip(&pooled)
        .filter(|(_, &p)| p)
        .map(|(&e, _)| e)
        .product();
    let map = pooled_index_map(x.shape(), &pooled);
    let mut out = Tensor::zeros(&out_shape);
    let od = out.data_mut();
    for (&o, v) in map.iter().zip(x.data()) {
        od[o] += v;
    }
    let inv = 1.0 / count as f64;
    for v in od.iter_mut() {
        *v *= inv;
    }
    Ok(out)
}

pub fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(invalid(
            "permute",
            format!("{axes:?} is not a permutation of 0..{rank}"),
        ));
    }
    let in_strides = x.strides();
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; rank];
    for _ in 0..x.numel() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(x.data()[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Mean cross-entropy of `(N, K)` logits against class labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let &[n, k] = logits.shape() else {
        return Err(invalid(
            "cross_entropy",
            format!("expected (N, K) logits, got {:?}", logits.shape()),
        ));
    };
    if labels.len() != n || labels.iter().any(|&l| l >= k) {
        return Err(invalid("cross_entropy", "labels do not match logits"));
    }
    let probs = softmax(logits, 1)?;
    let mut loss = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[l];
    }
    Ok((loss / n as f64, probs))
}

impl Tape {
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = softmax(self.value(x), axis)?;
        Ok(self.record(
            "softmax",
            &[x],
            value,
            Box::new(move |g, _, y| vec![softmax_backward(g, y, axis)]),
        ))
    }

    pub fn global_avg_pool(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let value = global_avg_pool(xv, axes)?;
        let (_, pooled) = pooled_shape(xv.shape(), axes)?;
        let map = pooled_index_map(xv.shape(), &pooled);
        let count = (xv.numel() / value.numel()) as f64;
        let shape = xv.shape().to_vec();
        Ok(self.record(
            "global_avg_pool",
            &[x],
            value,
            Box::new(move |g, _, _| {
                let data = map.iter().map(|&o| g.data()[o] / count).collect();
                vec![Tensor::new(shape.clone(), data).unwrap()]
            }),
        ))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let value = permute(self.value(x), axes)?;
        let inv = inverse_permutation(axes);
        Ok(self.record(
            "permute",
            &[x],
            value,
            Box::new(move |g, _, _| vec![permute(g, &inv).unwrap()]),
        ))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = cross_entropy(self.value(logits), labels)?;
        let labels = labels.to_vec();
        Ok(self.record(
            "cross_entropy",
            &[logits],
            Tensor::scalar(loss),
            Box::new(move |g, _, _| {
                let k = probs.shape()[1];
                let scale = g.data()[0] / labels.len() as f64;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d.data_mut()[i * k + l] -= 1.0;
                }
                vec![d.scale(scale)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let u = softmax(&Tensor::zeros(&[3]), 0).unwrap();
        for v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        // exp(k - 3) / (e^-2 + e^-1 + 1), evaluated directly
        let y = softmax(&Tensor::from_vec(vec![1.0, 2.0, 3.0]), 0).unwrap();
        let expected = [0.09003057, 0.24472847, 0.66524096];
        for (a, b) in y.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-8);
        }
        let shifted = softmax(&Tensor::from_vec(vec![101.0, 102.0, 103.0]), 0).unwrap();
        assert!(shifted.max_abs_diff(&y) < 1e-15);
        assert!(matches!(
            softmax(&Tensor::zeros(&[2, 2]), 2),
            Err(Error::InvalidAxis { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn softmax_non_last_axis() {
        let x = Tensor::new(vec![2, 3], vec![0.1, 0.5, -0.3, 1.2, -0.7, 0.4]).unwrap();
        let y = softmax(&x, 0).unwrap();
        for j in 0..3 {
            let s = y.get(&[0, j]) + y.get(&[1, j]);
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_examples() {
        let c = Tensor::full(&[2, 3, 2, 2, 2], 1.75);
        let p = global_avg_pool(&c, &[2, 3, 4]).unwrap();
        assert_eq!(p.shape(), &[2, 3]);
        assert!(p.data().iter().all(|&v| v == 1.75));
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x, &[0, 1]).unwrap().data(), &[2.5]);
        assert_eq!(global_avg_pool(&x, &[0]).unwrap().data(), &[2.0, 3.0]);
        assert!(global_avg_pool(&x, &[]).is_err());
        assert!(global_avg_pool(&x, &[2]).is_err());
    }

    #[test]
    fn permute_round_trip() {
        let x = Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let y = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        assert_eq!(y.get(&[3, 1, 2]), x.get(&[1, 2, 3]));
        let back = permute(&y, &inverse_permutation(&[2, 0, 1])).unwrap();
        assert!(back.bitwise_eq(&x));
        assert!(permute(&x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![0.2, -0.4, 0.9, 0.0, 0.3, -0.8]).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let (loss, _) = cross_entropy(&Tensor::zeros(&[3, 2]), &[0, 1, 1]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&Tensor::zeros(&[3, 2]), &[0, 2, 1]).is_err());
    }
}
