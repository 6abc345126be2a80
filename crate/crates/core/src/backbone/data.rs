use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Per-sample `(C, U, T, H, W)` of the snippet-order task.
pub const ORDER_SHAPE: [usize; 5] = [4, 4, 2, 4, 4];
const NOISE_STD: f64 = 0.1;
const BLOB_STD: f64 = 1.0;
/// Channel loadings of the motif.
const PROFILE: [f64; 4] = [1.0, 0.5, -0.5, 0.25];

/// Videos whose snippets differ only by the amplitude of a shared motif.
///
/// Amplitudes are a permutation of `{1, 2, 3, 4}` over the snippets; the
/// label is 1 exactly when they increase with snippet index. Positives and
/// negatives alternate, so any even-length prefix is balanced.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderDataset {
    /// `(n, C, U, T, H, W)`
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub amplitudes: Vec<[u8; 4]>,
}

impl OrderDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        ORDER_SHAPE.iter().product()
    }

    /// Stacks the chosen samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * per..(i + 1) * per]);
        }
        let mut shape = vec![indices.len()];
        shape.extend(ORDER_SHAPE);
        (
            Tensor::new(shape, data).unwrap(),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// `(train, holdout)` index sets; the holdout is the last
    /// `holdout_fraction` of the samples rounded down to an even count.
    pub fn split(&self, holdout_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let n = self.len();
        let holdout = (((n as f64) * holdout_fraction) as usize) & !1;
        ((0..n - holdout).collect(), (n - holdout..n).collect())
    }
}

fn motif<R: Rng + ?Sized>(rng: &mut R) -> Vec<f64> {
    let [c, _, t, h, w] = ORDER_SHAPE;
    let cy = rng.random_range(0.0..h as f64);
    let cx = rng.random_range(0.0..w as f64);
    let mut out = Vec::with_capacity(c * t * h * w);
    for ch in PROFILE.iter().take(c) {
        for _ in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    out.push(ch * (-d2 / (2.0 * BLOB_STD * BLOB_STD)).exp());
                }
            }
        }
    }
    out
}

pub fn make_order_dataset(n: usize, seed: u64) -> Result<OrderDataset> {
    if !n.is_multiple_of(2) {
        return Err(invalid("make_order_dataset", format!("sample count {n} must be even")));
    }
    let [c, u, t, h, w] = ORDER_SHAPE;
    let frame = t * h * w;
    let mut rng = rng::stream(seed, "order-dataset");
    let noise = Normal::new(0.0, NOISE_STD).unwrap();
    let increasing = [1u8, 2, 3, 4];
    let mut inputs = Vec::with_capacity(n * c * u * frame);
    let mut labels = Vec::with_capacity(n);
    let mut amplitudes = Vec::with_capacity(n);
    for i in 0..n {
        let amps = if i % 2 == 0 {
            increasing
        } else {
            let mut p = increasing;
            while p == increasing {
                p.shuffle(&mut rng);
            }
            p
        };
        let m = motif(&mut rng);
        for ch in 0..c {
            for &a in &amps {
                for k in 0..frame {
                    inputs.push(f64::from(a) * m[ch * frame + k] + noise.sample(&mut rng));
                }
            }
        }
        labels.push(usize::from(amps == increasing));
        amplitudes.push(amps);
    }
    let mut shape = vec![n];
    shape.extend(ORDER_SHAPE);
    Ok(OrderDataset {
        inputs: Tensor::new(shape, inputs)?,
        labels,
        amplitudes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_follow_amplitude_order() {
        let d = make_order_dataset(40, 1).unwrap();
        assert_eq!(d.inputs.shape(), &[40, 4, 4, 2, 4, 4]);
        for (a, &l) in d.amplitudes.iter().zip(&d.labels) {
            let mut sorted = *a;
            sorted.sort();
            assert_eq!(sorted, [1, 2, 3, 4]);
            assert_eq!(l == 1, *a == [1, 2, 3, 4]);
        }
        assert_eq!(d.labels.iter().sum::<usize>(), 20);
        assert!(make_order_dataset(3, 1).is_err());
    }

    #[test]
    fn reproducible_per_seed() {
        assert_eq!(make_order_dataset(8, 5).unwrap(), make_order_dataset(8, 5).unwrap());
        assert_ne!(make_order_dataset(8, 5).unwrap(), make_order_dataset(8, 6).unwrap());
    }

    #[test]
    fn split_is_balanced() {
        let d = make_order_dataset(2000, 0).unwrap();
        let (train, hold) = d.split(0.2);
        assert_eq!((train.len(), hold.len()), (1600, 400));
        assert_eq!(hold.iter().map(|&i| d.labels[i]).sum::<usize>(), 200);
    }
}
