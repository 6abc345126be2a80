use crate::error::{invalid, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Fraction of channels shifted in each direction by TSM blocks.
pub const TSM_SHIFT_FRACTION: f64 = 0.125;

fn shifted_channels(fraction: f64, c: usize) -> Result<usize> {
    if !(0.0..=0.5).contains(&fraction) {
        return Err(invalid(
            "temporal_shift",
            format!("fraction {fraction} outside [0, 1/2]"),
        ));
    }
    Ok((fraction * c as f64).floor() as usize)
}

/// Moves a channel block one frame along `T` inside every snippet.
///
/// The first `⌊fraction·C⌋` channels take their value from frame `t - 1`,
/// the next `⌊fraction·C⌋` from frame `t + 1`; vacated frames are zero.
fn shift_values(x: &Tensor, fold: usize, reverse: bool) -> Tensor {
    let [n, c, u, t, h, w] = x.expect_video("temporal_shift").unwrap();
    let hw = h * w;
    let mut out = x.clone();
    let (xd, od) = (x.data(), out.data_mut());
    for b in 0..n {
        for ch in 0..(2 * fold).min(c) {
            // forward block reads t-1; backward block reads t+1
            let forward = (ch < fold) != reverse;
            for s in 0..u {
                let base = ((b * c + ch) * u + s) * t;
                for f in 0..t {
                    let src = if forward {
                        f.checked_sub(1)
                    } else {
                        Some(f + 1).filter(|&g| g < t)
                    };
                    let dst = &mut od[(base + f) * hw..(base + f + 1) * hw];
                    match src {
                        Some(g) => dst.copy_from_slice(&xd[(base + g) * hw..(base + g + 1) * hw]),
                        None => dst.fill(0.0),
                    }
                }
            }
        }
    }
    out
}

pub fn temporal_shift(x: &Tensor, fraction: f64) -> Result<Tensor> {
    let [_, c, ..] = x.expect_video("temporal_shift")?;
    let fold = shifted_channels(fraction, c)?;
    Ok(shift_values(x, fold, false))
}

impl Tape {
    pub fn temporal_shift(&mut self, x: Var, fraction: f64) -> Result<Var> {
        let [_, c, ..] = self.value(x).expect_video("temporal_shift")?;
        let fold = shifted_channels(fraction, c)?;
        let value = shift_values(self.value(x), fold, false);
        // the adjoint of a shift is the opposite shift
        Ok(self.record(
            "temporal_shift",
            &[x],
            value,
            Box::new(move |g, _, _| vec![shift_values(g, fold, true)]),
        ))
    }
}
