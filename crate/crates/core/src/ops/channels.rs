use crate::error::{invalid, Error, Result};
use crate::ops::around_axis;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn check_rank(x: &Tensor, op: &'static str) -> Result<()> {
    if x.rank() < 2 {
        return Err(invalid(op, format!("channel axis 1 missing in shape {:?}", x.shape())));
    }
    Ok(())
}

/// Channels `[0, count)` and `[count, C)` along axis 1; either part may hold
/// zero channels.
pub fn split_channels(x: &Tensor, count: usize) -> Result<(Tensor, Tensor)> {
    check_rank(x, "split_channels")?;
    let (outer, c, inner) = around_axis(x.shape(), 1);
    if count > c {
        return Err(invalid("split_channels", format!("count {count} exceeds {c} channels")));
    }
    let mut first = Vec::with_capacity(outer * count * inner);
    let mut second = Vec::with_capacity(outer * (c - count) * inner);
    for block in x.data().chunks(c * inner).take(outer) {
        first.extend_from_slice(&block[..count * inner]);
        second.extend_from_slice(&block[count * inner..]);
    }
    let mut s1 = x.shape().to_vec();
    s1[1] = count;
    let mut s2 = x.shape().to_vec();
    s2[1] = c - count;
    Ok((Tensor::new(s1, first)?, Tensor::new(s2, second)?))
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_rank(a, "concat_channels")?;
    let compatible = a.rank() == b.rank() && a.shape()[0] == b.shape()[0] && a.shape()[2..] == b.shape()[2..];
    if !compatible {
        return Err(Error::ShapeMismatch {
            op: "concat_channels",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (outer, ca, inner) = around_axis(a.shape(), 1);
    let cb = b.shape()[1];
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for o in 0..outer {
        data.extend_from_slice(&a.data()[o * ca * inner..(o + 1) * ca * inner]);
        data.extend_from_slice(&b.data()[o * cb * inner..(o + 1) * cb * inner]);
    }
    let mut shape = a.shape().to_vec();
    shape[1] = ca + cb;
    Tensor::new(shape, data)
}

impl Tape {
    pub fn split_channels(&mut self, x: Var, count: usize) -> Result<(Var, Var)> {
        let (a, b) = split_channels(self.value(x), count)?;
        // Each half is its own node; its backward scatters into the full shape.
        let first = self.record(
            "split_channels",
            &[x],
            a,
            Box::new(move |g, inputs, _| {
                let rest = inputs[0].shape()[1] - count;
                let mut zshape = inputs[0].shape().to_vec();
                zshape[1] = rest;
                vec![concat_channels(g, &Tensor::zeros(&zshape)).unwrap()]
            }),
        );
        let second = self.record(
            "split_channels",
            &[x],
            b,
            Box::new(move |g, inputs, _| {
                let mut zshape = inputs[0].shape().to_vec();
                zshape[1] = count;
                vec![concat_channels(&Tensor::zeros(&zshape), g).unwrap()]
            }),
        );
        Ok((first, second))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = concat_channels(self.value(a), self.value(b))?;
        Ok(self.record(
            "concat_channels",
            &[a, b],
            value,
            Box::new(|g, inputs, _| {
                let (ga, gb) = split_channels(g, inputs[0].shape()[1]).unwrap();
                vec![ga, gb]
            }),
        ))
    }
}
