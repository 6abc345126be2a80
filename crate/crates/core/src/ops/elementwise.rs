use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "add",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(a.zip_map(b, |x, y| x + y))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// `x[.., f] + bias[f]` over the last axis.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let f = *x.shape().last().unwrap();
    if bias.shape() != [f] {
        return Err(Error::ShapeMismatch {
            op: "add_bias",
            lhs: x.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(f.max(1)) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(out)
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = add(self.value(a), self.value(b))?;
        Ok(self.record("add", &[a, b], value, Box::new(|g, _, _| vec![g.clone(), g.clone()])))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = relu(self.value(x));
        self.record(
            "relu",
            &[x],
            value,
            Box::new(|g, inputs, _| {
                // subgradient 0 at exactly 0
                vec![inputs[0].zip_map(g, |x, g| if x > 0.0 { g } else { 0.0 })]
            }),
        )
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        self.record("scale", &[x], value, Box::new(move |g, _, _| vec![g.scale(s)]))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = add_bias(self.value(x), self.value(bias))?;
        Ok(self.record(
            "add_bias",
            &[x, bias],
            value,
            Box::new(|g, inputs, _| {
                let f = inputs[1].numel();
                let mut gb = vec![0.0; f];
                for row in g.data().chunks(f.max(1)) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![g.clone(), Tensor::from_vec(gb)]
            }),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.record(
            "reshape",
            &[x],
            value,
            Box::new(|g, inputs, _| vec![g.reshape(inputs[0].shape()).unwrap()]),
        ))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.record(
            "sum",
            &[x],
            value,
            Box::new(|g, inputs, _| vec![Tensor::full(inputs[0].shape(), g.data()[0])]),
        )
    }

    /// `Σ weights ⊙ x` against a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                lhs: xv.shape().to_vec(),
                rhs: weights.shape().to_vec(),
            });
        }
        let value = Tensor::scalar(xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum());
        let w = weights.clone();
        Ok(self.record(
            "weighted_sum",
            &[x],
            value,
            Box::new(move |g, _, _| vec![w.scale(g.data()[0])]),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_examples() {
        let a = Tensor::from_vec(vec![1.0, 2.0]);
        let b = Tensor::from_vec(vec![3.0, 4.0]);
        assert_eq!(add(&a, &b).unwrap().data(), &[4.0, 6.0]);
        assert!(add(&a, &Tensor::zeros(&[2])).unwrap().bitwise_eq(&a));
        let err = add(&a, &Tensor::zeros(&[3])).unwrap_err();
        assert!(err.to_string().contains("[2]") && err.to_string().contains("[3]"));
    }

    #[test]
    fn add_gradient_is_ones() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(vec![0.3, -0.7, 2.0]));
        let b = tape.leaf(Tensor::from_vec(vec![1.0, 1.0, 1.0]));
        let y = tape.add(a, b).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0; 3]);
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::from_vec(vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu(&relu(&x)), relu(&x));
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let y = tape.relu(v);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[0.0, 0.0, 1.0]);
    }
}
