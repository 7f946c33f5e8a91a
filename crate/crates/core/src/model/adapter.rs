use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

/// Plain copy of one adapter's weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterWeights {
    /// `d x m`
    pub down_weight: Tensor,
    /// `m`
    pub down_bias: Tensor,
    /// `m x d`
    pub up_weight: Tensor,
    /// `d`
    pub up_bias: Tensor,
}

impl AdapterWeights {
    pub fn model_dim(&self) -> usize {
        self.down_weight.shape()[0]
    }
}

/// `h' = f2(tanh(f1(h))) + h`, applied to every row of `h` (`[..., d]`).
pub fn adapter_forward(h: &Tensor, w: &AdapterWeights) -> Result<Tensor> {
    let d = w.model_dim();
    if h.last_dim() != d {
        return Err(Error::ShapeMismatch {
            op: "adapter_forward",
            lhs: h.shape().to_vec(),
            rhs: w.down_weight.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let x = tape.leaf(h.reshape(&[h.rows(), d])?);
    let dw = tape.leaf(w.down_weight.clone());
    let db = tape.leaf(w.down_bias.clone());
    let uw = tape.leaf(w.up_weight.clone());
    let ub = tape.leaf(w.up_bias.clone());
    let down = tape.matmul(x, dw)?;
    let down = tape.add_bias(down, db)?;
    let act = tape.tanh(down)?;
    let up = tape.matmul(act, uw)?;
    let up = tape.add_bias(up, ub)?;
    let out = tape.add(up, x)?;
    tape.value(out)?.reshape(h.shape())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weights(down: Vec<f64>, up: Vec<f64>, d: usize, m: usize) -> AdapterWeights {
        AdapterWeights {
            down_weight: Tensor::new(vec![d, m], down).unwrap(),
            down_bias: Tensor::zeros(&[m]),
            up_weight: Tensor::new(vec![m, d], up).unwrap(),
            up_bias: Tensor::zeros(&[d]),
        }
    }

    #[test]
    fn zero_up_projection_is_identity() {
        let w = weights(vec![0.3, -0.7, 1.1, 0.2], vec![0.0; 4], 2, 2);
        let h = Tensor::new(vec![3, 2], vec![1.0, -2.0, 0.5, 0.25, -3.0, 4.0]).unwrap();
        assert!(adapter_forward(&h, &w).unwrap().bit_eq(&h));
    }

    #[test]
    fn scalar_hand_example() {
        // f1 = [0.5, -1.0]^T, f2 = [2.0, 0.0], h = [1, 0]:
        // f1(h) = 0.5, tanh(0.5) = 0.4621172, f2 -> [0.9242343, 0] + h.
        let w = weights(vec![0.5, -1.0], vec![2.0, 0.0], 2, 1);
        let h = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let out = adapter_forward(&h, &w).unwrap();
        assert!((out.data()[0] - 1.924_234_3).abs() < 1e-7, "{out:?}");
        assert_eq!(out.data()[1], 0.0);
    }

    #[test]
    fn preserves_shape() {
        let d = 6;
        let w = weights(vec![0.01; d * 3], vec![0.02; 3 * d], d, 3);
        let h = Tensor::full(&[4, 7, d], 0.5);
        assert_eq!(adapter_forward(&h, &w).unwrap().shape(), &[4, 7, d]);
    }

    #[test]
    fn rejects_wrong_width() {
        let w = weights(vec![0.5, -1.0], vec![2.0, 0.0], 2, 1);
        let h = Tensor::zeros(&[3]);
        assert!(adapter_forward(&h, &w).is_err());
    }
}
