//! Two-layer feed-forward net: y = g(W_hy · f(W_xh · x)) with f = tanh and
//! g = identity, bias-free. Inputs are row vectors; weights are laid out so
//! the forward is x · W_xh followed by h · W_hy.

use crate::error::Result;
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::{ModelSignature, SignatureLevel};

#[derive(Debug, Clone)]
pub struct FeedForwardNet {
    pub w_xh: Tensor,
    pub w_hy: Tensor,
    pub d_in: usize,
    pub d_h: usize,
    pub d_out: usize,
}

pub struct FfnVars {
    pub w_xh: Var,
    pub w_hy: Var,
}

impl FeedForwardNet {
    pub fn new(d_in: usize, d_h: usize, d_out: usize, rng: &mut SeededRng) -> FeedForwardNet {
        FeedForwardNet {
            w_xh: Tensor::uniform_init(vec![d_in, d_h], 1.0 / (d_in as f32).sqrt(), rng),
            w_hy: Tensor::uniform_init(vec![d_h, d_out], 1.0 / (d_h as f32).sqrt(), rng),
            d_in,
            d_h,
            d_out,
        }
    }

    pub fn signature(&self) -> ModelSignature {
        ModelSignature::new("ffn", SignatureLevel::Global, self.d_in, self.d_out)
            .expect("positive dims by construction")
    }

    pub fn watch(&self, tape: &mut Tape, trainable: bool) -> FfnVars {
        if trainable {
            FfnVars {
                w_xh: tape.param(&self.w_xh),
                w_hy: tape.param(&self.w_hy),
            }
        } else {
            FfnVars {
                w_xh: tape.constant(&self.w_xh),
                w_hy: tape.constant(&self.w_hy),
            }
        }
    }

    /// Forward for a batch of row vectors (T x d_in).
    pub fn forward_on(&self, tape: &mut Tape, vars: &FfnVars, x: Var) -> Result<Var> {
        let pre = tape.matmul(x, vars.w_xh)?;
        let h = tape.tanh(pre)?;
        tape.matmul(h, vars.w_hy)
    }

    /// Off-tape forward for one input vector.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.watch(&mut tape, false);
        let xv = if x.shape().len() == 1 {
            let t = tape.constant(x);
            tape.reshape(t, vec![1, x.numel()])?
        } else {
            tape.constant(x)
        };
        let y = self.forward_on(&mut tape, &vars, xv)?;
        let flat = tape.reshape(y, vec![self.d_out])?;
        Ok(tape.to_tensor(flat))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.w_xh, &self.w_hy]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_xh, &mut self.w_hy]
    }

    pub fn param_names(&self) -> Vec<String> {
        vec!["ffn/w_xh".into(), "ffn/w_hy".into()]
    }

    pub fn count_params(&self) -> usize {
        self.d_in * self.d_h + self.d_h * self.d_out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_propagate_zero() {
        let mut rng = SeededRng::new(1);
        let mut net = FeedForwardNet::new(3, 4, 2, &mut rng);
        for p in net.params_mut() {
            p.data_mut().fill(0.0);
        }
        let y = net.forward(&Tensor::vector(vec![1.0, -2.0, 0.5])).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn hand_set_weights_match_scalar_computation() {
        let mut rng = SeededRng::new(1);
        let mut net = FeedForwardNet::new(2, 2, 1, &mut rng);
        net.w_xh = Tensor::matrix(2, 2, vec![0.5, -0.25, 1.0, 0.75]).unwrap();
        net.w_hy = Tensor::matrix(2, 1, vec![2.0, -1.0]).unwrap();
        let x = [0.3f64, -0.6];
        let h0 = (x[0] * 0.5 + x[1] * 1.0).tanh();
        let h1 = (x[0] * -0.25 + x[1] * 0.75).tanh();
        let expected = h0 * 2.0 + h1 * -1.0;
        let y = net
            .forward(&Tensor::vector(vec![x[0] as f32, x[1] as f32]))
            .unwrap();
        assert!((y.data()[0] as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn output_shape_is_d_out() {
        let mut rng = SeededRng::new(7);
        let net = FeedForwardNet::new(5, 8, 3, &mut rng);
        let y = net
            .forward(&Tensor::vector(vec![0.1, 0.2, 0.3, 0.4, 0.5]))
            .unwrap();
        assert_eq!(y.shape(), &[3]);
    }

    #[test]
    fn count_excludes_nothing_for_bias_free_ffn() {
        let mut rng = SeededRng::new(1);
        let net = FeedForwardNet::new(2, 3, 2, &mut rng);
        assert_eq!(net.count_params(), 12);
    }
}
