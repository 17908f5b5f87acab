//! Dense rank-1..3 tensor of f32 values, row-major.
//!
//! Plain value type: parameters, activations and datasets all live in
//! `Tensor`s. Differentiation happens on a [`crate::tape::Tape`], which
//! copies tensor data in and hands gradients back out.

use crate::error::{CkbError, Result};
use crate::rng::SeededRng;

pub const MAX_RANK: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn shape_str(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join("x"))
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(CkbError::shape(
                "tensor",
                "rank 1..=3",
                format!("rank {}", shape.len()),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(CkbError::shape("tensor", "positive dims", shape_str(&shape)));
        }
        if numel(&shape) != data.len() {
            return Err(CkbError::shape(
                "tensor",
                format!("{} values for {}", numel(&shape), shape_str(&shape)),
                format!("{} values", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Tensor> {
        Tensor::from_vec(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f32>) -> Tensor {
        let n = data.len();
        Tensor {
            shape: vec![n],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Uniform(-s, s) init; the caller picks s (typically 1/sqrt(fan_in)).
    pub fn uniform_init(shape: Vec<usize>, s: f32, rng: &mut SeededRng) -> Tensor {
        let n = numel(&shape);
        Tensor {
            shape,
            data: rng.uniform_vec(n, s),
            requires_grad: true,
            grad: None,
        }
    }

    /// Zero-filled trainable tensor (biases).
    pub fn zeros_param(shape: Vec<usize>) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.requires_grad = true;
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a matrix; a vector is treated as one row.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f32 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Add a gradient contribution; fan-out accumulates additively.
    pub fn accumulate_grad(&mut self, g: &[f32]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// FNV-1a over shape and raw value bytes; the freeze-contract hash.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for &d in &self.shape {
            for b in (d as u64).to_le_bytes() {
                eat(b);
            }
        }
        for v in &self.data {
            for b in v.to_le_bytes() {
                eat(b);
            }
        }
        h
    }
}

/// Combined hash of an ordered parameter group.
pub fn group_hash<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tensors {
        let th = t.content_hash();
        for b in th.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_agreement_enforced() {
        assert!(Tensor::from_vec(vec![2, 2], vec![1.0; 4]).is_ok());
        assert!(Tensor::from_vec(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::from_vec(vec![2, 0], vec![]).is_err());
        assert!(Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]).is_err());
    }

    #[test]
    fn grad_accumulates_additively() {
        let mut t = Tensor::vector(vec![0.0, 0.0]);
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[0.5, 0.5]);
        assert_eq!(t.grad.as_deref(), Some(&[1.5, 2.5][..]));
        t.zero_grad();
        assert!(t.grad.is_none());
    }

    #[test]
    fn content_hash_tracks_values_and_shape() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut b = a.clone();
        assert_eq!(a.content_hash(), b.content_hash());
        b.data_mut()[0] = 1.5;
        assert_ne!(a.content_hash(), b.content_hash());
        let c = Tensor::from_vec(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }
}
