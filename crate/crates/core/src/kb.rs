//! The continuous knowledge base: one high-level matrix plus K low-level
//! matrices, all learnable and all sharing the column width d_m.
//!
//! One import procedure owns the base exclusively while training it; during
//! export it is frozen and may be read concurrently, hence the RwLock handle.

use std::sync::{Arc, RwLock};

use crate::error::{CkbError, Result};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KbConfig {
    /// Number of low-level matrices; at least 1.
    pub k: usize,
    /// Rows per low-level matrix.
    pub r_l: usize,
    /// Rows of the high-level matrix.
    pub r_h: usize,
    /// Shared column width.
    pub d_m: usize,
}

impl KbConfig {
    pub fn new(k: usize, r_l: usize, r_h: usize, d_m: usize) -> Result<KbConfig> {
        if k == 0 || r_l == 0 || r_h == 0 || d_m == 0 {
            return Err(CkbError::Config(format!(
                "knowledge base dims must be positive: k={k}, r_l={r_l}, r_h={r_h}, d_m={d_m}"
            )));
        }
        Ok(KbConfig { k, r_l, r_h, d_m })
    }

    pub fn param_count(&self) -> usize {
        self.k * self.r_l * self.d_m + self.r_h * self.d_m
    }
}

#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    pub high: Tensor,
    pub low: Vec<Tensor>,
    cfg: KbConfig,
}

pub struct KbVars {
    pub high: Var,
    pub low: Vec<Var>,
}

impl KnowledgeBase {
    /// Learnable matrices initialized uniform(-1/sqrt(d_m), 1/sqrt(d_m)).
    pub fn init(cfg: KbConfig, rng: &mut SeededRng) -> KnowledgeBase {
        let s = 1.0 / (cfg.d_m as f32).sqrt();
        KnowledgeBase {
            high: Tensor::uniform_init(vec![cfg.r_h, cfg.d_m], s, rng),
            low: (0..cfg.k)
                .map(|_| Tensor::uniform_init(vec![cfg.r_l, cfg.d_m], s, rng))
                .collect(),
            cfg,
        }
    }

    pub fn config(&self) -> KbConfig {
        self.cfg
    }

    /// K + 1 matrices in total.
    pub fn matrix_count(&self) -> usize {
        self.low.len() + 1
    }

    pub fn param_count(&self) -> usize {
        self.cfg.param_count()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut ps = vec![&self.high];
        ps.extend(self.low.iter());
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut ps = vec![&mut self.high];
        ps.extend(self.low.iter_mut());
        ps
    }

    /// Checkpoint entry names, aligned with `params` order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["ckb/high".to_string()];
        for k in 0..self.low.len() {
            names.push(format!("ckb/low/{k}"));
        }
        names
    }

    pub fn content_hash(&self) -> u64 {
        crate::tensor::group_hash(self.params())
    }

    pub fn watch(&self, tape: &mut Tape, trainable: bool) -> KbVars {
        let mut put = |t: &Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        KbVars {
            high: put(&self.high),
            low: self.low.iter().map(put).collect(),
        }
    }
}

/// Shared ownership handle: exclusive while importing, shared while exporting.
pub type KbHandle = Arc<RwLock<KnowledgeBase>>;

pub fn kb_handle(kb: KnowledgeBase) -> KbHandle {
    Arc::new(RwLock::new(kb))
}
