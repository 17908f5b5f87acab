//! Function-simulation training: importing model knowledge into the base,
//! exporting it back out, checkpoint selection, and the distillation and
//! transfer-learning recipes built from those pieces.
//!
//! Importing trains the knowledge base and a per-model interface to
//! reproduce the frozen model's interface-level function on real inputs
//! (step pairs for local bindings, whole blocks for global ones).
//! Fidelity and exporting work at the composed level: the interface is
//! composed the same way the source model composes its local function,
//! giving a tokens-to-state encoder that a fresh model learns to match.

mod export;
mod fidelity;
mod import;
mod probes;
mod recipes;

pub use export::{export_to, ExportOpts, ExportOutcome};
pub use fidelity::{fidelity, model_agreement, FidelityReport};
pub use import::{import_multi, import_single, ImportOpts, ImportOutcome, MetricsSink, SnapshotStore};
pub use probes::{interface_encode, step_pairs, PairPool};
pub use recipes::{kd_via_ckb, tl_via_ckb, CkbClassifier, KdOutcome, TlOutcome};

use crate::error::{CkbError, Result};
use crate::interface::InterfaceParams;
use crate::kb::KbHandle;
use crate::models::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Import,
    Export,
}

/// Unlabeled probe inputs a task draws from.
#[derive(Debug, Clone)]
pub enum ProbeSet {
    Text(Vec<Vec<usize>>),
    /// Row vectors, each 1 x d_in.
    Vectors(Vec<Tensor>),
}

impl ProbeSet {
    pub fn len(&self) -> usize {
        match self {
            ProbeSet::Text(v) => v.len(),
            ProbeSet::Vectors(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A bound (model, interface, kb, data, direction) tuple.
///
/// Importing freezes the model and trains kb plus interface; exporting
/// freezes kb plus interface and trains the model.
pub struct TransferTask {
    pub name: String,
    pub model: Model,
    pub interface: InterfaceParams,
    pub kb: KbHandle,
    pub train: ProbeSet,
    pub heldout: ProbeSet,
    /// Labeled rows for validation-accuracy tracking during import.
    pub valid: Vec<(Vec<usize>, usize)>,
    pub direction: Direction,
}

impl TransferTask {
    pub fn new(
        name: &str,
        model: Model,
        interface: InterfaceParams,
        kb: KbHandle,
        train: ProbeSet,
        heldout: ProbeSet,
        direction: Direction,
    ) -> Result<TransferTask> {
        if train.is_empty() {
            return Err(CkbError::Input(format!("task '{name}': empty probe set")));
        }
        let sig = model.signature();
        if interface.signature.level != sig.level && direction == Direction::Import {
            return Err(CkbError::Binding(format!(
                "task '{name}': interface level does not match model signature"
            )));
        }
        Ok(TransferTask {
            name: name.to_string(),
            model,
            interface,
            kb,
            train,
            heldout,
            valid: Vec::new(),
            direction,
        })
    }

    pub fn with_valid(mut self, valid: Vec<(Vec<usize>, usize)>) -> TransferTask {
        self.valid = valid;
        self
    }
}

/// Per-checkpoint, per-model validation accuracies.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalGrid {
    /// acc[c][i]: accuracy of model i at checkpoint c.
    pub acc: Vec<Vec<f64>>,
}

impl EvalGrid {
    pub fn new() -> EvalGrid {
        EvalGrid { acc: Vec::new() }
    }

    pub fn push_checkpoint(&mut self, accuracies: Vec<f64>) {
        self.acc.push(accuracies);
    }

    pub fn is_empty(&self) -> bool {
        self.acc.is_empty()
    }
}

impl Default for EvalGrid {
    fn default() -> Self {
        EvalGrid::new()
    }
}

/// The checkpoint maximizing the minimum per-model validation accuracy;
/// ties resolve to the earliest index.
pub fn select_checkpoint(grid: &EvalGrid) -> Result<usize> {
    if grid.acc.is_empty() {
        return Err(CkbError::Input("empty evaluation grid".into()));
    }
    let width = grid.acc[0].len();
    if width == 0 {
        return Err(CkbError::Input("evaluation grid has no models".into()));
    }
    let mut best_idx = 0;
    let mut best_min = f64::NEG_INFINITY;
    for (c, row) in grid.acc.iter().enumerate() {
        if row.len() != width {
            return Err(CkbError::Input(format!(
                "ragged evaluation grid: row {c} has {} entries, expected {width}",
                row.len()
            )));
        }
        let row_min = row.iter().cloned().fold(f64::INFINITY, f64::min);
        if row_min > best_min {
            best_min = row_min;
            best_idx = c;
        }
    }
    Ok(best_idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: &[&[f64]]) -> EvalGrid {
        EvalGrid {
            acc: rows.iter().map(|r| r.to_vec()).collect(),
        }
    }

    #[test]
    fn max_min_picks_the_balanced_checkpoint() {
        let g = grid(&[&[0.8, 0.6], &[0.7, 0.75], &[0.9, 0.5]]);
        assert_eq!(select_checkpoint(&g).unwrap(), 1);
    }

    #[test]
    fn single_column_reduces_to_argmax() {
        let g = grid(&[&[0.2], &[0.9], &[0.4]]);
        assert_eq!(select_checkpoint(&g).unwrap(), 1);
    }

    #[test]
    fn ties_take_the_earliest_index() {
        let g = grid(&[&[0.7, 0.7], &[0.7, 0.7]]);
        assert_eq!(select_checkpoint(&g).unwrap(), 0);
    }

    #[test]
    fn ragged_grids_are_input_errors() {
        let g = grid(&[&[0.7, 0.7], &[0.7]]);
        assert!(select_checkpoint(&g).is_err());
        assert!(select_checkpoint(&EvalGrid::new()).is_err());
    }

    #[test]
    fn brute_force_agreement_on_random_grids_with_ties() {
        let mut rng = crate::rng::SeededRng::new(99);
        for _ in 0..1000 {
            let rows = rng.range(1, 8);
            let cols = rng.range(1, 5);
            let mut g = EvalGrid::new();
            for _ in 0..rows {
                // Coarse values make ties frequent.
                let row: Vec<f64> = (0..cols).map(|_| rng.range(0, 5) as f64 / 4.0).collect();
                g.push_checkpoint(row);
            }
            // Brute force: scan every checkpoint, track the first maximum.
            let mut best = 0;
            let mut best_val = f64::NEG_INFINITY;
            for (c, row) in g.acc.iter().enumerate() {
                let m = row.iter().cloned().fold(f64::INFINITY, f64::min);
                if m > best_val {
                    best_val = m;
                    best = c;
                }
            }
            assert_eq!(select_checkpoint(&g).unwrap(), best);
        }
    }

    #[test]
    fn invariant_under_monotone_transforms() {
        let mut rng = crate::rng::SeededRng::new(7);
        for _ in 0..100 {
            let rows = rng.range(2, 6);
            let cols = rng.range(1, 4);
            let mut g = EvalGrid::new();
            for _ in 0..rows {
                g.push_checkpoint((0..cols).map(|_| rng.uniform(0.0, 1.0) as f64).collect());
            }
            let base = select_checkpoint(&g).unwrap();
            let transformed = EvalGrid {
                acc: g
                    .acc
                    .iter()
                    .map(|r| r.iter().map(|&v| (3.0 * v + 1.0).exp()).collect())
                    .collect(),
            };
            assert_eq!(select_checkpoint(&transformed).unwrap(), base);
        }
    }
}
