//! Held-out fidelity: how closely the composed interface tracks the model.

use crate::error::{CkbError, Result};
use crate::interface::InterfaceParams;
use crate::kb::KnowledgeBase;
use crate::models::Model;
use crate::tensor::Tensor;

use super::probes::{interface_encode, model_encode, Probe};
use super::ProbeSet;

/// Mean and quantiles of per-example cosine distance between the composed
/// interface and the model on a held-out input set.
#[derive(Debug, Clone)]
pub struct FidelityReport {
    pub mean: f64,
    /// Sorted per-example distances.
    pub distances: Vec<f64>,
    pub examples: usize,
    /// Inputs excluded because a side produced a near-zero-norm state.
    pub degenerate: usize,
}

impl FidelityReport {
    /// Quantile by nearest rank over the sorted distances.
    pub fn quantile(&self, q: f64) -> f64 {
        if self.distances.is_empty() {
            return f64::NAN;
        }
        let idx = ((q * self.distances.len() as f64).ceil() as usize)
            .saturating_sub(1)
            .min(self.distances.len() - 1);
        self.distances[idx]
    }
}

fn row_cosine_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(CkbError::shape(
            "fidelity",
            crate::tensor::shape_str(a.shape()),
            crate::tensor::shape_str(b.shape()),
        ));
    }
    let cols = a.cols();
    let rows = a.numel() / cols;
    let mut acc = 0.0f64;
    for r in 0..rows {
        let ra = &a.data()[r * cols..(r + 1) * cols];
        let rb = &b.data()[r * cols..(r + 1) * cols];
        let mut dot = 0.0f64;
        let mut na = 0.0f64;
        let mut nb = 0.0f64;
        for (&x, &y) in ra.iter().zip(rb) {
            dot += x as f64 * y as f64;
            na += x as f64 * x as f64;
            nb += y as f64 * y as f64;
        }
        let (na, nb) = (na.sqrt(), nb.sqrt());
        if na < 1e-8 || nb < 1e-8 {
            return Err(CkbError::DegenerateInput {
                op: "fidelity",
                row: r,
            });
        }
        acc += 1.0 - dot / (na * nb);
    }
    Ok(acc / rows as f64)
}

/// Per-example composed-state distances between interface and model.
/// Degenerate inputs are excluded and counted.
pub fn fidelity(
    iface: &InterfaceParams,
    kb: &KnowledgeBase,
    model: &Model,
    heldout: &ProbeSet,
) -> Result<FidelityReport> {
    if heldout.is_empty() {
        return Err(CkbError::Input("empty held-out set".into()));
    }
    let mut distances = Vec::with_capacity(heldout.len());
    let mut degenerate = 0usize;
    let mut eval = |probe: Probe<'_>| -> Result<()> {
        let from_iface = interface_encode(iface, kb, model, probe)?;
        let from_model = model_encode(model, probe)?;
        match row_cosine_distance(&from_iface, &from_model) {
            Ok(d) => distances.push(d),
            Err(CkbError::DegenerateInput { .. }) => degenerate += 1,
            Err(e) => return Err(e),
        }
        Ok(())
    };
    match heldout {
        ProbeSet::Text(seqs) => {
            for tokens in seqs {
                eval(Probe::Tokens(tokens))?;
            }
        }
        ProbeSet::Vectors(xs) => {
            for x in xs {
                eval(Probe::Vector(x))?;
            }
        }
    }
    if distances.is_empty() {
        return Err(CkbError::Input(
            "all held-out inputs were degenerate".into(),
        ));
    }
    let mean = distances.iter().sum::<f64>() / distances.len() as f64;
    distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(FidelityReport {
        mean,
        examples: distances.len(),
        distances,
        degenerate,
    })
}

/// Model-vs-model composed-state distance, for round-trip comparisons.
pub fn model_agreement(a: &Model, b: &Model, heldout: &ProbeSet) -> Result<FidelityReport> {
    if heldout.is_empty() {
        return Err(CkbError::Input("empty held-out set".into()));
    }
    let mut distances = Vec::with_capacity(heldout.len());
    let mut degenerate = 0usize;
    let mut eval = |probe: Probe<'_>| -> Result<()> {
        let ya = model_encode(a, probe)?;
        let yb = model_encode(b, probe)?;
        match row_cosine_distance(&ya, &yb) {
            Ok(d) => distances.push(d),
            Err(CkbError::DegenerateInput { .. }) => degenerate += 1,
            Err(e) => return Err(e),
        }
        Ok(())
    };
    match heldout {
        ProbeSet::Text(seqs) => {
            for tokens in seqs {
                eval(Probe::Tokens(tokens))?;
            }
        }
        ProbeSet::Vectors(xs) => {
            for x in xs {
                eval(Probe::Vector(x))?;
            }
        }
    }
    let mean = distances.iter().sum::<f64>() / distances.len().max(1) as f64;
    distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(FidelityReport {
        mean,
        examples: distances.len(),
        distances,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{GruClassifier, Model};
    use crate::rng::SeededRng;

    #[test]
    fn model_against_itself_is_zero() {
        let mut rng = SeededRng::new(4);
        let m = Model::Gru(GruClassifier::new(10, 3, 4, 2, &mut rng));
        let held = ProbeSet::Text(vec![vec![1, 2, 3], vec![4, 5, 6, 7], vec![8, 9]]);
        let rep = model_agreement(&m, &m, &held).unwrap();
        assert!(rep.mean < 1e-6);
        assert_eq!(rep.examples, 3);
        assert_eq!(rep.degenerate, 0);
    }

    #[test]
    fn mean_is_arithmetic_mean_and_quantiles_monotone() {
        let rep = FidelityReport {
            mean: 0.0,
            distances: vec![0.4, 0.1, 0.3, 0.2],
            examples: 4,
            degenerate: 0,
        };
        let mean = rep.distances.iter().sum::<f64>() / 4.0;
        assert!((mean - 0.25).abs() < 1e-9);
        let mut sorted = rep.distances.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rep = FidelityReport {
            mean,
            distances: sorted,
            examples: 4,
            degenerate: 0,
        };
        let qs: Vec<f64> = [0.25, 0.5, 0.75, 1.0].iter().map(|&q| rep.quantile(q)).collect();
        for w in qs.windows(2) {
            assert!(w[0] <= w[1]);
        }
    }
}
