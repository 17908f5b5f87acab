//! Finite-difference gradient checking.
//!
//! `grad_check` compares analytic gradients from one backward pass against
//! central differences of the re-evaluated forward, returning the worst
//! relative error over sampled coordinates.

use crate::error::{CkbError, Result};
use crate::rng::SeededRng;
use crate::tape::{watch_all, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-3;

/// Denominator floor for f32 forward passes: below this gradient
/// magnitude, central differences of an f32-valued loss carry only
/// rounding noise (about eps_f32 * |loss| / (2h), around 1e-4 at h = 1e-3
/// for unit-scale losses), so the relative error is measured against the
/// floor instead of the vanishing gradient.
pub const F32_NOISE_FLOOR: f64 = 0.1;

/// Max relative error between analytic and central-difference gradients,
/// |analytic - numeric| / max(|analytic|, |numeric|, floor).
///
/// `build` constructs a scalar loss from the watched parameter vars, in the
/// order of `params`. Tensors with `requires_grad = false` are treated as
/// constants. At most `max_coords` coordinates per tensor are probed.
pub fn grad_check<F>(
    build: &F,
    params: &mut [Tensor],
    h: f64,
    max_coords: usize,
    rng: &mut SeededRng,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with_floor(build, params, h, max_coords, 1e-8, rng)
}

/// `grad_check` with an explicit denominator floor.
pub fn grad_check_with_floor<F>(
    build: &F,
    params: &mut [Tensor],
    h: f64,
    max_coords: usize,
    floor: f64,
    rng: &mut SeededRng,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |params: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let refs: Vec<&Tensor> = params.iter().collect();
        let vars = watch_all(&mut tape, &refs);
        let loss = build(&mut tape, &vars)?;
        if tape.value(loss).len() != 1 {
            return Err(CkbError::shape("grad_check", "scalar loss", "non-scalar"));
        }
        let v = tape.value_f64(loss);
        if !v.is_finite() {
            return Err(CkbError::Numeric {
                op: "grad_check".into(),
                detail: "loss is non-finite".into(),
            });
        }
        Ok(v)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let refs: Vec<&Tensor> = params.iter().collect();
    let vars = watch_all(&mut tape, &refs);
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Option<Vec<f32>>> = vars
        .iter()
        .map(|v| tape.grad_of(*v).map(|g| g.to_vec()))
        .collect();

    let mut worst = 0.0f64;
    for pi in 0..params.len() {
        if !params[pi].requires_grad {
            continue;
        }
        let n = params[pi].numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| rng.index(n)).collect()
        };
        let grads = analytic[pi]
            .as_ref()
            .ok_or_else(|| CkbError::State(format!("parameter {pi} received no gradient")))?;
        for c in coords {
            let orig = params[pi].data()[c];
            params[pi].data_mut()[c] = orig + h as f32;
            let up = eval(params)?;
            params[pi].data_mut()[c] = orig - h as f32;
            let down = eval(params)?;
            params[pi].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grads[c] as f64;
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = (a - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn exact_on_quadratic() {
        // f(x) = 0.5 * ||x||^2 has gradient x. The central difference is
        // exact for a quadratic at any step width; a wide step keeps f32
        // rounding noise in the evaluations below the tolerance.
        let mut x = Tensor::matrix(1, 4, vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        x.requires_grad = true;
        let build = |tape: &mut Tape, vars: &[Var]| {
            let sq = tape.mul(vars[0], vars[0])?;
            let half = tape.scale(sq, 0.5)?;
            let col = tape.transpose(half)?;
            let s = tape.mean_rows(col)?;
            tape.reshape(s, vec![1])
        };
        let mut rng = SeededRng::new(1);
        let err = grad_check(&build, &mut [x], 0.5, 16, &mut rng).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn rejects_non_finite_losses() {
        let mut x = Tensor::vector(vec![2.0]);
        x.requires_grad = true;
        let build = |tape: &mut Tape, vars: &[Var]| {
            // exp-free path to NaN: 0/0 via mul with an inf constant is not
            // representable without div; use scale overflow instead.
            let big = tape.scale(vars[0], f32::MAX)?;
            tape.mul(big, big)
        };
        let mut rng = SeededRng::new(1);
        assert!(grad_check(&build, &mut [x], DEFAULT_STEP, 4, &mut rng).is_err());
    }
}
