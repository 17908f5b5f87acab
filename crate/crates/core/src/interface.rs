//! Per-model attention interface onto the knowledge base.
//!
//! Given an input block x (T rows of width d_in) the interface
//!   1. generates two on-the-fly matrices  M~l = x W_l and M~h = x W_h;
//!   2. attends over every low-level matrix augmented with M~l, producing
//!      hidden states h_1..h_K (each T x d_m);
//!   3. stacks H = [M_high ; h_1 ; ... ; h_K ; M~h];
//!   4. attends over H and projects to the output width.
//! Each stage has its own query/key/value projections; W_o closes the gap
//! between the memory width d_m and the model's output width.

use crate::error::{CkbError, Result};
use crate::kb::{KbVars, KnowledgeBase};
use crate::models::{ModelSignature, SignatureLevel};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct InterfaceParams {
    pub w_l: Tensor,
    pub w_h: Tensor,
    pub w_q1: Tensor,
    pub w_k1: Tensor,
    pub w_v1: Tensor,
    pub w_q2: Tensor,
    pub w_k2: Tensor,
    pub w_v2: Tensor,
    pub w_o: Tensor,
    pub signature: ModelSignature,
    pub d_m: usize,
}

pub struct InterfaceVars {
    pub w_l: Var,
    pub w_h: Var,
    pub w_q1: Var,
    pub w_k1: Var,
    pub w_v1: Var,
    pub w_q2: Var,
    pub w_k2: Var,
    pub w_v2: Var,
    pub w_o: Var,
}

/// Which interface parameters a tape should treat as trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IfaceMode {
    Trainable,
    Frozen,
    /// Only the query paths (W_q1, W_q2) learn; the read geometry is fixed.
    QueryOnly,
}

fn init(sig: &ModelSignature, d_m: usize, rng: &mut SeededRng) -> InterfaceParams {
    let s_in = 1.0 / (sig.d_in as f32).sqrt();
    let s_m = 1.0 / (d_m as f32).sqrt();
    InterfaceParams {
        w_l: Tensor::uniform_init(vec![sig.d_in, d_m], s_in, rng),
        w_h: Tensor::uniform_init(vec![sig.d_in, d_m], s_in, rng),
        w_q1: Tensor::uniform_init(vec![sig.d_in, d_m], s_in, rng),
        w_k1: Tensor::uniform_init(vec![d_m, d_m], s_m, rng),
        w_v1: Tensor::uniform_init(vec![d_m, d_m], s_m, rng),
        w_q2: Tensor::uniform_init(vec![sig.d_in, d_m], s_in, rng),
        w_k2: Tensor::uniform_init(vec![d_m, d_m], s_m, rng),
        w_v2: Tensor::uniform_init(vec![d_m, d_m], s_m, rng),
        w_o: Tensor::uniform_init(vec![d_m, sig.d_out], s_m, rng),
        signature: sig.clone(),
        d_m,
    }
}

/// Interface for a global function: consumes the model's whole input block
/// and emits its whole output block.
pub fn bind_global_interface(
    sig: &ModelSignature,
    d_m: usize,
    rng: &mut SeededRng,
) -> Result<InterfaceParams> {
    if sig.level != SignatureLevel::Global {
        return Err(CkbError::Binding(format!(
            "signature '{}' is local; use bind_local_interface",
            sig.name
        )));
    }
    Ok(init(sig, d_m, rng))
}

/// Interface for a local (step) function: the step inputs arrive
/// concatenated as one row and the output is the step output.
pub fn bind_local_interface(
    sig: &ModelSignature,
    d_m: usize,
    rng: &mut SeededRng,
) -> Result<InterfaceParams> {
    if sig.level != SignatureLevel::Local {
        return Err(CkbError::Binding(format!(
            "signature '{}' is global; use bind_global_interface",
            sig.name
        )));
    }
    Ok(init(sig, d_m, rng))
}

impl InterfaceParams {
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.w_l, &self.w_h, &self.w_q1, &self.w_k1, &self.w_v1, &self.w_q2, &self.w_k2,
            &self.w_v2, &self.w_o,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_l,
            &mut self.w_h,
            &mut self.w_q1,
            &mut self.w_k1,
            &mut self.w_v1,
            &mut self.w_q2,
            &mut self.w_k2,
            &mut self.w_v2,
            &mut self.w_o,
        ]
    }

    /// Trainable subset for a mode, aligned with `vars_for` watching.
    pub fn trainable_mut(&mut self, mode: IfaceMode) -> Vec<&mut Tensor> {
        match mode {
            IfaceMode::Trainable => self.params_mut(),
            IfaceMode::Frozen => Vec::new(),
            IfaceMode::QueryOnly => vec![&mut self.w_q1, &mut self.w_q2],
        }
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        ["w_l", "w_h", "w_q1", "w_k1", "w_v1", "w_q2", "w_k2", "w_v2", "w_o"]
            .iter()
            .map(|n| format!("{prefix}/{n}"))
            .collect()
    }

    pub fn content_hash(&self) -> u64 {
        crate::tensor::group_hash(self.params())
    }

    pub fn watch(&self, tape: &mut Tape, mode: IfaceMode) -> InterfaceVars {
        let mut put = |t: &Tensor, trainable: bool| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        };
        let all = matches!(mode, IfaceMode::Trainable);
        let query = all || matches!(mode, IfaceMode::QueryOnly);
        InterfaceVars {
            w_l: put(&self.w_l, all),
            w_h: put(&self.w_h, all),
            w_q1: put(&self.w_q1, query),
            w_k1: put(&self.w_k1, all),
            w_v1: put(&self.w_v1, all),
            w_q2: put(&self.w_q2, query),
            w_k2: put(&self.w_k2, all),
            w_v2: put(&self.w_v2, all),
            w_o: put(&self.w_o, all),
        }
    }

    /// The two-stage attention read. Returns the output block (T x d_out).
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        vars: &InterfaceVars,
        kb: &KbVars,
        x: Var,
    ) -> Result<Var> {
        self.forward_debug_on(tape, vars, kb, x).map(|(y, _)| y)
    }

    /// Forward that also exposes the stage-2 attention weights
    /// (T x (r_h + K*T + T), rows summing to 1).
    pub fn forward_debug_on(
        &self,
        tape: &mut Tape,
        vars: &InterfaceVars,
        kb: &KbVars,
        x: Var,
    ) -> Result<(Var, Var)> {
        let shape = tape.shape_of(x);
        if shape.len() != 2 || shape[1] != self.signature.d_in {
            return Err(CkbError::shape(
                "interface_forward",
                format!("[Tx{}]", self.signature.d_in),
                crate::tensor::shape_str(shape),
            ));
        }
        let m_low = tape.matmul(x, vars.w_l)?;
        let m_high = tape.matmul(x, vars.w_h)?;
        let q1 = tape.matmul(x, vars.w_q1)?;
        let mut blocks = Vec::with_capacity(kb.low.len() + 2);
        blocks.push(kb.high);
        for &low_k in &kb.low {
            let aug = tape.concat_rows(&[low_k, m_low])?;
            let keys = tape.matmul(aug, vars.w_k1)?;
            let vals = tape.matmul(aug, vars.w_v1)?;
            let (h_k, _) = tape.attention(q1, keys, vals)?;
            blocks.push(h_k);
        }
        blocks.push(m_high);
        let h_all = tape.concat_rows(&blocks)?;
        let q2 = tape.matmul(x, vars.w_q2)?;
        let keys2 = tape.matmul(h_all, vars.w_k2)?;
        let vals2 = tape.matmul(h_all, vars.w_v2)?;
        let (att, weights) = tape.attention(q2, keys2, vals2)?;
        let y = tape.matmul(att, vars.w_o)?;
        Ok((y, weights))
    }

    /// Off-tape forward for a frozen interface and knowledge base.
    pub fn forward(&self, kb: &KnowledgeBase, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.watch(&mut tape, IfaceMode::Frozen);
        let kb_vars = kb.watch(&mut tape, false);
        let xv = tape.constant(x);
        let y = self.forward_on(&mut tape, &vars, &kb_vars, xv)?;
        Ok(tape.to_tensor(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::KbConfig;
    use crate::models::SignatureLevel;

    fn sig(level: SignatureLevel, d_in: usize, d_out: usize) -> ModelSignature {
        ModelSignature::new("test", level, d_in, d_out).unwrap()
    }

    fn small_kb(seed: u64) -> KnowledgeBase {
        let cfg = KbConfig::new(2, 3, 2, 4).unwrap();
        KnowledgeBase::init(cfg, &mut SeededRng::new(seed))
    }

    #[test]
    fn binding_checks_signature_level() {
        let mut rng = SeededRng::new(1);
        let g = sig(SignatureLevel::Global, 4, 4);
        let l = sig(SignatureLevel::Local, 4, 4);
        assert!(bind_global_interface(&g, 4, &mut rng).is_ok());
        assert!(bind_global_interface(&l, 4, &mut rng).is_err());
        assert!(bind_local_interface(&l, 4, &mut rng).is_ok());
        assert!(bind_local_interface(&g, 4, &mut rng).is_err());
    }

    #[test]
    fn binding_is_seed_deterministic() {
        let s = sig(SignatureLevel::Global, 3, 5);
        let a = bind_global_interface(&s, 4, &mut SeededRng::new(7)).unwrap();
        let b = bind_global_interface(&s, 4, &mut SeededRng::new(7)).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(a.w_o.shape(), &[4, 5]);
    }

    #[test]
    fn output_shape_is_t_by_d_out() {
        let mut rng = SeededRng::new(2);
        let s = sig(SignatureLevel::Global, 3, 5);
        let iface = bind_global_interface(&s, 4, &mut rng).unwrap();
        let kb = small_kb(3);
        let x = Tensor::matrix(6, 3, rng.uniform_vec(18, 1.0)).unwrap();
        let y = iface.forward(&kb, &x).unwrap();
        assert_eq!(y.shape(), &[6, 5]);
        assert!(y.all_finite());
    }

    #[test]
    fn zero_input_matches_uniform_attention_closed_form() {
        // x = 0 makes every query zero, so stage-2 weights are uniform over
        // H's rows and y = rowmean(H W_v2) W_o, identical across rows.
        let mut rng = SeededRng::new(4);
        let s = sig(SignatureLevel::Global, 3, 2);
        let iface = bind_global_interface(&s, 4, &mut rng).unwrap();
        let kb = small_kb(5);
        let t = 3;
        let x = Tensor::matrix(t, 3, vec![0.0; 9]).unwrap();
        let y = iface.forward(&kb, &x).unwrap();

        // Closed form. With x = 0: M~l = M~h = 0, q1 = 0 so each h_k is the
        // uniform average of [M_low_k ; 0] W_v1 rows; then H as specified.
        let d_m = 4;
        let mm = |a: &[f32], ar: usize, ac: usize, b: &[f32], bc: usize| -> Vec<f64> {
            let mut out = vec![0.0f64; ar * bc];
            for i in 0..ar {
                for j in 0..bc {
                    let mut acc = 0.0;
                    for k in 0..ac {
                        acc += a[i * ac + k] as f64 * b[k * bc + j] as f64;
                    }
                    out[i * bc + j] = acc;
                }
            }
            out
        };
        let mut h_rows: Vec<Vec<f64>> = Vec::new();
        for r in 0..2 {
            h_rows.push(kb.high.data()[r * d_m..(r + 1) * d_m].iter().map(|&v| v as f64).collect());
        }
        for low in &kb.low {
            // aug = [low ; zeros(t, d_m_in... actually x W_l = 0 rows]
            let mut aug: Vec<f32> = low.data().to_vec();
            aug.extend(vec![0.0f32; t * d_m]);
            let rows = 3 + t;
            let vals = mm(&aug, rows, d_m, iface.w_v1.data(), d_m);
            // uniform average over rows
            let mut avg = vec![0.0f64; d_m];
            for r in 0..rows {
                for c in 0..d_m {
                    avg[c] += vals[r * d_m + c] / rows as f64;
                }
            }
            for _ in 0..t {
                h_rows.push(avg.clone());
            }
        }
        for _ in 0..t {
            h_rows.push(vec![0.0; d_m]);
        }
        // y_row = mean over H rows of (H W_v2) W_o
        let n_rows = h_rows.len();
        let mut flat: Vec<f32> = Vec::with_capacity(n_rows * d_m);
        for r in &h_rows {
            flat.extend(r.iter().map(|&v| v as f32));
        }
        let hv = mm(&flat, n_rows, d_m, iface.w_v2.data(), d_m);
        let mut mean = vec![0.0f64; d_m];
        for r in 0..n_rows {
            for c in 0..d_m {
                mean[c] += hv[r * d_m + c] / n_rows as f64;
            }
        }
        let mean_f: Vec<f32> = mean.iter().map(|&v| v as f32).collect();
        let expect = mm(&mean_f, 1, d_m, iface.w_o.data(), 2);
        for row in 0..t {
            for c in 0..2 {
                assert!(
                    (y.data()[row * 2 + c] as f64 - expect[c]).abs() < 1e-5,
                    "row {row} col {c}: {} vs {}",
                    y.data()[row * 2 + c],
                    expect[c]
                );
            }
        }
    }

    #[test]
    fn stage2_weight_rows_sum_to_one() {
        let mut rng = SeededRng::new(6);
        let s = sig(SignatureLevel::Global, 3, 2);
        let iface = bind_global_interface(&s, 4, &mut rng).unwrap();
        let kb = small_kb(7);
        let x = Tensor::matrix(2, 3, rng.uniform_vec(6, 1.0)).unwrap();
        let mut tape = Tape::new();
        let vars = iface.watch(&mut tape, IfaceMode::Frozen);
        let kb_vars = kb.watch(&mut tape, false);
        let xv = tape.constant(&x);
        let (_, weights) = iface.forward_debug_on(&mut tape, &vars, &kb_vars, xv).unwrap();
        let shape = tape.shape_of(weights).to_vec();
        // H rows = r_h + (K + 1) * T = 2 + 3*2 = 8.
        assert_eq!(shape, vec![2, 8]);
        for r in 0..shape[0] {
            let s: f64 = tape.value(weights)[r * shape[1]..(r + 1) * shape[1]]
                .iter()
                .map(|&v| v as f64)
                .sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zeroed_generated_rows_still_finite() {
        let mut rng = SeededRng::new(8);
        let s = sig(SignatureLevel::Global, 3, 2);
        let mut iface = bind_global_interface(&s, 4, &mut rng).unwrap();
        iface.w_l.data_mut().fill(0.0);
        iface.w_h.data_mut().fill(0.0);
        let kb = small_kb(9);
        let x = Tensor::matrix(2, 3, rng.uniform_vec(6, 1.0)).unwrap();
        let y = iface.forward(&kb, &x).unwrap();
        assert!(y.all_finite());
    }

    #[test]
    fn shared_kb_mutation_changes_both_interfaces() {
        let mut rng = SeededRng::new(10);
        let s1 = sig(SignatureLevel::Global, 3, 2);
        let s2 = sig(SignatureLevel::Global, 5, 4);
        let i1 = bind_global_interface(&s1, 4, &mut rng).unwrap();
        let i2 = bind_global_interface(&s2, 4, &mut rng).unwrap();
        let handle = crate::kb::kb_handle(small_kb(11));
        let x1 = Tensor::matrix(1, 3, rng.uniform_vec(3, 1.0)).unwrap();
        let x2 = Tensor::matrix(1, 5, rng.uniform_vec(5, 1.0)).unwrap();
        let y1_before = i1.forward(&handle.read().unwrap(), &x1).unwrap();
        let y2_before = i2.forward(&handle.read().unwrap(), &x2).unwrap();
        handle.write().unwrap().high.data_mut()[0] += 2.0;
        let y1_after = i1.forward(&handle.read().unwrap(), &x1).unwrap();
        let y2_after = i2.forward(&handle.read().unwrap(), &x2).unwrap();
        assert_ne!(y1_before.data(), y1_after.data());
        assert_ne!(y2_before.data(), y2_after.data());
    }

    #[test]
    fn width_mismatch_is_a_shape_error() {
        let mut rng = SeededRng::new(12);
        let s = sig(SignatureLevel::Global, 3, 2);
        let iface = bind_global_interface(&s, 4, &mut rng).unwrap();
        let kb = small_kb(13);
        let x = Tensor::matrix(2, 4, vec![0.1; 8]).unwrap();
        assert!(iface.forward(&kb, &x).is_err());
    }
}
