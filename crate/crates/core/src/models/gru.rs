//! GRU text classifier: embedding, one gated recurrent unit, linear head
//! over the final hidden state.
//!
//! Gate convention, fixed here and encoded by the tests:
//!   z_t = sigmoid(x W_zx + h_prev W_zh + b_z)        update gate
//!   r_t = sigmoid(x W_rx + h_prev W_rh + b_r)        reset gate
//!   c_t = tanh(x W_cx + (r_t * h_prev) W_ch + b_c)   candidate
//!   h_t = (1 - z_t) * h_prev + z_t * c_t

use crate::error::{CkbError, Result};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::{ClassifierHead, ModelSignature, SignatureLevel};

#[derive(Debug, Clone)]
pub struct GruCell {
    pub w_zx: Tensor,
    pub w_zh: Tensor,
    pub b_z: Tensor,
    pub w_rx: Tensor,
    pub w_rh: Tensor,
    pub b_r: Tensor,
    pub w_cx: Tensor,
    pub w_ch: Tensor,
    pub b_c: Tensor,
    pub d_e: usize,
    pub d_h: usize,
}

pub struct GruCellVars {
    pub w_zx: Var,
    pub w_zh: Var,
    pub b_z: Var,
    pub w_rx: Var,
    pub w_rh: Var,
    pub b_r: Var,
    pub w_cx: Var,
    pub w_ch: Var,
    pub b_c: Var,
}

impl GruCell {
    pub fn new(d_e: usize, d_h: usize, rng: &mut SeededRng) -> GruCell {
        let sx = 1.0 / (d_e as f32).sqrt();
        let sh = 1.0 / (d_h as f32).sqrt();
        let w = |fan: f32, shape: Vec<usize>, rng: &mut SeededRng| Tensor::uniform_init(shape, fan, rng);
        GruCell {
            w_zx: w(sx, vec![d_e, d_h], rng),
            w_zh: w(sh, vec![d_h, d_h], rng),
            b_z: Tensor::zeros_param(vec![d_h]),
            w_rx: w(sx, vec![d_e, d_h], rng),
            w_rh: w(sh, vec![d_h, d_h], rng),
            b_r: Tensor::zeros_param(vec![d_h]),
            w_cx: w(sx, vec![d_e, d_h], rng),
            w_ch: w(sh, vec![d_h, d_h], rng),
            b_c: Tensor::zeros_param(vec![d_h]),
            d_e,
            d_h,
        }
    }

    pub fn watch(&self, tape: &mut Tape, trainable: bool) -> GruCellVars {
        let mut put = |t: &Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        GruCellVars {
            w_zx: put(&self.w_zx),
            w_zh: put(&self.w_zh),
            b_z: put(&self.b_z),
            w_rx: put(&self.w_rx),
            w_rh: put(&self.w_rh),
            b_r: put(&self.b_r),
            w_cx: put(&self.w_cx),
            w_ch: put(&self.w_ch),
            b_c: put(&self.b_c),
        }
    }

    /// One gated step: x is 1 x d_e, h_prev is 1 x d_h.
    pub fn step_on(&self, tape: &mut Tape, vars: &GruCellVars, x: Var, h_prev: Var) -> Result<Var> {
        let gate = |tape: &mut Tape, wx: Var, wh: Var, b: Var| -> Result<Var> {
            let xi = tape.matmul(x, wx)?;
            let hi = tape.matmul(h_prev, wh)?;
            let s = tape.add(xi, hi)?;
            tape.add_row(s, b)
        };
        let z_pre = gate(tape, vars.w_zx, vars.w_zh, vars.b_z)?;
        let z = tape.sigmoid(z_pre)?;
        let r_pre = gate(tape, vars.w_rx, vars.w_rh, vars.b_r)?;
        let r = tape.sigmoid(r_pre)?;
        let rh = tape.mul(r, h_prev)?;
        let cx = tape.matmul(x, vars.w_cx)?;
        let ch = tape.matmul(rh, vars.w_ch)?;
        let c_sum = tape.add(cx, ch)?;
        let c_pre = tape.add_row(c_sum, vars.b_c)?;
        let c = tape.tanh(c_pre)?;
        let ones = tape.constant_matrix(1, self.d_h, vec![1.0; self.d_h])?;
        let one_minus_z = tape.sub(ones, z)?;
        let keep = tape.mul(one_minus_z, h_prev)?;
        let write = tape.mul(z, c)?;
        tape.add(keep, write)
    }

    /// Off-tape single step.
    pub fn step(&self, x: &Tensor, h_prev: &Tensor) -> Result<Tensor> {
        if x.numel() != self.d_e {
            return Err(CkbError::shape(
                "gru_step",
                format!("input width {}", self.d_e),
                format!("{}", x.numel()),
            ));
        }
        if h_prev.numel() != self.d_h {
            return Err(CkbError::shape(
                "gru_step",
                format!("hidden width {}", self.d_h),
                format!("{}", h_prev.numel()),
            ));
        }
        let mut tape = Tape::new();
        let vars = self.watch(&mut tape, false);
        let xv = tape.constant_matrix(1, self.d_e, x.data().to_vec())?;
        let hv = tape.constant_matrix(1, self.d_h, h_prev.data().to_vec())?;
        let h = self.step_on(&mut tape, &vars, xv, hv)?;
        Ok(tape.to_tensor(h))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.w_zx, &self.w_zh, &self.b_z, &self.w_rx, &self.w_rh, &self.b_r, &self.w_cx,
            &self.w_ch, &self.b_c,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_zx,
            &mut self.w_zh,
            &mut self.b_z,
            &mut self.w_rx,
            &mut self.w_rh,
            &mut self.b_r,
            &mut self.w_cx,
            &mut self.w_ch,
            &mut self.b_c,
        ]
    }

    pub fn count_params(&self) -> usize {
        3 * (self.d_e * self.d_h + self.d_h * self.d_h + self.d_h)
    }
}

#[derive(Debug, Clone)]
pub struct GruClassifier {
    pub embedding: Tensor,
    pub cell: GruCell,
    pub head: ClassifierHead,
    pub d_e: usize,
    pub d_h: usize,
}

pub struct GruVars {
    pub embedding: Var,
    pub cell: GruCellVars,
    pub head: Var,
}

impl GruClassifier {
    pub fn new(vocab: usize, d_e: usize, d_h: usize, classes: usize, rng: &mut SeededRng) -> Self {
        GruClassifier {
            embedding: Tensor::uniform_init(vec![vocab, d_e], 1.0 / (d_e as f32).sqrt(), rng),
            cell: GruCell::new(d_e, d_h, rng),
            head: ClassifierHead::new(d_h, classes, rng),
            d_e,
            d_h,
        }
    }

    /// Local interface: one step maps [x_t ; h_prev] to h_t.
    pub fn signature(&self) -> ModelSignature {
        ModelSignature::new("gru", SignatureLevel::Local, self.d_e + self.d_h, self.d_h)
            .expect("positive dims by construction")
    }

    pub fn watch(&self, tape: &mut Tape, trainable: bool) -> GruVars {
        GruVars {
            embedding: if trainable {
                tape.param(&self.embedding)
            } else {
                tape.constant(&self.embedding)
            },
            cell: self.cell.watch(tape, trainable),
            head: if trainable {
                tape.param(&self.head.w)
            } else {
                tape.constant(&self.head.w)
            },
        }
    }

    /// Unroll from h_0 = 0; returns the final hidden state (1 x d_h).
    pub fn encode_on(&self, tape: &mut Tape, vars: &GruVars, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(CkbError::Input("empty token sequence".into()));
        }
        let emb = tape.embed(vars.embedding, tokens)?;
        let mut h = tape.constant_matrix(1, self.d_h, vec![0.0; self.d_h])?;
        for t in 0..tokens.len() {
            let x_t = tape.slice_rows(emb, t, t + 1)?;
            h = self.cell.step_on(tape, &vars.cell, x_t, h)?;
        }
        Ok(h)
    }

    /// Frozen-model step trajectory on a token sequence: for each t, the
    /// concatenated interface input [x_t ; h_{t-1}] and the target h_t.
    pub fn trajectory(&self, tokens: &[usize]) -> Result<(Tensor, Tensor)> {
        if tokens.is_empty() {
            return Err(CkbError::Input("empty token sequence".into()));
        }
        let mut tape = Tape::new();
        let vars = self.watch(&mut tape, false);
        let emb = tape.embed(vars.embedding, tokens)?;
        let mut h = tape.constant_matrix(1, self.d_h, vec![0.0; self.d_h])?;
        let mut inputs = Vec::with_capacity(tokens.len() * (self.d_e + self.d_h));
        let mut targets = Vec::with_capacity(tokens.len() * self.d_h);
        for t in 0..tokens.len() {
            let x_t = tape.slice_rows(emb, t, t + 1)?;
            inputs.extend_from_slice(tape.value(x_t));
            inputs.extend_from_slice(tape.value(h));
            h = self.cell.step_on(&mut tape, &vars.cell, x_t, h)?;
            targets.extend_from_slice(tape.value(h));
        }
        Ok((
            Tensor::matrix(tokens.len(), self.d_e + self.d_h, inputs)?,
            Tensor::matrix(tokens.len(), self.d_h, targets)?,
        ))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut ps = vec![&self.embedding];
        ps.extend(self.cell.params());
        ps.push(&self.head.w);
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut ps = vec![&mut self.embedding];
        ps.extend(self.cell.params_mut());
        ps.push(&mut self.head.w);
        ps
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["gru/embedding".to_string()];
        for n in ["w_zx", "w_zh", "b_z", "w_rx", "w_rh", "b_r", "w_cx", "w_ch", "b_c"] {
            names.push(format!("gru/{n}"));
        }
        names.push("gru/head".into());
        names
    }

    pub fn count_params(&self) -> usize {
        self.cell.count_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::argmax;

    fn zeroed_cell(d_e: usize, d_h: usize) -> GruCell {
        let mut rng = SeededRng::new(0);
        let mut cell = GruCell::new(d_e, d_h, &mut rng);
        for p in cell.params_mut() {
            p.data_mut().fill(0.0);
        }
        cell
    }

    #[test]
    fn zero_cell_zero_state_stays_zero() {
        let cell = zeroed_cell(3, 4);
        let h = cell
            .step(&Tensor::vector(vec![0.5, -0.5, 1.0]), &Tensor::vector(vec![0.0; 4]))
            .unwrap();
        assert_eq!(h.data(), &[0.0; 4]);
    }

    #[test]
    fn saturated_update_gate_keeps_previous_state() {
        let mut cell = zeroed_cell(2, 3);
        cell.b_z.data_mut().fill(-30.0); // z ~ 0 so h_t ~ h_prev
        let h_prev = Tensor::vector(vec![0.4, -0.2, 0.9]);
        let h = cell.step(&Tensor::vector(vec![1.0, -1.0]), &h_prev).unwrap();
        for (a, b) in h.data().iter().zip(h_prev.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn step_matches_equation_by_equation_oracle() {
        let mut rng = SeededRng::new(42);
        let cell = GruCell::new(2, 2, &mut rng);
        let x = [0.3f64, -0.7];
        let hp = [0.1f64, 0.6];
        let get = |t: &Tensor, r: usize, c: usize| t.data()[r * t.shape()[1] + c] as f64;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut z = [0.0f64; 2];
        let mut r = [0.0f64; 2];
        let mut c = [0.0f64; 2];
        for j in 0..2 {
            let zx = x[0] * get(&cell.w_zx, 0, j) + x[1] * get(&cell.w_zx, 1, j);
            let zh = hp[0] * get(&cell.w_zh, 0, j) + hp[1] * get(&cell.w_zh, 1, j);
            z[j] = sig(zx + zh + cell.b_z.data()[j] as f64);
            let rx = x[0] * get(&cell.w_rx, 0, j) + x[1] * get(&cell.w_rx, 1, j);
            let rh = hp[0] * get(&cell.w_rh, 0, j) + hp[1] * get(&cell.w_rh, 1, j);
            r[j] = sig(rx + rh + cell.b_r.data()[j] as f64);
        }
        for j in 0..2 {
            let cx = x[0] * get(&cell.w_cx, 0, j) + x[1] * get(&cell.w_cx, 1, j);
            let ch = (r[0] * hp[0]) * get(&cell.w_ch, 0, j) + (r[1] * hp[1]) * get(&cell.w_ch, 1, j);
            c[j] = (cx + ch + cell.b_c.data()[j] as f64).tanh();
        }
        let expected: Vec<f64> = (0..2).map(|j| (1.0 - z[j]) * hp[j] + z[j] * c[j]).collect();
        let h = cell
            .step(
                &Tensor::vector(vec![x[0] as f32, x[1] as f32]),
                &Tensor::vector(vec![hp[0] as f32, hp[1] as f32]),
            )
            .unwrap();
        for j in 0..2 {
            assert!(
                (h.data()[j] as f64 - expected[j]).abs() < 1e-6,
                "component {j}: {} vs {}",
                h.data()[j],
                expected[j]
            );
        }
    }

    #[test]
    fn single_step_unroll_equals_step_of_embedding() {
        let mut rng = SeededRng::new(5);
        let model = GruClassifier::new(10, 4, 3, 2, &mut rng);
        let tokens = [7usize];
        let emb_row = Tensor::vector(model.embedding.data()[7 * 4..8 * 4].to_vec());
        let by_step = model.cell.step(&emb_row, &Tensor::vector(vec![0.0; 3])).unwrap();
        let enc = model.encode_tokens_helper(&tokens);
        assert_eq!(enc.data(), by_step.data());
    }

    #[test]
    fn unroll_equals_manual_fold() {
        let mut rng = SeededRng::new(6);
        let model = GruClassifier::new(12, 3, 4, 2, &mut rng);
        let tokens = [1usize, 5, 9, 2];
        let mut h = Tensor::vector(vec![0.0; 4]);
        for &t in &tokens {
            let x = Tensor::vector(model.embedding.data()[t * 3..(t + 1) * 3].to_vec());
            h = model.cell.step(&x, &h).unwrap();
        }
        let enc = model.encode_tokens_helper(&tokens);
        assert_eq!(enc.data(), h.data());
    }

    #[test]
    fn token_order_matters() {
        let mut rng = SeededRng::new(8);
        let model = GruClassifier::new(20, 4, 4, 2, &mut rng);
        let a = model.encode_tokens_helper(&[3, 9, 14, 2]);
        let b = model.encode_tokens_helper(&[2, 14, 9, 3]);
        let diff: f32 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn logits_width_is_class_count() {
        let mut rng = SeededRng::new(8);
        let model = crate::models::Model::Gru(GruClassifier::new(20, 4, 4, 2, &mut rng));
        let logits = model.logits(&[1, 2, 3]).unwrap();
        assert_eq!(logits.shape(), &[1, 2]);
        let _ = argmax(logits.data());
    }

    #[test]
    fn empty_sequence_is_an_input_error() {
        let mut rng = SeededRng::new(8);
        let model = crate::models::Model::Gru(GruClassifier::new(20, 4, 4, 2, &mut rng));
        assert!(model.logits(&[]).is_err());
    }

    #[test]
    fn out_of_vocab_id_is_a_vocab_error() {
        let mut rng = SeededRng::new(8);
        let model = crate::models::Model::Gru(GruClassifier::new(20, 4, 4, 2, &mut rng));
        match model.logits(&[25]) {
            Err(crate::error::CkbError::Vocab { id: 25, vocab_size: 20 }) => {}
            other => panic!("expected vocab error, got {other:?}"),
        }
    }

    impl GruClassifier {
        fn encode_tokens_helper(&self, tokens: &[usize]) -> Tensor {
            let mut tape = Tape::new();
            let vars = self.watch(&mut tape, false);
            let h = self.encode_on(&mut tape, &vars, tokens).unwrap();
            tape.to_tensor(h)
        }
    }
}
