//! Single Transformer encoder layer over learned token (and optional
//! positional) embeddings, mean-pooled into a linear head.
//!
//! Post-norm residual layout: h = LN1(x + SelfAttn(x)), out = LN2(h + FFN(h)),
//! with a gelu intermediate.

use crate::error::{CkbError, Result};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::{ClassifierHead, ModelSignature, SignatureLevel};

#[derive(Debug, Clone)]
pub struct EncoderClassifier {
    pub embedding: Tensor,
    pub positional: Tensor,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub head: ClassifierHead,
    pub d_h: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub use_positional: bool,
}

pub struct EncoderVars {
    pub embedding: Var,
    pub positional: Var,
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub w_ff1: Var,
    pub b_ff1: Var,
    pub w_ff2: Var,
    pub b_ff2: Var,
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub head: Var,
}

impl EncoderClassifier {
    pub fn new(
        vocab: usize,
        d_h: usize,
        d_ff: usize,
        classes: usize,
        max_len: usize,
        use_positional: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if max_len == 0 {
            return Err(CkbError::Config("encoder max_len must be positive".into()));
        }
        let s_h = 1.0 / (d_h as f32).sqrt();
        let s_ff = 1.0 / (d_ff as f32).sqrt();
        Ok(EncoderClassifier {
            embedding: Tensor::uniform_init(vec![vocab, d_h], s_h, rng),
            positional: Tensor::uniform_init(vec![max_len, d_h], s_h, rng),
            w_q: Tensor::uniform_init(vec![d_h, d_h], s_h, rng),
            b_q: Tensor::zeros_param(vec![d_h]),
            w_k: Tensor::uniform_init(vec![d_h, d_h], s_h, rng),
            b_k: Tensor::zeros_param(vec![d_h]),
            w_v: Tensor::uniform_init(vec![d_h, d_h], s_h, rng),
            b_v: Tensor::zeros_param(vec![d_h]),
            w_o: Tensor::uniform_init(vec![d_h, d_h], s_h, rng),
            b_o: Tensor::zeros_param(vec![d_h]),
            w_ff1: Tensor::uniform_init(vec![d_h, d_ff], s_h, rng),
            b_ff1: Tensor::zeros_param(vec![d_ff]),
            w_ff2: Tensor::uniform_init(vec![d_ff, d_h], s_ff, rng),
            b_ff2: Tensor::zeros_param(vec![d_h]),
            ln1_g: {
                let mut t = Tensor::zeros_param(vec![d_h]);
                t.data_mut().fill(1.0);
                t
            },
            ln1_b: Tensor::zeros_param(vec![d_h]),
            ln2_g: {
                let mut t = Tensor::zeros_param(vec![d_h]);
                t.data_mut().fill(1.0);
                t
            },
            ln2_b: Tensor::zeros_param(vec![d_h]),
            head: ClassifierHead::new(d_h, classes, rng),
            d_h,
            d_ff,
            max_len,
            use_positional,
        })
    }

    /// Global interface: the embedded sequence maps to the hidden-state
    /// sequence H.
    pub fn signature(&self) -> ModelSignature {
        ModelSignature::new("encoder", SignatureLevel::Global, self.d_h, self.d_h)
            .expect("positive dims by construction")
    }

    pub fn watch(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        let mut put = |t: &Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        EncoderVars {
            embedding: put(&self.embedding),
            positional: put(&self.positional),
            w_q: put(&self.w_q),
            b_q: put(&self.b_q),
            w_k: put(&self.w_k),
            b_k: put(&self.b_k),
            w_v: put(&self.w_v),
            b_v: put(&self.b_v),
            w_o: put(&self.w_o),
            b_o: put(&self.b_o),
            w_ff1: put(&self.w_ff1),
            b_ff1: put(&self.b_ff1),
            w_ff2: put(&self.w_ff2),
            b_ff2: put(&self.b_ff2),
            ln1_g: put(&self.ln1_g),
            ln1_b: put(&self.ln1_b),
            ln2_g: put(&self.ln2_g),
            ln2_b: put(&self.ln2_b),
            head: put(&self.head.w),
        }
    }

    /// Embedded input rows (token + positional), the interface's input view.
    pub fn embed_input_on(&self, tape: &mut Tape, vars: &EncoderVars, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(CkbError::Input("empty token sequence".into()));
        }
        if tokens.len() > self.max_len {
            return Err(CkbError::Input(format!(
                "sequence of length {} exceeds max length {}",
                tokens.len(),
                self.max_len
            )));
        }
        let emb = tape.embed(vars.embedding, tokens)?;
        if self.use_positional {
            let pos = tape.slice_rows(vars.positional, 0, tokens.len())?;
            tape.add(emb, pos)
        } else {
            Ok(emb)
        }
    }

    /// Encoder layer over an embedded sequence (T x d_h) -> H (T x d_h).
    pub fn layer_on(&self, tape: &mut Tape, vars: &EncoderVars, x: Var) -> Result<Var> {
        let q0 = tape.matmul(x, vars.w_q)?;
        let q = tape.add_row(q0, vars.b_q)?;
        let k0 = tape.matmul(x, vars.w_k)?;
        let k = tape.add_row(k0, vars.b_k)?;
        let v0 = tape.matmul(x, vars.w_v)?;
        let v = tape.add_row(v0, vars.b_v)?;
        let (att, _) = tape.attention(q, k, v)?;
        let proj0 = tape.matmul(att, vars.w_o)?;
        let proj = tape.add_row(proj0, vars.b_o)?;
        let res1 = tape.add(x, proj)?;
        let h1 = tape.layer_norm_rows(res1, vars.ln1_g, vars.ln1_b)?;
        let ff0 = tape.matmul(h1, vars.w_ff1)?;
        let ffb = tape.add_row(ff0, vars.b_ff1)?;
        let act = tape.gelu(ffb)?;
        let ff1 = tape.matmul(act, vars.w_ff2)?;
        let ffo = tape.add_row(ff1, vars.b_ff2)?;
        let res2 = tape.add(h1, ffo)?;
        tape.layer_norm_rows(res2, vars.ln2_g, vars.ln2_b)
    }

    /// Hidden-state sequence H for a token sequence.
    pub fn hidden_states_on(&self, tape: &mut Tape, vars: &EncoderVars, tokens: &[usize]) -> Result<Var> {
        let x = self.embed_input_on(tape, vars, tokens)?;
        self.layer_on(tape, vars, x)
    }

    /// The (H, logits) pair, off-tape.
    pub fn forward(&self, tokens: &[usize]) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let vars = self.watch(&mut tape, false);
        let h = self.hidden_states_on(&mut tape, &vars, tokens)?;
        let pooled = tape.mean_rows(h)?;
        let logits = tape.matmul(pooled, vars.head)?;
        Ok((tape.to_tensor(h), tape.to_tensor(logits)))
    }

    /// Frozen-model pair for import: embedded input rows and H targets.
    pub fn trajectory(&self, tokens: &[usize]) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let vars = self.watch(&mut tape, false);
        let x = self.embed_input_on(&mut tape, &vars, tokens)?;
        let h = self.layer_on(&mut tape, &vars, x)?;
        Ok((tape.to_tensor(x), tape.to_tensor(h)))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.embedding,
            &self.positional,
            &self.w_q,
            &self.b_q,
            &self.w_k,
            &self.b_k,
            &self.w_v,
            &self.b_v,
            &self.w_o,
            &self.b_o,
            &self.w_ff1,
            &self.b_ff1,
            &self.w_ff2,
            &self.b_ff2,
            &self.ln1_g,
            &self.ln1_b,
            &self.ln2_g,
            &self.ln2_b,
            &self.head.w,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.embedding,
            &mut self.positional,
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.w_ff1,
            &mut self.b_ff1,
            &mut self.w_ff2,
            &mut self.b_ff2,
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.head.w,
        ]
    }

    pub fn param_names(&self) -> Vec<String> {
        [
            "embedding", "positional", "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o",
            "w_ff1", "b_ff1", "w_ff2", "b_ff2", "ln1_g", "ln1_b", "ln2_g", "ln2_b", "head",
        ]
        .iter()
        .map(|n| format!("encoder/{n}"))
        .collect()
    }

    /// Excludes the embedding tables and the head, per the usual accounting.
    pub fn count_params(&self) -> usize {
        self.params()
            .iter()
            .map(|t| t.numel())
            .sum::<usize>()
            - self.embedding.numel()
            - self.positional.numel()
            - self.head.w.numel()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(positional: bool) -> EncoderClassifier {
        let mut rng = SeededRng::new(11);
        EncoderClassifier::new(10, 6, 12, 2, 16, positional, &mut rng).unwrap()
    }

    #[test]
    fn single_token_is_finite_and_shaped() {
        let model = tiny(true);
        let (h, logits) = model.forward(&[3]).unwrap();
        assert_eq!(h.shape(), &[1, 6]);
        assert_eq!(logits.shape(), &[1, 2]);
        assert!(h.all_finite() && logits.all_finite());
    }

    #[test]
    fn hidden_states_have_sequence_shape() {
        let model = tiny(true);
        let (h, _) = model.forward(&[1, 2, 3, 4]).unwrap();
        assert_eq!(h.shape(), &[4, 6]);
    }

    #[test]
    fn layer_norm_rows_are_standardized_pre_affine() {
        let model = tiny(true);
        let (h, _) = model.forward(&[1, 2, 3, 4, 5]).unwrap();
        // Recover pre-affine rows from the final layer norm.
        let g = model.ln2_g.data();
        let b = model.ln2_b.data();
        let cols = h.shape()[1];
        for r in 0..h.shape()[0] {
            let xhat: Vec<f64> = (0..cols)
                .map(|c| ((h.data()[r * cols + c] - b[c]) / g[c]) as f64)
                .collect();
            let mean = xhat.iter().sum::<f64>() / cols as f64;
            let var = xhat.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            assert!(mean.abs() < 1e-4, "row {r} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "row {r} var {var}");
        }
    }

    #[test]
    fn equal_embeddings_without_positions_give_identical_rows() {
        let model = tiny(false);
        // Same token everywhere: without positional encodings the layer is
        // permutation symmetric, so all H rows coincide.
        let (h, _) = model.forward(&[7, 7, 7, 7]).unwrap();
        let cols = h.shape()[1];
        for r in 1..h.shape()[0] {
            for c in 0..cols {
                assert!(
                    (h.data()[r * cols + c] - h.data()[c]).abs() < 1e-5,
                    "row {r} col {c}"
                );
            }
        }
        let with_pos = tiny(true);
        let (hp, _) = with_pos.forward(&[7, 7, 7, 7]).unwrap();
        let diff: f32 = (0..cols)
            .map(|c| (hp.data()[cols + c] - hp.data()[c]).abs())
            .sum();
        assert!(diff > 1e-6, "positional encodings should break symmetry");
    }

    #[test]
    fn too_long_sequence_is_an_input_error() {
        let model = tiny(true);
        let tokens = vec![1usize; 17];
        assert!(model.forward(&tokens).is_err());
    }

    #[test]
    fn count_excludes_tables_and_head() {
        let model = tiny(true);
        let expected = 4 * (6 * 6 + 6) + (6 * 12 + 12) + (12 * 6 + 6) + 2 * (6 + 6);
        assert_eq!(model.count_params(), expected);
    }
}
