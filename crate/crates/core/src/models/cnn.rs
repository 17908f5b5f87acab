//! Text CNN: per-window convolution banks (widths 3, 4, 5), relu, max-pool
//! over time, concatenation, linear head.
//!
//! A convolution at position t is a linear map of the flattened window of
//! w consecutive embeddings, plus a per-feature-map bias. The local
//! interface function is the step at the widest window: it consumes the
//! flattened 5-token window and emits the three banks' features at that
//! position, concatenated.

use crate::error::{CkbError, Result};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::{ClassifierHead, ModelSignature, SignatureLevel, CNN_WINDOWS};

#[derive(Debug, Clone)]
pub struct ConvBank {
    pub width: usize,
    pub w: Tensor,
    pub b: Tensor,
}

impl ConvBank {
    fn new(width: usize, d_e: usize, f_maps: usize, rng: &mut SeededRng) -> ConvBank {
        let fan_in = width * d_e;
        ConvBank {
            width,
            w: Tensor::uniform_init(vec![fan_in, f_maps], 1.0 / (fan_in as f32).sqrt(), rng),
            b: Tensor::zeros_param(vec![f_maps]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TextCnn {
    pub embedding: Tensor,
    pub banks: Vec<ConvBank>,
    pub head: ClassifierHead,
    pub d_e: usize,
    pub f_maps: usize,
}

pub struct CnnVars {
    pub embedding: Var,
    pub banks: Vec<(Var, Var)>,
    pub head: Var,
}

impl TextCnn {
    pub fn new(vocab: usize, d_e: usize, f_maps: usize, classes: usize, rng: &mut SeededRng) -> Self {
        let banks = CNN_WINDOWS
            .iter()
            .map(|&w| ConvBank::new(w, d_e, f_maps, rng))
            .collect();
        TextCnn {
            embedding: Tensor::uniform_init(vec![vocab, d_e], 1.0 / (d_e as f32).sqrt(), rng),
            banks,
            head: ClassifierHead::new(CNN_WINDOWS.len() * f_maps, classes, rng),
            d_e,
            f_maps,
        }
    }

    pub fn max_window(&self) -> usize {
        self.banks.iter().map(|b| b.width).max().unwrap_or(0)
    }

    pub fn pooled_dim(&self) -> usize {
        self.banks.len() * self.f_maps
    }

    /// Local interface at the widest window: the flattened window maps to
    /// the concatenated per-bank features at that position.
    pub fn signature(&self) -> ModelSignature {
        ModelSignature::new(
            "cnn",
            SignatureLevel::Local,
            self.max_window() * self.d_e,
            self.pooled_dim(),
        )
        .expect("positive dims by construction")
    }

    pub fn watch(&self, tape: &mut Tape, trainable: bool) -> CnnVars {
        let mut put = |t: &Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        CnnVars {
            embedding: put(&self.embedding),
            banks: self.banks.iter().map(|b| (put(&b.w), put(&b.b))).collect(),
            head: put(&self.head.w),
        }
    }

    fn check_length(&self, t: usize) -> Result<()> {
        if t == 0 {
            return Err(CkbError::Input("empty token sequence".into()));
        }
        if t < self.max_window() {
            return Err(CkbError::Input(format!(
                "sequence of length {t} shorter than widest window {}",
                self.max_window()
            )));
        }
        Ok(())
    }

    /// Pooled feature vector (1 x 3F) for a token sequence.
    pub fn encode_on(&self, tape: &mut Tape, vars: &CnnVars, tokens: &[usize]) -> Result<Var> {
        self.check_length(tokens.len())?;
        let emb = tape.embed(vars.embedding, tokens)?;
        let mut pooled = Vec::with_capacity(self.banks.len());
        for (bank, &(wv, bv)) in self.banks.iter().zip(&vars.banks) {
            let windows = tape.unfold_windows(emb, bank.width)?;
            let conv = tape.matmul(windows, wv)?;
            let biased = tape.add_row(conv, bv)?;
            let act = tape.relu(biased)?;
            pooled.push(tape.max_rows(act)?);
        }
        tape.concat_cols(&pooled)
    }

    /// Per-position features of the widest-window local function over a
    /// sequence: row t holds [bank3(t) ; bank4(t) ; bank5(t)] for the
    /// window starting at t. (T - w_max + 1) rows.
    pub fn step_features_on(&self, tape: &mut Tape, vars: &CnnVars, tokens: &[usize]) -> Result<Var> {
        self.check_length(tokens.len())?;
        let emb = tape.embed(vars.embedding, tokens)?;
        let w_max = self.max_window();
        let positions = tokens.len() - w_max + 1;
        let mut blocks = Vec::with_capacity(self.banks.len());
        for (bank, &(wv, bv)) in self.banks.iter().zip(&vars.banks) {
            let windows = tape.unfold_windows(emb, bank.width)?;
            // Left-align narrower banks inside the widest window.
            let aligned = tape.slice_rows(windows, 0, positions)?;
            let conv = tape.matmul(aligned, wv)?;
            let biased = tape.add_row(conv, bv)?;
            blocks.push(tape.relu(biased)?);
        }
        tape.concat_cols(&blocks)
    }

    /// Frozen-model step pairs for a sequence: flattened widest windows as
    /// inputs, per-position concatenated features as targets.
    pub fn trajectory(&self, tokens: &[usize]) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let vars = self.watch(&mut tape, false);
        let emb = tape.embed(vars.embedding, tokens)?;
        let inputs = tape.unfold_windows(emb, self.max_window())?;
        let targets = self.step_features_on(&mut tape, &vars, tokens)?;
        Ok((tape.to_tensor(inputs), tape.to_tensor(targets)))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut ps = vec![&self.embedding];
        for b in &self.banks {
            ps.push(&b.w);
            ps.push(&b.b);
        }
        ps.push(&self.head.w);
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut ps = vec![&mut self.embedding];
        for b in &mut self.banks {
            ps.push(&mut b.w);
            ps.push(&mut b.b);
        }
        ps.push(&mut self.head.w);
        ps
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["cnn/embedding".to_string()];
        for b in &self.banks {
            names.push(format!("cnn/w{}/w", b.width));
            names.push(format!("cnn/w{}/b", b.width));
        }
        names.push("cnn/head".into());
        names
    }

    pub fn count_params(&self) -> usize {
        self.banks
            .iter()
            .map(|b| b.w.numel() + b.b.numel())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_pools_any_position() {
        let mut rng = SeededRng::new(3);
        let model = TextCnn::new(10, 4, 2, 2, &mut rng);
        // All tokens identical: every window is identical so pooled equals
        // the feature at position 0.
        let tokens = [5usize; 8];
        let mut tape = Tape::new();
        let vars = model.watch(&mut tape, false);
        let pooled = model.encode_on(&mut tape, &vars, &tokens).unwrap();
        let feats = model.step_features_on(&mut tape, &vars, &tokens).unwrap();
        let cols = tape.shape_of(feats)[1];
        let first_row = tape.value(feats)[..cols].to_vec();
        assert_eq!(tape.value(pooled), &first_row[..]);
    }

    #[test]
    fn single_filter_matches_hand_computation() {
        let mut rng = SeededRng::new(4);
        let mut model = TextCnn::new(4, 2, 1, 2, &mut rng);
        // Keep only the width-3 bank relevant: embedding rows are simple.
        model.embedding = Tensor::matrix(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.5, -0.5]).unwrap();
        model.banks[0].w = Tensor::matrix(6, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        model.banks[0].b = Tensor::vector(vec![0.25]);
        let tokens = [0usize, 1, 2, 3, 0];
        // Window at t=0: e0,e1,e2 flattened = [1,0,0,1,1,1].
        let w0 = 1.0 * 1.0 + 0.0 * 2.0 + 0.0 * 3.0 + 1.0 * 4.0 + 1.0 * 5.0 + 1.0 * 6.0 + 0.25;
        let mut tape = Tape::new();
        let vars = model.watch(&mut tape, false);
        let emb = tape.embed(vars.embedding, &tokens).unwrap();
        let windows = tape.unfold_windows(emb, 3).unwrap();
        let conv = tape.matmul(windows, vars.banks[0].0).unwrap();
        let biased = tape.add_row(conv, vars.banks[0].1).unwrap();
        let got = tape.value(biased)[0];
        assert!((got - w0 as f32).abs() < 1e-6, "{got} vs {w0}");
    }

    #[test]
    fn pooled_width_is_three_f() {
        let mut rng = SeededRng::new(5);
        let model = TextCnn::new(12, 3, 4, 2, &mut rng);
        let tokens = [1usize, 2, 3, 4, 5, 6];
        let mut tape = Tape::new();
        let vars = model.watch(&mut tape, false);
        let pooled = model.encode_on(&mut tape, &vars, &tokens).unwrap();
        assert_eq!(tape.shape_of(pooled), &[1, 12]);
    }

    #[test]
    fn short_sequence_is_an_input_error() {
        let mut rng = SeededRng::new(5);
        let model = TextCnn::new(12, 3, 4, 2, &mut rng);
        let mut tape = Tape::new();
        let vars = model.watch(&mut tape, false);
        assert!(model.encode_on(&mut tape, &vars, &[1, 2, 3]).is_err());
        assert!(model.encode_on(&mut tape, &vars, &[]).is_err());
    }

    #[test]
    fn table_one_arithmetic_for_paper_dims() {
        let mut rng = SeededRng::new(5);
        let model = TextCnn::new(100, 256, 80, 2, &mut rng);
        // Sum over windows {3,4,5} of (w * 256 * 80 + 80).
        let expected: usize = CNN_WINDOWS.iter().map(|w| w * 256 * 80 + 80).sum();
        assert_eq!(expected, 246_000);
        assert_eq!(model.count_params(), expected);
    }
}
