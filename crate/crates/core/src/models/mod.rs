//! Reference text-classification networks and their interface signatures.
//!
//! Each model declares the parameterized function an interface must match:
//! the GRU and CNN at the local (step) level, the feed-forward net and the
//! attention encoder at the global level.

mod cnn;
mod encoder;
mod ffn;
mod gru;

pub use cnn::{CnnVars, ConvBank, TextCnn};
pub use encoder::{EncoderClassifier, EncoderVars};
pub use ffn::{FeedForwardNet, FfnVars};
pub use gru::{GruCell, GruCellVars, GruClassifier, GruVars};

use crate::error::{CkbError, Result};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignatureLevel {
    /// Maps the network's whole input to its whole output.
    Global,
    /// A step function the global function calls repeatedly.
    Local,
}

/// The function shape an interface must reproduce: one input row of width
/// `d_in` maps to one output row of width `d_out`. Global signatures accept
/// a whole sequence of rows; local signatures are invoked once per step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSignature {
    pub name: String,
    pub level: SignatureLevel,
    pub d_in: usize,
    pub d_out: usize,
}

impl ModelSignature {
    pub fn new(name: &str, level: SignatureLevel, d_in: usize, d_out: usize) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(CkbError::Config(format!(
                "signature {name}: dimensions must be positive, got {d_in}x{d_out}"
            )));
        }
        Ok(ModelSignature {
            name: name.to_string(),
            level,
            d_in,
            d_out,
        })
    }
}

/// Linear map from an encoder state to class log-odds.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub w: Tensor,
}

impl ClassifierHead {
    pub fn new(d: usize, classes: usize, rng: &mut SeededRng) -> ClassifierHead {
        let s = 1.0 / (d as f32).sqrt();
        ClassifierHead {
            w: Tensor::uniform_init(vec![d, classes], s, rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn logits_on(&self, tape: &mut Tape, w: Var, state: Var) -> Result<Var> {
        tape.matmul(state, w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Ffn,
    Gru,
    Cnn,
    Encoder,
}

impl Arch {
    pub fn parse(s: &str) -> Result<Arch> {
        match s {
            "ffn" => Ok(Arch::Ffn),
            "gru" => Ok(Arch::Gru),
            "cnn" => Ok(Arch::Cnn),
            "encoder" => Ok(Arch::Encoder),
            other => Err(CkbError::Config(format!("unknown model arch '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Arch::Ffn => "ffn",
            Arch::Gru => "gru",
            Arch::Cnn => "cnn",
            Arch::Encoder => "encoder",
        }
    }
}

/// Dimensions for constructing a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub vocab_size: usize,
    pub d_e: usize,
    pub d_h: usize,
    /// Feature maps per window width (CNN).
    pub f_maps: usize,
    /// Intermediate width of the encoder feed-forward block.
    pub d_ff: usize,
    pub classes: usize,
    pub max_len: usize,
    /// Learned positional embeddings for the encoder.
    pub positional: bool,
    /// Feed-forward net input/output widths.
    pub d_in: usize,
    pub d_out: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::Gru,
            vocab_size: 2000,
            d_e: 64,
            d_h: 64,
            f_maps: 16,
            d_ff: 256,
            classes: 2,
            max_len: 128,
            positional: true,
            d_in: 4,
            d_out: 4,
        }
    }
}

pub const CNN_WINDOWS: [usize; 3] = [3, 4, 5];

/// A concrete network. Immutable during evaluation; training takes `&mut`.
#[derive(Debug, Clone)]
pub enum Model {
    Ffn(FeedForwardNet),
    Gru(GruClassifier),
    Cnn(TextCnn),
    Encoder(EncoderClassifier),
}

impl Model {
    pub fn build(cfg: &ModelConfig, rng: &mut SeededRng) -> Result<Model> {
        Ok(match cfg.arch {
            Arch::Ffn => Model::Ffn(FeedForwardNet::new(cfg.d_in, cfg.d_h, cfg.d_out, rng)),
            Arch::Gru => Model::Gru(GruClassifier::new(
                cfg.vocab_size,
                cfg.d_e,
                cfg.d_h,
                cfg.classes,
                rng,
            )),
            Arch::Cnn => Model::Cnn(TextCnn::new(
                cfg.vocab_size,
                cfg.d_e,
                cfg.f_maps,
                cfg.classes,
                rng,
            )),
            Arch::Encoder => Model::Encoder(EncoderClassifier::new(
                cfg.vocab_size,
                cfg.d_h,
                cfg.d_ff,
                cfg.classes,
                cfg.max_len,
                cfg.positional,
                rng,
            )?),
        })
    }

    pub fn arch(&self) -> Arch {
        match self {
            Model::Ffn(_) => Arch::Ffn,
            Model::Gru(_) => Arch::Gru,
            Model::Cnn(_) => Arch::Cnn,
            Model::Encoder(_) => Arch::Encoder,
        }
    }

    /// The interface binding declared for this architecture.
    pub fn signature(&self) -> ModelSignature {
        match self {
            Model::Ffn(m) => m.signature(),
            Model::Gru(m) => m.signature(),
            Model::Cnn(m) => m.signature(),
            Model::Encoder(m) => m.signature(),
        }
    }

    /// Width of the pre-head encoder state.
    pub fn encoder_dim(&self) -> usize {
        match self {
            Model::Ffn(m) => m.d_out,
            Model::Gru(m) => m.d_h,
            Model::Cnn(m) => m.pooled_dim(),
            Model::Encoder(m) => m.d_h,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Model::Ffn(_) => 0,
            Model::Gru(m) => m.head.classes(),
            Model::Cnn(m) => m.head.classes(),
            Model::Encoder(m) => m.head.classes(),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Model::Ffn(m) => m.params(),
            Model::Gru(m) => m.params(),
            Model::Cnn(m) => m.params(),
            Model::Encoder(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Model::Ffn(m) => m.params_mut(),
            Model::Gru(m) => m.params_mut(),
            Model::Cnn(m) => m.params_mut(),
            Model::Encoder(m) => m.params_mut(),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            Model::Ffn(m) => m.param_names(),
            Model::Gru(m) => m.param_names(),
            Model::Cnn(m) => m.param_names(),
            Model::Encoder(m) => m.param_names(),
        }
    }

    /// Trainable parameter count, excluding embedding tables (word and
    /// positional) and the classification head.
    pub fn count_params(&self) -> usize {
        match self {
            Model::Ffn(m) => m.count_params(),
            Model::Gru(m) => m.count_params(),
            Model::Cnn(m) => m.count_params(),
            Model::Encoder(m) => m.count_params(),
        }
    }

    pub fn content_hash(&self) -> u64 {
        crate::tensor::group_hash(self.params())
    }

    /// Pre-head encoder state for a token sequence, off-tape.
    pub fn encode_tokens(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.encode_tokens_on(&mut tape, tokens, false)?;
        Ok(tape.to_tensor(v))
    }

    /// Pre-head encoder state on a tape. `trainable` watches parameters
    /// with their gradient flags; otherwise everything enters as constants.
    pub fn encode_tokens_on(&self, tape: &mut Tape, tokens: &[usize], trainable: bool) -> Result<Var> {
        match self {
            Model::Ffn(_) => Err(CkbError::Input(
                "feed-forward net consumes vectors, not token sequences".into(),
            )),
            Model::Gru(m) => {
                let vars = m.watch(tape, trainable);
                m.encode_on(tape, &vars, tokens)
            }
            Model::Cnn(m) => {
                let vars = m.watch(tape, trainable);
                m.encode_on(tape, &vars, tokens)
            }
            Model::Encoder(m) => {
                let vars = m.watch(tape, trainable);
                let h = m.hidden_states_on(tape, &vars, tokens)?;
                tape.mean_rows(h)
            }
        }
    }

    /// Class log-odds for a token sequence, off-tape.
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let head = match self {
            Model::Ffn(_) => {
                return Err(CkbError::Input(
                    "feed-forward net has no classification head".into(),
                ))
            }
            Model::Gru(m) => &m.head,
            Model::Cnn(m) => &m.head,
            Model::Encoder(m) => &m.head,
        };
        let state = self.encode_tokens_on(&mut tape, tokens, false)?;
        let w = tape.constant(&head.w);
        let out = tape.matmul(state, w)?;
        Ok(tape.to_tensor(out))
    }

    /// Argmax class for a token sequence.
    pub fn predict(&self, tokens: &[usize]) -> Result<usize> {
        let logits = self.logits(tokens)?;
        Ok(argmax(logits.data()))
    }
}

pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
