//! Probe-side plumbing: interface-level training pairs extracted from a
//! frozen model, and the composed interface encoder that turns raw probe
//! inputs into pre-head states by composing the interface the way the
//! source model composes its own local function.

use crate::error::{CkbError, Result};
use crate::interface::{IfaceMode, InterfaceParams};
use crate::kb::KnowledgeBase;
use crate::models::Model;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Interface-level training material harvested from the frozen model.
pub enum PairPool {
    /// Independent rows: each input row maps to a target row through one
    /// T = 1 interface call (window steps and vector tasks).
    Rows { inputs: Vec<Vec<f32>>, targets: Vec<Vec<f32>>, d_in: usize, d_out: usize },
    /// Whole blocks: each (X, Y) pair is one T-row interface call
    /// (global sequence bindings).
    Blocks(Vec<(Tensor, Tensor)>),
    /// Recurrent sequences: the interface runs its own recurrence over the
    /// frozen embeddings and every step output is matched against the
    /// model's state trajectory. Each element is (embedded inputs T x d_e,
    /// teacher states T x d_h).
    Unrolled { seqs: Vec<(Tensor, Tensor)>, d_h: usize },
}

impl PairPool {
    pub fn len(&self) -> usize {
        match self {
            PairPool::Rows { inputs, .. } => inputs.len(),
            PairPool::Blocks(b) => b.len(),
            PairPool::Unrolled { seqs, .. } => seqs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tokens consumed by one element, for budget-based batch sizing.
    pub fn tokens_of(&self, idx: usize) -> usize {
        match self {
            PairPool::Rows { .. } => 1,
            PairPool::Blocks(b) => b[idx].0.shape()[0],
            PairPool::Unrolled { seqs, .. } => seqs[idx].0.shape()[0],
        }
    }
}

/// Harvest the interface-level pairs of one probe input from the frozen
/// model.
pub fn step_pairs(model: &Model, probe: Probe<'_>) -> Result<(Tensor, Tensor)> {
    match (model, probe) {
        (Model::Ffn(net), Probe::Vector(x)) => {
            let y = net.forward(x)?;
            Ok((
                Tensor::matrix(1, net.d_in, x.data().to_vec())?,
                Tensor::matrix(1, net.d_out, y.data().to_vec())?,
            ))
        }
        (Model::Gru(m), Probe::Tokens(tokens)) => m.trajectory(tokens),
        (Model::Cnn(m), Probe::Tokens(tokens)) => m.trajectory(tokens),
        (Model::Encoder(m), Probe::Tokens(tokens)) => m.trajectory(tokens),
        _ => Err(CkbError::Input(
            "probe kind does not match the model's input space".into(),
        )),
    }
}

/// Norm bound on the fed-back state of a composed recurrent interface.
/// The simulated GRU state lives in (-1, 1)^d (norm at most sqrt(d)); the
/// bound is twice that, so it only engages when the recurrence is far off
/// the teacher's manifold and is inactive once the simulation fits.
pub fn recurrent_state_bound(d_h: usize) -> f32 {
    2.0 * (d_h as f32).sqrt()
}

#[derive(Clone, Copy)]
pub enum Probe<'a> {
    Tokens(&'a [usize]),
    Vector(&'a Tensor),
}

/// Build the full pair pool over a probe set.
pub fn build_pool(model: &Model, probes: &super::ProbeSet) -> Result<PairPool> {
    match probes {
        super::ProbeSet::Vectors(xs) => {
            let sig = model.signature();
            let mut inputs = Vec::with_capacity(xs.len());
            let mut targets = Vec::with_capacity(xs.len());
            for x in xs {
                let (i, t) = step_pairs(model, Probe::Vector(x))?;
                inputs.push(i.data().to_vec());
                targets.push(t.data().to_vec());
            }
            Ok(PairPool::Rows {
                inputs,
                targets,
                d_in: sig.d_in,
                d_out: sig.d_out,
            })
        }
        super::ProbeSet::Text(seqs) => match model {
            // The GRU's local function recurs through its own output, so
            // the interface trains through its own recurrence too: frozen
            // embeddings in, the teacher's state trajectory as targets.
            Model::Gru(m) => {
                let mut pool = Vec::with_capacity(seqs.len());
                for tokens in seqs {
                    let mut tape = Tape::new();
                    let table = tape.constant(&m.embedding);
                    let emb = tape.embed(table, tokens)?;
                    let emb = tape.to_tensor(emb);
                    let (_, states) = m.trajectory(tokens)?;
                    pool.push((emb, states));
                }
                Ok(PairPool::Unrolled {
                    seqs: pool,
                    d_h: m.d_h,
                })
            }
            // CNN window steps are independent; plain step pairs are the
            // composition-exact training set.
            Model::Cnn(_) => {
                let sig = model.signature();
                let mut inputs = Vec::new();
                let mut targets = Vec::new();
                for tokens in seqs {
                    let (i, t) = step_pairs(model, Probe::Tokens(tokens))?;
                    let rows = i.shape()[0];
                    for r in 0..rows {
                        inputs.push(i.data()[r * sig.d_in..(r + 1) * sig.d_in].to_vec());
                        targets.push(t.data()[r * sig.d_out..(r + 1) * sig.d_out].to_vec());
                    }
                }
                Ok(PairPool::Rows {
                    inputs,
                    targets,
                    d_in: sig.d_in,
                    d_out: sig.d_out,
                })
            }
            Model::Encoder(_) => {
                let mut blocks = Vec::with_capacity(seqs.len());
                for tokens in seqs {
                    blocks.push(step_pairs(model, Probe::Tokens(tokens))?);
                }
                Ok(PairPool::Blocks(blocks))
            }
            Model::Ffn(_) => Err(CkbError::Input(
                "feed-forward tasks take vector probes".into(),
            )),
        },
    }
}

/// Compose the frozen interface into a tokens-to-state encoder following
/// the source model's own composition pattern, returning the pre-head
/// state (1 x d) for one probe input.
///
/// The source model contributes only its frozen input pathway (embeddings)
/// and composition structure; all function knowledge comes from the
/// interface's reads of the knowledge base.
pub fn interface_encode(
    iface: &InterfaceParams,
    kb: &KnowledgeBase,
    source: &Model,
    probe: Probe<'_>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let ivars = iface.watch(&mut tape, IfaceMode::Frozen);
    let kvars = kb.watch(&mut tape, false);
    match (source, probe) {
        (Model::Ffn(net), Probe::Vector(x)) => {
            let xv = tape.constant_matrix(1, net.d_in, x.data().to_vec())?;
            let y = iface.forward_on(&mut tape, &ivars, &kvars, xv)?;
            Ok(tape.to_tensor(y))
        }
        (Model::Gru(m), Probe::Tokens(tokens)) => {
            if tokens.is_empty() {
                return Err(CkbError::Input("empty token sequence".into()));
            }
            let emb_table = tape.constant(&m.embedding);
            let emb = tape.embed(emb_table, tokens)?;
            let mut h = tape.constant_matrix(1, m.d_h, vec![0.0; m.d_h])?;
            let bound = recurrent_state_bound(m.d_h);
            for t in 0..tokens.len() {
                let x_t = tape.slice_rows(emb, t, t + 1)?;
                let step_in = tape.concat_cols(&[x_t, h])?;
                let out = iface.forward_on(&mut tape, &ivars, &kvars, step_in)?;
                h = tape.clip_rows_norm(out, bound)?;
            }
            Ok(tape.to_tensor(h))
        }
        (Model::Cnn(m), Probe::Tokens(tokens)) => {
            let w_max = m.max_window();
            if tokens.len() < w_max {
                return Err(CkbError::Input(format!(
                    "sequence of length {} shorter than widest window {w_max}",
                    tokens.len()
                )));
            }
            let emb_table = tape.constant(&m.embedding);
            let emb = tape.embed(emb_table, tokens)?;
            let windows = tape.unfold_windows(emb, w_max)?;
            let positions = tokens.len() - w_max + 1;
            let mut rows = Vec::with_capacity(positions);
            for t in 0..positions {
                let win = tape.slice_rows(windows, t, t + 1)?;
                rows.push(iface.forward_on(&mut tape, &ivars, &kvars, win)?);
            }
            let feats = tape.concat_rows(&rows)?;
            let pooled = tape.max_rows(feats)?;
            Ok(tape.to_tensor(pooled))
        }
        (Model::Encoder(m), Probe::Tokens(tokens)) => {
            let mvars = m.watch(&mut tape, false);
            let x = m.embed_input_on(&mut tape, &mvars, tokens)?;
            let h = iface.forward_on(&mut tape, &ivars, &kvars, x)?;
            let pooled = tape.mean_rows(h)?;
            Ok(tape.to_tensor(pooled))
        }
        _ => Err(CkbError::Input(
            "probe kind does not match the model's input space".into(),
        )),
    }
}

/// Composed interface encodings for a whole probe set, row-stacked.
pub fn encode_probe_set(
    iface: &InterfaceParams,
    kb: &KnowledgeBase,
    source: &Model,
    probes: &super::ProbeSet,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(probes.len());
    match probes {
        super::ProbeSet::Vectors(xs) => {
            for x in xs {
                out.push(interface_encode(iface, kb, source, Probe::Vector(x))?);
            }
        }
        super::ProbeSet::Text(seqs) => {
            for tokens in seqs {
                out.push(interface_encode(iface, kb, source, Probe::Tokens(tokens))?);
            }
        }
    }
    Ok(out)
}

/// The model's own pre-head state for one probe input.
pub fn model_encode(model: &Model, probe: Probe<'_>) -> Result<Tensor> {
    match (model, probe) {
        (Model::Ffn(net), Probe::Vector(x)) => {
            let y = net.forward(x)?;
            Tensor::matrix(1, net.d_out, y.data().to_vec())
        }
        (_, Probe::Tokens(tokens)) => model.encode_tokens(tokens),
        _ => Err(CkbError::Input(
            "probe kind does not match the model's input space".into(),
        )),
    }
}
