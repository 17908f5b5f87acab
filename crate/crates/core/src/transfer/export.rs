//! The export engine: kb and interface frozen, a fresh model trains its
//! pre-head encoder state to match the composed interface on probe inputs.
//!
//! Targets are cached up front since the interface side never changes.
//! When the target model's state width differs from the interface's, a
//! trainable linear bridge maps model states into the interface's space
//! for the loss only; it is discarded with the training loop.

use crate::error::{CkbError, Result};
use crate::metrics::{MetricSplit, MetricsRow, Phase};
use crate::models::Model;
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::import::MetricsSink;
use super::probes::encode_probe_set;
use super::{Direction, ProbeSet, TransferTask};

pub struct ExportOpts {
    pub steps: u64,
    pub eval_every: u64,
    /// Sequences (or vectors) per optimization step.
    pub batch: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

pub struct ExportOutcome {
    pub loss_curve: Vec<f64>,
    pub eval_steps: Vec<u64>,
    /// Held-out model-vs-interface distance at each eval point.
    pub heldout_history: Vec<f64>,
    /// Final held-out distance of the state left in the model.
    pub final_distance: f64,
    /// Initial held-out distance before any training.
    pub initial_distance: f64,
}

/// Train `task.model` to run the way the frozen composed interface does.
/// `target` is the model being trained; `task.model` holds the frozen
/// source whose composition pattern the interface follows.
pub fn export_to(
    task: &TransferTask,
    target: &mut Model,
    opts: &ExportOpts,
    sink: MetricsSink<'_>,
) -> Result<ExportOutcome> {
    if task.direction != Direction::Export {
        return Err(CkbError::Binding(format!(
            "task '{}' is not an export task",
            task.name
        )));
    }
    let kb_hash_before;
    let iface_hash_before = task.interface.content_hash();

    // Cache the frozen interface targets.
    let (train_targets, heldout_targets) = {
        let kb = task.kb.read().expect("kb lock poisoned");
        kb_hash_before = kb.content_hash();
        (
            encode_probe_set(&task.interface, &kb, &task.model, &task.train)?,
            encode_probe_set(&task.interface, &kb, &task.model, &task.heldout)?,
        )
    };
    let d_iface = train_targets[0].cols();
    let d_target = target.encoder_dim();

    let mut bridge: Option<Tensor> = if d_target != d_iface {
        let mut rng = SeededRng::new(opts.seed).split(&format!("export-bridge/{}", task.name));
        Some(Tensor::uniform_init(
            vec![d_target, d_iface],
            1.0 / (d_target as f32).sqrt(),
            &mut rng,
        ))
    } else {
        None
    };

    let mut optimizer = AdamW::new(opts.optimizer);
    let mut sampler = Sampler::new(task.train.len(), opts.batch, opts.seed, &task.name);
    let mut loss_curve = Vec::new();
    let mut eval_steps = Vec::new();
    let mut heldout_history = Vec::new();
    let mut best: Option<(f64, Vec<Tensor>, Option<Tensor>)> = None;

    let measure = |target: &Model, bridge: &Option<Tensor>| -> Result<f64> {
        heldout_distance(target, bridge, &task.heldout, &heldout_targets)
    };

    let initial_distance = measure(target, &bridge)?;
    heldout_history.push(initial_distance);
    eval_steps.push(0);
    best.replace((
        initial_distance,
        target.params().into_iter().cloned().collect(),
        bridge.clone(),
    ));
    sink(MetricsRow {
        step: 0,
        phase: Phase::Export,
        split: MetricSplit::Heldout,
        loss: initial_distance,
        accuracy: None,
        fidelity: Some(initial_distance),
        wall_ms: 0,
    })?;

    for step in 1..=opts.steps {
        let batch = sampler.next_batch();
        let mut tape = Tape::new();
        let bridge_var = bridge.as_ref().map(|b| tape.param(b));
        let mut outs = Vec::with_capacity(batch.len());
        let mut target_rows = Vec::with_capacity(batch.len() * d_iface);
        let (model_vars, states) = encode_batch(&mut tape, target, &task.train, &batch)?;
        for (bi, state) in states.into_iter().enumerate() {
            let projected = match bridge_var {
                Some(bv) => tape.matmul(state, bv)?,
                None => state,
            };
            outs.push(projected);
            target_rows.extend_from_slice(train_targets[batch[bi]].data());
        }
        let out = tape.concat_rows(&outs)?;
        let want = tape.constant_matrix(batch.len(), d_iface, target_rows)?;
        let loss = tape
            .cosine_distance(out, want)
            .map_err(|e| wrap_numeric(e, step, &task.name))?;
        let loss_val = tape.value(loss)[0] as f64;
        if !loss_val.is_finite() {
            return Err(CkbError::Numeric {
                op: "export".into(),
                detail: format!("non-finite loss at step {step}, task '{}'", task.name),
            });
        }
        loss_curve.push(loss_val);
        sink(MetricsRow {
            step,
            phase: Phase::Export,
            split: MetricSplit::Train,
            loss: loss_val,
            accuracy: None,
            fidelity: None,
            wall_ms: 0,
        })?;
        tape.backward(loss)?;

        let mut params = target.params_mut();
        let mut vars = model_vars;
        if let (Some(b), Some(bv)) = (bridge.as_mut(), bridge_var) {
            params.push(b);
            vars.push(bv);
        }
        crate::tape::harvest_all(&tape, &vars, &mut params);
        optimizer.step(&mut params)?;
        AdamW::zero_grads(&mut params);

        if step % opts.eval_every == 0 || step == opts.steps {
            let d = measure(target, &bridge)?;
            heldout_history.push(d);
            eval_steps.push(step);
            sink(MetricsRow {
                step,
                phase: Phase::Export,
                split: MetricSplit::Heldout,
                loss: d,
                accuracy: None,
                fidelity: Some(d),
                wall_ms: 0,
            })?;
            if best.as_ref().map(|(b, _, _)| d < *b).unwrap_or(true) {
                best = Some((
                    d,
                    target.params().into_iter().cloned().collect(),
                    bridge.clone(),
                ));
            }
        }
    }

    // Leave the best-by-held-out state in the model.
    let (final_distance, best_params, _) = best.expect("at least the initial eval ran");
    for (dst, src) in target.params_mut().into_iter().zip(&best_params) {
        *dst = src.clone();
    }

    {
        let kb = task.kb.read().expect("kb lock poisoned");
        debug_assert_eq!(kb_hash_before, kb.content_hash());
    }
    debug_assert_eq!(iface_hash_before, task.interface.content_hash());

    Ok(ExportOutcome {
        loss_curve,
        eval_steps,
        heldout_history,
        final_distance,
        initial_distance,
    })
}

/// Pre-head states of the trainable target model for a batch of probes.
fn encode_batch(
    tape: &mut Tape,
    target: &Model,
    probes: &ProbeSet,
    batch: &[usize],
) -> Result<(Vec<Var>, Vec<Var>)> {
    let mut states = Vec::with_capacity(batch.len());
    match (target, probes) {
        (Model::Ffn(net), ProbeSet::Vectors(xs)) => {
            let vars = net.watch(tape, true);
            for &idx in batch {
                let x = tape.constant_matrix(1, net.d_in, xs[idx].data().to_vec())?;
                states.push(net.forward_on(tape, &vars, x)?);
            }
            Ok((vec![vars.w_xh, vars.w_hy], states))
        }
        (Model::Gru(m), ProbeSet::Text(seqs)) => {
            let vars = m.watch(tape, true);
            for &idx in batch {
                states.push(m.encode_on(tape, &vars, &seqs[idx])?);
            }
            let c = &vars.cell;
            Ok((
                vec![
                    vars.embedding,
                    c.w_zx,
                    c.w_zh,
                    c.b_z,
                    c.w_rx,
                    c.w_rh,
                    c.b_r,
                    c.w_cx,
                    c.w_ch,
                    c.b_c,
                    vars.head,
                ],
                states,
            ))
        }
        (Model::Cnn(m), ProbeSet::Text(seqs)) => {
            let vars = m.watch(tape, true);
            for &idx in batch {
                states.push(m.encode_on(tape, &vars, &seqs[idx])?);
            }
            let mut order = vec![vars.embedding];
            for &(w, b) in &vars.banks {
                order.push(w);
                order.push(b);
            }
            order.push(vars.head);
            Ok((order, states))
        }
        (Model::Encoder(m), ProbeSet::Text(seqs)) => {
            let vars = m.watch(tape, true);
            for &idx in batch {
                let h = m.hidden_states_on(tape, &vars, &seqs[idx])?;
                states.push(tape.mean_rows(h)?);
            }
            Ok((
                vec![
                    vars.embedding,
                    vars.positional,
                    vars.w_q,
                    vars.b_q,
                    vars.w_k,
                    vars.b_k,
                    vars.w_v,
                    vars.b_v,
                    vars.w_o,
                    vars.b_o,
                    vars.w_ff1,
                    vars.b_ff1,
                    vars.w_ff2,
                    vars.b_ff2,
                    vars.ln1_g,
                    vars.ln1_b,
                    vars.ln2_g,
                    vars.ln2_b,
                    vars.head,
                ],
                states,
            ))
        }
        _ => Err(CkbError::Input(
            "export target's input space does not match the probe set".into(),
        )),
    }
}

/// Mean held-out cosine distance between the (bridged) model states and
/// the cached interface targets.
fn heldout_distance(
    target: &Model,
    bridge: &Option<Tensor>,
    heldout: &ProbeSet,
    targets: &[Tensor],
) -> Result<f64> {
    let mut acc = 0.0f64;
    let n = heldout.len();
    for idx in 0..n {
        let mut tape = Tape::new();
        let (_, states) = encode_batch(&mut tape, target, heldout, &[idx])?;
        let state = match bridge {
            Some(b) => {
                let bv = tape.constant(b);
                tape.matmul(states[0], bv)?
            }
            None => states[0],
        };
        let want = tape.constant(&targets[idx]);
        let d = tape.cosine_distance(state, want)?;
        acc += tape.value(d)[0] as f64;
    }
    Ok(acc / n as f64)
}

fn wrap_numeric(e: CkbError, step: u64, task: &str) -> CkbError {
    match e {
        CkbError::Numeric { op, detail } => CkbError::Numeric {
            op,
            detail: format!("{detail} (export step {step}, task '{task}')"),
        },
        other => other,
    }
}

struct Sampler {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
    rng: SeededRng,
    epoch: u64,
}

impl Sampler {
    fn new(pool_len: usize, batch: usize, seed: u64, task_name: &str) -> Sampler {
        let rng = SeededRng::new(seed).split(&format!("export/{task_name}"));
        let mut s = Sampler {
            order: (0..pool_len).collect(),
            cursor: 0,
            batch: batch.max(1).min(pool_len.max(1)),
            rng,
            epoch: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        let mut r = self.rng.split(&format!("epoch/{}", self.epoch));
        r.shuffle(&mut self.order);
        self.cursor = 0;
        self.epoch += 1;
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.order.len() {
            self.reshuffle();
        }
        let out = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        out
    }
}
