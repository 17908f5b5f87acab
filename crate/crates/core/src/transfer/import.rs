//! The joint import engine: one optimizer over the shared knowledge base
//! and every task's interface, minimizing the unweighted sum of per-task
//! simulation losses. Single-model import is the one-task case of the same
//! loop, step for step.

use std::sync::Arc;

use crate::error::{CkbError, Result};
use crate::interface::IfaceMode;
use crate::metrics::{MetricSplit, MetricsRow, Phase};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::fidelity::{fidelity, FidelityReport};
use super::probes::{build_pool, encode_probe_set, PairPool};
use super::{Direction, EvalGrid, ProbeSet, TransferTask};

pub struct ImportOpts {
    pub steps: u64,
    pub eval_every: u64,
    pub tokens_per_batch: usize,
    pub vector_batch: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

/// Knowledge-base plus interface states captured at an eval point.
pub struct Snapshot {
    pub step: u64,
    kb: Vec<Tensor>,
    ifaces: Vec<Vec<Tensor>>,
}

pub struct SnapshotStore {
    snapshots: Vec<Snapshot>,
}

impl SnapshotStore {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn step_of(&self, idx: usize) -> u64 {
        self.snapshots[idx].step
    }

    /// Write snapshot `idx` back into the live kb and task interfaces.
    pub fn restore(&self, idx: usize, tasks: &mut [TransferTask]) -> Result<()> {
        let snap = self
            .snapshots
            .get(idx)
            .ok_or_else(|| CkbError::Input(format!("snapshot {idx} out of range")))?;
        {
            let kb_handle = tasks[0].kb.clone();
            let mut kb = kb_handle.write().expect("kb lock poisoned");
            for (dst, src) in kb.params_mut().into_iter().zip(&snap.kb) {
                *dst = src.clone();
            }
        }
        for (task, iface_params) in tasks.iter_mut().zip(&snap.ifaces) {
            for (dst, src) in task.interface.params_mut().into_iter().zip(iface_params) {
                *dst = src.clone();
            }
        }
        Ok(())
    }
}

pub struct ImportOutcome {
    /// Per-task training-loss curve, one value per step.
    pub loss_curves: Vec<Vec<f64>>,
    /// Eval steps at which snapshots and measurements were taken.
    pub eval_steps: Vec<u64>,
    /// Per-task held-out fidelity mean at each eval point.
    pub fidelity_history: Vec<Vec<f64>>,
    /// Per-checkpoint, per-task validation accuracy (empty when no task
    /// carries validation rows).
    pub grid: EvalGrid,
    pub snapshots: SnapshotStore,
    /// Final per-task fidelity reports (for the state left live).
    pub final_fidelity: Vec<FidelityReport>,
}

pub type MetricsSink<'a> = &'a mut dyn FnMut(MetricsRow) -> Result<()>;

/// Jointly import every task's model into the shared knowledge base.
/// Models stay frozen; kb and interfaces train.
pub fn import_multi(
    tasks: &mut [TransferTask],
    opts: &ImportOpts,
    sink: MetricsSink<'_>,
) -> Result<ImportOutcome> {
    if tasks.is_empty() {
        return Err(CkbError::Input("no import tasks".into()));
    }
    for task in tasks.iter() {
        if task.direction != Direction::Import {
            return Err(CkbError::Binding(format!(
                "task '{}' is not an import task",
                task.name
            )));
        }
        if !Arc::ptr_eq(&task.kb, &tasks[0].kb) {
            return Err(CkbError::Binding(format!(
                "task '{}' references a different knowledge base",
                task.name
            )));
        }
    }

    // Interface-level pairs from the frozen models, computed once.
    let pools: Vec<PairPool> = tasks
        .iter()
        .map(|t| build_pool(&t.model, &t.train))
        .collect::<Result<_>>()?;
    let mut samplers: Vec<PoolSampler> = tasks
        .iter()
        .zip(&pools)
        .map(|(t, p)| {
            let batch = match (&t.train, p) {
                (ProbeSet::Vectors(_), _) => opts.vector_batch,
                (ProbeSet::Text(_), PairPool::Rows { .. }) => opts.tokens_per_batch,
                (ProbeSet::Text(_), PairPool::Blocks(blocks)) => {
                    let total: usize = blocks.iter().map(|(x, _)| x.shape()[0]).sum();
                    let avg = (total / blocks.len().max(1)).max(1);
                    (opts.tokens_per_batch / avg).max(1)
                }
                (ProbeSet::Text(_), PairPool::Unrolled { seqs, .. }) => {
                    let total: usize = seqs.iter().map(|(x, _)| x.shape()[0]).sum();
                    let avg = (total / seqs.len().max(1)).max(1);
                    (opts.tokens_per_batch / avg).max(1)
                }
            };
            PoolSampler::new(p.len(), batch, opts.seed, &t.name)
        })
        .collect();

    let kb_handle = tasks[0].kb.clone();
    let mut optimizer = AdamW::new(opts.optimizer);
    let mut loss_curves = vec![Vec::new(); tasks.len()];
    let mut eval_steps = Vec::new();
    let mut fidelity_history = vec![Vec::new(); tasks.len()];
    let mut grid = EvalGrid::new();
    let mut snapshots = SnapshotStore {
        snapshots: Vec::new(),
    };
    let track_grid = tasks.iter().all(|t| !t.valid.is_empty());

    let evaluate = |tasks: &[TransferTask],
                        step: u64,
                        eval_steps: &mut Vec<u64>,
                        fidelity_history: &mut Vec<Vec<f64>>,
                        grid: &mut EvalGrid,
                        snapshots: &mut SnapshotStore,
                        sink: &mut dyn FnMut(MetricsRow) -> Result<()>|
     -> Result<()> {
        let kb = kb_handle.read().expect("kb lock poisoned");
        let mut accs = Vec::with_capacity(tasks.len());
        for (i, task) in tasks.iter().enumerate() {
            let rep = fidelity(&task.interface, &kb, &task.model, &task.heldout)?;
            fidelity_history[i].push(rep.mean);
            sink(MetricsRow {
                step,
                phase: Phase::Import,
                split: MetricSplit::Heldout,
                loss: rep.mean,
                accuracy: None,
                fidelity: Some(rep.mean),
                wall_ms: 0,
            })?;
            if track_grid {
                let acc = composite_accuracy(task, &kb)?;
                accs.push(acc);
                sink(MetricsRow {
                    step,
                    phase: Phase::Import,
                    split: MetricSplit::Valid,
                    loss: rep.mean,
                    accuracy: Some(acc),
                    fidelity: Some(rep.mean),
                    wall_ms: 0,
                })?;
            }
        }
        if track_grid {
            grid.push_checkpoint(accs);
        }
        eval_steps.push(step);
        snapshots.snapshots.push(Snapshot {
            step,
            kb: kb.params().into_iter().cloned().collect(),
            ifaces: tasks
                .iter()
                .map(|t| t.interface.params().into_iter().cloned().collect())
                .collect(),
        });
        Ok(())
    };

    // Initial-state snapshot: step budgets of zero leave it the best.
    evaluate(
        tasks,
        0,
        &mut eval_steps,
        &mut fidelity_history,
        &mut grid,
        &mut snapshots,
        sink,
    )?;

    for step in 1..=opts.steps {
        let mut tape = Tape::new();
        let kb_vars = {
            let kb = kb_handle.read().expect("kb lock poisoned");
            kb.watch(&mut tape, true)
        };
        let iface_vars: Vec<_> = tasks
            .iter()
            .map(|t| t.interface.watch(&mut tape, IfaceMode::Trainable))
            .collect();

        let mut task_losses = Vec::with_capacity(tasks.len());
        for (i, task) in tasks.iter().enumerate() {
            let batch = samplers[i].next_batch();
            let loss = task_loss_on(
                &mut tape,
                task,
                &pools[i],
                &batch,
                &iface_vars[i],
                &kb_vars,
            )
            .map_err(|e| wrap_numeric(e, step, &task.name))?;
            task_losses.push(loss);
        }
        let joint = if task_losses.len() == 1 {
            task_losses[0]
        } else {
            tape.add_n(&task_losses)
                .map_err(|e| wrap_numeric(e, step, "joint"))?
        };
        for (i, lv) in task_losses.iter().enumerate() {
            let v = tape.value(*lv)[0] as f64;
            if !v.is_finite() {
                return Err(CkbError::Numeric {
                    op: "import".into(),
                    detail: format!(
                        "non-finite loss at step {step}, task '{}', batch {}",
                        tasks[i].name,
                        samplers[i].batches_drawn
                    ),
                });
            }
            loss_curves[i].push(v);
            sink(MetricsRow {
                step,
                phase: Phase::Import,
                split: MetricSplit::Train,
                loss: v,
                accuracy: None,
                fidelity: None,
                wall_ms: 0,
            })?;
        }
        tape.backward(joint)?;

        let mut kb = kb_handle.write().expect("kb lock poisoned");
        {
            let mut params: Vec<&mut Tensor> = kb.params_mut();
            let mut var_order: Vec<Var> = vec![kb_vars.high];
            var_order.extend(kb_vars.low.iter().copied());
            for (task, vars) in tasks.iter_mut().zip(&iface_vars) {
                params.extend(task.interface.params_mut());
                var_order.extend([
                    vars.w_l, vars.w_h, vars.w_q1, vars.w_k1, vars.w_v1, vars.w_q2, vars.w_k2,
                    vars.w_v2, vars.w_o,
                ]);
            }
            crate::tape::harvest_all(&tape, &var_order, &mut params);
            optimizer.step(&mut params)?;
            AdamW::zero_grads(&mut params);
        }
        drop(kb);

        if step % opts.eval_every == 0 || step == opts.steps {
            evaluate(
                tasks,
                step,
                &mut eval_steps,
                &mut fidelity_history,
                &mut grid,
                &mut snapshots,
                sink,
            )?;
        }
    }

    let final_fidelity = {
        let kb = kb_handle.read().expect("kb lock poisoned");
        tasks
            .iter()
            .map(|t| fidelity(&t.interface, &kb, &t.model, &t.heldout))
            .collect::<Result<Vec<_>>>()?
    };

    Ok(ImportOutcome {
        loss_curves,
        eval_steps,
        fidelity_history,
        grid,
        snapshots,
        final_fidelity,
    })
}

/// Import one model. Restores the snapshot with the best held-out
/// fidelity before returning.
pub fn import_single(
    task: &mut TransferTask,
    opts: &ImportOpts,
    sink: MetricsSink<'_>,
) -> Result<ImportOutcome> {
    let model_hash_before = task.model.content_hash();
    let mut outcome = {
        let tasks = std::slice::from_mut(task);
        import_multi(tasks, opts, sink)?
    };
    debug_assert_eq!(model_hash_before, task.model.content_hash());
    // Best eval point by held-out fidelity; earliest wins ties.
    let mut best = 0usize;
    for (i, &fid) in outcome.fidelity_history[0].iter().enumerate() {
        if fid < outcome.fidelity_history[0][best] {
            best = i;
        }
    }
    outcome
        .snapshots
        .restore(best, std::slice::from_mut(task))?;
    let kb = task.kb.read().expect("kb lock poisoned");
    outcome.final_fidelity = vec![fidelity(&task.interface, &kb, &task.model, &task.heldout)?];
    Ok(outcome)
}

/// Validation accuracy of the composed interface with the source model's
/// own head.
fn composite_accuracy(task: &TransferTask, kb: &crate::kb::KnowledgeBase) -> Result<f64> {
    let head = match &task.model {
        crate::models::Model::Gru(m) => &m.head.w,
        crate::models::Model::Cnn(m) => &m.head.w,
        crate::models::Model::Encoder(m) => &m.head.w,
        crate::models::Model::Ffn(_) => {
            return Err(CkbError::Input(
                "vector tasks carry no validation accuracy".into(),
            ))
        }
    };
    let probes = ProbeSet::Text(task.valid.iter().map(|(t, _)| t.clone()).collect());
    let states = encode_probe_set(&task.interface, kb, &task.model, &probes)?;
    let mut correct = 0usize;
    for (state, (_, label)) in states.iter().zip(&task.valid) {
        let mut tape = Tape::new();
        let s = tape.constant(state);
        let w = tape.constant(head);
        let logits = tape.matmul(s, w)?;
        if crate::models::argmax(tape.value(logits)) == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / task.valid.len() as f64)
}

/// Simulation loss of one task batch: mean cosine distance between the
/// interface outputs and the frozen model's cached targets.
fn task_loss_on(
    tape: &mut Tape,
    task: &TransferTask,
    pool: &PairPool,
    batch: &[usize],
    iface_vars: &crate::interface::InterfaceVars,
    kb_vars: &crate::kb::KbVars,
) -> Result<Var> {
    match pool {
        PairPool::Rows {
            inputs,
            targets,
            d_in,
            d_out,
        } => {
            let mut outs = Vec::with_capacity(batch.len());
            let mut target_data = Vec::with_capacity(batch.len() * d_out);
            for &idx in batch {
                let x = tape.constant_matrix(1, *d_in, inputs[idx].clone())?;
                let y = task.interface.forward_on(tape, iface_vars, kb_vars, x)?;
                outs.push(y);
                target_data.extend_from_slice(&targets[idx]);
            }
            let out = tape.concat_rows(&outs)?;
            let target = tape.constant_matrix(batch.len(), *d_out, target_data)?;
            tape.cosine_distance(out, target)
        }
        PairPool::Blocks(blocks) => {
            let mut per_block = Vec::with_capacity(batch.len());
            for &idx in batch {
                let (x, y) = &blocks[idx];
                let xv = tape.constant(x);
                let yv = tape.constant(y);
                let out = task.interface.forward_on(tape, iface_vars, kb_vars, xv)?;
                per_block.push(tape.cosine_distance(out, yv)?);
            }
            let total = tape.add_n(&per_block)?;
            tape.scale(total, 1.0 / per_block.len() as f32)
        }
        PairPool::Unrolled { seqs, d_h } => {
            let bound = super::probes::recurrent_state_bound(*d_h);
            let mut per_seq = Vec::with_capacity(batch.len());
            for &idx in batch {
                let (emb, states) = &seqs[idx];
                let steps = emb.shape()[0];
                let emb_v = tape.constant(emb);
                let mut h = tape.constant_matrix(1, *d_h, vec![0.0; *d_h])?;
                let mut outs = Vec::with_capacity(steps);
                for t in 0..steps {
                    let x_t = tape.slice_rows(emb_v, t, t + 1)?;
                    let step_in = tape.concat_cols(&[x_t, h])?;
                    let out = task.interface.forward_on(tape, iface_vars, kb_vars, step_in)?;
                    h = tape.clip_rows_norm(out, bound)?;
                    outs.push(h);
                }
                let traj = tape.concat_rows(&outs)?;
                let want = tape.constant(states);
                per_seq.push(tape.cosine_distance(traj, want)?);
            }
            let total = tape.add_n(&per_seq)?;
            tape.scale(total, 1.0 / per_seq.len() as f32)
        }
    }
}

fn wrap_numeric(e: CkbError, step: u64, task: &str) -> CkbError {
    match e {
        CkbError::Numeric { op, detail } => CkbError::Numeric {
            op,
            detail: format!("{detail} (import step {step}, task '{task}')"),
        },
        other => other,
    }
}

/// Deterministic epoch-shuffled batch sampler over pool indices.
struct PoolSampler {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
    rng: SeededRng,
    epoch: u64,
    pub batches_drawn: u64,
}

impl PoolSampler {
    fn new(pool_len: usize, batch: usize, seed: u64, task_name: &str) -> PoolSampler {
        let rng = SeededRng::new(seed).split(&format!("import/{task_name}"));
        let mut s = PoolSampler {
            order: (0..pool_len).collect(),
            cursor: 0,
            batch: batch.max(1).min(pool_len.max(1)),
            rng,
            epoch: 0,
            batches_drawn: 0,
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
        self.batches_drawn += 1;
        out
    }
}
