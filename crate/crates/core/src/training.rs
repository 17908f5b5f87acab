//! Supervised training: baseline classifiers on labels, and head-only
//! fitting on top of a frozen encoder.

use crate::data::{make_batches, Dataset};
use crate::error::{CkbError, Result};
use crate::metrics::{MetricSplit, MetricsRow, Phase};
use crate::models::{argmax, ClassifierHead, Model};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::SeededRng;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub struct TrainOpts {
    pub steps: u64,
    pub eval_every: u64,
    pub tokens_per_batch: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

pub struct TrainOutcome {
    pub loss_curve: Vec<f64>,
    pub best_valid_accuracy: f64,
    pub final_valid_accuracy: f64,
}

pub type MetricsSink<'a> = &'a mut dyn FnMut(MetricsRow) -> Result<()>;

/// Cross-entropy training of a full classifier. Keeps the parameters of
/// the best validation checkpoint.
pub fn train_classifier(
    model: &mut Model,
    train: &Dataset,
    valid: &Dataset,
    opts: &TrainOpts,
    sink: MetricsSink<'_>,
) -> Result<TrainOutcome> {
    let mut optimizer = AdamW::new(opts.optimizer);
    let mut loss_curve = Vec::new();
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut epoch: u64 = 0;
    let mut batches = make_batches(train, opts.tokens_per_batch, opts.seed ^ epoch)?;
    let mut cursor = 0usize;

    let record_eval = |model: &Model, step: u64, best: &mut Option<(f64, Vec<Tensor>)>, sink: &mut dyn FnMut(MetricsRow) -> Result<()>| -> Result<f64> {
        let acc = accuracy(model, &valid.examples)?;
        sink(MetricsRow {
            step,
            phase: Phase::Baseline,
            split: MetricSplit::Valid,
            loss: 0.0,
            accuracy: Some(acc),
            fidelity: None,
            wall_ms: 0,
        })?;
        let better = best.as_ref().map(|(b, _)| acc > *b).unwrap_or(true);
        if better {
            *best = Some((acc, model.params().into_iter().cloned().collect()));
        }
        Ok(acc)
    };

    record_eval(model, 0, &mut best, sink)?;

    for step in 1..=opts.steps {
        if cursor >= batches.len() {
            epoch += 1;
            batches = make_batches(train, opts.tokens_per_batch, opts.seed ^ epoch)?;
            cursor = 0;
        }
        let batch = &batches[cursor];
        cursor += 1;

        let mut tape = Tape::new();
        let (vars, states) = encode_labeled_batch(&mut tape, model, batch.rows.iter().zip(&batch.lengths))?;
        let stacked = tape.concat_rows(&states)?;
        let head_var = *vars.last().expect("head is always last");
        let logits = tape.matmul(stacked, head_var)?;
        let loss = tape.cross_entropy(logits, &batch.labels)?;
        let loss_val = tape.value(loss)[0] as f64;
        if !loss_val.is_finite() {
            return Err(CkbError::Numeric {
                op: "train".into(),
                detail: format!("non-finite loss at step {step}"),
            });
        }
        loss_curve.push(loss_val);
        sink(MetricsRow {
            step,
            phase: Phase::Baseline,
            split: MetricSplit::Train,
            loss: loss_val,
            accuracy: None,
            fidelity: None,
            wall_ms: 0,
        })?;
        tape.backward(loss)?;
        let mut params = model.params_mut();
        crate::tape::harvest_all(&tape, &vars, &mut params);
        optimizer.step(&mut params)?;
        AdamW::zero_grads(&mut params);

        if step % opts.eval_every == 0 || step == opts.steps {
            record_eval(model, step, &mut best, sink)?;
        }
    }

    let (best_acc, best_params) = best.expect("at least the initial eval ran");
    for (dst, src) in model.params_mut().into_iter().zip(&best_params) {
        *dst = src.clone();
    }
    Ok(TrainOutcome {
        loss_curve,
        best_valid_accuracy: best_acc,
        final_valid_accuracy: best_acc,
    })
}

/// Watch a model trainably and produce per-example pre-head states plus
/// head logits vars. Returns (watched var order, per-row state vars);
/// the head var is the last of the order.
fn encode_labeled_batch<'a>(
    tape: &mut Tape,
    model: &Model,
    rows: impl Iterator<Item = (&'a Vec<usize>, &'a usize)>,
) -> Result<(Vec<crate::tape::Var>, Vec<crate::tape::Var>)> {
    match model {
        Model::Gru(m) => {
            let vars = m.watch(tape, true);
            let mut states = Vec::new();
            for (row, &len) in rows {
                states.push(m.encode_on(tape, &vars, &row[..len])?);
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
        Model::Cnn(m) => {
            let vars = m.watch(tape, true);
            let mut states = Vec::new();
            for (row, &len) in rows {
                states.push(m.encode_on(tape, &vars, &row[..len])?);
            }
            let mut order = vec![vars.embedding];
            for &(w, b) in &vars.banks {
                order.push(w);
                order.push(b);
            }
            order.push(vars.head);
            Ok((order, states))
        }
        Model::Encoder(m) => {
            let vars = m.watch(tape, true);
            let mut states = Vec::new();
            for (row, &len) in rows {
                let h = m.hidden_states_on(tape, &vars, &row[..len])?;
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
        Model::Ffn(_) => Err(CkbError::Input(
            "feed-forward nets are not label-trained on token data".into(),
        )),
    }
}

/// Classification accuracy over (tokens, label) rows.
pub fn accuracy(model: &Model, examples: &[(Vec<usize>, usize)]) -> Result<f64> {
    if examples.is_empty() {
        return Err(CkbError::Input("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    for (tokens, label) in examples {
        if model.predict(tokens)? == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Fit a fresh linear head on a frozen encoder by caching its states.
pub fn fit_head_on_frozen_encoder(
    model: &mut Model,
    train: &[(Vec<usize>, usize)],
    classes: usize,
    steps: u64,
    optimizer_cfg: AdamWConfig,
    seed: u64,
) -> Result<()> {
    if train.is_empty() {
        return Err(CkbError::Input("no labeled rows for head fitting".into()));
    }
    let d = model.encoder_dim();
    let states: Vec<Tensor> = train
        .iter()
        .map(|(tokens, _)| model.encode_tokens(tokens))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = train.iter().map(|(_, l)| *l).collect();

    let mut rng = SeededRng::new(seed).split("head");
    let mut head = ClassifierHead::new(d, classes, &mut rng);
    let mut optimizer = AdamW::new(optimizer_cfg);
    let batch_size = 32.min(states.len());
    let mut order: Vec<usize> = (0..states.len()).collect();
    let mut cursor = 0usize;
    let mut epoch = 0u64;
    rng.split(&format!("order/{epoch}")).shuffle(&mut order);

    for _ in 0..steps {
        if cursor + batch_size > order.len() {
            epoch += 1;
            rng.split(&format!("order/{epoch}")).shuffle(&mut order);
            cursor = 0;
        }
        let batch = &order[cursor..cursor + batch_size];
        cursor += batch_size;

        let mut tape = Tape::new();
        let head_var = tape.param(&head.w);
        let mut rows = Vec::with_capacity(batch.len() * d);
        let mut batch_labels = Vec::with_capacity(batch.len());
        for &i in batch {
            rows.extend_from_slice(states[i].data());
            batch_labels.push(labels[i]);
        }
        let x = tape.constant_matrix(batch.len(), d, rows)?;
        let logits = tape.matmul(x, head_var)?;
        let loss = tape.cross_entropy(logits, &batch_labels)?;
        tape.backward(loss)?;
        let mut params = vec![&mut head.w];
        crate::tape::harvest_all(&tape, &[head_var], &mut params);
        optimizer.step(&mut params)?;
        AdamW::zero_grads(&mut params);
    }

    match model {
        Model::Gru(m) => m.head = head,
        Model::Cnn(m) => m.head = head,
        Model::Encoder(m) => m.head = head,
        Model::Ffn(_) => {
            return Err(CkbError::Input("feed-forward nets have no head".into()))
        }
    }
    Ok(())
}

/// Probability-averaged ensemble accuracy. All models must agree on the
/// class count.
pub fn ensemble_accuracy(models: &[&Model], examples: &[(Vec<usize>, usize)]) -> Result<f64> {
    if models.len() < 2 {
        return Err(CkbError::Input("ensemble needs at least two models".into()));
    }
    let classes = models[0].classes();
    if models.iter().any(|m| m.classes() != classes) {
        return Err(CkbError::Input(
            "ensemble models disagree on class count".into(),
        ));
    }
    if examples.is_empty() {
        return Err(CkbError::Input("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    for (tokens, label) in examples {
        let mut mean_probs = vec![0.0f64; classes];
        for model in models {
            let logits = model.logits(tokens)?;
            let row = logits.data();
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut exps: Vec<f64> = row.iter().map(|&v| ((v - mx) as f64).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for e in exps.iter_mut() {
                *e /= sum;
            }
            for (m, e) in mean_probs.iter_mut().zip(&exps) {
                *m += e / models.len() as f64;
            }
        }
        let probs_f32: Vec<f32> = mean_probs.iter().map(|&v| v as f32).collect();
        if argmax(&probs_f32) == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}
