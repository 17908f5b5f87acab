//! Distillation and transfer-learning recipes built from import and export.

use crate::error::{CkbError, Result};
use crate::interface::{bind_global_interface, bind_local_interface, IfaceMode, InterfaceParams};
use crate::kb::{kb_handle, KbConfig, KbHandle, KnowledgeBase};
use crate::models::{argmax, ClassifierHead, Model, ModelConfig, SignatureLevel};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::SeededRng;
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::export::{export_to, ExportOpts};
use super::fidelity::FidelityReport;
use super::import::{import_single, ImportOpts, MetricsSink};
use super::{Direction, ProbeSet, TransferTask};

pub struct KdOutcome {
    pub student: Model,
    pub import_fidelity: FidelityReport,
    pub export_initial_distance: f64,
    pub export_final_distance: f64,
}

/// Knowledge distillation through the base: import the teacher, export to
/// a freshly initialized student. The teacher is never modified.
#[allow(clippy::too_many_arguments)]
pub fn kd_via_ckb(
    teacher: &Model,
    student_cfg: &ModelConfig,
    train: ProbeSet,
    heldout: ProbeSet,
    kb_cfg: KbConfig,
    import_opts: &ImportOpts,
    export_opts: &ExportOpts,
    seed: u64,
    sink: MetricsSink<'_>,
) -> Result<KdOutcome> {
    if teacher.classes() != student_cfg.classes {
        return Err(CkbError::Binding(format!(
            "teacher has {} classes, student config has {}",
            teacher.classes(),
            student_cfg.classes
        )));
    }
    let teacher_hash = teacher.content_hash();
    let root = SeededRng::new(seed);
    let kb = kb_handle(KnowledgeBase::init(kb_cfg, &mut root.split("kd/kb")));
    let sig = teacher.signature();
    let iface = match sig.level {
        SignatureLevel::Local => bind_local_interface(&sig, kb_cfg.d_m, &mut root.split("kd/iface"))?,
        SignatureLevel::Global => {
            bind_global_interface(&sig, kb_cfg.d_m, &mut root.split("kd/iface"))?
        }
    };
    let mut task = TransferTask::new(
        "kd",
        teacher.clone(),
        iface,
        kb.clone(),
        train,
        heldout,
        Direction::Import,
    )?;
    let import_outcome = import_single(&mut task, import_opts, sink)?;
    if teacher.content_hash() != teacher_hash {
        return Err(CkbError::State("teacher changed during import".into()));
    }

    let mut student = Model::build(student_cfg, &mut root.split("kd/student"))?;
    task.direction = Direction::Export;
    let export_outcome = export_to(&task, &mut student, export_opts, sink)?;
    if teacher.content_hash() != teacher_hash {
        return Err(CkbError::State("teacher changed during export".into()));
    }
    Ok(KdOutcome {
        student,
        import_fidelity: import_outcome.final_fidelity.into_iter().next().unwrap(),
        export_initial_distance: export_outcome.initial_distance,
        export_final_distance: export_outcome.final_distance,
    })
}

/// A classifier that reads the knowledge base through an interface:
/// frozen embeddings feed the interface, whose mean-pooled output feeds a
/// linear head. Fine-tuning trains the head and the interface query paths
/// while the base stays frozen.
pub struct CkbClassifier {
    pub kb: KbHandle,
    pub iface: InterfaceParams,
    pub embedding: Tensor,
    pub positional: Option<Tensor>,
    pub head: ClassifierHead,
}

impl CkbClassifier {
    pub fn new(
        kb: KbHandle,
        iface: InterfaceParams,
        embedding: Tensor,
        positional: Option<Tensor>,
        classes: usize,
        rng: &mut SeededRng,
    ) -> CkbClassifier {
        let d = iface.signature.d_out;
        CkbClassifier {
            kb,
            iface,
            embedding,
            positional,
            head: ClassifierHead::new(d, classes, rng),
        }
    }

    fn logits_tensor(&self, tokens: &[usize]) -> Result<Tensor> {
        let kb = self.kb.read().expect("kb lock poisoned");
        let mut tape = Tape::new();
        let ivars = self.iface.watch(&mut tape, IfaceMode::Frozen);
        let kvars = kb.watch(&mut tape, false);
        let table = tape.constant(&self.embedding);
        let emb = tape.embed(table, tokens)?;
        let x = match &self.positional {
            Some(pos) => {
                let pv = tape.constant(pos);
                let sliced = tape.slice_rows(pv, 0, tokens.len())?;
                tape.add(emb, sliced)?
            }
            None => emb,
        };
        let h = self.iface.forward_on(&mut tape, &ivars, &kvars, x)?;
        let pooled = tape.mean_rows(h)?;
        let w = tape.constant(&self.head.w);
        let logits = tape.matmul(pooled, w)?;
        Ok(tape.to_tensor(logits))
    }

    pub fn predict(&self, tokens: &[usize]) -> Result<usize> {
        Ok(argmax(self.logits_tensor(tokens)?.data()))
    }

    pub fn accuracy(&self, examples: &[(Vec<usize>, usize)]) -> Result<f64> {
        if examples.is_empty() {
            return Err(CkbError::Input("empty evaluation set".into()));
        }
        let mut correct = 0usize;
        for (tokens, label) in examples {
            if self.predict(tokens)? == *label {
                correct += 1;
            }
        }
        Ok(correct as f64 / examples.len() as f64)
    }

    /// Supervised fine-tuning on labels: head plus interface query paths
    /// train, everything else (including the base) stays frozen.
    pub fn fit(
        &mut self,
        labeled: &[(Vec<usize>, usize)],
        steps: u64,
        optimizer_cfg: AdamWConfig,
        seed: u64,
    ) -> Result<()> {
        if labeled.is_empty() || steps == 0 {
            return Ok(());
        }
        let mut optimizer = AdamW::new(optimizer_cfg);
        let rng = SeededRng::new(seed).split("ckb-classifier/fit");
        let batch_size = 16.min(labeled.len());
        let mut order: Vec<usize> = (0..labeled.len()).collect();
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

            let kb = self.kb.read().expect("kb lock poisoned");
            let mut tape = Tape::new();
            let ivars = self.iface.watch(&mut tape, IfaceMode::QueryOnly);
            let kvars = kb.watch(&mut tape, false);
            let table = tape.constant(&self.embedding);
            let head_var = tape.param(&self.head.w);
            let mut rows = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &i in batch {
                let (tokens, label) = &labeled[i];
                let emb = tape.embed(table, tokens)?;
                let x = match &self.positional {
                    Some(pos) => {
                        let pv = tape.constant(pos);
                        let sliced = tape.slice_rows(pv, 0, tokens.len())?;
                        tape.add(emb, sliced)?
                    }
                    None => emb,
                };
                let h = self.iface.forward_on(&mut tape, &ivars, &kvars, x)?;
                rows.push(tape.mean_rows(h)?);
                labels.push(*label);
            }
            let stacked = tape.concat_rows(&rows)?;
            let logits = tape.matmul(stacked, head_var)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            tape.backward(loss)?;
            drop(kb);

            let mut params: Vec<&mut Tensor> = self.iface.trainable_mut(IfaceMode::QueryOnly);
            params.push(&mut self.head.w);
            let vars = vec![ivars.w_q1, ivars.w_q2, head_var];
            crate::tape::harvest_all(&tape, &vars, &mut params);
            optimizer.step(&mut params)?;
            AdamW::zero_grads(&mut params);
        }
        Ok(())
    }
}

pub struct TlOutcome {
    pub transferred_accuracy: f64,
    pub random_init_accuracy: f64,
    pub import_fidelity: FidelityReport,
}

/// Transfer learning through the base: import a pretrained encoder from
/// unlabeled text, then fine-tune a frozen-base classifier on labels.
/// The control arm repeats the fine-tuning on a randomly initialized base.
#[allow(clippy::too_many_arguments)]
pub fn tl_via_ckb(
    pretrained: &Model,
    unlabeled: Vec<Vec<usize>>,
    heldout: Vec<Vec<usize>>,
    labeled: &[(Vec<usize>, usize)],
    test: &[(Vec<usize>, usize)],
    classes: usize,
    kb_cfg: KbConfig,
    import_opts: &ImportOpts,
    ft_steps: u64,
    ft_optimizer: AdamWConfig,
    seed: u64,
    sink: MetricsSink<'_>,
) -> Result<TlOutcome> {
    let encoder = match pretrained {
        Model::Encoder(m) => m,
        _ => {
            return Err(CkbError::Binding(
                "transfer learning expects a pretrained encoder model".into(),
            ))
        }
    };
    let root = SeededRng::new(seed);
    let sig = pretrained.signature();

    // Knowledge-transfer phase: unlabeled data only.
    let kb = kb_handle(KnowledgeBase::init(kb_cfg, &mut root.split("tl/kb")));
    let iface = bind_global_interface(&sig, kb_cfg.d_m, &mut root.split("tl/iface"))?;
    let mut task = TransferTask::new(
        "tl",
        pretrained.clone(),
        iface,
        kb.clone(),
        ProbeSet::Text(unlabeled),
        ProbeSet::Text(heldout),
        Direction::Import,
    )?;
    let import_outcome = import_single(&mut task, import_opts, sink)?;

    let embedding = encoder.embedding.clone();
    let positional = encoder
        .use_positional
        .then(|| encoder.positional.clone());

    // Transferred arm: fine-tune on the imported base.
    let mut transferred = CkbClassifier::new(
        kb.clone(),
        task.interface.clone(),
        embedding.clone(),
        positional.clone(),
        classes,
        &mut root.split("tl/head"),
    );
    let kb_hash_before = kb.read().expect("kb lock poisoned").content_hash();
    transferred.fit(labeled, ft_steps, ft_optimizer, seed ^ 0x7f)?;
    let kb_hash_after = kb.read().expect("kb lock poisoned").content_hash();
    if kb_hash_before != kb_hash_after {
        return Err(CkbError::State(
            "knowledge base changed during fine-tuning".into(),
        ));
    }
    let transferred_accuracy = transferred.accuracy(test)?;

    // Control arm: same procedure on a randomly initialized base.
    let random_kb = kb_handle(KnowledgeBase::init(kb_cfg, &mut root.split("tl/random-kb")));
    let random_iface = bind_global_interface(&sig, kb_cfg.d_m, &mut root.split("tl/random-iface"))?;
    let mut control = CkbClassifier::new(
        random_kb,
        random_iface,
        embedding,
        positional,
        classes,
        &mut root.split("tl/head"),
    );
    control.fit(labeled, ft_steps, ft_optimizer, seed ^ 0x7f)?;
    let random_init_accuracy = control.accuracy(test)?;

    Ok(TlOutcome {
        transferred_accuracy,
        random_init_accuracy,
        import_fidelity: import_outcome.final_fidelity.into_iter().next().unwrap(),
    })
}
