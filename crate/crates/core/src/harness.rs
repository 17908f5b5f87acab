//! Config-driven experiment orchestration: the pipelines behind the `ckb`
//! binary. Each command reads one config, derives every random stream from
//! the config seed, and writes checkpoints, a metrics CSV, and a summary
//! file of `key = value` lines into the output directory.

use std::path::{Path, PathBuf};

use crate::checkpoint::{find, load_checkpoint, save_checkpoint};
use crate::config::{DataKind, RunConfig};
use crate::data::{gen_synthetic, load_tsv_splits, DatasetSplits};
use crate::error::{CkbError, Result};
use crate::interface::{bind_global_interface, bind_local_interface, InterfaceParams};
use crate::kb::{kb_handle, KbConfig, KbHandle, KnowledgeBase};
use crate::metrics::{MetricsRow, MetricsWriter};
use crate::models::{Arch, Model, ModelConfig, SignatureLevel};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::training::{accuracy, ensemble_accuracy, fit_head_on_frozen_encoder, train_classifier, TrainOpts};
use crate::transfer::{
    export_to, import_multi, import_single, kd_via_ckb, select_checkpoint, tl_via_ckb, Direction,
    ExportOutcome, ProbeSet, TransferTask,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Import,
    Export,
    Roundtrip,
    Fuse,
    Kd,
    Tl,
    Eval,
}

impl Command {
    pub fn parse(s: &str) -> Result<Command> {
        match s {
            "train" => Ok(Command::Train),
            "import" => Ok(Command::Import),
            "export" => Ok(Command::Export),
            "roundtrip" => Ok(Command::Roundtrip),
            "fuse" => Ok(Command::Fuse),
            "kd" => Ok(Command::Kd),
            "tl" => Ok(Command::Tl),
            "eval" => Ok(Command::Eval),
            other => Err(CkbError::Config(format!("unknown command '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Import => "import",
            Command::Export => "export",
            Command::Roundtrip => "roundtrip",
            Command::Fuse => "fuse",
            Command::Kd => "kd",
            Command::Tl => "tl",
            Command::Eval => "eval",
        }
    }
}

pub type Summary = Vec<(String, String)>;

const VALID_EVAL_CAP: usize = 160;

/// Run one pipeline. Writes `metrics.csv`, `summary.txt`, and any
/// checkpoints under `cfg.out`; returns the summary pairs.
pub fn cmd_run(command: Command, cfg: &RunConfig) -> Result<Summary> {
    std::fs::create_dir_all(&cfg.out)
        .map_err(|e| CkbError::Io(format!("{}: {e}", cfg.out.display())))?;
    let mut metrics = MetricsWriter::create(&cfg.out.join("metrics.csv"))?;
    let mut sink = move |row: MetricsRow| metrics.write(&row);
    let mut summary: Summary = vec![
        ("command".into(), command.as_str().into()),
        ("seed".into(), cfg.seed.to_string()),
    ];
    let started = std::time::Instant::now();

    match command {
        Command::Train => cmd_train(cfg, &mut sink, &mut summary)?,
        Command::Import => cmd_import(cfg, &mut sink, &mut summary)?,
        Command::Export => cmd_export(cfg, &mut sink, &mut summary)?,
        Command::Roundtrip => cmd_roundtrip(cfg, &mut sink, &mut summary)?,
        Command::Fuse => cmd_fuse(cfg, &mut sink, &mut summary)?,
        Command::Kd => cmd_kd(cfg, &mut sink, &mut summary)?,
        Command::Tl => cmd_tl(cfg, &mut sink, &mut summary)?,
        Command::Eval => cmd_eval(cfg, &mut sink, &mut summary)?,
    }

    eprintln!(
        "[ckb] {} finished in {:.1}s",
        command.as_str(),
        started.elapsed().as_secs_f64()
    );
    write_summary(&cfg.out.join("summary.txt"), &summary)?;
    Ok(summary)
}

fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    let mut text = String::new();
    for (k, v) in summary {
        text.push_str(k);
        text.push_str(" = ");
        text.push_str(v);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| CkbError::Io(format!("{}: {e}", path.display())))
}

fn push_num(summary: &mut Summary, key: &str, v: f64) {
    summary.push((key.to_string(), format!("{v:.6}")));
}

// ── data plumbing ───────────────────────────────────────────────────

fn text_data(cfg: &RunConfig) -> Result<DatasetSplits> {
    match cfg.data.kind {
        DataKind::Synthetic => {
            let seed = SeededRng::new(cfg.seed).split("data").seed();
            gen_synthetic(&cfg.data.synthetic_spec(seed))
        }
        DataKind::Tsv => {
            let (splits, _) = load_tsv_splits(
                &PathBuf::from(&cfg.data.train_tsv),
                &PathBuf::from(&cfg.data.valid_tsv),
                &PathBuf::from(&cfg.data.test_tsv),
                cfg.model.classes,
                cfg.data.vocab_size,
                cfg.data.max_len,
            )?;
            Ok(splits)
        }
        DataKind::Vectors => Err(CkbError::Config(
            "this command needs token data, not vectors".into(),
        )),
    }
}

fn vector_probes(cfg: &RunConfig) -> Result<(ProbeSet, ProbeSet)> {
    let mut rng = SeededRng::new(cfg.seed).split("data");
    let d = cfg.model.d_in;
    let n = cfg.data.examples;
    let make = |rng: &mut SeededRng, count: usize| -> Result<Vec<Tensor>> {
        (0..count)
            .map(|_| Tensor::matrix(1, d, rng.uniform_vec(d, 1.0)))
            .collect()
    };
    let train = make(&mut rng, n)?;
    let heldout = make(&mut rng, cfg.budgets.heldout.max(1))?;
    Ok((ProbeSet::Vectors(train), ProbeSet::Vectors(heldout)))
}

fn probe_sets(cfg: &RunConfig, splits: &DatasetSplits) -> (ProbeSet, ProbeSet, Vec<(Vec<usize>, usize)>) {
    let cap = cfg.budgets.probe_sequences.max(1);
    let train_texts: Vec<Vec<usize>> = splits
        .train
        .examples
        .iter()
        .take(cap)
        .map(|(t, _)| t.clone())
        .collect();
    let heldout_texts: Vec<Vec<usize>> = splits
        .valid
        .examples
        .iter()
        .take(cfg.budgets.heldout.max(1))
        .map(|(t, _)| t.clone())
        .collect();
    let valid_rows: Vec<(Vec<usize>, usize)> = splits
        .valid
        .examples
        .iter()
        .take(VALID_EVAL_CAP)
        .cloned()
        .collect();
    (
        ProbeSet::Text(train_texts),
        ProbeSet::Text(heldout_texts),
        valid_rows,
    )
}

// ── model checkpoints ───────────────────────────────────────────────

fn arch_id(a: Arch) -> f32 {
    match a {
        Arch::Ffn => 0.0,
        Arch::Gru => 1.0,
        Arch::Cnn => 2.0,
        Arch::Encoder => 3.0,
    }
}

fn arch_from_id(v: f32) -> Result<Arch> {
    match v as i64 {
        0 => Ok(Arch::Ffn),
        1 => Ok(Arch::Gru),
        2 => Ok(Arch::Cnn),
        3 => Ok(Arch::Encoder),
        other => Err(CkbError::Input(format!("unknown arch id {other}"))),
    }
}

fn model_meta(cfg: &ModelConfig) -> Tensor {
    Tensor::vector(vec![
        arch_id(cfg.arch),
        cfg.vocab_size as f32,
        cfg.d_e as f32,
        cfg.d_h as f32,
        cfg.f_maps as f32,
        cfg.d_ff as f32,
        cfg.classes as f32,
        cfg.max_len as f32,
        if cfg.positional { 1.0 } else { 0.0 },
        cfg.d_in as f32,
        cfg.d_out as f32,
    ])
}

fn model_config_from_meta(meta: &Tensor) -> Result<ModelConfig> {
    let d = meta.data();
    if d.len() != 11 {
        return Err(CkbError::Input(format!(
            "model meta has {} fields, expected 11",
            d.len()
        )));
    }
    Ok(ModelConfig {
        arch: arch_from_id(d[0])?,
        vocab_size: d[1] as usize,
        d_e: d[2] as usize,
        d_h: d[3] as usize,
        f_maps: d[4] as usize,
        d_ff: d[5] as usize,
        classes: d[6] as usize,
        max_len: d[7] as usize,
        positional: d[8] != 0.0,
        d_in: d[9] as usize,
        d_out: d[10] as usize,
    })
}

fn model_config_of(model: &Model) -> ModelConfig {
    match model {
        Model::Ffn(m) => ModelConfig {
            arch: Arch::Ffn,
            d_in: m.d_in,
            d_h: m.d_h,
            d_out: m.d_out,
            ..ModelConfig::default()
        },
        Model::Gru(m) => ModelConfig {
            arch: Arch::Gru,
            vocab_size: m.embedding.shape()[0],
            d_e: m.d_e,
            d_h: m.d_h,
            classes: m.head.classes(),
            ..ModelConfig::default()
        },
        Model::Cnn(m) => ModelConfig {
            arch: Arch::Cnn,
            vocab_size: m.embedding.shape()[0],
            d_e: m.d_e,
            f_maps: m.f_maps,
            classes: m.head.classes(),
            ..ModelConfig::default()
        },
        Model::Encoder(m) => ModelConfig {
            arch: Arch::Encoder,
            vocab_size: m.embedding.shape()[0],
            d_e: m.d_h,
            d_h: m.d_h,
            d_ff: m.d_ff,
            classes: m.head.classes(),
            max_len: m.max_len,
            positional: m.use_positional,
            ..ModelConfig::default()
        },
    }
}

fn push_model_entries<'a>(
    model: &'a Model,
    meta: &'a Tensor,
    prefix: &str,
    entries: &mut Vec<(String, &'a Tensor)>,
) {
    entries.push((format!("{prefix}/meta"), meta));
    for (name, t) in model.param_names().iter().zip(model.params()) {
        entries.push((format!("{prefix}/{name}"), t));
    }
}

pub fn save_model_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let meta = model_meta(&model_config_of(model));
    let mut entries = Vec::new();
    push_model_entries(model, &meta, "model", &mut entries);
    save_checkpoint(&entries, path)
}

fn load_model_from(entries: &[(String, Tensor)], prefix: &str) -> Result<Model> {
    let meta = find(entries, &format!("{prefix}/meta"))?;
    let cfg = model_config_from_meta(meta)?;
    let mut rng = SeededRng::new(0);
    let mut model = Model::build(&cfg, &mut rng)?;
    let names = model.param_names();
    for (name, param) in names.iter().zip(model.params_mut()) {
        let stored = find(entries, &format!("{prefix}/{name}"))?;
        if stored.shape() != param.shape() {
            return Err(CkbError::Input(format!(
                "checkpoint entry '{prefix}/{name}' has shape {:?}, expected {:?}",
                stored.shape(),
                param.shape()
            )));
        }
        let flag = param.requires_grad;
        *param = stored.clone();
        param.requires_grad = flag;
    }
    Ok(model)
}

pub fn load_model_checkpoint(path: &Path) -> Result<Model> {
    let entries = load_checkpoint(path)?;
    load_model_from(&entries, "model")
}

// ── knowledge-base checkpoints ──────────────────────────────────────

fn iface_meta(iface: &InterfaceParams) -> Tensor {
    Tensor::vector(vec![
        match iface.signature.level {
            SignatureLevel::Global => 0.0,
            SignatureLevel::Local => 1.0,
        },
        iface.signature.d_in as f32,
        iface.signature.d_out as f32,
        iface.d_m as f32,
    ])
}

fn push_iface_entries<'a>(
    iface: &'a InterfaceParams,
    meta: &'a Tensor,
    prefix: &str,
    entries: &mut Vec<(String, &'a Tensor)>,
) {
    entries.push((format!("{prefix}/meta"), meta));
    for (name, t) in iface.param_names(prefix).iter().zip(iface.params()) {
        entries.push((name.clone(), t));
    }
}

fn load_iface_from(entries: &[(String, Tensor)], prefix: &str, name: &str) -> Result<InterfaceParams> {
    let meta = find(entries, &format!("{prefix}/meta"))?;
    let d = meta.data();
    if d.len() != 4 {
        return Err(CkbError::Input("bad interface meta".into()));
    }
    let level = if d[0] == 0.0 {
        SignatureLevel::Global
    } else {
        SignatureLevel::Local
    };
    let sig = crate::models::ModelSignature::new(name, level, d[1] as usize, d[2] as usize)?;
    let d_m = d[3] as usize;
    let mut rng = SeededRng::new(0);
    let mut iface = match level {
        SignatureLevel::Global => bind_global_interface(&sig, d_m, &mut rng)?,
        SignatureLevel::Local => bind_local_interface(&sig, d_m, &mut rng)?,
    };
    let names = iface.param_names(prefix);
    for (pname, param) in names.iter().zip(iface.params_mut()) {
        let stored = find(entries, pname)?;
        let flag = param.requires_grad;
        *param = stored.clone();
        param.requires_grad = flag;
    }
    Ok(iface)
}

fn kb_meta(cfg: KbConfig) -> Tensor {
    Tensor::vector(vec![
        cfg.k as f32,
        cfg.r_l as f32,
        cfg.r_h as f32,
        cfg.d_m as f32,
    ])
}

/// Save an imported (kb, interface, frozen source model) triple.
pub fn save_kb_checkpoint(
    kb: &KnowledgeBase,
    iface: &InterfaceParams,
    source: &Model,
    path: &Path,
) -> Result<()> {
    let kbm = kb_meta(kb.config());
    let ifm = iface_meta(iface);
    let mm = model_meta(&model_config_of(source));
    let mut entries: Vec<(String, &Tensor)> = vec![("ckb/meta".into(), &kbm)];
    for (name, t) in kb.param_names().iter().zip(kb.params()) {
        entries.push((name.clone(), t));
    }
    push_iface_entries(iface, &ifm, "iface", &mut entries);
    push_model_entries(source, &mm, "source", &mut entries);
    save_checkpoint(&entries, path)
}

pub fn load_kb_checkpoint(path: &Path) -> Result<(KnowledgeBase, InterfaceParams, Model)> {
    let entries = load_checkpoint(path)?;
    let meta = find(&entries, "ckb/meta")?;
    let d = meta.data();
    let cfg = KbConfig::new(d[0] as usize, d[1] as usize, d[2] as usize, d[3] as usize)?;
    let mut rng = SeededRng::new(0);
    let mut kb = KnowledgeBase::init(cfg, &mut rng);
    for (name, param) in kb.param_names().iter().zip(kb.params_mut()) {
        let stored = find(&entries, name)?;
        let flag = param.requires_grad;
        *param = stored.clone();
        param.requires_grad = flag;
    }
    let source = load_model_from(&entries, "source")?;
    let iface = load_iface_from(&entries, "iface", source.arch().as_str())?;
    Ok((kb, iface, source))
}

// ── shared pipeline pieces ──────────────────────────────────────────

type Sink<'a> = &'a mut dyn FnMut(MetricsRow) -> Result<()>;

fn require_path(s: &str, what: &str) -> Result<PathBuf> {
    if s.is_empty() {
        return Err(CkbError::Config(format!("io.{what} is required")));
    }
    let p = PathBuf::from(s);
    if !p.exists() {
        return Err(CkbError::Io(format!("{}: not found", p.display())));
    }
    Ok(p)
}

fn bind_for(model: &Model, d_m: usize, rng: &mut SeededRng) -> Result<InterfaceParams> {
    let sig = model.signature();
    match sig.level {
        SignatureLevel::Global => bind_global_interface(&sig, d_m, rng),
        SignatureLevel::Local => bind_local_interface(&sig, d_m, rng),
    }
}

fn train_source_model(
    cfg: &RunConfig,
    model_cfg: &ModelConfig,
    splits: &DatasetSplits,
    label: &str,
    sink: Sink<'_>,
) -> Result<Model> {
    let mut model = Model::build(model_cfg, &mut SeededRng::new(cfg.seed).split(label))?;
    let opts = TrainOpts {
        steps: cfg.budgets.train_steps,
        eval_every: cfg.budgets.eval_every,
        tokens_per_batch: cfg.budgets.tokens_per_batch,
        optimizer: cfg.optim.adamw(cfg.optim.lr_baseline),
        seed: SeededRng::new(cfg.seed).split(&format!("{label}/batches")).seed(),
    };
    train_classifier(&mut model, &splits.train, &splits.valid, &opts, sink)?;
    Ok(model)
}

fn source_model(
    cfg: &RunConfig,
    ckpt: &str,
    model_cfg: &ModelConfig,
    splits: &DatasetSplits,
    label: &str,
    sink: Sink<'_>,
) -> Result<Model> {
    if ckpt.is_empty() {
        train_source_model(cfg, model_cfg, splits, label, sink)
    } else {
        load_model_checkpoint(&require_path(ckpt, "model_ckpt")?)
    }
}

fn import_opts(cfg: &RunConfig) -> crate::transfer::ImportOpts {
    crate::transfer::ImportOpts {
        steps: cfg.budgets.import_steps,
        eval_every: cfg.budgets.eval_every,
        tokens_per_batch: cfg.budgets.tokens_per_batch,
        vector_batch: cfg.budgets.vector_batch,
        optimizer: cfg.optim.adamw(cfg.optim.lr_import),
        seed: cfg.seed,
    }
}

fn export_opts(cfg: &RunConfig) -> crate::transfer::ExportOpts {
    crate::transfer::ExportOpts {
        steps: cfg.budgets.export_steps,
        eval_every: cfg.budgets.eval_every,
        batch: 16,
        optimizer: cfg.optim.adamw(cfg.optim.lr_export),
        seed: cfg.seed,
    }
}

/// Export from a frozen (kb, iface, source) into a fresh target model,
/// then fit the target's head on labels.
#[allow(clippy::too_many_arguments)]
fn export_and_head(
    cfg: &RunConfig,
    kb: KbHandle,
    iface: InterfaceParams,
    source: Model,
    target_cfg: &ModelConfig,
    splits: &DatasetSplits,
    label: &str,
    sink: Sink<'_>,
) -> Result<(Model, ExportOutcome)> {
    let (train_probes, heldout_probes, _) = probe_sets(cfg, splits);
    let task = TransferTask::new(
        label,
        source,
        iface,
        kb,
        train_probes,
        heldout_probes,
        Direction::Export,
    )?;
    let mut target = Model::build(target_cfg, &mut SeededRng::new(cfg.seed).split(&format!("{label}/target")))?;
    let outcome = export_to(&task, &mut target, &export_opts(cfg), sink)?;
    let head_rows: Vec<(Vec<usize>, usize)> = splits.train.examples.clone();
    fit_head_on_frozen_encoder(
        &mut target,
        &head_rows,
        target_cfg.classes,
        cfg.budgets.head_steps,
        cfg.optim.adamw(cfg.optim.lr_head),
        SeededRng::new(cfg.seed).split(&format!("{label}/head")).seed(),
    )?;
    Ok((target, outcome))
}

// ── commands ────────────────────────────────────────────────────────

fn cmd_train(cfg: &RunConfig, sink: Sink<'_>, summary: &mut Summary) -> Result<()> {
    let splits = text_data(cfg)?;
    let mut model = Model::build(&cfg.model, &mut SeededRng::new(cfg.seed).split("model"))?;
    let opts = TrainOpts {
        steps: cfg.budgets.train_steps,
        eval_every: cfg.budgets.eval_every,
        tokens_per_batch: cfg.budgets.tokens_per_batch,
        optimizer: cfg.optim.adamw(cfg.optim.lr_baseline),
        seed: SeededRng::new(cfg.seed).split("model/batches").seed(),
    };
    let outcome = train_classifier(&mut model, &splits.train, &splits.valid, &opts, sink)?;
    let test_acc = accuracy(&model, &splits.test.examples)?;
    save_model_checkpoint(&model, &cfg.out.join("model.ckpt"))?;
    summary.push(("arch".into(), model.arch().as_str().into()));
    summary.push(("model_params".into(), model.count_params().to_string()));
    push_num(summary, "valid_accuracy", outcome.best_valid_accuracy);
    push_num(summary, "test_accuracy", test_acc);
    Ok(())
}

fn cmd_import(cfg: &RunConfig, sink: Sink<'_>, summary: &mut Summary) -> Result<()> {
    let kb_cfg = cfg.ckb.kb_config()?;
    let (model, outcome, task) = if cfg.model.arch == Arch::Ffn {
        let (train, heldout) = vector_probes(cfg)?;
        let model = if cfg.io.model_ckpt.is_empty() {
            Model::build(&cfg.model, &mut SeededRng::new(cfg.seed).split("model"))?
        } else {
            load_model_checkpoint(&require_path(&cfg.io.model_ckpt, "model_ckpt")?)?
        };
        let kb = kb_handle(KnowledgeBase::init(kb_cfg, &mut SeededRng::new(cfg.seed).split("kb")));
        let iface = bind_for(&model, kb_cfg.d_m, &mut SeededRng::new(cfg.seed).split("iface"))?;
        let mut task = TransferTask::new(
            "import",
            model.clone(),
            iface,
            kb,
            train,
            heldout,
            Direction::Import,
        )?;
        let outcome = import_single(&mut task, &import_opts(cfg), sink)?;
        (model, outcome, task)
    } else {
        let splits = text_data(cfg)?;
        let model = source_model(cfg, &cfg.io.model_ckpt, &cfg.model, &splits, "model", sink)?;
        let (train, heldout, valid) = probe_sets(cfg, &splits);
        let kb = kb_handle(KnowledgeBase::init(kb_cfg, &mut SeededRng::new(cfg.seed).split("kb")));
        let iface = bind_for(&model, kb_cfg.d_m, &mut SeededRng::new(cfg.seed).split("iface"))?;
        let mut task = TransferTask::new(
            "import",
            model.clone(),
            iface,
            kb,
            train,
            heldout,
            Direction::Import,
        )?
        .with_valid(valid);
        let outcome = import_single(&mut task, &import_opts(cfg), sink)?;
        (model, outcome, task)
    };

    let hash_before = model.content_hash();
    if task.model.content_hash() != hash_before {
        return Err(CkbError::State("model changed during import".into()));
    }
    let report = &outcome.final_fidelity[0];
    {
        let kb = task.kb.read().expect("kb lock poisoned");
        save_kb_checkpoint(&kb, &task.interface, &task.model, &cfg.out.join("kb.ckpt"))?;
        summary.push(("ckb_params".into(), kb.param_count().to_string()));
    }
    summary.push(("iface_params".into(), task.interface.param_count().to_string()));
    push_num(summary, "heldout_fidelity", report.mean);
    push_num(summary, "fidelity_p50", report.quantile(0.5));
    push_num(summary, "fidelity_p90", report.quantile(0.9));
    summary.push(("fidelity_examples".into(), report.examples.to_string()));
    summary.push(("fidelity_degenerate".into(), report.degenerate.to_string()));
    Ok(())
}

fn cmd_export(cfg: &RunConfig, sink: Sink<'_>, summary: &mut Summary) -> Result<()> {
    let (kb, iface, source) = load_kb_checkpoint(&require_path(&cfg.io.kb_ckpt, "kb_ckpt")?)?;
    let kb = kb_handle(kb);
    if source.arch() == Arch::Ffn {
        let (train, heldout) = vector_probes(cfg)?;
        let task = TransferTask::new(
            "export",
            source,
            iface,
            kb,
            train,
            heldout,
            Direction::Export,
        )?;
        let mut target = Model::build(
            &ModelConfig {
                arch: Arch::Ffn,
                ..cfg.target.clone()
            },
            &mut SeededRng::new(cfg.seed).split("export/target"),
        )?;
        let outcome = export_to(&task, &mut target, &export_opts(cfg), sink)?;
        save_model_checkpoint(&target, &cfg.out.join("model.ckpt"))?;
        push_num(summary, "export_initial_distance", outcome.initial_distance);
        push_num(summary, "export_final_distance", outcome.final_distance);
        return Ok(());
    }
    let splits = text_data(cfg)?;
    let (target, outcome) = export_and_head(
        cfg,
        kb,
        iface,
        source,
        &cfg.target,
        &splits,
        "export",
        sink,
    )?;
    let test_acc = accuracy(&target, &splits.test.examples)?;
    save_model_checkpoint(&target, &cfg.out.join("model.ckpt"))?;
    summary.push(("target_arch".into(), target.arch().as_str().into()));
    push_num(summary, "export_initial_distance", outcome.initial_distance);
    push_num(summary, "export_final_distance", outcome.final_distance);
    push_num(summary, "exported_accuracy", test_acc);
    Ok(())
}

fn cmd_roundtrip(cfg: &RunConfig, sink: Sink<'_>, summary: &mut Summary) -> Result<()> {
    let splits = text_data(cfg)?;
    let source = source_model(cfg, &cfg.io.model_ckpt, &cfg.model, &splits, "model", sink)?;
    let original_acc = accuracy(&source, &splits.test.examples)?;
    save_model_checkpoint(&source, &cfg.out.join("source.ckpt"))?;

    let kb_cfg = cfg.ckb.kb_config()?;
    let (train, heldout, valid) = probe_sets(cfg, &splits);
    let kb = kb_handle(KnowledgeBase::init(kb_cfg, &mut SeededRng::new(cfg.seed).split("kb")));
    let iface = bind_for(&source, kb_cfg.d_m, &mut SeededRng::new(cfg.seed).split("iface"))?;
    let source_hash = source.content_hash();
    let mut task = TransferTask::new(
        "roundtrip",
        source,
        iface,
        kb.clone(),
        train,
        heldout,
        Direction::Import,
    )?
    .with_valid(valid);
    let import_outcome = import_single(&mut task, &import_opts(cfg), sink)?;
    if task.model.content_hash() != source_hash {
        return Err(CkbError::State("model changed during import".into()));
    }
    {
        let kb_read = kb.read().expect("kb lock poisoned");
        save_kb_checkpoint(&kb_read, &task.interface, &task.model, &cfg.out.join("kb.ckpt"))?;
    }

    let kb_hash = kb.read().expect("kb lock poisoned").content_hash();
    let iface_hash = task.interface.content_hash();
    let (target, export_outcome) = export_and_head(
        cfg,
        kb.clone(),
        task.interface.clone(),
        task.model.clone(),
        &cfg.target,
        &splits,
        "roundtrip-export",
        sink,
    )?;
    if kb.read().expect("kb lock poisoned").content_hash() != kb_hash {
        return Err(CkbError::State("kb changed during export".into()));
    }
    if task.interface.content_hash() != iface_hash {
        return Err(CkbError::State("interface changed during export".into()));
    }
    let exported_acc = accuracy(&target, &splits.test.examples)?;
    save_model_checkpoint(&target, &cfg.out.join("exported.ckpt"))?;

    push_num(summary, "original_accuracy", original_acc);
    push_num(summary, "exported_accuracy", exported_acc);
    push_num(summary, "accuracy_diff", exported_acc - original_acc);
    push_num(
        summary,
        "import_fidelity",
        import_outcome.final_fidelity[0].mean,
    );
    push_num(summary, "export_final_distance", export_outcome.final_distance);
    Ok(())
}

fn cmd_fuse(cfg: &RunConfig, sink: Sink<'_>, summary: &mut Summary) -> Result<()> {
    let splits = text_data(cfg)?;
    let source_a = source_model(cfg, &cfg.io.model_ckpt, &cfg.model, &splits, "model", sink)?;
    let source_b = source_model(cfg, &cfg.io.model2_ckpt, &cfg.model2, &splits, "model2", sink)?;
    let acc_a = accuracy(&source_a, &splits.test.examples)?;
    let acc_b = accuracy(&source_b, &splits.test.examples)?;
    let ensemble = ensemble_accuracy(&[&source_a, &source_b], &splits.test.examples)?;

    let kb_cfg = cfg.ckb.kb_config()?;
    let kb = kb_handle(KnowledgeBase::init(kb_cfg, &mut SeededRng::new(cfg.seed).split("kb")));
    let (train_a, heldout_a, valid_a) = probe_sets(cfg, &splits);
    let (train_b, heldout_b, valid_b) = probe_sets(cfg, &splits);
    let iface_a = bind_for(&source_a, kb_cfg.d_m, &mut SeededRng::new(cfg.seed).split("iface"))?;
    let iface_b = bind_for(&source_b, kb_cfg.d_m, &mut SeededRng::new(cfg.seed).split("iface2"))?;
    let mut tasks = vec![
        TransferTask::new(
            &format!("fuse/{}", source_a.arch().as_str()),
            source_a,
            iface_a,
            kb.clone(),
            train_a,
            heldout_a,
            Direction::Import,
        )?
        .with_valid(valid_a),
        TransferTask::new(
            &format!("fuse/{}", source_b.arch().as_str()),
            source_b,
            iface_b,
            kb.clone(),
            train_b,
            heldout_b,
            Direction::Import,
        )?
        .with_valid(valid_b),
    ];
    let outcome = import_multi(&mut tasks, &import_opts(cfg), sink)?;

    // Appendix-style max-min checkpoint choice over the joint grid.
    let chosen = select_checkpoint(&outcome.grid)?;
    outcome.snapshots.restore(chosen, &mut tasks)?;
    summary.push(("checkpoint_index".into(), chosen.to_string()));
    summary.push((
        "checkpoint_step".into(),
        outcome.snapshots.step_of(chosen).to_string(),
    ));

    // Export from the task matching the target architecture; fall back to
    // the first task when neither matches.
    let idx = tasks
        .iter()
        .position(|t| t.model.arch() == cfg.target.arch)
        .unwrap_or(0);
    let task = &tasks[idx];
    let (target, export_outcome) = export_and_head(
        cfg,
        kb.clone(),
        task.interface.clone(),
        task.model.clone(),
        &cfg.target,
        &splits,
        "fuse-export",
        sink,
    )?;
    let exported_acc = accuracy(&target, &splits.test.examples)?;
    save_model_checkpoint(&target, &cfg.out.join("exported.ckpt"))?;
    {
        let kb_read = kb.read().expect("kb lock poisoned");
        save_kb_checkpoint(&kb_read, &task.interface, &task.model, &cfg.out.join("kb.ckpt"))?;
    }

    push_num(summary, "source_accuracy_1", acc_a);
    push_num(summary, "source_accuracy_2", acc_b);
    push_num(summary, "ensemble_accuracy", ensemble);
    push_num(summary, "exported_accuracy", exported_acc);
    push_num(summary, "min_source_accuracy", acc_a.min(acc_b));
    push_num(summary, "max_source_accuracy", acc_a.max(acc_b));
    summary.push((
        "exceeds_best_single".into(),
        (exported_acc > acc_a.max(acc_b)).to_string(),
    ));
    push_num(summary, "export_final_distance", export_outcome.final_distance);
    Ok(())
}

fn cmd_kd(cfg: &RunConfig, sink: Sink<'_>, summary: &mut Summary) -> Result<()> {
    let splits = text_data(cfg)?;
    let teacher = source_model(cfg, &cfg.io.model_ckpt, &cfg.model, &splits, "model", sink)?;
    let teacher_acc = accuracy(&teacher, &splits.test.examples)?;

    let student_cfg = ModelConfig {
        d_h: cfg.kd_student_d_h,
        ..cfg.model.clone()
    };
    let (train, heldout, _) = probe_sets(cfg, &splits);
    let mut outcome = kd_via_ckb(
        &teacher,
        &student_cfg,
        train,
        heldout,
        cfg.ckb.kb_config()?,
        &import_opts(cfg),
        &export_opts(cfg),
        cfg.seed,
        sink,
    )?;
    fit_head_on_frozen_encoder(
        &mut outcome.student,
        &splits.train.examples,
        student_cfg.classes,
        cfg.budgets.head_steps,
        cfg.optim.adamw(cfg.optim.lr_head),
        SeededRng::new(cfg.seed).split("kd/head").seed(),
    )?;
    let kd_acc = accuracy(&outcome.student, &splits.test.examples)?;
    save_model_checkpoint(&outcome.student, &cfg.out.join("student.ckpt"))?;

    // Direct baseline: the same-size student trained on labels.
    let mut direct = Model::build(&student_cfg, &mut SeededRng::new(cfg.seed).split("kd/direct"))?;
    let opts = TrainOpts {
        steps: cfg.budgets.train_steps,
        eval_every: cfg.budgets.eval_every,
        tokens_per_batch: cfg.budgets.tokens_per_batch,
        optimizer: cfg.optim.adamw(cfg.optim.lr_baseline),
        seed: SeededRng::new(cfg.seed).split("kd/direct/batches").seed(),
    };
    train_classifier(&mut direct, &splits.train, &splits.valid, &opts, sink)?;
    let direct_acc = accuracy(&direct, &splits.test.examples)?;
    save_model_checkpoint(&direct, &cfg.out.join("direct.ckpt"))?;

    push_num(summary, "teacher_accuracy", teacher_acc);
    push_num(summary, "kd_student_accuracy", kd_acc);
    push_num(summary, "direct_student_accuracy", direct_acc);
    push_num(summary, "kd_vs_direct", kd_acc - direct_acc);
    push_num(summary, "import_fidelity", outcome.import_fidelity.mean);
    push_num(summary, "export_final_distance", outcome.export_final_distance);
    Ok(())
}

fn cmd_tl(cfg: &RunConfig, sink: Sink<'_>, summary: &mut Summary) -> Result<()> {
    // Source task: same generator, different seed, full labels.
    let source_seed = SeededRng::new(cfg.seed).split("tl/source-data").seed();
    let source_splits = gen_synthetic(&cfg.data.synthetic_spec(source_seed))?;
    let encoder_cfg = ModelConfig {
        arch: Arch::Encoder,
        ..cfg.model.clone()
    };
    let pretrained = train_source_model(cfg, &encoder_cfg, &source_splits, "tl/pretrain", sink)?;

    // Target task: unlabeled text for the import, few labels for tuning.
    let target_splits = text_data(cfg)?;
    let (train_probes, heldout_probes, _) = probe_sets(cfg, &target_splits);
    let unlabeled = match train_probes {
        ProbeSet::Text(t) => t,
        _ => unreachable!("text pipeline"),
    };
    let heldout = match heldout_probes {
        ProbeSet::Text(t) => t,
        _ => unreachable!("text pipeline"),
    };
    let labeled: Vec<(Vec<usize>, usize)> = target_splits
        .train
        .examples
        .iter()
        .take(cfg.tl_labeled)
        .cloned()
        .collect();

    let outcome = tl_via_ckb(
        &pretrained,
        unlabeled,
        heldout,
        &labeled,
        &target_splits.test.examples,
        cfg.model.classes,
        cfg.ckb.kb_config()?,
        &import_opts(cfg),
        cfg.budgets.head_steps,
        cfg.optim.adamw(cfg.optim.lr_head),
        cfg.seed,
        sink,
    )?;

    push_num(summary, "tl_accuracy", outcome.transferred_accuracy);
    push_num(summary, "init_accuracy", outcome.random_init_accuracy);
    push_num(
        summary,
        "tl_margin",
        outcome.transferred_accuracy - outcome.random_init_accuracy,
    );
    push_num(summary, "import_fidelity", outcome.import_fidelity.mean);
    summary.push(("labeled_examples".into(), labeled.len().to_string()));
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, _sink: Sink<'_>, summary: &mut Summary) -> Result<()> {
    let splits = text_data(cfg)?;
    let mut models = Vec::new();
    for (i, path) in [
        &cfg.io.model_ckpt,
        &cfg.io.model2_ckpt,
        &cfg.io.model3_ckpt,
    ]
    .iter()
    .enumerate()
    {
        if !path.is_empty() {
            let model = load_model_checkpoint(&require_path(path, "model_ckpt")?)?;
            let acc = accuracy(&model, &splits.test.examples)?;
            push_num(summary, &format!("accuracy_model{}", i + 1), acc);
            models.push(model);
        }
    }
    if models.is_empty() {
        return Err(CkbError::Config("eval needs at least io.model_ckpt".into()));
    }
    if models.len() >= 2 {
        let refs: Vec<&Model> = models.iter().collect();
        let acc = ensemble_accuracy(&refs, &splits.test.examples)?;
        push_num(summary, "accuracy_ensemble", acc);
    }
    Ok(())
}
