//! Flat, line-oriented run configuration: `section.key = value` per line,
//! `#` comments, every field defaulted, unknown keys rejected.
//!
//! The `model2` and `target` sections inherit from the resolved `model`
//! section; only the keys they set differ.

use std::path::{Path, PathBuf};

use crate::data::SyntheticSpec;
use crate::error::{CkbError, Result};
use crate::kb::KbConfig;
use crate::models::{Arch, ModelConfig};
use crate::optim::AdamWConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataKind {
    Synthetic,
    Tsv,
    /// Random vectors for global-function tasks (feed-forward nets).
    Vectors,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub kind: DataKind,
    pub vocab_size: usize,
    pub examples: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub noise: f64,
    pub balance: f64,
    pub pos_cues: usize,
    pub neg_cues: usize,
    pub max_len: usize,
    pub train_tsv: String,
    pub valid_tsv: String,
    pub test_tsv: String,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            kind: DataKind::Synthetic,
            vocab_size: 2000,
            examples: 12_000,
            len_min: 8,
            len_max: 32,
            noise: 0.05,
            balance: 0.5,
            pos_cues: 40,
            neg_cues: 40,
            max_len: 128,
            train_tsv: String::new(),
            valid_tsv: String::new(),
            test_tsv: String::new(),
        }
    }
}

impl DataSection {
    pub fn synthetic_spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            vocab_size: self.vocab_size,
            pos_cues: self.pos_cues,
            neg_cues: self.neg_cues,
            len_min: self.len_min,
            len_max: self.len_max,
            noise: self.noise,
            balance: self.balance,
            examples: self.examples,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetSection {
    pub train_steps: u64,
    pub import_steps: u64,
    pub export_steps: u64,
    pub head_steps: u64,
    pub eval_every: u64,
    pub tokens_per_batch: usize,
    pub heldout: usize,
    pub vector_batch: usize,
    /// Probe sequences drawn from the train split for import/export.
    pub probe_sequences: usize,
}

impl Default for BudgetSection {
    fn default() -> Self {
        BudgetSection {
            train_steps: 600,
            import_steps: 1500,
            export_steps: 1200,
            head_steps: 200,
            eval_every: 100,
            tokens_per_batch: 512,
            heldout: 96,
            vector_batch: 32,
            probe_sequences: 1500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimSection {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lr_baseline: f64,
    pub lr_import: f64,
    pub lr_export: f64,
    pub lr_head: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.01,
            lr_baseline: 1e-3,
            lr_import: 2e-4,
            lr_export: 1e-4,
            lr_head: 1e-2,
        }
    }
}

impl OptimSection {
    pub fn adamw(&self, lr: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CkbSection {
    pub k: usize,
    pub r_l: usize,
    pub r_h: usize,
    pub d_m: usize,
}

impl Default for CkbSection {
    fn default() -> Self {
        CkbSection {
            k: 4,
            r_l: 12,
            r_h: 8,
            d_m: 64,
        }
    }
}

impl CkbSection {
    pub fn kb_config(&self) -> Result<KbConfig> {
        KbConfig::new(self.k, self.r_l, self.r_h, self.d_m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IoSection {
    pub model_ckpt: String,
    pub model2_ckpt: String,
    pub model3_ckpt: String,
    pub kb_ckpt: String,
}

impl Default for IoSection {
    fn default() -> Self {
        IoSection {
            model_ckpt: String::new(),
            model2_ckpt: String::new(),
            model3_ckpt: String::new(),
            kb_ckpt: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataSection,
    pub model: ModelConfig,
    pub model2: ModelConfig,
    pub target: ModelConfig,
    pub ckb: CkbSection,
    pub optim: OptimSection,
    pub budgets: BudgetSection,
    pub io: IoSection,
    /// KD student hidden size.
    pub kd_student_d_h: usize,
    /// Labeled target examples for the transfer-learning recipe.
    pub tl_labeled: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        RunConfig {
            seed: 42,
            out: PathBuf::from("runs/out"),
            data: DataSection::default(),
            model2: ModelConfig {
                arch: Arch::Cnn,
                ..model.clone()
            },
            target: model.clone(),
            model,
            ckb: CkbSection::default(),
            optim: OptimSection::default(),
            budgets: BudgetSection::default(),
            io: IoSection::default(),
            kd_student_d_h: 16,
            tl_labeled: 300,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| CkbError::Config(format!("bad value '{v}' for key '{key}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CkbError::Config(format!("bad boolean '{v}' for key '{key}'"))),
    }
}

fn apply_model_key(m: &mut ModelConfig, key: &str, field: &str, v: &str) -> Result<()> {
    match field {
        "arch" => m.arch = Arch::parse(v)?,
        "d_e" => m.d_e = parse_num(key, v)?,
        "d_h" => m.d_h = parse_num(key, v)?,
        "f_maps" => m.f_maps = parse_num(key, v)?,
        "d_ff" => m.d_ff = parse_num(key, v)?,
        "classes" => m.classes = parse_num(key, v)?,
        "max_len" => m.max_len = parse_num(key, v)?,
        "positional" => m.positional = parse_bool(key, v)?,
        "d_in" => m.d_in = parse_num(key, v)?,
        "d_out" => m.d_out = parse_num(key, v)?,
        _ => return Err(CkbError::Config(format!("unknown key '{key}'"))),
    }
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        // model2/target inherit from the resolved model section, so their
        // raw overrides apply after every model.* line is in.
        let mut model2_raw: Vec<(String, String, String)> = Vec::new();
        let mut target_raw: Vec<(String, String, String)> = Vec::new();
        let mut model2_touched = false;
        let mut target_touched = false;

        for (lineno, raw_line) in text.lines().enumerate() {
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CkbError::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let key = key.trim();
            let v = value.trim();
            match key {
                "seed" => cfg.seed = parse_num(key, v)?,
                "out" => cfg.out = PathBuf::from(v),
                "kd.student_d_h" => cfg.kd_student_d_h = parse_num(key, v)?,
                "tl.labeled" => cfg.tl_labeled = parse_num(key, v)?,
                _ => {
                    let (section, field) = key.split_once('.').ok_or_else(|| {
                        CkbError::Config(format!("unknown key '{key}'"))
                    })?;
                    match section {
                        "data" => match field {
                            "kind" => {
                                cfg.data.kind = match v {
                                    "synthetic" => DataKind::Synthetic,
                                    "tsv" => DataKind::Tsv,
                                    "vectors" => DataKind::Vectors,
                                    other => {
                                        return Err(CkbError::Config(format!(
                                            "unknown data kind '{other}'"
                                        )))
                                    }
                                }
                            }
                            "vocab_size" => cfg.data.vocab_size = parse_num(key, v)?,
                            "examples" => cfg.data.examples = parse_num(key, v)?,
                            "len_min" => cfg.data.len_min = parse_num(key, v)?,
                            "len_max" => cfg.data.len_max = parse_num(key, v)?,
                            "noise" => cfg.data.noise = parse_num(key, v)?,
                            "balance" => cfg.data.balance = parse_num(key, v)?,
                            "pos_cues" => cfg.data.pos_cues = parse_num(key, v)?,
                            "neg_cues" => cfg.data.neg_cues = parse_num(key, v)?,
                            "max_len" => cfg.data.max_len = parse_num(key, v)?,
                            "train_tsv" => cfg.data.train_tsv = v.to_string(),
                            "valid_tsv" => cfg.data.valid_tsv = v.to_string(),
                            "test_tsv" => cfg.data.test_tsv = v.to_string(),
                            _ => return Err(CkbError::Config(format!("unknown key '{key}'"))),
                        },
                        "model" => apply_model_key(&mut cfg.model, key, field, v)?,
                        "model2" => {
                            model2_touched = true;
                            model2_raw.push((key.to_string(), field.to_string(), v.to_string()));
                        }
                        "target" => {
                            target_touched = true;
                            target_raw.push((key.to_string(), field.to_string(), v.to_string()));
                        }
                        "ckb" => match field {
                            "k" => cfg.ckb.k = parse_num(key, v)?,
                            "r_l" => cfg.ckb.r_l = parse_num(key, v)?,
                            "r_h" => cfg.ckb.r_h = parse_num(key, v)?,
                            "d_m" => cfg.ckb.d_m = parse_num(key, v)?,
                            _ => return Err(CkbError::Config(format!("unknown key '{key}'"))),
                        },
                        "optim" => match field {
                            "beta1" => cfg.optim.beta1 = parse_num(key, v)?,
                            "beta2" => cfg.optim.beta2 = parse_num(key, v)?,
                            "eps" => cfg.optim.eps = parse_num(key, v)?,
                            "weight_decay" => cfg.optim.weight_decay = parse_num(key, v)?,
                            "lr_baseline" => cfg.optim.lr_baseline = parse_num(key, v)?,
                            "lr_import" => cfg.optim.lr_import = parse_num(key, v)?,
                            "lr_export" => cfg.optim.lr_export = parse_num(key, v)?,
                            "lr_head" => cfg.optim.lr_head = parse_num(key, v)?,
                            _ => return Err(CkbError::Config(format!("unknown key '{key}'"))),
                        },
                        "budgets" => match field {
                            "train_steps" => cfg.budgets.train_steps = parse_num(key, v)?,
                            "import_steps" => cfg.budgets.import_steps = parse_num(key, v)?,
                            "export_steps" => cfg.budgets.export_steps = parse_num(key, v)?,
                            "head_steps" => cfg.budgets.head_steps = parse_num(key, v)?,
                            "eval_every" => cfg.budgets.eval_every = parse_num(key, v)?,
                            "tokens_per_batch" => {
                                cfg.budgets.tokens_per_batch = parse_num(key, v)?
                            }
                            "heldout" => cfg.budgets.heldout = parse_num(key, v)?,
                            "vector_batch" => cfg.budgets.vector_batch = parse_num(key, v)?,
                            "probe_sequences" => {
                                cfg.budgets.probe_sequences = parse_num(key, v)?
                            }
                            _ => return Err(CkbError::Config(format!("unknown key '{key}'"))),
                        },
                        "io" => match field {
                            "model_ckpt" => cfg.io.model_ckpt = v.to_string(),
                            "model2_ckpt" => cfg.io.model2_ckpt = v.to_string(),
                            "model3_ckpt" => cfg.io.model3_ckpt = v.to_string(),
                            "kb_ckpt" => cfg.io.kb_ckpt = v.to_string(),
                            _ => return Err(CkbError::Config(format!("unknown key '{key}'"))),
                        },
                        _ => return Err(CkbError::Config(format!("unknown key '{key}'"))),
                    }
                }
            }
        }

        if model2_touched {
            cfg.model2 = cfg.model.clone();
            for (key, field, v) in &model2_raw {
                apply_model_key(&mut cfg.model2, key, field, v)?;
            }
        } else {
            cfg.model2 = ModelConfig {
                arch: Arch::Cnn,
                ..cfg.model.clone()
            };
        }
        cfg.target = cfg.model.clone();
        if target_touched {
            for (key, field, v) in &target_raw {
                apply_model_key(&mut cfg.target, key, field, v)?;
            }
        }
        // Token models share the data vocabulary.
        cfg.model.vocab_size = cfg.data.vocab_size;
        cfg.model2.vocab_size = cfg.data.vocab_size;
        cfg.target.vocab_size = cfg.data.vocab_size;
        cfg.model.max_len = cfg.data.max_len;
        cfg.model2.max_len = cfg.data.max_len;
        cfg.target.max_len = cfg.data.max_len;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CkbError::Io(format!("{}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_text() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.optim.beta1, 0.9);
        assert_eq!(cfg.optim.beta2, 0.98);
        assert_eq!(cfg.optim.eps, 1e-9);
        assert_eq!(cfg.optim.weight_decay, 0.01);
        assert_eq!(cfg.optim.lr_import, 2e-4);
        assert_eq!(cfg.optim.lr_export, 1e-4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("data.vocab = 100").is_err());
        assert!(RunConfig::parse("mode.arch = gru").is_err());
        assert!(RunConfig::parse("budgets.stepz = 3").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::parse("# a comment\n\nseed = 7\n").unwrap();
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn target_inherits_from_model() {
        let text = "model.arch = gru\nmodel.d_h = 48\ntarget.arch = cnn\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.target.arch, Arch::Cnn);
        assert_eq!(cfg.target.d_h, 48);
        assert_eq!(cfg.model.d_h, 48);
    }

    #[test]
    fn model2_inherits_when_touched() {
        let text = "model.d_e = 24\nmodel2.arch = encoder\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.model2.arch, Arch::Encoder);
        assert_eq!(cfg.model2.d_e, 24);
    }

    #[test]
    fn vocab_flows_from_data_section() {
        let cfg = RunConfig::parse("data.vocab_size = 321\n").unwrap();
        assert_eq!(cfg.model.vocab_size, 321);
        assert_eq!(cfg.target.vocab_size, 321);
    }

    #[test]
    fn bad_values_name_the_key() {
        let err = RunConfig::parse("budgets.train_steps = soon").unwrap_err();
        match err {
            CkbError::Config(msg) => assert!(msg.contains("budgets.train_steps")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
