//! Tokenization, vocabulary, batching, synthetic-corpus generation, and
//! TSV loading.
//!
//! The synthetic corpus is a desk-scale stand-in for review datasets: each
//! example mixes label-correlated cue tokens with neutral filler, with an
//! optional label-noise rate. Documents shorter than five tokens are
//! filtered everywhere, and encoding truncates to a configured maximum.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{CkbError, Result};
use crate::rng::SeededRng;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const RESERVED: usize = 2;
pub const MIN_DOC_TOKENS: usize = 5;
pub const DEFAULT_MAX_LEN: usize = 512;

#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Most frequent tokens up to `max_size - 2` (two reserved slots),
    /// ties broken lexicographically.
    pub fn build(corpus: &[String], max_size: usize) -> Result<Vocab> {
        if corpus.is_empty() {
            return Err(CkbError::Input("empty corpus".into()));
        }
        if max_size <= RESERVED {
            return Err(CkbError::Config(format!(
                "vocab max_size must exceed {RESERVED}"
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for doc in corpus {
            for tok in doc.split_whitespace() {
                *counts.entry(tok.to_lowercase()).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(String, usize)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        entries.truncate(max_size - RESERVED);
        let mut id_to_token = vec!["<pad>".to_string(), "<unk>".to_string()];
        let mut token_to_id = HashMap::new();
        for (tok, _) in entries {
            token_to_id.insert(tok.clone(), id_to_token.len());
            id_to_token.push(tok);
        }
        Ok(Vocab {
            token_to_id,
            id_to_token,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id_of(&self, token: &str) -> usize {
        self.token_to_id
            .get(&token.to_lowercase())
            .copied()
            .unwrap_or(UNK_ID)
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    /// Whitespace-split, lowercase, map to ids, truncate to `max_len`.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        text.split_whitespace()
            .take(max_len)
            .map(|t| self.id_of(t))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub examples: Vec<(Vec<usize>, usize)>,
    pub split: Split,
    pub classes: usize,
    pub vocab_size: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// One padded batch: rows of equal padded length plus a true-token mask.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Example indices into the source dataset.
    pub ids: Vec<usize>,
    /// Padded token rows, all `max_len` long.
    pub rows: Vec<Vec<usize>>,
    /// True (unpadded) length per row.
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Shuffle by seed, then pack greedily so rows * padded_length stays within
/// the token budget. Every example appears exactly once.
pub fn make_batches(dataset: &Dataset, tokens_per_batch: usize, seed: u64) -> Result<Vec<Batch>> {
    let longest = dataset
        .examples
        .iter()
        .map(|(t, _)| t.len())
        .max()
        .unwrap_or(0);
    if longest > tokens_per_batch {
        return Err(CkbError::Input(format!(
            "sequence of length {longest} exceeds token budget {tokens_per_batch}"
        )));
    }
    let mut order: Vec<usize> = (0..dataset.examples.len()).collect();
    let mut rng = SeededRng::new(seed);
    rng.shuffle(&mut order);

    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut max_len = 0usize;
    for &idx in &order {
        let len = dataset.examples[idx].0.len();
        let new_max = max_len.max(len);
        if !current.is_empty() && (current.len() + 1) * new_max > tokens_per_batch {
            batches.push(seal_batch(dataset, &current, max_len));
            current.clear();
            max_len = 0;
        }
        max_len = max_len.max(len);
        current.push(idx);
    }
    if !current.is_empty() {
        batches.push(seal_batch(dataset, &current, max_len));
    }
    Ok(batches)
}

fn seal_batch(dataset: &Dataset, ids: &[usize], max_len: usize) -> Batch {
    let mut rows = Vec::with_capacity(ids.len());
    let mut lengths = Vec::with_capacity(ids.len());
    let mut labels = Vec::with_capacity(ids.len());
    for &i in ids {
        let (tokens, label) = &dataset.examples[i];
        let mut row = tokens.clone();
        row.resize(max_len, PAD_ID);
        rows.push(row);
        lengths.push(tokens.len());
        labels.push(*label);
    }
    Batch {
        ids: ids.to_vec(),
        rows,
        lengths,
        labels,
    }
}

/// Spec for the synthetic cue corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub pos_cues: usize,
    pub neg_cues: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub noise: f64,
    pub balance: f64,
    pub examples: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            vocab_size: 2000,
            pos_cues: 40,
            neg_cues: 40,
            len_min: 8,
            len_max: 32,
            noise: 0.05,
            balance: 0.5,
            examples: 12_000,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.noise < 0.0 || self.noise >= 0.5 {
            return Err(CkbError::Config(format!(
                "noise rate {} outside [0, 0.5)",
                self.noise
            )));
        }
        if self.len_min < MIN_DOC_TOKENS {
            return Err(CkbError::Config(format!(
                "len_min {} below the {MIN_DOC_TOKENS}-token document filter",
                self.len_min
            )));
        }
        if self.len_max < self.len_min {
            return Err(CkbError::Config("len_max below len_min".into()));
        }
        if self.vocab_size < RESERVED + self.pos_cues + self.neg_cues + 1 {
            return Err(CkbError::Config(
                "vocab too small for cue lexicons plus neutral tokens".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.balance) {
            return Err(CkbError::Config("class balance outside [0, 1]".into()));
        }
        if self.examples == 0 {
            return Err(CkbError::Config("examples must be positive".into()));
        }
        Ok(())
    }

    pub fn pos_range(&self) -> std::ops::Range<usize> {
        RESERVED..RESERVED + self.pos_cues
    }

    pub fn neg_range(&self) -> std::ops::Range<usize> {
        RESERVED + self.pos_cues..RESERVED + self.pos_cues + self.neg_cues
    }

    fn neutral_range(&self) -> std::ops::Range<usize> {
        RESERVED + self.pos_cues + self.neg_cues..self.vocab_size
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

/// Generate the synthetic corpus, split 80/10/10, fully seed-deterministic.
///
/// Content always reflects the true label: the count of true-label cues
/// strictly exceeds the count of opposite cues, so a majority vote over
/// cues recovers the true label exactly. Label noise then flips the
/// observed label with the configured rate.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<DatasetSplits> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed).split("synthetic");
    let mut examples = Vec::with_capacity(spec.examples);
    for _ in 0..spec.examples {
        let true_label = usize::from(rng.bernoulli(1.0 - spec.balance));
        let len = rng.range(spec.len_min, spec.len_max + 1);
        // Cue budget: at least one true cue, strictly more true than opposite.
        let max_cues = (len / 2).max(1);
        let n_true = rng.range(1, max_cues + 1);
        let n_opp = if n_true > 1 { rng.range(0, n_true) } else { 0 };
        let (true_range, opp_range) = if true_label == 1 {
            (spec.pos_range(), spec.neg_range())
        } else {
            (spec.neg_range(), spec.pos_range())
        };
        let mut tokens = Vec::with_capacity(len);
        for _ in 0..n_true {
            tokens.push(rng.range(true_range.start, true_range.end));
        }
        for _ in 0..n_opp {
            tokens.push(rng.range(opp_range.start, opp_range.end));
        }
        let neutral = spec.neutral_range();
        while tokens.len() < len {
            tokens.push(rng.range(neutral.start, neutral.end));
        }
        rng.shuffle(&mut tokens);
        let observed = if spec.noise > 0.0 && rng.bernoulli(spec.noise) {
            1 - true_label
        } else {
            true_label
        };
        examples.push((tokens, observed));
    }
    let n = examples.len();
    let n_train = n * 8 / 10;
    let n_valid = n / 10;
    let test = examples.split_off(n_train + n_valid);
    let valid = examples.split_off(n_train);
    let make = |ex: Vec<(Vec<usize>, usize)>, split| Dataset {
        examples: ex,
        split,
        classes: 2,
        vocab_size: spec.vocab_size,
    };
    Ok(DatasetSplits {
        train: make(examples, Split::Train),
        valid: make(valid, Split::Valid),
        test: make(test, Split::Test),
    })
}

/// The label a majority vote over cue tokens predicts.
pub fn cue_majority_label(spec: &SyntheticSpec, tokens: &[usize]) -> usize {
    let pos = spec.pos_range();
    let neg = spec.neg_range();
    let n_pos = tokens.iter().filter(|&&t| pos.contains(&t)).count();
    let n_neg = tokens.iter().filter(|&&t| neg.contains(&t)).count();
    usize::from(n_pos > n_neg)
}

/// Load a `label<TAB>text` file: rows with fewer than five tokens are
/// dropped, labels must be in 0..classes.
pub fn load_tsv_texts(path: &Path, classes: usize) -> Result<Vec<(usize, String)>> {
    let content = std::fs::read_to_string(path)
        .map_err(|e| CkbError::Io(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (label_str, text) = line.split_once('\t').ok_or(CkbError::Parse {
            line: lineno + 1,
            detail: "expected label<TAB>text".into(),
        })?;
        let label: usize = label_str.trim().parse().map_err(|_| CkbError::Parse {
            line: lineno + 1,
            detail: format!("bad label '{label_str}'"),
        })?;
        if label >= classes {
            return Err(CkbError::Label {
                got: label.to_string(),
                classes,
            });
        }
        if text.split_whitespace().count() < MIN_DOC_TOKENS {
            continue;
        }
        rows.push((label, text.to_string()));
    }
    Ok(rows)
}

/// Load train/valid/test TSV files; the vocabulary comes from the train
/// split only.
pub fn load_tsv_splits(
    train: &Path,
    valid: &Path,
    test: &Path,
    classes: usize,
    max_vocab: usize,
    max_len: usize,
) -> Result<(DatasetSplits, Vocab)> {
    let train_rows = load_tsv_texts(train, classes)?;
    if train_rows.is_empty() {
        return Err(CkbError::Input(format!(
            "no usable rows in {}",
            train.display()
        )));
    }
    let corpus: Vec<String> = train_rows.iter().map(|(_, t)| t.clone()).collect();
    let vocab = Vocab::build(&corpus, max_vocab)?;
    let encode_rows = |rows: Vec<(usize, String)>, split| -> Dataset {
        let examples = rows
            .into_iter()
            .map(|(label, text)| (vocab.encode(&text, max_len), label))
            .filter(|(tokens, _)| !tokens.is_empty())
            .collect();
        Dataset {
            examples,
            split,
            classes,
            vocab_size: vocab.len(),
        }
    };
    let valid_rows = load_tsv_texts(valid, classes)?;
    let test_rows = load_tsv_texts(test, classes)?;
    Ok((
        DatasetSplits {
            train: encode_rows(train_rows, Split::Train),
            valid: encode_rows(valid_rows, Split::Valid),
            test: encode_rows(test_rows, Split::Test),
        },
        vocab,
    ))
}
