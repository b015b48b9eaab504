//! Deterministic synthetic corpora.
//!
//! The pre-training corpus is a stream of tokens from a second-order Markov
//! source, cut into fixed-length segments. A pre-training example is
//! `[CLS] A [SEP] B` where `B` either continues `A` in the stream or is the
//! prefix of a random other segment. Downstream tasks are small classification
//! problems whose labels follow from a counting or ordering rule.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::{rng_for, Rng};

pub const CLS: u32 = 0;
pub const SEP: u32 = 1;
pub const MASK: u32 = 2;
/// First non-special token id.
pub const FIRST_CONTENT: u32 = 3;

// Markov source: with these probabilities the next token is the successor of
// the previous token, the successor of the token before that, or uniform.
const P_FIRST_ORDER: f64 = 0.5;
const P_SECOND_ORDER: f64 = 0.3;

/// Segments of a Markov token stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: usize,
    pub segment_len: usize,
    pub segments: Vec<Vec<u32>>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// All tokens in stream order.
    pub fn stream(&self) -> impl Iterator<Item = u32> + '_ {
        self.segments.iter().flatten().copied()
    }
}

/// Generates `size` segments of `(seq_len - 2) / 2` tokens each.
pub fn gen_pretrain_corpus(seed: u64, size: usize, config: &ModelConfig) -> Result<Corpus> {
    config.validate()?;
    if size < 2 {
        return Err(Error::InvalidArgument(format!("corpus needs at least 2 segments, got {size}")));
    }
    if config.seq_len < 4 || !config.seq_len.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "pre-training needs an even seq_len >= 4, got {}",
            config.seq_len
        )));
    }
    let content = content_count(config.vocab)?;
    let mut rng = rng_for(seed, "corpus.source");
    let mut first: Vec<u32> = (0..content as u32).collect();
    let mut second = first.clone();
    first.shuffle(&mut rng);
    second.shuffle(&mut rng);

    let segment_len = (config.seq_len - 2) / 2;
    let mut rng = rng_for(seed, "corpus.stream");
    let mut prev2 = rng.random_range(0..content as u32);
    let mut prev1 = rng.random_range(0..content as u32);
    let mut segments = Vec::with_capacity(size);
    for _ in 0..size {
        let mut seg = Vec::with_capacity(segment_len);
        for _ in 0..segment_len {
            let u: f64 = rng.random();
            let next = if u < P_FIRST_ORDER {
                first[prev1 as usize]
            } else if u < P_FIRST_ORDER + P_SECOND_ORDER {
                second[prev2 as usize]
            } else {
                rng.random_range(0..content as u32)
            };
            seg.push(next + FIRST_CONTENT);
            prev2 = prev1;
            prev1 = next;
        }
        segments.push(seg);
    }
    Ok(Corpus { vocab: config.vocab, segment_len, segments })
}

fn content_count(vocab: usize) -> Result<usize> {
    let c = vocab.saturating_sub(FIRST_CONTENT as usize);
    if c < 8 {
        return Err(Error::InvalidArgument(format!("vocab {vocab} leaves fewer than 8 content tokens")));
    }
    Ok(c)
}

/// Unmasked `[CLS] A [SEP] B` sequences with sentence-pair labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub sequences: Vec<Vec<u32>>,
    /// `true` when `B` is the segment right after `A`.
    pub is_next: Vec<bool>,
    /// Corpus indices of the `A` and `B` segments.
    pub sources: Vec<(usize, usize)>,
}

/// Samples `n` pairs; labels alternate so each batch is balanced.
pub fn sample_pairs(corpus: &Corpus, n: usize, seed: u64) -> PairBatch {
    let mut rng = rng_for(seed, "pairs");
    let count = corpus.len();
    let mut out = PairBatch { sequences: Vec::with_capacity(n), is_next: Vec::new(), sources: Vec::new() };
    for i in 0..n {
        let a = rng.random_range(0..count - 1);
        let is_next = i % 2 == 0;
        let b = if is_next {
            a + 1
        } else {
            // anything but the true successor
            let mut b = rng.random_range(0..count - 1);
            if b > a {
                b += 1;
            }
            b
        };
        let mut seq = Vec::with_capacity(2 * corpus.segment_len + 2);
        seq.push(CLS);
        seq.extend_from_slice(&corpus.segments[a]);
        seq.push(SEP);
        seq.extend_from_slice(&corpus.segments[b]);
        out.sequences.push(seq);
        out.is_next.push(is_next);
        out.sources.push((a, b));
    }
    out
}

/// Masked-token pre-training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    /// Token ids with masked positions replaced by [`MASK`].
    pub tokens: Vec<Vec<u32>>,
    /// Sorted, distinct masked positions per sequence.
    pub positions: Vec<Vec<usize>>,
    /// Original tokens at `positions`.
    pub originals: Vec<Vec<u32>>,
    pub is_next: Vec<bool>,
}

impl MaskedBatch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.positions.iter().map(Vec::len).sum()
    }
}

/// Masks each non-special position independently with probability
/// `mask_prob`. A sequence that draws no mask is redrawn.
pub fn mask_tokens(pairs: &PairBatch, mask_prob: f64, seed: u64) -> Result<MaskedBatch> {
    if !(mask_prob > 0.0 && mask_prob < 1.0) {
        return Err(Error::InvalidArgument(format!("mask_prob must lie in (0, 1), got {mask_prob}")));
    }
    let mut rng = rng_for(seed, "mask");
    let mut out = MaskedBatch {
        tokens: Vec::with_capacity(pairs.sequences.len()),
        positions: Vec::new(),
        originals: Vec::new(),
        is_next: pairs.is_next.clone(),
    };
    for seq in &pairs.sequences {
        let eligible: Vec<usize> = (0..seq.len()).filter(|&i| seq[i] >= FIRST_CONTENT).collect();
        if eligible.is_empty() {
            return Err(Error::InvalidArgument("sequence has no maskable token".into()));
        }
        let positions = loop {
            let picked: Vec<usize> = eligible.iter().copied().filter(|_| rng.random_bool(mask_prob)).collect();
            if !picked.is_empty() {
                break picked;
            }
        };
        let mut tokens = seq.clone();
        let originals = positions.iter().map(|&p| std::mem::replace(&mut tokens[p], MASK)).collect();
        out.tokens.push(tokens);
        out.positions.push(positions);
        out.originals.push(originals);
    }
    Ok(out)
}

/// Draws a masked pre-training batch of `n` pairs.
pub fn pretrain_batch(corpus: &Corpus, n: usize, mask_prob: f64, seed: u64) -> Result<MaskedBatch> {
    let pairs = sample_pairs(corpus, n, seed);
    mask_tokens(&pairs, mask_prob, seed)
}

/// Synthetic downstream classification tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Which of two designated tokens occurs more often.
    MajorityToken,
    /// Whether one designated token precedes another.
    PairOrder,
    /// Parity of the number of marker tokens.
    ParityOfMarker,
}

pub const MAJORITY_TOKENS: (u32, u32) = (3, 5);
pub const ORDER_TOKENS: (u32, u32) = (4, 6);
pub const PARITY_MARKER: u32 = 7;
const MAX_MARKERS: usize = 4;

impl Task {
    pub const ALL: [Task; 3] = [Task::MajorityToken, Task::PairOrder, Task::ParityOfMarker];

    pub fn name(self) -> &'static str {
        match self {
            Task::MajorityToken => "majority-token",
            Task::PairOrder => "pair-order",
            Task::ParityOfMarker => "parity-of-marker",
        }
    }

    pub fn classes(self) -> usize {
        2
    }

    pub fn label_name(self, label: usize) -> String {
        match (self, label) {
            (Task::MajorityToken, 0) => format!("{}-majority", MAJORITY_TOKENS.0),
            (Task::MajorityToken, _) => format!("{}-majority", MAJORITY_TOKENS.1),
            (Task::PairOrder, 0) => format!("{}-first", ORDER_TOKENS.0),
            (Task::PairOrder, _) => format!("{}-first", ORDER_TOKENS.1),
            (Task::ParityOfMarker, 0) => "even".into(),
            (Task::ParityOfMarker, _) => "odd".into(),
        }
    }

    fn reserved(self) -> Vec<u32> {
        match self {
            Task::MajorityToken => vec![MAJORITY_TOKENS.0, MAJORITY_TOKENS.1],
            Task::PairOrder => vec![ORDER_TOKENS.0, ORDER_TOKENS.1],
            Task::ParityOfMarker => vec![PARITY_MARKER],
        }
    }

    /// Label of a token sequence under this task's rule, or `None` when the
    /// rule is undecided (e.g. a tie).
    pub fn label_of(self, tokens: &[u32]) -> Option<usize> {
        let count = |t: u32| tokens.iter().filter(|&&x| x == t).count();
        match self {
            Task::MajorityToken => {
                let (a, b) = (count(MAJORITY_TOKENS.0), count(MAJORITY_TOKENS.1));
                match a.cmp(&b) {
                    std::cmp::Ordering::Greater => Some(0),
                    std::cmp::Ordering::Less => Some(1),
                    std::cmp::Ordering::Equal => None,
                }
            }
            Task::PairOrder => {
                let pa = tokens.iter().position(|&x| x == ORDER_TOKENS.0)?;
                let pb = tokens.iter().position(|&x| x == ORDER_TOKENS.1)?;
                Some(usize::from(pb < pa))
            }
            Task::ParityOfMarker => Some(count(PARITY_MARKER) % 2),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task `{s}`")))
    }
}

/// Labelled sequences for one task. Every sequence starts with [`CLS`].
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub task: Task,
    pub sequences: Vec<Vec<u32>>,
    pub labels: Vec<usize>,
}

impl TaskData {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// A batch of the given example indices.
    pub fn batch(&self, indices: &[usize]) -> LabeledBatch {
        LabeledBatch {
            task: self.task,
            tokens: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn all(&self) -> LabeledBatch {
        LabeledBatch { task: self.task, tokens: self.sequences.clone(), labels: self.labels.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub task: Task,
    pub tokens: Vec<Vec<u32>>,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Generates `size` labelled sequences of length `config.seq_len`, labels
/// alternating so the two classes differ by at most one.
pub fn gen_downstream_task(task: Task, seed: u64, size: usize, config: &ModelConfig) -> Result<TaskData> {
    config.validate()?;
    let content = content_count(config.vocab)?;
    let body_len = config.seq_len.checked_sub(1).filter(|&n| n >= MAX_MARKERS + 2).ok_or_else(|| {
        Error::InvalidArgument(format!("seq_len {} too short for downstream tasks", config.seq_len))
    })?;
    let reserved = task.reserved();
    let fillers: Vec<u32> = (FIRST_CONTENT..FIRST_CONTENT + content as u32).filter(|t| !reserved.contains(t)).collect();
    let mut rng = rng_for(seed, &format!("task.{}", task.name()));
    let mut out = TaskData { task, sequences: Vec::with_capacity(size), labels: Vec::with_capacity(size) };
    for i in 0..size {
        let label = i % 2;
        let mut body: Vec<u32> = (0..body_len).map(|_| fillers[rng.random_range(0..fillers.len())]).collect();
        let mut slots: Vec<usize> = (0..body_len).collect();
        slots.shuffle(&mut rng);
        match task {
            Task::MajorityToken => {
                let total = rng.random_range(1..=body_len);
                let major = rng.random_range(total / 2 + 1..=total);
                let (win, lose) = if label == 0 { MAJORITY_TOKENS } else { (MAJORITY_TOKENS.1, MAJORITY_TOKENS.0) };
                for (k, &slot) in slots[..total].iter().enumerate() {
                    body[slot] = if k < major { win } else { lose };
                }
            }
            Task::PairOrder => {
                let (p, q) = (slots[0].min(slots[1]), slots[0].max(slots[1]));
                let (first, second) = if label == 0 { ORDER_TOKENS } else { (ORDER_TOKENS.1, ORDER_TOKENS.0) };
                body[p] = first;
                body[q] = second;
            }
            Task::ParityOfMarker => {
                let choices: Vec<usize> = (1..=MAX_MARKERS).filter(|c| c % 2 == label).collect();
                let count = choices[rng.random_range(0..choices.len())];
                for &slot in &slots[..count] {
                    body[slot] = PARITY_MARKER;
                }
            }
        }
        let mut seq = Vec::with_capacity(config.seq_len);
        seq.push(CLS);
        seq.extend(body);
        debug_assert_eq!(task.label_of(&seq), Some(label));
        out.sequences.push(seq);
        out.labels.push(label);
    }
    Ok(out)
}

/// Deterministic minibatch index stream over `n` examples.
pub fn batch_indices(n: usize, batch: usize, step: u64, seed: u64) -> Vec<usize> {
    let mut rng: Rng = rng_for(seed, &format!("batch.{step}"));
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}
