//! Deterministic synthetic image/text corpora.
//!
//! Each class owns a unit-norm anchor in image space; an image is the anchor
//! plus isotropic Gaussian noise, pushed through the domain's affine map.
//! Texts render the assigned class into the prompt template
//! `a fundus image of condition-{c}`, optionally padded with filler words.
//! All randomness comes from per-class ChaCha streams, so generation order
//! never affects the output.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROMPT_WORDS: [&str; 4] = ["a", "fundus", "image", "of"];
const FRACTION_TOLERANCE: f64 = 1e-9;
/// Scale of the per-domain bias vector.
const DOMAIN_BIAS: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub image_dim: usize,
    pub vocab_size: usize,
    pub tokens_per_text: usize,
    pub noise_sigma: f64,
    pub label_noise_rate: f64,
    pub domain_id: u32,
    pub split_fractions: [f64; 3],
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_classes: 8,
            samples_per_class: 64,
            image_dim: 16,
            vocab_size: 16,
            tokens_per_text: 5,
            noise_sigma: 0.05,
            label_noise_rate: 0.0,
            domain_id: 0,
            split_fractions: [0.6, 0.2, 0.2],
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config(format!("n_classes must be at least 2, got {}", self.n_classes)));
        }
        if self.samples_per_class == 0 || self.image_dim == 0 {
            return Err(Error::Config("samples_per_class and image_dim must be positive".into()));
        }
        let needed = self.n_classes + PROMPT_WORDS.len();
        if self.vocab_size < needed {
            return Err(Error::Config(format!(
                "vocab_size {} cannot hold the prompt words and {} class names (need {needed})",
                self.vocab_size, self.n_classes
            )));
        }
        let template = PROMPT_WORDS.len() + 1;
        if self.tokens_per_text < template {
            return Err(Error::Config(format!("tokens_per_text must be at least {template}")));
        }
        if self.tokens_per_text > template && self.vocab_size == needed {
            return Err(Error::Config("tokens_per_text needs filler words but vocab has none".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(0.0..1.0).contains(&self.label_noise_rate) {
            return Err(Error::Config(format!(
                "label_noise_rate must be in [0, 1), got {}",
                self.label_noise_rate
            )));
        }
        validate_fractions(&self.split_fractions)
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.n_classes, self.vocab_size)
    }
}

fn validate_fractions(f: &[f64; 3]) -> Result<()> {
    if f.iter().any(|x| x.is_nan() || *x <= 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > FRACTION_TOLERANCE {
        return Err(Error::Config(format!("split fractions must be positive and sum to 1, got {f:?}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub image: Vec<f64>,
    pub tokens: Vec<usize>,
    pub true_class: usize,
    pub assigned_class: usize,
    pub domain: u32,
    pub split: Split,
}

/// Word list: the prompt words, one name per class, then fillers.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    n_classes: usize,
}

impl Vocabulary {
    pub fn new(n_classes: usize, vocab_size: usize) -> Self {
        let mut words: Vec<String> = PROMPT_WORDS.iter().map(|w| w.to_string()).collect();
        words.extend((0..n_classes).map(class_name));
        let fillers = vocab_size.saturating_sub(words.len());
        words.extend((0..fillers).map(|i| format!("filler-{i}")));
        Self { words, n_classes }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_classes).map(class_name).collect()
    }

    fn filler_ids(&self) -> std::ops::Range<usize> {
        PROMPT_WORDS.len() + self.n_classes..self.words.len()
    }

    /// Tokenizes whitespace-separated words.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Config(format!("word {w:?} is not in the vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[usize]) -> Result<String> {
        let words = tokens
            .iter()
            .map(|&id| {
                self.word(id).ok_or(Error::Vocabulary {
                    id,
                    vocab_size: self.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}

pub fn class_name(c: usize) -> String {
    format!("condition-{c}")
}

/// The prompt for a label, exactly as rendered for training texts.
pub fn render_prompt(label: &str) -> String {
    format!("a fundus image of {label}")
}

/// A fixed affine map of image space: `x ↦ R·x + b`. Domain 0 is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainMap {
    rotation: Option<Vec<f64>>,
    bias: Vec<f64>,
}

impl DomainMap {
    pub fn new(domain_id: u32, dim: usize) -> Self {
        if domain_id == 0 {
            return Self {
                rotation: None,
                bias: vec![0.0; dim],
            };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0xD0_0000 + u64::from(domain_id));
        let raw: Vec<f64> = (0..dim * dim).map(|_| rng.sample(StandardNormal)).collect();
        let rotation = gram_schmidt(raw, dim);
        let scale = DOMAIN_BIAS / (dim as f64).sqrt();
        let bias = (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        Self {
            rotation: Some(rotation),
            bias,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let dim = x.len();
        match &self.rotation {
            None => x.to_vec(),
            Some(r) => (0..dim)
                .map(|i| {
                    let row = &r[i * dim..(i + 1) * dim];
                    row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.bias[i]
                })
                .collect(),
        }
    }
}

fn gram_schmidt(mut m: Vec<f64>, n: usize) -> Vec<f64> {
    for i in 0..n {
        for j in 0..i {
            let d: f64 = (0..n).map(|k| m[i * n + k] * m[j * n + k]).sum();
            for k in 0..n {
                m[i * n + k] -= d * m[j * n + k];
            }
        }
        let norm = (0..n).map(|k| m[i * n + k].powi(2)).sum::<f64>().sqrt();
        for k in 0..n {
            m[i * n + k] /= norm;
        }
    }
    m
}

fn class_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Unit-norm class anchors, one row per class.
pub fn class_anchors(spec: &CorpusSpec) -> Vec<Vec<f64>> {
    let mut rng = class_rng(spec.seed, 0);
    (0..spec.n_classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.image_dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn render_tokens<R: Rng>(vocab: &Vocabulary, class: usize, len: usize, rng: &mut R) -> Vec<usize> {
    let mut tokens: Vec<usize> = (0..PROMPT_WORDS.len()).collect();
    tokens.push(PROMPT_WORDS.len() + class);
    let fillers = vocab.filler_ids();
    while tokens.len() < len {
        tokens.push(rng.random_range(fillers.clone()));
    }
    tokens
}

/// Generates the full corpus, ordered by class then sample index, with
/// splits already assigned.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<PairRecord>> {
    spec.validate()?;
    let anchors = class_anchors(spec);
    let vocab = spec.vocabulary();
    let domain = DomainMap::new(spec.domain_id, spec.image_dim);
    let k = spec.n_classes;
    let mut records = Vec::with_capacity(k * spec.samples_per_class);
    for (c, anchor) in anchors.iter().enumerate() {
        let mut rng = class_rng(spec.seed, 1 + c as u64);
        for _ in 0..spec.samples_per_class {
            let raw: Vec<f64> = anchor
                .iter()
                .map(|a| a + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let flip: f64 = rng.random();
            let other = rng.random_range(0..k - 1);
            let assigned = if flip < spec.label_noise_rate {
                if other >= c {
                    other + 1
                } else {
                    other
                }
            } else {
                c
            };
            let tokens = render_tokens(&vocab, assigned, spec.tokens_per_text, &mut rng);
            records.push(PairRecord {
                image: domain.apply(&raw),
                tokens,
                true_class: c,
                assigned_class: assigned,
                domain: spec.domain_id,
                split: Split::Train,
            });
        }
    }
    assign_splits(&mut records, spec.split_fractions, spec.seed)?;
    Ok(records)
}

/// Re-tags `records` with a stratified split. Within each true class the
/// samples are shuffled by `seed`; the first `round(n·f_train)` go to train,
/// the next `round(n·f_val)` to val, the rest to test.
pub fn assign_splits(records: &mut [PairRecord], fractions: [f64; 3], seed: u64) -> Result<()> {
    validate_fractions(&fractions)?;
    let classes: BTreeSet<usize> = records.iter().map(|r| r.true_class).collect();
    for c in classes {
        let mut idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].true_class == c).collect();
        let n = idx.len();
        let n_train = (n as f64 * fractions[0]).round() as usize;
        let n_val = (n as f64 * fractions[1]).round() as usize;
        if n_train == 0 || n_val == 0 || n_train + n_val >= n {
            return Err(Error::Stratification(format!(
                "class {c} has {n} samples, too few for fractions {fractions:?}"
            )));
        }
        let mut rng = class_rng(seed, 0x5_0000 + c as u64);
        for i in (1..n).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        for (pos, &i) in idx.iter().enumerate() {
            records[i].split = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(())
}

/// Splits `records` into (train, val, test) by re-tagging a copy.
pub fn split_corpus(
    records: &[PairRecord],
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Vec<PairRecord>, Vec<PairRecord>, Vec<PairRecord>)> {
    let mut tagged = records.to_vec();
    assign_splits(&mut tagged, fractions, seed)?;
    let pick = |s: Split| tagged.iter().filter(|r| r.split == s).cloned().collect();
    Ok((pick(Split::Train), pick(Split::Val), pick(Split::Test)))
}

pub fn write_corpus(path: &Path, records: &[PairRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Loads a corpus file, checking every record against the first.
pub fn read_corpus(path: &Path) -> Result<Vec<PairRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |line: usize, reason: String| Error::Corrupt {
        kind: "corpus",
        path: path.to_path_buf(),
        reason: format!("line {line}: {reason}"),
    };
    let mut records: Vec<PairRecord> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: PairRecord = serde_json::from_str(&line).map_err(|e| corrupt(i + 1, e.to_string()))?;
        if r.tokens.is_empty() {
            return Err(corrupt(i + 1, "empty token sequence".into()));
        }
        if r.image.iter().any(|x| !x.is_finite()) {
            return Err(corrupt(i + 1, "non-finite image value".into()));
        }
        if let Some(first) = records.first() {
            if r.image.len() != first.image.len() {
                return Err(corrupt(
                    i + 1,
                    format!("image width {} differs from {}", r.image.len(), first.image.len()),
                ));
            }
        }
        records.push(r);
    }
    if records.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let k = n_classes(&records);
    if let Some(r) = records.iter().find(|r| r.assigned_class >= k) {
        return Err(corrupt(0, format!("assigned_class {} has no true-class samples", r.assigned_class)));
    }
    Ok(records)
}

/// One past the largest true class.
pub fn n_classes(records: &[PairRecord]) -> usize {
    records.iter().map(|r| r.true_class + 1).max().unwrap_or(0)
}
