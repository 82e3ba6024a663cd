//! Zero-shot classification, leave-one-out retrieval and the metric suite.
//!
//! Rankings sort by score descending; exact ties go to the lower label index
//! or id, so every ranking is deterministic.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ops::{self, softplus_scalar};
use crate::datagen::{render_prompt, PairRecord, Split, Vocabulary};
use crate::encoder::{DualEncoder, Embedding};
use crate::error::{Error, Result};

/// Embeddings whose norm is off by more than this are rejected.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

fn check_unit(v: &[f64], what: &'static str) -> Result<()> {
    let norm = ops::dot(v, v).sqrt();
    if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
        return Err(Error::Contract(format!("{what} embedding has norm {norm}, expected 1")));
    }
    Ok(())
}

fn by_score_then_index(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    labels: Vec<String>,
    prompts: Vec<String>,
    embeddings: Vec<Embedding>,
}

impl PromptSet {
    /// Renders and embeds one prompt per label.
    pub fn build(encoder: &DualEncoder, vocab: &Vocabulary, labels: &[String]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("label set"));
        }
        let prompts: Vec<String> = labels.iter().map(|l| render_prompt(l)).collect();
        let tokens = prompts.iter().map(|p| vocab.encode(p)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[usize]> = tokens.iter().map(Vec::as_slice).collect();
        let embeddings = encoder.encode_texts(&refs)?;
        Ok(Self {
            labels: labels.to_vec(),
            prompts,
            embeddings,
        })
    }

    /// Wraps precomputed prompt embeddings.
    pub fn from_embeddings(labels: Vec<String>, embeddings: Vec<Embedding>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("label set"));
        }
        if labels.len() != embeddings.len() {
            return Err(Error::Shape {
                op: "prompt_set",
                left: vec![labels.len()],
                right: vec![embeddings.len()],
            });
        }
        let width = embeddings[0].len();
        for e in &embeddings {
            if e.len() != width {
                return Err(Error::Shape {
                    op: "prompt_set",
                    left: vec![e.len()],
                    right: vec![width],
                });
            }
            check_unit(e, "prompt")?;
        }
        let prompts = labels.iter().map(|l| render_prompt(l)).collect();
        Ok(Self {
            labels,
            prompts,
            embeddings,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    pub fn width(&self) -> usize {
        self.embeddings[0].len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelScore {
    pub index: usize,
    pub label: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ZeroShot {
    pub top: Vec<LabelScore>,
    /// u = K/S over the softplus evidence of all prompt scores.
    pub uncertainty: f64,
}

pub fn zero_shot_classify(image: &[f64], prompts: &PromptSet, k: usize) -> Result<ZeroShot> {
    if image.len() != prompts.width() {
        return Err(Error::Shape {
            op: "zero_shot_classify",
            left: vec![image.len()],
            right: vec![prompts.width()],
        });
    }
    let n = prompts.labels.len();
    if k == 0 || k > n {
        return Err(Error::Contract(format!("k = {k} must be in 1..={n}")));
    }
    let mut scored: Vec<(usize, f64)> = prompts
        .embeddings
        .iter()
        .map(|p| ops::dot(image, p))
        .enumerate()
        .collect();
    let strength: f64 = scored.iter().map(|(_, s)| softplus_scalar(*s) + 1.0).sum();
    scored.sort_by(by_score_then_index);
    let top = scored
        .into_iter()
        .take(k)
        .map(|(index, score)| LabelScore {
            index,
            label: prompts.labels[index].clone(),
            score,
        })
        .collect();
    Ok(ZeroShot {
        top,
        uncertainty: n as f64 / strength,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    ids: Vec<u64>,
    labels: Vec<usize>,
    embeddings: Vec<Embedding>,
}

impl RetrievalIndex {
    pub fn new(ids: Vec<u64>, labels: Vec<usize>, embeddings: Vec<Embedding>) -> Result<Self> {
        if ids.len() != labels.len() || ids.len() != embeddings.len() {
            return Err(Error::Shape {
                op: "retrieval_index",
                left: vec![ids.len(), labels.len()],
                right: vec![embeddings.len()],
            });
        }
        if ids.is_empty() {
            return Err(Error::Empty("retrieval index"));
        }
        let unique: BTreeSet<u64> = ids.iter().copied().collect();
        if unique.len() != ids.len() {
            return Err(Error::Contract("retrieval ids must be unique".into()));
        }
        let width = embeddings[0].len();
        for e in &embeddings {
            if e.len() != width {
                return Err(Error::Shape {
                    op: "retrieval_index",
                    left: vec![e.len()],
                    right: vec![width],
                });
            }
            check_unit(e, "index")?;
        }
        Ok(Self { ids, labels, embeddings })
    }

    pub fn from_records(records: &[EmbeddingRecord]) -> Result<Self> {
        Self::new(
            records.iter().map(|r| r.id).collect(),
            records.iter().map(|r| r.label).collect(),
            records.iter().map(|r| r.vector.clone()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn label_of(&self, id: u64) -> Option<usize> {
        self.position(id).map(|i| self.labels[i])
    }

    fn position(&self, id: u64) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Candidate {
    pub id: u64,
    pub label: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankedResult {
    pub query_id: u64,
    pub candidates: Vec<Candidate>,
    /// Diagnostic u = M/S over the softplus evidence of every candidate.
    pub uncertainty: Option<f64>,
}

/// Ranks every other item against `query_id` and keeps the best `k`.
pub fn retrieve_similar(index: &RetrievalIndex, query_id: u64, k: usize) -> Result<RankedResult> {
    let q = index
        .position(query_id)
        .ok_or_else(|| Error::Contract(format!("unknown query id {query_id}")))?;
    let pool = index.len() - 1;
    if k == 0 || k > pool {
        return Err(Error::Contract(format!("k = {k} must be in 1..={pool}")));
    }
    let query = &index.embeddings[q];
    let mut scored: Vec<(usize, f64)> = (0..index.len())
        .filter(|&i| i != q)
        .map(|i| (i, ops::dot(query, &index.embeddings[i])))
        .collect();
    let strength: f64 = scored.iter().map(|(_, s)| softplus_scalar(*s) + 1.0).sum();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(index.ids[a.0].cmp(&index.ids[b.0])));
    let candidates = scored
        .into_iter()
        .take(k)
        .map(|(i, score)| Candidate {
            id: index.ids[i],
            label: index.labels[i],
            score,
        })
        .collect();
    Ok(RankedResult {
        query_id,
        candidates,
        uncertainty: Some(pool as f64 / strength),
    })
}

/// Fraction of samples whose truth is among the first `k` predictions.
pub fn topk_accuracy(predictions: &[Vec<usize>], truths: &[usize], k: usize) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    if predictions.len() != truths.len() {
        return Err(Error::Shape {
            op: "topk_accuracy",
            left: vec![predictions.len()],
            right: vec![truths.len()],
        });
    }
    if let Some(p) = predictions.iter().find(|p| p.len() < k) {
        return Err(Error::Contract(format!("prediction list of length {} is shorter than k = {k}", p.len())));
    }
    let hits = predictions
        .iter()
        .zip(truths)
        .filter(|(p, t)| p[..k].contains(t))
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Fraction of the first `n` candidates sharing `relevant_label`.
pub fn precision_at_n(result: &RankedResult, relevant_label: usize, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Contract("precision@N needs N > 0".into()));
    }
    if n > result.candidates.len() {
        return Err(Error::Contract(format!(
            "N = {n} exceeds the {} ranked candidates",
            result.candidates.len()
        )));
    }
    let relevant = result.candidates[..n].iter().filter(|c| c.label == relevant_label).count();
    Ok(relevant as f64 / n as f64)
}

/// Whether any of the first `k` candidates shares `relevant_label`.
pub fn retrieval_hit(result: &RankedResult, relevant_label: usize, k: usize) -> bool {
    result.candidates.iter().take(k).any(|c| c.label == relevant_label)
}

/// Mann–Whitney AUC with midranks for ties.
pub fn auc_score(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            op: "auc_score",
            left: vec![scores.len()],
            right: vec![labels.len()],
        });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined("AUC needs both classes present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// One-vs-rest AUC for each class of an n×K score table, plus the mean.
pub fn macro_auc(scores: &[Vec<f64>], truths: &[usize], n_classes: usize) -> Result<(Vec<f64>, f64)> {
    let per_class = (0..n_classes)
        .map(|c| {
            let col: Vec<f64> = scores.iter().map(|row| row[c]).collect();
            let labels: Vec<bool> = truths.iter().map(|&t| t == c).collect();
            auc_score(&col, &labels)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = per_class.iter().sum::<f64>() / n_classes as f64;
    Ok((per_class, mean))
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape {
            op: "pearson",
            left: vec![x.len()],
            right: vec![y.len()],
        });
    }
    if x.len() < 2 {
        return Err(Error::Contract("pearson needs at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation of a constant sequence"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingRecord {
    pub id: u64,
    pub label: usize,
    pub vector: Vec<f64>,
}

pub fn write_embeddings(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| Error::Corrupt {
            kind: "embeddings",
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", i + 1),
        })?;
        out.push(r);
    }
    Ok(out)
}

/// Embeds the images of `records` (optionally one split), labelled by true
/// class. Ids are positions in `records`.
pub fn embed_records(encoder: &DualEncoder, records: &[PairRecord], split: Option<Split>) -> Result<Vec<EmbeddingRecord>> {
    let chosen: Vec<(usize, &PairRecord)> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| split.is_none_or(|s| r.split == s))
        .collect();
    let mut out = Vec::with_capacity(chosen.len());
    for chunk in chosen.chunks(256) {
        let images: Vec<&[f64]> = chunk.iter().map(|(_, r)| r.image.as_slice()).collect();
        let vectors = encoder.encode_images(&images)?;
        out.extend(chunk.iter().zip(vectors).map(|((i, r), vector)| EmbeddingRecord {
            id: *i as u64,
            label: r.true_class,
            vector,
        }));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub k: usize,
    pub value: f64,
    pub n_samples: usize,
}

/// Zero-shot Top-K over labelled image embeddings.
pub fn zero_shot_topk(images: &[EmbeddingRecord], prompts: &PromptSet, ks: &[usize]) -> Result<Vec<MetricReport>> {
    let n_labels = prompts.labels().len();
    let mut predictions = Vec::with_capacity(images.len());
    for r in images {
        let ranked = zero_shot_classify(&r.vector, prompts, n_labels)?;
        predictions.push(ranked.top.iter().map(|s| s.index).collect::<Vec<_>>());
    }
    let truths: Vec<usize> = images.iter().map(|r| r.label).collect();
    ks.iter()
        .map(|&k| {
            Ok(MetricReport {
                metric: format!("Top-{k}"),
                k,
                value: topk_accuracy(&predictions, &truths, k.min(n_labels))?,
                n_samples: images.len(),
            })
        })
        .collect()
}

/// Leave-one-out retrieval: mean Precision@N and any-hit Top-K per K.
pub fn retrieval_metrics(index: &RetrievalIndex, ks: &[usize]) -> Result<Vec<MetricReport>> {
    let max_k = ks.iter().copied().max().unwrap_or(1);
    let results = index
        .ids()
        .iter()
        .map(|&id| retrieve_similar(index, id, max_k))
        .collect::<Result<Vec<_>>>()?;
    let n = results.len();
    let mut out = Vec::new();
    for &k in ks {
        let mut precision = 0.0;
        let mut hits = 0;
        for r in &results {
            let label = index.label_of(r.query_id).expect("query comes from index");
            precision += precision_at_n(r, label, k)?;
            hits += usize::from(retrieval_hit(r, label, k));
        }
        out.push(MetricReport {
            metric: format!("P@{k}"),
            k,
            value: precision / n as f64,
            n_samples: n,
        });
        out.push(MetricReport {
            metric: format!("Top-{k}"),
            k,
            value: hits as f64 / n as f64,
            n_samples: n,
        });
    }
    Ok(out)
}
