use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ops, Tape, Tensor};
use crate::error::{Error, Result};
use crate::inference::{macro_auc, EmbeddingRecord};

use super::Adam;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub few_shot_k: Option<usize>,
    pub train_domain: u32,
    pub eval_domains: Vec<u32>,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 0.05,
            few_shot_k: None,
            train_domain: 0,
            eval_domains: vec![0],
            seed: 0,
        }
    }
}

/// Embeddings from one domain, produced by a frozen encoder.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DomainData {
    pub train: Vec<EmbeddingRecord>,
    pub test: Vec<EmbeddingRecord>,
}

/// Softmax classifier: probabilities = softmax(x·Wᵀ + b).
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearHead {
    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (k, d) = self.weight.dims2()?;
        if x.len() != d {
            return Err(Error::Shape {
                op: "probe",
                left: vec![x.len()],
                right: vec![d],
            });
        }
        let logits: Vec<f64> = (0..k)
            .map(|c| ops::dot(self.weight.row(c), x) + self.bias.data()[c])
            .collect();
        Ok(ops::softmax_rows(&Tensor::vector(logits)?)?.into_data())
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let p = self.probabilities(x)?;
        Ok((0..p.len()).fold(0, |best, c| if p[c] > p[best] { c } else { best }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeEval {
    pub domain: u32,
    pub n_samples: usize,
    pub accuracy: f64,
    pub per_class_auc: Vec<f64>,
    pub mean_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeOutcome {
    #[serde(skip)]
    pub head: Option<LinearHead>,
    pub n_classes: usize,
    pub train_size: usize,
    pub train_accuracy: f64,
    pub evals: Vec<ProbeEval>,
}

fn accuracy(head: &LinearHead, data: &[&EmbeddingRecord]) -> Result<f64> {
    let mut hits = 0;
    for r in data {
        hits += usize::from(head.predict(&r.vector)? == r.label);
    }
    Ok(hits as f64 / data.len() as f64)
}

fn select_training<'a>(pool: &'a [EmbeddingRecord], n_classes: usize, cfg: &ProbeConfig) -> Result<Vec<&'a EmbeddingRecord>> {
    let mut by_class: BTreeMap<usize, Vec<&EmbeddingRecord>> = BTreeMap::new();
    for r in pool {
        if r.label >= n_classes {
            return Err(Error::Contract(format!("label {} outside {n_classes} classes", r.label)));
        }
        by_class.entry(r.label).or_default().push(r);
    }
    if let Some(c) = (0..n_classes).find(|c| !by_class.contains_key(c)) {
        return Err(Error::Stratification(format!("class {c} is absent from the probe training split")));
    }
    let Some(k) = cfg.few_shot_k else {
        return Ok(pool.iter().collect());
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(k * n_classes);
    for (c, mut items) in by_class {
        if items.len() < k {
            return Err(Error::Stratification(format!(
                "class {c} has {} training samples, fewer than few_shot_k = {k}",
                items.len()
            )));
        }
        items.shuffle(&mut rng);
        out.extend(items.into_iter().take(k));
    }
    Ok(out)
}

/// Trains a softmax head on `cfg.train_domain` and evaluates it on each of
/// `cfg.eval_domains` without retraining.
pub fn train_linear_probe(data: &BTreeMap<u32, DomainData>, n_classes: usize, cfg: &ProbeConfig) -> Result<ProbeOutcome> {
    if n_classes < 2 {
        return Err(Error::Config("probe needs at least two classes".into()));
    }
    if cfg.epochs == 0 || cfg.learning_rate.is_nan() || cfg.learning_rate <= 0.0 {
        return Err(Error::Config("probe epochs and learning_rate must be positive".into()));
    }
    if cfg.few_shot_k == Some(0) {
        return Err(Error::Config("few_shot_k must be positive".into()));
    }
    let source = data
        .get(&cfg.train_domain)
        .ok_or_else(|| Error::Config(format!("no data for training domain {}", cfg.train_domain)))?;
    let train = select_training(&source.train, n_classes, cfg)?;
    let d = train[0].vector.len();
    if let Some(r) = train.iter().find(|r| r.vector.len() != d) {
        return Err(Error::Shape {
            op: "probe",
            left: vec![r.vector.len()],
            right: vec![d],
        });
    }

    let n = train.len();
    let x = Tensor::matrix(n, d, train.iter().flat_map(|r| r.vector.iter().copied()).collect())?;
    let mut onehot = vec![0.0; n * n_classes];
    for (i, r) in train.iter().enumerate() {
        onehot[i * n_classes + r.label] = 1.0;
    }
    let onehot = Tensor::matrix(n, n_classes, onehot)?;
    let mut weight = Tensor::zeros(vec![n_classes, d]).with_requires_grad(true);
    let mut bias = Tensor::zeros(vec![1, n_classes]).with_requires_grad(true);
    let mut adam = Adam::new(cfg.learning_rate, [0.9, 0.999], 1e-8);
    for _ in 0..cfg.epochs {
        let mut tape = Tape::new();
        let w = tape.leaf(&weight);
        let b = tape.leaf(&bias);
        let xv = tape.constant(x.clone());
        let y = tape.constant(onehot.clone());
        let logits = tape.matmul_nt(xv, w)?;
        let logits = tape.add_row(logits, b)?;
        let logp = tape.log_softmax_row(logits)?;
        let picked = tape.mul(logp, y)?;
        let total = tape.sum(picked)?;
        let loss = tape.scale(total, -1.0 / n as f64)?;
        let grads = tape.backward(loss)?;
        adam.step(&mut [&mut weight, &mut bias], &[w, b], &grads)?;
    }
    let head = LinearHead { weight, bias };
    let train_accuracy = accuracy(&head, &train)?;

    let mut evals = Vec::with_capacity(cfg.eval_domains.len());
    for &domain in &cfg.eval_domains {
        let set = data
            .get(&domain)
            .ok_or_else(|| Error::Config(format!("no data for evaluation domain {domain}")))?;
        if set.test.is_empty() {
            return Err(Error::Empty("probe evaluation split"));
        }
        let refs: Vec<&EmbeddingRecord> = set.test.iter().collect();
        let scores = refs.iter().map(|r| head.probabilities(&r.vector)).collect::<Result<Vec<_>>>()?;
        let truths: Vec<usize> = refs.iter().map(|r| r.label).collect();
        let (per_class_auc, mean_auc) = macro_auc(&scores, &truths, n_classes)?;
        evals.push(ProbeEval {
            domain,
            n_samples: refs.len(),
            accuracy: accuracy(&head, &refs)?,
            per_class_auc,
            mean_auc,
        });
    }
    Ok(ProbeOutcome {
        head: Some(head),
        n_classes,
        train_size: n,
        train_accuracy,
        evals,
    })
}
