//! Contrastive pretraining loop, checkpoints, and linear-probe protocols.

mod checkpoint;
mod probe;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::datagen::{PairRecord, Split};
use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::evidential::graph::LossMode;
use crate::evidential::{lambda_schedule, ContrastiveOptions, LossBreakdown};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use probe::{train_linear_probe, DomainData, LinearHead, ProbeConfig, ProbeEval, ProbeOutcome};

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt.json";
pub const BEST_CHECKPOINT: &str = "best.ckpt.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    pub t_anneal: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub temperature: f64,
    pub mean_reduction: bool,
    /// Fill batches past the class count with repeated classes. Off by
    /// default: repeated texts are scored as negatives of each other.
    pub allow_duplicate_classes: bool,
    /// Where the log and checkpoints go; nothing is written when unset.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 200,
            learning_rate: 1e-3,
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            t_anneal: 10,
            seed: 0,
            loss_mode: LossMode::Full,
            temperature: 1.0,
            mean_reduction: false,
            allow_duplicate_classes: false,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.adam_betas.iter().any(|b| !(0.0..1.0).contains(b)) || self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::Config("adam betas must be in [0, 1) and eps positive".into()));
        }
        self.contrastive().validate()
    }

    pub fn contrastive(&self) -> ContrastiveOptions {
        ContrastiveOptions {
            temperature: self.temperature,
            mean_reduction: self.mean_reduction,
        }
    }
}

/// Adam over the trainable parameters of one model, addressed by position.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    betas: [f64; 2],
    eps: f64,
    step: i32,
    moments: BTreeMap<usize, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, betas: [f64; 2], eps: f64) -> Self {
        Self {
            lr,
            betas,
            eps,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update. `params[i]` takes `grads.get(vars[i])`; frozen
    /// tensors are skipped, and a missing gradient counts as zero.
    pub fn step(&mut self, params: &mut [&mut Tensor], vars: &[Var], grads: &Gradients) -> Result<()> {
        self.step += 1;
        let [b1, b2] = self.betas;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (i, (param, var)) in params.iter_mut().zip(vars).enumerate() {
            if !param.requires_grad() {
                continue;
            }
            let n = param.numel();
            let (m, v) = self.moments.entry(i).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let zeros;
            let g = match grads.get(*var) {
                Some(g) => g,
                None => {
                    zeros = vec![0.0; n];
                    &zeros
                }
            };
            let updated: Vec<f64> = param
                .data()
                .iter()
                .enumerate()
                .map(|(j, w)| {
                    m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                    v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                    w - self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps)
                })
                .collect();
            param.assign(updated)?;
        }
        Ok(())
    }
}

/// Groups `classes[i]` into batches of at most `batch_size`.
///
/// No batch holds two items of one class, so with fewer classes than
/// `batch_size` batches shrink to the class count. With `allow_duplicates`
/// such batches are filled instead, repeating classes as evenly as possible.
/// Batches that would hold fewer than two items are dropped.
pub fn make_batches(classes: &[usize], batch_size: usize, allow_duplicates: bool, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in classes.iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    let distinct = !allow_duplicates || groups.len() >= batch_size;
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    for g in &mut groups {
        g.shuffle(rng);
    }
    let mut batches = Vec::new();
    loop {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            let mut order: Vec<usize> = (0..groups.len()).filter(|&c| !groups[c].is_empty()).collect();
            if order.is_empty() {
                break;
            }
            order.shuffle(rng);
            order.sort_by_key(|&c| std::cmp::Reverse(groups[c].len()));
            let room = batch_size - batch.len();
            for &c in order.iter().take(room) {
                batch.push(groups[c].pop().expect("nonempty group"));
            }
            if distinct {
                break;
            }
        }
        if batch.len() < 2 {
            break;
        }
        batches.push(batch);
    }
    batches.shuffle(rng);
    batches
}

/// One line of the training log. `epoch` counts from 1; the λ used in
/// epoch `e` is the schedule value after `e - 1` completed epochs.
/// `val_L_Con` is always the fully annealed objective (λ = 1), so it is
/// comparable across epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(flatten)]
    pub train: LossBreakdown,
    #[serde(rename = "val_L_Con")]
    pub val_l_con: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: DualEncoder,
    pub best: DualEncoder,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
}

fn divergence(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) | Error::InvalidTensor(_) | Error::Degenerate(_) => Error::Divergence {
            epoch,
            reason: e.to_string(),
        },
        other => other,
    }
}

struct Batch<'a> {
    images: Vec<&'a [f64]>,
    texts: Vec<&'a [usize]>,
}

fn gather<'a>(pairs: &[&'a PairRecord], idx: &[usize]) -> Batch<'a> {
    Batch {
        images: idx.iter().map(|&i| pairs[i].image.as_slice()).collect(),
        texts: idx.iter().map(|&i| pairs[i].tokens.as_slice()).collect(),
    }
}

/// One optimizer step on one batch; returns the pre-step losses.
pub fn train_step(
    encoder: &mut DualEncoder,
    adam: &mut Adam,
    images: &[&[f64]],
    texts: &[&[usize]],
    lambda: f64,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let vars = encoder.bind(&mut tape);
    let loss = encoder.objective(&mut tape, &vars, images, texts, lambda, &cfg.contrastive(), cfg.loss_mode)?;
    let breakdown = loss.breakdown(&tape, lambda)?;
    let grads = tape.backward(loss.total)?;
    let order = vars.in_order();
    let mut params: Vec<&mut Tensor> = encoder.params_mut().into_iter().map(|(_, t)| t).collect();
    adam.step(&mut params, &order, &grads)?;
    Ok(breakdown)
}

fn eval_loss(encoder: &DualEncoder, batches: &[Batch], lambda: f64, cfg: &TrainConfig) -> Result<f64> {
    let mut parts = Vec::with_capacity(batches.len());
    for b in batches {
        let mut tape = Tape::new();
        let vars = encoder.bind_frozen(&mut tape);
        let loss = encoder.objective(&mut tape, &vars, &b.images, &b.texts, lambda, &cfg.contrastive(), cfg.loss_mode)?;
        parts.push(loss.breakdown(&tape, lambda)?);
    }
    Ok(LossBreakdown::mean(&parts).l_con)
}

fn split_of(records: &[PairRecord], split: Split) -> Vec<&PairRecord> {
    records.iter().filter(|r| r.split == split).collect()
}

/// Trains on the `train` split, selects on `val` loss.
pub fn train_contrastive(records: &[PairRecord], encoder: DualEncoder, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = split_of(records, Split::Train);
    let val = split_of(records, Split::Val);
    if train.len() < 2 {
        return Err(Error::Empty("training split"));
    }
    if val.len() < 2 {
        return Err(Error::Empty("validation split"));
    }
    let dim = encoder.config().image_dim;
    if let Some(r) = records.iter().find(|r| r.image.len() != dim) {
        return Err(Error::Shape {
            op: "train_contrastive",
            left: vec![r.image.len()],
            right: vec![dim],
        });
    }

    let mut log = match &cfg.checkpoint_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(TRAIN_LOG);
            Some((BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?), path))
        }
        None => None,
    };

    let frozen_before = encoder.frozen_checksum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train_classes: Vec<usize> = train.iter().map(|r| r.assigned_class).collect();
    let val_classes: Vec<usize> = val.iter().map(|r| r.assigned_class).collect();
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7661_6c00);
    let val_batches: Vec<Batch> = make_batches(&val_classes, cfg.batch_size, cfg.allow_duplicate_classes, &mut val_rng)
        .iter()
        .map(|idx| gather(&val, idx))
        .collect();
    if val_batches.is_empty() {
        return Err(Error::Empty("validation batches"));
    }

    let mut model = encoder;
    let mut adam = Adam::new(cfg.learning_rate, cfg.adam_betas, cfg.adam_eps);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_val = f64::INFINITY;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let lambda = lambda_schedule(epoch - 1, cfg.t_anneal);
        let mut parts = Vec::new();
        for idx in make_batches(&train_classes, cfg.batch_size, cfg.allow_duplicate_classes, &mut rng) {
            let b = gather(&train, &idx);
            let step = train_step(&mut model, &mut adam, &b.images, &b.texts, lambda, cfg).map_err(divergence(epoch))?;
            parts.push(step);
        }
        let summary = LossBreakdown::mean(&parts);
        let val_l_con = eval_loss(&model, &val_batches, 1.0, cfg).map_err(divergence(epoch))?;
        if !summary.l_con.is_finite() || !val_l_con.is_finite() {
            return Err(Error::Divergence {
                epoch,
                reason: "loss is not finite".into(),
            });
        }
        let entry = EpochLog {
            epoch,
            train: summary,
            val_l_con,
        };
        if let Some((out, path)) = &mut log {
            serde_json::to_writer(&mut *out, &entry)?;
            out.write_all(b"\n").map_err(|e| Error::io(&*path, e))?;
        }
        log::debug!("epoch {epoch}: L_Con {:.6} val {:.6}", summary.l_con, val_l_con);
        if val_l_con < best_val {
            best_val = val_l_con;
            best_epoch = epoch;
            best = model.clone();
        }
        history.push(entry);
    }

    if model.frozen_checksum() != frozen_before {
        return Err(Error::Contract("frozen backbone weights changed during training".into()));
    }
    if let Some((mut out, path)) = log {
        out.flush().map_err(|e| Error::io(&path, e))?;
        let dir = cfg.checkpoint_dir.as_ref().expect("log implies a directory");
        save_checkpoint(&dir.join(FINAL_CHECKPOINT), &model)?;
        save_checkpoint(&dir.join(BEST_CHECKPOINT), &best)?;
    }
    Ok(TrainOutcome {
        last: model,
        best,
        best_epoch,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_hold_distinct_classes_when_possible() {
        let classes: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = make_batches(&classes, 8, false, &mut rng);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        for b in &batches {
            let mut cs: Vec<usize> = b.iter().map(|&i| classes[i]).collect();
            cs.sort_unstable();
            cs.dedup();
            assert_eq!(cs.len(), b.len());
            assert!(b.len() >= 2);
        }
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), batches.iter().map(Vec::len).sum::<usize>());
    }

    #[test]
    fn batches_balance_classes_when_fewer_than_batch() {
        let classes: Vec<usize> = (0..64).map(|i| i % 8).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = make_batches(&classes, 32, true, &mut rng);
        assert_eq!(batches.len(), 2);
        for b in &batches {
            for c in 0..8 {
                assert_eq!(b.iter().filter(|&&i| classes[i] == c).count(), 4);
            }
        }
    }

    #[test]
    fn batches_shrink_to_class_count_by_default() {
        let classes: Vec<usize> = (0..64).map(|i| i % 8).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = make_batches(&classes, 32, false, &mut rng);
        assert_eq!(batches.len(), 8);
        assert!(batches.iter().all(|b| b.len() == 8));
    }

    #[test]
    fn single_leftover_is_dropped() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batches = make_batches(&[0, 1, 2], 2, false, &mut rng);
        assert_eq!(batches.len(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut t = Tensor::vector(vec![1.0, -2.0]).unwrap().with_requires_grad(true);
        let mut tape = Tape::new();
        let v = tape.leaf(&t);
        let sq = tape.mul(v, v).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut adam = Adam::new(0.1, [0.9, 0.999], 1e-8);
        adam.step(&mut [&mut t], &[v], &grads).unwrap();
        assert!((t.data()[0] - 0.9).abs() < 1e-6);
        assert!((t.data()[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn config_guards() {
        let bad = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
