use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{ops, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Frozen weight `W` (C_out×C_in) with a trainable low-rank bypass `B·A`.
///
/// The effective weight is `W + B·A`. `B` starts at zero so an untouched
/// adapter reproduces the frozen layer exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLinear {
    pub weight: Tensor,
    pub lora_a: Tensor,
    pub lora_b: Tensor,
}

/// Tape handles for one [`LoraLinear`].
#[derive(Clone, Copy, Debug)]
pub struct LoraVars {
    pub weight: Var,
    pub lora_a: Var,
    pub lora_b: Var,
}

pub(crate) fn gaussian_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("finite gaussian draws")
}

pub(crate) fn uniform_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Tensor {
    let uniform = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    let data = (0..rows * cols).map(|_| uniform.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("finite uniform draws")
}

impl LoraLinear {
    /// Random frozen weight, A ~ U(±1/√C_in), B = 0.
    pub fn new<R: Rng>(rng: &mut R, c_in: usize, c_out: usize, rank: usize) -> Result<Self> {
        let weight = gaussian_tensor(rng, c_out, c_in, 1.0 / (c_in as f64).sqrt());
        Self::from_frozen(rng, weight, rank)
    }

    /// Wraps an existing frozen weight with a fresh adapter.
    pub fn from_frozen<R: Rng>(rng: &mut R, weight: Tensor, rank: usize) -> Result<Self> {
        let (c_out, c_in) = weight.dims2()?;
        if rank == 0 || rank >= c_in.min(c_out) {
            return Err(Error::Config(format!(
                "LoRA rank {rank} must be in 1..{}",
                c_in.min(c_out)
            )));
        }
        let lora_a = uniform_tensor(rng, rank, c_in, 1.0 / (c_in as f64).sqrt()).with_requires_grad(true);
        let lora_b = Tensor::zeros(vec![c_out, rank]).with_requires_grad(true);
        Ok(Self {
            weight: weight.with_requires_grad(false),
            lora_a,
            lora_b,
        })
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.lora_a.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape) -> LoraVars {
        LoraVars {
            weight: tape.leaf(&self.weight),
            lora_a: tape.leaf(&self.lora_a),
            lora_b: tape.leaf(&self.lora_b),
        }
    }

    /// `W + B·A`, materialized.
    pub fn effective_weight(&self) -> Tensor {
        let ba = ops::matmul(&self.lora_b, &self.lora_a).expect("adapter shapes agree");
        let data = self
            .weight
            .data()
            .iter()
            .zip(ba.data())
            .map(|(w, d)| w + d)
            .collect();
        Tensor::matrix(self.c_out(), self.c_in(), data).expect("finite weights")
    }

    /// Eager `F·Wᵀ + (F·Aᵀ)·Bᵀ` for F with C_in columns.
    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = LoraVars {
            weight: tape.constant(self.weight.clone()),
            lora_a: tape.constant(self.lora_a.clone()),
            lora_b: tape.constant(self.lora_b.clone()),
        };
        let f = tape.constant(input.clone());
        let out = lora_forward(&mut tape, vars, f)?;
        Ok(tape.value(out).clone())
    }
}

fn check_cols(tape: &Tape, input: Var, weight: Var, op: &'static str) -> Result<()> {
    let cols = tape.value(input).dims2()?.1;
    let c_in = tape.value(weight).shape()[1];
    if cols != c_in {
        return Err(Error::Shape {
            op,
            left: tape.value(input).shape().to_vec(),
            right: tape.value(weight).shape().to_vec(),
        });
    }
    Ok(())
}

/// Frozen path plus low-rank bypass: `F·Wᵀ + (F·Aᵀ)·Bᵀ`.
pub fn lora_forward(tape: &mut Tape, layer: LoraVars, input: Var) -> Result<Var> {
    check_cols(tape, input, layer.weight, "lora_forward")?;
    let frozen = tape.matmul_nt(input, layer.weight)?;
    let down = tape.matmul_nt(input, layer.lora_a)?;
    let up = tape.matmul_nt(down, layer.lora_b)?;
    tape.add(frozen, up)
}

/// `F·Wᵀ` without the bypass.
pub fn frozen_forward(tape: &mut Tape, weight: Var, input: Var) -> Result<Var> {
    check_cols(tape, input, weight, "frozen_forward")?;
    tape.matmul_nt(input, weight)
}

/// Single-head self-attention with adapters on the query and value
/// projections. The key projection is frozen and has no adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAttention {
    pub query: LoraLinear,
    pub key: Tensor,
    pub value: LoraLinear,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub query: LoraVars,
    pub key: Var,
    pub value: LoraVars,
}

impl LoraAttention {
    pub fn new<R: Rng>(rng: &mut R, width: usize, rank: usize) -> Result<Self> {
        let query = LoraLinear::new(rng, width, width, rank)?;
        let key = gaussian_tensor(rng, width, width, 1.0 / (width as f64).sqrt());
        let value = LoraLinear::new(rng, width, width, rank)?;
        Ok(Self { query, key, value })
    }

    pub fn width(&self) -> usize {
        self.query.c_out()
    }

    pub fn bind(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            query: self.query.bind(tape),
            key: tape.leaf(&self.key),
            value: self.value.bind(tape),
        }
    }

    /// Eager attention over one token sequence (tokens × C).
    pub fn apply(&self, tokens: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = AttentionVars {
            query: LoraVars {
                weight: tape.constant(self.query.weight.clone()),
                lora_a: tape.constant(self.query.lora_a.clone()),
                lora_b: tape.constant(self.query.lora_b.clone()),
            },
            key: tape.constant(self.key.clone()),
            value: LoraVars {
                weight: tape.constant(self.value.weight.clone()),
                lora_a: tape.constant(self.value.lora_a.clone()),
                lora_b: tape.constant(self.value.lora_b.clone()),
            },
        };
        let (n, _) = tokens.dims2()?;
        let f = tape.constant(tokens.clone());
        let out = lora_attention(&mut tape, vars, f, n, true)?;
        Ok(tape.value(out).clone())
    }
}

/// Attention over `input` holding consecutive blocks of `block` tokens; each
/// block attends only within itself. With `adapters = false` the LoRA
/// bypasses are skipped.
///
/// Scores are `Q·Kᵀ / √C_out` with no additive term before the softmax.
pub fn lora_attention(tape: &mut Tape, att: AttentionVars, input: Var, block: usize, adapters: bool) -> Result<Var> {
    let rows = tape.value(input).dims2()?.0;
    if block == 0 || rows == 0 {
        return Err(Error::Contract("attention needs at least one token".into()));
    }
    if rows % block != 0 {
        return Err(Error::Shape {
            op: "lora_attention",
            left: tape.value(input).shape().to_vec(),
            right: vec![block],
        });
    }
    let (q, v) = if adapters {
        (lora_forward(tape, att.query, input)?, lora_forward(tape, att.value, input)?)
    } else {
        (
            frozen_forward(tape, att.query.weight, input)?,
            frozen_forward(tape, att.value.weight, input)?,
        )
    };
    let k = frozen_forward(tape, att.key, input)?;
    let c_out = tape.value(q).dims2()?.1;
    let scale = 1.0 / (c_out as f64).sqrt();

    let mut outputs = Vec::with_capacity(rows / block);
    for start in (0..rows).step_by(block) {
        let qb = tape.slice_rows(q, start, block)?;
        let kb = tape.slice_rows(k, start, block)?;
        let vb = tape.slice_rows(v, start, block)?;
        let scores = tape.matmul_nt(qb, kb)?;
        let scores = tape.scale(scores, scale)?;
        let weights = tape.softmax_row(scores)?;
        outputs.push(tape.matmul(weights, vb)?);
    }
    if outputs.len() == 1 {
        Ok(outputs[0])
    } else {
        tape.concat_rows(&outputs)
    }
}
