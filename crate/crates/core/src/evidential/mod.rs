//! Loss stack for uncertainty-calibrated contrastive alignment.
//!
//! Given a batch similarity matrix S (row i = image i against every text),
//! the total objective is
//!
//! ```text
//! L_Con = L_Em + (CE_i2t + λ·KL_i2t) + (CE_t2i + λ·KL_t2i)
//! ```
//!
//! where `L_Em` is the symmetric InfoNCE sum, evidence is `softplus(S)`
//! (or `softplus(Sᵀ)` for text→image), α = e + 1, and the CE / KL terms are
//! the closed-form Dirichlet expectations against the diagonal targets.
//!
//! Plain `f64` versions live here; [`graph`] records the same computation on a
//! [`Tape`](crate::autodiff::Tape) for training.

mod dirichlet;
pub mod graph;

use serde::{Deserialize, Serialize};

use crate::autodiff::ops::{self, softplus_scalar};
use crate::autodiff::special::{digamma_unchecked, ln_gamma_unchecked};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use dirichlet::{dirichlet_pdf, OffSimplex, SIMPLEX_TOLERANCE};

/// Cosine similarities must stay inside [-1, 1] up to this slack.
pub const SIMILARITY_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Rows of S: each image against all texts.
    ImageToText,
    /// Rows of Sᵀ: each text against all images.
    TextToImage,
}

/// N×N cosine similarities between unit-norm image and text embeddings.
/// Entry (i, j) compares image i with text j; matched pairs sit on the diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    values: Tensor,
    n: usize,
}

impl SimilarityMatrix {
    pub fn new(values: Tensor) -> Result<Self> {
        let (r, c) = values.dims2()?;
        if r != c || values.shape().len() != 2 {
            return Err(Error::Shape {
                op: "similarity_matrix",
                left: values.shape().to_vec(),
                right: vec![r, r],
            });
        }
        if let Some(v) = values
            .data()
            .iter()
            .find(|v| v.abs() > 1.0 + SIMILARITY_SLACK)
        {
            return Err(Error::Contract(format!(
                "similarity {v} outside [-1, 1]"
            )));
        }
        Ok(Self { values, n: r })
    }

    /// S = I·Tᵀ for row-stacked unit embeddings.
    pub fn from_embeddings(images: &[Vec<f64>], texts: &[Vec<f64>]) -> Result<Self> {
        if images.len() != texts.len() {
            return Err(Error::Shape {
                op: "similarity_matrix",
                left: vec![images.len()],
                right: vec![texts.len()],
            });
        }
        let i = Tensor::from_rows(images)?;
        let t = Tensor::from_rows(texts)?;
        let (n, d) = i.dims2()?;
        let (_, d2) = t.dims2()?;
        if d != d2 {
            return Err(Error::Shape {
                op: "similarity_matrix",
                left: i.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        let data = ops::matmul_nt_raw(i.data(), n, d, t.data(), n);
        Self::new(Tensor::matrix(n, n, data)?)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.data()[i * self.n + j]
    }

    /// Row-major entries as seen from `direction` (Sᵀ for text→image).
    pub fn oriented(&self, direction: Direction) -> Vec<f64> {
        match direction {
            Direction::ImageToText => self.values.data().to_vec(),
            Direction::TextToImage => ops::transpose_raw(self.values.data(), self.n, self.n),
        }
    }
}

/// Options for the contrastive term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveOptions {
    /// Logits are S / temperature. 1.0 keeps the plain cosine logits.
    pub temperature: f64,
    /// Divide the summed InfoNCE terms by N.
    pub mean_reduction: bool,
}

impl Default for ContrastiveOptions {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            mean_reduction: false,
        }
    }
}

impl ContrastiveOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Symmetric InfoNCE: ½(Σᵢ −log softmax(Sᵢ·)ᵢ + Σᵢ −log softmax(S·ᵢ)ᵢ).
pub fn contrastive_loss(sim: &SimilarityMatrix, opts: &ContrastiveOptions) -> f64 {
    let n = sim.n;
    let mut total = 0.0;
    for dir in [Direction::ImageToText, Direction::TextToImage] {
        let logits: Vec<f64> = sim
            .oriented(dir)
            .iter()
            .map(|v| v / opts.temperature)
            .collect();
        let logp = ops::log_softmax_rows_raw(&logits, n, n);
        total -= (0..n).map(|i| logp[i * n + i]).sum::<f64>();
    }
    let loss = 0.5 * total;
    if opts.mean_reduction {
        loss / n as f64
    } else {
        loss
    }
}

/// Softplus evidence, N×N, oriented by `direction`.
pub fn evidence_from_similarity(sim: &SimilarityMatrix, direction: Direction) -> Tensor {
    let data = sim.oriented(direction).into_iter().map(softplus_scalar).collect();
    Tensor::matrix(sim.n, sim.n, data).expect("softplus of bounded similarities is finite")
}

/// Dirichlet opinion built from one evidence row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirichletRow {
    pub evidence: Vec<f64>,
    pub alpha: Vec<f64>,
    pub strength: f64,
    pub belief: Vec<f64>,
    pub uncertainty: f64,
}

impl DirichletRow {
    /// Σ b + u; equals 1 up to rounding.
    pub fn mass(&self) -> f64 {
        self.belief.iter().sum::<f64>() + self.uncertainty
    }
}

/// α = e + 1, S = Σα, b = e / S, u = N / S with N = `evidence.len()`.
pub fn dirichlet_params(evidence: &[f64]) -> Result<DirichletRow> {
    if evidence.is_empty() {
        return Err(Error::Empty("evidence row"));
    }
    if let Some(bad) = evidence.iter().find(|&&e| !(e > 0.0 && e.is_finite())) {
        return Err(Error::Contract(format!("evidence must be positive, got {bad}")));
    }
    let alpha: Vec<f64> = evidence.iter().map(|e| e + 1.0).collect();
    let strength: f64 = alpha.iter().sum();
    let belief = evidence.iter().map(|e| e / strength).collect();
    Ok(DirichletRow {
        evidence: evidence.to_vec(),
        alpha,
        strength,
        belief,
        uncertainty: evidence.len() as f64 / strength,
    })
}

/// Per-direction Dirichlet opinions for a whole batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidentialOutput {
    pub direction: Direction,
    pub rows: Vec<DirichletRow>,
}

impl EvidentialOutput {
    pub fn uncertainties(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.uncertainty).collect()
    }
}

pub fn evidential_output(sim: &SimilarityMatrix, direction: Direction) -> Result<EvidentialOutput> {
    let e = evidence_from_similarity(sim, direction);
    let rows = e
        .data()
        .chunks(sim.n)
        .map(dirichlet_params)
        .collect::<Result<Vec<_>>>()?;
    Ok(EvidentialOutput { direction, rows })
}

fn check_alpha(alpha: &Tensor, targets: &[usize]) -> Result<(usize, usize)> {
    let (rows, cols) = alpha.dims2()?;
    if targets.len() != rows {
        return Err(Error::Shape {
            op: "dirichlet_loss",
            left: alpha.shape().to_vec(),
            right: vec![targets.len()],
        });
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
        return Err(Error::Contract(format!("target {t} out of range for {cols} classes")));
    }
    if let Some(a) = alpha.data().iter().find(|&&a| a < 1.0) {
        return Err(Error::Domain(format!("Dirichlet concentration {a} < 1")));
    }
    Ok((rows, cols))
}

/// Expected cross-entropy under Dir(α): Σ_rows ψ(S_row) − ψ(α_row,target).
pub fn dirichlet_ce_loss(alpha: &Tensor, targets: &[usize]) -> Result<f64> {
    let (_, cols) = check_alpha(alpha, targets)?;
    Ok(alpha
        .data()
        .chunks(cols)
        .zip(targets)
        .map(|(row, &t)| {
            let s: f64 = row.iter().sum();
            digamma_unchecked(s) - digamma_unchecked(row[t])
        })
        .sum())
}

/// KL(Dir(α̂) ‖ Dir(1, …, 1)) summed over rows, where α̂ pins the target
/// coordinate of each row to 1.
pub fn dirichlet_kl_loss(alpha: &Tensor, targets: &[usize]) -> Result<f64> {
    let (_, cols) = check_alpha(alpha, targets)?;
    let ln_gamma_k = ln_gamma_unchecked(cols as f64);
    Ok(alpha
        .data()
        .chunks(cols)
        .zip(targets)
        .map(|(row, &t)| {
            let adjusted: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(k, &a)| if k == t { 1.0 } else { a })
                .collect();
            kl_to_uniform(&adjusted, ln_gamma_k)
        })
        .sum())
}

fn kl_to_uniform(alpha: &[f64], ln_gamma_k: f64) -> f64 {
    let s: f64 = alpha.iter().sum();
    let psi_s = digamma_unchecked(s);
    let mut kl = ln_gamma_unchecked(s) - ln_gamma_k;
    for &a in alpha {
        kl -= ln_gamma_unchecked(a);
        kl += (a - 1.0) * (digamma_unchecked(a) - psi_s);
    }
    kl
}

/// KL annealing weight: min(1, epoch / t_anneal). `t_anneal = 0` means λ = 1.
pub fn lambda_schedule(epoch: usize, t_anneal: usize) -> f64 {
    if t_anneal == 0 {
        1.0
    } else {
        (epoch as f64 / t_anneal as f64).min(1.0)
    }
}

/// Every loss component, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_Em")]
    pub l_em: f64,
    #[serde(rename = "CE_i2t")]
    pub ce_i2t: f64,
    #[serde(rename = "KL_i2t")]
    pub kl_i2t: f64,
    #[serde(rename = "CE_t2i")]
    pub ce_t2i: f64,
    #[serde(rename = "KL_t2i")]
    pub kl_t2i: f64,
    pub lambda: f64,
    #[serde(rename = "L_Con")]
    pub l_con: f64,
}

impl LossBreakdown {
    /// Reassembles L_Con from its parts.
    pub fn recombine(&self) -> f64 {
        self.l_em
            + (self.ce_i2t + self.lambda * self.kl_i2t)
            + (self.ce_t2i + self.lambda * self.kl_t2i)
    }

    /// Component-wise mean, used for epoch summaries.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = LossBreakdown::default();
        for b in items {
            acc.l_em += b.l_em;
            acc.ce_i2t += b.ce_i2t;
            acc.kl_i2t += b.kl_i2t;
            acc.ce_t2i += b.ce_t2i;
            acc.kl_t2i += b.kl_t2i;
            acc.lambda += b.lambda;
            acc.l_con += b.l_con;
        }
        LossBreakdown {
            l_em: acc.l_em / n,
            ce_i2t: acc.ce_i2t / n,
            kl_i2t: acc.kl_i2t / n,
            ce_t2i: acc.ce_t2i / n,
            kl_t2i: acc.kl_t2i / n,
            lambda: acc.lambda / n,
            l_con: acc.l_con / n,
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::Contract(format!("lambda must be in [0, 1], got {lambda}")))
    }
}

/// Full objective with diagonal targets, all components reported.
pub fn total_loss(sim: &SimilarityMatrix, lambda: f64, opts: &ContrastiveOptions) -> Result<LossBreakdown> {
    check_lambda(lambda)?;
    opts.validate()?;
    let targets: Vec<usize> = (0..sim.n).collect();
    let alpha_of = |dir| -> Result<Tensor> {
        let e = evidence_from_similarity(sim, dir);
        let data = e.data().iter().map(|v| v + 1.0).collect();
        Tensor::matrix(sim.n, sim.n, data)
    };
    let a_i2t = alpha_of(Direction::ImageToText)?;
    let a_t2i = alpha_of(Direction::TextToImage)?;
    let mut out = LossBreakdown {
        l_em: contrastive_loss(sim, opts),
        ce_i2t: dirichlet_ce_loss(&a_i2t, &targets)?,
        kl_i2t: dirichlet_kl_loss(&a_i2t, &targets)?,
        ce_t2i: dirichlet_ce_loss(&a_t2i, &targets)?,
        kl_t2i: dirichlet_kl_loss(&a_t2i, &targets)?,
        lambda,
        l_con: 0.0,
    };
    out.l_con = out.recombine();
    Ok(out)
}

/// Contrastive term only; evidential components are zero.
pub fn contrastive_only_loss(sim: &SimilarityMatrix, opts: &ContrastiveOptions) -> Result<LossBreakdown> {
    opts.validate()?;
    let l_em = contrastive_loss(sim, opts);
    Ok(LossBreakdown {
        l_em,
        l_con: l_em,
        ..LossBreakdown::default()
    })
}
