//! The loss stack recorded on a tape, for training.

use super::ContrastiveOptions;
use crate::autodiff::special::ln_gamma_unchecked;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which terms make up the training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Contrastive term plus both evidential directions.
    #[default]
    Full,
    /// Contrastive term only (ablation).
    EmOnly,
}

/// Tape handles for every component of the objective. In
/// [`LossMode::EmOnly`] the evidential handles are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_em: Var,
    pub ce_i2t: Option<Var>,
    pub kl_i2t: Option<Var>,
    pub ce_t2i: Option<Var>,
    pub kl_t2i: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape, lambda: f64) -> Result<super::LossBreakdown> {
        let get = |v: Option<Var>| -> Result<f64> { v.map_or(Ok(0.0), |v| tape.scalar(v)) };
        Ok(super::LossBreakdown {
            l_em: tape.scalar(self.l_em)?,
            ce_i2t: get(self.ce_i2t)?,
            kl_i2t: get(self.kl_i2t)?,
            ce_t2i: get(self.ce_t2i)?,
            kl_t2i: get(self.kl_t2i)?,
            lambda,
            l_con: tape.scalar(self.total)?,
        })
    }
}

/// S = I·Tᵀ for row-stacked unit embeddings.
pub fn similarity(tape: &mut Tape, images: Var, texts: Var) -> Result<Var> {
    tape.matmul_nt(images, texts)
}

fn square_dim(tape: &Tape, sim: Var) -> Result<usize> {
    let shape = tape.value(sim).shape();
    match shape {
        [r, c] if r == c => Ok(*r),
        _ => Err(Error::Shape {
            op: "similarity",
            left: shape.to_vec(),
            right: vec![],
        }),
    }
}

/// −Σᵢ log softmax(rowᵢ)ᵢ over the rows of `logits`.
fn infonce_rows(tape: &mut Tape, logits: Var) -> Result<Var> {
    let logp = tape.log_softmax_row(logits)?;
    let d = tape.diag(logp)?;
    let s = tape.sum(d)?;
    tape.scale(s, -1.0)
}

pub fn contrastive_loss(tape: &mut Tape, sim: Var, opts: &ContrastiveOptions) -> Result<Var> {
    let n = square_dim(tape, sim)?;
    let logits = if opts.temperature == 1.0 {
        sim
    } else {
        tape.scale(sim, 1.0 / opts.temperature)?
    };
    let i2t = infonce_rows(tape, logits)?;
    let logits_t = tape.transpose(logits)?;
    let t2i = infonce_rows(tape, logits_t)?;
    let both = tape.add(i2t, t2i)?;
    let factor = if opts.mean_reduction { 0.5 / n as f64 } else { 0.5 };
    tape.scale(both, factor)
}

/// α = softplus(oriented S) + 1.
pub fn alpha_from_similarity(tape: &mut Tape, oriented_sim: Var) -> Result<Var> {
    let e = tape.softplus(oriented_sim)?;
    tape.add_scalar(e, 1.0)
}

/// Σ_rows ψ(S_row) − ψ(α_row,row).
pub fn dirichlet_ce(tape: &mut Tape, alpha: Var) -> Result<Var> {
    square_dim(tape, alpha)?;
    let strength = tape.sum_rows(alpha)?;
    let psi_s = tape.digamma(strength)?;
    let diag = tape.diag(alpha)?;
    let psi_t = tape.digamma(diag)?;
    let diff = tape.sub(psi_s, psi_t)?;
    tape.sum(diff)
}

fn identity(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    (0..n).for_each(|i| data[i * n + i] = 1.0);
    Tensor::matrix(n, n, data).expect("identity")
}

/// Σ_rows KL(Dir(α̂) ‖ Dir(1)) with the diagonal of α̂ pinned to 1.
pub fn dirichlet_kl(tape: &mut Tape, alpha: Var) -> Result<Var> {
    let n = square_dim(tape, alpha)?;
    let eye = identity(n);
    let off_mask = {
        let data = eye.data().iter().map(|v| 1.0 - v).collect();
        Tensor::matrix(n, n, data)?
    };
    let off_mask = tape.constant(off_mask);
    let eye = tape.constant(eye);
    let masked = tape.mul(alpha, off_mask)?;
    let adjusted = tape.add(masked, eye)?;

    let strength = tape.sum_rows(adjusted)?;
    let lg_s = tape.ln_gamma(strength)?;
    let lg_s = tape.sum(lg_s)?;
    let lg_a = tape.ln_gamma(adjusted)?;
    let lg_a = tape.sum(lg_a)?;
    let psi_a = tape.digamma(adjusted)?;
    let psi_s = tape.digamma(strength)?;
    let psi_s = tape.broadcast_col(psi_s, n)?;
    let psi_diff = tape.sub(psi_a, psi_s)?;
    let excess = tape.add_scalar(adjusted, -1.0)?;
    let cross = tape.mul(excess, psi_diff)?;
    let cross = tape.sum(cross)?;

    let normalizer = n as f64 * ln_gamma_unchecked(n as f64);
    let head = tape.sub(lg_s, lg_a)?;
    let head = tape.add_scalar(head, -normalizer)?;
    tape.add(head, cross)
}

/// Builds the training objective from a similarity matrix.
pub fn total_loss(
    tape: &mut Tape,
    sim: Var,
    lambda: f64,
    opts: &ContrastiveOptions,
    mode: LossMode,
) -> Result<LossVars> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Contract(format!("lambda must be in [0, 1], got {lambda}")));
    }
    opts.validate()?;
    let l_em = contrastive_loss(tape, sim, opts)?;
    if mode == LossMode::EmOnly {
        return Ok(LossVars {
            l_em,
            ce_i2t: None,
            kl_i2t: None,
            ce_t2i: None,
            kl_t2i: None,
            total: l_em,
        });
    }

    let alpha_i2t = alpha_from_similarity(tape, sim)?;
    let sim_t = tape.transpose(sim)?;
    let alpha_t2i = alpha_from_similarity(tape, sim_t)?;
    let ce_i2t = dirichlet_ce(tape, alpha_i2t)?;
    let kl_i2t = dirichlet_kl(tape, alpha_i2t)?;
    let ce_t2i = dirichlet_ce(tape, alpha_t2i)?;
    let kl_t2i = dirichlet_kl(tape, alpha_t2i)?;

    let mut total = tape.add(l_em, ce_i2t)?;
    total = tape.add(total, ce_t2i)?;
    if lambda != 0.0 {
        let kl = tape.add(kl_i2t, kl_t2i)?;
        let kl = tape.scale(kl, lambda)?;
        total = tape.add(total, kl)?;
    }
    Ok(LossVars {
        l_em,
        ce_i2t: Some(ce_i2t),
        kl_i2t: Some(kl_i2t),
        ce_t2i: Some(ce_t2i),
        kl_t2i: Some(kl_t2i),
        total,
    })
}
