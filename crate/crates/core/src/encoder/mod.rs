//! Dual encoders projecting images and texts onto a shared unit sphere.
//!
//! Image tower: a frozen linear token embedding turns the input vector into
//! `n_tokens` tokens of width `width`, one [`LoraAttention`] layer mixes
//! them, tokens are mean-pooled, and a trainable linear head maps to
//! `embed_dim`. Only the head and the LoRA factors train.
//!
//! Text tower: a trainable token-embedding table, pooled over the sequence,
//! followed by a trainable linear head.

mod lora;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::evidential::graph::{self, LossMode, LossVars};
use crate::evidential::ContrastiveOptions;

pub use lora::{
    frozen_forward, lora_attention, lora_forward, AttentionVars, LoraAttention, LoraLinear, LoraVars,
};
use lora::{gaussian_tensor, uniform_tensor};

/// Unit-norm vector of width `embed_dim`.
pub type Embedding = Vec<f64>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextPooling {
    /// Mean over tokens; insensitive to token order.
    #[default]
    Mean,
    /// Weights proportional to 1/(position + 1); order-sensitive.
    Positional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_dim: usize,
    pub n_tokens: usize,
    pub width: usize,
    pub lora_rank: usize,
    pub vocab_size: usize,
    pub text_width: usize,
    pub embed_dim: usize,
    pub text_pooling: TextPooling,
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_dim: 16,
            n_tokens: 4,
            width: 32,
            lora_rank: 4,
            vocab_size: 16,
            text_width: 32,
            embed_dim: 32,
            text_pooling: TextPooling::Mean,
            init_seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("image_dim", self.image_dim),
            ("n_tokens", self.n_tokens),
            ("width", self.width),
            ("vocab_size", self.vocab_size),
            ("text_width", self.text_width),
            ("embed_dim", self.embed_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be positive")));
        }
        if self.lora_rank == 0 || self.lora_rank >= self.width {
            return Err(Error::Config(format!(
                "lora_rank {} must be in 1..{}",
                self.lora_rank, self.width
            )));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Tape handles for every encoder parameter, in [`DualEncoder::params`] order.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub token_embed: Var,
    pub token_bias: Var,
    pub attention: AttentionVars,
    pub image_head_w: Var,
    pub image_head_b: Var,
    pub text_embed: Var,
    pub text_head_w: Var,
    pub text_head_b: Var,
}

impl EncoderVars {
    pub fn in_order(&self) -> Vec<Var> {
        let a = &self.attention;
        vec![
            self.token_embed,
            self.token_bias,
            a.query.weight,
            a.query.lora_a,
            a.query.lora_b,
            a.key,
            a.value.weight,
            a.value.lora_a,
            a.value.lora_b,
            self.image_head_w,
            self.image_head_b,
            self.text_embed,
            self.text_head_w,
            self.text_head_b,
        ]
    }
}

/// Names of all parameters, in storage order.
pub const PARAM_NAMES: [&str; 14] = [
    "image.token_embed",
    "image.token_bias",
    "image.attn.q.weight",
    "image.attn.q.lora_a",
    "image.attn.q.lora_b",
    "image.attn.k.weight",
    "image.attn.v.weight",
    "image.attn.v.lora_a",
    "image.attn.v.lora_b",
    "image.head.weight",
    "image.head.bias",
    "text.embedding",
    "text.head.weight",
    "text.head.bias",
];

#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoder {
    config: EncoderConfig,
    token_embed: Tensor,
    token_bias: Tensor,
    attention: LoraAttention,
    image_head_w: Tensor,
    image_head_b: Tensor,
    text_embed: Tensor,
    text_head_w: Tensor,
    text_head_b: Tensor,
}

impl DualEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let c = config.width;
        let token_embed = gaussian_tensor(&mut rng, config.n_tokens * c, config.image_dim, 1.0 / (config.image_dim as f64).sqrt());
        let token_bias = gaussian_tensor(&mut rng, 1, config.n_tokens * c, 0.1);
        let attention = LoraAttention::new(&mut rng, c, config.lora_rank)?;
        let head_bound = 1.0 / (c as f64).sqrt();
        let image_head_w = uniform_tensor(&mut rng, config.embed_dim, c, head_bound).with_requires_grad(true);
        let image_head_b = Tensor::zeros(vec![1, config.embed_dim]).with_requires_grad(true);
        let text_embed = gaussian_tensor(&mut rng, config.vocab_size, config.text_width, 1.0).with_requires_grad(true);
        let text_bound = 1.0 / (config.text_width as f64).sqrt();
        let text_head_w = uniform_tensor(&mut rng, config.embed_dim, config.text_width, text_bound).with_requires_grad(true);
        let text_head_b = Tensor::zeros(vec![1, config.embed_dim]).with_requires_grad(true);
        Ok(Self {
            config,
            token_embed,
            token_bias,
            attention,
            image_head_w,
            image_head_b,
            text_embed,
            text_head_w,
            text_head_b,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn attention(&self) -> &LoraAttention {
        &self.attention
    }

    /// All parameters, paired with [`PARAM_NAMES`].
    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        let a = &self.attention;
        let tensors = [
            &self.token_embed,
            &self.token_bias,
            &a.query.weight,
            &a.query.lora_a,
            &a.query.lora_b,
            &a.key,
            &a.value.weight,
            &a.value.lora_a,
            &a.value.lora_b,
            &self.image_head_w,
            &self.image_head_b,
            &self.text_embed,
            &self.text_head_w,
            &self.text_head_b,
        ];
        PARAM_NAMES.into_iter().zip(tensors).collect()
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let a = &mut self.attention;
        let tensors = [
            &mut self.token_embed,
            &mut self.token_bias,
            &mut a.query.weight,
            &mut a.query.lora_a,
            &mut a.query.lora_b,
            &mut a.key,
            &mut a.value.weight,
            &mut a.value.lora_a,
            &mut a.value.lora_b,
            &mut self.image_head_w,
            &mut self.image_head_b,
            &mut self.text_embed,
            &mut self.text_head_w,
            &mut self.text_head_b,
        ];
        PARAM_NAMES.into_iter().zip(tensors).collect()
    }

    /// Names of the parameters that receive gradient.
    pub fn trainable_names(&self) -> Vec<&'static str> {
        self.params()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, _)| n)
            .collect()
    }

    /// SHA-256 over the frozen backbone weights.
    pub fn frozen_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.params() {
            if t.requires_grad() {
                continue;
            }
            hasher.update(name.as_bytes());
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> EncoderVars {
        EncoderVars {
            token_embed: tape.leaf(&self.token_embed),
            token_bias: tape.leaf(&self.token_bias),
            attention: self.attention.bind(tape),
            image_head_w: tape.leaf(&self.image_head_w),
            image_head_b: tape.leaf(&self.image_head_b),
            text_embed: tape.leaf(&self.text_embed),
            text_head_w: tape.leaf(&self.text_head_w),
            text_head_b: tape.leaf(&self.text_head_b),
        }
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> EncoderVars {
        let c = |tape: &mut Tape, t: &Tensor| tape.constant(t.clone());
        let a = &self.attention;
        EncoderVars {
            token_embed: c(tape, &self.token_embed),
            token_bias: c(tape, &self.token_bias),
            attention: AttentionVars {
                query: LoraVars {
                    weight: c(tape, &a.query.weight),
                    lora_a: c(tape, &a.query.lora_a),
                    lora_b: c(tape, &a.query.lora_b),
                },
                key: c(tape, &a.key),
                value: LoraVars {
                    weight: c(tape, &a.value.weight),
                    lora_a: c(tape, &a.value.lora_a),
                    lora_b: c(tape, &a.value.lora_b),
                },
            },
            image_head_w: c(tape, &self.image_head_w),
            image_head_b: c(tape, &self.image_head_b),
            text_embed: c(tape, &self.text_embed),
            text_head_w: c(tape, &self.text_head_w),
            text_head_b: c(tape, &self.text_head_b),
        }
    }

    fn image_batch(&self, images: &[&[f64]]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::Empty("image batch"));
        }
        if let Some(bad) = images.iter().find(|x| x.len() != self.config.image_dim) {
            return Err(Error::Shape {
                op: "encode_image",
                left: vec![bad.len()],
                right: vec![self.config.image_dim],
            });
        }
        Tensor::matrix(images.len(), self.config.image_dim, images.concat())
    }

    /// N images → N×embed_dim unit rows. `adapters = false` runs the frozen
    /// backbone without the LoRA bypasses.
    pub fn image_graph(&self, tape: &mut Tape, vars: &EncoderVars, images: &[&[f64]], adapters: bool) -> Result<Var> {
        let batch = self.image_batch(images)?;
        let n = images.len();
        let t = self.config.n_tokens;
        let c = self.config.width;
        let x = tape.constant(batch);
        let tokens = tape.matmul_nt(x, vars.token_embed)?;
        let tokens = tape.add_row(tokens, vars.token_bias)?;
        let tokens = tape.reshape(tokens, vec![n * t, c])?;
        let mixed = lora_attention(tape, vars.attention, tokens, t, adapters)?;
        let pool = tape.constant(block_mean_pool(n, t));
        let pooled = tape.matmul(pool, mixed)?;
        let projected = tape.matmul_nt(pooled, vars.image_head_w)?;
        let projected = tape.add_row(projected, vars.image_head_b)?;
        tape.l2_normalize(projected)
    }

    /// N token sequences → N×embed_dim unit rows.
    pub fn text_graph(&self, tape: &mut Tape, vars: &EncoderVars, texts: &[&[usize]]) -> Result<Var> {
        if texts.is_empty() {
            return Err(Error::Empty("text batch"));
        }
        if texts.iter().any(|t| t.is_empty()) {
            return Err(Error::Empty("token sequence"));
        }
        let vocab = self.config.vocab_size;
        if let Some(&id) = texts.iter().flat_map(|t| t.iter()).find(|&&id| id >= vocab) {
            return Err(Error::Vocabulary { id, vocab_size: vocab });
        }
        let ids: Vec<usize> = texts.concat();
        let rows = tape.gather_rows(vars.text_embed, &ids)?;
        let pool = tape.constant(text_pool_matrix(texts, self.config.text_pooling));
        let pooled = tape.matmul(pool, rows)?;
        let projected = tape.matmul_nt(pooled, vars.text_head_w)?;
        let projected = tape.add_row(projected, vars.text_head_b)?;
        tape.l2_normalize(projected)
    }

    /// Records the full objective for one batch of aligned pairs.
    #[allow(clippy::too_many_arguments)]
    pub fn objective(
        &self,
        tape: &mut Tape,
        vars: &EncoderVars,
        images: &[&[f64]],
        texts: &[&[usize]],
        lambda: f64,
        opts: &ContrastiveOptions,
        mode: LossMode,
    ) -> Result<LossVars> {
        if images.len() != texts.len() {
            return Err(Error::Shape {
                op: "objective",
                left: vec![images.len()],
                right: vec![texts.len()],
            });
        }
        let img = self.image_graph(tape, vars, images, true)?;
        let txt = self.text_graph(tape, vars, texts)?;
        let sim = graph::similarity(tape, img, txt)?;
        graph::total_loss(tape, sim, lambda, opts, mode)
    }

    pub fn encode_images(&self, images: &[&[f64]]) -> Result<Vec<Embedding>> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let out = self.image_graph(&mut tape, &vars, images, true)?;
        Ok(rows_of(tape.value(out)))
    }

    /// Output of the frozen backbone with adapters bypassed.
    pub fn encode_images_frozen(&self, images: &[&[f64]]) -> Result<Vec<Embedding>> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let out = self.image_graph(&mut tape, &vars, images, false)?;
        Ok(rows_of(tape.value(out)))
    }

    pub fn encode_texts(&self, texts: &[&[usize]]) -> Result<Vec<Embedding>> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let out = self.text_graph(&mut tape, &vars, texts)?;
        Ok(rows_of(tape.value(out)))
    }

    pub fn encode_image(&self, image: &[f64]) -> Result<Embedding> {
        Ok(self.encode_images(&[image])?.remove(0))
    }

    pub fn encode_text(&self, tokens: &[usize]) -> Result<Embedding> {
        Ok(self.encode_texts(&[tokens])?.remove(0))
    }
}

fn rows_of(t: &Tensor) -> Vec<Embedding> {
    let cols = t.dims2().expect("matrix").1;
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

/// N×(N·T) matrix averaging each block of T consecutive rows.
fn block_mean_pool(n: usize, t: usize) -> Tensor {
    let mut data = vec![0.0; n * n * t];
    let w = 1.0 / t as f64;
    for i in 0..n {
        data[i * n * t + i * t..i * n * t + (i + 1) * t].fill(w);
    }
    Tensor::matrix(n, n * t, data).expect("pool matrix")
}

fn text_pool_matrix(texts: &[&[usize]], pooling: TextPooling) -> Tensor {
    let total: usize = texts.iter().map(|t| t.len()).sum();
    let mut data = vec![0.0; texts.len() * total];
    let mut offset = 0;
    for (i, text) in texts.iter().enumerate() {
        let len = text.len();
        let weights: Vec<f64> = match pooling {
            TextPooling::Mean => vec![1.0 / len as f64; len],
            TextPooling::Positional => {
                let raw: Vec<f64> = (0..len).map(|p| 1.0 / (p as f64 + 1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|w| w / s).collect()
            }
        };
        data[i * total + offset..i * total + offset + len].copy_from_slice(&weights);
        offset += len;
    }
    Tensor::matrix(texts.len(), total, data).expect("pool matrix")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ops;

    fn encoder() -> DualEncoder {
        DualEncoder::new(EncoderConfig::default()).unwrap()
    }

    #[test]
    fn trainable_set_is_adapters_heads_and_text() {
        let names = encoder().trainable_names();
        assert_eq!(
            names,
            vec![
                "image.attn.q.lora_a",
                "image.attn.q.lora_b",
                "image.attn.v.lora_a",
                "image.attn.v.lora_b",
                "image.head.weight",
                "image.head.bias",
                "text.embedding",
                "text.head.weight",
                "text.head.bias",
            ]
        );
    }

    #[test]
    fn image_width_is_checked() {
        let enc = encoder();
        assert!(matches!(enc.encode_image(&[0.0; 3]), Err(Error::Shape { .. })));
    }

    #[test]
    fn text_errors() {
        let enc = encoder();
        assert!(matches!(enc.encode_text(&[]), Err(Error::Empty(_))));
        assert!(matches!(
            enc.encode_text(&[1, 99]),
            Err(Error::Vocabulary { id: 99, .. })
        ));
    }

    #[test]
    fn single_token_text_is_normalized_projection_of_its_row() {
        let enc = encoder();
        let out = enc.encode_text(&[3]).unwrap();
        let row = Tensor::matrix(1, 32, enc.text_embed.row(3).to_vec()).unwrap();
        let w = &enc.text_head_w;
        let proj = ops::matmul_nt_raw(row.data(), 1, 32, w.data(), 32);
        let proj: Vec<f64> = proj.iter().zip(enc.text_head_b.data()).map(|(a, b)| a + b).collect();
        let expected = ops::l2_normalize(&Tensor::vector(proj).unwrap()).unwrap();
        for (a, b) in out.iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn positional_pooling_is_order_sensitive() {
        let enc = DualEncoder::new(EncoderConfig {
            text_pooling: TextPooling::Positional,
            ..EncoderConfig::default()
        })
        .unwrap();
        let a = enc.encode_text(&[1, 2, 3]).unwrap();
        let b = enc.encode_text(&[3, 2, 1]).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn config_hash_tracks_embed_dim() {
        let a = EncoderConfig::default();
        let b = EncoderConfig {
            embed_dim: 16,
            ..a.clone()
        };
        assert_eq!(a.hash(), EncoderConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
