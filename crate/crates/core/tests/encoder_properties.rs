use evalign_core::autodiff::gradcheck::{central_difference, max_relative_error, DEFAULT_STEP};
use evalign_core::autodiff::{ops, Tape, Tensor};
use evalign_core::encoder::{DualEncoder, EncoderConfig};
use evalign_core::evidential::graph::LossMode;
use evalign_core::evidential::ContrastiveOptions;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_images(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn random_texts(rng: &mut ChaCha8Rng, n: usize, len: usize, vocab: usize) -> Vec<Vec<usize>> {
    (0..n).map(|_| (0..len).map(|_| rng.random_range(0..vocab)).collect()).collect()
}

fn refs<T>(v: &[Vec<T>]) -> Vec<&[T]> {
    v.iter().map(Vec::as_slice).collect()
}

/// Gives every LoRA `B` random entries so `A` sees gradient too.
fn perturb_adapters(enc: &mut DualEncoder, rng: &mut ChaCha8Rng) {
    for (name, t) in enc.params_mut() {
        if name.ends_with("lora_b") {
            let data = (0..t.numel()).map(|_| rng.random_range(-0.3..0.3)).collect();
            t.assign(data).unwrap();
        }
    }
}

fn small_config(seed: u64) -> EncoderConfig {
    EncoderConfig {
        image_dim: 6,
        n_tokens: 3,
        width: 8,
        lora_rank: 2,
        vocab_size: 10,
        text_width: 8,
        embed_dim: 16,
        init_seed: seed,
        ..EncoderConfig::default()
    }
}

#[test]
fn outputs_are_unit_norm_and_deterministic() {
    let enc = DualEncoder::new(EncoderConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let images = random_images(&mut rng, 100, 16);
    let out = enc.encode_images(&refs(&images)).unwrap();
    for (x, e) in images.iter().zip(&out) {
        assert_eq!(e.len(), 32);
        assert!((ops::dot(e, e).sqrt() - 1.0).abs() < 1e-12);
        assert_eq!(&enc.encode_image(x).unwrap(), e);
    }
    let texts = random_texts(&mut rng, 100, 5, 16);
    for t in &texts {
        let e = enc.encode_text(t).unwrap();
        assert!((ops::dot(&e, &e).sqrt() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn single_image_matches_batched_encoding() {
    let enc = DualEncoder::new(EncoderConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let images = random_images(&mut rng, 5, 16);
    let batch = enc.encode_images(&refs(&images)).unwrap();
    for (x, e) in images.iter().zip(&batch) {
        let single = enc.encode_image(x).unwrap();
        for (a, b) in single.iter().zip(e) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn mean_pooled_text_ignores_token_order() {
    let enc = DualEncoder::new(EncoderConfig::default()).unwrap();
    let a = enc.encode_text(&[0, 5, 9, 5, 2]).unwrap();
    let b = enc.encode_text(&[5, 2, 5, 9, 0]).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn zero_init_matches_frozen_backbone() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..5 {
        let enc = DualEncoder::new(EncoderConfig {
            init_seed: seed,
            ..EncoderConfig::default()
        })
        .unwrap();
        let images = random_images(&mut rng, 20, 16);
        let a = enc.encode_images(&refs(&images)).unwrap();
        let b = enc.encode_images_frozen(&refs(&images)).unwrap();
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn effective_weight_matches_bypass() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut enc = DualEncoder::new(EncoderConfig::default()).unwrap();
    perturb_adapters(&mut enc, &mut rng);
    let tokens = Tensor::from_rows(&random_images(&mut rng, 7, 32)).unwrap();
    for layer in [&enc.attention().query, &enc.attention().value] {
        let bypass = layer.apply(&tokens).unwrap();
        let w = layer.effective_weight();
        let direct = ops::matmul(&tokens, &Tensor::matrix(32, 32, transpose(w.data(), 32)).unwrap()).unwrap();
        for (a, b) in bypass.data().iter().zip(direct.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

fn transpose(a: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[j * n + i] = a[i * n + j];
        }
    }
    out
}

#[test]
fn trainable_set_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut enc = DualEncoder::new(EncoderConfig::default()).unwrap();
    perturb_adapters(&mut enc, &mut rng);
    let images = random_images(&mut rng, 8, 16);
    let texts = random_texts(&mut rng, 8, 5, 16);
    let mut tape = Tape::new();
    let vars = enc.bind(&mut tape);
    let loss = enc
        .objective(&mut tape, &vars, &refs(&images), &refs(&texts), 1.0, &ContrastiveOptions::default(), LossMode::Full)
        .unwrap();
    let grads = tape.backward(loss.total).unwrap();
    let mut receiving = Vec::new();
    for ((name, _), var) in enc.params().into_iter().zip(vars.in_order()) {
        if grads.get(var).is_some_and(|g| g.iter().any(|v| *v != 0.0)) {
            receiving.push(name);
        }
    }
    assert_eq!(receiving, enc.trainable_names());
    assert!(!receiving.contains(&"image.attn.k.weight"));
    assert!(!receiving.contains(&"image.attn.q.weight"));
    assert!(!receiving.contains(&"image.token_embed"));
}

#[test]
fn cosine_of_outputs_is_bounded() {
    let enc = DualEncoder::new(EncoderConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let images = enc.encode_images(&refs(&random_images(&mut rng, 30, 16))).unwrap();
    let texts = enc.encode_texts(&refs(&random_texts(&mut rng, 30, 4, 16))).unwrap();
    for a in images.iter().chain(&texts) {
        for b in images.iter().chain(&texts) {
            let c = ops::cosine(a, b);
            assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&c));
        }
    }
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let opts = ContrastiveOptions::default();
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut enc = DualEncoder::new(small_config(seed)).unwrap();
        perturb_adapters(&mut enc, &mut rng);
        let images = random_images(&mut rng, 4, 6);
        let texts = random_texts(&mut rng, 4, 3, 10);
        let loss_of = |enc: &DualEncoder| {
            let mut tape = Tape::new();
            let vars = enc.bind(&mut tape);
            let l = enc
                .objective(&mut tape, &vars, &refs(&images), &refs(&texts), 1.0, &opts, LossMode::Full)
                .unwrap();
            tape.scalar(l.total).unwrap()
        };
        let mut tape = Tape::new();
        let vars = enc.bind(&mut tape);
        let l = enc
            .objective(&mut tape, &vars, &refs(&images), &refs(&texts), 1.0, &opts, LossMode::Full)
            .unwrap();
        let grads = tape.backward(l.total).unwrap();
        let names = enc.trainable_names();
        let order = vars.in_order();
        for (idx, (name, _)) in enc.params().into_iter().enumerate() {
            if !names.contains(&name) {
                continue;
            }
            let analytic = grads.get(order[idx]).unwrap().to_vec();
            let base = enc.params()[idx].1.data().to_vec();
            let mut probe = enc.clone();
            let numeric = central_difference(&base, DEFAULT_STEP, |x| {
                probe.params_mut()[idx].1.assign(x.to_vec()).unwrap();
                loss_of(&probe)
            });
            let err = max_relative_error(&analytic, &numeric);
            assert!(err <= 1e-4, "seed {seed} {name}: {err}");
        }
    }
}
