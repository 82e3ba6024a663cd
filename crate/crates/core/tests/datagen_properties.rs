use std::collections::{BTreeMap, BTreeSet};

use evalign_core::autodiff::ops;
use evalign_core::datagen::{
    generate_corpus, read_corpus, split_corpus, write_corpus, CorpusSpec, PairRecord, Split,
};
use evalign_core::Error;
use proptest::prelude::*;

fn spec() -> CorpusSpec {
    CorpusSpec::default()
}

#[test]
fn same_spec_gives_byte_identical_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    write_corpus(&a, &generate_corpus(&spec()).unwrap()).unwrap();
    write_corpus(&b, &generate_corpus(&spec()).unwrap()).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn no_label_noise_keeps_labels() {
    let corpus = generate_corpus(&spec()).unwrap();
    assert_eq!(corpus.len(), 8 * 64);
    assert!(corpus.iter().all(|r| r.assigned_class == r.true_class));
    for c in 0..8 {
        assert_eq!(corpus.iter().filter(|r| r.true_class == c).count(), 64);
    }
}

#[test]
fn zero_sigma_collapses_each_class() {
    for domain_id in [0, 2] {
        let corpus = generate_corpus(&CorpusSpec {
            noise_sigma: 0.0,
            domain_id,
            ..spec()
        })
        .unwrap();
        for c in 0..8 {
            let mut imgs = corpus.iter().filter(|r| r.true_class == c).map(|r| &r.image);
            let first = imgs.next().unwrap();
            assert!(imgs.all(|x| x == first));
        }
    }
}

#[test]
fn split_counts_are_exact() {
    let corpus = generate_corpus(&CorpusSpec {
        samples_per_class: 10,
        ..spec()
    })
    .unwrap();
    let (train, val, test) = split_corpus(&corpus, [0.6, 0.2, 0.2], 3).unwrap();
    for c in 0..8 {
        let count = |s: &[PairRecord]| s.iter().filter(|r| r.true_class == c).count();
        assert_eq!((count(&train), count(&val), count(&test)), (6, 2, 2));
    }
}

#[test]
fn splits_partition_the_corpus() {
    let corpus = generate_corpus(&spec()).unwrap();
    let key = |r: &PairRecord| format!("{:?}", r.image);
    let all: BTreeSet<String> = corpus.iter().map(key).collect();
    assert_eq!(all.len(), corpus.len());
    let (train, val, test) = split_corpus(&corpus, [0.6, 0.2, 0.2], 9).unwrap();
    let sets: Vec<BTreeSet<String>> = [&train, &val, &test]
        .iter()
        .map(|s| s.iter().map(key).collect())
        .collect();
    for i in 0..3 {
        for j in i + 1..3 {
            assert!(sets[i].is_disjoint(&sets[j]));
        }
    }
    let union: BTreeSet<String> = sets.into_iter().flatten().collect();
    assert_eq!(union, all);
    let again = split_corpus(&corpus, [0.6, 0.2, 0.2], 9).unwrap();
    assert_eq!(again, (train, val, test));
}

#[test]
fn split_tags_in_generated_corpus_match_split_corpus() {
    let corpus = generate_corpus(&spec()).unwrap();
    let (train, _, _) = split_corpus(&corpus, spec().split_fractions, spec().seed).unwrap();
    let tagged: Vec<&PairRecord> = corpus.iter().filter(|r| r.split == Split::Train).collect();
    assert_eq!(tagged.len(), train.len());
    assert!(tagged.iter().zip(&train).all(|(a, b)| *a == b));
}

fn mean_cross_cosine(a: &[&Vec<f64>], b: &[&Vec<f64>], skip_same: bool) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            if skip_same && i == j {
                continue;
            }
            total += ops::cosine(x, y);
            n += 1;
        }
    }
    total / n as f64
}

#[test]
fn domains_are_shifted() {
    let base = generate_corpus(&spec()).unwrap();
    let shifted = generate_corpus(&CorpusSpec { domain_id: 1, ..spec() }).unwrap();
    assert!(shifted.iter().all(|r| r.domain == 1));
    for c in 0..8 {
        let a: Vec<&Vec<f64>> = base.iter().filter(|r| r.true_class == c).map(|r| &r.image).collect();
        let b: Vec<&Vec<f64>> = shifted.iter().filter(|r| r.true_class == c).map(|r| &r.image).collect();
        let within = mean_cross_cosine(&a, &a, true);
        let across = mean_cross_cosine(&a, &b, false);
        assert!(across < within, "class {c}: across {across} within {within}");
    }
}

#[test]
fn label_noise_rate_is_close_to_target() {
    for rho in [0.05, 0.2, 0.5] {
        let corpus = generate_corpus(&CorpusSpec {
            n_classes: 10,
            samples_per_class: 600,
            vocab_size: 14,
            label_noise_rate: rho,
            seed: 17,
            ..spec()
        })
        .unwrap();
        let flipped = corpus.iter().filter(|r| r.assigned_class != r.true_class).count();
        let rate = flipped as f64 / corpus.len() as f64;
        assert!((rate - rho).abs() <= 0.02, "rho {rho}: observed {rate}");
        let mut targets = BTreeMap::new();
        for r in corpus.iter().filter(|r| r.assigned_class != r.true_class) {
            *targets.entry(r.assigned_class).or_insert(0) += 1;
        }
        assert_eq!(targets.len(), 10);
    }
}

#[test]
fn texts_render_the_assigned_class() {
    let s = CorpusSpec {
        tokens_per_text: 7,
        label_noise_rate: 0.3,
        ..spec()
    };
    let vocab = s.vocabulary();
    for r in generate_corpus(&s).unwrap() {
        assert_eq!(r.tokens.len(), 7);
        let text = vocab.decode(&r.tokens).unwrap();
        let want = format!("a fundus image of condition-{}", r.assigned_class);
        assert!(text.starts_with(&want), "{text}");
    }
}

#[test]
fn corpus_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    let corpus = generate_corpus(&spec()).unwrap();
    write_corpus(&path, &corpus).unwrap();
    assert_eq!(read_corpus(&path).unwrap(), corpus);
    let line = std::fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    let keys: BTreeSet<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(
        keys,
        ["assigned_class", "domain", "image", "split", "tokens", "true_class"].into_iter().collect()
    );
}

#[test]
fn loader_rejects_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    let corpus = generate_corpus(&spec()).unwrap();
    write_corpus(&path, &corpus).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, &text[..text.len() / 2]).unwrap();
    assert!(matches!(read_corpus(&path), Err(Error::Corrupt { .. })));

    let mut bad = corpus[..2].to_vec();
    bad[1].image.pop();
    write_corpus(&path, &bad).unwrap();
    assert!(matches!(read_corpus(&path), Err(Error::Corrupt { .. })));

    std::fs::write(&path, "").unwrap();
    assert!(matches!(read_corpus(&path), Err(Error::Empty(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn assigned_classes_stay_in_range(k in 2usize..12, per in 5usize..20, rho in 0.0f64..0.9, seed in any::<u64>()) {
        let corpus = generate_corpus(&CorpusSpec {
            n_classes: k,
            samples_per_class: per,
            vocab_size: k + 4,
            label_noise_rate: rho,
            seed,
            ..spec()
        }).unwrap();
        prop_assert_eq!(corpus.len(), k * per);
        prop_assert!(corpus.iter().all(|r| r.assigned_class < k && r.true_class < k));
    }
}
