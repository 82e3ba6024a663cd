use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::Context;
use evalign_core::datagen::{self, class_name, generate_corpus, read_corpus, write_corpus, CorpusSpec, PairRecord, Vocabulary};
use evalign_core::encoder::DualEncoder;
use evalign_core::inference::{
    embed_records, retrieval_metrics, retrieve_similar, write_embeddings, zero_shot_classify, zero_shot_topk,
    EmbeddingRecord, MetricReport, PromptSet, RetrievalIndex,
};
use evalign_core::trainer::{
    load_checkpoint, train_contrastive, train_linear_probe, DomainData, BEST_CHECKPOINT,
    FINAL_CHECKPOINT,
};
use evalign_study::http::{serve as serve_http, AppState};
use evalign_study::{read_cases, read_events, study_report, Study, StudyCase};
use serde_json::{Map, Value};

use crate::config::{CheckpointChoice, Resolved};
use crate::Invalid;

pub const CORPUS: &str = "corpus.jsonl";
pub const EMBEDDINGS: &str = "embeddings.jsonl";
pub const ZEROSHOT_METRICS: &str = "zeroshot_metrics.json";
pub const RETRIEVAL_METRICS: &str = "retrieval_metrics.json";
pub const RETRIEVAL_RESULTS: &str = "retrieval_results.jsonl";
pub const PROBE_METRICS: &str = "probe_metrics.json";
pub const TRAIN_SUMMARY: &str = "train_summary.json";
pub const STUDY_CASES: &str = "study_cases.jsonl";
pub const STUDY_EVENTS: &str = "study_events.jsonl";
pub const STUDY_REPORT: &str = "study_report.json";

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write(path, &s)
}

fn load_corpus(out: &Path) -> anyhow::Result<Vec<PairRecord>> {
    let path = out.join(CORPUS);
    if !path.exists() {
        return Err(Invalid(format!("{} not found; run `gen` first", path.display())).into());
    }
    Ok(read_corpus(&path)?)
}

fn load_model(run: &Resolved, out: &Path) -> anyhow::Result<DualEncoder> {
    let name = match run.config.eval.checkpoint {
        CheckpointChoice::Best => BEST_CHECKPOINT,
        CheckpointChoice::Final => FINAL_CHECKPOINT,
    };
    let path = out.join(name);
    if !path.exists() {
        return Err(Invalid(format!("{} not found; run `train` first", path.display())).into());
    }
    Ok(load_checkpoint(&path, None)?)
}

fn prompts_for(model: &DualEncoder, n_classes: usize) -> anyhow::Result<PromptSet> {
    let vocab = Vocabulary::new(n_classes, model.config().vocab_size);
    Ok(PromptSet::build(model, &vocab, &vocab.class_names())?)
}

/// `{"Top-1": v, ..., "reports": [...]}`
fn metrics_json(reports: &[MetricReport]) -> Value {
    let mut m = Map::new();
    for r in reports {
        m.insert(r.metric.clone(), Value::from(r.value));
    }
    m.insert("reports".into(), serde_json::to_value(reports).expect("reports serialize"));
    Value::Object(m)
}

fn check_ks(ks: &[usize]) -> anyhow::Result<()> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Invalid("eval.ks must be a nonempty list of positive integers".into()).into());
    }
    Ok(())
}

pub fn gen(run: &Resolved, out: &Path) -> anyhow::Result<()> {
    let records = generate_corpus(&run.config.corpus)?;
    write_corpus(&out.join(CORPUS), &records)?;
    log::info!("wrote {} pairs to {}", records.len(), out.join(CORPUS).display());
    Ok(())
}

pub fn train(run: &Resolved, out: &Path) -> anyhow::Result<()> {
    let records = load_corpus(out)?;
    let enc_cfg = &run.config.encoder;
    enc_cfg.validate()?;
    if let Some(r) = records.iter().find(|r| r.image.len() != enc_cfg.image_dim) {
        return Err(Invalid(format!(
            "corpus images have {} features but encoder.image_dim is {}",
            r.image.len(),
            enc_cfg.image_dim
        ))
        .into());
    }
    if let Some(&t) = records.iter().flat_map(|r| &r.tokens).find(|&&t| t >= enc_cfg.vocab_size) {
        return Err(Invalid(format!("corpus token {t} exceeds encoder.vocab_size {}", enc_cfg.vocab_size)).into());
    }
    let mut cfg = run.config.train.clone();
    cfg.checkpoint_dir = Some(out.to_path_buf());
    let encoder = DualEncoder::new(enc_cfg.clone())?;
    let outcome = train_contrastive(&records, encoder, &cfg)?;
    let last = outcome.history.last().expect("at least one epoch");
    log::info!("trained {} epochs, best epoch {}", outcome.history.len(), outcome.best_epoch);
    write_json(
        &out.join(TRAIN_SUMMARY),
        &serde_json::json!({
            "epochs": outcome.history.len(),
            "best_epoch": outcome.best_epoch,
            "best_val_L_Con": outcome.history[outcome.best_epoch - 1].val_l_con,
            "final_L_Con": last.train.l_con,
            "final_val_L_Con": last.val_l_con,
            "config_hash": enc_cfg.hash(),
        }),
    )
}

pub fn embed(run: &Resolved, out: &Path) -> anyhow::Result<()> {
    let records = load_corpus(out)?;
    let model = load_model(run, out)?;
    let embedded = embed_records(&model, &records, Some(run.config.eval.split))?;
    write_embeddings(&out.join(EMBEDDINGS), &embedded)?;
    log::info!("wrote {} embeddings", embedded.len());
    Ok(())
}

fn study_cases(images: &[EmbeddingRecord], prompts: &PromptSet, n: usize, split: datagen::Split) -> anyhow::Result<Vec<StudyCase>> {
    let labels = prompts.labels();
    let mut cases = Vec::new();
    for r in images.iter().take(n) {
        let ranked = zero_shot_classify(&r.vector, prompts, 5)?;
        cases.push(StudyCase {
            id: format!("case-{}", r.id),
            image: format!("{}-{}", serde_json::to_value(split)?.as_str().unwrap_or("img"), r.id),
            options: labels.to_vec(),
            truth: class_name(r.label),
            top5: ranked.top.iter().map(|s| s.label.clone()).collect(),
        });
    }
    Ok(cases)
}

pub fn zeroshot(run: &Resolved, out: &Path) -> anyhow::Result<()> {
    let eval = &run.config.eval;
    check_ks(&eval.ks)?;
    let records = load_corpus(out)?;
    let model = load_model(run, out)?;
    let prompts = prompts_for(&model, datagen::n_classes(&records))?;
    let images = embed_records(&model, &records, Some(eval.split))?;
    let reports = zero_shot_topk(&images, &prompts, &eval.ks)?;
    write_json(&out.join(ZEROSHOT_METRICS), &metrics_json(&reports))?;
    for r in &reports {
        log::info!("zero-shot {} = {:.4} (n = {})", r.metric, r.value, r.n_samples);
    }
    if prompts.labels().len() >= 5 && eval.study_cases > 0 {
        let cases = study_cases(&images, &prompts, eval.study_cases, eval.split)?;
        let mut text = String::new();
        for c in &cases {
            text.push_str(&serde_json::to_string(c)?);
            text.push('\n');
        }
        write(&out.join(STUDY_CASES), &text)?;
    } else {
        log::warn!("fewer than 5 labels or eval.study_cases = 0; no study cases written");
    }
    Ok(())
}

pub fn retrieve(run: &Resolved, out: &Path) -> anyhow::Result<()> {
    let eval = &run.config.eval;
    check_ks(&eval.ks)?;
    let records = load_corpus(out)?;
    let model = load_model(run, out)?;
    let images = embed_records(&model, &records, Some(eval.split))?;
    let index = RetrievalIndex::from_records(&images)?;
    let max_k = eval.ks.iter().copied().max().unwrap_or(1);
    if max_k >= index.len() {
        return Err(Invalid(format!("largest K ({max_k}) must be below the index size ({})", index.len())).into());
    }
    let reports = retrieval_metrics(&index, &eval.ks)?;
    write_json(&out.join(RETRIEVAL_METRICS), &metrics_json(&reports))?;
    let mut text = String::new();
    for &id in index.ids() {
        text.push_str(&serde_json::to_string(&retrieve_similar(&index, id, max_k)?)?);
        text.push('\n');
    }
    write(&out.join(RETRIEVAL_RESULTS), &text)?;
    for r in &reports {
        log::info!("retrieval {} = {:.4} (n = {})", r.metric, r.value, r.n_samples);
    }
    Ok(())
}

/// Probes regenerate each domain from the corpus spec, so only the
/// checkpoint is read from the run directory.
pub fn probe(run: &Resolved, out: &Path) -> anyhow::Result<()> {
    let model = load_model(run, out)?;
    let pc = &run.config.probe;
    let mut domains: Vec<u32> = pc.eval_domains.clone();
    domains.push(pc.train_domain);
    domains.sort_unstable();
    domains.dedup();
    let mut data = BTreeMap::new();
    for d in domains {
        let spec = CorpusSpec {
            domain_id: d,
            ..run.config.corpus.clone()
        };
        let records = generate_corpus(&spec)?;
        data.insert(
            d,
            DomainData {
                train: embed_records(&model, &records, Some(datagen::Split::Train))?,
                test: embed_records(&model, &records, Some(datagen::Split::Test))?,
            },
        );
    }
    let outcome = train_linear_probe(&data, run.config.corpus.n_classes, pc)?;
    for e in &outcome.evals {
        log::info!("probe domain {}: accuracy {:.4}, mean AUC {:.4}", e.domain, e.accuracy, e.mean_auc);
    }
    write_json(&out.join(PROBE_METRICS), &outcome)
}

fn study_paths(run: &Resolved, out: &Path) -> (PathBuf, PathBuf) {
    let s = &run.config.study;
    (
        s.cases.clone().unwrap_or_else(|| out.join(STUDY_CASES)),
        s.log.clone().unwrap_or_else(|| out.join(STUDY_EVENTS)),
    )
}

pub fn serve(run: &Resolved, out: &Path) -> anyhow::Result<()> {
    let (cases_path, log_path) = study_paths(run, out);
    let addr: SocketAddr = run
        .config
        .study
        .addr
        .parse()
        .map_err(|e| Invalid(format!("study.addr `{}`: {e}", run.config.study.addr)))?;
    let study = Study::open(read_cases(&cases_path)?, &log_path)?;
    let state = AppState::new(study, run.config.study.image_root.clone());
    let rt = tokio::runtime::Runtime::new().context("starting async runtime")?;
    rt.block_on(serve_http(addr, state)).with_context(|| format!("serving on {addr}"))?;
    Ok(())
}

pub fn report(run: &Resolved, out: &Path) -> anyhow::Result<()> {
    let (cases_path, log_path) = study_paths(run, out);
    let cases = read_cases(&cases_path)?;
    let events = if log_path.exists() { read_events(&log_path)? } else { Vec::new() };
    let report = study_report(&Study::replay(cases, &events)?)?;
    let text = report.to_json();
    write(&out.join(STUDY_REPORT), &format!("{text}\n"))?;
    println!("{text}");
    Ok(())
}
