//! Run configuration: JSON with flat dotted keys (`train.epochs`), layered
//! as defaults, then the config file, then `--seed`, then `--set`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use evalign_core::datagen::{CorpusSpec, Split};
use evalign_core::encoder::EncoderConfig;
use evalign_core::trainer::{ProbeConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::Invalid;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointChoice {
    #[default]
    Best,
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub checkpoint: CheckpointChoice,
    pub split: Split,
    pub ks: Vec<usize>,
    /// Held-out images exported as reading-study cases by `zeroshot`.
    pub study_cases: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: CheckpointChoice::Best,
            split: Split::Test,
            ks: vec![1, 3, 5],
            study_cases: 24,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub addr: String,
    /// Defaults to `study_cases.jsonl` in the run directory.
    pub cases: Option<PathBuf>,
    /// Defaults to `study_events.jsonl` in the run directory.
    pub log: Option<PathBuf>,
    pub image_root: Option<PathBuf>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
            cases: None,
            log: None,
            image_root: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSpec,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub eval: EvalConfig,
    pub study: StudyConfig,
}

/// Set from `--out`, never from config.
const RESERVED: &[&str] = &["train.checkpoint_dir"];

const SEED_KEYS: &[&str] = &["corpus.seed", "encoder.init_seed", "train.seed", "probe.seed"];

pub fn flatten(cfg: &RunConfig) -> BTreeMap<String, Value> {
    let Value::Object(sections) = serde_json::to_value(cfg).expect("config serializes") else {
        unreachable!("config is a struct")
    };
    let mut out = BTreeMap::new();
    for (section, fields) in sections {
        let Value::Object(fields) = fields else { unreachable!("sections are structs") };
        for (k, v) in fields {
            let key = format!("{section}.{k}");
            if !RESERVED.contains(&key.as_str()) {
                out.insert(key, v);
            }
        }
    }
    out
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let (section, field) = key.split_once('.').expect("flat keys are dotted");
        root.entry(section)
            .or_insert_with(|| Value::Object(Map::new()))
            .as_object_mut()
            .expect("section object")
            .insert(field.to_string(), v.clone());
    }
    Value::Object(root)
}

/// `--set` values are JSON when they parse as JSON, bare strings otherwise.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn put(flat: &mut BTreeMap<String, Value>, key: &str, v: Value, origin: &str) -> anyhow::Result<()> {
    match flat.get_mut(key) {
        Some(slot) => {
            *slot = v;
            Ok(())
        }
        None => Err(Invalid(format!("unknown config key `{key}` ({origin})")).into()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub config: RunConfig,
    pub flat: BTreeMap<String, Value>,
}

pub fn resolve(file: Option<&Path>, seed: Option<u64>, sets: &[String]) -> anyhow::Result<Resolved> {
    let mut flat = flatten(&RunConfig::default());
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let parsed: Map<String, Value> = serde_json::from_str(&text)
            .map_err(|e| Invalid(format!("config {}: expected a flat JSON object: {e}", path.display())))?;
        for (k, v) in parsed {
            put(&mut flat, &k, v, &path.display().to_string())?;
        }
    }
    if let Some(seed) = seed {
        for k in SEED_KEYS {
            put(&mut flat, k, Value::from(seed), "--seed")?;
        }
    }
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Invalid(format!("--set expects key=value, got `{s}`")))?;
        put(&mut flat, k.trim(), parse_value(v.trim()), "--set")?;
    }
    let config: RunConfig =
        serde_json::from_value(unflatten(&flat)).map_err(|e| Invalid(format!("invalid config value: {e}")))?;
    Ok(Resolved { config, flat })
}

impl Resolved {
    pub fn snapshot(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.flat).expect("json values serialize");
        s.push('\n');
        s
    }
}
