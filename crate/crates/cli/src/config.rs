//! Run configuration: preset defaults, then a TOML or JSON file, then
//! `MKTOD_` environment variables, then command-line flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use mktod::dialogue::{Split, SyntheticSpec};
use mktod::generator::GeneratorConfig;
use mktod::retriever::{PretrainConfig, RetrieverConfig, RetrieverKind};
use mktod::training::TrainConfig;

pub const ENV_PREFIX: &str = "MKTOD_";

/// Marks errors caused by bad configuration or arguments.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Invalid(msg.into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Hyper-parameters as published for the full-size models.
    Paper,
    /// Settings sized for the synthetic task on one CPU core.
    Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub kb: PathBuf,
    pub dialogues: PathBuf,
    pub name_attribute: String,
    /// Minimum token count for the vocabulary.
    pub min_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub split: Split,
    pub ks: Vec<usize>,
    pub retriever: RetrieverKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeConfig {
    pub split: Split,
    pub zoo: Vec<String>,
    pub k: usize,
    /// Trained bundles under study, by name. Empty means `checkpoint`.
    pub checkpoints: BTreeMap<String, PathBuf>,
    /// Bundle whose retriever is the jointly trained zoo member. Unset
    /// means the first entry of `checkpoints`.
    pub joint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    /// Drives every random choice; copied into all sub-seeds.
    pub seed: u64,
    /// Output directory; each subcommand has its own default.
    pub out_dir: Option<PathBuf>,
    /// Warm-start bundle written by `pretrain`.
    pub warm: PathBuf,
    /// Trained bundle read by `eval`, `retrieve`, `annotate` and `chat`.
    pub checkpoint: PathBuf,
    pub data: DataConfig,
    pub synth: SyntheticSpec,
    pub retriever: RetrieverConfig,
    pub generator: GeneratorConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub analyze: AnalyzeConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (pretrain, train) = match preset {
            Preset::Paper => (PretrainConfig::default(), TrainConfig::default()),
            Preset::Reference => (PretrainConfig::reference(), TrainConfig::reference()),
        };
        RunConfig {
            preset,
            seed: 0,
            out_dir: None,
            warm: PathBuf::from("runs/warm"),
            checkpoint: PathBuf::from("runs/train"),
            data: DataConfig {
                kb: PathBuf::from("data/kb.json"),
                dialogues: PathBuf::from("data/dialogues.jsonl"),
                name_attribute: "name".into(),
                min_count: 1,
            },
            synth: SyntheticSpec::default(),
            retriever: RetrieverConfig::default(),
            generator: GeneratorConfig::default(),
            pretrain,
            train,
            eval: EvalConfig {
                split: Split::Test,
                ks: vec![1, 3, 5, 7],
                retriever: RetrieverKind::Dense,
            },
            analyze: AnalyzeConfig {
                split: Split::Test,
                zoo: [
                    "bm25",
                    "frequency",
                    "pretrained-dense",
                    "jointly-trained-dense",
                    "oracle",
                ]
                .map(String::from)
                .to_vec(),
                k: 7,
                checkpoints: BTreeMap::new(),
                joint: None,
            },
        }
    }

    pub fn out_dir_or(&self, default: &str) -> PathBuf {
        self.out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(default))
    }

    /// Serialized copy kept next to every run's outputs.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}

/// One `key.path = value` override.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: Value,
}

impl Override {
    pub fn new(path: &str, value: Value) -> Self {
        Override {
            path: path.split('.').map(String::from).collect(),
            value,
        }
    }

    /// Parses `key.path=value`.
    pub fn parse(arg: &str) -> Result<Self> {
        let (key, raw) = arg
            .split_once('=')
            .ok_or_else(|| invalid(format!("expected KEY=VALUE, got {arg:?}")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(invalid(format!("empty key in {arg:?}")));
        }
        Ok(Override::new(key, parse_scalar(raw)))
    }
}

/// JSON when it parses, otherwise the raw string.
pub fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Overrides from `MKTOD_SECTION__FIELD=value` variables.
pub fn env_overrides<I>(vars: I) -> Vec<Override>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut out: Vec<Override> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            let path = rest
                .to_ascii_lowercase()
                .split("__")
                .map(String::from)
                .collect();
            Some(Override {
                path,
                value: parse_scalar(&v),
            })
        })
        .collect();
    out.sort_by(|a, b| a.path.cmp(&b.path));
    out
}

/// Tables whose keys are user-chosen names.
const FREE_TABLES: [&str; 1] = ["analyze.checkpoints"];

/// Merges `overlay` into `base`, refusing keys the defaults do not have.
fn merge(base: &mut Value, overlay: Value, at: &str) -> Result<()> {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            let free = FREE_TABLES.contains(&at);
            for (k, v) in o {
                let here = if at.is_empty() {
                    k.clone()
                } else {
                    format!("{at}.{k}")
                };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None if free => {
                        b.insert(k, v);
                    }
                    None => bail!(Invalid(format!("unknown config key {here}"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn set(base: &mut Value, ov: &Override) -> Result<()> {
    let mut nested = ov.value.clone();
    for key in ov.path.iter().rev() {
        let mut m = Map::new();
        m.insert(key.clone(), nested);
        nested = Value::Object(m);
    }
    merge(base, nested, "")
}

/// Reads a config file; `.json` files are JSON, anything else TOML.
pub fn read_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| invalid(format!("reading config {}: {e}", path.display())))?;
    let value: Value = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)
            .map_err(|e| invalid(format!("parsing {}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| invalid(format!("parsing {}: {e}", path.display())))?
    };
    if !value.is_object() {
        return Err(invalid(format!("{} must hold a table", path.display())));
    }
    Ok(value)
}

/// Layers the sources in precedence order and propagates the seed. The
/// preset picks the defaults and follows the same precedence.
pub fn resolve(file: Option<Value>, env: &[Override], flags: &[Override]) -> Result<RunConfig> {
    let named =
        |ov: &Override| (ov.path.len() == 1 && ov.path[0] == "preset").then(|| ov.value.clone());
    let chosen = flags
        .iter()
        .rev()
        .find_map(named)
        .or_else(|| env.iter().rev().find_map(named))
        .or_else(|| file.as_ref().and_then(|f| f.get("preset").cloned()));
    let preset = match chosen {
        Some(v) => serde_json::from_value(v).map_err(|e| invalid(format!("preset: {e}")))?,
        None => Preset::Reference,
    };
    let mut value = serde_json::to_value(RunConfig::preset(preset))?;
    if let Some(file) = file {
        merge(&mut value, file, "")?;
    }
    for ov in env.iter().chain(flags) {
        set(&mut value, ov)?;
    }
    let mut config: RunConfig = serde_json::from_value(value)
        .map_err(|e| invalid(format!("invalid configuration: {e}")))?;
    config.preset = preset;
    config.synth.seed = config.seed;
    config.pretrain.seed = config.seed;
    config.train.seed = config.seed;
    config
        .train
        .validate()
        .map_err(|e| invalid(e.to_string()))?;
    if config.analyze.k == 0 || config.eval.ks.contains(&0) {
        return Err(invalid("retrieval depths must be at least 1"));
    }
    Ok(config)
}
