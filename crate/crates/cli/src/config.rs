//! Run configuration: a TOML document, overridden by `--set key=value`
//! pairs and dedicated flags.

use std::path::{Path, PathBuf};

use factlink_core::benchmark::BenchmarkConfig;
use factlink_core::eval::StoreKind;
use factlink_core::ookg::{OokgThresholds, QkvTrainConfig};
use factlink_core::preranker::PrerankTrainConfig;
use factlink_core::reranker::RerankTrainConfig;
use factlink_core::splits::{InductiveMode, SplitKind};
use factlink_core::synth::ToyWorldConfig;
use factlink_core::{EncoderConfig, Normalizer};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const CONFIG_ENV: &str = "FACTLINK_CONFIG";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub kg_entries: Option<PathBuf>,
    pub kg_facts: Option<PathBuf>,
    pub oie: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Precomputed vectors replacing the reference encoder at link time.
    pub embeddings: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum DetectorKind {
    Confidence,
    Entropy,
    Attention,
    Coin,
    AlwaysInKg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum LinkerKind {
    Model,
    Frequency,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub facet: SplitKind,
    pub store: StoreKind,
    pub inductive_mode: InductiveMode,
    pub linker: LinkerKind,
    /// Per-slot list length of `link`.
    pub k: usize,
    /// Re-rank the product of the top-k lists when set.
    pub rerank_k: Option<usize>,
    /// Defaults to the pre-ranker's setting.
    pub with_context: Option<bool>,
    pub detector: Option<DetectorKind>,
    /// Use thresholds written by `train-ookg` instead of `[thresholds]`.
    pub calibrated: bool,
    /// Candidates handed to detectors per slot.
    pub keys: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            facet: SplitKind::Transductive,
            store: StoreKind::Brkg,
            inductive_mode: InductiveMode::default(),
            linker: LinkerKind::Model,
            k: 10,
            rerank_k: None,
            with_context: None,
            detector: None,
            calibrated: false,
            keys: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationOptions {
    pub grid_size: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self { grid_size: 101 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; copied into every stage's seed.
    pub seed: u64,
    pub paths: Paths,
    pub normalizer: Normalizer,
    pub toy: ToyWorldConfig,
    pub benchmark: BenchmarkConfig,
    pub encoder: EncoderConfig,
    pub preranker: PrerankTrainConfig,
    pub reranker: RerankTrainConfig,
    pub qkv: QkvTrainConfig,
    pub thresholds: OokgThresholds,
    pub calibration: CalibrationOptions,
    pub eval: EvalOptions,
}

impl RunConfig {
    /// Reads `file` (if any), resolving its relative paths against its
    /// directory, then applies `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> CliResult<Self> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| CliError::Path {
                    path: path.to_owned(),
                    source,
                })?;
                let mut table: toml::Table = toml::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
                let base = path.parent().unwrap_or(Path::new(""));
                if let Some(toml::Value::Table(paths)) = table.get_mut("paths") {
                    for (_, value) in paths.iter_mut() {
                        if let toml::Value::String(s) = value {
                            if Path::new(s.as_str()).is_relative() {
                                let joined = base.join(s.as_str()).to_string_lossy().into_owned();
                                *value = toml::Value::String(joined);
                            }
                        }
                    }
                }
                table
            }
            None => toml::Table::new(),
        };
        for (key, value) in overrides {
            set_dotted(&mut table, key, parse_value(value))?;
        }
        let mut config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))?;
        config.propagate_seed();
        Ok(config)
    }

    fn propagate_seed(&mut self) {
        let seed = self.seed;
        self.toy.seed = seed;
        self.encoder.seed = seed;
        self.preranker.seed = seed;
        self.reranker.seed = seed;
        self.qkv.seed = seed;
    }

    /// SHA-256 of the effective configuration, output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.output_dir = None;
        let json = serde_json::to_vec(&c).expect("configuration serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn output_dir(&self) -> CliResult<&Path> {
        self.paths
            .output_dir
            .as_deref()
            .ok_or_else(|| CliError::Usage("no output directory (paths.output_dir or --output-dir)".into()))
    }

    pub fn input(&self, which: &str) -> CliResult<&Path> {
        let p = match which {
            "kg_entries" => &self.paths.kg_entries,
            "kg_facts" => &self.paths.kg_facts,
            "oie" => &self.paths.oie,
            "pairs" => &self.paths.pairs,
            "embeddings" => &self.paths.embeddings,
            _ => unreachable!("unknown input {which}"),
        };
        let p = p
            .as_deref()
            .ok_or_else(|| CliError::Usage(format!("missing input path paths.{which}")))?;
        if !p.exists() {
            return Err(CliError::Path {
                path: p.to_owned(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
            });
        }
        Ok(p)
    }

    pub fn eval_with_context(&self) -> bool {
        self.eval.with_context.unwrap_or(self.preranker.with_context)
    }
}

/// TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_owned())),
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> CliResult<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| CliError::Usage(format!("bad key {key:?}")))?;
    let mut cur = table;
    for part in parts {
        let next = cur
            .entry(part.to_owned())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match next {
            toml::Value::Table(t) => t,
            _ => return Err(CliError::Usage(format!("{key:?}: {part:?} is not a table"))),
        };
    }
    cur.insert(last.to_owned(), value);
    Ok(())
}

/// Parses `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    Ok((k.trim().to_owned(), v.trim().to_owned()))
}
