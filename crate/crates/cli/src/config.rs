//! Run configuration: a TOML file with `[data]`, `[synthetic]`, `[model]`,
//! `[train]` and `[eval]` sections, plus `--section.key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use transam::kg::{
    generate_synthetic_kg, load_candidates, load_pretrained, load_tasks, load_triples, Candidates, Dataset, Split,
    SyntheticSpec, TaskSplits, Tasks,
};
use transam::model::{MaskMode, ModelConfig, TransAm};
use transam::optim::LrSchedule;
use transam::train::TrainConfig;
use transam::ParamStore;

use crate::error::CliError;

const PATH_KEYS: [&str; 6] = [
    "triples",
    "tasks_train",
    "tasks_valid",
    "tasks_test",
    "candidates",
    "pretrained",
];

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives model init, batch sampling, neighbor sampling and the
    /// evaluation support selection.
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataSection,
    pub synthetic: Option<SyntheticSpec>,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub triples: Option<PathBuf>,
    pub tasks_train: Option<PathBuf>,
    pub tasks_valid: Option<PathBuf>,
    pub tasks_test: Option<PathBuf>,
    pub candidates: Option<PathBuf>,
    pub pretrained: Option<PathBuf>,
    pub max_neighbors: usize,
    pub max_candidates: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            triples: None,
            tasks_train: None,
            tasks_valid: None,
            tasks_test: None,
            candidates: None,
            pretrained: None,
            max_neighbors: 50,
            max_candidates: 500,
        }
    }
}

impl DataSection {
    fn any_path(&self) -> bool {
        [
            &self.triples,
            &self.tasks_train,
            &self.tasks_valid,
            &self.tasks_test,
            &self.candidates,
        ]
        .iter()
        .any(|p| p.is_some())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_e: usize,
    pub heads: usize,
    pub layers: usize,
    pub k: usize,
    pub theta_base: f64,
    pub mask_mode: MaskMode,
    /// Defaults to `4·heads·d_e`.
    pub ffn_hidden: Option<usize>,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(16, 2, 2, 1);
        Self {
            d_e: m.d_e,
            heads: m.heads,
            layers: m.layers,
            k: m.k,
            theta_base: m.theta_base,
            mask_mode: m.mask_mode,
            ffn_hidden: None,
            dropout: m.dropout,
        }
    }
}

impl ModelSection {
    pub fn to_config(&self) -> ModelConfig {
        let mut m = ModelConfig::new(self.d_e, self.heads, self.layers, self.k);
        m.theta_base = self.theta_base;
        m.mask_mode = self.mask_mode;
        if let Some(f) = self.ffn_hidden {
            m.ffn_hidden = f;
        }
        m.dropout = self.dropout;
        m
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: u64,
    pub batch_episodes: usize,
    pub negatives_per_positive: usize,
    pub peak_rate: f64,
    pub warmup_steps: u64,
    /// End of the linear decay; defaults to `steps`.
    pub total_steps: Option<u64>,
    /// Defaults to `steps` (one validation at the end).
    pub eval_every: Option<u64>,
    pub patience: usize,
    pub freeze_embeddings: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_episodes: 8,
            negatives_per_positive: 1,
            peak_rate: 1e-3,
            warmup_steps: 100,
            total_steps: None,
            eval_every: None,
            patience: 10,
            freeze_embeddings: false,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub split: Split,
    /// Support selection seed; defaults to the run seed.
    pub seed: Option<u64>,
}

/// Splits `--section.key=value` overrides from the arguments clap parses.
pub fn extract_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    for (i, a) in args.into_iter().enumerate() {
        if i > 0 {
            if let Some((key, value)) = a.strip_prefix("--").and_then(|s| s.split_once('=')) {
                if key.contains('.') {
                    overrides.push((key.to_string(), value.to_string()));
                    continue;
                }
            }
        }
        rest.push(a);
    }
    (rest, overrides)
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn absolutize(table: &mut toml::Table, base: &Path) {
    let join = |v: &mut toml::Value| {
        if let toml::Value::String(s) = v {
            if Path::new(s.as_str()).is_relative() {
                *s = base.join(s.as_str()).to_string_lossy().into_owned();
            }
        }
    };
    if let Some(v) = table.get_mut("out") {
        join(v);
    }
    if let Some(data) = table.get_mut("data").and_then(toml::Value::as_table_mut) {
        for key in PATH_KEYS {
            if let Some(v) = data.get_mut(key) {
                join(v);
            }
        }
    }
}

impl RunConfig {
    /// Reads `path` (paths inside it are relative to its directory), or
    /// parses `fallback` when there is no file, then applies overrides
    /// (paths relative to the working directory).
    pub fn load(path: Option<&Path>, fallback: &str, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                let mut t: toml::Table =
                    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                absolutize(&mut t, p.parent().unwrap_or(Path::new(".")));
                t
            }
            None => toml::from_str(fallback).map_err(|e| CliError::Config(format!("built-in defaults: {e}")))?,
        };
        for (key, raw) in overrides {
            set_path(&mut table, key, parse_value(raw))?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e| CliError::Config(format!("invalid configuration: {e}")))
    }

    pub fn eval_seed(&self) -> u64 {
        self.eval.seed.unwrap_or(self.seed)
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let m = self.model.to_config();
        m.validate()?;
        Ok(m)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        let total = t.total_steps.unwrap_or(t.steps);
        let config = TrainConfig {
            steps: t.steps,
            batch_episodes: t.batch_episodes,
            negatives_per_positive: t.negatives_per_positive,
            schedule: LrSchedule {
                peak_rate: t.peak_rate,
                warmup_steps: t.warmup_steps,
                total_steps: total,
            },
            eval_every: t.eval_every.unwrap_or(t.steps),
            seed: self.seed,
            patience: t.patience,
            freeze_embeddings: t.freeze_embeddings,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Config("no output directory: pass --out or set `out`".into()))
    }

    /// Checks that exactly one data source is configured and every referenced
    /// file exists.
    pub fn validate_data(&self) -> Result<(), CliError> {
        match (self.synthetic.is_some(), self.data.any_path()) {
            (true, true) => {
                return Err(CliError::Config(
                    "both [synthetic] and data files are configured; choose one".into(),
                ))
            }
            (false, false) => {
                return Err(CliError::Config(
                    "no data source: set [synthetic] or [data] paths".into(),
                ))
            }
            (false, true) => {
                if self.data.triples.is_none() || self.data.tasks_train.is_none() {
                    return Err(CliError::Config(
                        "[data] needs at least `triples` and `tasks_train`".into(),
                    ));
                }
            }
            (true, false) => {}
        }
        let d = &self.data;
        for (key, p) in PATH_KEYS.iter().zip([
            &d.triples,
            &d.tasks_train,
            &d.tasks_valid,
            &d.tasks_test,
            &d.candidates,
            &d.pretrained,
        ]) {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(CliError::Config(format!("data.{key}: {} does not exist", p.display())));
                }
            }
        }
        if d.max_neighbors == 0 {
            return Err(CliError::Config("data.max_neighbors must be >= 1".into()));
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<Dataset, CliError> {
        self.validate_data()?;
        if let Some(spec) = &self.synthetic {
            let kg = generate_synthetic_kg(spec)?;
            return Ok(Dataset::from_synthetic(kg, self.data.max_neighbors, self.seed)?);
        }
        let d = &self.data;
        let mut graph = load_triples(d.triples.as_ref().expect("validated"))?.graph;
        let mut read = |p: &Option<PathBuf>| -> Result<Tasks, CliError> {
            match p {
                Some(p) => Ok(load_tasks(p, &mut graph)?),
                None => Ok(Tasks::new()),
            }
        };
        let tasks = TaskSplits {
            train: read(&d.tasks_train)?,
            valid: read(&d.tasks_valid)?,
            test: read(&d.tasks_test)?,
        };
        let candidates = match &d.candidates {
            Some(p) => load_candidates(p, &mut graph)?,
            None => Candidates::new(),
        };
        Ok(Dataset::new(
            graph,
            tasks,
            candidates,
            d.max_neighbors,
            d.max_candidates,
            self.seed,
        )?)
    }

    /// A freshly initialized model for `data`, with pretrained vectors copied
    /// in when configured.
    pub fn init_model(&self, data: &Dataset) -> Result<(TransAm, ParamStore), CliError> {
        let config = self.model_config()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (model, mut store) =
            TransAm::init(config, data.graph.entity_count(), data.graph.relation_count(), &mut rng)?;
        if let Some(p) = &self.data.pretrained {
            let emb = load_pretrained(p)?;
            let filled = model.encoder.load_pretrained(&mut store, &data.graph, &emb)?;
            log::info!("copied {filled} pretrained vectors from {}", p.display());
        }
        Ok((model, store))
    }
}
