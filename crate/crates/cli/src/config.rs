//! Run configuration files and dataset construction.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use dflow_core::datagen::{
    gen_addition, gen_discretized_mog, gen_full_rank, gen_potts, load_char_corpus, AdditionSpec, Dataset, FullRankSpec,
    PottsSpec,
};
use dflow_core::model::{ModelConfig, OptimizerConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Marks errors in configuration or usage; these exit with status 1.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    FullRank,
    Mog,
    Addition,
    Potts,
    CharLm,
}

fn d_n_train() -> usize {
    10_000
}
fn d_n_eval() -> usize {
    1000
}
fn d_eval_fraction() -> f64 {
    0.1
}
fn d_sweeps() -> usize {
    500
}

/// Task parameters. Fields that do not apply to the configured task are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "d_n_train")]
    pub n_train: usize,
    #[serde(default = "d_n_eval")]
    pub n_eval: usize,
    /// Seed of the full-rank probability table; defaults to the run seed.
    #[serde(default)]
    pub table_seed: Option<u64>,
    #[serde(default)]
    pub rows: Option<usize>,
    #[serde(default)]
    pub cols: Option<usize>,
    #[serde(default)]
    pub j: Option<f64>,
    #[serde(default = "d_sweeps")]
    pub sweeps: usize,
    /// Character corpus for `char_lm`; relative paths resolve against the config file.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "d_eval_fraction")]
    pub eval_fraction: f64,
    /// Pre-generated datasets in the text format; override generation.
    #[serde(default)]
    pub train_path: Option<PathBuf>,
    #[serde(default)]
    pub eval_path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Default::default())).expect("all fields default")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    pub seed: u64,
    pub out: PathBuf,
    /// Whether the config pinned `optimizer.seed`; otherwise it follows `seed`.
    #[serde(skip)]
    optimizer_seed_set: bool,
}

const TOP_KEYS: [&str; 6] = ["task", "model", "optimizer", "data", "seed", "out"];

/// Rewrites serde messages so missing and unknown keys carry their full path.
fn section_err(section: &str, e: serde_json::Error) -> anyhow::Error {
    let msg = e.to_string();
    let key = |prefix: &str| {
        msg.split_once(prefix)
            .and_then(|(_, rest)| rest.split('`').next())
            .map(|k| format!("{section}.{k}"))
    };
    if let Some(k) = key("missing field `") {
        return config_err(format!("missing required key `{k}`"));
    }
    if let Some(k) = key("unknown field `") {
        return config_err(format!("unknown key `{k}`"));
    }
    config_err(format!("invalid `{section}` section: {msg}"))
}

fn section<T: serde::de::DeserializeOwned>(root: &serde_json::Map<String, Value>, name: &str, default: Option<Value>) -> Result<T> {
    let v = match (root.get(name), default) {
        (Some(v), _) => v.clone(),
        (None, Some(d)) => d,
        (None, None) => return Err(config_err(format!("missing required key `{name}`"))),
    };
    serde_json::from_value(v).map_err(|e| section_err(name, e))
}

impl RunConfig {
    /// Parses and validates a JSON config; relative data paths are resolved
    /// against `base_dir`.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let root: Value = serde_json::from_str(text).map_err(|e| config_err(format!("config is not valid JSON: {e}")))?;
        let Value::Object(root) = root else {
            return Err(config_err("config must be a JSON object"));
        };
        if let Some(k) = root.keys().find(|k| !TOP_KEYS.contains(&k.as_str())) {
            return Err(config_err(format!("unknown key `{k}`")));
        }
        let empty = || Some(Value::Object(Default::default()));
        let mut cfg = Self {
            task: section(&root, "task", None)?,
            model: section(&root, "model", None)?,
            optimizer: section(&root, "optimizer", empty())?,
            data: section(&root, "data", empty())?,
            seed: section(&root, "seed", Some(Value::from(0)))?,
            out: section(&root, "out", Some(Value::from("dflow-out")))?,
            optimizer_seed_set: root.get("optimizer").and_then(|o| o.get("seed")).is_some(),
        };
        for p in [&mut cfg.data.path, &mut cfg.data.train_path, &mut cfg.data.eval_path].into_iter().flatten() {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Ties an unpinned minibatch seed to the run seed.
    pub fn resolve_optimizer_seed(&mut self) {
        if !self.optimizer_seed_set {
            self.optimizer.seed = self.seed;
            self.optimizer_seed_set = true;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| config_err(e.to_string()))?;
        self.optimizer.validate().map_err(|e| config_err(e.to_string()))?;
        let (d, k) = (self.model.d, self.model.k);
        let need = |ok: bool, msg: String| if ok { Ok(()) } else { Err(config_err(msg)) };
        match self.task {
            Task::FullRank => {}
            Task::Mog => need(d == 2 && k == 90, format!("mog needs model.d = 2 and model.k = 90, got D={d}, K={k}"))?,
            Task::Addition => {
                need(k == 10, format!("addition needs model.k = 10, got {k}"))?;
                let want = Some(dflow_core::model::ContextSpec { len: 2 * d, k: 10 });
                need(self.model.context == want, format!("addition needs model.context = {{\"len\": {}, \"k\": 10}}", 2 * d))?;
            }
            Task::Potts => {
                let (r, c) = (self.data.rows, self.data.cols);
                need(r.is_some() && c.is_some(), "potts needs data.rows and data.cols".into())?;
                need(r.unwrap() * c.unwrap() == d, format!("potts lattice {}×{} does not match model.d = {d}", r.unwrap(), c.unwrap()))?;
                need(self.data.j.is_some(), "potts needs data.j".into())?;
            }
            Task::CharLm => need(
                self.data.path.is_some() || self.data.train_path.is_some(),
                "char_lm needs data.path".into(),
            )?,
        }
        need(
            (0.0..1.0).contains(&self.data.eval_fraction),
            format!("data.eval_fraction = {} must lie in [0, 1)", self.data.eval_fraction),
        )?;
        need(self.data.train_path.is_some() || self.data.n_train > 0, "data.n_train must be at least 1".into())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn potts_spec(&self, seed: u64) -> PottsSpec {
        PottsSpec {
            rows: self.data.rows.unwrap_or(0),
            cols: self.data.cols.unwrap_or(0),
            states: self.model.k,
            j: self.data.j.unwrap_or(0.0),
            sweeps: self.data.sweeps,
            seed,
        }
    }

    fn generate(&self, n: usize, seed: u64) -> Result<Dataset> {
        let (d, k) = (self.model.d, self.model.k);
        Ok(match self.task {
            Task::FullRank => {
                let spec = FullRankSpec::new(d, k, self.data.table_seed.unwrap_or(self.seed))?;
                gen_full_rank(&spec, n, seed)?.0
            }
            Task::Mog => gen_discretized_mog(n, seed)?,
            Task::Addition => gen_addition(&AdditionSpec { d, seed }, n)?,
            Task::Potts => gen_potts(&self.potts_spec(seed), n)?,
            Task::CharLm => bail!("char_lm data comes from a corpus"),
        })
    }

    /// Training and evaluation splits. Generated splits use seeds derived
    /// from the run seed; a corpus is split with its last windows held out.
    pub fn datasets(&self) -> Result<(Dataset, Option<Dataset>)> {
        let read = |p: &PathBuf| Dataset::read(p).with_context(|| format!("reading dataset {}", p.display()));
        if let Some(p) = &self.data.train_path {
            let eval = self.data.eval_path.as_ref().map(read).transpose()?;
            return Ok((read(p)?, eval));
        }
        if self.task == Task::CharLm {
            let path = self.data.path.as_ref().expect("validated");
            let (all, vocab) = load_char_corpus(path, self.model.d, None)?;
            if vocab.size() != self.model.k {
                return Err(config_err(format!(
                    "corpus vocabulary has {} symbols but model.k = {}",
                    vocab.size(),
                    self.model.k
                )));
            }
            let n_eval = (all.len() as f64 * self.data.eval_fraction) as usize;
            let (train, eval) = all.split_at(all.len() - n_eval);
            return Ok((train, (n_eval > 0).then_some(eval)));
        }
        let train = self.generate(self.data.n_train, self.seed.wrapping_mul(2).wrapping_add(1))?;
        let eval = (self.data.n_eval > 0)
            .then(|| self.generate(self.data.n_eval, self.seed.wrapping_mul(2).wrapping_add(2)))
            .transpose()?;
        Ok((train, eval))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"task": "full_rank", "model": {"d": 2, "k": 2, "base": "factorized", "flow": "bipartite", "flow_count": 1}}"#;

    #[test]
    fn defaults_fill_optional_sections() {
        let cfg = RunConfig::from_json(MINIMAL, Path::new(".")).unwrap();
        assert_eq!(cfg.optimizer, OptimizerConfig::default());
        assert_eq!(cfg.data, DataConfig::default());
        assert_eq!(cfg.seed, 0);
        cfg.validate().unwrap();
    }

    #[test]
    fn missing_and_unknown_keys_are_named() {
        let text = MINIMAL.replace(", \"flow_count\": 1", "");
        let e = RunConfig::from_json(&text, Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("model.flow_count"), "{e}");
        let text = MINIMAL.replace("\"flow_count\": 1", "\"flow_count\": 1, \"depth\": 3");
        let e = RunConfig::from_json(&text, Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("model.depth"), "{e}");
        let e = RunConfig::from_json(r#"{"task": "mog", "extra": 1}"#, Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("extra"), "{e}");
    }

    #[test]
    fn shipped_configs_validate() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut n = 0;
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            let cfg = RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
        assert_eq!(n, 5);
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::from_json(&MINIMAL.replace("{\"task", "{\"seed\": 9, \"task"), Path::new(".")).unwrap();
        cfg.resolve_optimizer_seed();
        assert_eq!(cfg.optimizer.seed, 9);
        assert_eq!(RunConfig::from_json(&cfg.to_json(), Path::new(".")).unwrap(), cfg);
    }
}
