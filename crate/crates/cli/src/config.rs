//! Flat `key = value` run configuration.
//!
//! Values are layered: preset defaults, then the config file, then flags.
//! The resolved set is written next to every run's outputs, and its hash
//! (without `out`, `seed`, `data_dir` and `progress`) names the run
//! directory.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use capsroute::train::{Task, TrainConfig};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const CONFIG_FILE: &str = "run.cfg";

/// Keys that map onto [`TrainConfig`] or run plumbing.
const TRAIN_KEYS: &[&str] = &[
    "preset",
    "data_dir",
    "out",
    "seed",
    "epochs",
    "batch_size",
    "lr0",
    "decay",
    "beta1",
    "beta2",
    "eps",
    "train_limit",
    "test_limit",
    "max_shift",
    "max_rotation",
    "train_per_digit",
    "test_per_digit",
    "test_seed",
    "strict",
    "progress",
];

/// Evaluation and analysis options, kept as text until a command reads them.
const EXTRA_KEYS: &[&str] = &[
    "checkpoint",
    "ensemble",
    "threshold",
    "k",
    "dim",
    "index",
    "family",
    "view",
    "images",
    "repetitions",
    "count",
];

/// Not part of the run identity.
const UNHASHED: &[&str] = &["out", "seed", "data_dir", "progress"];

pub type Entries = BTreeMap<String, String>;

fn known(key: &str) -> bool {
    TRAIN_KEYS.contains(&key) || EXTRA_KEYS.contains(&key)
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// unknown or repeated keys are errors.
pub fn parse_entries(text: &str, origin: &str) -> Result<Entries, CliError> {
    let mut out = Entries::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected key = value", n + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if !known(key) {
            return Err(CliError::Usage(format!("{origin}:{}: unknown key '{key}'", n + 1)));
        }
        if out.insert(key.to_string(), value.to_string()).is_some() {
            return Err(CliError::Usage(format!("{origin}:{}: key '{key}' given twice", n + 1)));
        }
    }
    Ok(out)
}

pub fn read_entries(path: &Path) -> Result<Entries, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Env(format!("{}: {e}", path.display())))?;
    parse_entries(&text, &path.display().to_string())
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| CliError::Usage(format!("invalid value '{value}' for {key}: {e}")))
}

fn parse_limit(key: &str, value: &str) -> Result<Option<usize>, CliError> {
    match value {
        "none" | "" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub train: TrainConfig,
    pub data_dir: Option<PathBuf>,
    pub out: PathBuf,
    pub extra: Entries,
}

impl RunConfig {
    /// Layers `layers` (lowest precedence first) over the preset named by
    /// the highest layer that sets `preset`, defaulting to `mnist`.
    pub fn resolve(layers: &[Entries]) -> Result<Self, CliError> {
        let preset = layers
            .iter()
            .rev()
            .find_map(|l| l.get("preset").cloned())
            .unwrap_or_else(|| "mnist".into());
        let train = TrainConfig::preset(&preset).map_err(|e| CliError::Usage(e.to_string()))?;
        let mut cfg = Self {
            preset,
            train,
            data_dir: None,
            out: PathBuf::from("runs"),
            extra: Entries::new(),
        };
        for layer in layers {
            for (k, v) in layer {
                cfg.set(k, v)?;
            }
        }
        cfg.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let t = &mut self.train;
        match key {
            "preset" => {}
            "data_dir" => self.data_dir = Some(PathBuf::from(value)).filter(|p| !p.as_os_str().is_empty()),
            "out" => self.out = PathBuf::from(value),
            "seed" => t.seed = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr0" => t.lr0 = parse(key, value)?,
            "decay" => t.decay = parse(key, value)?,
            "beta1" => t.adam.beta1 = parse(key, value)?,
            "beta2" => t.adam.beta2 = parse(key, value)?,
            "eps" => t.adam.eps = parse(key, value)?,
            "train_limit" => t.train_limit = parse_limit(key, value)?,
            "test_limit" => t.test_limit = parse_limit(key, value)?,
            "max_shift" => t.augment.max_shift = parse(key, value)?,
            "max_rotation" => t.augment.max_rotation = parse(key, value)?,
            "train_per_digit" => t.train_per_digit = parse(key, value)?,
            "test_per_digit" => t.test_per_digit = parse(key, value)?,
            "test_seed" => t.test_seed = parse(key, value)?,
            "strict" => t.strict = parse(key, value)?,
            "progress" => t.progress = parse(key, value)?,
            k if EXTRA_KEYS.contains(&k) => {
                self.extra.insert(k.to_string(), value.to_string());
            }
            k => return Err(CliError::Usage(format!("unknown key '{k}'"))),
        }
        Ok(())
    }

    pub fn extra<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        self.extra.get(key).map(|v| parse(key, v)).transpose()
    }

    pub fn task(&self) -> Task {
        self.train.task
    }

    /// Every resolved value, in key order.
    pub fn entries(&self) -> Entries {
        let t = &self.train;
        let limit = |l: Option<usize>| l.map_or_else(|| "none".to_string(), |n| n.to_string());
        let mut e = Entries::new();
        let mut put = |k: &str, v: String| {
            e.insert(k.to_string(), v);
        };
        put("preset", self.preset.clone());
        put("data_dir", self.data_dir.as_ref().map_or_else(String::new, |p| p.display().to_string()));
        put("out", self.out.display().to_string());
        put("seed", t.seed.to_string());
        put("epochs", t.epochs.to_string());
        put("batch_size", t.batch_size.to_string());
        put("lr0", t.lr0.to_string());
        put("decay", t.decay.to_string());
        put("beta1", t.adam.beta1.to_string());
        put("beta2", t.adam.beta2.to_string());
        put("eps", t.adam.eps.to_string());
        put("train_limit", limit(t.train_limit));
        put("test_limit", limit(t.test_limit));
        put("max_shift", t.augment.max_shift.to_string());
        put("max_rotation", t.augment.max_rotation.to_string());
        put("train_per_digit", t.train_per_digit.to_string());
        put("test_per_digit", t.test_per_digit.to_string());
        put("test_seed", t.test_seed.to_string());
        put("strict", t.strict.to_string());
        put("progress", t.progress.to_string());
        e.extend(self.extra.clone());
        e
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 12 hex digits of the SHA-256 of the identity-relevant entries.
    pub fn hash(&self, command: &str) -> String {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        for (k, v) in self.entries().iter().filter(|(k, _)| !UNHASHED.contains(&k.as_str())) {
            h.update(format!("\n{k}={v}").as_bytes());
        }
        h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    /// `<out>/<command>-<hash>-s<seed>`.
    pub fn run_dir(&self, command: &str) -> PathBuf {
        self.out
            .join(format!("{command}-{}-s{}", self.hash(command), self.train.seed))
    }

    /// Flag, config file, then `CAPSROUTE_DATA_DIR`.
    pub fn data_dir(&self) -> Result<PathBuf, CliError> {
        if let Some(d) = &self.data_dir {
            return Ok(d.clone());
        }
        match std::env::var_os("CAPSROUTE_DATA_DIR") {
            Some(d) if !d.is_empty() => Ok(PathBuf::from(d)),
            _ => Err(CliError::Env(
                "no dataset directory: pass --data, set data_dir in the config file, or set CAPSROUTE_DATA_DIR".into(),
            )),
        }
    }

    pub fn persist(&self, dir: &Path) -> Result<PathBuf, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Env(format!("{}: {e}", dir.display())))?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, self.to_text()).map_err(|e| CliError::Env(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}
