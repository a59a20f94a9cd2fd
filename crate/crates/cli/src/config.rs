//! Run configuration: built-in defaults < JSON config file < flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use pdgan::models::ArchConfig;
use pdgan::training::{Protocol, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::Usage;

pub const SEED_ENV: &str = "PDGAN_SEED";
pub const ECHO_FILE: &str = "run_config.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthCounts {
    pub name: String,
    pub live: usize,
    pub print: usize,
    pub screen: usize,
    pub mask: usize,
}

impl Default for SynthCounts {
    fn default() -> Self {
        Self {
            name: "synth".into(),
            live: 0,
            print: 0,
            screen: 0,
            mask: 0,
        }
    }
}

/// Everything a command needs, fully resolved. Written next to the outputs
/// of every command; feeding it back through `--config` repeats the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    /// Selects the default L1 weight and baseline epoch budget.
    pub mode: Protocol,
    /// Network input side; `None` means "take it from the dataset".
    pub image_size: Option<usize>,
    pub width: f64,
    pub blocks_per_stage: usize,
    pub critic_blocks_per_stage: usize,
    pub out: Option<PathBuf>,
    pub data: DataPaths,
    pub synth: SynthCounts,
    pub backbone: Option<String>,
    pub sources: Vec<String>,
    pub classifier: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub epoch_normalize: Option<usize>,
    pub multihead: bool,
    pub dump_depths: bool,
    pub resume: bool,
    pub train: TrainConfig,
}

impl RunConfig {
    fn defaults(command: &str, mode: Protocol, seed: Option<u64>) -> Self {
        let arch = ArchConfig::default();
        let mut train = TrainConfig::for_protocol(mode);
        if let Some(s) = seed {
            train.seed = s;
        }
        Self {
            command: command.into(),
            mode,
            image_size: None,
            width: arch.width,
            blocks_per_stage: arch.blocks_per_stage,
            critic_blocks_per_stage: arch.critic_blocks_per_stage,
            out: None,
            data: DataPaths::default(),
            synth: SynthCounts::default(),
            backbone: None,
            sources: Vec::new(),
            classifier: None,
            epochs: None,
            epoch_normalize: None,
            multihead: false,
            dump_depths: false,
            resume: false,
            train,
        }
    }

    /// Architecture for inputs of `size` pixels unless an image size was
    /// configured explicitly.
    pub fn arch(&self, size: usize) -> ArchConfig {
        ArchConfig {
            width: self.width,
            blocks_per_stage: self.blocks_per_stage,
            critic_blocks_per_stage: self.critic_blocks_per_stage,
            image_size: self.image_size.unwrap_or(size),
        }
    }

    pub fn out_dir(&self) -> anyhow::Result<&Path> {
        self.out.as_deref().ok_or_else(|| Usage("an output directory is required (--out)".into()).into())
    }

    pub fn echo(&self, dir: &Path) -> anyhow::Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(ECHO_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

/// Explicitly given flags, as a sparse JSON object keyed by dotted paths.
#[derive(Default)]
pub struct Overrides(Map<String, Value>);

impl Overrides {
    pub fn set<T: Serialize>(&mut self, path: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            let v = serde_json::to_value(v).expect("flag values serialize");
            let mut keys: Vec<&str> = path.split('.').collect();
            let last = keys.pop().expect("non-empty path");
            let mut obj = &mut self.0;
            for k in keys {
                obj = obj
                    .entry(k)
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("override paths do not collide");
            }
            obj.insert(last.to_string(), v);
        }
        self
    }

    pub fn flag(&mut self, path: &str, on: bool) -> &mut Self {
        self.set(path, on.then_some(true))
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Usage(format!("{SEED_ENV}={s:?} is not an unsigned integer")).into()),
        Err(_) => Ok(None),
    }
}

pub fn resolve(command: &str, file: Option<&Path>, flags: Overrides) -> anyhow::Result<RunConfig> {
    let file_value = match file {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| Usage(format!("config {} is not valid JSON: {e}", p.display())))?;
            if !v.is_object() {
                return Err(Usage(format!("config {} must hold a JSON object", p.display())).into());
            }
            v
        }
        None => Value::Object(Map::new()),
    };
    let flags = Value::Object(flags.0);
    // The mode is settled first because it picks the default tier.
    let mode = [&flags, &file_value]
        .iter()
        .find_map(|v| v.get("mode").cloned())
        .map(serde_json::from_value::<Protocol>)
        .transpose()
        .map_err(|e| Usage(format!("invalid mode: {e}")))?
        .unwrap_or_default();

    let mut value = serde_json::to_value(RunConfig::defaults(command, mode, env_seed()?))?;
    merge(&mut value, file_value);
    merge(&mut value, flags);
    value["command"] = Value::String(command.into());
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Usage(format!("invalid configuration: {e}")))?;
    cfg.train.validate().map_err(|e| Usage(e.to_string()))?;
    Ok(cfg)
}
