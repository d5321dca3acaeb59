//! `key = value` run configuration with `[model]`, `[train]` and `[data]`
//! sections.

use std::path::{Path, PathBuf};

use lasaft::model::{ModelConfig, CONFIG_KEYS};
use lasaft::training::TrainConfig;

use crate::error::CliError;

pub const TRAIN_KEYS: [&str; 10] = [
    "batch_size",
    "steps",
    "chunk_frames",
    "seed",
    "val_every",
    "patience",
    "min_gain",
    "max_gain",
    "cross_track",
    "prefetch",
];
pub const DATA_KEYS: [&str; 2] = ["root", "out"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Section {
    Model,
    Train,
    Data,
}

impl Section {
    fn parse(name: &str) -> Option<Section> {
        match name {
            "model" => Some(Section::Model),
            "train" => Some(Section::Train),
            "data" => Some(Section::Data),
            _ => None,
        }
    }

    fn owns(self, key: &str) -> bool {
        match self {
            Section::Model => CONFIG_KEYS.contains(&key),
            Section::Train => TRAIN_KEYS.contains(&key),
            Section::Data => DATA_KEYS.contains(&key),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[derive(Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Dataset directory.
    pub data_root: Option<PathBuf>,
    /// Where the checkpoint and history go.
    pub out_dir: Option<PathBuf>,
}


fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("invalid value `{value}` for `{key}`")))
}

impl RunConfig {
    fn set(&mut self, section: Section, key: &str, value: &str, base: &Path) -> Result<(), CliError> {
        let value = value.trim();
        match section {
            Section::Model => self.model.set(key, value).map_err(|e| CliError::Usage(e.to_string()))?,
            Section::Train => {
                let t = &mut self.train;
                match key {
                    "batch_size" => t.batch_size = parse(key, value)?,
                    "steps" => t.steps = parse(key, value)?,
                    "chunk_frames" => t.chunk_frames = parse(key, value)?,
                    "seed" => t.seed = parse(key, value)?,
                    "val_every" => t.val_every = parse(key, value)?,
                    "patience" => t.patience = parse(key, value)?,
                    "min_gain" => t.augment.min_gain = parse(key, value)?,
                    "max_gain" => t.augment.max_gain = parse(key, value)?,
                    "cross_track" => t.augment.cross_track = parse(key, value)?,
                    "prefetch" => t.prefetch = parse(key, value)?,
                    _ => return Err(CliError::Usage(format!("unknown key `{key}` in [train]"))),
                }
            }
            Section::Data => {
                let p = base.join(value);
                match key {
                    "root" => self.data_root = Some(p),
                    "out" => self.out_dir = Some(p),
                    _ => return Err(CliError::Usage(format!("unknown key `{key}` in [data]"))),
                }
            }
        }
        Ok(())
    }

    /// Parses a configuration file; relative paths resolve against the
    /// file's directory.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut config = RunConfig::default();
        let mut section = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| CliError::Usage(format!("line {}: {msg}", n + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(Section::parse(name.trim()).ok_or_else(|| at(format!("unknown section [{name}]")))?);
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            let k = k.trim();
            let s = section.ok_or_else(|| at(format!("`{k}` appears before any section")))?;
            if !s.owns(k) {
                return Err(at(format!("unknown key `{k}`")));
            }
            config.set(s, k, v, base).map_err(|e| at(e.to_string()))?;
        }
        Ok(config)
    }

    /// Applies `key=value` or `section.key=value`; relative paths resolve
    /// against the working directory.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), CliError> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override `{spec}` is not key=value")))?;
        let k = k.trim();
        let (section, key) = match k.split_once('.') {
            Some((s, key)) => (
                Section::parse(s).ok_or_else(|| CliError::Usage(format!("unknown section in override `{k}`")))?,
                key,
            ),
            None => {
                let owners: Vec<Section> = [Section::Model, Section::Train, Section::Data]
                    .into_iter()
                    .filter(|s| s.owns(k))
                    .collect();
                match owners[..] {
                    [s] => (s, k),
                    [] => return Err(CliError::Usage(format!("unknown key `{k}`"))),
                    _ => return Err(CliError::Usage(format!("ambiguous key `{k}`; prefix it with its section"))),
                }
            }
        };
        if !section.owns(key) {
            return Err(CliError::Usage(format!("unknown key `{k}`")));
        }
        self.set(section, key, v, Path::new(""))
    }

    /// Checks every field before any compute.
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.train.validate(&self.model).map_err(|e| CliError::Usage(e.to_string()))?;
        match &self.data_root {
            None => return Err(CliError::Usage("`root` in [data] is required".into())),
            Some(p) if !p.join(lasaft::data::MANIFEST).is_file() => {
                return Err(CliError::Usage(format!(
                    "`root`: no dataset manifest under {}",
                    p.display()
                )))
            }
            _ => {}
        }
        if self.out_dir.is_none() {
            return Err(CliError::Usage("`out` in [data] is required".into()));
        }
        Ok(())
    }
}
