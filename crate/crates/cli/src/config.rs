use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tesl_core::model::{Preset, TeslNetConfig};
use tesl_core::train::TrainConfig;
use tesl_core::{Error, Result};

pub const RESOLVED_CONFIG: &str = "resolved-config";

/// Everything a command needs, after merging preset, config file and flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    #[serde(default)]
    pub allow_missing: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outdir: Option<PathBuf>,
    pub model: TeslNetConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Flag values that win over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<String>,
    pub data: Option<String>,
    pub outdir: Option<PathBuf>,
    pub allow_missing: bool,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub loss: Option<String>,
    pub seed: Option<u64>,
    pub threshold: Option<f64>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set(table: &mut toml::Table, path: &[&str], value: toml::Value) {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut t = table;
    for p in parents {
        t = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .expect("section is a table");
    }
    t.insert(last.to_string(), value);
}

fn int(v: impl TryInto<i64>, name: &str) -> Result<toml::Value> {
    v.try_into()
        .map(toml::Value::Integer)
        .map_err(|_| config_err(format!("{name} is out of range")))
}

impl RunConfig {
    /// Preset defaults, overlaid by `file` (if any), overlaid by `flags`.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let file_table: toml::Table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let preset_name = match (&flags.preset, file_table.get("preset")) {
            (Some(p), _) => p.clone(),
            (None, Some(toml::Value::String(p))) => p.clone(),
            (None, Some(_)) => return Err(config_err("preset must be a string")),
            (None, None) => Preset::Desk.name().to_string(),
        };
        let preset = Preset::from_name(&preset_name)?;
        let base = RunConfig {
            preset,
            data: None,
            allow_missing: false,
            outdir: None,
            model: preset.config(),
            train: TrainConfig::default(),
        };
        let mut table = toml::Table::try_from(&base).map_err(|e| config_err(e.to_string()))?;
        merge(&mut table, file_table);
        set(&mut table, &["preset"], toml::Value::String(preset_name));

        if let Some(d) = &flags.data {
            set(&mut table, &["data"], toml::Value::String(d.clone()));
        }
        if let Some(o) = &flags.outdir {
            set(&mut table, &["outdir"], toml::Value::String(o.display().to_string()));
        }
        if flags.allow_missing {
            set(&mut table, &["allow_missing"], toml::Value::Boolean(true));
        }
        if let Some(e) = flags.epochs {
            set(&mut table, &["train", "epochs"], int(e, "epochs")?);
        }
        if let Some(b) = flags.batch_size {
            set(&mut table, &["train", "batch_size"], int(b, "batch_size")?);
        }
        if let Some(lr) = flags.lr {
            set(&mut table, &["train", "lr0"], toml::Value::Float(lr));
        }
        if let Some(l) = &flags.loss {
            set(&mut table, &["train", "loss"], toml::Value::String(l.clone()));
        }
        if let Some(t) = flags.threshold {
            set(&mut table, &["train", "threshold"], toml::Value::Float(t));
        }
        if let Some(s) = flags.seed {
            set(&mut table, &["train", "seed"], int(s, "seed")?);
            set(&mut table, &["model", "seed"], int(s, "seed")?);
        }

        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn outdir(&self) -> Result<&Path> {
        self.outdir
            .as_deref()
            .ok_or_else(|| config_err("no output directory (use --outdir or set outdir in the config file)"))
    }

    pub fn data(&self) -> Result<&str> {
        self.data
            .as_deref()
            .ok_or_else(|| config_err("no dataset (use --data or set data in the config file)"))
    }

    /// Creates the output directory and writes `resolved-config` into it.
    pub fn write_resolved(&self) -> Result<PathBuf> {
        let dir = self.outdir()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("run.toml");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn defaults_are_desk() {
        let c = RunConfig::resolve(None, &Overrides::default()).unwrap();
        assert_eq!(c.preset, Preset::Desk);
        assert_eq!(c.model, TeslNetConfig::desk());
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn flags_beat_file_beats_preset() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "preset = \"desk\"\ndata = \"synth:n=4\"\n[train]\nepochs = 3\nloss = \"dice\"\n[model.swin]\nheads = 2\n",
        );
        let flags = Overrides {
            epochs: Some(5),
            ..Default::default()
        };
        let c = RunConfig::resolve(Some(&p), &flags).unwrap();
        assert_eq!(c.train.epochs, 5);
        assert_eq!(c.train.loss, "dice");
        assert_eq!(c.data.as_deref(), Some("synth:n=4"));
        assert_eq!(c.model.swin.heads, 2);
        assert_eq!(c.model.swin.window, TeslNetConfig::desk().swin.window);
    }

    #[test]
    fn resolved_output_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let flags = Overrides {
            preset: Some("paper".into()),
            outdir: Some(dir.path().join("out")),
            seed: Some(9),
            lr: Some(0.002),
            ..Default::default()
        };
        let c = RunConfig::resolve(None, &flags).unwrap();
        let path = c.write_resolved().unwrap();
        let again = RunConfig::resolve(Some(&path), &Overrides::default()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.model.seed, 9);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for text in ["[train]\nepoch = 3\n", "typo = 1\n", "[model]\ninput_size = 60\n", "preset = \"huge\"\n"] {
            let p = write(dir.path(), text);
            let err = RunConfig::resolve(Some(&p), &Overrides::default()).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
    }
}
