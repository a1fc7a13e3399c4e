//! `[section] key = value` run configuration with command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::{Path, PathBuf};

use crate::autodiff::AdamConfig;
use crate::data::TargetSpec;
use crate::error::{Error, Result};
use crate::models::HeadKind;
use crate::training::{Decode, LossKind, Preset, TrainConfig};

/// One documented configuration key.
pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

const fn key(name: &'static str, default: &'static str, doc: &'static str) -> Key {
    Key { name, default, doc }
}

/// Every accepted key, grouped by section.
pub const KEYS: &[Key] = &[
    key("data.source", "synthetic", "synthetic | manifest | scan"),
    key("data.manifest", "", "CSV manifest (image_path,pts_path,dataset,split); required for source = manifest"),
    key("data.root", "", "dataset root in the standard directory layout; required for source = scan"),
    key("data.occluded", "", "file of occluded sample ids, one per line; adds occlusion rows to eval"),
    key("data.synth_count", "500", "number of synthetic faces"),
    key("data.synth_size", "64", "synthetic image side in pixels"),
    key("data.synth_seed", "1234", "synthetic generator seed"),
    key("model.head", "pwc", "direct | cascaded | distribution | heatmap_regression | pwc"),
    key("model.preset", "desk", "desk (64 px input) | reference (224 px input)"),
    key("model.scale", "0.125", "channel width multiplier in (0, 1]"),
    key("train.loss", "auto", "auto | reg | dist | hreg | pwc | hybrid | hybrid+disc | pwc+disc"),
    key("train.alpha", "1", "pixel-wise classification weight of the hybrid loss"),
    key("train.beta", "0.25", "coordinate regression weight of the hybrid loss"),
    key("train.face_weight", "1", "weight of the shape-plausibility term in adversarial training"),
    key("train.temperature", "1", "soft-argmax temperature"),
    key("train.sigma", "1", "Gaussian target sigma in map pixels"),
    key("train.pwc_radius", "0", "pixel-wise classification label radius in map pixels"),
    key("train.disc_widths", "128,128", "discriminator hidden widths"),
    key("train.batch_size", "8", "samples per step (>= 2)"),
    key("train.lr", "0.0001", "Adam learning rate"),
    key("train.beta1", "0.9", "Adam first-moment decay"),
    key("train.beta2", "0.999", "Adam second-moment decay"),
    key("train.eps", "1e-8", "Adam epsilon"),
    key("train.augment", "true", "random rotation and scaling of training samples"),
    key("train.val_interval", "100", "steps between validations"),
    key("train.patience", "10", "validations without improvement before stopping"),
    key("train.max_steps", "3000", "step budget"),
    key("train.seed", "0", "initialization and sampling seed"),
    key("eval.checkpoints", "", "comma-separated checkpoints, one table column each; default <out>/best.ckpt"),
    key("eval.decode", "auto", "auto | argmax | softargmax"),
    key("eval.svg", "false", "also write ECDF staircase plots as SVG"),
];

pub fn find_key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

/// Key table printed by `--help`.
pub fn keys_help() -> String {
    let mut s = String::from("Configuration keys (file `[section]` + `key = value`, or --set section.key=value):\n");
    let width = KEYS.iter().map(|k| k.name.len()).max().unwrap_or(0);
    for k in KEYS {
        let d = if k.default.is_empty() { "\"\"" } else { k.default };
        let _ = writeln!(s, "  {:<width$}  default {:<10} {}", k.name, d, k.doc);
    }
    s
}

/// Where a data set comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic { count: usize, size: usize, seed: u64 },
    Manifest(PathBuf),
    Scan(PathBuf),
}

/// Resolved key/value configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { values: KEYS.iter().map(|k| (k.name, k.default.to_string())).collect() }
    }
}

fn strip_comment(line: &str) -> &str {
    let line = line.trim();
    if line.starts_with('#') {
        return "";
    }
    match line.find(" #").or_else(|| line.find("\t#")) {
        Some(i) => line[..i].trim_end(),
        None => line,
    }
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"').and_then(|v| v.strip_suffix('"')).unwrap_or(v)
}

impl RunConfig {
    /// Parses a config file body; `origin` names it in diagnostics.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let at = |m: String| Error::Config(format!("{origin}:{}: {m}", n + 1));
            let line = strip_comment(raw);
            if line.is_empty() {
                continue;
            }
            if let Some(s) = line.strip_prefix('[') {
                let name = s.strip_suffix(']').ok_or_else(|| at(format!("malformed section header `{line}`")))?.trim();
                if !KEYS.iter().any(|k| k.name.split('.').next() == Some(name)) {
                    return Err(at(format!("unknown section `[{name}]`")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            let sec = section.as_deref().ok_or_else(|| at(format!("key `{}` outside any [section]", k.trim())))?;
            let full = format!("{sec}.{}", k.trim());
            cfg.set(&full, unquote(v.trim())).map_err(|e| at(e.to_string().trim_start_matches("config error: ").to_string()))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let key = find_key(name).ok_or_else(|| Error::Config(format!("unknown key `{name}`")))?;
        self.values.insert(key.name, value.to_string());
        Ok(())
    }

    /// Applies one `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects section.key=value, got `{assignment}`")))?;
        self.set(k.trim(), unquote(v.trim()))
    }

    pub fn get(&self, name: &str) -> &str {
        self.values.get(name).map(String::as_str).unwrap_or_else(|| panic!("undeclared key {name}"))
    }

    fn typed<T: std::str::FromStr>(&self, name: &str) -> Result<T> {
        let v = self.get(name);
        v.parse().map_err(|_| Error::Config(format!("{name}: cannot parse `{v}`")))
    }

    fn flag(&self, name: &str) -> Result<bool> {
        match self.get(name) {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            v => Err(Error::Config(format!("{name}: expected true or false, got `{v}`"))),
        }
    }

    fn path(&self, name: &str, what: &str) -> Result<PathBuf> {
        let v = self.get(name);
        if v.is_empty() {
            return Err(Error::Config(format!("{name} is not set ({what})")));
        }
        let p = PathBuf::from(v);
        if !p.exists() {
            return Err(Error::Config(format!("{name}: `{v}` does not exist")));
        }
        Ok(p)
    }

    pub fn data_source(&self) -> Result<DataSource> {
        match self.get("data.source") {
            "synthetic" => Ok(DataSource::Synthetic {
                count: self.typed("data.synth_count")?,
                size: self.typed("data.synth_size")?,
                seed: self.typed("data.synth_seed")?,
            }),
            "manifest" => Ok(DataSource::Manifest(self.path("data.manifest", "required for data.source = manifest")?)),
            "scan" => Ok(DataSource::Scan(self.path("data.root", "required for data.source = scan")?)),
            v => Err(Error::Config(format!("data.source: expected synthetic, manifest or scan, got `{v}`"))),
        }
    }

    pub fn occluded_list(&self) -> Result<Option<PathBuf>> {
        if self.get("data.occluded").is_empty() {
            return Ok(None);
        }
        self.path("data.occluded", "occluded id list").map(Some)
    }

    pub fn checkpoints(&self) -> Vec<PathBuf> {
        self.get("eval.checkpoints").split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect()
    }

    pub fn eval_decode(&self) -> Result<Decode> {
        let v = self.get("eval.decode");
        Decode::parse(v).ok_or_else(|| Error::Config(format!("eval.decode: unknown decoder `{v}`")))
    }

    pub fn svg(&self) -> Result<bool> {
        self.flag("eval.svg")
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let head_s = self.get("model.head");
        let head = HeadKind::parse(head_s).ok_or_else(|| Error::Config(format!("model.head: unknown head `{head_s}`")))?;
        let loss = match self.get("train.loss") {
            "auto" => LossKind::default_for(head),
            s => LossKind::parse(s).ok_or_else(|| Error::Config(format!("train.loss: unknown loss `{s}`")))?,
        };
        let preset_s = self.get("model.preset");
        let preset = Preset::parse(preset_s).ok_or_else(|| Error::Config(format!("model.preset: unknown preset `{preset_s}`")))?;
        let disc_widths = self
            .get("train.disc_widths")
            .split(',')
            .map(|w| w.trim().parse::<usize>().map_err(|_| Error::Config(format!("train.disc_widths: cannot parse `{w}`"))))
            .collect::<Result<Vec<_>>>()?;
        let cfg = TrainConfig {
            head,
            loss,
            preset,
            scale: self.typed("model.scale")?,
            alpha: self.typed("train.alpha")?,
            beta: self.typed("train.beta")?,
            face_weight: self.typed("train.face_weight")?,
            temperature: self.typed("train.temperature")?,
            decode: self.eval_decode()?,
            target: TargetSpec { sigma: self.typed("train.sigma")?, pwc_radius: self.typed("train.pwc_radius")? },
            disc_widths,
            batch_size: self.typed("train.batch_size")?,
            adam: AdamConfig {
                lr: self.typed("train.lr")?,
                beta1: self.typed("train.beta1")?,
                beta2: self.typed("train.beta2")?,
                eps: self.typed("train.eps")?,
            },
            augment: self.flag("train.augment")?,
            val_interval: self.typed("train.val_interval")?,
            patience: self.typed("train.patience")?,
            max_steps: self.typed("train.max_steps")?,
            seed: self.typed("train.seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
