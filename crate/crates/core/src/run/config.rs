//! Run configuration: one TOML document with `model`, `train`, `data`,
//! `paths` and an optional `sweep` section, layered as
//! preset → config file → `--set` overrides.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EmbedConfig, HeadType, WideNetConfig};
use crate::train::{DataConfig, DatasetKind, TrainConfig};

const SECTIONS: [&str; 5] = ["model", "train", "data", "paths", "sweep"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub out_dir: PathBuf,
    /// Checkpoint directory; `out_dir/checkpoint` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Metrics stream; `out_dir/metrics.jsonl` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/widenet"),
            checkpoint: None,
            metrics: None,
        }
    }
}

/// Trains one model per routing-group count and tabulates eval accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub groups: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: WideNetConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub paths: Paths,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

fn toml_error(e: impl std::fmt::Display) -> Error {
    Error::config("config", e.to_string().trim().to_string())
}

impl RunConfig {
    pub fn checkpoint_dir(&self) -> PathBuf {
        self.paths.checkpoint.clone().unwrap_or_else(|| self.paths.out_dir.join("checkpoint"))
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.paths.metrics.clone().unwrap_or_else(|| self.paths.out_dir.join("metrics.jsonl"))
    }

    /// Checks every section and their mutual consistency.
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| match e {
            Error::Config { field, message } => Error::Config {
                field: format!("model.{field}"),
                message,
            },
            other => other,
        })?;
        self.train.validate()?;
        self.data.validate()?;
        self.data.check_model(&self.model.embed, self.model.num_classes)?;
        if let Some(s) = &self.sweep {
            if s.groups.is_empty() {
                return Err(Error::config("sweep.groups", "must list at least one group count"));
            }
            if let Some(g) = s.groups.iter().find(|&&g| g == 0 || self.model.depth % g != 0) {
                return Err(Error::config(
                    "sweep.groups",
                    format!("{g} groups do not divide depth {}", self.model.depth),
                ));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(toml_error)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(toml_error)
    }

    /// Layers `file` (a TOML document) and then `overrides` (`key=value`)
    /// over `self`. Unknown keys anywhere are rejected.
    pub fn layered(&self, file: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut root = toml::Table::try_from(self).map_err(toml_error)?;
        if let Some(text) = file {
            let t: toml::Table = text.parse().map_err(toml_error)?;
            merge(&mut root, t);
        }
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(root).try_into().map_err(toml_error)?;
        cfg.validate()?;
        Ok(cfg)
    }
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

/// Parses the right-hand side of `--set` as a TOML value, falling back to a
/// bare string (`activation=relu`).
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies one `key=value`. The key is dotted (`train.lr`,
/// `model.embed.vocab`) or starts with a bare field name that exactly one
/// section defines (`share_ln`).
pub fn apply_override(root: &mut toml::Table, item: &str) -> Result<()> {
    let Some((key, raw)) = item.split_once('=') else {
        return Err(Error::config(item, "override must look like key=value"));
    };
    let key = key.trim();
    let mut path: Vec<&str> = key.split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty key segment"));
    }
    if !SECTIONS.contains(&path[0]) {
        let owners: Vec<&str> = SECTIONS
            .iter()
            .copied()
            .filter(|s| matches!(root.get(*s), Some(toml::Value::Table(t)) if t.contains_key(path[0])))
            .collect();
        match owners.as_slice() {
            [one] => path.insert(0, one),
            [] => return Err(Error::config(key, "unknown key")),
            many => {
                let options: Vec<String> = many.iter().map(|s| format!("{s}.{key}")).collect();
                return Err(Error::config(key, format!("ambiguous key; use {}", options.join(" or "))));
            }
        }
    }
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::config(key, format!("`{p}` is not a section"))),
        };
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

pub const PRESETS: [&str; 6] = [
    "widenet-toy",
    "vit-toy",
    "widenet-toy-sharedln",
    "widenet-toy-nosharing",
    "group-sweep",
    "squad1-style",
];

fn widenet_toy() -> RunConfig {
    RunConfig {
        model: WideNetConfig::default(),
        train: TrainConfig {
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            warmup: 100,
            label_smoothing: 0.0,
            eval_every: 500,
            checkpoint_every: 500,
            ..TrainConfig::default()
        },
        data: DataConfig::default(),
        paths: Paths {
            out_dir: PathBuf::from("runs/widenet-toy"),
            ..Paths::default()
        },
        sweep: None,
    }
}

/// Named starting points for `train`.
pub fn preset(name: &str) -> Result<RunConfig> {
    let mut c = widenet_toy();
    match name {
        "widenet-toy" => {}
        "vit-toy" => {
            c.model.use_moe = false;
            c.model.share_attn = false;
            c.model.share_moe = false;
            c.model.head = HeadType::TokenCls;
            c.model.embed = EmbedConfig::Patch {
                image_size: 8,
                patch_size: 4,
                channels: 1,
            };
            c.data.kind = DatasetKind::TinyImage;
        }
        "widenet-toy-sharedln" => c.model.share_ln = true,
        "widenet-toy-nosharing" => {
            c.model.share_attn = false;
            c.model.share_moe = false;
        }
        "group-sweep" => {
            c.train.steps = 400;
            let d = c.model.depth;
            let mut groups = vec![1, 2, 4, d];
            groups.dedup();
            c.sweep = Some(SweepConfig { groups });
        }
        "squad1-style" => {
            c.model.balance_weight = 0.0;
            c.model.capacity_ratio = 2.0;
        }
        other => {
            return Err(Error::config(
                "preset",
                format!("unknown preset {other:?}; available: {}", PRESETS.join(", ")),
            ))
        }
    }
    c.paths.out_dir = PathBuf::from(format!("runs/{name}"));
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for p in PRESETS {
            preset(p).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn toml_round_trip_is_exact() {
        let mut c = preset("group-sweep").unwrap();
        c.train.lr = 0.1 + 0.2;
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn bare_and_dotted_overrides() {
        let c = preset("widenet-toy").unwrap();
        let o = c
            .layered(None, &["share_ln=true".into(), "train.lr=2e-3".into(), "activation=relu".into()])
            .unwrap();
        assert!(o.model.share_ln);
        assert_eq!(o.train.lr, 2e-3);
        assert_eq!(o.model.activation, crate::moe::Activation::Relu);
    }

    #[test]
    fn ambiguous_and_unknown_keys() {
        let c = RunConfig::default();
        assert!(matches!(c.layered(None, &["seed=3".into()]), Err(Error::Config { .. })));
        assert!(c.layered(None, &["model.depthh=3".into()]).is_err());
        assert!(c.layered(None, &["nope=3".into()]).is_err());
    }

    #[test]
    fn field_level_errors() {
        match RunConfig::default().layered(None, &["groups=3".into()]) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "model.groups"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn file_then_overrides() {
        let c = RunConfig::default()
            .layered(Some("[train]\nsteps = 7\nwarmup = 2\nlr = 0.5"), &["train.lr=0.25".into()])
            .unwrap();
        assert_eq!((c.train.steps, c.train.lr), (7, 0.25));
    }
}
