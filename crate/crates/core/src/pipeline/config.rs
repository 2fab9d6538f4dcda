//! TOML run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::losses::FocalParams;
use crate::pipeline::data::SyntheticDatasetSpec;
use crate::pipeline::model::HeadConfig;
use crate::pipeline::train::TrainConfig;
use crate::targets::TargetParams;

/// File name of the resolved config written beside every run's outputs.
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds weight initialization and the per-epoch shuffle.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: SyntheticDatasetSpec,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub focal: FocalParams,
    #[serde(default)]
    pub targets: TargetParams,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: default_output_dir(),
            data: SyntheticDatasetSpec::default(),
            head: HeadConfig::default(),
            focal: FocalParams::default(),
            targets: TargetParams::default(),
            inference: InferenceConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config {
            field: e.span().map(|s| key_at(text, s.start)).unwrap_or_default(),
            message: e.message().to_string(),
        })?;
        let doc: toml::Table = text.parse().expect("already parsed");
        let reference = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        check_types(&doc, &reference, "")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.head.validate()?;
        self.train.validate()?;
        self.inference.refine.validate().map_err(|e| Error::Config {
            field: "inference.refine".into(),
            message: e.to_string(),
        })?;
        if !(0.0..=1.0).contains(&self.inference.nms_iou) {
            return Err(Error::Config {
                field: "inference.nms_iou".into(),
                message: "must lie in [0, 1]".into(),
            });
        }
        if !(self.targets.iou_floor > 0.0 && self.targets.iou_floor < 1.0) {
            return Err(Error::Config {
                field: "targets.iou_floor".into(),
                message: "must lie in (0, 1)".into(),
            });
        }
        Ok(())
    }

    /// Inference settings with the joint-inference switch taken from the head.
    pub fn inference_config(&self) -> InferenceConfig {
        InferenceConfig {
            joint_inference: self.head.joint_inference,
            ..self.inference
        }
    }

    /// Writes the fully resolved config into `dir` and returns its path.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(path)
    }
}

/// Rejects values whose TOML type differs from the reference, so `lr = 1`
/// is an error rather than a float.
fn check_types(doc: &toml::Table, reference: &toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in doc {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let Some(r) = reference.get(k) else { continue };
        check_value(v, r, &path)?;
    }
    Ok(())
}

fn check_value(v: &toml::Value, r: &toml::Value, path: &str) -> Result<()> {
    use toml::Value;
    match (v, r) {
        (Value::Table(a), Value::Table(b)) => check_types(a, b, path),
        (Value::Array(a), Value::Array(b)) => match b.first() {
            Some(proto) => a.iter().try_for_each(|x| check_value(x, proto, path)),
            None => Ok(()),
        },
        _ if v.type_str() == r.type_str() => Ok(()),
        _ => Err(Error::Config {
            field: path.to_string(),
            message: format!("expected {}, found {}", r.type_str(), v.type_str()),
        }),
    }
}

/// Dotted key path of the table entry enclosing byte `offset`, best effort.
fn key_at(text: &str, offset: usize) -> String {
    let before = &text[..offset.min(text.len())];
    let table = before
        .lines()
        .rev()
        .find_map(|l| l.trim().strip_prefix('[').and_then(|r| r.strip_suffix(']')))
        .map(str::trim);
    let line = text[before.rfind('\n').map_or(0, |i| i + 1)..].lines().next().unwrap_or("");
    let key = line.split('=').next().unwrap_or("").trim();
    match (table, key.is_empty() || key.starts_with('[')) {
        (Some(t), false) => format!("{t}.{key}"),
        (Some(t), true) => t.to_string(),
        (None, false) => key.to_string(),
        (None, true) => String::new(),
    }
}
