//! Experiment configuration file and `--set` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbones::BackboneConfig;
use crate::error::{Error, Result};
use crate::heads::HeadVariant;
use crate::maskops::StrategyConfig;
use crate::segmodel::SegmenterConfig;
use crate::synthset::DatasetSpec;
use crate::trainkit::{PretrainConfig, Regime, TrainConfig};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "MASKBENCH_OUT";

/// Either a generated dataset or an existing dataset directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<DatasetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

fn default_model_name() -> String {
    "toy".into()
}

fn default_id_name() -> String {
    "CUB-analog".into()
}

fn default_ood_name() -> String {
    "OOD".into()
}

fn default_stages() -> Vec<String> {
    ["L", "L-1", "0"].map(String::from).to_vec()
}

fn default_compare() -> Vec<StrategyConfig> {
    vec![StrategyConfig::baseline(), StrategyConfig::early()]
}

fn default_head_variants() -> Vec<HeadVariant> {
    HeadVariant::VIT.to_vec()
}

fn default_head_strategies() -> Vec<StrategyConfig> {
    vec![StrategyConfig::baseline(), StrategyConfig::early(), StrategyConfig::late("L-1")]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    /// Model column in results tables.
    #[serde(default = "default_model_name")]
    pub model_name: String,
    #[serde(default = "default_id_name")]
    pub id_name: String,
    #[serde(default = "default_ood_name")]
    pub ood_name: String,
    /// Strategies compared by `eval` when no classifier checkpoints exist.
    #[serde(default = "default_compare")]
    pub compare: Vec<StrategyConfig>,
    #[serde(default = "default_stages")]
    pub stages: Vec<String>,
    #[serde(default = "default_head_variants")]
    pub head_variants: Vec<HeadVariant>,
    #[serde(default = "default_head_strategies")]
    pub head_strategies: Vec<StrategyConfig>,
    /// Training configs of the head sweep, one per regime; derived from `train` when empty.
    #[serde(default)]
    pub regimes: Vec<TrainConfig>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Default::default())).expect("all eval fields have defaults")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportOptions {
    /// Results files to render; all of `<output>/results/*.csv` when empty.
    #[serde(default)]
    pub inputs: Vec<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub dataset: DatasetSection,
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub strategy: StrategyConfig,
    pub head: HeadVariant,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalOptions,
    #[serde(default)]
    pub segmenter: SegmenterConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainConfig>,
    #[serde(default)]
    pub report: ReportOptions,
}

impl ExperimentConfig {
    /// Parses JSON text, naming the offending field on failure.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| Error::field("<config>", e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::field(if path == "." { "<config>".into() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::field("<config>", format!("{}: {e}", path.display())))?;
        Self::from_json(&text, overrides)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.dataset.spec, &self.dataset.path) {
            (Some(spec), None) => {
                spec.validate()?;
                if spec.image_size != self.backbone.image_size {
                    return Err(Error::field("backbone.image_size", "must equal dataset.spec.image_size"));
                }
            }
            (None, Some(_)) => {}
            _ => return Err(Error::field("dataset", "give exactly one of `spec` and `path`")),
        }
        self.backbone.validate()?;
        self.strategy.resolve(&self.backbone)?;
        if !self.head.compatible_with(self.backbone.kind) {
            return Err(Error::field(
                "head",
                format!("`{}` does not fit a {:?} backbone", self.head.as_str(), self.backbone.kind),
            ));
        }
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::field("seeds", "need at least one seed"));
        }
        for s in &self.eval.stages {
            if s != "0" {
                self.backbone
                    .parse_stage(s)
                    .map_err(|_| Error::field("eval.stages", format!("unknown stage `{s}`")))?;
            }
        }
        for s in self.eval.compare.iter().chain(&self.eval.head_strategies) {
            s.resolve(&self.backbone)?;
        }
        for r in &self.eval.regimes {
            r.validate()?;
        }
        if !(self.segmenter.threshold > 0.0 && self.segmenter.threshold < 1.0) {
            return Err(Error::field("segmenter.threshold", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Output root: the config value, else `$MASKBENCH_OUT`, else `runs`.
    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    /// Head-sweep training configs: the explicit list, or frozen and
    /// fine-tuned variants of `train`.
    pub fn head_sweep_regimes(&self) -> Vec<TrainConfig> {
        if !self.eval.regimes.is_empty() {
            return self.eval.regimes.clone();
        }
        let frozen = TrainConfig {
            regime: Regime::Frozen,
            lr_backbone: None,
            lr_pre_mask: None,
            ..self.train.clone()
        };
        let fine = TrainConfig {
            regime: Regime::FineTune,
            lr_backbone: Some(self.train.lr_backbone.unwrap_or(self.train.lr_classifier / 10.0)),
            ..self.train.clone()
        };
        vec![frozen, fine]
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        use sha2::Digest;
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(sha2::Sha256::digest(canonical.as_bytes()))
    }
}

/// Applies `a.b.c=value`; the value is parsed as JSON, falling back to a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::field("--set", format!("`{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::field("--set", format!("bad key `{key}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::field(parts[..i].join("."), "is not an object"))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
    }
    unreachable!("loop returns on the last key part")
}
