//! Backbone plus head, sharing one parameter store.

use std::path::Path;

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbones::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::heads::{build_head, Head, HeadVariant};
use crate::maskops::HeadInput;
use crate::nn::{read_checkpoint, write_checkpoint, ParamStore};

pub const BACKBONE_PREFIX: &str = "backbone";
pub const HEAD_PREFIX: &str = "head";
const CKPT_KIND: &str = "classifier";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub backbone: BackboneConfig,
    pub head: HeadVariant,
    pub num_classes: usize,
    #[serde(default)]
    pub head_seed: u64,
    /// Divide the pooled sum by the foreground cell count under final-stage masking.
    #[serde(default)]
    pub gap_fg_normalize: bool,
}

#[derive(Clone, Debug)]
pub struct ClassifierModel {
    config: ClassifierConfig,
    store: ParamStore,
    backbone: Backbone,
    head: Head,
}

impl ClassifierModel {
    pub fn new(config: ClassifierConfig, dtype: DType) -> Result<Self> {
        if !config.head.compatible_with(config.backbone.kind) {
            return Err(Error::field(
                "head",
                format!("`{}` does not fit a {:?} backbone", config.head.as_str(), config.backbone.kind),
            ));
        }
        if config.num_classes < 2 {
            return Err(Error::field("num_classes", "need at least 2 classes"));
        }
        let mut store = ParamStore::new(dtype);
        let backbone = Backbone::build(&config.backbone, &mut store, BACKBONE_PREFIX)?;
        let head = build_head(
            config.head,
            config.backbone.width,
            config.num_classes,
            config.head_seed,
            &mut store,
            HEAD_PREFIX,
        )?;
        Ok(Self {
            config,
            store,
            backbone,
            head,
        })
    }

    /// Fresh head of `variant` on a copy of `source`'s backbone weights.
    pub fn with_new_head(source: &ClassifierModel, variant: HeadVariant, head_seed: u64) -> Result<Self> {
        let config = ClassifierConfig {
            head: variant,
            head_seed,
            ..source.config.clone()
        };
        let model = Self::new(config, source.dtype())?;
        let backbone_values: Vec<_> = source
            .store
            .snapshot()?
            .into_iter()
            .filter(|(n, _, _)| is_backbone_param(n))
            .collect();
        for p in model.store.params().iter().filter(|p| is_backbone_param(&p.name)) {
            let (_, shape, vals) = backbone_values
                .iter()
                .find(|(n, _, _)| *n == p.name)
                .ok_or_else(|| Error::Checkpoint(format!("source lacks `{}`", p.name)))?;
            let t = Tensor::from_slice(vals, shape.as_slice(), &candle_core::Device::Cpu)?.to_dtype(model.dtype())?;
            p.var.set(&t)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Unmasked logits for a `B x 3 x H x W` batch.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let f = self.backbone.forward_batch(images, self.backbone.last_stage())?;
        self.head.classify(&f)
    }

    pub(crate) fn head_representation(&self, input: &HeadInput) -> Result<Tensor> {
        let fg = if self.config.gap_fg_normalize {
            input.final_mask.as_ref()
        } else {
            None
        };
        self.head.representation(&input.features, fg)
    }

    pub(crate) fn head_logits(&self, input: &HeadInput) -> Result<Tensor> {
        self.head.forward_representation(&self.head_representation(input)?)
    }

    pub fn backbone_vars(&self) -> Vec<Var> {
        self.store.vars_where(is_backbone_param)
    }

    pub fn head_vars(&self) -> Vec<Var> {
        self.store.vars_where(|n| !is_backbone_param(n))
    }

    /// Checksum over backbone parameters only.
    pub fn backbone_checksum(&self) -> Result<String> {
        use sha2::Digest;
        let mut h = sha2::Sha256::new();
        for (name, _, vals) in self.store.snapshot()? {
            if is_backbone_param(&name) {
                h.update(name.as_bytes());
                for v in vals {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, CKPT_KIND, &self.config, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = read_checkpoint(path)?;
        if ck.kind != CKPT_KIND {
            return Err(Error::Checkpoint(format!("expected a {CKPT_KIND} checkpoint, found `{}`", ck.kind)));
        }
        let config: ClassifierConfig = serde_json::from_value(ck.config)?;
        let model = Self::new(config, DType::F32)?;
        model.store.load(&ck.tensors)?;
        Ok(model)
    }
}

pub fn is_backbone_param(name: &str) -> bool {
    name.starts_with(BACKBONE_PREFIX)
}
