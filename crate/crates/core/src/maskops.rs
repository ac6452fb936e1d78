//! Background masking: at the image (early) or at a backbone stage (late).

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbones::{BackboneConfig, Features};
use crate::classifier::ClassifierModel;
use crate::error::{Error, Result};
use crate::heads::Logits;
use crate::synthset::{BinaryMask, Image};

/// How a pixel block is summarised into one feature-grid cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsampleRule {
    /// Foreground iff the block's foreground fraction is at least the threshold.
    Fraction(f64),
    /// Foreground iff any pixel in the block is foreground.
    AnyPixel,
}

impl Default for SubsampleRule {
    fn default() -> Self {
        SubsampleRule::Fraction(0.5)
    }
}

/// Foreground mask on a feature grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchMask(BinaryMask);

impl PatchMask {
    pub fn new(mask: BinaryMask) -> Self {
        Self(mask)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn as_mask(&self) -> &BinaryMask {
        &self.0
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.0.get(y, x)
    }
}

/// Multiplies every channel by the mask; background pixels become exactly 0.
pub fn apply_early_mask(image: &Image, mask: &BinaryMask) -> Result<Image> {
    if image.dims() != mask.dims() {
        return Err(Error::Shape(format!(
            "mask {:?} does not match image {:?}",
            mask.dims(),
            image.dims()
        )));
    }
    let plane = mask.height() * mask.width();
    let m = mask.data();
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * m[i % plane] as f32)
        .collect();
    Image::new(image.height(), image.width(), data)
}

/// Summarises each `k x k` block of `mask` into one cell of a `target` grid.
pub fn subsample_mask(mask: &BinaryMask, target: (usize, usize), rule: SubsampleRule) -> Result<PatchMask> {
    let (h, w) = mask.dims();
    let (th, tw) = target;
    if th == 0 || tw == 0 || h % th != 0 || w % tw != 0 {
        return Err(Error::Shape(format!("cannot subsample a {h}x{w} mask onto a {th}x{tw} grid")));
    }
    let (kh, kw) = (h / th, w / tw);
    let out = BinaryMask::from_fn(th, tw, |cy, cx| {
        let mut fg = 0usize;
        for y in cy * kh..(cy + 1) * kh {
            for x in cx * kw..(cx + 1) * kw {
                fg += mask.get(y, x) as usize;
            }
        }
        match rule {
            SubsampleRule::Fraction(t) => fg as f64 / (kh * kw) as f64 >= t,
            SubsampleRule::AnyPixel => fg > 0,
        }
    })?;
    Ok(PatchMask(out))
}

/// Batched subsampling of `B x 1 x H x W` 0/1 masks onto `target`.
pub fn subsample_mask_tensor(masks: &Tensor, target: (usize, usize), rule: SubsampleRule) -> Result<Tensor> {
    let (_, _, h, w) = masks.dims4()?;
    let (th, tw) = target;
    if th == 0 || tw == 0 || h % th != 0 || w % tw != 0 {
        return Err(Error::Shape(format!("cannot subsample a {h}x{w} mask onto a {th}x{tw} grid")));
    }
    if (th, tw) == (h, w) {
        return Ok(masks.clone());
    }
    let k = (h / th, w / tw);
    let dtype = masks.dtype();
    let pooled = match rule {
        SubsampleRule::Fraction(t) => masks.avg_pool2d(k)?.ge(t)?,
        SubsampleRule::AnyPixel => masks.max_pool2d(k)?.gt(0.0)?,
    };
    Ok(pooled.to_dtype(dtype)?)
}

/// Zeroes `B x D x M x N` feature vectors where the `B x 1 x M x N` mask is 0.
pub fn mask_map(features: &Tensor, pmask: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = features.dims4()?;
    let (_, c, mh, mw) = pmask.dims4()?;
    if c != 1 || (h, w) != (mh, mw) {
        return Err(Error::Shape(format!(
            "patch mask {c}x{mh}x{mw} does not fit a feature grid {h}x{w}"
        )));
    }
    Ok(features.broadcast_mul(pmask)?)
}

/// Zeroes patch tokens at background cells of the `B x 1 x M x N` mask; CLS is kept.
pub fn mask_tokens(tokens: &Tensor, grid: (usize, usize), pmask: &Tensor) -> Result<Tensor> {
    let (b, n, _) = tokens.dims3()?;
    let (_, c, mh, mw) = pmask.dims4()?;
    if c != 1 || (mh, mw) != grid || n != 1 + mh * mw {
        return Err(Error::Shape(format!(
            "{} patch tokens do not match a {mh}x{mw} patch mask",
            n.saturating_sub(1)
        )));
    }
    let keep_cls = Tensor::ones((b, 1), pmask.dtype(), pmask.device())?;
    let keep = Tensor::cat(&[&keep_cls, &pmask.reshape((b, mh * mw))?], 1)?;
    Ok(tokens.broadcast_mul(&keep.unsqueeze(2)?)?)
}

/// Masks a batched representation on its own grid.
pub fn mask_features(features: &Features, pmask: &Tensor) -> Result<Features> {
    Ok(match features {
        Features::Map(t) => Features::Map(mask_map(t, pmask)?),
        Features::Tokens { tokens, grid } => Features::Tokens {
            tokens: mask_tokens(tokens, *grid, pmask)?,
            grid: *grid,
        },
    })
}

fn single_pmask(pmask: &PatchMask, dtype: DType) -> Result<Tensor> {
    Ok(pmask.as_mask().to_tensor(dtype)?.unsqueeze(0)?)
}

/// `D x M' x N'` feature map masked by `pmask`.
pub fn apply_feature_mask(features: &Tensor, pmask: &PatchMask) -> Result<Tensor> {
    let out = mask_map(&features.unsqueeze(0)?, &single_pmask(pmask, features.dtype())?)?;
    Ok(out.squeeze(0)?)
}

/// `(1 + P) x D` token sequence with background patch tokens zeroed.
pub fn apply_token_mask(tokens: &Tensor, pmask: &PatchMask) -> Result<Tensor> {
    let grid = pmask.dims();
    let out = mask_tokens(&tokens.unsqueeze(0)?, grid, &single_pmask(pmask, tokens.dtype())?)?;
    Ok(out.squeeze(0)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    #[default]
    Baseline,
    Early,
    Late,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    Oracle,
    #[default]
    Predicted,
}

/// Strategy as written in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub strategy: StrategyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    #[serde(default)]
    pub mask_source: MaskSource,
    #[serde(default)]
    pub subsample: SubsampleRule,
}

impl StrategyConfig {
    pub fn baseline() -> Self {
        Self::default()
    }

    pub fn early() -> Self {
        Self {
            strategy: StrategyKind::Early,
            ..Self::default()
        }
    }

    pub fn late(stage: impl Into<String>) -> Self {
        Self {
            strategy: StrategyKind::Late,
            stage: Some(stage.into()),
            ..Self::default()
        }
    }

    pub fn with_source(mut self, source: MaskSource) -> Self {
        self.mask_source = source;
        self
    }

    /// Checks the stage field against `backbone` and yields the runtime strategy.
    pub fn resolve(&self, backbone: &BackboneConfig) -> Result<Strategy> {
        let stage = match (self.strategy, &self.stage) {
            (StrategyKind::Late, Some(name)) => backbone
                .parse_stage(name)
                .map_err(|_| Error::field("strategy.stage", format!("unknown stage `{name}`")))?,
            (StrategyKind::Late, None) => return Err(Error::field("strategy.stage", "late masking needs a stage")),
            (_, Some(_)) => return Err(Error::field("strategy.stage", "only late masking takes a stage")),
            (StrategyKind::Baseline, None) => return Ok(Strategy::Baseline),
            (StrategyKind::Early, None) => {
                return Ok(Strategy::Early {
                    rule: self.subsample,
                })
            }
        };
        Ok(Strategy::Late {
            stage,
            rule: self.subsample,
        })
    }
}

/// Resolved masking strategy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Strategy {
    Baseline,
    Early { rule: SubsampleRule },
    Late { stage: usize, rule: SubsampleRule },
}

impl Strategy {
    pub const EARLY: Strategy = Strategy::Early {
        rule: SubsampleRule::Fraction(0.5),
    };

    pub fn late(stage: usize) -> Self {
        Strategy::Late {
            stage,
            rule: SubsampleRule::default(),
        }
    }

    pub fn needs_mask(&self) -> bool {
        !matches!(self, Strategy::Baseline)
    }

    /// Stage at which masking happens, if any.
    pub fn mask_stage(&self) -> Option<usize> {
        match self {
            Strategy::Baseline => None,
            Strategy::Early { .. } => Some(0),
            Strategy::Late { stage, .. } => Some(*stage),
        }
    }

    fn rule(&self) -> SubsampleRule {
        match self {
            Strategy::Baseline => SubsampleRule::default(),
            Strategy::Early { rule } | Strategy::Late { rule, .. } => *rule,
        }
    }
}

/// Representation fed to the head, plus the final-grid mask when masking
/// happened at the last stage.
pub(crate) struct HeadInput {
    pub features: Features,
    pub final_mask: Option<Tensor>,
}

/// Runs the backbone under `strategy` on `B x 3 x H x W` images with
/// `B x 1 x H x W` masks. `detach_at` stops gradients after that stage.
pub(crate) fn backbone_under_strategy(
    model: &ClassifierModel,
    images: &Tensor,
    masks: Option<&Tensor>,
    strategy: &Strategy,
    detach_backbone: bool,
) -> Result<HeadInput> {
    let backbone = model.backbone();
    let last = backbone.last_stage();
    let Some(stage) = strategy.mask_stage() else {
        let f = backbone.forward_batch(images, last)?;
        return Ok(HeadInput {
            features: if detach_backbone { f.detach() } else { f },
            final_mask: None,
        });
    };
    let masks = masks.ok_or_else(|| Error::Config("a mask is required for masked strategies".into()))?;
    let (b, _, h, w) = images.dims4()?;
    if masks.dims4()? != (b, 1, h, w) {
        return Err(Error::Shape(format!("masks {:?} do not match images {:?}", masks.dims(), images.dims())));
    }
    if stage > last {
        return Err(Error::Stage(format!("stage {stage} beyond last stage {last}")));
    }
    let masks = masks.to_dtype(images.dtype())?;
    let tapped = backbone.forward_batch(images, stage)?;
    let pmask = subsample_mask_tensor(&masks, tapped.spatial_grid()?, strategy.rule())?;
    let masked = mask_features(&tapped, &pmask)?;
    let out = backbone.forward_range(masked, stage, last)?;
    Ok(HeadInput {
        features: if detach_backbone { out.detach() } else { out },
        final_mask: (stage == last).then_some(pmask),
    })
}

/// Batched logits `B x C` under `strategy`.
pub fn masked_forward_batch(
    model: &ClassifierModel,
    images: &Tensor,
    masks: Option<&Tensor>,
    strategy: &Strategy,
) -> Result<Tensor> {
    let input = backbone_under_strategy(model, images, masks, strategy, false)?;
    model.head_logits(&input)
}

/// Logits for one image. Early masking goes through [`apply_early_mask`].
pub fn masked_forward(
    model: &ClassifierModel,
    image: &Image,
    mask: Option<&BinaryMask>,
    strategy: &Strategy,
) -> Result<Logits> {
    let dtype = model.dtype();
    let logits = match (strategy, mask) {
        (Strategy::Baseline, _) => model.forward(&image.to_tensor(dtype)?.unsqueeze(0)?)?,
        (_, None) => return Err(Error::Config("a mask is required for masked strategies".into())),
        (Strategy::Early { .. }, Some(m)) => {
            let masked = apply_early_mask(image, m)?;
            model.forward(&masked.to_tensor(dtype)?.unsqueeze(0)?)?
        }
        (Strategy::Late { .. }, Some(m)) => masked_forward_batch(
            model,
            &image.to_tensor(dtype)?.unsqueeze(0)?,
            Some(&m.to_tensor(dtype)?.unsqueeze(0)?),
            strategy,
        )?,
    };
    Logits::from_tensor(&logits.squeeze(0)?)
}


/// Supplies one mask per record, aligned with the input order.
pub trait MaskProvider {
    fn masks(&self, records: &[crate::synthset::SampleRecord]) -> Result<Vec<BinaryMask>>;
}

/// Ground-truth masks stored on the records.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleMasks;

impl MaskProvider for OracleMasks {
    fn masks(&self, records: &[crate::synthset::SampleRecord]) -> Result<Vec<BinaryMask>> {
        Ok(records.iter().map(|r| r.mask.clone()).collect())
    }
}

/// Every pixel foreground; masking becomes the identity.
#[derive(Clone, Copy, Debug, Default)]
pub struct AllOnesMasks;

impl MaskProvider for AllOnesMasks {
    fn masks(&self, records: &[crate::synthset::SampleRecord]) -> Result<Vec<BinaryMask>> {
        records.iter().map(|r| BinaryMask::ones(r.image.height(), r.image.width())).collect()
    }
}
