//! Classifier training: frozen-backbone linear probing or full fine-tuning
//! with per-group learning rates, warmup + cosine schedule and label smoothing.

mod loss;
mod schedule;

use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{smoothed_loss, smoothed_loss_batch, smoothed_loss_grad, smoothed_target};
pub use schedule::lr_at;

use crate::backbones::stage_of_param;
use crate::classifier::{is_backbone_param, ClassifierModel};
use crate::error::{Error, Result};
use crate::evalkit::{accuracy_from_predictions, predict_labels};
use crate::maskops::{backbone_under_strategy, MaskProvider, Strategy};
use crate::segmodel::{image_batch, mask_batch};
use crate::synthset::{BinaryMask, Image, SampleRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Frozen,
    FineTune,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Frozen => "frozen",
            Regime::FineTune => "fine_tune",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augment {
    #[serde(default)]
    pub hflip: bool,
    #[serde(default)]
    pub random_crop: bool,
}

impl Augment {
    pub fn any(&self) -> bool {
        self.hflip || self.random_crop
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_classifier: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_backbone: Option<f64>,
    /// Parameters up to the masking stage, for late masking at an interior stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_pre_mask: Option<f64>,
    /// Parameters after the masking stage (head included).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_post_mask: Option<f64>,
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub label_smoothing: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub augment: Augment,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    /// Linear probe on a frozen backbone.
    pub fn frozen(epochs: usize, seed: u64) -> Self {
        Self {
            regime: Regime::Frozen,
            epochs,
            batch_size: 64,
            lr_classifier: 4e-3,
            lr_backbone: None,
            lr_pre_mask: None,
            lr_post_mask: None,
            warmup_epochs: 0,
            label_smoothing: 0.1,
            weight_decay: 5e-2,
            augment: Augment::default(),
            seed,
        }
    }

    /// Full fine-tuning with a slower backbone learning rate.
    pub fn fine_tune(epochs: usize, seed: u64) -> Self {
        Self {
            regime: Regime::FineTune,
            epochs,
            batch_size: 64,
            lr_classifier: 4e-3,
            lr_backbone: Some(4e-4),
            lr_pre_mask: None,
            lr_post_mask: None,
            warmup_epochs: (epochs / 15).min(epochs.saturating_sub(1)),
            label_smoothing: 0.1,
            weight_decay: 5e-2,
            augment: Augment::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: Option<f64>| match v {
            Some(x) if !(x > 0.0 && x.is_finite()) => Err(Error::field(format!("train.{name}"), "must be positive")),
            _ => Ok(()),
        };
        positive("lr_classifier", Some(self.lr_classifier))?;
        positive("lr_backbone", self.lr_backbone)?;
        positive("lr_pre_mask", self.lr_pre_mask)?;
        positive("lr_post_mask", self.lr_post_mask)?;
        if self.batch_size == 0 {
            return Err(Error::field("train.batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::field("train.label_smoothing", "must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::field("train.weight_decay", "must be non-negative"));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::field("train.warmup_epochs", "must be smaller than epochs"));
        }
        match self.regime {
            Regime::Frozen if self.lr_backbone.is_some() || self.lr_pre_mask.is_some() => Err(Error::field(
                "train.lr_backbone",
                "a frozen backbone takes no backbone learning rate",
            )),
            Regime::FineTune if self.lr_backbone.is_none() => {
                Err(Error::field("train.lr_backbone", "fine-tuning needs a backbone learning rate"))
            }
            _ => Ok(()),
        }
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub loss: Vec<f64>,
    pub val_acc: Vec<Option<f64>>,
    /// Head-group learning rate at the last step of each epoch.
    pub lr: Vec<f64>,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.loss.len()
    }

    /// `epoch,loss,val_acc,lr` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,val_acc,lr\n");
        for i in 0..self.loss.len() {
            let acc = self.val_acc[i].map(|a| format!("{a:.4}")).unwrap_or_default();
            s.push_str(&format!("{},{:.6},{},{:e}\n", i + 1, self.loss[i], acc, self.lr[i]));
        }
        s
    }
}

/// A set of variables sharing one base learning rate.
pub struct ParamGroup {
    pub name: &'static str,
    pub base_lr: f64,
    pub vars: Vec<Var>,
}

/// Splits the model's parameters into learning-rate groups.
pub fn param_groups(model: &ClassifierModel, cfg: &TrainConfig, strategy: &Strategy) -> Vec<ParamGroup> {
    let head = |lr| ParamGroup {
        name: "head",
        base_lr: lr,
        vars: model.head_vars(),
    };
    match cfg.regime {
        Regime::Frozen => vec![head(cfg.lr_classifier)],
        Regime::FineTune => {
            let lr_backbone = cfg.lr_backbone.unwrap_or(cfg.lr_classifier);
            let last = model.backbone().last_stage();
            match strategy {
                Strategy::Late { stage, .. } if *stage > 0 && *stage < last => {
                    let cut = *stage;
                    let pre = model.store().vars_where(|n| {
                        is_backbone_param(n) && stage_of_param(n).is_some_and(|s| s <= cut)
                    });
                    let post = model.store().vars_where(|n| {
                        !is_backbone_param(n) || stage_of_param(n).is_none_or(|s| s > cut)
                    });
                    vec![
                        ParamGroup {
                            name: "pre_mask",
                            base_lr: cfg.lr_pre_mask.unwrap_or(lr_backbone),
                            vars: pre,
                        },
                        ParamGroup {
                            name: "head",
                            base_lr: cfg.lr_post_mask.unwrap_or(cfg.lr_classifier),
                            vars: post,
                        },
                    ]
                }
                _ => vec![
                    ParamGroup {
                        name: "backbone",
                        base_lr: lr_backbone,
                        vars: model.backbone_vars(),
                    },
                    head(cfg.lr_classifier),
                ],
            }
        }
    }
}

/// Replicate-padded translation by `(dy, dx)` applied to image and mask alike.
fn translate(image: &Image, mask: &BinaryMask, dy: isize, dx: isize) -> Result<(Image, BinaryMask)> {
    let (h, w) = image.dims();
    let src = |y: usize, x: usize| {
        let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
        let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
        (sy, sx)
    };
    let img = Image::from_fn(h, w, |y, x| {
        let (sy, sx) = src(y, x);
        image.pixel(sy, sx)
    })?;
    let m = BinaryMask::from_fn(h, w, |y, x| {
        let (sy, sx) = src(y, x);
        mask.get(sy, sx)
    })?;
    Ok((img, m))
}

const CROP_PAD: i32 = 4;

/// Applies flip / crop augmentation jointly to an image and its mask.
pub fn augment_pair<R: Rng>(image: &Image, mask: &BinaryMask, aug: Augment, rng: &mut R) -> Result<(Image, BinaryMask)> {
    let (mut img, mut m) = (image.clone(), mask.clone());
    if aug.hflip && rng.random_bool(0.5) {
        img = img.hflip();
        m = m.hflip();
    }
    if aug.random_crop {
        let dy = rng.random_range(-CROP_PAD..=CROP_PAD) as isize;
        let dx = rng.random_range(-CROP_PAD..=CROP_PAD) as isize;
        (img, m) = translate(&img, &m, dy, dx)?;
    }
    Ok((img, m))
}

/// Head inputs for every record, computed in chunks with the backbone detached.
pub(crate) fn representations(
    model: &ClassifierModel,
    records: &[SampleRecord],
    masks: Option<&[BinaryMask]>,
    strategy: &Strategy,
) -> Result<Tensor> {
    let dtype = model.dtype();
    let mut parts = Vec::new();
    for (ci, chunk) in records.chunks(64).enumerate() {
        let imgs: Vec<&Image> = chunk.iter().map(|r| &r.image).collect();
        let x = image_batch(&imgs, dtype)?;
        let m = match masks {
            Some(ms) => {
                let part: Vec<&BinaryMask> = ms[ci * 64..ci * 64 + chunk.len()].iter().collect();
                Some(mask_batch(&part, dtype)?)
            }
            None => None,
        };
        let input = backbone_under_strategy(model, &x, m.as_ref(), strategy, true)?;
        parts.push(model.head_representation(&input)?.detach());
    }
    // cat of a single part returns it as is, possibly a strided view
    Ok(Tensor::cat(&parts, 0)?.contiguous()?)
}

/// Trains `model` on `train`, reporting accuracy on `val` after each epoch.
pub fn train_classifier(
    model: ClassifierModel,
    train: &[SampleRecord],
    val: &[SampleRecord],
    cfg: &TrainConfig,
    strategy: &Strategy,
    masks: &dyn MaskProvider,
) -> Result<(ClassifierModel, TrainHistory)> {
    cfg.validate()?;
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok((model, history));
    }
    if train.is_empty() {
        return Err(Error::Empty("no training records".into()));
    }
    let c = model.num_classes();
    if let Some(r) = train.iter().chain(val).find(|r| r.label >= c) {
        return Err(Error::Config(format!("record `{}` has label {} >= {c}", r.id, r.label)));
    }
    if let Strategy::Late { stage, .. } = strategy {
        if *stage > model.backbone().last_stage() {
            return Err(Error::Stage(format!("stage {stage}")));
        }
    }
    let (train_masks, val_masks) = if strategy.needs_mask() {
        (Some(masks.masks(train)?), Some(masks.masks(val)?))
    } else {
        (None, None)
    };
    if let Some(ms) = &train_masks {
        if ms.len() != train.len() {
            return Err(Error::Shape("mask provider returned the wrong number of masks".into()));
        }
    }

    let groups = param_groups(&model, cfg, strategy);
    let mut opts = groups
        .iter()
        .map(|g| {
            AdamW::new(
                g.vars.clone(),
                ParamsAdamW {
                    lr: g.base_lr,
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                    weight_decay: cfg.weight_decay,
                },
            )
        })
        .collect::<candle_core::Result<Vec<_>>>()?;

    let n = train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = steps_per_epoch * cfg.warmup_epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let dtype = model.dtype();
    let frozen = cfg.regime == Regime::Frozen;

    // With a frozen backbone and no augmentation, the head input of each
    // record never changes; compute it once.
    let cached = if frozen && !cfg.augment.any() {
        Some(representations(&model, train, train_masks.as_deref(), strategy)?)
    } else {
        None
    };
    let cached_val = match (&cached, val.is_empty()) {
        (Some(_), false) => Some(representations(&model, val, val_masks.as_deref(), strategy)?),
        _ => None,
    };

    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut head_lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            for (g, opt) in groups.iter().zip(opts.iter_mut()) {
                let lr = lr_at(step, total_steps, warmup_steps, g.base_lr);
                opt.set_learning_rate(lr);
                if g.name == "head" {
                    head_lr = lr;
                }
            }
            let targets: Vec<usize> = chunk.iter().map(|i| train[*i].label).collect();
            let logits = match &cached {
                Some(reps) => {
                    let idx = Tensor::from_vec(
                        chunk.iter().map(|i| *i as u32).collect::<Vec<_>>(),
                        chunk.len(),
                        reps.device(),
                    )?;
                    model.head().forward_representation(&reps.index_select(&idx, 0)?)?
                }
                None => {
                    let mut imgs = Vec::with_capacity(chunk.len());
                    let mut ms = Vec::with_capacity(chunk.len());
                    for i in chunk {
                        let r = &train[*i];
                        let m = train_masks.as_ref().map(|v| &v[*i]).unwrap_or(&r.mask);
                        let (img, m) = if cfg.augment.any() {
                            augment_pair(&r.image, m, cfg.augment, &mut rng)?
                        } else {
                            (r.image.clone(), m.clone())
                        };
                        imgs.push(img);
                        ms.push(m);
                    }
                    let x = image_batch(&imgs.iter().collect::<Vec<_>>(), dtype)?;
                    let m = if strategy.needs_mask() {
                        Some(mask_batch(&ms.iter().collect::<Vec<_>>(), dtype)?)
                    } else {
                        None
                    };
                    let input = backbone_under_strategy(&model, &x, m.as_ref(), strategy, frozen)?;
                    model.head_logits(&input)?
                }
            };
            let loss = smoothed_loss_batch(&logits, &targets, cfg.label_smoothing)?;
            let grads = loss.backward()?;
            for opt in opts.iter_mut() {
                opt.step(&grads)?;
            }
            epoch_loss += loss.to_dtype(DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
            step += 1;
        }
        history.loss.push(epoch_loss / n as f64);
        history.lr.push(head_lr);
        let acc = if val.is_empty() {
            None
        } else if let Some(reps) = &cached_val {
            let logits = model.head().forward_representation(reps)?;
            let preds = crate::nn::argmax_rows(&logits)?;
            Some(accuracy_from_predictions(&preds, val)?)
        } else {
            let preds = predict_labels(&model, val, val_masks.as_deref(), strategy)?;
            Some(accuracy_from_predictions(&preds, val)?)
        };
        history.val_acc.push(acc);
    }
    Ok((model, history))
}

/// Settings for producing a stand-in "pretrained" backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default = "default_pretrain_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_pretrain_batch() -> usize {
    32
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            learning_rate: 2e-3,
            batch_size: default_pretrain_batch(),
            weight_decay: 1e-2,
        }
    }
}

/// Trains a baseline model end to end on unbiased data; its backbone then
/// serves as the frozen starting point.
pub fn pretrain(
    model: ClassifierModel,
    records: &[SampleRecord],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(ClassifierModel, TrainHistory)> {
    let tc = TrainConfig {
        regime: Regime::FineTune,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr_classifier: cfg.learning_rate,
        lr_backbone: Some(cfg.learning_rate),
        lr_pre_mask: None,
        lr_post_mask: None,
        warmup_epochs: usize::from(cfg.epochs > 1),
        label_smoothing: 0.0,
        weight_decay: cfg.weight_decay,
        augment: Augment::default(),
        seed,
    };
    train_classifier(model, records, &[], &tc, &Strategy::Baseline, &crate::maskops::OracleMasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::frozen(5, 0);
        c.validate().unwrap();
        c.lr_backbone = Some(1e-3);
        assert!(matches!(c.validate(), Err(Error::Field { .. })));
        let mut c = TrainConfig::fine_tune(5, 0);
        c.warmup_epochs = 5;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::frozen(5, 0);
        c.label_smoothing = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::frozen(5, 0);
        c.lr_classifier = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn augmentation_moves_mask_with_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Image::from_fn(8, 8, |y, x| [x as f32 / 8.0, y as f32 / 8.0, 0.0]).unwrap();
        let mask = BinaryMask::from_fn(8, 8, |y, x| x > 4 && y < 3).unwrap();
        let aug = Augment {
            hflip: true,
            random_crop: true,
        };
        for _ in 0..20 {
            let (i2, m2) = augment_pair(&img, &mask, aug, &mut rng).unwrap();
            // foreground pixels map to pixels that were foreground before
            for y in 0..8 {
                for x in 0..8 {
                    let p = i2.pixel(y, x);
                    let (sx, sy) = ((p[0] * 8.0).round() as usize, (p[1] * 8.0).round() as usize);
                    assert_eq!(m2.get(y, x), mask.get(sy, sx));
                }
            }
        }
    }

    #[test]
    fn history_csv_layout() {
        let h = TrainHistory {
            loss: vec![1.0],
            val_acc: vec![Some(50.0)],
            lr: vec![1e-3],
        };
        assert_eq!(h.to_csv(), "epoch,loss,val_acc,lr\n1,1.000000,50.0000,1e-3\n");
    }
}
