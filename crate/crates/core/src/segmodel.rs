//! Binary foreground/background segmenter: a small U-Net trained with
//! per-pixel binary cross-entropy, plus Dice evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskops::MaskProvider;
use crate::nn::{read_checkpoint, write_checkpoint, Conv2d, ParamStore};
use crate::synthset::{BinaryMask, Image, SampleRecord, Split};

const CKPT_KIND: &str = "segmenter";

fn default_width() -> usize {
    8
}
fn default_threshold() -> f32 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterConfig {
    /// Channel width of the first level; doubles at each downsampling.
    #[serde(default = "default_width")]
    pub base_width: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Binarization threshold used when the model supplies masks.
    #[serde(default = "default_threshold")]
    pub threshold: f32,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            base_width: default_width(),
            epochs: 8,
            learning_rate: 3e-3,
            batch_size: 16,
            seed: 0,
            threshold: default_threshold(),
        }
    }
}

#[derive(Clone, Debug)]
struct DoubleConv {
    a: Conv2d,
    b: Conv2d,
}

impl DoubleConv {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            a: Conv2d::new(store, &format!("{name}.a"), cin, cout, 3, 1, 1, rng)?,
            b: Conv2d::new(store, &format!("{name}.b"), cout, cout, 3, 1, 1, rng)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.b.forward(&self.a.forward(x)?.relu()?)?.relu()?)
    }
}

/// Encoder-decoder with three downsampling levels and skip connections.
#[derive(Clone, Debug)]
pub struct SegmenterModel {
    config: SegmenterConfig,
    store: ParamStore,
    enc: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    dec: Vec<DoubleConv>,
    out: Conv2d,
}

const LEVELS: usize = 3;

impl SegmenterModel {
    pub fn new(config: SegmenterConfig) -> Result<Self> {
        if config.base_width == 0 {
            return Err(Error::field("segmenter.base_width", "must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new(DType::F32);
        let w = config.base_width;
        let widths: Vec<usize> = (0..LEVELS).map(|l| w << l).collect();
        let mut enc = Vec::with_capacity(LEVELS);
        let mut cin = 3;
        for (l, &cw) in widths.iter().enumerate() {
            enc.push(DoubleConv::new(&mut store, &format!("enc{l}"), cin, cw, &mut rng)?);
            cin = cw;
        }
        let bottleneck = DoubleConv::new(&mut store, "mid", cin, w << LEVELS, &mut rng)?;
        let mut dec = Vec::with_capacity(LEVELS);
        let mut below = w << LEVELS;
        for l in (0..LEVELS).rev() {
            dec.push(DoubleConv::new(&mut store, &format!("dec{l}"), below + widths[l], widths[l], &mut rng)?);
            below = widths[l];
        }
        let out = Conv2d::new(&mut store, "out", w, 1, 1, 1, 0, &mut rng)?;
        Ok(Self {
            config,
            store,
            enc,
            bottleneck,
            dec,
            out,
        })
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Foreground logits `B x 1 x H x W`; H and W must be divisible by 8.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = images.dims4()?;
        let k = 1 << LEVELS;
        if h % k != 0 || w % k != 0 {
            return Err(Error::Shape(format!("segmenter needs dims divisible by {k}, got {h}x{w}")));
        }
        let mut skips = Vec::with_capacity(LEVELS);
        let mut x = images.clone();
        for e in &self.enc {
            x = e.forward(&x)?;
            skips.push(x.clone());
            x = x.max_pool2d(2)?;
        }
        x = self.bottleneck.forward(&x)?;
        for d in &self.dec {
            let skip = skips.pop().expect("one skip per level");
            let (_, _, sh, sw) = skip.dims4()?;
            x = d.forward(&Tensor::cat(&[&x.upsample_nearest2d(sh, sw)?, &skip], 1)?)?;
        }
        self.out.forward(&x)
    }

    /// Per-pixel foreground probability in `[0, 1]`.
    pub fn probabilities(&self, images: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.logits(images)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, CKPT_KIND, &self.config, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = read_checkpoint(path)?;
        if ck.kind != CKPT_KIND {
            return Err(Error::Checkpoint(format!("expected a {CKPT_KIND} checkpoint, found `{}`", ck.kind)));
        }
        let model = Self::new(serde_json::from_value(ck.config)?)?;
        model.store.load(&ck.tensors)?;
        Ok(model)
    }
}

/// Stacks images to `B x 3 x H x W`.
pub fn image_batch(images: &[&Image], dtype: DType) -> Result<Tensor> {
    let ts = images.iter().map(|i| i.to_tensor(dtype)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

/// Stacks masks to `B x 1 x H x W`.
pub fn mask_batch(masks: &[&BinaryMask], dtype: DType) -> Result<Tensor> {
    let ts = masks.iter().map(|m| m.to_tensor(dtype)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

/// Numerically stable mean binary cross-entropy on logits.
fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let pos = logits.relu()?;
    let log_term = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((pos - (logits * targets)?)? + log_term)?.mean_all()?)
}

/// Trains on the records' ground-truth masks. Returns the model and the mean
/// training loss of each epoch.
pub fn train_segmenter(records: &[SampleRecord], config: &SegmenterConfig) -> Result<(SegmenterModel, Vec<f64>)> {
    if records.is_empty() {
        return Err(Error::Empty("no segmenter training records".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::field("segmenter.batch_size", "must be positive"));
    }
    if config.learning_rate.is_nan() || config.learning_rate <= 0.0 {
        return Err(Error::field("segmenter.learning_rate", "must be positive"));
    }
    let model = SegmenterModel::new(config.clone())?;
    let mut opt = AdamW::new(
        model.store.vars(),
        ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5e6);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let imgs: Vec<&Image> = chunk.iter().map(|i| &records[*i].image).collect();
            let masks: Vec<&BinaryMask> = chunk.iter().map(|i| &records[*i].mask).collect();
            let x = image_batch(&imgs, DType::F32)?;
            let y = mask_batch(&masks, DType::F32)?;
            let loss = bce_with_logits(&model.logits(&x)?, &y)?;
            opt.backward_step(&loss)?;
            total += loss.to_scalar::<f32>()? as f64 * chunk.len() as f64;
        }
        history.push(total / records.len() as f64);
    }
    Ok((model, history))
}

fn check_threshold(threshold: f32) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::field("threshold", format!("{threshold} is not in (0, 1)")));
    }
    Ok(())
}

/// Thresholded prediction for one image.
pub fn predict_mask(model: &SegmenterModel, image: &Image, threshold: f32) -> Result<BinaryMask> {
    check_threshold(threshold)?;
    let probs = model.probabilities(&image.to_tensor(DType::F32)?.unsqueeze(0)?)?;
    let vals = probs.flatten_all()?.to_vec1::<f32>()?;
    BinaryMask::from_probabilities(image.height(), image.width(), &vals, threshold)
}

/// Thresholded predictions for many images, batched.
pub fn predict_masks(model: &SegmenterModel, images: &[&Image], threshold: f32) -> Result<Vec<BinaryMask>> {
    check_threshold(threshold)?;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let probs = model.probabilities(&image_batch(chunk, DType::F32)?)?;
        for (i, img) in chunk.iter().enumerate() {
            let vals = probs.get(i)?.flatten_all()?.to_vec1::<f32>()?;
            out.push(BinaryMask::from_probabilities(img.height(), img.width(), &vals, threshold)?);
        }
    }
    Ok(out)
}

impl MaskProvider for SegmenterModel {
    fn masks(&self, records: &[SampleRecord]) -> Result<Vec<BinaryMask>> {
        let imgs: Vec<&Image> = records.iter().map(|r| &r.image).collect();
        predict_masks(self, &imgs, self.config.threshold)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskClass {
    Foreground,
    Background,
}

/// `2|X ∩ Y| / (|X| + |Y|)` for the pixels of `class`; 1.0 when both sets are empty.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask, class: MaskClass) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("dice on {:?} vs {:?}", pred.dims(), gt.dims())));
    }
    let want = u8::from(class == MaskClass::Foreground);
    let (mut inter, mut px, mut py) = (0usize, 0usize, 0usize);
    for (a, b) in pred.data().iter().zip(gt.data()) {
        let (ia, ib) = (*a == want, *b == want);
        px += ia as usize;
        py += ib as usize;
        inter += (ia && ib) as usize;
    }
    if px + py == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (px + py) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceScores {
    pub dice_fg: f64,
    pub dice_bg: f64,
    pub count: usize,
}

/// Mean Dice per split and over all records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub per_split: BTreeMap<Split, DiceScores>,
    pub overall: DiceScores,
}

/// Dice of given predictions against the records' ground truth.
pub fn evaluate_masks(preds: &[BinaryMask], records: &[SampleRecord]) -> Result<DiceReport> {
    if records.is_empty() {
        return Err(Error::Empty("no records to evaluate".into()));
    }
    if preds.len() != records.len() {
        return Err(Error::Shape(format!("{} predictions for {} records", preds.len(), records.len())));
    }
    let mut acc: BTreeMap<Split, (f64, f64, usize)> = BTreeMap::new();
    let mut all = (0.0, 0.0, 0usize);
    for (p, r) in preds.iter().zip(records) {
        let fg = dice(p, &r.mask, MaskClass::Foreground)?;
        let bg = dice(p, &r.mask, MaskClass::Background)?;
        let e = acc.entry(r.split).or_default();
        *e = (e.0 + fg, e.1 + bg, e.2 + 1);
        all = (all.0 + fg, all.1 + bg, all.2 + 1);
    }
    let mean = |(f, b, n): (f64, f64, usize)| DiceScores {
        dice_fg: f / n as f64,
        dice_bg: b / n as f64,
        count: n,
    };
    Ok(DiceReport {
        per_split: acc.into_iter().map(|(k, v)| (k, mean(v))).collect(),
        overall: mean(all),
    })
}

pub fn evaluate_segmenter(model: &SegmenterModel, records: &[SampleRecord]) -> Result<DiceReport> {
    if records.is_empty() {
        return Err(Error::Empty("no records to evaluate".into()));
    }
    evaluate_masks(&model.masks(records)?, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthset::{generate_dataset, split_records, tiny_spec};

    fn small_cfg(epochs: usize) -> SegmenterConfig {
        SegmenterConfig {
            base_width: 4,
            epochs,
            learning_rate: 1e-2,
            batch_size: 4,
            seed: 3,
            threshold: 0.5,
        }
    }

    #[test]
    fn dice_examples() {
        let a = BinaryMask::from_fn(4, 4, |y, _| y == 0).unwrap();
        assert_eq!(dice(&a, &a, MaskClass::Foreground).unwrap(), 1.0);
        let b = BinaryMask::from_fn(4, 4, |y, _| y == 3).unwrap();
        assert_eq!(dice(&a, &b, MaskClass::Foreground).unwrap(), 0.0);
        let c = BinaryMask::from_fn(4, 4, |y, x| (y == 0 && x < 2) || (y == 1 && x < 2)).unwrap();
        // |X| = 4, |Y| = 4, overlap 2
        assert_eq!(dice(&a, &c, MaskClass::Foreground).unwrap(), 0.5);
        let z = BinaryMask::zeros(4, 4).unwrap();
        assert_eq!(dice(&z, &z, MaskClass::Foreground).unwrap(), 1.0);
        assert!(dice(&a, &BinaryMask::ones(2, 2).unwrap(), MaskClass::Foreground).is_err());
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let recs = generate_dataset(&tiny_spec(1)).unwrap();
        let train = split_records(&recs, Split::Train);
        let (m, hist) = train_segmenter(&train, &small_cfg(0)).unwrap();
        assert!(hist.is_empty());
        let init = SegmenterModel::new(small_cfg(0)).unwrap();
        assert_eq!(m.store().checksum().unwrap(), init.store().checksum().unwrap());
        assert!(train_segmenter(&[], &small_cfg(1)).is_err());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let recs = generate_dataset(&tiny_spec(2)).unwrap();
        let train = split_records(&recs, Split::Train);
        let (a, ha) = train_segmenter(&train, &small_cfg(3)).unwrap();
        let (b, hb) = train_segmenter(&train, &small_cfg(3)).unwrap();
        assert_eq!(a.store().checksum().unwrap(), b.store().checksum().unwrap());
        assert_eq!(ha, hb);
        assert!(ha.last().unwrap() <= ha.first().unwrap());
    }

    #[test]
    fn predictions_are_binary_and_sized() {
        let recs = generate_dataset(&tiny_spec(4)).unwrap();
        let m = SegmenterModel::new(small_cfg(0)).unwrap();
        let p = predict_mask(&m, &recs[0].image, 0.5).unwrap();
        assert_eq!(p.dims(), recs[0].image.dims());
        assert!(p.data().iter().all(|v| *v <= 1));
        let all_zero = predict_mask(&m, &recs[0].image, 0.999_999).unwrap();
        let probs = m.probabilities(&recs[0].image.to_tensor(DType::F32).unwrap().unsqueeze(0).unwrap()).unwrap();
        let max = probs.flatten_all().unwrap().max(0).unwrap().to_scalar::<f32>().unwrap();
        if max < 0.999_999 {
            assert_eq!(all_zero.count_foreground(), 0);
        }
        assert!(predict_mask(&m, &recs[0].image, 1.0).is_err());
        assert!(predict_mask(&m, &recs[0].image, 0.0).is_err());
    }

    #[test]
    fn threshold_rule() {
        let m = BinaryMask::from_probabilities(1, 2, &[0.4, 0.6], 0.5).unwrap();
        assert_eq!(m.data(), &[0, 1]);
        let m = BinaryMask::from_probabilities(2, 2, &[0.9; 4], 0.5).unwrap();
        assert_eq!(m.count_foreground(), 4);
    }

    #[test]
    fn evaluate_ground_truth_and_constant_predictors() {
        let recs = generate_dataset(&tiny_spec(5)).unwrap();
        let gt: Vec<BinaryMask> = recs.iter().map(|r| r.mask.clone()).collect();
        let rep = evaluate_masks(&gt, &recs).unwrap();
        assert_eq!(rep.overall.dice_fg, 1.0);
        assert_eq!(rep.overall.dice_bg, 1.0);
        let zeros: Vec<BinaryMask> = recs.iter().map(|r| BinaryMask::zeros(r.mask.height(), r.mask.width()).unwrap()).collect();
        let rep = evaluate_masks(&zeros, &recs).unwrap();
        assert_eq!(rep.overall.dice_fg, 0.0);
        assert_eq!(rep.per_split.len(), 5);
        assert!(evaluate_masks(&[], &[]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = SegmenterModel::new(small_cfg(0)).unwrap();
        let p = dir.path().join("seg.ckpt");
        m.save(&p).unwrap();
        let back = SegmenterModel::load(&p).unwrap();
        assert_eq!(back.store().checksum().unwrap(), m.store().checksum().unwrap());
        assert_eq!(back.config(), m.config());
    }
}
