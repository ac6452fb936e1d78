//! Synthetic biased fine-grained dataset: shape classes on textured
//! backgrounds whose family correlates with the class at a controlled rate.

mod io;
pub mod render;
mod types;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use io::{export_dataset, load_directory};
pub use render::{ShapeVariant, MAX_BG_FAMILIES, MAX_SHAPE_VARIANTS};
pub use types::{records_in, split_records, BinaryMask, Image, SampleRecord, Split};

use crate::error::{Error, Result};

/// Per-split sample counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub pretrain: usize,
    pub train: usize,
    pub val: usize,
    pub id_test: usize,
    pub ood_test: usize,
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Pretrain => self.pretrain,
            Split::Train => self.train,
            Split::Val => self.val,
            Split::IdTest => self.id_test,
            Split::OodTest => self.ood_test,
        }
    }
}

fn default_area_band() -> (f64, f64) {
    (0.1, 0.6)
}

/// Parameters of a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub num_bg_families: usize,
    /// Probability that a biased-split sample sits on its class's designated family.
    pub bias_strength: f64,
    /// `(height, width)`.
    pub image_size: (usize, usize),
    pub splits: SplitSizes,
    pub seed: u64,
    /// Accepted range of foreground area fraction per sample.
    #[serde(default = "default_area_band")]
    pub fg_area_band: (f64, f64),
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::field("dataset.num_classes", "need at least 2 classes"));
        }
        if self.num_classes > MAX_SHAPE_VARIANTS {
            return Err(Error::field(
                "dataset.num_classes",
                format!("only {MAX_SHAPE_VARIANTS} shape variants are realizable"),
            ));
        }
        if self.num_bg_families < 2 {
            return Err(Error::field("dataset.num_bg_families", "need at least 2 background families"));
        }
        if self.num_bg_families > MAX_BG_FAMILIES {
            return Err(Error::field(
                "dataset.num_bg_families",
                format!("only {MAX_BG_FAMILIES} background families are available"),
            ));
        }
        if !(0.0..=1.0).contains(&self.bias_strength) {
            return Err(Error::field("dataset.bias_strength", "must lie in [0, 1]"));
        }
        let (h, w) = self.image_size;
        if h < 8 || w < 8 {
            return Err(Error::field("dataset.image_size", "both dims must be at least 8"));
        }
        if let Some(split) = Split::ALL.into_iter().find(|s| self.splits.get(*s) == 0) {
            return Err(Error::field(format!("dataset.splits.{split}"), "split sizes must be positive"));
        }
        let (lo, hi) = self.fg_area_band;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::field("dataset.fg_area_band", "need 0 < lo < hi < 1"));
        }
        Ok(())
    }

    /// Band the shape scale is drawn from, inset from the accepted band.
    fn draw_band(&self) -> (f64, f64) {
        let (lo, hi) = self.fg_area_band;
        let inset = (hi - lo) * 0.1;
        (lo + inset, hi - inset)
    }
}

/// The background family class `class` co-occurs with in biased splits.
pub fn designated_family(class: usize, num_bg_families: usize) -> usize {
    class % num_bg_families
}

/// Elementwise select: foreground where `mask` is 1, background elsewhere.
pub fn composite(foreground: &Image, mask: &BinaryMask, background: &Image) -> Result<Image> {
    if foreground.dims() != mask.dims() || background.dims() != mask.dims() {
        return Err(Error::Shape(format!(
            "composite inputs disagree: foreground {:?}, mask {:?}, background {:?}",
            foreground.dims(),
            mask.dims(),
            background.dims()
        )));
    }
    let plane = mask.height() * mask.width();
    let m = mask.data();
    let data = foreground
        .data()
        .iter()
        .zip(background.data())
        .enumerate()
        .map(|(i, (f, b))| if m[i % plane] == 1 { *f } else { *b })
        .collect();
    Image::new(mask.height(), mask.width(), data)
}

/// The three layers a generated sample is composited from.
#[derive(Clone, Debug)]
pub struct SampleLayers {
    pub label: usize,
    pub bg_family: usize,
    pub shape: Image,
    pub mask: BinaryMask,
    pub texture: Image,
}

fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.code() << 40) | index as u64);
    rng
}

fn draw_family<R: Rng>(spec: &DatasetSpec, split: Split, label: usize, rng: &mut R) -> usize {
    let b = spec.num_bg_families;
    let beta = designated_family(label, b);
    let other = |rng: &mut R| {
        let j = rng.random_range(0..b - 1);
        if j >= beta {
            j + 1
        } else {
            j
        }
    };
    match split {
        Split::Pretrain => rng.random_range(0..b),
        Split::OodTest => other(rng),
        Split::Train | Split::Val | Split::IdTest => {
            if rng.random::<f64>() < spec.bias_strength {
                beta
            } else {
                other(rng)
            }
        }
    }
}

/// Regenerates the layers of sample `index` of `split`; pure in `(spec, split, index)`.
pub fn render_sample_layers(spec: &DatasetSpec, split: Split, index: usize) -> Result<SampleLayers> {
    let mut rng = sample_rng(spec.seed, split, index);
    let label = index % spec.num_classes;
    let bg_family = draw_family(spec, split, label, &mut rng);
    let (h, w) = spec.image_size;
    let variant = ShapeVariant::for_class(label)?;
    let mask = render::render_shape_mask(variant, h, w, spec.draw_band(), spec.fg_area_band, &mut rng)?;
    let shape = render::render_shape_layer(h, w, &mut rng)?;
    let texture = render::render_background(bg_family, h, w, &mut rng)?;
    Ok(SampleLayers {
        label,
        bg_family,
        shape,
        mask,
        texture,
    })
}

/// Generates every split of `spec`, ordered by split then sample index.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<SampleRecord>> {
    spec.validate()?;
    let jobs: Vec<(Split, usize)> = Split::ALL
        .into_iter()
        .flat_map(|s| (0..spec.splits.get(s)).map(move |i| (s, i)))
        .collect();
    jobs.into_par_iter()
        .map(|(split, index)| {
            let layers = render_sample_layers(spec, split, index)?;
            let image = composite(&layers.shape, &layers.mask, &layers.texture)?;
            SampleRecord::new(
                format!("{split}_{index:05}"),
                image,
                layers.mask,
                layers.label,
                layers.bg_family,
                split,
            )
        })
        .collect()
}

/// Empirical rate of `bg_family == designated_family(label)` within one split.
pub fn measure_split_bias(records: &[SampleRecord], split: Split, num_bg_families: usize) -> Result<f64> {
    let rs = records_in(records, split);
    if rs.is_empty() {
        return Err(Error::Empty(format!("split `{split}` has no records")));
    }
    let hits = rs
        .iter()
        .filter(|r| r.bg_family == designated_family(r.label, num_bg_families))
        .count();
    Ok(hits as f64 / rs.len() as f64)
}

/// Bias rate for every split present in `records`.
pub fn measure_bias(records: &[SampleRecord], num_bg_families: usize) -> Result<BTreeMap<Split, f64>> {
    if records.is_empty() {
        return Err(Error::Empty("no records to measure".into()));
    }
    let mut out = BTreeMap::new();
    for split in Split::ALL {
        if records.iter().any(|r| r.split == split) {
            out.insert(split, measure_split_bias(records, split, num_bg_families)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) fn tiny_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        num_classes: 4,
        num_bg_families: 4,
        bias_strength: 0.9,
        image_size: (16, 16),
        splits: SplitSizes {
            pretrain: 8,
            train: 12,
            val: 4,
            id_test: 4,
            ood_test: 4,
        },
        seed,
        fg_area_band: default_area_band(),
    }
}
