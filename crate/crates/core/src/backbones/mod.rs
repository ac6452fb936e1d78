//! Toy feature extractors with tap points at every stage.
//!
//! Stage 0 is the input image. A CNN has stages `1..=S`, each downsampling
//! by `stage_factor` (the first also applies the stem). A ViT has blocks
//! `1..=T`; block 1 includes patch embedding.

mod cnn;
mod vit;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cnn::ToyCnn;
pub use vit::ToyVit;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::synthset::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Cnn,
    Vit,
}

fn default_patch() -> usize {
    8
}
fn default_stem() -> usize {
    4
}
fn default_stage_factor() -> usize {
    2
}
fn default_heads() -> usize {
    4
}
fn default_blocks() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Output feature width `D`.
    pub width: usize,
    /// Stage count `S` (cnn) or block count `T` (vit).
    pub depth: usize,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    #[serde(default = "default_stem")]
    pub stem_factor: usize,
    #[serde(default = "default_stage_factor")]
    pub stage_factor: usize,
    #[serde(default = "default_blocks")]
    pub blocks_per_stage: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// `(height, width)` of the input images.
    pub image_size: (usize, usize),
    #[serde(default)]
    pub seed: u64,
}

impl BackboneConfig {
    /// Staged CNN: stem x4, three x2 stages, final width 64.
    pub fn toy_cnn(image_size: (usize, usize), seed: u64) -> Self {
        Self {
            kind: BackboneKind::Cnn,
            width: 64,
            depth: 3,
            patch_size: default_patch(),
            stem_factor: 4,
            stage_factor: 2,
            blocks_per_stage: 2,
            heads: default_heads(),
            image_size,
            seed,
        }
    }

    /// ViT with 8x8 patches, width 64, six blocks, four heads.
    pub fn toy_vit(image_size: (usize, usize), seed: u64) -> Self {
        Self {
            kind: BackboneKind::Vit,
            width: 64,
            depth: 6,
            patch_size: 8,
            stem_factor: default_stem(),
            stage_factor: default_stage_factor(),
            blocks_per_stage: default_blocks(),
            heads: 4,
            image_size,
            seed,
        }
    }

    /// Cumulative downsampling ratio at `stage` (1 at stage 0).
    pub fn downsampling(&self, stage: usize) -> usize {
        if stage == 0 {
            return 1;
        }
        match self.kind {
            BackboneKind::Cnn => self.stem_factor * self.stage_factor.pow(stage as u32),
            BackboneKind::Vit => self.patch_size,
        }
    }

    pub fn last_stage(&self) -> usize {
        self.depth
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::field("backbone.depth", "must be at least 1"));
        }
        let (h, w) = self.image_size;
        let k = self.downsampling(self.depth);
        if h % k != 0 || w % k != 0 || h < k || w < k {
            return Err(Error::field(
                "backbone.image_size",
                format!("{h}x{w} is not divisible by the cumulative downsampling {k}"),
            ));
        }
        match self.kind {
            BackboneKind::Cnn => {
                if self.stem_factor == 0 || self.stage_factor == 0 || self.blocks_per_stage == 0 {
                    return Err(Error::field("backbone", "cnn factors and block count must be positive"));
                }
                if !self.width.is_multiple_of(1 << self.depth) {
                    return Err(Error::field(
                        "backbone.width",
                        format!("must be divisible by 2^depth = {}", 1 << self.depth),
                    ));
                }
            }
            BackboneKind::Vit => {
                if self.patch_size == 0 {
                    return Err(Error::field("backbone.patch_size", "must be positive"));
                }
                if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
                    return Err(Error::field("backbone.heads", "must divide the width"));
                }
            }
        }
        Ok(())
    }

    /// Stable name of a stage.
    pub fn stage_name(&self, stage: usize) -> String {
        match (self.kind, stage) {
            (_, 0) => "stage0".to_string(),
            (BackboneKind::Cnn, s) => format!("stage{s}"),
            (BackboneKind::Vit, s) => format!("block{s}"),
        }
    }

    /// Resolves a stage name; also accepts `L`, `L-1`, ... and bare indices.
    pub fn parse_stage(&self, name: &str) -> Result<usize> {
        let last = self.last_stage();
        let idx = if name == "L" {
            Some(last)
        } else if let Some(k) = name.strip_prefix("L-").and_then(|k| k.parse::<usize>().ok()) {
            last.checked_sub(k)
        } else if let Ok(i) = name.parse::<usize>() {
            Some(i)
        } else {
            (0..=last).find(|s| self.stage_name(*s) == name)
        };
        match idx {
            Some(i) if i <= last => Ok(i),
            _ => Err(Error::Stage(name.to_string())),
        }
    }

    /// Spatial grid `(M', N')` of the representation after `stage`.
    pub fn grid(&self, stage: usize) -> (usize, usize) {
        let k = self.downsampling(stage);
        (self.image_size.0 / k, self.image_size.1 / k)
    }
}

/// Batched representation at a tap point.
#[derive(Clone, Debug)]
pub enum Features {
    /// `B x D x M' x N'` spatial map (the image itself at stage 0).
    Map(Tensor),
    /// `B x (1 + P) x D`; index 0 is CLS, then patches in row-major grid order.
    Tokens { tokens: Tensor, grid: (usize, usize) },
}

impl Features {
    pub fn tensor(&self) -> &Tensor {
        match self {
            Features::Map(t) => t,
            Features::Tokens { tokens, .. } => tokens,
        }
    }

    pub fn spatial_grid(&self) -> Result<(usize, usize)> {
        match self {
            Features::Map(t) => {
                let (_, _, h, w) = t.dims4()?;
                Ok((h, w))
            }
            Features::Tokens { grid, .. } => Ok(*grid),
        }
    }

    pub fn detach(&self) -> Self {
        match self {
            Features::Map(t) => Features::Map(t.detach()),
            Features::Tokens { tokens, grid } => Features::Tokens {
                tokens: tokens.detach(),
                grid: *grid,
            },
        }
    }
}

/// Patch tokens `B x P x D` rearranged to a `B x D x M' x N'` grid.
pub fn tokens_to_grid(patches: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    let (b, p, d) = patches.dims3()?;
    if p != grid.0 * grid.1 {
        return Err(Error::Shape(format!("{p} patch tokens do not fill a {grid:?} grid")));
    }
    Ok(patches.transpose(1, 2)?.reshape((b, d, grid.0, grid.1))?)
}

/// Inverse of [`tokens_to_grid`].
pub fn grid_to_tokens(map: &Tensor) -> Result<Tensor> {
    let (b, d, h, w) = map.dims4()?;
    Ok(map.reshape((b, d, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// A toy backbone of either kind.
#[derive(Clone, Debug)]
pub enum Backbone {
    Cnn(ToyCnn),
    Vit(ToyVit),
}

impl Backbone {
    /// Registers parameters under `prefix` (names `"{prefix}.s{k}...."` carry their stage).
    pub fn build(config: &BackboneConfig, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(match config.kind {
            BackboneKind::Cnn => Backbone::Cnn(ToyCnn::new(config.clone(), store, prefix, &mut rng)?),
            BackboneKind::Vit => Backbone::Vit(ToyVit::new(config.clone(), store, prefix, &mut rng)?),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        match self {
            Backbone::Cnn(m) => &m.config,
            Backbone::Vit(m) => &m.config,
        }
    }

    pub fn kind(&self) -> BackboneKind {
        self.config().kind
    }

    pub fn last_stage(&self) -> usize {
        self.config().last_stage()
    }

    pub fn width(&self) -> usize {
        self.config().width
    }

    /// Runs stages `from+1 ..= to` on `x`, which must be the stage-`from` representation.
    pub fn forward_range(&self, x: Features, from: usize, to: usize) -> Result<Features> {
        let last = self.last_stage();
        if from > to || to > last {
            return Err(Error::Stage(format!("range {from}..={to} outside 0..={last}")));
        }
        let mut cur = x;
        for stage in from + 1..=to {
            cur = match self {
                Backbone::Cnn(m) => m.run_stage(stage, cur)?,
                Backbone::Vit(m) => m.run_stage(stage, cur)?,
            };
        }
        Ok(cur)
    }

    /// Representation after `tap` for an `B x 3 x H x W` batch; `tap = 0` returns the input.
    pub fn forward_batch(&self, images: &Tensor, tap: usize) -> Result<Features> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || (h, w) != self.config().image_size {
            return Err(Error::Shape(format!(
                "backbone expects 3x{:?} inputs, got {c}x{h}x{w}",
                self.config().image_size
            )));
        }
        self.forward_range(Features::Map(images.clone()), 0, tap)
    }

    /// Single-image convenience over [`Backbone::forward_batch`].
    pub fn forward_features(&self, image: &Image, tap: usize) -> Result<Features> {
        let dtype = self.dtype();
        self.forward_batch(&image.to_tensor(dtype)?.unsqueeze(0)?, tap)
    }

    pub fn dtype(&self) -> DType {
        match self {
            Backbone::Cnn(m) => m.dtype,
            Backbone::Vit(m) => m.dtype,
        }
    }
}

/// Stage index encoded in a parameter name produced by [`Backbone::build`].
pub fn stage_of_param(name: &str) -> Option<usize> {
    name.split('.')
        .find_map(|part| part.strip_prefix('s').and_then(|k| k.parse::<usize>().ok()))
}
