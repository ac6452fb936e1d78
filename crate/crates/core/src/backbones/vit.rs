use candle_core::{DType, Tensor, D};
use rand::Rng;

use super::{BackboneConfig, Features};
use crate::error::{Error, Result};
use crate::nn::{Linear, Norm, ParamStore};

#[derive(Clone, Debug)]
struct Block {
    ln1: Norm,
    qkv: Linear,
    proj: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        self.proj.forward(&out)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attention(&self.ln1.forward(x)?)?)?;
        let h = self.fc1.forward(&self.ln2.forward(&x)?)?.gelu()?;
        Ok((&x + self.fc2.forward(&h)?)?)
    }
}

/// Pre-norm ViT with a prepended CLS token and learned positions.
#[derive(Clone, Debug)]
pub struct ToyVit {
    pub(crate) config: BackboneConfig,
    pub(crate) dtype: DType,
    patch_embed: Linear,
    cls: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    final_norm: Norm,
}

impl ToyVit {
    pub(crate) fn new<R: Rng>(config: BackboneConfig, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        let d = config.width;
        let p = config.patch_size;
        let (gh, gw) = config.grid(1);
        let first = format!("{prefix}.s1");
        let patch_embed = Linear::new(store, &format!("{first}.patch_embed"), 3 * p * p, d, rng)?;
        let cls = store.normal(&format!("{first}.cls"), &[1, 1, d], 0.02, rng)?;
        let pos = store.normal(&format!("{first}.pos"), &[1, 1 + gh * gw, d], 0.02, rng)?;
        let blocks = (1..=config.depth)
            .map(|t| {
                let bp = format!("{prefix}.s{t}.block");
                Ok(Block {
                    ln1: Norm::last_dim(store, &format!("{bp}.ln1"), d)?,
                    qkv: Linear::new_normal(store, &format!("{bp}.qkv"), d, 3 * d, 0.02, rng)?,
                    proj: Linear::new_normal(store, &format!("{bp}.proj"), d, d, 0.02, rng)?,
                    ln2: Norm::last_dim(store, &format!("{bp}.ln2"), d)?,
                    fc1: Linear::new_normal(store, &format!("{bp}.fc1"), d, 4 * d, 0.02, rng)?,
                    fc2: Linear::new_normal(store, &format!("{bp}.fc2"), 4 * d, d, 0.02, rng)?,
                    heads: config.heads,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = Norm::last_dim(store, &format!("{prefix}.s{}.final_norm", config.depth), d)?;
        Ok(Self {
            config,
            dtype: store.dtype(),
            patch_embed,
            cls,
            pos,
            blocks,
            final_norm,
        })
    }

    /// `B x 3 x H x W` to `B x P x 3p^2` in row-major patch order.
    pub fn patchify(&self, images: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = images.dims4()?;
        let p = self.config.patch_size;
        let (gh, gw) = (h / p, w / p);
        Ok(images
            .reshape((b, c, gh, p, gw, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, gh * gw, c * p * p))?)
    }

    fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let b = images.dims4()?.0;
        let patches = self.patch_embed.forward(&self.patchify(images)?)?;
        let d = self.config.width;
        let cls = self.cls.broadcast_as((b, 1, d))?;
        Ok(Tensor::cat(&[&cls, &patches], 1)?.broadcast_add(&self.pos)?)
    }

    pub(crate) fn run_stage(&self, stage: usize, x: Features) -> Result<Features> {
        let grid = self.config.grid(1);
        let tokens = match (stage, x) {
            (1, Features::Map(img)) => self.embed(&img)?,
            (s, Features::Tokens { tokens, .. }) if s > 1 => tokens,
            _ => return Err(Error::Shape(format!("unexpected representation entering block {stage}"))),
        };
        let mut h = self.blocks[stage - 1].forward(&tokens)?;
        if stage == self.config.depth {
            h = self.final_norm.forward(&h)?;
        }
        Ok(Features::Tokens { tokens: h, grid })
    }
}
