//! Linear classification heads over pooled backbone outputs.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{BackboneKind, Features};
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore};

/// Which representation the linear layer reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    /// ViT class token.
    Cls,
    /// Mean of the ViT patch tokens.
    PatchGap,
    /// Class token concatenated with the patch-token mean.
    Concat,
    /// Global average pool of a CNN feature map.
    Gap,
}

impl HeadVariant {
    pub const VIT: [HeadVariant; 3] = [HeadVariant::Cls, HeadVariant::PatchGap, HeadVariant::Concat];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadVariant::Cls => "cls",
            HeadVariant::PatchGap => "patch_gap",
            HeadVariant::Concat => "concat",
            HeadVariant::Gap => "gap",
        }
    }

    /// Label used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            HeadVariant::Cls => "CLS",
            HeadVariant::PatchGap => "Patch",
            HeadVariant::Concat => "CLS+Patch",
            HeadVariant::Gap => "GAP",
        }
    }

    pub fn input_dim(self, width: usize) -> usize {
        match self {
            HeadVariant::Concat => 2 * width,
            _ => width,
        }
    }

    pub fn compatible_with(self, kind: BackboneKind) -> bool {
        matches!(
            (self, kind),
            (HeadVariant::Gap, BackboneKind::Cnn) | (HeadVariant::Cls | HeadVariant::PatchGap | HeadVariant::Concat, BackboneKind::Vit)
        )
    }
}

impl std::str::FromStr for HeadVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [HeadVariant::Cls, HeadVariant::PatchGap, HeadVariant::Concat, HeadVariant::Gap]
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::field("head", format!("unknown head variant `{s}`")))
    }
}

/// Class scores for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits(pub Vec<f32>);

impl Logits {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(Self(t.to_dtype(DType::F32)?.to_vec1::<f32>()?))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        crate::nn::argmax(&self.0.iter().map(|v| *v as f64).collect::<Vec<_>>())
    }
}

/// Mean over every spatial position (or every patch token), zeros included.
pub fn gap_pool(features: &Features) -> Result<Tensor> {
    match features {
        Features::Map(t) => {
            let (_, _, h, w) = t.dims4()?;
            if h * w == 0 {
                return Err(Error::Empty("feature map has no positions".into()));
            }
            Ok(t.mean((2, 3))?)
        }
        Features::Tokens { tokens, .. } => {
            let n = tokens.dims3()?.1;
            if n < 2 {
                return Err(Error::Empty("no patch tokens to pool".into()));
            }
            Ok(tokens.narrow(1, 1, n - 1)?.mean(1)?)
        }
    }
}

/// Sum over positions divided by the number of foreground cells in the
/// `B x 1 x M x N` mask (at least 1).
pub fn gap_pool_foreground(features: &Features, mask: &Tensor) -> Result<Tensor> {
    let (b, _, mh, mw) = mask.dims4()?;
    let counts = mask.reshape((b, mh * mw))?.sum_keepdim(1)?.clamp(1.0, f64::MAX)?;
    let sums = match features {
        Features::Map(t) => t.sum((2, 3))?,
        Features::Tokens { tokens, .. } => {
            let n = tokens.dims3()?.1;
            tokens.narrow(1, 1, n - 1)?.sum(1)?
        }
    };
    Ok(sums.broadcast_div(&counts)?)
}

/// A single linear layer over the chosen representation.
#[derive(Clone, Debug)]
pub struct Head {
    variant: HeadVariant,
    linear: Linear,
}

/// Registers a `C x in_dim` linear head under `prefix`.
pub fn build_head(
    variant: HeadVariant,
    width: usize,
    num_classes: usize,
    seed: u64,
    store: &mut ParamStore,
    prefix: &str,
) -> Result<Head> {
    if width == 0 || num_classes == 0 {
        return Err(Error::Config("head dims must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let linear = Linear::new(store, prefix, variant.input_dim(width), num_classes, &mut rng)?;
    Ok(Head { variant, linear })
}

impl Head {
    pub fn variant(&self) -> HeadVariant {
        self.variant
    }

    pub fn linear(&self) -> &Linear {
        &self.linear
    }

    pub fn num_classes(&self) -> usize {
        self.linear.out_dim()
    }

    /// The vector the linear layer reads, `B x in_dim`.
    pub fn representation(&self, features: &Features, fg_mask: Option<&Tensor>) -> Result<Tensor> {
        let pool = |f: &Features| match fg_mask {
            Some(m) => gap_pool_foreground(f, m),
            None => gap_pool(f),
        };
        match (self.variant, features) {
            (HeadVariant::Gap, Features::Map(_)) => pool(features),
            (HeadVariant::Cls, Features::Tokens { tokens, .. }) => Ok(tokens.narrow(1, 0, 1)?.squeeze(1)?),
            (HeadVariant::PatchGap, Features::Tokens { .. }) => pool(features),
            (HeadVariant::Concat, Features::Tokens { tokens, .. }) => {
                let cls = tokens.narrow(1, 0, 1)?.squeeze(1)?;
                Ok(Tensor::cat(&[&cls, &pool(features)?], 1)?)
            }
            (v, Features::Map(_)) => Err(Error::Config(format!("head `{}` needs a ViT token sequence", v.as_str()))),
            (v, Features::Tokens { .. }) => Err(Error::Config(format!("head `{}` needs a CNN feature map", v.as_str()))),
        }
    }

    pub fn forward_representation(&self, rep: &Tensor) -> Result<Tensor> {
        self.linear.forward(rep)
    }

    /// `B x C` logits from backbone output.
    pub fn classify(&self, features: &Features) -> Result<Tensor> {
        self.forward_representation(&self.representation(features, None)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn map(vals: Vec<f32>, d: usize, h: usize, w: usize) -> Features {
        Features::Map(Tensor::from_vec(vals, (1, d, h, w), &Device::Cpu).unwrap())
    }

    #[test]
    fn gap_pool_means() {
        let f = map(vec![2.5; 8], 2, 2, 2);
        assert_eq!(gap_pool(&f).unwrap().to_vec2::<f32>().unwrap(), vec![vec![2.5, 2.5]]);
        let f = map(vec![1.0, 3.0], 1, 1, 2);
        assert_eq!(gap_pool(&f).unwrap().to_vec2::<f32>().unwrap(), vec![vec![2.0]]);
        // half the positions zeroed: v/2
        let f = map(vec![4.0, 0.0, 4.0, 0.0], 1, 2, 2);
        assert_eq!(gap_pool(&f).unwrap().to_vec2::<f32>().unwrap(), vec![vec![2.0]]);
        let mask = Tensor::from_vec(vec![1f32, 0., 1., 0.], (1, 1, 2, 2), &Device::Cpu).unwrap();
        assert_eq!(
            gap_pool_foreground(&f, &mask).unwrap().to_vec2::<f32>().unwrap(),
            vec![vec![4.0]]
        );
    }

    #[test]
    fn head_shapes_and_determinism() {
        let mut s = ParamStore::new(DType::F32);
        let h = build_head(HeadVariant::Concat, 64, 5, 1, &mut s, "head").unwrap();
        assert_eq!(h.linear().weight().dims(), &[5, 128]);
        let mut s2 = ParamStore::new(DType::F32);
        let h2 = build_head(HeadVariant::Cls, 64, 5, 1, &mut s2, "head").unwrap();
        assert_eq!(h2.linear().weight().dims(), &[5, 64]);
        let mut a = ParamStore::new(DType::F32);
        let mut b = ParamStore::new(DType::F32);
        build_head(HeadVariant::Gap, 8, 3, 9, &mut a, "head").unwrap();
        build_head(HeadVariant::Gap, 8, 3, 9, &mut b, "head").unwrap();
        assert_eq!(a.checksum().unwrap(), b.checksum().unwrap());
    }

    fn tokens(b: usize, n: usize, d: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..b * n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, (b, n, d), &Device::Cpu).unwrap()
    }

    #[test]
    fn concat_reduces_to_cls_when_patch_weights_vanish() {
        let d = 4;
        let mut s = ParamStore::new(DType::F32);
        let concat = build_head(HeadVariant::Concat, d, 3, 2, &mut s, "head").unwrap();
        let w = concat.linear().weight().narrow(1, 0, d).unwrap();
        let zeros = Tensor::zeros((3, d), DType::F32, &Device::Cpu).unwrap();
        let new_w = Tensor::cat(&[&w, &zeros], 1).unwrap();
        s.params()[0].var.set(&new_w).unwrap();
        let mut s2 = ParamStore::new(DType::F32);
        let cls = build_head(HeadVariant::Cls, d, 3, 2, &mut s2, "head").unwrap();
        s2.params()[0].var.set(&w.contiguous().unwrap()).unwrap();
        s2.params()[1].var.set(concat.linear().bias()).unwrap();
        let f = Features::Tokens { tokens: tokens(2, 5, d, 1), grid: (2, 2) };
        let a = concat.classify(&f).unwrap().to_vec2::<f32>().unwrap();
        let b = cls.classify(&f).unwrap().to_vec2::<f32>().unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_inputs_give_bias() {
        let mut s = ParamStore::new(DType::F32);
        let h = build_head(HeadVariant::PatchGap, 4, 3, 5, &mut s, "head").unwrap();
        let mut t = tokens(1, 5, 4, 3).to_vec3::<f32>().unwrap();
        for row in t[0].iter_mut().skip(1) {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
        let flat: Vec<f32> = t.into_iter().flatten().flatten().collect();
        let f = Features::Tokens {
            tokens: Tensor::from_vec(flat, (1, 5, 4), &Device::Cpu).unwrap(),
            grid: (2, 2),
        };
        let out = h.classify(&f).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(out[0], h.linear().bias().to_vec1::<f32>().unwrap());
    }

    #[test]
    fn patch_gap_is_permutation_invariant() {
        let mut s = ParamStore::new(DType::F64);
        let h = build_head(HeadVariant::PatchGap, 4, 3, 5, &mut s, "head").unwrap();
        let t = tokens(1, 5, 4, 8).to_dtype(DType::F64).unwrap();
        let perm = Tensor::new(&[0u32, 3, 1, 4, 2], &Device::Cpu).unwrap();
        let tp = t.index_select(&perm, 1).unwrap();
        let a = h.classify(&Features::Tokens { tokens: t, grid: (2, 2) }).unwrap().to_vec2::<f64>().unwrap();
        let b = h.classify(&Features::Tokens { tokens: tp, grid: (2, 2) }).unwrap().to_vec2::<f64>().unwrap();
        for (x, y) in a[0].iter().zip(&b[0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn variant_backbone_mismatch() {
        let mut s = ParamStore::new(DType::F32);
        let h = build_head(HeadVariant::Cls, 2, 3, 5, &mut s, "head").unwrap();
        assert!(h.classify(&map(vec![0.0; 8], 2, 2, 2)).is_err());
        let mut s = ParamStore::new(DType::F32);
        let g = build_head(HeadVariant::Gap, 4, 3, 5, &mut s, "head").unwrap();
        assert!(g.classify(&Features::Tokens { tokens: tokens(1, 5, 4, 0), grid: (2, 2) }).is_err());
    }
}
