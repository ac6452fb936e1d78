use candle_core::{DType, Tensor};
use rand::Rng;

use super::{BackboneConfig, Features};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Norm, ParamStore};

#[derive(Clone, Debug)]
struct ResBlock {
    norm: Norm,
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm.forward(x)?)?.gelu()?;
        Ok((x + self.conv2.forward(&h)?)?)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    stem: Option<(Conv2d, Norm)>,
    down: Conv2d,
    blocks: Vec<ResBlock>,
    final_norm: Option<Norm>,
}

/// Staged residual CNN; widths double at every stage and end at `width`.
#[derive(Clone, Debug)]
pub struct ToyCnn {
    pub(crate) config: BackboneConfig,
    pub(crate) dtype: DType,
    stages: Vec<Stage>,
}

impl ToyCnn {
    pub(crate) fn new<R: Rng>(config: BackboneConfig, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        let s_count = config.depth;
        let width_at = |s: usize| config.width >> (s_count - s);
        let stem_width = width_at(1) / 2;
        let mut stages = Vec::with_capacity(s_count);
        for s in 1..=s_count {
            let p = format!("{prefix}.s{s}");
            let stem = if s == 1 {
                let k = config.stem_factor;
                let conv = Conv2d::new(store, &format!("{p}.stem"), 3, stem_width, k, k, 0, rng)?;
                Some((conv, Norm::channels(store, &format!("{p}.stem_norm"), stem_width)?))
            } else {
                None
            };
            let in_w = if s == 1 { stem_width } else { width_at(s - 1) };
            let out_w = width_at(s);
            let f = config.stage_factor;
            let down = Conv2d::new(store, &format!("{p}.down"), in_w, out_w, f, f, 0, rng)?;
            let blocks = (0..config.blocks_per_stage)
                .map(|b| {
                    let bp = format!("{p}.block{b}");
                    Ok(ResBlock {
                        norm: Norm::channels(store, &format!("{bp}.norm"), out_w)?,
                        conv1: Conv2d::new(store, &format!("{bp}.conv1"), out_w, out_w, 3, 1, 1, rng)?,
                        conv2: Conv2d::new(store, &format!("{bp}.conv2"), out_w, out_w, 3, 1, 1, rng)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let final_norm = if s == s_count {
                Some(Norm::channels(store, &format!("{p}.final_norm"), out_w)?)
            } else {
                None
            };
            stages.push(Stage {
                stem,
                down,
                blocks,
                final_norm,
            });
        }
        Ok(Self {
            config,
            dtype: store.dtype(),
            stages,
        })
    }

    pub(crate) fn run_stage(&self, stage: usize, x: Features) -> Result<Features> {
        let Features::Map(mut h) = x else {
            return Err(Error::Shape("cnn stages take spatial maps".into()));
        };
        let st = &self.stages[stage - 1];
        if let Some((conv, norm)) = &st.stem {
            h = norm.forward(&conv.forward(&h)?)?;
        }
        h = st.down.forward(&h)?;
        for b in &st.blocks {
            h = b.forward(&h)?;
        }
        if let Some(n) = &st.final_norm {
            h = n.forward(&h)?;
        }
        Ok(Features::Map(h))
    }
}
