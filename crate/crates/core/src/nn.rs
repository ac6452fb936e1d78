//! Seeded parameter storage, the handful of layers the models need, and the
//! single-file checkpoint format.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A parameter name, its shape and its values flattened to `f64`.
pub type NamedValues = (String, Vec<usize>, Vec<f64>);

const CKPT_MAGIC: &str = "MASKBENCH-CKPT 1";

/// A named trainable tensor.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub var: Var,
}

/// Ordered collection of parameters with deterministic initialisation.
///
/// Layers hold clones of the variables' tensors, which share storage with the
/// `Var`s here, so optimizer updates are visible to the layers.
#[derive(Clone, Debug)]
pub struct ParamStore {
    dtype: DType,
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self { dtype, params: Vec::new() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    fn push(&mut self, name: &str, values: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.params.push(Param { name: name.to_string(), var });
        Ok(out)
    }

    pub fn uniform<R: Rng>(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut R) -> Result<Tensor> {
        let n = shape.iter().product();
        let vals = (0..n).map(|_| rng.random_range(-bound..=bound) as f32).collect();
        self.push(name, vals, shape)
    }

    pub fn normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> Result<Tensor> {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let vals = (0..n)
            .map(|_| dist.sample(rng).clamp(-2.0 * std, 2.0 * std) as f32)
            .collect();
        self.push(name, vals, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Tensor> {
        let n = shape.iter().product();
        self.push(name, vec![value; n], shape)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().map(|p| p.var.clone()).collect()
    }

    pub fn vars_where(&self, pred: impl Fn(&str) -> bool) -> Vec<Var> {
        self.params
            .iter()
            .filter(|p| pred(&p.name))
            .map(|p| p.var.clone())
            .collect()
    }

    /// Every parameter flattened to `f64`, in registration order.
    pub fn snapshot(&self) -> Result<Vec<NamedValues>> {
        self.params
            .iter()
            .map(|p| {
                let t = p.var.as_tensor();
                let vals = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
                Ok((p.name.clone(), t.dims().to_vec(), vals))
            })
            .collect()
    }

    /// SHA-256 over names, shapes and raw values; equal iff parameters are bit-identical.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, shape, vals) in self.snapshot()? {
            h.update(name.as_bytes());
            for d in shape {
                h.update((d as u64).to_le_bytes());
            }
            for v in vals {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Overwrites parameters by name; every stored parameter must be provided.
    pub fn load(&self, values: &[NamedValues]) -> Result<()> {
        for p in &self.params {
            let (_, shape, vals) = values
                .iter()
                .find(|(n, _, _)| *n == p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", p.name)))?;
            if shape.as_slice() != p.var.as_tensor().dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {shape:?}, expected {:?}",
                    p.name,
                    p.var.as_tensor().dims()
                )));
            }
            let t = Tensor::from_slice(vals, shape.as_slice(), &Device::Cpu)?.to_dtype(self.dtype)?;
            p.var.set(&t)?;
        }
        Ok(())
    }
}

/// Fully connected layer `y = x W^T + b` over the last dimension.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    /// PyTorch-style uniform init with bound `1/sqrt(fan_in)`.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            weight: store.uniform(&format!("{name}.weight"), &[fan_out, fan_in], bound, rng)?,
            bias: store.uniform(&format!("{name}.bias"), &[fan_out], bound, rng)?,
        })
    }

    /// Truncated-normal weights and zero bias, as is usual for transformers.
    pub fn new_normal<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.normal(&format!("{name}.weight"), &[fan_out, fan_in], std, rng)?,
            bias: store.constant(&format!("{name}.bias"), &[fan_out], 0.0)?,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let flat = x.reshape((rows, dims[dims.len() - 1]))?;
        let y = flat.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?;
        let mut out = dims.to_vec();
        *out.last_mut().expect("rank >= 1") = self.out_dim();
        Ok(y.reshape(out)?)
    }
}

/// 2-D convolution with square kernel.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: store.uniform(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], bound, rng)?,
            bias: store.uniform(&format!("{name}.bias"), &[out_ch], bound, rng)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dims()[0];
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Layer normalisation over one dimension with affine parameters.
#[derive(Clone, Debug)]
pub struct Norm {
    gamma: Tensor,
    beta: Tensor,
    dim: usize,
    eps: f64,
}

impl Norm {
    /// Normalises over the last dimension of size `width`.
    pub fn last_dim(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(&format!("{name}.weight"), &[width], 1.0)?,
            beta: store.constant(&format!("{name}.bias"), &[width], 0.0)?,
            dim: usize::MAX,
            eps: 1e-6,
        })
    }

    /// Normalises over the channel dimension of an `N x C x H x W` tensor.
    pub fn channels(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(&format!("{name}.weight"), &[1, channels, 1, 1], 1.0)?,
            beta: store.constant(&format!("{name}.bias"), &[1, channels, 1, 1], 0.0)?,
            dim: 1,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dim = if self.dim == usize::MAX { x.rank() - 1 } else { self.dim };
        let mean = x.mean_keepdim(dim)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(dim)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Argmax over the last dimension with ties resolved to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let rows = logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(rows.iter().map(|r| argmax(r)).collect())
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Sum of every element as `f64`; for scalar tensors this is the value itself.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.sum(D::Minus1)?.to_scalar::<f64>()?)
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    kind: String,
    config: serde_json::Value,
    tensors: Vec<(String, Vec<usize>)>,
}

/// Writes `magic`, a one-line JSON header (kind, config, tensor index) and
/// little-endian `f64` payload.
pub fn write_checkpoint(path: &Path, kind: &str, config: &impl Serialize, store: &ParamStore) -> Result<()> {
    let snap = store.snapshot()?;
    let header = CkptHeader {
        kind: kind.to_string(),
        config: serde_json::to_value(config)?,
        tensors: snap.iter().map(|(n, s, _)| (n.clone(), s.clone())).collect(),
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{CKPT_MAGIC}")?;
    writeln!(f, "{}", serde_json::to_string(&header)?)?;
    for (_, _, vals) in &snap {
        for v in vals {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Parsed checkpoint: kind, config and named tensors.
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: Vec<NamedValues>,
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    line.clear();
    r.read_line(&mut line)?;
    let header: CkptHeader = serde_json::from_str(line.trim_end())?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut buf = [0u8; 8];
    for (name, shape) in header.tensors {
        let n: usize = shape.iter().product();
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint(format!("truncated payload in tensor `{name}`")))?;
            vals.push(f64::from_le_bytes(buf));
        }
        tensors.push((name, shape, vals));
    }
    Ok(Checkpoint {
        kind: header.kind,
        config: header.config,
        tensors,
    })
}
