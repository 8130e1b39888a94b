//! Parameter storage and the handful of layers the models are built from.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Forward-pass mode. Training mode owns the random stream used for dropout,
/// layerdrop and Gumbel noise so that a run is reproducible from its seed.
pub struct Mode {
    train: bool,
    rng: ChaCha8Rng,
}

impl Mode {
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform in `[-b, b]` with `b = 1/sqrt(fan_in)`.
    FanIn(usize),
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    Kaiming(usize),
}

/// Named trainable tensors. Names are dotted paths such as `frontend.enc.0.weight`.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::invalid(format!("parameter {name} registered twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::Kaiming(fan_in) => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::FanIn(fan_in) => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-b..=b)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(handle)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Variables whose names start with `prefix`, in name order.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn num_scalars(&self, prefix: &str) -> usize {
        self.vars_with_prefix(prefix)
            .iter()
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Flattened values as f64, keyed by name.
    pub fn export(&self, prefix: &str) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
        self.vars_with_prefix(prefix)
            .into_iter()
            .map(|(k, v)| {
                let dims = v.dims().to_vec();
                let data = v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
                Ok((k, dims, data))
            })
            .collect()
    }

    pub fn assign(&self, name: &str, dims: &[usize], data: &[f64]) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if var.dims() != dims {
            return Err(Error::Shape(format!(
                "parameter {name}: stored {:?}, model expects {:?}",
                dims,
                var.dims()
            )));
        }
        let t = Tensor::from_slice(data, dims, &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    /// SHA-256 over names, shapes and the raw values of every parameter under `prefix`.
    pub fn hash(&self, prefix: &str) -> Result<String> {
        let mut h = Sha256::new();
        for (k, dims, data) in self.export(prefix)? {
            h.update(k.as_bytes());
            for d in dims {
                h.update((d as u64).to_le_bytes());
            }
            for x in data {
                h.update(x.to_le_bytes());
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}

pub fn dropout(x: &Tensor, p: f64, mode: &mut Mode) -> Result<Tensor> {
    if !mode.is_train() || p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let n = x.elem_count();
    let rng = mode.rng();
    let mask: Vec<f32> = (0..n)
        .map(|_| if rng.random::<f64>() < keep { (1.0 / keep) as f32 } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok(x.mul(&mask)?)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

/// Differentiable softmax over the last dimension.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool) -> Result<Self> {
        let bias = bias.then_some(Init::FanIn(input));
        Self::with_init(ps, name, input, output, Init::FanIn(input), bias)
    }

    /// Like [`Linear::new`] with explicit initializers; `bias: None` omits the bias.
    pub fn with_init(
        ps: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        weight: Init,
        bias: Option<Init>,
    ) -> Result<Self> {
        let weight = ps.param(&format!("{name}.weight"), &[output, input], weight)?;
        let bias = match bias {
            Some(init) => Some(ps.param(&format!("{name}.bias"), &[output], init)?),
            None => None,
        };
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }
}

/// 1-D convolution over `[batch, channels, time]` that only looks backwards:
/// the input is left-padded by `left_pad` zeros and never right-padded.
#[derive(Debug, Clone)]
pub struct CausalConv1d {
    weight: Tensor,
    bias: Option<Tensor>,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub left_pad: usize,
}

pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub left_pad: usize,
    pub bias: bool,
}

impl CausalConv1d {
    pub fn new(ps: &mut ParamStore, name: &str, spec: ConvSpec) -> Result<Self> {
        if spec.in_channels % spec.groups != 0 || spec.out_channels % spec.groups != 0 {
            return Err(Error::Config(format!(
                "{name}: channels {}->{} not divisible by {} groups",
                spec.in_channels, spec.out_channels, spec.groups
            )));
        }
        let fan_in = spec.in_channels / spec.groups * spec.kernel;
        let weight = ps.param(
            &format!("{name}.weight"),
            &[spec.out_channels, spec.in_channels / spec.groups, spec.kernel],
            Init::Kaiming(fan_in),
        )?;
        let bias = if spec.bias {
            Some(ps.param(&format!("{name}.bias"), &[spec.out_channels], Init::FanIn(fan_in))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride: spec.stride,
            dilation: spec.dilation,
            groups: spec.groups,
            left_pad: spec.left_pad,
        })
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = if self.left_pad > 0 {
            x.pad_with_zeros(D::Minus1, self.left_pad, 0)?
        } else {
            x.clone()
        };
        let y = x.conv1d(&self.weight, 0, self.stride, self.dilation, self.groups)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dims()[0], 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.param(&format!("{name}.weight"), &[dim], Init::Ones)?,
            beta: ps.param(&format!("{name}.bias"), &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    /// Normalizes over the last dimension.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let y = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Group normalization with statistics taken per frame: for input
/// `[batch, channels, time]`, each group of channels is normalized at every
/// time step independently, so no information crosses frames.
#[derive(Debug, Clone)]
pub struct FrameGroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    eps: f64,
}

impl FrameGroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Config(format!(
                "{name}: {channels} channels cannot be split into {groups} groups"
            )));
        }
        Ok(Self {
            gamma: ps.param(&format!("{name}.weight"), &[channels], Init::Ones)?,
            beta: ps.param(&format!("{name}.bias"), &[channels], Init::Zeros)?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, t) = x.dims3()?;
        let g = x.reshape((b, self.groups, c / self.groups, t))?;
        let mean = g.mean_keepdim(2)?;
        let gc = g.broadcast_sub(&mean)?;
        let var = gc.sqr()?.mean_keepdim(2)?;
        let y = gc.broadcast_div(&(var + self.eps)?.sqrt()?)?.reshape((b, c, t))?;
        let gamma = self.gamma.reshape((1, c, 1))?;
        let beta = self.beta.reshape((1, c, 1))?;
        Ok(y.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

/// Inclusive prefix sum along `dim`.
/// Inclusive prefix sum along `dim`, computed blockwise so memory stays
/// linear in the sequence length.
pub fn cumsum(x: &Tensor, dim: usize) -> Result<Tensor> {
    const BLOCK: usize = 64;
    let rank = x.rank();
    if dim >= rank {
        return Err(Error::Shape(format!("cumsum dim {dim} out of range for rank {rank}")));
    }
    let last = rank - 1;
    let x = if dim == last { x.clone() } else { x.transpose(dim, last)?.contiguous()? };
    let dims = x.dims().to_vec();
    let t = dims[last];
    let out = if t <= BLOCK {
        x.cumsum(last)?
    } else {
        let n = t.div_ceil(BLOCK);
        let lead: usize = dims[..last].iter().product();
        let flat = x.reshape((lead, t))?;
        let flat = if n * BLOCK > t {
            let pad = Tensor::zeros((lead, n * BLOCK - t), x.dtype(), x.device())?;
            Tensor::cat(&[flat, pad], 1)?
        } else {
            flat
        };
        let blocks = flat.reshape((lead, n, BLOCK))?;
        let within = blocks.cumsum(2)?;
        let totals = within.narrow(2, BLOCK - 1, 1)?.squeeze(2)?;
        let carry = (totals.cumsum(1)? - &totals)?;
        let scanned = within.broadcast_add(&carry.unsqueeze(2)?)?;
        let mut shape = dims.clone();
        shape[last] = t;
        scanned.reshape((lead, n * BLOCK))?.narrow(1, 0, t)?.reshape(shape)?
    };
    Ok(if dim == last { out } else { out.transpose(dim, last)?.contiguous()? })
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
