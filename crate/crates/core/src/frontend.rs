//! The causal frontend body: convolutional feature encoder (latents Z),
//! span masking, and the causal transformer context network (patterns C).

use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor, D};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::nn::{
    dropout, gelu, softmax, CausalConv1d, ConvSpec, FrameGroupNorm, Init, LayerNorm, Linear, Mode,
    ParamStore,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub conv_channels: usize,
    pub conv_strides: Vec<usize>,
    pub conv_kernels: Vec<usize>,
    /// Channel groups of the frame-wise group norm after the first block.
    pub norm_groups: usize,
    pub model_dim: usize,
    pub inner_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub pos_kernel: usize,
    pub pos_groups: usize,
    pub dropout: f64,
    pub layerdrop: f64,
    pub mask_ratio: f64,
    pub mask_span: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            conv_channels: 512,
            conv_strides: vec![5, 2, 2, 2, 2, 2, 2],
            conv_kernels: vec![10, 3, 3, 3, 3, 2, 2],
            norm_groups: 32,
            model_dim: 768,
            inner_dim: 3072,
            heads: 8,
            layers: 12,
            pos_kernel: 128,
            pos_groups: 16,
            dropout: 0.1,
            layerdrop: 0.05,
            mask_ratio: 0.65,
            mask_span: 10,
        }
    }
}

impl FrontendConfig {
    /// Same stride pyramid (20 ms hop), narrow and shallow enough for CPU tests.
    pub fn tiny() -> Self {
        Self {
            conv_channels: 32,
            norm_groups: 4,
            model_dim: 32,
            inner_dim: 64,
            heads: 4,
            layers: 2,
            pos_kernel: 16,
            pos_groups: 4,
            mask_ratio: 0.065,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.conv_strides.is_empty() || self.conv_strides.len() != self.conv_kernels.len() {
            return bad("conv_strides and conv_kernels must be non-empty and equally long".into());
        }
        for (i, (&s, &k)) in self.conv_strides.iter().zip(&self.conv_kernels).enumerate() {
            if s == 0 || k < s {
                return bad(format!("conv block {i}: kernel {k} must be >= stride {s} >= 1"));
            }
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return bad(format!("model_dim {} not divisible by {} heads", self.model_dim, self.heads));
        }
        if self.pos_groups == 0 || self.model_dim % self.pos_groups != 0 {
            return bad(format!(
                "model_dim {} not divisible by {} positional groups",
                self.model_dim, self.pos_groups
            ));
        }
        if self.norm_groups == 0 || self.conv_channels % self.norm_groups != 0 {
            return bad(format!(
                "conv_channels {} not divisible by {} norm groups",
                self.conv_channels, self.norm_groups
            ));
        }
        if self.pos_kernel == 0 || self.inner_dim == 0 || self.conv_channels == 0 {
            return bad("dimensions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.layerdrop) {
            return bad("dropout and layerdrop must lie in [0, 1)".into());
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) || self.mask_span == 0 {
            return bad("mask_ratio must lie in (0, 1] and mask_span >= 1".into());
        }
        Ok(())
    }

    /// Samples per latent frame.
    pub fn hop(&self) -> usize {
        self.conv_strides.iter().product()
    }

    pub fn frame_rate(&self, sample_rate: u32) -> f64 {
        sample_rate as f64 / self.hop() as f64
    }

    /// Frame count after folding `floor(len / stride)` over the blocks.
    pub fn num_frames(&self, len: usize) -> usize {
        self.conv_strides.iter().fold(len, |n, s| n / s)
    }

    pub fn ideal_latency_ms(&self, sample_rate: u32) -> f64 {
        1000.0 * self.hop() as f64 / sample_rate as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameRole {
    Latent,
    Pattern,
    Teacher,
}

/// A `T x D` sequence of frames at a fixed rate.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub values: Tensor,
    pub frame_rate: f64,
    pub role: FrameRole,
}

impl FrameSequence {
    pub fn new(values: Tensor, frame_rate: f64, role: FrameRole) -> Result<Self> {
        let (t, _) = values.dims2()?;
        if t == 0 {
            return Err(Error::invalid("frame sequence must have at least one frame"));
        }
        let finite = values
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::invalid("frame sequence contains non-finite values"));
        }
        Ok(Self {
            values,
            frame_rate,
            role,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], frame_rate: f64, role: FrameRole, dtype: DType) -> Result<Self> {
        let t = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged frame rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let values = Tensor::from_vec(flat, (t, d), &Device::Cpu)?.to_dtype(dtype)?;
        Self::new(values, frame_rate, role)
    }

    pub fn len(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn rows(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.values.to_dtype(DType::F64)?.to_vec2()?)
    }
}

/// Frames hidden from the context network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub len: usize,
    pub span: usize,
    pub starts: BTreeSet<usize>,
    pub masked: BTreeSet<usize>,
}

impl MaskPlan {
    /// Builds the plan whose masked set is the union of `[s, min(s + span, len))`.
    pub fn from_starts(len: usize, span: usize, starts: impl IntoIterator<Item = usize>) -> Self {
        let starts: BTreeSet<usize> = starts.into_iter().filter(|&s| s < len).collect();
        let masked = starts
            .iter()
            .flat_map(|&s| s..(s + span).min(len))
            .collect();
        Self {
            len,
            span,
            starts,
            masked,
        }
    }

    pub fn empty(len: usize) -> Self {
        Self::from_starts(len, 1, [])
    }

    pub fn is_masked(&self, t: usize) -> bool {
        self.masked.contains(&t)
    }
}

/// `round(ratio * len)` distinct span starts drawn uniformly without replacement.
pub fn sample_mask_plan(len: usize, ratio: f64, span: usize, rng: &mut impl Rng) -> MaskPlan {
    let n = ((ratio * len as f64).round() as usize).min(len);
    let starts = sample(rng, len, n).into_iter();
    MaskPlan::from_starts(len, span.max(1), starts)
}

pub fn sample_mask_plan_seeded(len: usize, ratio: f64, span: usize, rng_seed: u64) -> MaskPlan {
    sample_mask_plan(len, ratio, span, &mut ChaCha8Rng::seed_from_u64(rng_seed))
}

struct DecoderBlock {
    ln_attn: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln_ffn: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
}

/// The causal frontend. Parameters live in a shared [`ParamStore`] under `prefix`.
pub struct Frontend {
    cfg: FrontendConfig,
    convs: Vec<CausalConv1d>,
    first_norm: FrameGroupNorm,
    mask_vector: Tensor,
    proj: Linear,
    pos_conv: CausalConv1d,
    pos_norm: LayerNorm,
    blocks: Vec<DecoderBlock>,
    final_norm: LayerNorm,
}

impl Frontend {
    pub fn new(ps: &mut ParamStore, prefix: &str, cfg: &FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.conv_channels;
        let mut convs = Vec::new();
        let mut in_ch = 1;
        for (i, (&stride, &kernel)) in cfg.conv_strides.iter().zip(&cfg.conv_kernels).enumerate() {
            convs.push(CausalConv1d::new(
                ps,
                &format!("{prefix}.enc.{i}"),
                ConvSpec {
                    in_channels: in_ch,
                    out_channels: c,
                    kernel,
                    stride,
                    dilation: 1,
                    groups: 1,
                    left_pad: kernel - stride,
                    bias: false,
                },
            )?);
            in_ch = c;
        }
        let first_norm = FrameGroupNorm::new(ps, &format!("{prefix}.enc.norm"), c, cfg.norm_groups)?;
        let mask_vector = ps.param(&format!("{prefix}.mask_vector"), &[c], Init::Normal(0.02))?;
        let dm = cfg.model_dim;
        let proj = Linear::new(ps, &format!("{prefix}.proj"), c, dm, true)?;
        let pos_conv = CausalConv1d::new(
            ps,
            &format!("{prefix}.pos_conv"),
            ConvSpec {
                in_channels: dm,
                out_channels: dm,
                kernel: cfg.pos_kernel,
                stride: 1,
                dilation: 1,
                groups: cfg.pos_groups,
                left_pad: cfg.pos_kernel - 1,
                bias: true,
            },
        )?;
        let pos_norm = LayerNorm::new(ps, &format!("{prefix}.pos_norm"), dm)?;
        let mut blocks = Vec::new();
        for l in 0..cfg.layers {
            let p = format!("{prefix}.layers.{l}");
            blocks.push(DecoderBlock {
                ln_attn: LayerNorm::new(ps, &format!("{p}.ln_attn"), dm)?,
                qkv: Linear::new(ps, &format!("{p}.qkv"), dm, 3 * dm, true)?,
                out: Linear::new(ps, &format!("{p}.attn_out"), dm, dm, true)?,
                ln_ffn: LayerNorm::new(ps, &format!("{p}.ln_ffn"), dm)?,
                ffn_in: Linear::new(ps, &format!("{p}.ffn_in"), dm, cfg.inner_dim, true)?,
                ffn_out: Linear::new(ps, &format!("{p}.ffn_out"), cfg.inner_dim, dm, true)?,
            });
        }
        let final_norm = LayerNorm::new(ps, &format!("{prefix}.final_norm"), dm)?;
        Ok(Self {
            cfg: cfg.clone(),
            convs,
            first_norm,
            mask_vector,
            proj,
            pos_conv,
            pos_norm,
            blocks,
            final_norm,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn mask_vector(&self) -> &Tensor {
        &self.mask_vector
    }

    /// `[batch, samples] -> [batch, frames, conv_channels]`.
    pub fn encode_batch(&self, wav: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let (_, len) = wav.dims2()?;
        let hop = self.cfg.hop();
        if len < hop {
            return Err(Error::TooShort { got: len, min: hop });
        }
        let mut x = wav.unsqueeze(1)?;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x)?;
            if i == 0 {
                x = self.first_norm.forward(&x)?;
            }
            x = dropout(&x, self.cfg.dropout, mode)?;
            x = gelu(&x)?;
        }
        Ok(x.transpose(1, 2)?.contiguous()?)
    }

    pub fn encode(&self, waveform: &Waveform, mode: &mut Mode) -> Result<FrameSequence> {
        let wav = waveform_tensor(waveform, self.mask_vector.dtype())?.unsqueeze(0)?;
        let z = self.encode_batch(&wav, mode)?.squeeze(0)?;
        FrameSequence::new(z, self.cfg.frame_rate(waveform.sample_rate()), FrameRole::Latent)
    }

    /// Replaces every masked frame of item `b` with the learned mask vector.
    pub fn apply_mask_batch(&self, z: &Tensor, plans: &[MaskPlan]) -> Result<Tensor> {
        apply_mask_batch(z, plans, &self.mask_vector)
    }

    /// `[batch, frames, conv_channels] -> [batch, frames, model_dim]`; frame t
    /// of the output depends only on input frames `<= t`.
    pub fn contextualize_batch(&self, z: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let (b, t, c) = z.dims3()?;
        if c != self.cfg.conv_channels {
            return Err(Error::Shape(format!(
                "context network expects {} input channels, got {c}",
                self.cfg.conv_channels
            )));
        }
        let x = self.proj.forward(z)?;
        let pos = gelu(&self.pos_conv.forward(&x.transpose(1, 2)?.contiguous()?)?)?;
        let x = (x + pos.transpose(1, 2)?)?;
        let mut x = dropout(&self.pos_norm.forward(&x)?, self.cfg.dropout, mode)?;
        let mask = causal_mask(t, x.dtype())?;
        for block in &self.blocks {
            if mode.is_train() && self.cfg.layerdrop > 0.0 && mode.rng().random::<f64>() < self.cfg.layerdrop {
                continue;
            }
            x = self.block_forward(block, &x, &mask, b, t, mode)?;
        }
        self.final_norm.forward(&x)
    }

    fn block_forward(
        &self,
        blk: &DecoderBlock,
        x: &Tensor,
        mask: &Tensor,
        b: usize,
        t: usize,
        mode: &mut Mode,
    ) -> Result<Tensor> {
        let dm = self.cfg.model_dim;
        let h = self.cfg.heads;
        let dh = dm / h;
        let qkv = blk.qkv.forward(&blk.ln_attn.forward(x)?)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(D::Minus1, i * dm, dm)?
                .reshape((b, t, h, dh))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?.broadcast_add(mask)?;
        let att = dropout(&softmax(&scores)?, self.cfg.dropout, mode)?;
        let ctx = att.matmul(&v)?.transpose(1, 2)?.reshape((b, t, dm))?;
        let x = (x + dropout(&blk.out.forward(&ctx)?, self.cfg.dropout, mode)?)?;
        let hidden = dropout(&gelu(&blk.ffn_in.forward(&blk.ln_ffn.forward(&x)?)?)?, self.cfg.dropout, mode)?;
        let ffn = dropout(&blk.ffn_out.forward(&hidden)?, self.cfg.dropout, mode)?;
        Ok((x + ffn)?)
    }

    pub fn contextualize(&self, masked_z: &FrameSequence, mode: &mut Mode) -> Result<FrameSequence> {
        let c = self
            .contextualize_batch(&masked_z.values.unsqueeze(0)?, mode)?
            .squeeze(0)?;
        FrameSequence::new(c, masked_z.frame_rate, FrameRole::Pattern)
    }

    /// Unmasked patterns for a batch of waveforms `[batch, samples]`.
    pub fn patterns_batch(&self, wav: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let z = self.encode_batch(wav, mode)?;
        self.contextualize_batch(&z, mode)
    }

    pub fn patterns(&self, waveform: &Waveform) -> Result<FrameSequence> {
        let mut mode = Mode::eval();
        let z = self.encode(waveform, &mut mode)?;
        self.contextualize(&z, &mut mode)
    }
}

pub(crate) fn waveform_tensor(w: &Waveform, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_slice(w.samples(), w.len(), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Additive attention mask: 0 on and below the diagonal, a large negative above.
pub fn causal_mask(t: usize, dtype: DType) -> Result<Tensor> {
    let v: Vec<f32> = (0..t * t)
        .map(|i| if i % t > i / t { -1e9 } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(v, (t, t), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn apply_mask_batch(z: &Tensor, plans: &[MaskPlan], mask_vector: &Tensor) -> Result<Tensor> {
    let (b, t, c) = z.dims3()?;
    if plans.len() != b {
        return Err(Error::Shape(format!("{} mask plans for batch of {b}", plans.len())));
    }
    let mut flags = Vec::with_capacity(b * t);
    for p in plans {
        if p.masked.iter().any(|&i| i >= t) {
            return Err(Error::invalid(format!("mask index out of range for {t} frames")));
        }
        flags.extend((0..t).map(|i| u8::from(p.is_masked(i))));
    }
    let cond = Tensor::from_vec(flags, (b, t, 1), z.device())?.broadcast_as((b, t, c))?;
    let fill = mask_vector.reshape((1, 1, c))?.broadcast_as((b, t, c))?;
    Ok(cond.where_cond(&fill, z)?)
}

/// Single-sequence form of [`apply_mask_batch`].
pub fn apply_mask(z: &FrameSequence, plan: &MaskPlan, mask_vector: &Tensor) -> Result<FrameSequence> {
    if plan.len != z.len() {
        return Err(Error::invalid(format!(
            "mask plan covers {} frames, sequence has {}",
            plan.len,
            z.len()
        )));
    }
    if mask_vector.dims() != [z.dim()] {
        return Err(Error::Shape(format!(
            "mask vector {:?} does not match frame dim {}",
            mask_vector.dims(),
            z.dim()
        )));
    }
    let out = apply_mask_batch(&z.values.unsqueeze(0)?, std::slice::from_ref(plan), mask_vector)?;
    FrameSequence::new(out.squeeze(0)?, z.frame_rate, z.role)
}
