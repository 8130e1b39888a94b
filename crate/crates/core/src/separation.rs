//! Causal mask-based time-domain separator fed by the frozen frontend:
//! learned encoder, pattern adaptation layer, TCN mask estimator with
//! cumulative layer normalization, overlap-add decoder and PIT training.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor, D};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::audio::Waveform;
use crate::data_sim::{crop_example, crop_offsets, MixtureExample};
use crate::error::{Error, Result};
use crate::eval::metrics::{si_sdr_slices, SDR_CAP_DB};
use crate::frontend::{waveform_tensor, FrameRole, FrameSequence, Frontend, FrontendConfig};
use crate::model::{dtype_name, load_params, param_arrays, parse_dtype, CspModel, FRONTEND_PREFIX};
use crate::nn::{cumsum, scalar_f64, CausalConv1d, ConvSpec, Init, Linear, Mode, ParamStore};
use crate::optim::{AdamW, AdamWConfig};
use crate::trainer::{batch_tensor, csv_err};

pub const SEPARATOR_PREFIX: &str = "separator";
pub const SEPARATOR_KIND: &str = "csp-separator";

/// How upsampled pattern frames line up with separator frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptAlignment {
    /// Separator frame `f` sees the newest pattern frame whose hop has
    /// completed by the end of `f`'s input window; earlier frames see none.
    #[default]
    Completed,
    /// Pattern frame `k` is repeated over separator frames `[r k, r (k + 1))`.
    /// This reads up to one frontend hop ahead of the separator encoder.
    Started,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeparatorConfig {
    pub enc_kernel: usize,
    pub enc_stride: usize,
    pub enc_dim: usize,
    pub bottleneck: usize,
    pub hidden: usize,
    pub tcn_kernel: usize,
    /// Dilated blocks per repeat (dilations `1, 2, ..., 2^(blocks-1)`).
    pub blocks: usize,
    pub repeats: usize,
    pub speakers: usize,
    pub causal: bool,
    pub use_frontend: bool,
    pub alignment: AdaptAlignment,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        Self {
            enc_kernel: 32,
            enc_stride: 16,
            enc_dim: 512,
            bottleneck: 128,
            hidden: 512,
            tcn_kernel: 3,
            blocks: 8,
            repeats: 3,
            speakers: 2,
            causal: true,
            use_frontend: true,
            alignment: AdaptAlignment::Completed,
        }
    }
}

impl SeparatorConfig {
    pub fn tiny() -> Self {
        Self {
            enc_dim: 64,
            bottleneck: 32,
            hidden: 64,
            blocks: 4,
            repeats: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.enc_stride == 0 || self.enc_kernel < self.enc_stride || self.enc_kernel % self.enc_stride != 0 {
            return bad("separator encoder needs stride >= 1 and a kernel that is a multiple of the stride");
        }
        if self.speakers < 2 {
            return bad("separator needs at least two speakers");
        }
        if !self.causal {
            return bad("only causal separators are implemented");
        }
        if self.enc_dim == 0 || self.bottleneck == 0 || self.hidden == 0 || self.tcn_kernel == 0 || self.blocks == 0 {
            return bad("separator widths, kernel and block count must be positive");
        }
        Ok(())
    }

    pub fn frame_rate(&self, sample_rate: u32) -> f64 {
        sample_rate as f64 / self.enc_stride as f64
    }

    pub fn num_frames(&self, len: usize) -> usize {
        len / self.enc_stride
    }

    pub fn ideal_latency_ms(&self, sample_rate: u32) -> f64 {
        1000.0 * self.enc_stride as f64 / sample_rate as f64
    }
}

/// Cumulative layer norm over `[B, C, T]`: frame `t` is normalized with the
/// mean and variance of all channels over frames `0..=t`.
struct CumLayerNorm {
    gain: Tensor,
    bias: Tensor,
}

impl CumLayerNorm {
    fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gain: ps.param(&format!("{name}.gain"), &[channels, 1], Init::Ones)?,
            bias: ps.param(&format!("{name}.bias"), &[channels, 1], Init::Zeros)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, t) = x.dims3()?;
        let s1 = cumsum(&x.sum_keepdim(1)?, 2)?;
        let s2 = cumsum(&x.sqr()?.sum_keepdim(1)?, 2)?;
        let count: Vec<f64> = (1..=t).map(|i| (i * c) as f64).collect();
        let count = Tensor::from_vec(count, (1, 1, t), x.device())?.to_dtype(x.dtype())?;
        let mean = s1.broadcast_div(&count)?;
        let var = (s2.broadcast_div(&count)? - mean.sqr()?)?.relu()?;
        let norm = x.broadcast_sub(&mean)?.broadcast_div(&(var + 1e-8)?.sqrt()?)?;
        Ok(norm.broadcast_mul(&self.gain)?.broadcast_add(&self.bias)?)
    }
}

struct Prelu {
    slope: Tensor,
}

impl Prelu {
    fn new(ps: &mut ParamStore, name: &str) -> Result<Self> {
        let slope = ps.param(name, &[1], Init::Zeros)?;
        ps.assign(name, &[1], &[0.25])?;
        Ok(Self { slope })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let neg = x.minimum(0.0)?;
        Ok((x.relu()? + neg.broadcast_mul(&self.slope)?)?)
    }
}

fn pointwise(ps: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<CausalConv1d> {
    CausalConv1d::new(
        ps,
        name,
        ConvSpec {
            in_channels: input,
            out_channels: output,
            kernel: 1,
            stride: 1,
            dilation: 1,
            groups: 1,
            left_pad: 0,
            bias: true,
        },
    )
}

struct TcnBlock {
    inp: CausalConv1d,
    act1: Prelu,
    norm1: CumLayerNorm,
    depthwise: CausalConv1d,
    act2: Prelu,
    norm2: CumLayerNorm,
    out: CausalConv1d,
}

impl TcnBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(&self.act1.forward(&self.inp.forward(x)?)?)?;
        let h = self.norm2.forward(&self.act2.forward(&self.depthwise.forward(&h)?)?)?;
        Ok((x + self.out.forward(&h)?)?)
    }
}

pub struct Separator {
    cfg: SeparatorConfig,
    encoder: CausalConv1d,
    adapt: Option<Linear>,
    in_norm: CumLayerNorm,
    bottleneck: CausalConv1d,
    blocks: Vec<TcnBlock>,
    mask_act: Prelu,
    mask_out: CausalConv1d,
    decoder: Linear,
    /// Samples per frontend frame, when a frontend is attached.
    pattern_hop: Option<usize>,
}

/// Tensors produced by one separator pass.
pub struct SeparationTensors {
    /// `[B, speakers, enc_dim, frames]`, in `[0, 1]`.
    pub masks: Tensor,
    /// `[B, speakers, samples]`
    pub estimates: Tensor,
}

/// Separator frame -> row of `[zeros; patterns]` (0 means no pattern yet).
pub fn adapt_indices(pattern_frames: usize, target: usize, ratio: usize, alignment: AdaptAlignment) -> Vec<u32> {
    (0..target)
        .map(|f| match alignment {
            AdaptAlignment::Started => ((f / ratio).min(pattern_frames - 1) + 1) as u32,
            AdaptAlignment::Completed => ((f + 1) / ratio).min(pattern_frames) as u32,
        })
        .collect()
}

/// Overlap-add of `[.., T, K]` frames with hop `stride`. Frame `f` lands on
/// samples `[stride f, stride f + K)`; the result is cut or zero-padded to `len`.
pub fn overlap_add(frames: &Tensor, stride: usize, len: usize) -> Result<Tensor> {
    let dims = frames.dims().to_vec();
    let r = dims.len();
    let (t, k) = (dims[r - 2], dims[r - 1]);
    if stride == 0 || k % stride != 0 {
        return Err(Error::Shape(format!("frame width {k} is not a multiple of hop {stride}")));
    }
    let m = k / stride;
    let mut lead = dims[..r - 2].to_vec();
    let zeros = |n: usize| -> Result<Tensor> {
        let mut shape = lead.clone();
        shape.extend([n, stride]);
        Ok(Tensor::zeros(shape, frames.dtype(), frames.device())?)
    };
    let mut acc: Option<Tensor> = None;
    for i in 0..m {
        let part = frames.narrow(r - 1, i * stride, stride)?;
        let mut pieces = Vec::new();
        if i > 0 {
            pieces.push(zeros(i)?);
        }
        pieces.push(part);
        if m - 1 - i > 0 {
            pieces.push(zeros(m - 1 - i)?);
        }
        let shifted = Tensor::cat(&pieces, r - 2)?;
        acc = Some(match acc {
            None => shifted,
            Some(a) => (a + shifted)?,
        });
    }
    let acc = acc.ok_or_else(|| Error::Shape("empty frame width".into()))?;
    let total = (t + m - 1) * stride;
    lead.push(total);
    let flat = acc.reshape(lead.clone())?;
    if total >= len {
        Ok(flat.narrow(r - 2, 0, len)?)
    } else {
        let mut pad = lead;
        *pad.last_mut().unwrap_or(&mut 0) = len - total;
        Ok(Tensor::cat(&[flat, Tensor::zeros(pad, frames.dtype(), frames.device())?], r - 2)?)
    }
}

impl Separator {
    /// `pattern` is `(model_dim, frontend hop)` when the frontend feeds the separator.
    pub fn new(ps: &mut ParamStore, prefix: &str, cfg: &SeparatorConfig, pattern: Option<(usize, usize)>) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.enc_dim;
        let encoder = CausalConv1d::new(
            ps,
            &format!("{prefix}.encoder"),
            ConvSpec {
                in_channels: 1,
                out_channels: n,
                kernel: cfg.enc_kernel,
                stride: cfg.enc_stride,
                dilation: 1,
                groups: 1,
                left_pad: cfg.enc_kernel - cfg.enc_stride,
                bias: false,
            },
        )?;
        let (adapt, pattern_hop) = match pattern {
            Some((dim, hop)) if cfg.use_frontend => {
                if hop % cfg.enc_stride != 0 {
                    return Err(Error::Config(format!(
                        "frontend hop {hop} is not a multiple of the separator stride {}",
                        cfg.enc_stride
                    )));
                }
                (Some(Linear::new(ps, &format!("{prefix}.adapt"), dim, n, false)?), Some(hop))
            }
            _ => (None, None),
        };
        let in_norm = CumLayerNorm::new(ps, &format!("{prefix}.in_norm"), n)?;
        let bottleneck = pointwise(ps, &format!("{prefix}.bottleneck"), n, cfg.bottleneck)?;
        let mut blocks = Vec::new();
        for rep in 0..cfg.repeats {
            for i in 0..cfg.blocks {
                let p = format!("{prefix}.tcn.{rep}.{i}");
                let dilation = 1 << i;
                blocks.push(TcnBlock {
                    inp: pointwise(ps, &format!("{p}.in"), cfg.bottleneck, cfg.hidden)?,
                    act1: Prelu::new(ps, &format!("{p}.act1"))?,
                    norm1: CumLayerNorm::new(ps, &format!("{p}.norm1"), cfg.hidden)?,
                    depthwise: CausalConv1d::new(
                        ps,
                        &format!("{p}.depthwise"),
                        ConvSpec {
                            in_channels: cfg.hidden,
                            out_channels: cfg.hidden,
                            kernel: cfg.tcn_kernel,
                            stride: 1,
                            dilation,
                            groups: cfg.hidden,
                            left_pad: (cfg.tcn_kernel - 1) * dilation,
                            bias: true,
                        },
                    )?,
                    act2: Prelu::new(ps, &format!("{p}.act2"))?,
                    norm2: CumLayerNorm::new(ps, &format!("{p}.norm2"), cfg.hidden)?,
                    out: pointwise(ps, &format!("{p}.out"), cfg.hidden, cfg.bottleneck)?,
                });
            }
        }
        let mask_act = Prelu::new(ps, &format!("{prefix}.mask_act"))?;
        let mask_out = pointwise(ps, &format!("{prefix}.mask_out"), cfg.bottleneck, cfg.speakers * n)?;
        let decoder = Linear::new(ps, &format!("{prefix}.decoder"), n, cfg.enc_kernel, false)?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            adapt,
            in_norm,
            bottleneck,
            blocks,
            mask_act,
            mask_out,
            decoder,
            pattern_hop,
        })
    }

    pub fn config(&self) -> &SeparatorConfig {
        &self.cfg
    }

    pub fn uses_frontend(&self) -> bool {
        self.adapt.is_some()
    }

    /// `[B, samples] -> [B, enc_dim, frames]`, non-negative.
    pub fn encode(&self, wav: &Tensor) -> Result<Tensor> {
        let (_, len) = wav.dims2()?;
        if len < self.cfg.enc_kernel {
            return Err(Error::TooShort {
                got: len,
                min: self.cfg.enc_kernel,
            });
        }
        Ok(self.encoder.forward(&wav.unsqueeze(1)?)?.relu()?)
    }

    /// Upsamples `[B, T_c, model_dim]` patterns to `target` separator frames
    /// and projects them to `[B, enc_dim, target]`.
    pub fn adapt(&self, patterns: &Tensor, target: usize) -> Result<Tensor> {
        let (adapt, hop) = match (&self.adapt, self.pattern_hop) {
            (Some(a), Some(h)) => (a, h),
            _ => return Err(Error::invalid("separator was built without a frontend")),
        };
        let (b, tc, dm) = patterns.dims3()?;
        if tc == 0 {
            return Err(Error::invalid("no pattern frames to adapt"));
        }
        let ratio = hop / self.cfg.enc_stride;
        let ids = adapt_indices(tc, target, ratio, self.cfg.alignment);
        let ids = Tensor::from_vec(ids, target, patterns.device())?;
        let padded = Tensor::cat(&[&Tensor::zeros((b, 1, dm), patterns.dtype(), patterns.device())?, patterns], 1)?;
        let up = padded.index_select(&ids, 1)?;
        Ok(adapt.forward(&up)?.transpose(1, 2)?.contiguous()?)
    }

    /// `[B, enc_dim, T]` (plus optional adapted patterns) -> masks `[B, S, enc_dim, T]`.
    pub fn masks(&self, e: &Tensor, e_tilde: Option<&Tensor>) -> Result<Tensor> {
        let x = match e_tilde {
            Some(p) => {
                if p.dims() != e.dims() {
                    return Err(Error::Shape(format!("encoder {:?} vs adapted patterns {:?}", e.dims(), p.dims())));
                }
                (e + p)?
            }
            None => e.clone(),
        };
        let (b, n, t) = x.dims3()?;
        let mut h = self.bottleneck.forward(&self.in_norm.forward(&x)?)?;
        for blk in &self.blocks {
            h = blk.forward(&h)?;
        }
        let m = self.mask_out.forward(&self.mask_act.forward(&h)?)?;
        Ok(candle_nn::ops::sigmoid(&m)?.reshape((b, self.cfg.speakers, n, t))?)
    }

    /// Masked encoder frames through the overlap-add decoder: `[B, S, len]`.
    pub fn reconstruct(&self, e: &Tensor, masks: &Tensor, len: usize) -> Result<Tensor> {
        let masked = masks.broadcast_mul(&e.unsqueeze(1)?)?;
        let frames = self.decoder.forward(&masked.transpose(2, 3)?.contiguous()?)?;
        overlap_add(&frames, self.cfg.enc_stride, len)
    }

    /// Full pass on `[B, samples]`; `patterns` are the frontend outputs when attached.
    pub fn forward(&self, wav: &Tensor, patterns: Option<&Tensor>) -> Result<SeparationTensors> {
        let len = wav.dims2()?.1;
        let e = self.encode(wav)?;
        let t = e.dims()[2];
        let e_tilde = match patterns {
            Some(p) if self.uses_frontend() => Some(self.adapt(p, t)?),
            _ => None,
        };
        let masks = self.masks(&e, e_tilde.as_ref())?;
        let estimates = self.reconstruct(&e, &masks, len)?;
        Ok(SeparationTensors { masks, estimates })
    }
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Best assignment for a `[refs][ests]` score matrix: the first permutation
/// (lexicographically) with the highest mean score.
fn best_permutation(scores: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let s = scores.len();
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for p in permutations(s) {
        let mut sum = 0.0;
        for (r, &e) in p.iter().enumerate() {
            sum += scores[r][e];
        }
        let mean = sum / s as f64;
        if mean > best.0 {
            best = (mean, p);
        }
    }
    best
}

/// Mean negative SI-SDR under the best speaker assignment.
/// `permutation[r]` is the estimate matched to reference `r`.
pub fn pit_loss(estimates: &[Waveform], references: &[Waveform]) -> Result<(f64, Vec<usize>)> {
    if estimates.len() != references.len() {
        return Err(Error::invalid(format!(
            "{} estimates for {} references",
            estimates.len(),
            references.len()
        )));
    }
    if references.is_empty() || references.len() > 8 {
        return Err(Error::invalid("PIT supports between 1 and 8 speakers"));
    }
    let scores = references
        .iter()
        .map(|r| {
            estimates
                .iter()
                .map(|e| si_sdr_slices(e.samples(), r.samples()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let (mean, perm) = best_permutation(&scores);
    Ok((-mean, perm))
}

/// Pairwise SI-SDR `[B, refs, ests]` in dB, capped at the metric ceiling.
pub fn pairwise_si_sdr(estimates: &Tensor, references: &Tensor) -> Result<Tensor> {
    let center = |x: &Tensor| -> Result<Tensor> { Ok(x.broadcast_sub(&x.mean_keepdim(D::Minus1)?)?) };
    let e = center(estimates)?.unsqueeze(1)?;
    let s = center(references)?.unsqueeze(2)?;
    let dot = e.broadcast_mul(&s)?.sum_keepdim(D::Minus1)?;
    let ss = s.sqr()?.sum_keepdim(D::Minus1)?;
    let alpha = dot.broadcast_div(&(ss + 1e-12)?)?;
    let target = alpha.broadcast_mul(&s)?;
    let noise = e.broadcast_sub(&target)?;
    let tt = (target.sqr()?.sum(D::Minus1)? + 1e-12)?;
    let nn = (noise.sqr()?.sum(D::Minus1)? + 1e-12)?;
    let db = ((tt / nn)?.log()? * (10.0 / std::f64::consts::LN_10))?;
    Ok(db.clamp(-SDR_CAP_DB, SDR_CAP_DB)?)
}

/// Differentiable PIT objective over `[B, S, L]` tensors: mean over the batch
/// of the negative mean SI-SDR under each item's best assignment.
pub fn pit_loss_tensor(estimates: &Tensor, references: &Tensor) -> Result<(Tensor, Vec<Vec<usize>>)> {
    if estimates.dims() != references.dims() {
        return Err(Error::Shape(format!("estimates {:?} vs references {:?}", estimates.dims(), references.dims())));
    }
    let (b, s, _) = estimates.dims3()?;
    let pair = pairwise_si_sdr(estimates, references)?;
    let values: Vec<Vec<Vec<f64>>> = pair.to_dtype(DType::F64)?.to_vec3()?;
    let mut select = vec![0f64; b * s * s];
    let mut perms = Vec::with_capacity(b);
    for (bi, scores) in values.iter().enumerate() {
        let (_, p) = best_permutation(scores);
        for (r, &e) in p.iter().enumerate() {
            select[(bi * s + r) * s + e] = 1.0;
        }
        perms.push(p);
    }
    let select = Tensor::from_vec(select, (b, s, s), pair.device())?.to_dtype(pair.dtype())?;
    let loss = ((pair * select)?.sum_all()? * (-1.0 / (b * s) as f64))?;
    Ok((loss, perms))
}

/// A frozen frontend loaded on its own.
pub struct FrozenFrontend {
    pub ps: ParamStore,
    pub frontend: Frontend,
}

impl FrozenFrontend {
    pub fn from_model(model: &CspModel) -> Result<Self> {
        let mut ps = ParamStore::new(model.ps.dtype(), 0);
        let frontend = Frontend::new(&mut ps, FRONTEND_PREFIX, &model.cfg.frontend)?;
        let prefix = format!("{FRONTEND_PREFIX}.");
        for (name, dims, data) in model.ps.export(&prefix)? {
            ps.assign(&name, &dims, &data)?;
        }
        Ok(Self { ps, frontend })
    }

    pub fn hash(&self) -> Result<String> {
        self.ps.hash(&format!("{FRONTEND_PREFIX}."))
    }

    /// Evaluation-mode patterns for `[B, samples]`, cut from the graph.
    pub fn patterns(&self, wav: &Tensor) -> Result<Tensor> {
        Ok(self.frontend.patterns_batch(wav, &mut Mode::eval())?.detach())
    }
}

/// Frontend (optional) plus separator, as used for inference and evaluation.
pub struct SeparationPipeline {
    pub cfg: SeparatorConfig,
    pub frontend_cfg: Option<FrontendConfig>,
    pub frontend: Option<FrozenFrontend>,
    pub ps: ParamStore,
    pub separator: Separator,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparatorHeader {
    pub step: u64,
    pub seed: u64,
    pub dtype: String,
    pub separator: SeparatorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frontend: Option<FrontendConfig>,
}

pub struct SeparationOutput {
    pub masks: Tensor,
    pub estimates: Vec<Waveform>,
}

impl SeparationPipeline {
    pub fn new(cfg: &SeparatorConfig, frontend: Option<FrozenFrontend>, dtype: DType, seed: u64) -> Result<Self> {
        let frontend = if cfg.use_frontend { frontend } else { None };
        let mut ps = ParamStore::new(dtype, seed);
        let pattern = frontend
            .as_ref()
            .map(|f| (f.frontend.config().model_dim, f.frontend.config().hop()));
        let separator = Separator::new(&mut ps, SEPARATOR_PREFIX, cfg, pattern)?;
        Ok(Self {
            cfg: cfg.clone(),
            frontend_cfg: frontend.as_ref().map(|f| f.frontend.config().clone()),
            frontend,
            ps,
            separator,
            seed,
        })
    }

    pub fn dtype(&self) -> DType {
        self.ps.dtype()
    }

    /// Minimum algorithmic latency: one frontend hop if attached, else one encoder hop.
    pub fn ideal_latency_ms(&self, sample_rate: u32) -> f64 {
        match &self.frontend_cfg {
            Some(f) => f.ideal_latency_ms(sample_rate).max(self.cfg.ideal_latency_ms(sample_rate)),
            None => self.cfg.ideal_latency_ms(sample_rate),
        }
    }

    pub fn forward_batch(&self, wav: &Tensor) -> Result<SeparationTensors> {
        let patterns = match &self.frontend {
            Some(f) => Some(f.patterns(wav)?),
            None => None,
        };
        self.separator.forward(wav, patterns.as_ref())
    }

    /// Evaluation-mode separation of one mixture. Inputs shorter than the
    /// frontend hop or the encoder kernel are zero-padded and the outputs cut back.
    pub fn separate(&self, mixture: &Waveform) -> Result<SeparationOutput> {
        let len = mixture.len();
        let min = self
            .frontend_cfg
            .as_ref()
            .map_or(0, FrontendConfig::hop)
            .max(self.cfg.enc_kernel);
        let padded = if len < min { mixture.fit_to(min) } else { mixture.clone() };
        let wav = waveform_tensor(&padded, self.dtype())?.unsqueeze(0)?;
        let out = self.forward_batch(&wav)?;
        let est = out.estimates.squeeze(0)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        let estimates = est
            .into_iter()
            .map(|mut s| {
                s.truncate(len);
                Waveform::new(s, mixture.sample_rate())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SeparationOutput {
            masks: out.masks.squeeze(0)?,
            estimates,
        })
    }

    /// Upsampled pattern sequence for one mixture at the separator frame rate.
    pub fn adapt_sequence(&self, mixture: &Waveform) -> Result<FrameSequence> {
        let f = self
            .frontend
            .as_ref()
            .ok_or_else(|| Error::invalid("separator was built without a frontend"))?;
        let wav = waveform_tensor(mixture, self.dtype())?.unsqueeze(0)?;
        let target = self.cfg.num_frames(mixture.len());
        let up = self.separator.adapt(&f.patterns(&wav)?, target)?;
        FrameSequence::new(
            up.squeeze(0)?.t()?.contiguous()?,
            self.cfg.frame_rate(mixture.sample_rate()),
            FrameRole::Pattern,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>, step: u64) -> Result<()> {
        let header = SeparatorHeader {
            step,
            seed: self.seed,
            dtype: dtype_name(self.dtype()).into(),
            separator: self.cfg.clone(),
            frontend: self.frontend_cfg.clone(),
        };
        let mut a = Archive::new(
            SEPARATOR_KIND,
            toml::to_string(&header).map_err(|e| Error::Config(e.to_string()))?,
        );
        let mut arrays = param_arrays(&self.ps, "")?;
        if let Some(f) = &self.frontend {
            arrays.extend(param_arrays(&f.ps, "")?);
        }
        for arr in arrays {
            a.push(arr.name, arr.dims, arr.data)?;
        }
        a.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, SeparatorHeader)> {
        let path = path.as_ref();
        let a = Archive::load(path)?;
        a.expect_kind(SEPARATOR_KIND, path)?;
        let header: SeparatorHeader = toml::from_str(&a.header).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("bad separator header: {e}"),
        })?;
        let dtype = parse_dtype(&header.dtype)?;
        let frontend = match &header.frontend {
            Some(fc) => {
                let mut ps = ParamStore::new(dtype, 0);
                let frontend = Frontend::new(&mut ps, FRONTEND_PREFIX, fc)?;
                load_params(&ps, &a.arrays, &format!("{FRONTEND_PREFIX}."))?;
                Some(FrozenFrontend { ps, frontend })
            }
            None => None,
        };
        let pipe = Self::new(&header.separator, frontend, dtype, header.seed)?;
        load_params(&pipe.ps, &a.arrays, &format!("{SEPARATOR_PREFIX}."))?;
        Ok((pipe, header))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SepTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    /// Crop length in seconds; 0 trains on whole (equal-length) utterances.
    pub crop_s: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for SepTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 2,
            steps: 20_000,
            crop_s: 4.0,
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

pub struct SepTrainOutcome {
    pub pipeline: SeparationPipeline,
    /// PIT loss per step.
    pub trace: Vec<f64>,
    pub frontend_hash_before: Option<String>,
    pub frontend_hash_after: Option<String>,
}

/// Trains the separator (and adaptation layer) with PIT on labeled mixtures.
/// The frontend runs in evaluation mode and receives no updates.
pub fn train_separator(
    frontend: Option<FrozenFrontend>,
    train: &[MixtureExample],
    cfg: &SeparatorConfig,
    tc: &SepTrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<SepTrainOutcome> {
    if train.is_empty() {
        return Err(Error::invalid("separator training needs at least one example"));
    }
    if let Some(bad) = train.iter().find(|e| e.sources.as_ref().map_or(true, |s| s.len() != cfg.speakers)) {
        return Err(Error::Entry {
            id: bad.id.clone(),
            reason: format!("needs {} reference sources", cfg.speakers),
        });
    }
    if tc.batch_size == 0 || !(tc.lr > 0.0) {
        return Err(Error::Config("separator training needs batch_size >= 1 and lr > 0".into()));
    }
    let hash_before = frontend.as_ref().map(FrozenFrontend::hash).transpose()?;
    let pipeline = SeparationPipeline::new(cfg, frontend, DType::F32, tc.seed)?;
    let mut opt = AdamW::new(
        pipeline.ps.vars_with_prefix(""),
        AdamWConfig {
            weight_decay: 0.0,
            clip_norm: tc.grad_clip,
            ..AdamWConfig::default()
        },
    )?;
    let mut writer = log.map(csv::Writer::from_writer);
    if let Some(w) = writer.as_mut() {
        w.write_record(["step", "lr", "pit_loss"]).map_err(csv_err)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x7365_7061_7261);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut trace = Vec::new();
    for step in 1..=tc.steps {
        let mut items = Vec::with_capacity(tc.batch_size);
        while items.len() < tc.batch_size {
            if cursor == order.len() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            items.push(train[order[cursor]].clone());
            cursor += 1;
        }
        let crop_s = if tc.crop_s > 0.0 {
            tc.crop_s
        } else {
            items.iter().map(|e| e.mixture.duration_s()).fold(0.0, f64::max)
        };
        let crops: Vec<MixtureExample> = crop_offsets(&items, crop_s, rng.random())?
            .into_iter()
            .zip(&items)
            .map(|((o, n), ex)| crop_example(ex, o, n))
            .collect::<Result<_>>()?;
        let mixes: Vec<&Waveform> = crops.iter().map(|c| &c.mixture).collect();
        let wav = batch_tensor(&mixes, pipeline.dtype())?;
        let refs: Vec<Tensor> = crops
            .iter()
            .map(|c| {
                let s: Vec<&Waveform> = c.sources.as_ref().map(|v| v.iter().collect()).unwrap_or_default();
                batch_tensor(&s, pipeline.dtype())
            })
            .collect::<Result<_>>()?;
        let refs = Tensor::stack(&refs, 0)?;
        let out = pipeline.forward_batch(&wav)?;
        let (loss, _) = pit_loss_tensor(&out.estimates, &refs)?;
        let value = scalar_f64(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        opt.step(&loss.backward()?, tc.lr)
            .map_err(|_| Error::NonFiniteLoss { step })?;
        if let Some(w) = writer.as_mut() {
            w.write_record([step.to_string(), format!("{:e}", tc.lr), value.to_string()])
                .map_err(csv_err)?;
        }
        trace.push(value);
    }
    if let Some(w) = writer.as_mut() {
        w.flush().map_err(|e| Error::invalid(format!("log: {e}")))?;
    }
    let hash_after = pipeline.frontend.as_ref().map(FrozenFrontend::hash).transpose()?;
    Ok(SepTrainOutcome {
        pipeline,
        trace,
        frontend_hash_before: hash_before,
        frontend_hash_after: hash_after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn adapt_index_rules() {
        let started = adapt_indices(50, 1000, 20, AdaptAlignment::Started);
        for (f, &i) in started.iter().enumerate() {
            assert_eq!(i as usize, f / 20 + 1);
        }
        let done = adapt_indices(50, 1000, 20, AdaptAlignment::Completed);
        assert!(done[..19].iter().all(|&i| i == 0));
        assert_eq!(done[19], 1);
        assert_eq!(done[38], 1);
        assert_eq!(done[39], 2);
        // Trailing frames keep the last pattern.
        let short = adapt_indices(2, 100, 20, AdaptAlignment::Started);
        assert!(short[40..].iter().all(|&i| i == 2));
    }

    #[test]
    fn overlap_add_matches_loop() {
        let (t, k, hop, len) = (5, 4, 2, 11);
        let v: Vec<f64> = (0..t * k).map(|i| i as f64 * 0.5 - 3.0).collect();
        let frames = Tensor::from_vec(v.clone(), (t, k), &Device::Cpu).unwrap();
        let got = overlap_add(&frames, hop, len).unwrap().to_vec1::<f64>().unwrap();
        let mut want = vec![0.0; len];
        for f in 0..t {
            for i in 0..k {
                if f * hop + i < len {
                    want[f * hop + i] += v[f * k + i];
                }
            }
        }
        assert_eq!(got, want);
    }

    #[test]
    fn permutations_are_lexicographic() {
        let p = permutations(3);
        assert_eq!(p.len(), 6);
        assert_eq!(p[0], vec![0, 1, 2]);
        assert_eq!(p[5], vec![2, 1, 0]);
    }
}
