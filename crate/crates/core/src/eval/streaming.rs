//! Chunked streaming inference and real-time profiling.
//!
//! Each chunk reruns the models over the whole received history and releases
//! only the samples (or pattern frames) that later input can no longer change.
//! Released output is therefore identical to a full-utterance pass.

use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::eval::macs::count_macs;
use crate::nn::Mode;
use crate::separation::{FrozenFrontend, SeparationPipeline};

fn history_tensor(history: &[f32], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_slice(history, (1, history.len()), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Streaming wrapper around a separation pipeline.
pub struct StreamingSeparator<'a> {
    pipeline: &'a SeparationPipeline,
    sample_rate: u32,
    history: Vec<f32>,
    emitted: usize,
}

impl<'a> StreamingSeparator<'a> {
    pub fn new(pipeline: &'a SeparationPipeline, sample_rate: u32) -> Self {
        Self {
            pipeline,
            sample_rate,
            history: Vec::new(),
            emitted: 0,
        }
    }

    /// Samples needed before anything can be released.
    pub fn min_samples(&self) -> usize {
        self.pipeline
            .frontend_cfg
            .as_ref()
            .map_or(0, |f| f.hop())
            .max(self.pipeline.cfg.enc_kernel)
    }

    /// Output samples that are final once `n` input samples have arrived.
    pub fn finalized_len(&self, n: usize) -> usize {
        if n < self.min_samples() {
            return 0;
        }
        let stride = self.pipeline.cfg.enc_stride;
        stride * (n / stride)
    }

    pub fn received(&self) -> usize {
        self.history.len()
    }

    /// Appends `chunk` and returns the newly finalized samples, one vector per speaker.
    pub fn push(&mut self, chunk: &[f32]) -> Result<Vec<Vec<f32>>> {
        self.history.extend_from_slice(chunk);
        let ready = self.finalized_len(self.history.len());
        if ready <= self.emitted {
            return Ok(vec![Vec::new(); self.pipeline.cfg.speakers]);
        }
        let wav = history_tensor(&self.history, self.pipeline.dtype())?;
        let est = self.pipeline.forward_batch(&wav)?.estimates.squeeze(0)?;
        let rows = est
            .narrow(1, self.emitted, ready - self.emitted)?
            .to_dtype(DType::F32)?
            .to_vec2::<f32>()?;
        self.emitted = ready;
        Ok(rows)
    }

    /// Ends the stream and returns everything not yet released.
    pub fn finish(self) -> Result<Vec<Vec<f32>>> {
        let n = self.history.len();
        if n == self.emitted {
            return Ok(vec![Vec::new(); self.pipeline.cfg.speakers]);
        }
        let wav = Waveform::new(self.history, self.sample_rate)?;
        let out = self.pipeline.separate(&wav)?;
        Ok(out
            .estimates
            .iter()
            .map(|e| e.samples()[self.emitted..].to_vec())
            .collect())
    }
}

/// Streaming wrapper that releases frontend pattern frames as they complete.
pub struct StreamingPatterns<'a> {
    frontend: &'a FrozenFrontend,
    history: Vec<f32>,
    emitted: usize,
}

impl<'a> StreamingPatterns<'a> {
    pub fn new(frontend: &'a FrozenFrontend) -> Self {
        Self {
            frontend,
            history: Vec::new(),
            emitted: 0,
        }
    }

    /// Appends `chunk` and returns pattern rows whose input window is now complete.
    pub fn push(&mut self, chunk: &[f32]) -> Result<Vec<Vec<f32>>> {
        self.history.extend_from_slice(chunk);
        let ready = self.frontend.frontend.config().num_frames(self.history.len());
        if ready <= self.emitted {
            return Ok(Vec::new());
        }
        let wav = history_tensor(&self.history, self.frontend.ps.dtype())?;
        let c = self
            .frontend
            .frontend
            .patterns_batch(&wav, &mut Mode::eval())?
            .squeeze(0)?;
        let rows = c
            .narrow(0, self.emitted, ready - self.emitted)?
            .to_dtype(DType::F32)?
            .to_vec2::<f32>()?;
        self.emitted = ready;
        Ok(rows)
    }

    /// Trailing samples shorter than one hop never form a frame, so nothing is left.
    pub fn finish(self) -> usize {
        self.emitted
    }
}

/// Runs `mixture` through the streaming path in chunks of `chunk_samples`.
pub fn stream_separate(
    pipeline: &SeparationPipeline,
    mixture: &Waveform,
    chunk_samples: usize,
) -> Result<Vec<Waveform>> {
    if chunk_samples == 0 {
        return Err(Error::invalid("chunk size must be positive"));
    }
    let mut session = StreamingSeparator::new(pipeline, mixture.sample_rate());
    let mut out = vec![Vec::with_capacity(mixture.len()); pipeline.cfg.speakers];
    for chunk in mixture.samples().chunks(chunk_samples) {
        for (o, part) in out.iter_mut().zip(session.push(chunk)?) {
            o.extend(part);
        }
    }
    for (o, part) in out.iter_mut().zip(session.finish()?) {
        o.extend(part);
    }
    out.into_iter()
        .map(|s| Waveform::new(s, mixture.sample_rate()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub ideal_latency_ms: f64,
    pub macs_g_per_s: f64,
    pub rtf: f64,
    pub measured_latency_ms: f64,
    pub chunk_ms: f64,
    pub hardware: String,
    pub threads: usize,
    pub audio_s: f64,
    pub chunks: usize,
    pub mean_chunk_compute_ms: f64,
    pub max_chunk_compute_ms: f64,
    pub strategy: String,
}

impl ProfileReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// CPU model name (when the platform exposes it) plus architecture and core count.
pub fn hardware_note() -> String {
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{model}; {}; {cores} logical cores", std::env::consts::ARCH)
}

fn worker_threads() -> usize {
    std::env::var("RAYON_NUM_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Feeds `audio` through the pipeline in `chunk_ms` pieces and times each one.
pub fn profile_streaming(pipeline: &SeparationPipeline, chunk_ms: f64, audio: &Waveform) -> Result<ProfileReport> {
    let sr = audio.sample_rate();
    let ideal = pipeline.ideal_latency_ms(sr);
    if !(chunk_ms >= ideal - 1e-9) {
        return Err(Error::ChunkTooSmall { chunk_ms, min_ms: ideal });
    }
    if audio.is_empty() {
        return Err(Error::invalid("cannot profile empty audio"));
    }
    let chunk_samples = ((chunk_ms * sr as f64 / 1000.0).round() as usize).max(1);
    let mut session = StreamingSeparator::new(pipeline, sr);
    let mut times = Vec::new();
    for chunk in audio.samples().chunks(chunk_samples) {
        let t0 = Instant::now();
        session.push(chunk)?;
        times.push(t0.elapsed().as_secs_f64());
    }
    let t0 = Instant::now();
    session.finish()?;
    let tail = t0.elapsed().as_secs_f64();

    let audio_s = audio.len() as f64 / sr as f64;
    let total: f64 = times.iter().sum::<f64>() + tail;
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let max = times.iter().copied().fold(0.0, f64::max);
    let macs = count_macs(pipeline.frontend_cfg.as_ref(), Some(&pipeline.cfg), audio_s, sr);
    Ok(ProfileReport {
        ideal_latency_ms: ideal,
        macs_g_per_s: macs.g_macs_per_s(),
        rtf: total / audio_s,
        measured_latency_ms: chunk_ms + 1000.0 * mean,
        chunk_ms,
        hardware: hardware_note(),
        threads: worker_threads(),
        audio_s,
        chunks: times.len(),
        mean_chunk_compute_ms: 1000.0 * mean,
        max_chunk_compute_ms: 1000.0 * max,
        strategy: "recompute over received history".into(),
    })
}
