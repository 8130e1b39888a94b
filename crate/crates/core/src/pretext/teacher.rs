//! Frozen non-causal teachers for contextual distillation.
//!
//! Any per-frame representation at the frontend frame rate can act as a
//! teacher. [`StubTeacher`] computes log-mel frames smoothed with a
//! symmetric window; [`TeacherStore`] reads precomputed frames keyed by
//! example id.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use candle_core::DType;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::frontend::{FrameRole, FrameSequence};

pub trait Teacher {
    /// Frames per second produced for audio at `sample_rate`.
    fn frame_rate(&self, sample_rate: u32) -> f64;

    fn represent(&self, waveform: &Waveform) -> Result<FrameSequence>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StubTeacherConfig {
    pub hop: usize,
    pub window: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    /// Frames on each side included in the symmetric smoothing window.
    pub context: usize,
}

impl Default for StubTeacherConfig {
    fn default() -> Self {
        Self {
            hop: 320,
            window: 640,
            n_fft: 1024,
            n_mels: 40,
            context: 2,
        }
    }
}

pub struct StubTeacher {
    cfg: StubTeacherConfig,
    fft: Arc<dyn Fft<f64>>,
    hann: Vec<f64>,
    mel: Vec<Vec<(usize, f64)>>,
    mel_rate: u32,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters as sparse (bin, weight) lists.
fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<(usize, f64)>> {
    let nyquist = sample_rate as f64 / 2.0;
    let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyquist));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;
    (0..n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..=n_fft / 2)
                .filter_map(|b| {
                    let f = b as f64 * bin_hz;
                    let w = if f > l && f <= c {
                        (f - l) / (c - l)
                    } else if f > c && f < r {
                        (r - f) / (r - c)
                    } else {
                        0.0
                    };
                    (w > 0.0).then_some((b, w))
                })
                .collect()
        })
        .collect()
}

impl StubTeacher {
    pub fn new(cfg: StubTeacherConfig, sample_rate: u32) -> Result<Self> {
        if cfg.hop == 0 || cfg.window == 0 || cfg.n_fft < cfg.window || cfg.n_mels == 0 {
            return Err(Error::Config(
                "stub teacher needs hop, window, n_mels > 0 and n_fft >= window".into(),
            ));
        }
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        let hann = (0..cfg.window)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / cfg.window as f64).cos())
            .collect();
        let mel = mel_filterbank(cfg.n_mels, cfg.n_fft, sample_rate);
        Ok(Self {
            cfg,
            fft,
            hann,
            mel,
            mel_rate: sample_rate,
        })
    }

    pub fn dim(&self) -> usize {
        self.cfg.n_mels
    }

    fn log_mel(&self, samples: &[f32]) -> Vec<Vec<f64>> {
        let n_frames = (samples.len() / self.cfg.hop).max(1);
        let half = self.cfg.window as isize / 2;
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.n_fft];
        (0..n_frames)
            .map(|t| {
                // Window centred on the middle of frame t.
                let centre = (t * self.cfg.hop + self.cfg.hop / 2) as isize;
                buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
                for (i, w) in self.hann.iter().enumerate() {
                    let j = centre - half + i as isize;
                    if j >= 0 && (j as usize) < samples.len() {
                        buf[i] = Complex::new(samples[j as usize] as f64 * w, 0.0);
                    }
                }
                self.fft.process(&mut buf);
                self.mel
                    .iter()
                    .map(|filt| {
                        let e: f64 = filt.iter().map(|&(b, w)| w * buf[b].norm_sqr()).sum();
                        (e + 1e-6).ln()
                    })
                    .collect()
            })
            .collect()
    }
}

impl Teacher for StubTeacher {
    fn frame_rate(&self, sample_rate: u32) -> f64 {
        sample_rate as f64 / self.cfg.hop as f64
    }

    fn represent(&self, waveform: &Waveform) -> Result<FrameSequence> {
        if waveform.sample_rate() != self.mel_rate {
            return Err(Error::invalid(format!(
                "stub teacher built for {} Hz, got {} Hz",
                self.mel_rate,
                waveform.sample_rate()
            )));
        }
        let raw = self.log_mel(waveform.samples());
        let t = raw.len();
        let c = self.cfg.context;
        let smoothed: Vec<Vec<f64>> = (0..t)
            .map(|i| {
                let lo = i.saturating_sub(c);
                let hi = (i + c).min(t - 1);
                let n = (hi - lo + 1) as f64;
                (0..self.cfg.n_mels)
                    .map(|m| (lo..=hi).map(|j| raw[j][m]).sum::<f64>() / n)
                    .collect()
            })
            .collect();
        FrameSequence::from_rows(
            &smoothed,
            self.frame_rate(waveform.sample_rate()),
            FrameRole::Teacher,
            DType::F64,
        )
    }
}

/// Nearest-neighbour resampling of frame rows to `target` frames.
pub fn resample_frames(rows: &[Vec<f64>], target: usize) -> Vec<Vec<f64>> {
    if rows.is_empty() || target == 0 {
        return Vec::new();
    }
    let n = rows.len();
    (0..target)
        .map(|i| {
            let src = ((i as f64 + 0.5) * n as f64 / target as f64).floor() as usize;
            rows[src.min(n - 1)].clone()
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct TeacherHeader {
    frame_rate: f64,
    dim: usize,
}

/// Precomputed teacher frames keyed by example id.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherStore {
    pub frame_rate: f64,
    pub frames: BTreeMap<String, Vec<Vec<f64>>>,
}

pub const TEACHER_KIND: &str = "teacher-frames";

impl TeacherStore {
    pub fn dim(&self) -> usize {
        self.frames
            .values()
            .next()
            .and_then(|f| f.first())
            .map_or(0, Vec::len)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = TeacherHeader {
            frame_rate: self.frame_rate,
            dim: self.dim(),
        };
        let mut a = Archive::new(
            TEACHER_KIND,
            toml::to_string(&header).map_err(|e| Error::Config(e.to_string()))?,
        );
        for (id, rows) in &self.frames {
            let d = rows.first().map_or(0, Vec::len);
            a.push(id.clone(), vec![rows.len(), d], rows.iter().flatten().copied().collect())?;
        }
        a.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let a = Archive::load(path)?;
        a.expect_kind(TEACHER_KIND, path)?;
        let header: TeacherHeader = toml::from_str(&a.header).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("bad teacher header: {e}"),
        })?;
        let mut frames = BTreeMap::new();
        for arr in a.arrays {
            if arr.dims.len() != 2 || arr.dims[1] != header.dim {
                return Err(Error::Corrupt {
                    path: path.to_path_buf(),
                    reason: format!("teacher array {} has dims {:?}", arr.name, arr.dims),
                });
            }
            let rows = arr.data.chunks(arr.dims[1].max(1)).map(<[f64]>::to_vec).collect();
            frames.insert(arr.name, rows);
        }
        Ok(Self {
            frame_rate: header.frame_rate,
            frames,
        })
    }

    /// Frames for `id` covering `[offset_s, offset_s + duration_s)`, resampled
    /// to `target` frames.
    pub fn window(&self, id: &str, offset_s: f64, duration_s: f64, target: usize) -> Result<Vec<Vec<f64>>> {
        let rows = self
            .frames
            .get(id)
            .ok_or_else(|| Error::Entry {
                id: id.to_string(),
                reason: "no teacher frames for this id".into(),
            })?;
        let start = ((offset_s * self.frame_rate).floor() as usize).min(rows.len().saturating_sub(1));
        let len = ((duration_s * self.frame_rate).round() as usize).max(1);
        let end = (start + len).min(rows.len());
        let mut slice = rows[start..end].to_vec();
        // Pad past the end of the utterance with its last frame.
        while slice.len() < len {
            slice.push(rows[rows.len() - 1].clone());
        }
        Ok(resample_frames(&slice, target))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chirp(n: usize) -> Waveform {
        let s = (0..n)
            .map(|i| {
                let t = i as f64 / 16000.0;
                (0.4 * (2.0 * PI * (200.0 + 900.0 * t) * t).sin()) as f32
            })
            .collect();
        Waveform::new(s, 16000).unwrap()
    }

    #[test]
    fn stub_frames_match_frontend_rate() {
        let teacher = StubTeacher::new(StubTeacherConfig::default(), 16000).unwrap();
        let f = teacher.represent(&chirp(16000)).unwrap();
        assert_eq!(f.len(), 50);
        assert_eq!(f.dim(), 40);
        assert_eq!(teacher.frame_rate(16000), 50.0);
        assert_eq!(f.role, FrameRole::Teacher);
    }

    #[test]
    fn stub_teacher_sees_the_future() {
        let teacher = StubTeacher::new(StubTeacherConfig::default(), 16000).unwrap();
        let x = chirp(16000);
        let mut y = x.samples().to_vec();
        for s in &mut y[12000..] {
            *s = 0.0;
        }
        let a = teacher.represent(&x).unwrap().rows().unwrap();
        let b = teacher.represent(&Waveform::new(y, 16000).unwrap()).unwrap().rows().unwrap();
        // Frame 35 ends at sample 11520 yet changes: the teacher is non-causal.
        assert_ne!(a[35], b[35]);
    }

    #[test]
    fn resample_nearest() {
        let rows: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64]).collect();
        let up = resample_frames(&rows, 8);
        assert_eq!(up.iter().map(|r| r[0]).collect::<Vec<_>>(), vec![0., 0., 1., 1., 2., 2., 3., 3.]);
        assert_eq!(resample_frames(&rows, 4), rows);
    }

    #[test]
    fn store_round_trip_and_window() {
        let dir = tempfile::tempdir().unwrap();
        let mut frames = BTreeMap::new();
        frames.insert("a".to_string(), (0..10).map(|i| vec![i as f64, -(i as f64)]).collect());
        let store = TeacherStore {
            frame_rate: 50.0,
            frames,
        };
        let p = dir.path().join("t.bin");
        store.save(&p).unwrap();
        let back = TeacherStore::load(&p).unwrap();
        assert_eq!(back, store);
        let w = back.window("a", 0.04, 0.1, 5).unwrap();
        assert_eq!(w.iter().map(|r| r[0]).collect::<Vec<_>>(), vec![2., 3., 4., 5., 6.]);
        assert!(back.window("missing", 0.0, 0.1, 5).is_err());
    }
}
