//! Mono waveforms and RIFF WAV input/output.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// A mono signal. Samples are finite and nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("waveform must contain at least one sample"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    pub fn scaled(&self, gain: f32) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Truncates or right-pads with zeros to exactly `len` samples.
    pub fn fit_to(&self, len: usize) -> Self {
        let mut samples = self.samples.clone();
        samples.resize(len.max(1), 0.0);
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }

    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let wav_err = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let mut reader = WavReader::open(path).map_err(wav_err)?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::invalid(format!(
                "{}: expected mono audio, found {} channels",
                path.display(),
                spec.channels
            )));
        }
        let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
            (SampleFormat::Int, 16) => reader
                .samples::<i16>()
                .map(|s| s.map(|v| v as f32 / 32768.0))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?,
            (SampleFormat::Float, 32) => reader
                .samples::<f32>()
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?,
            (fmt, bits) => {
                return Err(Error::invalid(format!(
                    "{}: unsupported sample format {fmt:?}/{bits} bits",
                    path.display()
                )))
            }
        };
        Self::new(samples, spec.sample_rate)
    }

    /// Writes 32-bit float samples so that stored mixtures stay exactly additive.
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let wav_err = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let spec = WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let mut writer = WavWriter::create(path, spec).map_err(wav_err)?;
        for &s in &self.samples {
            writer.write_sample(s).map_err(wav_err)?;
        }
        writer.finalize().map_err(wav_err)
    }

    pub fn write_wav_i16(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let wav_err = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let spec = WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut writer = WavWriter::create(path, spec).map_err(wav_err)?;
        for &s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer.write_sample(v).map_err(wav_err)?;
        }
        writer.finalize().map_err(wav_err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(Waveform::new(vec![], 16000).is_err());
        assert!(Waveform::new(vec![0.0, f32::NAN], 16000).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
    }

    #[test]
    fn wav_round_trip_float_and_int() {
        let dir = tempfile::tempdir().unwrap();
        let w = Waveform::new(vec![0.0, 0.5, -0.25, 0.125], 16000).unwrap();
        let p = dir.path().join("a.wav");
        w.write_wav(&p).unwrap();
        assert_eq!(Waveform::read_wav(&p).unwrap(), w);

        let p16 = dir.path().join("b.wav");
        w.write_wav_i16(&p16).unwrap();
        let back = Waveform::read_wav(&p16).unwrap();
        for (a, b) in back.samples().iter().zip(w.samples()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn fit_to_pads_right() {
        let w = Waveform::new(vec![1.0, 2.0], 8).unwrap();
        assert_eq!(w.fit_to(4).samples(), &[1.0, 2.0, 0.0, 0.0]);
        assert_eq!(w.fit_to(1).samples(), &[1.0]);
    }
}
