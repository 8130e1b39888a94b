//! Two-speaker mixture simulation, manifests and fixed-length batching.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Component, Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};

/// A mixture and, for synthetic sets, the gain-scaled sources that sum to it.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureExample {
    pub id: String,
    pub mixture: Waveform,
    pub sources: Option<Vec<Waveform>>,
    pub gains_db: Vec<f64>,
    /// Joint scale applied to mixture and sources when the raw mixture clipped.
    pub peak_scale: Option<f32>,
}

impl MixtureExample {
    pub fn unlabeled(id: impl Into<String>, mixture: Waveform) -> Self {
        Self {
            id: id.into(),
            mixture,
            sources: None,
            gains_db: Vec::new(),
            peak_scale: None,
        }
    }

    pub fn len(&self) -> usize {
        self.mixture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.is_empty()
    }

    /// Largest per-sample deviation between the mixture and the sum of its sources.
    pub fn additivity_error(&self) -> Option<f32> {
        let sources = self.sources.as_ref()?;
        let err = (0..self.mixture.len())
            .map(|j| {
                let sum: f32 = sources.iter().map(|s| s.samples()[j]).sum();
                (self.mixture.samples()[j] - sum).abs()
            })
            .fold(0.0f32, f32::max);
        Some(err)
    }
}

pub fn db_to_gain(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

/// Mixes `sources` after applying per-source dB gains.
///
/// Sources must already share one length and sample rate. If the mixture peak
/// exceeds 1, mixture and sources are rescaled together and the factor is kept
/// in `peak_scale`, so the example stays exactly additive.
pub fn simulate_mixture(
    id: impl Into<String>,
    sources: &[Waveform],
    gains_db: &[f64],
) -> Result<MixtureExample> {
    let first = sources
        .first()
        .ok_or_else(|| Error::invalid("cannot mix an empty source list"))?;
    if gains_db.len() != sources.len() {
        return Err(Error::invalid(format!(
            "{} gains supplied for {} sources",
            gains_db.len(),
            sources.len()
        )));
    }
    let rate = first.sample_rate();
    let len = first.len();
    for (i, s) in sources.iter().enumerate() {
        if s.sample_rate() != rate {
            return Err(Error::invalid(format!(
                "source {i} has sample rate {} Hz, expected {rate} Hz",
                s.sample_rate()
            )));
        }
        if s.len() != len {
            return Err(Error::invalid(format!(
                "source {i} has {} samples, expected {len}",
                s.len()
            )));
        }
    }

    let gained: Vec<Vec<f32>> = sources
        .iter()
        .zip(gains_db)
        .map(|(s, &db)| {
            let g = db_to_gain(db);
            s.samples().iter().map(|&x| (x as f64 * g) as f32).collect()
        })
        .collect();
    let sum = |parts: &[Vec<f32>]| -> Vec<f32> {
        (0..len)
            .map(|j| parts.iter().map(|p| p[j]).sum::<f32>())
            .collect()
    };
    let mut mixture = sum(&gained);
    let peak = mixture.iter().fold(0.0f32, |m, x| m.max(x.abs()));
    let mut parts = gained;
    let mut peak_scale = None;
    if peak > 1.0 {
        let k = 1.0 / peak;
        for p in parts.iter_mut() {
            p.iter_mut().for_each(|x| *x *= k);
        }
        mixture = sum(&parts);
        peak_scale = Some(k);
    }

    Ok(MixtureExample {
        id: id.into(),
        mixture: Waveform::new(mixture, rate)?,
        sources: Some(
            parts
                .into_iter()
                .map(|p| Waveform::new(p, rate))
                .collect::<Result<_>>()?,
        ),
        gains_db: gains_db.to_vec(),
        peak_scale,
    })
}

/// Crops (or right-pads) every example to `round(duration_s * rate)` samples.
///
/// Offsets are uniform over the valid range and drawn in input order from a
/// single seeded stream.
pub fn crop_batch(
    examples: &[MixtureExample],
    duration_s: f64,
    rng_seed: u64,
) -> Result<Vec<MixtureExample>> {
    crop_offsets(examples, duration_s, rng_seed)?
        .into_iter()
        .zip(examples)
        .map(|((offset, target), ex)| crop_example(ex, offset, target))
        .collect()
}

/// The `(offset, length)` in samples that [`crop_batch`] uses for each example.
pub fn crop_offsets(examples: &[MixtureExample], duration_s: f64, rng_seed: u64) -> Result<Vec<(usize, usize)>> {
    if !(duration_s > 0.0) {
        return Err(Error::invalid("crop duration must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok(examples
        .iter()
        .map(|ex| {
            let rate = ex.mixture.sample_rate();
            let target = ((duration_s * rate as f64).round() as usize).max(1);
            let offset = if ex.len() > target {
                rng.random_range(0..=ex.len() - target)
            } else {
                0
            };
            (offset, target)
        })
        .collect())
}

/// `target` samples of every waveform starting at `offset`, zero-padded on the right.
pub fn crop_example(
    ex: &MixtureExample,
    offset: usize,
    target: usize,
) -> Result<MixtureExample> {
    let crop = |w: &Waveform| -> Result<Waveform> {
        let end = (offset + target).min(w.len());
        let mut s = w.samples()[offset.min(end)..end].to_vec();
        s.resize(target, 0.0);
        Waveform::new(s, w.sample_rate())
    };
    Ok(MixtureExample {
        id: ex.id.clone(),
        mixture: crop(&ex.mixture)?,
        sources: ex
            .sources
            .as_ref()
            .map(|ss| ss.iter().map(crop).collect::<Result<Vec<_>>>())
            .transpose()?,
        gains_db: ex.gains_db.clone(),
        peak_scale: ex.peak_scale,
    })
}

/// Uniform dB gain range used when a mixing recipe does not fix its gains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainConfig {
    pub low_db: f64,
    pub high_db: f64,
}

impl Default for GainConfig {
    fn default() -> Self {
        Self {
            low_db: -2.5,
            high_db: 2.5,
        }
    }
}

impl GainConfig {
    pub fn draw(&self, n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n)
            .map(|_| {
                if self.high_db > self.low_db {
                    rng.random_range(self.low_db..self.high_db)
                } else {
                    self.low_db
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(default)]
    pub mixture_path: Option<PathBuf>,
    #[serde(default)]
    pub source_paths: Vec<PathBuf>,
    #[serde(default)]
    pub gains_db: Vec<f64>,
    #[serde(default)]
    pub duration_s: f64,
    #[serde(default = "default_rate")]
    pub sample_rate: u32,
}

fn default_rate() -> u32 {
    crate::audio::DEFAULT_SAMPLE_RATE
}

impl ManifestEntry {
    fn entry_err(&self, reason: impl Into<String>) -> Error {
        Error::Entry {
            id: self.id.clone(),
            reason: reason.into(),
        }
    }

    fn read(&self, path: &Path) -> Result<Waveform> {
        Waveform::read_wav(path).map_err(|e| self.entry_err(e.to_string()))
    }

    /// Loads the mixture (and sources, when listed) from disk.
    pub fn load(&self) -> Result<MixtureExample> {
        let mix_path = self
            .mixture_path
            .as_ref()
            .ok_or_else(|| self.entry_err("entry has no mixture_path"))?;
        let mixture = self.read(mix_path)?;
        let sources = if self.source_paths.is_empty() {
            None
        } else {
            let ss = self
                .source_paths
                .iter()
                .map(|p| self.read(p))
                .collect::<Result<Vec<_>>>()?;
            if ss.iter().any(|s| s.len() != mixture.len()) {
                return Err(self.entry_err("source length differs from mixture length"));
            }
            Some(ss)
        };
        Ok(MixtureExample {
            id: self.id.clone(),
            mixture,
            sources,
            gains_db: self.gains_db.clone(),
            peak_scale: None,
        })
    }

    /// Loads the listed sources of a mixing recipe, right-padded to a common length.
    pub fn load_sources(&self) -> Result<Vec<Waveform>> {
        if self.source_paths.is_empty() {
            return Err(self.entry_err("recipe lists no sources"));
        }
        let ss = self
            .source_paths
            .iter()
            .map(|p| self.read(p))
            .collect::<Result<Vec<_>>>()?;
        let len = ss.iter().map(Waveform::len).max().unwrap_or(1);
        Ok(ss.iter().map(|s| s.fit_to(len)).collect())
    }
}

/// Ordered list of examples; one JSON object per line on disk.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::invalid(format!("duplicate manifest id {}", e.id)));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Relative paths in the file are resolved against the manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut e: ManifestEntry = serde_json::from_str(line).map_err(|err| {
                Error::invalid(format!("{}:{}: {err}", path.display(), lineno + 1))
            })?;
            e.mixture_path = e.mixture_path.map(|p| resolve(base, p));
            e.source_paths = e.source_paths.into_iter().map(|p| resolve(base, p)).collect();
            entries.push(e);
        }
        Self::new(entries)
    }

    /// Serializes with paths written relative to `dir` when they lie beneath it.
    pub fn to_jsonl(&self, dir: &Path) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            let mut e = e.clone();
            e.mixture_path = e.mixture_path.map(|p| relativize(dir, p));
            e.source_paths = e.source_paths.into_iter().map(|p| relativize(dir, p)).collect();
            out.push_str(&serde_json::to_string(&e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dir = path.parent().unwrap_or(Path::new(""));
        let text = self.to_jsonl(dir)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Deterministic split: the trailing `fraction` of entries becomes the validation set.
    pub fn split_validation(&self, fraction: f64) -> (Manifest, Manifest) {
        if self.entries.len() < 2 || fraction <= 0.0 {
            return (self.clone(), Manifest::default());
        }
        let n_val = ((self.entries.len() as f64 * fraction).round() as usize)
            .clamp(1, self.entries.len() - 1);
        let cut = self.entries.len() - n_val;
        (
            Manifest {
                entries: self.entries[..cut].to_vec(),
            },
            Manifest {
                entries: self.entries[cut..].to_vec(),
            },
        )
    }
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn relativize(dir: &Path, p: PathBuf) -> PathBuf {
    let normal = |q: &Path| -> PathBuf {
        q.components()
            .filter(|c| !matches!(c, Component::CurDir))
            .collect()
    };
    let (d, q) = (normal(dir), normal(&p));
    if d.as_os_str().is_empty() {
        return q;
    }
    match q.strip_prefix(&d) {
        Ok(rel) => rel.to_path_buf(),
        Err(_) => p,
    }
}

/// Enumerates `root/mix/*.wav`, attaching `root/s1/`, `root/s2/`, ... when present.
///
/// Entries are sorted by id. When a source directory exists, every mixture
/// must have a same-named file in it.
pub fn build_manifest(root_dir: impl AsRef<Path>) -> Result<Manifest> {
    let root = root_dir.as_ref();
    let root = fs::canonicalize(root).map_err(|e| Error::io(root, e))?;
    let mix_dir = root.join("mix");
    let mut ids: Vec<String> = fs::read_dir(&mix_dir)
        .map_err(|e| Error::io(&mix_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::invalid(format!(
            "no .wav mixtures found under {}",
            mix_dir.display()
        )));
    }

    let mut source_dirs = Vec::new();
    for k in 1.. {
        let d = root.join(format!("s{k}"));
        if !d.is_dir() {
            break;
        }
        source_dirs.push(d);
    }

    let mut entries = Vec::with_capacity(ids.len());
    for id in ids {
        let entry_err = |reason: String| Error::Entry {
            id: id.clone(),
            reason,
        };
        let mixture_path = mix_dir.join(format!("{id}.wav"));
        let spec = hound::WavReader::open(&mixture_path)
            .map_err(|e| entry_err(format!("unreadable mixture: {e}")))?;
        let (rate, frames) = (spec.spec().sample_rate, spec.duration());
        let mut source_paths = Vec::new();
        for d in &source_dirs {
            let p = d.join(format!("{id}.wav"));
            if !p.is_file() {
                return Err(entry_err(format!("missing source file {}", p.display())));
            }
            source_paths.push(p);
        }
        entries.push(ManifestEntry {
            id: id.clone(),
            mixture_path: Some(mixture_path),
            source_paths,
            gains_db: Vec::new(),
            duration_s: frames as f64 / rate as f64,
            sample_rate: rate,
        });
    }
    Manifest::new(entries)
}

/// Voiced, syllabic test signal: a gliding harmonic series under formant-like
/// spectral shaping, gated by a random on/off envelope.
pub fn synth_speech_like(rng: &mut impl Rng, duration_s: f64, sample_rate: u32) -> Result<Waveform> {
    let n = ((duration_s * sample_rate as f64).round() as usize).max(1);
    let sr = sample_rate as f64;
    let f0 = rng.random_range(95.0..260.0);
    let glide_rate = rng.random_range(0.3..2.5);
    let glide_depth = rng.random_range(0.04..0.15);
    let glide_phase = rng.random_range(0.0..2.0 * PI);
    let formants: Vec<(f64, f64)> = (0..3)
        .map(|i| {
            let centre = rng.random_range(300.0..900.0) * (i as f64 + 1.0);
            (centre, rng.random_range(120.0..400.0))
        })
        .collect();

    // Syllable gates.
    let mut envelope = vec![0.0f64; n];
    let mut t = (rng.random_range(0.0..0.15) * sr) as usize;
    while t < n {
        let on = (rng.random_range(0.12..0.32) * sr) as usize;
        let off = (rng.random_range(0.03..0.12) * sr) as usize;
        let level = rng.random_range(0.5..1.0);
        for k in 0..on.min(n - t) {
            envelope[t + k] = level * (PI * k as f64 / on as f64).sin().powi(2);
        }
        t += on + off;
    }

    let max_harm = ((0.45 * sr) / (f0 * (1.0 + glide_depth))).floor().max(1.0) as usize;
    let amps: Vec<f64> = (1..=max_harm.min(40))
        .map(|h| {
            let f = f0 * h as f64;
            let shape: f64 = formants
                .iter()
                .map(|(c, bw)| (-((f - c) / bw).powi(2)).exp())
                .sum();
            (0.15 + shape) / (h as f64).sqrt()
        })
        .collect();

    let mut phase = 0.0f64;
    let mut out = Vec::with_capacity(n);
    for (j, env) in envelope.iter().enumerate() {
        let time = j as f64 / sr;
        let f = f0 * (1.0 + glide_depth * (2.0 * PI * glide_rate * time + glide_phase).sin());
        phase += 2.0 * PI * f / sr;
        let mut v = 0.0;
        for (h, a) in amps.iter().enumerate() {
            v += a * ((h as f64 + 1.0) * phase).sin();
        }
        out.push(v * env);
    }
    let peak = out.iter().fold(1e-9f64, |m, x| m.max(x.abs()));
    Waveform::new(out.iter().map(|x| (0.5 * x / peak) as f32).collect(), sample_rate)
}

/// Generates `count` labeled two-speaker mixtures of synthetic speech-like sources.
pub fn synthetic_corpus(
    count: usize,
    duration_s: f64,
    sample_rate: u32,
    gains: &GainConfig,
    seed: u64,
) -> Result<Vec<MixtureExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let sources = vec![
                synth_speech_like(&mut rng, duration_s, sample_rate)?,
                synth_speech_like(&mut rng, duration_s, sample_rate)?,
            ];
            let gains_db = gains.draw(2, &mut rng);
            simulate_mixture(format!("syn{i:05}"), &sources, &gains_db)
        })
        .collect()
}

/// Mixes every recipe in `recipes`. Recipes without one gain per source draw
/// gains from `gains`, seeded by `seed` and the recipe position.
pub fn simulate_recipes(recipes: &Manifest, gains: &GainConfig, seed: u64) -> Result<Vec<MixtureExample>> {
    recipes
        .entries
        .iter()
        .enumerate()
        .map(|(i, entry)| {
            let sources = entry.load_sources()?;
            let db = if entry.gains_db.len() == sources.len() {
                entry.gains_db.clone()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
                gains.draw(sources.len(), &mut rng)
            };
            simulate_mixture(entry.id.clone(), &sources, &db)
        })
        .collect()
}

/// Writes mixtures into the `mix/`, `s1/`, `s2/` layout and returns their manifest.
pub fn write_corpus(examples: &[MixtureExample], out_dir: &Path) -> Result<Manifest> {
    let mix_dir = out_dir.join("mix");
    fs::create_dir_all(&mix_dir).map_err(|e| Error::io(&mix_dir, e))?;
    let mut entries = Vec::with_capacity(examples.len());
    for ex in examples {
        let mixture_path = mix_dir.join(format!("{}.wav", ex.id));
        ex.mixture.write_wav(&mixture_path)?;
        let mut source_paths = Vec::new();
        for (k, s) in ex.sources.iter().flatten().enumerate() {
            let d = out_dir.join(format!("s{}", k + 1));
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            let p = d.join(format!("{}.wav", ex.id));
            s.write_wav(&p)?;
            source_paths.push(p);
        }
        entries.push(ManifestEntry {
            id: ex.id.clone(),
            mixture_path: Some(mixture_path),
            source_paths,
            gains_db: ex.gains_db.clone(),
            duration_s: ex.mixture.duration_s(),
            sample_rate: ex.mixture.sample_rate(),
        });
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    Manifest::new(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wav(s: &[f32]) -> Waveform {
        Waveform::new(s.to_vec(), 16000).unwrap()
    }

    #[test]
    fn impulses_add() {
        let a = wav(&[1.0, 0.0, 0.0]);
        let ex = simulate_mixture("x", &[a.clone(), a], &[0.0, 0.0]).unwrap();
        // Peak 2 exceeds 1, so everything is rescaled by one half.
        assert_eq!(ex.peak_scale, Some(0.5));
        let k = ex.peak_scale.unwrap();
        assert!((ex.mixture.samples()[0] / k - 2.0).abs() < 1e-6);
        assert!(ex.additivity_error().unwrap() < 1e-6);
    }

    #[test]
    fn single_source_identity() {
        let a = wav(&[0.1, -0.2, 0.3]);
        let ex = simulate_mixture("x", &[a.clone()], &[0.0]).unwrap();
        assert_eq!(ex.mixture, a);
        assert_eq!(ex.peak_scale, None);
    }

    #[test]
    fn gain_matches_elementwise_oracle() {
        let a = wav(&[0.1, -0.3, 0.2, 0.05]);
        let b = wav(&[0.4, 0.1, -0.2, 0.3]);
        let ex = simulate_mixture("x", &[a.clone(), b.clone()], &[0.0, -6.02]).unwrap();
        // Brute-force oracle: sample-by-sample a + 10^(-6.02/20) b.
        let g = 10f64.powf(-6.02 / 20.0);
        for j in 0..4 {
            let want = a.samples()[j] as f64 + g * b.samples()[j] as f64;
            assert!((ex.mixture.samples()[j] as f64 - want).abs() < 1e-6);
            let half = a.samples()[j] as f64 + 0.5 * b.samples()[j] as f64;
            assert!((ex.mixture.samples()[j] as f64 - half).abs() < 2e-4);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(simulate_mixture("x", &[], &[]).is_err());
        let a = wav(&[0.0, 0.1]);
        let b = Waveform::new(vec![0.0, 0.1], 8000).unwrap();
        assert!(simulate_mixture("x", &[a.clone(), b], &[0.0, 0.0]).is_err());
        assert!(simulate_mixture("x", &[a], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn crop_lengths_and_padding() {
        let long = MixtureExample::unlabeled("l", Waveform::zeros(20 * 16000, 16000).unwrap());
        let short = MixtureExample::unlabeled(
            "s",
            Waveform::new(vec![0.5; 16000], 16000).unwrap(),
        );
        let out = crop_batch(&[long, short], 15.6, 3).unwrap();
        assert_eq!(out[0].len(), 249_600);
        assert_eq!(out[1].len(), 249_600);
        assert!(out[1].mixture.samples()[..16000].iter().all(|&x| x == 0.5));
        assert!(out[1].mixture.samples()[16000..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn crop_is_seeded() {
        let samples: Vec<f32> = (0..48000).map(|i| i as f32 / 48000.0).collect();
        let ex = MixtureExample::unlabeled("a", Waveform::new(samples, 16000).unwrap());
        let a = crop_batch(&[ex.clone(), ex.clone()], 1.0, 11).unwrap();
        let b = crop_batch(&[ex.clone(), ex], 1.0, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn relativize_strips_prefix() {
        assert_eq!(
            relativize(Path::new("/a/b"), PathBuf::from("/a/b/mix/x.wav")),
            PathBuf::from("mix/x.wav")
        );
        assert_eq!(
            relativize(Path::new("/a/b"), PathBuf::from("/c/x.wav")),
            PathBuf::from("/c/x.wav")
        );
    }
}
