//! Pretraining loop: seeded batching and cropping, AdamW with warmup,
//! per-round validation with patience, best-checkpoint retention and a
//! per-step CSV log.

use std::io::Write;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::data_sim::{crop_example, crop_offsets, MixtureExample};
use crate::error::{Error, Result};
use crate::model::{dtype_name, Checkpoint, CheckpointHeader, CspConfig, CspModel, PretextBatch};
use crate::nn::Mode;
use crate::optim::{lr_schedule, AdamW, AdamWConfig};
use crate::pretext::{kmeans, resample_frames, LossReport, StubTeacher, Teacher, TeacherCentroids, TeacherStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub crop_s: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    /// Steps between validation rounds.
    pub eval_every: u64,
    /// Validation rounds without improvement before stopping.
    pub patience: u64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 0.01,
            warmup_steps: 32000,
            crop_s: 15.6,
            batch_size: 2,
            max_steps: 400_000,
            eval_every: 1000,
            patience: 50,
            grad_clip: 10.0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && self.crop_s > 0.0
            && self.batch_size >= 1
            && self.eval_every >= 1
            && self.patience >= 1
            && self.grad_clip >= 0.0;
        if !ok {
            return Err(Error::Config(
                "pretrain needs lr > 0, weight_decay >= 0, crop_s > 0, batch_size >= 1, eval_every >= 1, patience >= 1"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Source of the non-causal teacher representation.
pub enum TeacherSource {
    Stub(StubTeacher),
    Store(TeacherStore),
}

impl TeacherSource {
    /// Teacher rows for `len` samples of `ex` starting at `offset`, resampled
    /// to `frames` rows.
    pub fn frames_for(&self, ex: &MixtureExample, offset: usize, len: usize, frames: usize) -> Result<Vec<Vec<f64>>> {
        match self {
            Self::Stub(t) => {
                let crop = crop_example(ex, offset, len)?;
                Ok(resample_frames(&t.represent(&crop.mixture)?.rows()?, frames))
            }
            Self::Store(s) => {
                let rate = ex.mixture.sample_rate() as f64;
                s.window(&ex.id, offset as f64 / rate, len as f64 / rate, frames)
            }
        }
    }

    /// Whole-utterance teacher rows.
    pub fn utterance(&self, ex: &MixtureExample) -> Result<Vec<Vec<f64>>> {
        match self {
            Self::Stub(t) => t.represent(&ex.mixture)?.rows(),
            Self::Store(s) => s
                .frames
                .get(&ex.id)
                .cloned()
                .ok_or_else(|| Error::Entry {
                    id: ex.id.clone(),
                    reason: "no teacher frames for this id".into(),
                }),
        }
    }
}

/// K-means over every teacher frame of `examples`. `k` is reduced to the
/// number of available frames when the set is small.
pub fn fit_centroids(examples: &[MixtureExample], teacher: &TeacherSource, k: usize, seed: u64) -> Result<TeacherCentroids> {
    let mut points = Vec::new();
    for ex in examples {
        points.extend(teacher.utterance(ex)?);
    }
    kmeans::kmeans(&points, k.min(points.len()), kmeans::DEFAULT_MAX_ITER, seed)
}

pub struct PretrainOutcome {
    /// State with the lowest validation loss.
    pub best: Checkpoint,
    /// State after the final step.
    pub last: Checkpoint,
    pub trace: Vec<LossReport>,
    /// `(step, validation total)` per round.
    pub validation: Vec<(u64, f64)>,
    pub stopped_early: bool,
}

pub const LOG_HEADER: [&str; 8] = ["step", "lr", "td_nce", "td_div", "bu_nce", "bu_div", "ckd", "total"];

pub(crate) fn batch_tensor(waves: &[&Waveform], dtype: DType) -> Result<Tensor> {
    let len = waves[0].len();
    let flat: Vec<f32> = waves.iter().flat_map(|w| w.samples().iter().copied()).collect();
    Ok(Tensor::from_vec(flat, (waves.len(), len), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

struct Cropped {
    wav: Tensor,
    teacher: Vec<Vec<Vec<f64>>>,
}

fn crop_for_step(
    model: &CspModel,
    items: &[&MixtureExample],
    offsets: &[(usize, usize)],
    teacher: &TeacherSource,
) -> Result<Cropped> {
    let crops: Vec<MixtureExample> = items
        .iter()
        .zip(offsets)
        .map(|(ex, &(o, n))| crop_example(ex, o, n))
        .collect::<Result<_>>()?;
    let waves: Vec<&Waveform> = crops.iter().map(|c| &c.mixture).collect();
    let wav = batch_tensor(&waves, model.ps.dtype())?;
    let frames = model.cfg.frontend.num_frames(waves[0].len());
    let teacher = if model.cfg.loss.gamma > 0.0 {
        items
            .iter()
            .zip(offsets)
            .map(|(ex, &(o, n))| teacher.frames_for(ex, o, n, frames))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok(Cropped { wav, teacher })
}

/// Mean total loss over `examples` in evaluation mode, cropped from the start.
/// Mask plans and negatives use fixed seeds so rounds are comparable.
pub fn validation_loss(
    model: &CspModel,
    examples: &[MixtureExample],
    teacher: &TeacherSource,
    crop_s: f64,
    step: u64,
) -> Result<f64> {
    let mut sum = 0.0;
    for (i, ex) in examples.iter().enumerate() {
        let len = ((crop_s * ex.mixture.sample_rate() as f64).round() as usize).max(1);
        let c = crop_for_step(model, &[ex], &[(0, len)], teacher)?;
        let batch = PretextBatch {
            wav: &c.wav,
            teacher: &c.teacher,
            step,
            rng_seed: 0x5eed_0000 + i as u64,
        };
        let (_, report) = model.pretext_loss(&batch, &mut Mode::eval())?;
        sum += report.total;
    }
    Ok(sum / examples.len() as f64)
}

fn write_row<W: Write>(log: &mut csv::Writer<W>, step: u64, lr: f64, r: &LossReport) -> Result<()> {
    let row = [r.td_nce, r.td_div, r.bu_nce, r.bu_div, r.ckd, r.total];
    let mut rec = vec![step.to_string(), format!("{lr:e}")];
    rec.extend(row.iter().map(|x| x.to_string()));
    log.write_record(&rec).map_err(csv_err)?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}

/// Pretrains a fresh model. `validation` should be disjoint from `train`;
/// when it is empty the training set is scored instead. Every step's report
/// is appended to `log` as CSV.
pub fn pretrain(
    train: &[MixtureExample],
    validation: &[MixtureExample],
    model_cfg: &CspConfig,
    cfg: &PretrainConfig,
    teacher: &TeacherSource,
    centroids: TeacherCentroids,
    log: Option<&mut dyn Write>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("pretraining needs at least one training example"));
    }
    let val_set = if validation.is_empty() { train } else { validation };
    let model = CspModel::new(model_cfg, centroids, DType::F32, cfg.seed)?;
    let params = model.ps.vars_with_prefix("");
    let mut opt = AdamW::new(
        params,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.grad_clip,
            ..AdamWConfig::default()
        },
    )?;
    let mut writer = log.map(csv::Writer::from_writer);
    if let Some(w) = writer.as_mut() {
        w.write_record(LOG_HEADER).map_err(csv_err)?;
    }

    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut trace = Vec::new();
    let mut rounds = Vec::new();
    let header = |step: u64, round: u64, best: Option<f64>| CheckpointHeader {
        step,
        round,
        best_val_loss: best,
        seed: cfg.seed,
        dtype: dtype_name(DType::F32).into(),
        model: model_cfg.clone(),
    };
    let initial = validation_loss(&model, val_set, teacher, cfg.crop_s, 0)?;
    let mut best_val = initial;
    let mut best = Checkpoint::capture(&model, Some(&opt), header(0, 0, Some(initial)))?;
    rounds.push((0, initial));
    let mut stale = 0;
    let mut stopped_early = false;
    let mut step = 0;

    while step < cfg.max_steps {
        step += 1;
        let mut items = Vec::with_capacity(cfg.batch_size);
        while items.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..train.len()).collect();
                order.shuffle(&mut master);
                cursor = 0;
            }
            items.push(&train[order[cursor]]);
            cursor += 1;
        }
        let owned: Vec<MixtureExample> = items.iter().map(|e| (*e).clone()).collect();
        let offsets = crop_offsets(&owned, cfg.crop_s, master.random())?;
        let c = crop_for_step(&model, &items, &offsets, teacher)?;
        let batch = PretextBatch {
            wav: &c.wav,
            teacher: &c.teacher,
            step: step - 1,
            rng_seed: master.random(),
        };
        let mut mode = Mode::train(master.random());
        let (total, report) = model.pretext_loss(&batch, &mut mode)?;
        if !report.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let lr = lr_schedule(step, cfg.lr, cfg.warmup_steps);
        opt.step(&total.backward()?, lr)
            .map_err(|_| Error::NonFiniteLoss { step })?;
        if let Some(w) = writer.as_mut() {
            write_row(w, step, lr, &report)?;
        }
        trace.push(report);

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let v = validation_loss(&model, val_set, teacher, cfg.crop_s, step)?;
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let round = rounds.len() as u64;
            rounds.push((step, v));
            if v < best_val {
                best_val = v;
                stale = 0;
                best = Checkpoint::capture(&model, Some(&opt), header(step, round, Some(v)))?;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    if let Some(w) = writer.as_mut() {
        w.flush().map_err(|e| Error::invalid(format!("log: {e}")))?;
    }
    let last = Checkpoint::capture(&model, Some(&opt), header(step, rounds.len() as u64 - 1, Some(best_val)))?;
    Ok(PretrainOutcome {
        best,
        last,
        trace,
        validation: rounds,
        stopped_early,
    })
}
