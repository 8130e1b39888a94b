//! The pretraining model: frontend, pretext heads and teacher centroids in
//! one parameter store, plus its checkpoint format.

use std::path::Path;

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, NamedArray};
use crate::error::{Error, Result};
use crate::frontend::{sample_mask_plan, Frontend, FrontendConfig, MaskPlan};
use crate::nn::{scalar_f64, Mode, ParamStore};
use crate::optim::AdamW;
use crate::pretext::kmeans::CENTROIDS_ARRAY;
use crate::pretext::{csp_loss, LossParts, LossReport, LossWeights, PretextConfig, PretextHeads, StubTeacherConfig, TeacherCentroids};
use crate::quantizer::TemperatureSchedule;

pub const FRONTEND_PREFIX: &str = "frontend";
pub const PRETEXT_PREFIX: &str = "pretext";
pub const CHECKPOINT_KIND: &str = "csp-pretrain";

/// Everything needed to rebuild a pretraining model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct CspConfig {
    pub frontend: FrontendConfig,
    pub pretext: PretextConfig,
    pub loss: LossWeights,
    pub temperature: TemperatureSchedule,
    pub teacher: StubTeacherConfig,
}

impl CspConfig {
    pub fn tiny() -> Self {
        Self {
            frontend: FrontendConfig::tiny(),
            pretext: PretextConfig::tiny(),
            teacher: StubTeacherConfig {
                n_mels: 16,
                ..StubTeacherConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.pretext.validate()?;
        self.loss.validate()
    }
}

pub struct CspModel {
    pub cfg: CspConfig,
    pub ps: ParamStore,
    pub frontend: Frontend,
    pub heads: PretextHeads,
    pub centroids: TeacherCentroids,
}

/// Batch inputs for one pretext evaluation.
pub struct PretextBatch<'a> {
    /// `[batch, samples]`
    pub wav: &'a Tensor,
    /// Teacher rows per item, already aligned to the frontend frame count.
    /// May be empty when the distillation weight is zero.
    pub teacher: &'a [Vec<Vec<f64>>],
    pub step: u64,
    pub rng_seed: u64,
}

impl CspModel {
    pub fn new(cfg: &CspConfig, centroids: TeacherCentroids, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new(dtype, seed);
        let frontend = Frontend::new(&mut ps, FRONTEND_PREFIX, &cfg.frontend)?;
        let heads = PretextHeads::new(&mut ps, PRETEXT_PREFIX, &cfg.frontend, &cfg.pretext, centroids.dim())?;
        Ok(Self {
            cfg: cfg.clone(),
            ps,
            frontend,
            heads,
            centroids,
        })
    }

    /// SHA-256 over the frontend parameters.
    pub fn frontend_hash(&self) -> Result<String> {
        self.ps.hash(&format!("{FRONTEND_PREFIX}."))
    }

    pub fn mask_plans(&self, batch: usize, frames: usize, rng: &mut impl Rng) -> Vec<MaskPlan> {
        (0..batch)
            .map(|_| sample_mask_plan(frames, self.cfg.frontend.mask_ratio, self.cfg.frontend.mask_span, rng))
            .collect()
    }

    /// Weighted pretext objective and its report. Terms whose weight is zero
    /// are skipped and reported as zero.
    pub fn pretext_loss(&self, batch: &PretextBatch<'_>, mode: &mut Mode) -> Result<(Tensor, LossReport)> {
        let w = self.cfg.loss;
        let z = self.frontend.encode_batch(batch.wav, mode)?;
        let (b, t, _) = z.dims3()?;
        let mut rng = ChaCha8Rng::seed_from_u64(batch.rng_seed);
        let plans = self.mask_plans(b, t, &mut rng);
        let masked = self.frontend.apply_mask_batch(&z, &plans)?;
        let c = self.frontend.contextualize_batch(&masked, mode)?;
        let tau = self.cfg.temperature.at(batch.step);
        let zero = Tensor::zeros((), z.dtype(), z.device())?;
        let mut total = zero.clone();
        let mut parts = LossParts::default();
        if w.alpha > 0.0 {
            let (nce, div) = self.heads.td_loss(&c, &z, &plans, tau, w.omega, mode, rng.random())?;
            total = (total + ((&nce + &div)? * w.alpha)?)?;
            parts.td_nce = scalar_f64(&nce)?;
            parts.td_div = scalar_f64(&div)?;
        }
        if w.beta > 0.0 {
            let (nce, div) = self.heads.bu_loss(&c, &z, &plans, tau, w.omega, mode, rng.random())?;
            total = (total + ((&nce + &div)? * w.beta)?)?;
            parts.bu_nce = scalar_f64(&nce)?;
            parts.bu_div = scalar_f64(&div)?;
        }
        if w.gamma > 0.0 {
            let ckd = self
                .heads
                .ckd_loss(&c, batch.teacher, &self.centroids, &plans, w.omega, rng.random())?;
            total = (total + (&ckd * w.gamma)?)?;
            parts.ckd = scalar_f64(&ckd)?;
        }
        Ok((total, csp_loss(parts, w)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub step: u64,
    pub round: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_val_loss: Option<f64>,
    pub seed: u64,
    pub dtype: String,
    pub model: CspConfig,
}

/// A saved pretraining state: parameters, optimizer moments and counters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub arrays: Vec<NamedArray>,
}

pub(crate) fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F64 => "f64",
        _ => "f32",
    }
}

pub(crate) fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f64" => Ok(DType::F64),
        "f32" => Ok(DType::F32),
        other => Err(Error::Config(format!("unsupported dtype {other}"))),
    }
}

pub(crate) fn param_arrays(ps: &ParamStore, prefix: &str) -> Result<Vec<NamedArray>> {
    Ok(ps
        .export(prefix)?
        .into_iter()
        .map(|(name, dims, data)| NamedArray {
            name: format!("param:{name}"),
            dims,
            data,
        })
        .collect())
}

/// Copies every `param:` array whose name starts with `prefix` into `ps`.
pub(crate) fn load_params(ps: &ParamStore, arrays: &[NamedArray], prefix: &str) -> Result<usize> {
    let mut n = 0;
    for a in arrays {
        if let Some(name) = a.name.strip_prefix("param:") {
            if name.starts_with(prefix) {
                ps.assign(name, &a.dims, &a.data)?;
                n += 1;
            }
        }
    }
    let expected = ps.vars_with_prefix(prefix).len();
    if n != expected {
        return Err(Error::Shape(format!(
            "checkpoint holds {n} of the {expected} parameters under '{prefix}'"
        )));
    }
    Ok(n)
}

impl Checkpoint {
    pub fn capture(model: &CspModel, optimizer: Option<&AdamW>, header: CheckpointHeader) -> Result<Self> {
        let mut arrays = param_arrays(&model.ps, "")?;
        arrays.push(model.centroids.to_array());
        if let Some(opt) = optimizer {
            let mut a = Archive::new("", "");
            opt.export(&mut a)?;
            arrays.extend(a.arrays);
        }
        Ok(Self { header, arrays })
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let header = toml::to_string(&self.header).map_err(|e| Error::Config(e.to_string()))?;
        let mut a = Archive::new(CHECKPOINT_KIND, header);
        for arr in &self.arrays {
            a.push(arr.name.clone(), arr.dims.clone(), arr.data.clone())?;
        }
        Ok(a)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let a = Archive::load(path)?;
        a.expect_kind(CHECKPOINT_KIND, path)?;
        let header: CheckpointHeader = toml::from_str(&a.header).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("bad checkpoint header: {e}"),
        })?;
        Ok(Self {
            header,
            arrays: a.arrays,
        })
    }

    pub fn centroids(&self) -> Result<TeacherCentroids> {
        let a = self
            .arrays
            .iter()
            .find(|a| a.name == CENTROIDS_ARRAY)
            .ok_or_else(|| Error::Shape("checkpoint has no teacher centroids".into()))?;
        TeacherCentroids::from_array(a)
    }

    /// Rebuilds the model with the stored parameters.
    pub fn restore(&self) -> Result<CspModel> {
        let dtype = parse_dtype(&self.header.dtype)?;
        let model = CspModel::new(&self.header.model, self.centroids()?, dtype, self.header.seed)?;
        load_params(&model.ps, &self.arrays, "")?;
        Ok(model)
    }

    /// Loads the stored optimizer moments into `opt`.
    pub fn restore_optimizer(&self, opt: &mut AdamW) -> Result<()> {
        opt.import(&self.arrays)
    }
}
