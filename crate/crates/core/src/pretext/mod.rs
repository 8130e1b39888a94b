//! Self-supervised objectives: autoregressive hybrid prediction (top-down and
//! bottom-up contrastive terms with quantized targets) and contextual
//! knowledge distillation from a frozen non-causal teacher.

pub mod kmeans;
pub mod nce;
pub mod teacher;

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use kmeans::{fit_teacher_centroids, kmeans, TeacherCentroids};
pub use nce::{info_nce, info_nce_batch, info_nce_batch_masked, negative_indices, sample_negatives, CandidateSet};
pub use teacher::{resample_frames, StubTeacher, StubTeacherConfig, Teacher, TeacherStore};

use crate::error::{Error, Result};
use crate::frontend::{FrontendConfig, MaskPlan};
use crate::nn::{Linear, Mode, ParamStore};
use crate::quantizer::{diversity_loss_unchecked, Quantizer, QuantizerConfig};

/// Weights of the combined objective and the InfoNCE temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub omega: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 10.0,
            gamma: 10.0,
            omega: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {w}")));
            }
        }
        if !(self.omega > 0.0) {
            return Err(Error::Config(format!("omega must be positive, got {}", self.omega)));
        }
        Ok(())
    }
}

/// Unweighted loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub td_nce: f64,
    pub td_div: f64,
    pub bu_nce: f64,
    pub bu_div: f64,
    pub ckd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub td_nce: f64,
    pub td_div: f64,
    pub bu_nce: f64,
    pub bu_div: f64,
    pub ckd: f64,
    pub ahp: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.td_nce, self.td_div, self.bu_nce, self.bu_div, self.ckd, self.ahp, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// `ahp = alpha (td_div + td_nce) + beta (bu_div + bu_nce)`, `total = ahp + gamma ckd`.
pub fn csp_loss(parts: LossParts, weights: LossWeights) -> Result<LossReport> {
    weights.validate()?;
    let ahp = weights.alpha * (parts.td_div + parts.td_nce) + weights.beta * (parts.bu_div + parts.bu_nce);
    let total = ahp + weights.gamma * parts.ckd;
    Ok(LossReport {
        td_nce: parts.td_nce,
        td_div: parts.td_div,
        bu_nce: parts.bu_nce,
        bu_div: parts.bu_div,
        ckd: parts.ckd,
        ahp,
        total,
        weights,
    })
}

/// Where distillation negatives come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CkdNegatives {
    /// Centroids assigned to other frames of the same utterance whose
    /// assignment differs from the positive one, when any exist.
    #[default]
    OtherFrames,
    /// Centroids other than the positive one.
    OtherCentroids,
}

/// Which time steps contribute contrastive terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossPositions {
    #[default]
    AllValid,
    /// Only steps whose target frame was masked. Falls back to all valid
    /// steps when nothing is masked.
    MaskedOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretextConfig {
    pub latent_quantizer: QuantizerConfig,
    pub pattern_quantizer: QuantizerConfig,
    /// Width of the space where bottom-up anchors meet pattern tokens.
    pub final_dim: usize,
    pub negatives: usize,
    pub clusters: usize,
    pub ckd_negatives: CkdNegatives,
    pub positions: LossPositions,
}

impl Default for PretextConfig {
    fn default() -> Self {
        Self {
            latent_quantizer: QuantizerConfig::default(),
            pattern_quantizer: QuantizerConfig::default(),
            final_dim: 256,
            negatives: 100,
            clusters: 100,
            ckd_negatives: CkdNegatives::OtherFrames,
            positions: LossPositions::AllValid,
        }
    }
}

impl PretextConfig {
    pub fn tiny() -> Self {
        Self {
            latent_quantizer: QuantizerConfig::tiny(),
            pattern_quantizer: QuantizerConfig::tiny(),
            final_dim: 16,
            negatives: 20,
            clusters: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.latent_quantizer.validate()?;
        self.pattern_quantizer.validate()?;
        if self.final_dim == 0 || self.negatives == 0 || self.clusters < 2 {
            return Err(Error::Config(
                "pretext needs final_dim >= 1, negatives >= 1 and clusters >= 2".into(),
            ));
        }
        Ok(())
    }
}

/// The trainable pieces used only during pretraining.
pub struct PretextHeads {
    cfg: PretextConfig,
    /// Maps latent frames to tokens in pattern space.
    pub latent_quantizer: Quantizer,
    /// Maps pattern frames to tokens in the shared final space.
    pub pattern_quantizer: Quantizer,
    pub bu_proj: Linear,
    pub ckd_proj: Linear,
}

/// Anchor rows, candidate rows (`N + 1` per anchor, positive first).
struct Pairs {
    anchors: Vec<u32>,
    candidates: Vec<u32>,
}

impl Pairs {
    fn new() -> Self {
        Self {
            anchors: Vec::new(),
            candidates: Vec::new(),
        }
    }

    fn push(&mut self, anchor: usize, positive: usize, negatives: impl IntoIterator<Item = usize>) {
        self.anchors.push(anchor as u32);
        self.candidates.push(positive as u32);
        self.candidates.extend(negatives.into_iter().map(|i| i as u32));
    }

    /// With `keys`, negatives whose key equals the positive's are left out of
    /// the denominator, since they are the same vector as the positive.
    fn loss<K: PartialEq>(&self, anchors: &Tensor, candidates: &Tensor, omega: f64, keys: Option<&[K]>) -> Result<Tensor> {
        let m = self.anchors.len();
        let k = self.candidates.len() / m;
        let d = candidates.dims()[1];
        let a_ids = Tensor::from_slice(&self.anchors, m, anchors.device())?;
        let c_ids = Tensor::from_slice(&self.candidates, m * k, candidates.device())?;
        let a = anchors.index_select(&a_ids, 0)?;
        let c = candidates.index_select(&c_ids, 0)?.reshape((m, k, d))?;
        let Some(keys) = keys else {
            return info_nce_batch(&a, &c, omega);
        };
        let excluded: Vec<Vec<bool>> = self
            .candidates
            .chunks(k)
            .map(|row| {
                let pos = &keys[row[0] as usize];
                row.iter().map(|&j| keys[j as usize] == *pos).collect()
            })
            .collect();
        info_nce_batch_masked(&a, &c, omega, Some(&excluded))
    }
}

/// `n` items of `pool`, without replacement when the pool is large enough.
fn draw(pool: &[usize], n: usize, rng: &mut impl Rng) -> Vec<usize> {
    if pool.len() >= n {
        rand::seq::index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

fn positions(
    policy: LossPositions,
    plans: &[MaskPlan],
    b: usize,
    range: std::ops::Range<usize>,
    target_offset: usize,
) -> Vec<usize> {
    let all: Vec<usize> = range.collect();
    match (policy, plans.get(b)) {
        (LossPositions::MaskedOnly, Some(plan)) => {
            let masked: Vec<usize> = all
                .iter()
                .copied()
                .filter(|&t| plan.is_masked(t + target_offset))
                .collect();
            if masked.is_empty() {
                all
            } else {
                masked
            }
        }
        _ => all,
    }
}

fn check_pair(c: &Tensor, z: &Tensor) -> Result<(usize, usize)> {
    let (b, t, _) = c.dims3()?;
    let (b2, t2, _) = z.dims3()?;
    if b != b2 || t != t2 {
        return Err(Error::Shape(format!("patterns {:?} vs latents {:?}", c.dims(), z.dims())));
    }
    if t < 2 {
        return Err(Error::invalid(format!("contrastive prediction needs T >= 2, got {t}")));
    }
    Ok((b, t))
}

impl PretextHeads {
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        frontend: &FrontendConfig,
        cfg: &PretextConfig,
        teacher_dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let latent_quantizer = Quantizer::new(
            ps,
            &format!("{prefix}.latent_quantizer"),
            &cfg.latent_quantizer,
            frontend.conv_channels,
            frontend.model_dim,
        )?;
        let pattern_quantizer = Quantizer::new(
            ps,
            &format!("{prefix}.pattern_quantizer"),
            &cfg.pattern_quantizer,
            frontend.model_dim,
            cfg.final_dim,
        )?;
        let bu_proj = Linear::new(ps, &format!("{prefix}.bu_proj"), frontend.conv_channels, cfg.final_dim, true)?;
        let ckd_proj = Linear::new(ps, &format!("{prefix}.ckd_proj"), teacher_dim.max(1), frontend.model_dim, true)?;
        Ok(Self {
            cfg: cfg.clone(),
            latent_quantizer,
            pattern_quantizer,
            bu_proj,
            ckd_proj,
        })
    }

    pub fn config(&self) -> &PretextConfig {
        &self.cfg
    }

    /// Top-down term: pattern `c_t` picks the latent token `u_{t+1}` out of
    /// tokens at other steps. `c` is `[B, T, model_dim]`, `z` is the unmasked
    /// latent sequence `[B, T, conv_channels]`. Returns `(nce, diversity)`.
    pub fn td_loss(
        &self,
        c: &Tensor,
        z: &Tensor,
        plans: &[MaskPlan],
        temperature: f64,
        omega: f64,
        mode: &mut Mode,
        rng_seed: u64,
    ) -> Result<(Tensor, Tensor)> {
        let (b, t) = check_pair(c, z)?;
        let q = self
            .latent_quantizer
            .quantize(&z.reshape((b * t, z.dims()[2]))?, temperature, mode)?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut pairs = Pairs::new();
        for bi in 0..b {
            for s in positions(self.cfg.positions, plans, bi, 0..t - 1, 1) {
                let negs = negative_indices(t, s + 1, self.cfg.negatives, &mut rng)?;
                pairs.push(bi * t + s, bi * t + s + 1, negs.into_iter().map(|j| bi * t + j));
            }
        }
        let anchors = c.reshape((b * t, c.dims()[2]))?;
        let nce = pairs.loss(&anchors, &q.tokens, omega, Some(&q.indices))?;
        let div = diversity_loss_unchecked(&q.probs, self.cfg.latent_quantizer.entries)?;
        Ok((nce, div))
    }

    /// Bottom-up term: the projected future latent `z_{t+1}` recognizes the
    /// pattern token `v_t` among tokens at other steps.
    pub fn bu_loss(
        &self,
        c: &Tensor,
        z: &Tensor,
        plans: &[MaskPlan],
        temperature: f64,
        omega: f64,
        mode: &mut Mode,
        rng_seed: u64,
    ) -> Result<(Tensor, Tensor)> {
        let (b, t) = check_pair(c, z)?;
        let q = self
            .pattern_quantizer
            .quantize(&c.reshape((b * t, c.dims()[2]))?, temperature, mode)?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut pairs = Pairs::new();
        for bi in 0..b {
            for s in positions(self.cfg.positions, plans, bi, 0..t - 1, 1) {
                let negs = negative_indices(t, s, self.cfg.negatives, &mut rng)?;
                pairs.push(bi * t + s + 1, bi * t + s, negs.into_iter().map(|j| bi * t + j));
            }
        }
        let anchors = self.bu_proj.forward(&z.reshape((b * t, z.dims()[2]))?)?;
        let nce = pairs.loss(&anchors, &q.tokens, omega, Some(&q.indices))?;
        let div = diversity_loss_unchecked(&q.probs, self.cfg.pattern_quantizer.entries)?;
        Ok((nce, div))
    }

    /// Distillation term: `c_t` picks the projected centroid assigned to
    /// teacher frame `t`. `teacher` holds one `T x D_teacher` row list per
    /// batch item, time-aligned with `c`.
    pub fn ckd_loss(
        &self,
        c: &Tensor,
        teacher: &[Vec<Vec<f64>>],
        centroids: &TeacherCentroids,
        plans: &[MaskPlan],
        omega: f64,
        rng_seed: u64,
    ) -> Result<Tensor> {
        let (b, t, d) = c.dims3()?;
        if teacher.len() != b {
            return Err(Error::Shape(format!("{} teacher sequences for batch of {b}", teacher.len())));
        }
        if let Some(bad) = teacher.iter().find(|f| f.len() != t) {
            return Err(Error::Shape(format!(
                "teacher has {} frames but patterns have {t}; resample before distilling",
                bad.len()
            )));
        }
        let k = centroids.k();
        let flat: Vec<f64> = centroids.centroids.iter().flatten().copied().collect();
        let table = Tensor::from_vec(flat, (k, centroids.dim()), &Device::Cpu)?.to_dtype(c.dtype())?;
        let projected = self.ckd_proj.forward(&table)?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut pairs = Pairs::new();
        for (bi, frames) in teacher.iter().enumerate() {
            let assigned = centroids.assign_all(frames);
            for s in positions(self.cfg.positions, plans, bi, 0..t, 0) {
                let negs: Vec<usize> = match self.cfg.ckd_negatives {
                    CkdNegatives::OtherFrames => {
                        let pool: Vec<usize> = (0..t).filter(|&j| assigned[j] != assigned[s]).collect();
                        if pool.is_empty() {
                            negative_indices(t, s, self.cfg.negatives, &mut rng)?
                                .into_iter()
                                .map(|j| assigned[j])
                                .collect()
                        } else {
                            draw(&pool, self.cfg.negatives, &mut rng)
                                .into_iter()
                                .map(|j| assigned[j])
                                .collect()
                        }
                    }
                    CkdNegatives::OtherCentroids => negative_indices(k, assigned[s], self.cfg.negatives, &mut rng)?,
                };
                pairs.push(bi * t + s, assigned[s], negs);
            }
        }
        pairs.loss::<usize>(&c.reshape((b * t, d))?, &projected, omega, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_identities_hold_exactly() {
        let parts = LossParts {
            td_nce: 3.1,
            td_div: 0.4,
            bu_nce: 2.7,
            bu_div: 0.2,
            ckd: 4.4,
        };
        let w = LossWeights::default();
        let r = csp_loss(parts, w).unwrap();
        assert_eq!(r.ahp, w.alpha * (r.td_div + r.td_nce) + w.beta * (r.bu_div + r.bu_nce));
        assert_eq!(r.total, r.ahp + w.gamma * r.ckd);
        let r0 = csp_loss(parts, LossWeights { gamma: 0.0, ..w }).unwrap();
        assert_eq!(r0.total, r0.ahp);
        let rb = csp_loss(parts, LossWeights { beta: 0.0, ..w }).unwrap();
        assert_eq!(rb.ahp, parts.td_div + parts.td_nce);
        assert!(csp_loss(parts, LossWeights { alpha: -1.0, ..w }).is_err());
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.alpha, w.beta, w.gamma, w.omega), (1.0, 10.0, 10.0, 0.1));
    }
}
