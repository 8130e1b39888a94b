//! Product quantization with Gumbel-softmax selection and a codebook-usage
//! diversity regularizer.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax, Init, Linear, Mode, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerConfig {
    pub groups: usize,
    pub entries: usize,
    /// Width of one concatenated codeword (all groups together).
    pub codeword_dim: usize,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            groups: 2,
            entries: 320,
            codeword_dim: 256,
        }
    }
}

impl QuantizerConfig {
    pub fn tiny() -> Self {
        Self {
            groups: 2,
            entries: 16,
            codeword_dim: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.entries < 2 || self.codeword_dim % self.groups != 0 {
            return Err(Error::Config(format!(
                "quantizer needs groups >= 1, entries >= 2 and codeword_dim divisible by groups (got {}x{}, dim {})",
                self.groups, self.entries, self.codeword_dim
            )));
        }
        Ok(())
    }
}

/// Gumbel-softmax temperature: `max(floor, start * decay^step)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub floor: f64,
    pub decay: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            start: 2.0,
            floor: 0.5,
            decay: 0.999995,
        }
    }
}

impl TemperatureSchedule {
    pub fn at(&self, step: u64) -> f64 {
        (self.start * self.decay.powf(step as f64)).max(self.floor)
    }
}

pub fn anneal_temperature(step: u64) -> f64 {
    TemperatureSchedule::default().at(step)
}

/// A set of `groups` codebooks of `entries` vectors each, with learned maps
/// into selection logits and out of codeword space.
pub struct Quantizer {
    cfg: QuantizerConfig,
    input_proj: Linear,
    codebook: Tensor,
    output_proj: Linear,
}

pub struct QuantizeResult {
    /// Output tokens after the output projection, `[frames, out_dim]`.
    pub tokens: Tensor,
    /// Concatenated selected codewords before projection, `[frames, codeword_dim]`.
    pub codewords: Tensor,
    /// Selected entry per frame and group.
    pub indices: Vec<Vec<usize>>,
    /// Softmax selection probabilities averaged over frames, `[groups, entries]`.
    pub probs: Tensor,
}

impl Quantizer {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cfg: &QuantizerConfig,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let input_proj = Linear::with_init(
            ps,
            &format!("{name}.input_proj"),
            in_dim,
            cfg.groups * cfg.entries,
            Init::Normal(1.0),
            Some(Init::Zeros),
        )?;
        let codebook = ps.param(
            &format!("{name}.codebook"),
            &[cfg.groups, cfg.entries, cfg.codeword_dim / cfg.groups],
            Init::Normal(1.0),
        )?;
        let output_proj = Linear::new(ps, &format!("{name}.output_proj"), cfg.codeword_dim, out_dim, true)?;
        Ok(Self {
            cfg: cfg.clone(),
            input_proj,
            codebook,
            output_proj,
        })
    }

    pub fn config(&self) -> &QuantizerConfig {
        &self.cfg
    }

    pub fn codebook(&self) -> &Tensor {
        &self.codebook
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.dims2()?.0;
        Ok(self
            .input_proj
            .forward(x)?
            .reshape((n, self.cfg.groups, self.cfg.entries))?)
    }

    /// Quantizes `[frames, in_dim]`. In training mode selection is a hard
    /// Gumbel-softmax sample whose backward pass follows the soft sample; in
    /// evaluation mode it is the argmax.
    pub fn quantize(&self, x: &Tensor, temperature: f64, mode: &mut Mode) -> Result<QuantizeResult> {
        let logits = self.logits(x)?;
        self.quantize_logits(&logits, temperature, mode)
    }

    pub fn quantize_logits(&self, logits: &Tensor, temperature: f64, mode: &mut Mode) -> Result<QuantizeResult> {
        if !(temperature > 0.0) {
            return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
        }
        let (n, g, r) = logits.dims3()?;
        let (selection, indices) = if mode.is_train() {
            let sample = gumbel_softmax(logits, temperature, mode.rng())?;
            let hard = one_hot(&sample.indices, g, r, logits.dtype())?;
            let st = (hard - sample.soft.detach())?.add(&sample.soft)?;
            (st, sample.indices)
        } else {
            let idx = argmax_last(logits)?;
            (one_hot(&idx, g, r, logits.dtype())?, idx)
        };
        // [g, n, r] x [g, r, d/g] -> [g, n, d/g] -> [n, d]
        let codewords = selection
            .transpose(0, 1)?
            .contiguous()?
            .matmul(&self.codebook)?
            .transpose(0, 1)?
            .reshape((n, self.cfg.codeword_dim))?;
        let tokens = self.output_proj.forward(&codewords)?;
        let probs = softmax(logits)?.mean(0)?;
        Ok(QuantizeResult {
            tokens,
            codewords,
            indices,
            probs,
        })
    }
}

pub struct GumbelSample {
    /// `softmax((logits + g) / tau)`.
    pub soft: Tensor,
    /// Argmax of the perturbed logits per frame and group.
    pub indices: Vec<Vec<usize>>,
}

/// Draws standard Gumbel noise from `rng` and returns the relaxed sample.
pub fn gumbel_softmax(logits: &Tensor, temperature: f64, rng: &mut impl Rng) -> Result<GumbelSample> {
    let n = logits.elem_count();
    let noise: Vec<f64> = (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(1e-10..1.0);
            -(-u.ln()).ln()
        })
        .collect();
    let noise = Tensor::from_vec(noise, logits.shape(), logits.device())?.to_dtype(logits.dtype())?;
    let perturbed = (logits + noise)?;
    let indices = argmax_last(&perturbed)?;
    let soft = softmax(&(perturbed / temperature)?)?;
    Ok(GumbelSample { soft, indices })
}

fn argmax_last(x: &Tensor) -> Result<Vec<Vec<usize>>> {
    let idx = x.argmax(D::Minus1)?.to_dtype(DType::U32)?.to_vec2::<u32>()?;
    Ok(idx
        .into_iter()
        .map(|row| row.into_iter().map(|i| i as usize).collect())
        .collect())
}

fn one_hot(indices: &[Vec<usize>], groups: usize, entries: usize, dtype: DType) -> Result<Tensor> {
    let mut v = vec![0f32; indices.len() * groups * entries];
    for (i, row) in indices.iter().enumerate() {
        for (g, &r) in row.iter().enumerate() {
            v[(i * groups + g) * entries + r] = 1.0;
        }
    }
    Ok(Tensor::from_vec(v, (indices.len(), groups, entries), &Device::Cpu)?.to_dtype(dtype)?)
}

/// `1 - mean_g H(p_g) / ln R`: 0 for uniform usage, 1 when one entry takes all
/// mass in every group. `probs` is `[groups, entries]`, rows summing to one.
pub fn diversity_loss(probs: &Tensor) -> Result<Tensor> {
    let (_, r) = probs.dims2()?;
    let min = probs.min_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if min < 0.0 {
        return Err(Error::invalid("selection probabilities must be non-negative"));
    }
    diversity_loss_unchecked(probs, r)
}

pub(crate) fn diversity_loss_unchecked(probs: &Tensor, entries: usize) -> Result<Tensor> {
    let plogp = probs.mul(&probs.clamp(1e-30, 1.0)?.log()?)?;
    let entropy = plogp.sum(D::Minus1)?.neg()?;
    let mean_norm = (entropy.mean_all()? / (entries as f64).ln())?;
    Ok(mean_norm.affine(-1.0, 1.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::scalar_f64;

    fn probs(rows: &[&[f64]]) -> Tensor {
        let r = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|x| x.iter().copied()).collect();
        Tensor::from_vec(flat, (rows.len(), r), &Device::Cpu).unwrap()
    }

    #[test]
    fn diversity_extremes_and_toy() {
        let u = probs(&[&[0.25; 4], &[0.25; 4]]);
        assert!(scalar_f64(&diversity_loss(&u).unwrap()).unwrap().abs() < 1e-12);
        let h = probs(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0]]);
        assert!((scalar_f64(&diversity_loss(&h).unwrap()).unwrap() - 1.0).abs() < 1e-12);
        // Hand-computed: H(0.9, 0.1) = 0.325083 nats.
        let h = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((h - 0.32508).abs() < 1e-5);
        let want = 1.0 - h / 2f64.ln();
        let got = scalar_f64(&diversity_loss(&probs(&[&[0.9, 0.1]])).unwrap()).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.53100).abs() < 1e-4);
    }

    #[test]
    fn diversity_rejects_negative() {
        assert!(diversity_loss(&probs(&[&[1.2, -0.2]])).is_err());
    }

    #[test]
    fn temperature_schedule_values() {
        assert_eq!(anneal_temperature(0), 2.0);
        assert_eq!(anneal_temperature(10_000_000), 0.5);
        // ln 2 / -ln(0.999995) = 138629.4...
        let crossing = 2f64.ln() / -(0.999995f64.ln());
        assert!((crossing - 138_629.4).abs() < 1.0);
        assert!((anneal_temperature(138_630) - 1.0).abs() < 1e-3);
        let mut last = f64::INFINITY;
        for s in (0..400_000).step_by(997) {
            let t = anneal_temperature(s);
            assert!(t <= last);
            last = t;
        }
    }

    fn toy_quantizer(entries: usize) -> (ParamStore, Quantizer) {
        let mut ps = ParamStore::new(DType::F64, 3);
        let cfg = QuantizerConfig {
            groups: 2,
            entries,
            codeword_dim: 4,
        };
        let q = Quantizer::new(&mut ps, "q", &cfg, 6, 5).unwrap();
        (ps, q)
    }

    fn frames(n: usize) -> Tensor {
        let v: Vec<f64> = (0..n * 6).map(|i| ((i * 17 % 23) as f64 / 11.0) - 1.0).collect();
        Tensor::from_vec(v, (n, 6), &Device::Cpu).unwrap()
    }

    /// Brute-force membership: every eval-mode codeword row must equal one of
    /// the R^G concatenations of codebook entries.
    #[test]
    fn eval_tokens_are_codebook_combinations() {
        let (_, q) = toy_quantizer(3);
        let res = q.quantize(&frames(7), 1.0, &mut Mode::eval()).unwrap();
        let book = q.codebook().to_vec3::<f64>().unwrap();
        let rows = res.codewords.to_vec2::<f64>().unwrap();
        for (row, idx) in rows.iter().zip(&res.indices) {
            let mut found = false;
            for a in 0..3 {
                for b in 0..3 {
                    let cand: Vec<f64> = book[0][a].iter().chain(&book[1][b]).copied().collect();
                    if cand.iter().zip(row).all(|(x, y)| (x - y).abs() < 1e-12) {
                        found = true;
                        assert_eq!(idx, &vec![a, b]);
                    }
                }
            }
            assert!(found);
        }
        let p = res.probs.to_vec2::<f64>().unwrap();
        for g in p {
            assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn train_mode_is_seeded_and_hard() {
        let (_, q) = toy_quantizer(4);
        let x = frames(5);
        let a = q.quantize(&x, 2.0, &mut Mode::train(9)).unwrap();
        let b = q.quantize(&x, 2.0, &mut Mode::train(9)).unwrap();
        assert_eq!(a.indices, b.indices);
        let book = q.codebook().to_vec3::<f64>().unwrap();
        let rows = a.codewords.to_vec2::<f64>().unwrap();
        for (row, idx) in rows.iter().zip(&a.indices) {
            let want: Vec<f64> = book[0][idx[0]].iter().chain(&book[1][idx[1]]).copied().collect();
            for (x, y) in row.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert!(q.quantize(&x, 0.0, &mut Mode::eval()).is_err());
    }

    #[test]
    fn low_temperature_soft_sample_is_one_hot() {
        use rand::SeedableRng;
        let logits = Tensor::from_vec(vec![0.3f64, -0.2, 1.1, 0.4, 0.0, -0.7], (1, 2, 3), &Device::Cpu).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let s = gumbel_softmax(&logits, 1e-4, &mut rng).unwrap();
        let soft = s.soft.to_vec3::<f64>().unwrap();
        for (g, row) in soft[0].iter().enumerate() {
            for (r, &p) in row.iter().enumerate() {
                let want = if r == s.indices[0][g] { 1.0 } else { 0.0 };
                assert!((p - want).abs() < 1e-6);
            }
        }
    }
}
