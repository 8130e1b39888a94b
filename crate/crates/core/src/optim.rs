//! AdamW with decoupled weight decay, global-norm clipping and the
//! warmup/inverse-square-root learning-rate schedule.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, NamedArray};
use crate::error::{Error, Result};

/// Linear ramp from 0 to `peak` over `warmup` steps, then `peak * sqrt(warmup / step)`.
pub fn lr_schedule(step: u64, peak: f64, warmup: u64) -> f64 {
    if warmup == 0 {
        return peak;
    }
    if step < warmup {
        peak * step as f64 / warmup as f64
    } else {
        peak * (warmup as f64 / step as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
            clip_norm: 10.0,
        }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: u64,
}

impl AdamW {
    pub fn new(params: Vec<(String, Var)>, cfg: AdamWConfig) -> Result<Self> {
        let m = params
            .iter()
            .map(|(_, p)| p.zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            cfg,
            params,
            m,
            v,
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update and returns the global gradient norm before clipping.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<f64> {
        let mut sq = 0.0;
        for (_, p) in &self.params {
            if let Some(g) = grads.get(p.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::invalid("gradient norm is not finite"));
        }
        let scale = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, (_, p)) in self.params.iter().enumerate() {
            let Some(g) = grads.get(p.as_tensor()) else {
                continue;
            };
            let g = (g.detach() * scale)?;
            self.m[i] = ((&self.m[i] * b1)? + (&g * (1.0 - b1))?)?.detach();
            self.v[i] = ((&self.v[i] * b2)? + (g.sqr()? * (1.0 - b2))?)?.detach();
            let mhat = (&self.m[i] / c1)?;
            let vhat = (&self.v[i] / c2)?;
            let update = (mhat / (vhat.sqrt()? + self.cfg.eps)?)?;
            let decayed = (p.as_tensor().detach() * (1.0 - lr * self.cfg.weight_decay))?;
            p.set(&(decayed - (update * lr)?)?)?;
        }
        Ok(norm)
    }

    /// Moment estimates and the step counter as named arrays.
    pub fn export(&self, archive: &mut Archive) -> Result<()> {
        for (i, (name, p)) in self.params.iter().enumerate() {
            let dims = p.dims().to_vec();
            archive.push(format!("adam.m:{name}"), dims.clone(), flat(&self.m[i])?)?;
            archive.push(format!("adam.v:{name}"), dims, flat(&self.v[i])?)?;
        }
        archive.push("adam.steps", vec![1], vec![self.steps as f64])?;
        Ok(())
    }

    pub fn import(&mut self, arrays: &[NamedArray]) -> Result<()> {
        let find = |n: &str| arrays.iter().find(|a| a.name == n);
        for (i, (name, p)) in self.params.iter().enumerate() {
            for (key, slot) in [("adam.m", &mut self.m[i]), ("adam.v", &mut self.v[i])] {
                let a = find(&format!("{key}:{name}"))
                    .ok_or_else(|| Error::Shape(format!("optimizer state missing {key}:{name}")))?;
                if a.dims != p.dims() {
                    return Err(Error::Shape(format!("optimizer state {key}:{name} has dims {:?}", a.dims)));
                }
                *slot = Tensor::from_vec(a.data.clone(), a.dims.clone(), p.device())?.to_dtype(p.dtype())?;
            }
        }
        if let Some(s) = find("adam.steps") {
            self.steps = s.data.first().copied().unwrap_or(0.0) as u64;
        }
        Ok(())
    }
}

fn flat(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1()?)
}
