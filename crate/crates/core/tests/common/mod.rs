#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use csp_core::frontend::FrontendConfig;
use csp_core::nn::{scalar_f64, ParamStore};
use csp_core::pretext::{PretextConfig, PretextHeads};
use csp_core::quantizer::QuantizerConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Largest relative error between autograd and central differences over
/// every element of `vars`. `f` must rebuild the loss from the current values.
pub fn max_fd_error(vars: &[Var], f: impl Fn() -> Tensor) -> f64 {
    let loss = f();
    let grads = loss.backward().unwrap();
    let mut worst = 0.0f64;
    for v in vars {
        let dims = v.dims().to_vec();
        let base: Vec<f64> = v.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let analytic: Vec<f64> = match grads.get(v.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; base.len()],
        };
        let set = |vals: &[f64]| v.set(&Tensor::from_slice(vals, dims.as_slice(), &Device::Cpu).unwrap()).unwrap();
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += FD_STEP;
            set(&p);
            let up = scalar_f64(&f()).unwrap();
            p[i] = base[i] - FD_STEP;
            set(&p);
            let down = scalar_f64(&f()).unwrap();
            set(&base);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

pub fn random_var(shape: &[usize], rng: &mut impl Rng) -> Var {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Var::from_tensor(&Tensor::from_vec(v, shape, &Device::Cpu).unwrap()).unwrap()
}

/// Toy sizes: width `d`, `r` entries per codebook, `n` negatives.
pub struct Toy {
    pub ps: ParamStore,
    pub heads: PretextHeads,
    pub frontend: FrontendConfig,
}

pub fn toy_heads(d: usize, r: usize, n: usize, teacher_dim: usize, seed: u64) -> Toy {
    let frontend = FrontendConfig {
        conv_channels: d,
        model_dim: d,
        norm_groups: 1,
        heads: 1,
        pos_groups: 1,
        ..FrontendConfig::tiny()
    };
    let q = QuantizerConfig {
        groups: 1,
        entries: r,
        codeword_dim: d,
    };
    let cfg = PretextConfig {
        latent_quantizer: q.clone(),
        pattern_quantizer: q,
        final_dim: d,
        negatives: n,
        clusters: 3,
        ..PretextConfig::tiny()
    };
    let mut ps = ParamStore::new(DType::F64, seed);
    let heads = PretextHeads::new(&mut ps, "pretext", &frontend, &cfg, teacher_dim).unwrap();
    Toy { ps, heads, frontend }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn param_vars(ps: &ParamStore, prefix: &str) -> Vec<Var> {
    ps.vars_with_prefix(prefix).into_iter().map(|(_, v)| v).collect()
}
