mod common;

use candle_core::{Device, Tensor};
use common::*;
use csp_core::nn::{scalar_f64, softmax, Mode};
use csp_core::pretext::TeacherCentroids;
use csp_core::quantizer::{diversity_loss, gumbel_softmax};
use csp_core::separation::pit_loss_tensor;

const OMEGA: f64 = 0.1;
const T: usize = 6;
const D: usize = 4;

fn teacher_inputs(seed: u64) -> (Vec<Vec<Vec<f64>>>, TeacherCentroids) {
    let mut r = rng(seed);
    let row = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> { (0..3).map(|_| rand::Rng::random_range(r, -1.0..1.0)).collect() };
    let frames = vec![(0..T).map(|_| row(&mut r)).collect()];
    let cents = TeacherCentroids::new((0..3).map(|_| row(&mut r)).collect()).unwrap();
    (frames, cents)
}

#[test]
fn td_nce_matches_finite_differences() {
    let toy = toy_heads(D, 4, 5, 3, 1);
    let mut r = rng(2);
    let (c, z) = (random_var(&[1, T, D], &mut r), random_var(&[1, T, D], &mut r));
    let mut vars = vec![c.clone()];
    vars.extend(param_vars(&toy.ps, "pretext.latent_quantizer.codebook"));
    vars.extend(param_vars(&toy.ps, "pretext.latent_quantizer.output_proj"));
    let err = max_fd_error(&vars, || {
        toy.heads
            .td_loss(c.as_tensor(), z.as_tensor(), &[], 1.0, OMEGA, &mut Mode::eval(), 9)
            .unwrap()
            .0
    });
    assert!(err < FD_TOL, "td_nce relative error {err:e}");
}

#[test]
fn bu_nce_matches_finite_differences() {
    let toy = toy_heads(D, 4, 5, 3, 3);
    let mut r = rng(4);
    let (c, z) = (random_var(&[1, T, D], &mut r), random_var(&[1, T, D], &mut r));
    let mut vars = vec![z.clone()];
    vars.extend(param_vars(&toy.ps, "pretext.bu_proj"));
    vars.extend(param_vars(&toy.ps, "pretext.pattern_quantizer.codebook"));
    vars.extend(param_vars(&toy.ps, "pretext.pattern_quantizer.output_proj"));
    let err = max_fd_error(&vars, || {
        toy.heads
            .bu_loss(c.as_tensor(), z.as_tensor(), &[], 1.0, OMEGA, &mut Mode::eval(), 5)
            .unwrap()
            .0
    });
    assert!(err < FD_TOL, "bu_nce relative error {err:e}");
}

#[test]
fn ckd_matches_finite_differences() {
    let toy = toy_heads(D, 4, 5, 3, 5);
    let (frames, cents) = teacher_inputs(6);
    let c = random_var(&[1, T, D], &mut rng(7));
    let mut vars = vec![c.clone()];
    vars.extend(param_vars(&toy.ps, "pretext.ckd_proj"));
    let err = max_fd_error(&vars, || {
        toy.heads
            .ckd_loss(c.as_tensor(), &frames, &cents, &[], OMEGA, 11)
            .unwrap()
    });
    assert!(err < FD_TOL, "ckd relative error {err:e}");
}

#[test]
fn diversity_matches_finite_differences() {
    let x = random_var(&[2, 4], &mut rng(8));
    let err = max_fd_error(&[x.clone()], || diversity_loss(&softmax(x.as_tensor()).unwrap()).unwrap());
    assert!(err < FD_TOL, "diversity relative error {err:e}");

    // Through the quantizer: the usage term depends on the inputs and the logit map.
    let toy = toy_heads(D, 4, 5, 3, 9);
    let mut r = rng(10);
    let (c, z) = (random_var(&[1, T, D], &mut r), random_var(&[1, T, D], &mut r));
    let mut vars = vec![z.clone()];
    vars.extend(param_vars(&toy.ps, "pretext.latent_quantizer.input_proj"));
    let err = max_fd_error(&vars, || {
        toy.heads
            .td_loss(c.as_tensor(), z.as_tensor(), &[], 1.0, OMEGA, &mut Mode::eval(), 1)
            .unwrap()
            .1
    });
    assert!(err < FD_TOL, "td_div relative error {err:e}");
}

#[test]
fn pit_matches_finite_differences() {
    let mut r = rng(12);
    for s in [2, 3] {
        let est = random_var(&[2, s, 16], &mut r);
        let refs = random_var(&[2, s, 16], &mut r);
        let err = max_fd_error(&[est.clone()], || pit_loss_tensor(est.as_tensor(), refs.as_tensor()).unwrap().0);
        assert!(err < FD_TOL, "pit relative error {err:e} with {s} speakers");
    }
}

#[test]
fn straight_through_gradient_follows_soft_sample() {
    // Two entries of width two in a single group.
    let toy = toy_heads(2, 2, 1, 3, 13);
    let q = &toy.heads.latent_quantizer;
    let logits = random_var(&[3, 1, 2], &mut rng(14));
    let w = Tensor::new(&[[0.7f64, -1.3], [0.2, 0.9], [-0.5, 0.4]], &Device::Cpu).unwrap();
    let tau = 0.8;
    let seed = 21;

    let st = q.quantize_logits(logits.as_tensor(), tau, &mut Mode::train(seed)).unwrap();
    let book = q.codebook().squeeze(0).unwrap();
    let rows: Vec<Vec<f64>> = st.codewords.to_vec2().unwrap();
    let entries: Vec<Vec<f64>> = book.to_vec2().unwrap();
    for (row, idx) in rows.iter().zip(&st.indices) {
        assert_eq!(row, &entries[idx[0]], "forward value is an exact codeword");
    }
    let loss = (&st.codewords * &w).unwrap().sum_all().unwrap();
    let grad = loss.backward().unwrap().get(logits.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    assert!(grad.iter().any(|g| g.abs() > 1e-6), "straight-through gradient vanished");

    // Oracle: the same noise draw, relaxed selection in the forward pass too.
    let soft_loss = |l: &Tensor| -> f64 {
        let s = gumbel_softmax(l, tau, Mode::train(seed).rng()).unwrap().soft;
        let cw = s.squeeze(1).unwrap().matmul(&book).unwrap();
        scalar_f64(&(cw * &w).unwrap().sum_all().unwrap()).unwrap()
    };
    let base: Vec<f64> = logits.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
    for i in 0..base.len() {
        let at = |delta: f64| {
            let mut p = base.clone();
            p[i] += delta;
            soft_loss(&Tensor::from_vec(p, (3, 1, 2), &Device::Cpu).unwrap())
        };
        let numeric = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
        let rel = (grad[i] - numeric).abs() / (grad[i].abs() + numeric.abs()).max(1e-6);
        assert!(rel < FD_TOL, "entry {i}: {} vs {numeric}", grad[i]);
    }
}
