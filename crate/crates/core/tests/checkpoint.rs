use std::fs;

use candle_core::{DType, Device, Tensor};
use csp_core::audio::Waveform;
use csp_core::model::{Checkpoint, CheckpointHeader, CspConfig, CspModel};
use csp_core::nn::Mode;
use csp_core::pretext::TeacherCentroids;
use csp_core::separation::{FrozenFrontend, SeparationPipeline, SeparatorConfig};
use csp_core::Error;

fn centroids(dim: usize) -> TeacherCentroids {
    TeacherCentroids::new((0..4).map(|k| (0..dim).map(|i| ((k * 7 + i) % 5) as f64 - 2.0).collect()).collect()).unwrap()
}

fn model(seed: u64) -> CspModel {
    let cfg = CspConfig::tiny();
    CspModel::new(&cfg, centroids(cfg.teacher.n_mels), DType::F32, seed).unwrap()
}

fn header(m: &CspModel) -> CheckpointHeader {
    CheckpointHeader {
        step: 12,
        round: 3,
        best_val_loss: Some(1.5),
        seed: 4,
        dtype: "f32".into(),
        model: m.cfg.clone(),
    }
}

fn wav(n: usize) -> Tensor {
    let v: Vec<f32> = (0..n).map(|i| ((i as f32) * 0.013).sin() * 0.3).collect();
    Tensor::from_vec(v, (1, n), &Device::Cpu).unwrap()
}

#[test]
fn pretrain_checkpoint_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = model(4);
    let ck = Checkpoint::capture(&m, None, header(&m)).unwrap();
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let restored = back.restore().unwrap();
    assert_eq!(restored.frontend_hash().unwrap(), m.frontend_hash().unwrap());
    assert_eq!(back.centroids().unwrap(), m.centroids);
    let x = wav(3200);
    let a = m.frontend.patterns_batch(&x, &mut Mode::eval()).unwrap();
    let b = restored.frontend.patterns_batch(&x, &mut Mode::eval()).unwrap();
    let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
    assert_eq!(diff, 0.0);
}

#[test]
fn modified_and_truncated_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = model(5);
    Checkpoint::capture(&m, None, header(&m)).unwrap().save(&path).unwrap();
    let bytes = fs::read(&path).unwrap();

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    fs::write(&path, &flipped).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Corrupt { .. })));

    fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Corrupt { .. })));

    let mut future = bytes.clone();
    future[8..12].copy_from_slice(&999u32.to_le_bytes());
    fs::write(&path, &future).unwrap();
    match Checkpoint::load(&path) {
        Err(Error::Version { found, .. }) => assert_eq!(found, 999),
        other => panic!("expected a version error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn separator_checkpoint_round_trips_with_frontend() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sep.ckpt");
    let m = model(6);
    let pipe = SeparationPipeline::new(
        &SeparatorConfig::tiny(),
        Some(FrozenFrontend::from_model(&m).unwrap()),
        DType::F32,
        6,
    )
    .unwrap();
    pipe.save(&path, 40).unwrap();
    let (back, h) = SeparationPipeline::load(&path).unwrap();
    assert_eq!(h.step, 40);
    assert_eq!(h.separator, pipe.cfg);
    assert_eq!(back.frontend.as_ref().unwrap().hash().unwrap(), m.frontend_hash().unwrap());
    let mix = Waveform::new(wav(4000).squeeze(0).unwrap().to_vec1().unwrap(), 16000).unwrap();
    let (a, b) = (pipe.separate(&mix).unwrap(), back.separate(&mix).unwrap());
    for (x, y) in a.estimates.iter().zip(&b.estimates) {
        assert_eq!(x.samples(), y.samples());
    }

    // A separator archive is not a pretraining checkpoint.
    assert!(Checkpoint::load(&path).is_err());
}
