//! Cosine-similarity InfoNCE and within-utterance negative sampling.

use candle_core::{DType, Tensor, D};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frontend::FrameSequence;

/// The positive candidate and `N` distractors for one anchor.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    /// `[D]`
    pub positive: Tensor,
    /// `[N, D]`
    pub negatives: Tensor,
    pub positive_index: usize,
    pub negative_indices: Vec<usize>,
}

impl CandidateSet {
    pub fn num_negatives(&self) -> usize {
        self.negatives.dims()[0]
    }

    /// `[N + 1, D]` with the positive first.
    pub fn stacked(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.positive.unsqueeze(0)?, &self.negatives], 0)?)
    }
}

/// Draws `n` indices from `[0, len)` excluding `positive`; without
/// replacement when `len - 1 >= n`, otherwise with replacement.
pub fn negative_indices(len: usize, positive: usize, n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if len < 2 {
        return Err(Error::invalid("negative sampling needs at least two frames"));
    }
    if positive >= len {
        return Err(Error::invalid(format!("positive index {positive} out of range for {len} frames")));
    }
    let skip = |i: usize| if i >= positive { i + 1 } else { i };
    let pool = len - 1;
    Ok(if pool >= n {
        sample(rng, pool, n).into_iter().map(skip).collect()
    } else {
        (0..n).map(|_| skip(rng.random_range(0..pool))).collect()
    })
}

/// Takes frame `t` of `seq` as the positive and `n` other frames as negatives.
pub fn sample_negatives(seq: &FrameSequence, t: usize, n: usize, rng_seed: u64) -> Result<CandidateSet> {
    let len = seq.len();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let idx = negative_indices(len, t, n, &mut rng)?;
    let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), seq.values.device())?;
    Ok(CandidateSet {
        positive: seq.values.get(t)?,
        negatives: seq.values.index_select(&ids, 0)?,
        positive_index: t,
        negative_indices: idx,
    })
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.affine(1.0, 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Mean InfoNCE over `M` anchors. `anchors` is `[M, D]`; `candidates` is
/// `[M, K, D]` with the positive at index 0 of every row.
pub fn info_nce_batch(anchors: &Tensor, candidates: &Tensor, omega: f64) -> Result<Tensor> {
    info_nce_batch_masked(anchors, candidates, omega, None)
}

/// [`info_nce_batch`] where `excluded[i][j]` drops candidate `j` of row `i`
/// from the denominator. The positive (column 0) is never dropped.
pub fn info_nce_batch_masked(
    anchors: &Tensor,
    candidates: &Tensor,
    omega: f64,
    excluded: Option<&[Vec<bool>]>,
) -> Result<Tensor> {
    let (m, d) = anchors.dims2()?;
    let (m2, _, d2) = candidates.dims3()?;
    if m != m2 || d != d2 {
        return Err(Error::Shape(format!(
            "anchors {:?} vs candidates {:?}",
            anchors.dims(),
            candidates.dims()
        )));
    }
    let a = l2_normalize(anchors)?.unsqueeze(2)?;
    let c = l2_normalize(candidates)?;
    let mut logits = (c.matmul(&a)?.squeeze(2)? / omega)?;
    if let Some(ex) = excluded {
        let k = candidates.dims()[1];
        if ex.len() != m || ex.iter().any(|r| r.len() != k) {
            return Err(Error::Shape(format!("exclusion mask must be {m} x {k}")));
        }
        let bias: Vec<f64> = ex
            .iter()
            .flat_map(|r| r.iter().enumerate().map(|(j, &x)| if x && j > 0 { -1e9 } else { 0.0 }))
            .collect();
        let bias = Tensor::from_vec(bias, (m, k), logits.device())?.to_dtype(logits.dtype())?;
        logits = (logits + bias)?;
    }
    let lse = logits.log_sum_exp(D::Minus1)?;
    let pos = logits.narrow(1, 0, 1)?.squeeze(1)?;
    Ok((lse - pos)?.mean_all()?)
}

/// `-log( e^{psi(a,p)/omega} / sum_{q in {p} + negatives} e^{psi(a,q)/omega} )`
/// with cosine similarity `psi`.
pub fn info_nce(anchor: &Tensor, candidates: &CandidateSet, omega: f64) -> Result<Tensor> {
    if !(omega > 0.0) {
        return Err(Error::invalid(format!("temperature omega must be positive, got {omega}")));
    }
    if candidates.num_negatives() == 0 {
        return Err(Error::invalid("candidate set needs at least one negative"));
    }
    let stacked = candidates.stacked()?;
    let norms = stacked.sqr()?.sum(D::Minus1)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let anchor_norm = anchor.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if anchor_norm == 0.0 || norms.iter().any(|&n| n == 0.0) {
        return Err(Error::invalid("cosine similarity is undefined for zero-norm vectors"));
    }
    info_nce_batch(&anchor.unsqueeze(0)?, &stacked.unsqueeze(0)?, omega)
}
