//! Scale-invariant and plain SDR, per-utterance metric rows, CSV output and
//! the SI-SDRi histogram.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::data_sim::{ManifestEntry, MixtureExample};
use crate::error::{Error, Result};

/// Both SDR variants saturate at this magnitude.
pub const SDR_CAP_DB: f64 = 60.0;

fn check_pair(estimate: &[f32], reference: &[f32]) -> Result<()> {
    if estimate.len() != reference.len() {
        return Err(Error::invalid(format!(
            "estimate has {} samples, reference has {}",
            estimate.len(),
            reference.len()
        )));
    }
    Ok(())
}

fn ratio_db(signal: f64, noise: f64) -> f64 {
    if signal == 0.0 {
        return -SDR_CAP_DB;
    }
    if noise == 0.0 {
        return SDR_CAP_DB;
    }
    (10.0 * (signal / noise).log10()).clamp(-SDR_CAP_DB, SDR_CAP_DB)
}

fn zero_mean(x: &[f32]) -> Vec<f64> {
    let m = x.iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64;
    x.iter().map(|&v| v as f64 - m).collect()
}

/// SI-SDR in dB on raw slices, clamped to `[-60, 60]`.
pub fn si_sdr_slices(estimate: &[f32], reference: &[f32]) -> Result<f64> {
    check_pair(estimate, reference)?;
    let s = zero_mean(reference);
    let e = zero_mean(estimate);
    let ss: f64 = s.iter().map(|v| v * v).sum();
    if ss == 0.0 {
        return Err(Error::invalid("SI-SDR is undefined for a zero reference"));
    }
    let alpha = e.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / ss;
    let (mut target, mut noise) = (0.0, 0.0);
    for (a, b) in e.iter().zip(&s) {
        let t = alpha * b;
        target += t * t;
        noise += (a - t) * (a - t);
    }
    Ok(ratio_db(target, noise))
}

pub fn si_sdr(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    si_sdr_slices(estimate.samples(), reference.samples())
}

/// Plain SDR `10 log10(|s|^2 / |s_hat - s|^2)` without a distortion filter.
pub fn sdr(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    let (e, s) = (estimate.samples(), reference.samples());
    check_pair(e, s)?;
    let ss: f64 = s.iter().map(|&v| (v as f64).powi(2)).sum();
    if ss == 0.0 {
        return Err(Error::invalid("SDR is undefined for a zero reference"));
    }
    let nn: f64 = e.iter().zip(s).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    Ok(ratio_db(ss, nn))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    /// Mean over speakers of the separated SI-SDR.
    pub si_sdr_db: f64,
    pub si_sdri_db: f64,
    pub sdri_db: f64,
    /// `permutation[r]` is the estimate matched to reference `r`.
    pub permutation: Vec<usize>,
}

/// Scores one utterance: estimates are aligned to references by the
/// permutation with the best mean SI-SDR, and improvements are measured
/// against the unprocessed mixture.
pub fn score_utterance(
    id: &str,
    mixture: &Waveform,
    estimates: &[Waveform],
    references: &[Waveform],
) -> Result<MetricRow> {
    let (_, permutation) = crate::separation::pit_loss(estimates, references)?;
    let s = references.len() as f64;
    let (mut si, mut si_mix, mut sd, mut sd_mix) = (0.0, 0.0, 0.0, 0.0);
    for (r, reference) in references.iter().enumerate() {
        let est = &estimates[permutation[r]];
        si += si_sdr(est, reference)?;
        si_mix += si_sdr(mixture, reference)?;
        sd += sdr(est, reference)?;
        sd_mix += sdr(mixture, reference)?;
    }
    Ok(MetricRow {
        id: id.to_string(),
        si_sdr_db: si / s,
        si_sdri_db: (si - si_mix) / s,
        sdri_db: (sd - sd_mix) / s,
        permutation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub rows: usize,
    pub mean_si_sdri_db: f64,
    pub mean_sdri_db: f64,
}

pub fn summarize(rows: &[MetricRow]) -> MetricSummary {
    let n = rows.len();
    let mean = |f: fn(&MetricRow) -> f64| {
        if n == 0 {
            0.0
        } else {
            rows.iter().map(f).sum::<f64>() / n as f64
        }
    };
    MetricSummary {
        rows: n,
        mean_si_sdri_db: mean(|r| r.si_sdri_db),
        mean_sdri_db: mean(|r| r.sdri_db),
    }
}

/// Scored rows, per-entry failures and the summary over scored rows only.
#[derive(Debug, Clone, PartialEq)]
pub struct SetReport {
    pub rows: Vec<MetricRow>,
    /// `(id, reason)` for entries that could not be scored.
    pub failures: Vec<(String, String)>,
    pub summary: MetricSummary,
}

fn score_example<F>(ex: &MixtureExample, separate: &mut F) -> Result<MetricRow>
where
    F: FnMut(&Waveform) -> Result<Vec<Waveform>>,
{
    let refs = ex.sources.as_ref().ok_or_else(|| Error::Entry {
        id: ex.id.clone(),
        reason: "no reference sources".into(),
    })?;
    let est = separate(&ex.mixture)?;
    if est.len() != refs.len() {
        return Err(Error::Entry {
            id: ex.id.clone(),
            reason: format!("{} estimates for {} references", est.len(), refs.len()),
        });
    }
    score_utterance(&ex.id, &ex.mixture, &est, refs)
}

/// Separates and scores each example; failures are collected per example.
pub fn evaluate_examples<F>(examples: &[MixtureExample], mut separate: F) -> SetReport
where
    F: FnMut(&Waveform) -> Result<Vec<Waveform>>,
{
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for ex in examples {
        match score_example(ex, &mut separate) {
            Ok(r) => rows.push(r),
            Err(e) => failures.push((ex.id.clone(), e.to_string())),
        }
    }
    let summary = summarize(&rows);
    SetReport { rows, failures, summary }
}

/// Like [`evaluate_examples`] for manifest entries, loading each from disk.
pub fn evaluate_set<F>(entries: &[ManifestEntry], mut separate: F) -> SetReport
where
    F: FnMut(&Waveform) -> Result<Vec<Waveform>>,
{
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for entry in entries {
        match entry.load().and_then(|ex| score_example(&ex, &mut separate)) {
            Ok(r) => rows.push(r),
            Err(e) => failures.push((entry.id.clone(), e.to_string())),
        }
    }
    let summary = summarize(&rows);
    SetReport { rows, failures, summary }
}

fn perm_string(p: &[usize]) -> String {
    p.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}

/// Columns: `id, si_sdr_db, si_sdri_db, sdri_db, perm`.
pub fn write_metrics_csv(rows: &[MetricRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(["id", "si_sdr_db", "si_sdri_db", "sdri_db", "perm"]).map_err(err)?;
    for r in rows {
        w.write_record([
            r.id.clone(),
            format!("{:.6}", r.si_sdr_db),
            format!("{:.6}", r.si_sdri_db),
            format!("{:.6}", r.sdri_db),
            perm_string(&r.permutation),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo_db: f64,
    pub hi_db: f64,
    pub count: usize,
}

/// Half-open bins `[k w, (k + 1) w)` from the bin holding the smallest
/// value through the bin holding the largest.
pub fn histogram(values: &[f64], bin_width_db: f64) -> Result<Vec<HistogramBin>> {
    if !(bin_width_db > 0.0) {
        return Err(Error::invalid(format!("bin width must be positive, got {bin_width_db}")));
    }
    if values.is_empty() {
        return Ok(Vec::new());
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("histogram values must be finite"));
    }
    let bin = |v: f64| (v / bin_width_db).floor() as i64;
    let lo = values.iter().copied().map(bin).min().unwrap_or(0);
    let hi = values.iter().copied().map(bin).max().unwrap_or(0);
    let mut counts = vec![0usize; (hi - lo + 1) as usize];
    for &v in values {
        counts[(bin(v) - lo) as usize] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| {
            let k = lo + i as i64;
            HistogramBin {
                lo_db: k as f64 * bin_width_db,
                hi_db: (k + 1) as f64 * bin_width_db,
                count,
            }
        })
        .collect())
}

pub fn metric_histogram(rows: &[MetricRow], bin_width_db: f64) -> Result<Vec<HistogramBin>> {
    histogram(&rows.iter().map(|r| r.si_sdri_db).collect::<Vec<_>>(), bin_width_db)
}

/// Columns: `bin_lo_db, bin_hi_db, count`.
pub fn write_histogram_csv(bins: &[HistogramBin], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(["bin_lo_db", "bin_hi_db", "count"]).map_err(err)?;
    for b in bins {
        w.write_record([b.lo_db.to_string(), b.hi_db.to_string(), b.count.to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(v: &[f32]) -> Waveform {
        Waveform::new(v.to_vec(), 16000).unwrap()
    }

    #[test]
    fn si_sdr_hand_values() {
        let s = w(&[1.0, 0.0, -1.0, 0.5]);
        assert_eq!(si_sdr(&s, &s).unwrap(), SDR_CAP_DB);
        // Zero-meaned s = (1, 0) over two samples is (0.5, -0.5); e = (1, 1) is (0, 0).
        let a = w(&[1.0, 0.0]);
        let b = w(&[1.0, 1.0]);
        assert_eq!(si_sdr(&b, &a).unwrap(), -SDR_CAP_DB);
        assert!(si_sdr(&a, &w(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn histogram_counts() {
        let bins = histogram(&[1.0, 1.4, 2.1], 1.0).unwrap();
        assert_eq!(bins.len(), 2);
        assert_eq!((bins[0].lo_db, bins[0].count), (1.0, 2));
        assert_eq!((bins[1].lo_db, bins[1].count), (2.0, 1));
        assert!(histogram(&[], 1.0).unwrap().is_empty());
        let shifted = histogram(&[11.0, 11.4, 12.1], 1.0).unwrap();
        assert_eq!(shifted.iter().map(|b| b.count).collect::<Vec<_>>(), vec![2, 1]);
        assert_eq!(shifted[0].lo_db, 11.0);
    }
}
