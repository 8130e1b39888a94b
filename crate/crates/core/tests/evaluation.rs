use csp_core::audio::Waveform;
use csp_core::data_sim::{synthetic_corpus, write_corpus, GainConfig, ManifestEntry};
use csp_core::eval::metrics::{evaluate_examples, evaluate_set, metric_histogram, si_sdr, write_metrics_csv};
use csp_core::Result;

fn identity(mix: &Waveform) -> Result<Vec<Waveform>> {
    Ok(vec![mix.clone(), mix.clone()])
}

#[test]
fn identity_separator_scores_zero_improvement() {
    let examples = synthetic_corpus(5, 0.5, 16000, &GainConfig::default(), 3).unwrap();
    let report = evaluate_examples(&examples, identity);
    assert!(report.failures.is_empty());
    assert_eq!(report.rows.len(), 5);
    for r in &report.rows {
        assert_eq!(r.si_sdri_db, 0.0, "{}", r.id);
        assert_eq!(r.sdri_db, 0.0, "{}", r.id);
    }
    assert_eq!(report.summary.mean_si_sdri_db, 0.0);
}

#[test]
fn oracle_separator_hits_the_cap_and_finds_the_swap() {
    let examples = synthetic_corpus(3, 0.5, 16000, &GainConfig::default(), 4).unwrap();
    let report = evaluate_examples(&examples, |mix| {
        let ex = examples.iter().find(|e| e.mixture.samples() == mix.samples()).unwrap();
        let mut s = ex.sources.clone().unwrap();
        s.reverse();
        Ok(s)
    });
    for r in &report.rows {
        assert_eq!(r.permutation, vec![1, 0]);
        assert!((r.si_sdr_db - 60.0).abs() < 1e-9);
        assert!(r.si_sdri_db > 0.0);
    }
}

#[test]
fn manifest_evaluation_keeps_one_row_per_readable_entry() {
    let dir = tempfile::tempdir().unwrap();
    let examples = synthetic_corpus(4, 0.25, 16000, &GainConfig::default(), 5).unwrap();
    let mut manifest = write_corpus(&examples, dir.path()).unwrap();
    manifest.entries.push(ManifestEntry {
        id: "missing".into(),
        mixture_path: Some(dir.path().join("nope.wav")),
        source_paths: vec![],
        gains_db: vec![],
        duration_s: 0.0,
        sample_rate: 16000,
    });
    let report = evaluate_set(&manifest.entries, identity);
    assert_eq!(report.rows.len(), 4);
    assert_eq!(report.failures.len(), 1);
    assert_eq!(report.failures[0].0, "missing");
    assert_eq!(report.summary.rows, 4);

    let mut csv = Vec::new();
    write_metrics_csv(&report.rows, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "id,si_sdr_db,si_sdri_db,sdri_db,perm");
    assert_eq!(text.lines().count(), 5);
    let counted: usize = metric_histogram(&report.rows, 1.0).unwrap().iter().map(|b| b.count).sum();
    assert_eq!(counted, 4);
}

#[test]
fn si_sdr_is_scale_invariant() {
    let examples = synthetic_corpus(2, 0.25, 16000, &GainConfig::default(), 6).unwrap();
    let (s, e) = (&examples[0].sources.as_ref().unwrap()[0], &examples[0].mixture);
    let base = si_sdr(e, s).unwrap();
    for g in [0.01f32, 0.5, 3.0, 40.0] {
        assert!((si_sdr(&e.scaled(g), s).unwrap() - base).abs() < 1e-6);
    }
}
