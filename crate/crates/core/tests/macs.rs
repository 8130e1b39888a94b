use csp_core::eval::macs::count_macs;
use csp_core::frontend::FrontendConfig;
use csp_core::separation::SeparatorConfig;

/// Layer-by-layer recomputation for one second of 16 kHz audio through the
/// full-size frontend, written out term by term.
fn frontend_oracle() -> f64 {
    let lens = [3200.0, 1600.0, 800.0, 400.0, 200.0, 100.0, 50.0];
    let kernels = [10.0, 3.0, 3.0, 3.0, 3.0, 2.0, 2.0];
    let mut total = lens[0] * 512.0 * 1.0 * kernels[0];
    for i in 1..7 {
        total += lens[i] * 512.0 * 512.0 * kernels[i];
    }
    let t = 50.0;
    total += t * 512.0 * 768.0; // projection
    total += t * 768.0 * (768.0 / 16.0) * 128.0; // grouped positional conv
    let attention = 2.0 * t * t * 768.0 + 4.0 * t * 768.0 * 768.0;
    let ffn = 2.0 * t * 768.0 * 3072.0;
    total + 12.0 * (attention + ffn)
}

#[test]
fn full_frontend_matches_layer_oracle() {
    let r = count_macs(Some(&FrontendConfig::default()), None, 1.0, 16000);
    let want = frontend_oracle();
    assert!(((r.total - want) / want).abs() < 0.01, "{} vs {want}", r.total);
    assert!((r.g_macs_per_s() - want / 1e9).abs() < 1e-9);
}

#[test]
fn separator_counts_scale_with_duration() {
    let cfg = SeparatorConfig::default();
    let one = count_macs(None, Some(&cfg), 1.0, 16000);
    let two = count_macs(None, Some(&cfg), 2.0, 16000);
    assert!((two.total / one.total - 2.0).abs() < 1e-3);
    assert!((one.g_macs_per_s() - two.g_macs_per_s()).abs() / one.g_macs_per_s() < 1e-3);
    // The encoder alone: 1000 frames of a 1-to-512 conv with kernel 32.
    let enc = one.layers.iter().find(|l| l.name == "separator.encoder").unwrap();
    assert_eq!(enc.macs, 1000.0 * 512.0 * 32.0);
}

#[test]
fn adaptation_layer_counted_only_with_frontend() {
    let (f, s) = (FrontendConfig::default(), SeparatorConfig::default());
    let both = count_macs(Some(&f), Some(&s), 1.0, 16000);
    let adapt = both.layers.iter().find(|l| l.name == "separator.adapt").unwrap();
    assert_eq!(adapt.macs, 1000.0 * 768.0 * 512.0);
    let alone = count_macs(None, Some(&s), 1.0, 16000);
    assert!(alone.layers.iter().all(|l| l.name != "separator.adapt"));
    let frontend = count_macs(Some(&f), None, 1.0, 16000);
    assert!((both.total - alone.total - frontend.total - adapt.macs).abs() < 1.0);
}
