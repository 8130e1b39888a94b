//! Analytic multiply-accumulate counts per layer.

use serde::{Deserialize, Serialize};

use crate::frontend::FrontendConfig;
use crate::separation::SeparatorConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMacs {
    pub name: String,
    pub macs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacReport {
    pub seconds: f64,
    pub layers: Vec<LayerMacs>,
    pub total: f64,
}

impl MacReport {
    pub fn g_macs_per_s(&self) -> f64 {
        self.total / self.seconds / 1e9
    }
}

/// `out_T * out_C * (in_C / groups) * kernel`.
pub fn conv_macs(out_t: usize, out_c: usize, in_c: usize, kernel: usize, groups: usize) -> f64 {
    out_t as f64 * out_c as f64 * (in_c / groups.max(1)) as f64 * kernel as f64
}

/// `T * in * out`.
pub fn linear_macs(t: usize, input: usize, output: usize) -> f64 {
    t as f64 * input as f64 * output as f64
}

/// `2 T^2 d + 4 T d^2`: projections plus score and value products of one layer.
pub fn attention_macs(t: usize, dim: usize) -> f64 {
    let (t, d) = (t as f64, dim as f64);
    2.0 * t * t * d + 4.0 * t * d * d
}

fn frontend_layers(cfg: &FrontendConfig, samples: usize, out: &mut Vec<LayerMacs>) {
    let mut len = samples;
    let mut in_c = 1;
    for (i, (&s, &k)) in cfg.conv_strides.iter().zip(&cfg.conv_kernels).enumerate() {
        len /= s;
        out.push(LayerMacs {
            name: format!("frontend.enc.{i}"),
            macs: conv_macs(len, cfg.conv_channels, in_c, k, 1),
        });
        in_c = cfg.conv_channels;
    }
    let t = len;
    let d = cfg.model_dim;
    out.push(LayerMacs {
        name: "frontend.proj".into(),
        macs: linear_macs(t, cfg.conv_channels, d),
    });
    out.push(LayerMacs {
        name: "frontend.pos_conv".into(),
        macs: conv_macs(t, d, d, cfg.pos_kernel, cfg.pos_groups),
    });
    for l in 0..cfg.layers {
        out.push(LayerMacs {
            name: format!("frontend.layers.{l}.attention"),
            macs: attention_macs(t, d),
        });
        out.push(LayerMacs {
            name: format!("frontend.layers.{l}.ffn"),
            macs: 2.0 * linear_macs(t, d, cfg.inner_dim),
        });
    }
}

fn separator_layers(cfg: &SeparatorConfig, samples: usize, pattern_dim: Option<usize>, out: &mut Vec<LayerMacs>) {
    let t = cfg.num_frames(samples);
    let n = cfg.enc_dim;
    let mut push = |name: &str, macs: f64| {
        out.push(LayerMacs {
            name: format!("separator.{name}"),
            macs,
        })
    };
    push("encoder", conv_macs(t, n, 1, cfg.enc_kernel, 1));
    if let Some(dm) = pattern_dim {
        push("adapt", linear_macs(t, dm, n));
    }
    push("bottleneck", linear_macs(t, n, cfg.bottleneck));
    for r in 0..cfg.repeats {
        for b in 0..cfg.blocks {
            let macs = linear_macs(t, cfg.bottleneck, cfg.hidden)
                + conv_macs(t, cfg.hidden, cfg.hidden, cfg.tcn_kernel, cfg.hidden)
                + linear_macs(t, cfg.hidden, cfg.bottleneck);
            push(&format!("tcn.{r}.{b}"), macs);
        }
    }
    push("mask_out", linear_macs(t, cfg.bottleneck, cfg.speakers * n));
    push("decoder", cfg.speakers as f64 * linear_macs(t, n, cfg.enc_kernel));
}

/// Per-layer MACs for `seconds` of audio through the frontend, the
/// separator, or both (the adaptation layer is counted when both are given).
pub fn count_macs(
    frontend: Option<&FrontendConfig>,
    separator: Option<&SeparatorConfig>,
    seconds: f64,
    sample_rate: u32,
) -> MacReport {
    let samples = (seconds * sample_rate as f64).round() as usize;
    let mut layers = Vec::new();
    if let Some(f) = frontend {
        frontend_layers(f, samples, &mut layers);
    }
    if let Some(s) = separator {
        let pattern = frontend.filter(|_| s.use_frontend).map(|f| f.model_dim);
        separator_layers(s, samples, pattern, &mut layers);
    }
    let total = layers.iter().map(|l| l.macs).sum();
    MacReport {
        seconds,
        layers,
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_conv() {
        assert_eq!(conv_macs(16000, 1, 1, 1, 1), 16000.0);
        assert_eq!(conv_macs(100, 8, 8, 3, 1), 4.0 * conv_macs(100, 4, 4, 3, 1));
    }
}
