use gloss_wsd::cli::{synthetic_gradcheck, GradcheckSpec};
use gloss_wsd::model::{DownstreamModel, HeadSpec, LmgcModel, ModelConfig, Parameters};
use gloss_wsd::objectives::{focal_loss, FocalParams};

use crate::{timed, Outcome};

pub fn focal_reduction() -> Outcome {
    let plain = FocalParams {
        gamma: 0.0,
        alpha: None,
    };
    let mut worst: f64 = 0.0;
    let n = 5000;
    for i in 0..n {
        let p = (i as f64 + 0.5) / n as f64;
        for y in [false, true] {
            let t = f64::from(u8::from(y));
            let bce = -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
            worst = worst.max((focal_loss(p, y, &plain) - bce).abs());
        }
    }
    Outcome::new(
        worst <= 1e-12,
        format!("max |focal - BCE| {worst:.2e} over 10000 (p, y) points (need <= 1e-12)"),
    )
}

pub fn gradient_check() -> Outcome {
    timed(120, || {
        let mut parts = Vec::new();
        let mut passed = true;
        for (masked, name) in [(false, "LMGC"), (true, "LMGC-M")] {
            let report = synthetic_gradcheck(&GradcheckSpec {
                masked,
                ..Default::default()
            })
            .map_err(|e| e.to_string())?;
            passed &= report.max_rel_error < 1e-4 && report.checked >= 500;
            parts.push(format!(
                "{name} max rel err {:.2e} over {} coordinates",
                report.max_rel_error, report.checked
            ));
        }
        Ok(Outcome::new(passed, format!("{} (need < 1e-4, >= 500)", parts.join(", "))))
    })
}

/// Encoder plus tied MLM bias, counted from the architecture.
fn encoder_size(c: &ModelConfig) -> usize {
    let (h, f, v) = (c.hidden, c.ffn, c.vocab_size);
    let embeddings = (v + c.max_positions + c.segments) * h + 2 * h;
    let attention = 4 * (h * h + h);
    let feed_forward = h * f + f + f * h + h;
    let norms = 4 * h;
    embeddings + c.layers * (attention + feed_forward + norms) + v
}

pub fn parameter_accounting() -> Outcome {
    let mut failures = Vec::new();
    for (hidden, heads) in [(16, 2), (32, 2), (48, 4)] {
        let config = ModelConfig {
            hidden,
            heads,
            ffn: 2 * hidden,
            ..ModelConfig::desk(57)
        };
        let h = hidden;
        let lmgc = match LmgcModel::init(&config) {
            Ok(m) => m,
            Err(e) => return Outcome::fail(e.to_string()),
        };
        let encoder = lmgc.encoder.param_count();
        if encoder != encoder_size(&config) {
            failures.push(format!("H={h}: encoder {encoder} vs {}", encoder_size(&config)));
        }
        let gloss = lmgc.param_count() - encoder;
        if gloss != 2 * h + 2 {
            failures.push(format!("H={h}: gloss head {gloss} vs {}", 2 * h + 2));
        }
        let mut specs: Vec<(HeadSpec, usize)> = [2, 3, 5]
            .into_iter()
            .map(|k| (HeadSpec::Classification { classes: k }, k * h + k))
            .collect();
        specs.push((HeadSpec::Regression, h + 1));
        for (spec, want) in specs {
            let added = DownstreamModel::from_encoder(lmgc.encoder.clone(), spec)
                .map(|m| m.param_count() - encoder)
                .unwrap_or(0);
            if added != want {
                failures.push(format!("H={h} {spec:?}: {added} vs {want}"));
            }
        }
    }
    if failures.is_empty() {
        Outcome::new(true, "gloss head 2H+2, classification K*H+K, regression H+1 for H in 16/32/48")
    } else {
        Outcome::fail(failures.join(", "))
    }
}
