#![allow(dead_code)]

use std::io::Write;
use std::sync::Arc;

use prefgen_core::corpus::{Item, PixelGrid, UserSequence};
use prefgen_core::metrics::SsimParams;
use prefgen_core::numerics::Vector;

pub fn item(id: &str, feature: Vec<f64>, caption: &[&str]) -> Arc<Item> {
    Arc::new(Item {
        item_id: id.to_string(),
        caption: caption.iter().map(|s| s.to_string()).collect(),
        text: Vec::new(),
        visual_feature: Vector::new(feature).unwrap(),
        pixel_grid: None,
        category: "cat00".into(),
    })
}

/// A user whose history items carry the given features.
pub fn user_with_features(features: &[Vec<f64>]) -> UserSequence {
    let history = features
        .iter()
        .enumerate()
        .map(|(i, f)| item(&format!("h{i:03}"), f.clone(), &["alpha", "beta"]))
        .collect();
    let dim = features.first().map_or(1, Vec::len);
    UserSequence {
        user_id: "u0000".into(),
        history,
        reference: item("ref", vec![1.0; dim], &["alpha", "beta"]),
        planted_preference: None,
        held_out_positives: Vec::new(),
    }
}

/// Writes to the process's stderr device so the line shows even when the
/// test harness captures output.
pub fn verdict(id: usize, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let line = format!("criterion {id} [{name}]: {status} ({detail})");
    match std::fs::OpenOptions::new().append(true).open("/dev/stderr") {
        Ok(mut f) => {
            let _ = writeln!(f, "\n{line}");
        }
        Err(_) => eprintln!("{line}"),
    }
}

/// Windowed SSIM with two-pass moments, one window at a time.
pub fn ssim_oracle(x: &PixelGrid, y: &PixelGrid, p: &SsimParams) -> f64 {
    let n = x.size();
    let w = p.window;
    let c1 = (p.k1 * p.dynamic_range).powi(2);
    let c2 = (p.k2 * p.dynamic_range).powi(2);
    let mut values = Vec::new();
    for r0 in 0..=n - w {
        for c0 in 0..=n - w {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for r in r0..r0 + w {
                for c in c0..c0 + w {
                    xs.push(x.get(r, c));
                    ys.push(y.get(r, c));
                }
            }
            let m = xs.len() as f64;
            let mx = xs.iter().sum::<f64>() / m;
            let my = ys.iter().sum::<f64>() / m;
            let vx = xs.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / m;
            let vy = ys.iter().map(|b| (b - my).powi(2)).sum::<f64>() / m;
            let cov = xs
                .iter()
                .zip(&ys)
                .map(|(a, b)| (a - mx) * (b - my))
                .sum::<f64>()
                / m;
            let lum = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
            let cs = (2.0 * cov + c2) / (vx + vy + c2);
            values.push(lum * cs);
        }
    }
    values.iter().sum::<f64>() / values.len() as f64
}
