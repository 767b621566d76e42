//! Procedural 64x64 reference images: sharp edges, curved ridges and
//! multi-scale clusters.

use std::f64::consts::{PI, TAU};

use ndarray::Array2;

use super::image::ImageTarget;
use crate::error::{FlowError, Result};

pub const TARGET_SIZE: usize = 64;

pub const BUILTIN_TARGETS: [&str; 3] = ["step_wedge", "rings", "filaments"];

pub fn builtin_target(name: &str) -> Result<ImageTarget> {
    match name {
        "step_wedge" => step_wedge(),
        "rings" => rings(),
        "filaments" => filament_cluster(),
        _ => Err(FlowError::InvalidConfig(format!(
            "unknown target {name:?}; expected one of {}",
            BUILTIN_TARGETS.join(", ")
        ))),
    }
}

fn render(f: impl Fn(f64, f64) -> f64) -> Result<ImageTarget> {
    let n = TARGET_SIZE as f64;
    ImageTarget::new(Array2::from_shape_fn(
        (TARGET_SIZE, TARGET_SIZE),
        |(r, c)| f((c as f64 + 0.5) / n, (r as f64 + 0.5) / n),
    ))
}

/// Eight vertical bands with geometrically spaced levels from 0.02 to 1,
/// brightening to the right in the top half and to the left in the bottom half.
pub fn step_wedge() -> Result<ImageTarget> {
    render(|x, y| {
        let band = ((x * 8.0) as usize).min(7);
        let level = if y < 0.5 { band } else { 7 - band };
        0.02 * 50f64.powf(level as f64 / 7.0)
    })
}

/// Four thin concentric rings on a dim background.
pub fn rings() -> Result<ImageTarget> {
    render(|x, y| {
        let r = ((x - 0.5).powi(2) + (y - 0.5).powi(2)).sqrt();
        let ridges: f64 = [0.1, 0.22, 0.34, 0.44]
            .iter()
            .enumerate()
            .map(|(k, rk)| (1.0 - 0.15 * k as f64) * (-0.5 * ((r - rk) / 0.02).powi(2)).exp())
            .sum();
        0.02 + ridges
    })
}

/// Sinuous filaments crossing three clusters of small blobs.
pub fn filament_cluster() -> Result<ImageTarget> {
    let filaments: Vec<Vec<(f64, f64)>> = (0..4)
        .map(|k| {
            let k = k as f64;
            (0..=256)
                .map(|i| {
                    let t = i as f64 / 256.0;
                    let x = 0.1 + 0.8 * t;
                    let y = 0.2 + 0.2 * k + 0.08 * (TAU * (1.0 + 0.5 * k) * t + k).sin();
                    (x, y)
                })
                .collect()
        })
        .collect();
    let centers = [(0.25, 0.3, 0.06), (0.7, 0.65, 0.09), (0.4, 0.8, 0.04)];
    let mut blobs = Vec::new();
    for (ci, &(cx, cy, spread)) in centers.iter().enumerate() {
        for j in 0..7 {
            let angle = j as f64 * 2.399_963 + ci as f64;
            let rad = spread * ((j as f64 + 0.5) / 7.0).sqrt();
            let sigma = 0.008 + 0.004 * ((j + ci) % 3) as f64;
            blobs.push((cx + rad * angle.cos(), cy + rad * angle.sin(), sigma));
        }
    }
    render(|x, y| {
        let mut v = 0.01;
        for (k, line) in filaments.iter().enumerate() {
            let d2 = line
                .iter()
                .map(|(px, py)| (x - px).powi(2) + (y - py).powi(2))
                .fold(f64::INFINITY, f64::min);
            let w = 0.01 + 0.004 * k as f64;
            v += 0.6 * (-0.5 * d2 / (w * w)).exp();
        }
        for &(bx, by, s) in &blobs {
            v += (-0.5 * ((x - bx).powi(2) + (y - by).powi(2)) / (s * s)).exp();
        }
        v * (1.0 + 0.2 * (PI * x).sin())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_targets_are_valid() {
        for name in BUILTIN_TARGETS {
            let t = builtin_target(name).unwrap();
            assert_eq!(t.pixels().dim(), (TARGET_SIZE, TARGET_SIZE));
            let max = t.pixels().iter().cloned().fold(0.0, f64::max);
            let min = t.pixels().iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min > 0.0 && max / min > 20.0, "{name}: {min} {max}");
        }
        assert!(builtin_target("nope").is_err());
    }

    #[test]
    fn step_wedge_levels() {
        let t = step_wedge().unwrap();
        assert!((t.eval(&[0.01, 0.01]).unwrap() - 0.02).abs() < 1e-12);
        assert!((t.eval(&[0.99, 0.01]).unwrap() - 1.0).abs() < 1e-12);
        assert!((t.eval(&[0.01, 0.99]).unwrap() - 1.0).abs() < 1e-12);
    }
}
