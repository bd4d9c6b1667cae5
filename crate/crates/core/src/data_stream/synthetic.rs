use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Sample};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

const CHANNELS: usize = 3;
const GRATINGS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_side: usize,
    pub separation: f64,
    pub seed: u64,
}

/// Class-conditional images: every class owns a template made of a few
/// oriented gratings with per-channel gains plus a colour mean. Samples are
/// `separation * template + N(0, 1)` mapped affinely into `[0, 1]`.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    let SyntheticSpec { classes, per_class, image_side, separation, seed } = *spec;
    if classes < 2 {
        return Err(contract("synthetic datasets need at least 2 classes"));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(contract(format!("separation must be positive, got {separation}")));
    }
    if image_side == 0 {
        return Err(contract("image_side must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<Vec<f64>> = (0..classes).map(|_| template(&mut rng, image_side)).collect();

    // Keeps |raw| < 4 sigma of noise inside [0, 1] before clamping.
    let span = 2.0 * (separation + 4.0);
    let mut samples = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for (label, t) in templates.iter().enumerate() {
            let data = t
                .iter()
                .map(|&v| {
                    let noise: f64 = rng.sample(StandardNormal);
                    (0.5 + (separation * v + noise) / span).clamp(0.0, 1.0)
                })
                .collect();
            samples.push(Sample { image: Tensor::new([image_side, image_side, CHANNELS], data), label });
        }
    }
    LabeledDataset::new(samples, classes)
}

fn template(rng: &mut ChaCha8Rng, side: usize) -> Vec<f64> {
    let gratings: Vec<(f64, f64, f64)> = (0..GRATINGS)
        .map(|_| {
            let angle = rng.gen_range(0.0..PI);
            let freq = rng.gen_range(0.5..2.5);
            let phase = rng.gen_range(0.0..2.0 * PI);
            (angle, freq, phase)
        })
        .collect();
    let gains: Vec<f64> = (0..CHANNELS).map(|_| rng.gen_range(0.5..1.5)).collect();
    let color: Vec<f64> = (0..CHANNELS).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = 1.0 / (GRATINGS as f64).sqrt();
    let mut out = Vec::with_capacity(side * side * CHANNELS);
    for y in 0..side {
        for x in 0..side {
            let (u, v) = (x as f64 / side as f64, y as f64 / side as f64);
            let p: f64 = gratings
                .iter()
                .map(|&(a, f, ph)| (2.0 * PI * f * (u * a.cos() + v * a.sin()) + ph).sin())
                .sum::<f64>()
                * norm;
            for c in 0..CHANNELS {
                out.push(0.5 * p * gains[c] + 0.5 * color[c]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(classes: usize, separation: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec { classes, per_class: 50, image_side: 8, separation, seed }
    }

    /// Ridge-regularised least squares in the dual (n < d):
    /// w = X^T (X X^T + lambda I)^-1 y, solved by Gaussian elimination.
    fn least_squares_probe_accuracy(ds: &LabeledDataset) -> f64 {
        let n = ds.len();
        let x: Vec<Vec<f64>> = ds
            .samples()
            .iter()
            .map(|s| {
                let mut v = s.image.data().to_vec();
                v.push(1.0);
                v
            })
            .collect();
        let y: Vec<f64> = ds.samples().iter().map(|s| if s.label == 0 { -1.0 } else { 1.0 }).collect();
        let mut a = vec![vec![0.0; n + 1]; n];
        for i in 0..n {
            for j in 0..n {
                a[i][j] = x[i].iter().zip(&x[j]).map(|(p, q)| p * q).sum::<f64>();
            }
            a[i][i] += 1e-6;
            a[i][n] = y[i];
        }
        for col in 0..n {
            let piv = (col..n).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..n {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for k in col..=n {
                        a[r][k] -= f * a[col][k];
                    }
                }
            }
        }
        let alpha: Vec<f64> = (0..n).map(|i| a[i][n] / a[i][i]).collect();
        let d = x[0].len();
        let w: Vec<f64> = (0..d).map(|k| (0..n).map(|i| alpha[i] * x[i][k]).sum()).collect();
        let correct = x
            .iter()
            .zip(&y)
            .filter(|(xi, &yi)| xi.iter().zip(&w).map(|(p, q)| p * q).sum::<f64>().signum() == yi)
            .count();
        correct as f64 / n as f64
    }

    #[test]
    fn well_separated_classes_are_linearly_separable() {
        let ds = make_synthetic(&spec(2, 10.0, 3)).unwrap();
        assert_eq!(ds.len(), 100);
        assert!(least_squares_probe_accuracy(&ds) >= 0.99);
    }

    #[test]
    fn zero_separation_is_rejected() {
        assert!(make_synthetic(&spec(2, 0.0, 1)).is_err());
        assert!(make_synthetic(&spec(1, 1.0, 1)).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let a = make_synthetic(&spec(3, 2.0, 8)).unwrap();
        let b = make_synthetic(&spec(3, 2.0, 8)).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic(&spec(3, 2.0, 9)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let ds = make_synthetic(&spec(4, 5.0, 2)).unwrap();
        for s in ds.samples() {
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(s.image.shape(), &[8, 8, 3]);
        }
    }
}
