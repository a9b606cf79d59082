//! One-dimensional Gaussian kernel density estimates on a uniform grid.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRID_POINTS: usize = 512;
/// The grid extends this many bandwidths beyond the data range.
pub const GRID_MARGIN: f64 = 4.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    /// `1.06·σ̂·n^(−1/5)`
    #[default]
    Silverman,
    Fixed(f64),
}

/// Bandwidth for `samples`, never below `10⁻³` of the data range (or `10⁻³`
/// when all samples coincide).
pub fn bandwidth(samples: &[f64], rule: BandwidthRule) -> Result<f64> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let (lo, hi) = min_max(samples);
    let range = hi - lo;
    let floor = if range > 0.0 { 1e-3 * range } else { 1e-3 };
    let raw = match rule {
        BandwidthRule::Silverman => {
            let mean = samples.iter().sum::<f64>() / n as f64;
            let var = if n > 1 {
                samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            1.06 * var.sqrt() * (n as f64).powf(-0.2)
        }
        BandwidthRule::Fixed(b) => {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::Config(format!("bandwidth {b} must be positive")));
            }
            b
        }
    };
    Ok(raw.max(floor))
}

fn min_max(samples: &[f64]) -> (f64, f64) {
    samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Density {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl Density {
    /// Trapezoid-rule integral over the grid.
    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid, &self.density)
    }
}

pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

/// Gaussian KDE of `samples` on `GRID_POINTS` points spanning
/// `[min − 4b, max + 4b]`.
pub fn gaussian_kde(samples: &[f64], rule: BandwidthRule) -> Result<Density> {
    if let Some(bad) = samples.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("kde sample {bad}")));
    }
    let b = bandwidth(samples, rule)?;
    let (lo, hi) = min_max(samples);
    let (start, end) = (lo - GRID_MARGIN * b, hi + GRID_MARGIN * b);
    let step = (end - start) / (GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..GRID_POINTS).map(|i| start + step * i as f64).collect();
    let norm = 1.0 / (samples.len() as f64 * b * (2.0 * PI).sqrt());
    let density = grid
        .iter()
        .map(|&g| {
            norm * samples
                .iter()
                .map(|&x| (-0.5 * ((g - x) / b).powi(2)).exp())
                .sum::<f64>()
        })
        .collect();
    Ok(Density {
        grid,
        density,
        bandwidth: b,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use super::*;

    #[test]
    fn silverman_constant() {
        // {−1, 1}: σ̂² = 2 with the n − 1 denominator
        let b = bandwidth(&[-1.0, 1.0], BandwidthRule::Silverman).unwrap();
        assert!((b - 1.06 * 2f64.sqrt() * 2f64.powf(-0.2)).abs() < 1e-15);
        assert_eq!(
            bandwidth(&[3.0; 10], BandwidthRule::Silverman).unwrap(),
            1e-3
        );
        assert!(bandwidth(&[], BandwidthRule::Silverman).is_err());
        assert!(bandwidth(&[1.0], BandwidthRule::Fixed(0.0)).is_err());
    }

    #[test]
    fn constant_coordinate_is_a_normalized_spike() {
        let d = gaussian_kde(&[0.7; 50], BandwidthRule::Silverman).unwrap();
        assert_eq!(d.grid.len(), GRID_POINTS);
        assert!((d.integral() - 1.0).abs() <= 1e-3, "{}", d.integral());
        let peak = d.density.iter().copied().fold(0.0, f64::max);
        assert!(peak > 100.0);
    }

    #[test]
    fn standard_normal_peak() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
        let d = gaussian_kde(&x, BandwidthRule::Silverman).unwrap();
        let peak = d.density.iter().copied().fold(0.0, f64::max);
        assert!(
            (peak / (2.0 * PI).sqrt().recip() - 1.0).abs() <= 0.1,
            "{peak}"
        );
        assert!((d.integral() - 1.0).abs() <= 1e-3);
    }

    #[test]
    fn bimodal_samples_integrate_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..2000)
            .map(|i| if i % 3 == 0 { 10.0 } else { -5.0 } + 0.01 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let d = gaussian_kde(&x, BandwidthRule::Silverman).unwrap();
        assert!((d.integral() - 1.0).abs() <= 1e-3, "{}", d.integral());
    }

    #[test]
    fn trapezoid_of_a_line() {
        assert!((trapezoid(&[0.0, 1.0, 3.0], &[0.0, 1.0, 3.0]) - 4.5).abs() < 1e-15);
    }
}
