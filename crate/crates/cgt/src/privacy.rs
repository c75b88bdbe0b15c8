//! Gaussian-mechanism calibration, per-example gradient clipping, and basic
//! (eps, delta) composition shared by DP k-means and DP-SGD.

use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DpSgdConfig {
    /// Per-example gradient clip bound.
    pub clip_norm: f64,
    /// Noise multiplier; the added noise has std sigma * clip_norm per coordinate.
    pub noise_multiplier: f64,
    pub delta: f64,
    pub steps: usize,
    /// Fraction of the dataset per batch, in (0, 1].
    pub batch_fraction: f64,
}

impl DpSgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::Invalid("clip_norm must be positive".into()));
        }
        if self.noise_multiplier < 0.0 {
            return Err(Error::Invalid("noise_multiplier must be nonnegative".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Invalid("delta must lie in (0, 1)".into()));
        }
        if !(self.batch_fraction > 0.0 && self.batch_fraction <= 1.0) {
            return Err(Error::Invalid("batch_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Gaussian-mechanism noise scale sigma = sensitivity * sqrt(2 ln(1.25 / delta)) / eps.
///
/// The classical bound assumes eps <= 1; for larger eps the same formula is
/// applied as a heuristic. Zero sensitivity yields sigma = 0.
pub fn gaussian_sigma(eps: f64, delta: f64, sensitivity: f64) -> Result<f64> {
    if sensitivity == 0.0 {
        return Ok(0.0);
    }
    if !(eps > 0.0) || !(delta > 0.0 && delta < 1.0) || sensitivity < 0.0 {
        return Err(Error::Invalid(format!(
            "gaussian mechanism needs eps > 0, delta in (0, 1), sensitivity >= 0; got ({eps}, {delta}, {sensitivity})"
        )));
    }
    Ok(sensitivity * (2.0 * (1.25 / delta).ln()).sqrt() / eps)
}

/// Clips each per-example gradient to norm <= clip_norm (factor
/// min(1, C/||g||)), sums them, adds N(0, (sigma * C)^2) per coordinate, and
/// divides by the batch size. With sigma = 0 and clip_norm = infinity this is
/// exactly the mean (the clip factor is the constant 1.0 and no noise is
/// added, so summation order and rounding match the plain path bit for bit).
pub fn clip_and_noise(
    per_example: &[Vec<f64>],
    cfg: &DpSgdConfig,
    stream: &mut rand_chacha::ChaCha8Rng,
) -> Vec<f64> {
    let batch = per_example.len();
    assert!(batch > 0, "clip_and_noise needs at least one gradient");
    let dim = per_example[0].len();
    let mut total = vec![0.0f64; dim];
    for grad in per_example {
        debug_assert_eq!(grad.len(), dim);
        let factor = if cfg.clip_norm.is_infinite() {
            1.0
        } else {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > cfg.clip_norm {
                cfg.clip_norm / norm
            } else {
                1.0
            }
        };
        for (t, g) in total.iter_mut().zip(grad) {
            *t += g * factor;
        }
    }
    if cfg.noise_multiplier > 0.0 {
        let sigma = cfg.noise_multiplier * cfg.clip_norm;
        let normal = Normal::new(0.0, sigma).expect("finite noise scale");
        for t in total.iter_mut() {
            *t += normal.sample(stream);
        }
    }
    let batch = batch as f64;
    for t in total.iter_mut() {
        *t /= batch;
    }
    total
}

/// Basic composition: a loose upper bound that simply sums per-step budgets.
pub fn compose(steps: usize, eps_step: f64, delta_step: f64) -> (f64, f64) {
    (steps as f64 * eps_step, steps as f64 * delta_step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn cfg(clip: f64, sigma: f64) -> DpSgdConfig {
        DpSgdConfig {
            clip_norm: clip,
            noise_multiplier: sigma,
            delta: 0.1,
            steps: 1,
            batch_fraction: 1.0,
        }
    }

    #[test]
    fn sigma_formula() {
        // eps = 1, delta = 1e-5, sens = 1: sqrt(2 ln(1.25e5)) = 4.84407...
        let sigma = gaussian_sigma(1.0, 1e-5, 1.0).unwrap();
        assert!((sigma - (2.0f64 * (1.25e5f64).ln()).sqrt()).abs() < 1e-12);
        assert!((sigma - 4.844).abs() < 1e-3);
        assert_eq!(gaussian_sigma(1.0, 1e-5, 0.0).unwrap(), 0.0);
        let doubled = gaussian_sigma(1.0, 1e-5, 2.0).unwrap();
        assert_eq!(doubled, 2.0 * sigma);
        assert!(gaussian_sigma(0.0, 1e-5, 1.0).is_err());
        assert!(gaussian_sigma(1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn zero_noise_unclipped_is_exact_mean() {
        let grads = vec![vec![1.0, 2.0, 3.0], vec![3.0, 2.0, 1.0], vec![-1.0, 0.5, 0.25]];
        let mut stream = rng::stream(1, 1);
        let out = clip_and_noise(&grads, &cfg(f64::INFINITY, 0.0), &mut stream);
        let mut expect = vec![0.0f64; 3];
        for g in &grads {
            for (e, v) in expect.iter_mut().zip(g) {
                *e += v;
            }
        }
        for e in &mut expect {
            *e /= 3.0;
        }
        assert_eq!(out, expect);
    }

    #[test]
    fn clipping_rescales_large_gradients() {
        let grad = vec![vec![6.0, 8.0]]; // norm 10
        let mut stream = rng::stream(2, 2);
        let out = clip_and_noise(&grad, &cfg(1.0, 0.0), &mut stream);
        let norm = (out[0] * out[0] + out[1] * out[1]).sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        // Direction preserved.
        assert!((out[0] / out[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn post_clip_norms_bounded() {
        let mut stream = rng::stream(8, 3);
        use rand::Rng;
        for trial in 0..50 {
            let dim = 1 + trial % 7;
            let grads: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..dim).map(|_| stream.random_range(-5.0..5.0)).collect())
                .collect();
            let c = 0.7;
            for g in &grads {
                let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                let factor = if norm > c { c / norm } else { 1.0 };
                let clipped: f64 = g.iter().map(|x| (x * factor).powi(2)).sum::<f64>().sqrt();
                assert!(clipped <= c + 1e-6);
            }
        }
    }

    #[test]
    fn noise_variance_calibrated() {
        // Single zero gradient: the output is pure noise / batch.
        let sigma = 0.5;
        let clip = 2.0;
        let batch = 4usize;
        let grads = vec![vec![0.0f64; 2]; batch];
        let mut stream = rng::stream(9, 4);
        let trials = 10_000;
        let mut sum_sq = 0.0f64;
        for _ in 0..trials {
            let out = clip_and_noise(&grads, &cfg(clip, sigma), &mut stream);
            sum_sq += out[0] * out[0] + out[1] * out[1];
        }
        let var = sum_sq / (2 * trials) as f64;
        let expect = (sigma * clip / batch as f64).powi(2);
        assert!(
            (var / expect - 1.0).abs() < 0.05,
            "variance {var} vs expected {expect}"
        );
    }

    #[test]
    fn basic_composition() {
        assert_eq!(compose(1, 0.3, 1e-4), (0.3, 1e-4));
        let (e, d) = compose(10, 0.1, 1e-6);
        assert!((e - 1.0).abs() < 1e-12);
        assert!((d - 1e-5).abs() < 1e-18);
        // Matches brute-force summation on a grid.
        for steps in [1usize, 3, 17] {
            for eps in [0.01, 0.5] {
                let (total, _) = compose(steps, eps, 1e-9);
                let brute: f64 = (0..steps).map(|_| eps).sum();
                assert!((total - brute).abs() < 1e-12);
            }
        }
    }
}
