use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear variance schedule. Arrays are indexed by `t - 1` for `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    /// Posterior variances; `beta_tildes[0]` is 0 because `alpha_bar` at
    /// `t = 0` is 1.
    pub beta_tildes: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::param(format!("diffusion step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tildes[t - 1]
    }
}

/// `beta_t = beta_1 + (t - 1)(beta_T - beta_1)/(T - 1)`.
pub fn make_schedule(steps: usize, beta_1: f64, beta_t: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::param("schedule needs T >= 2"));
    }
    if !(0.0 < beta_1 && beta_1 < beta_t && beta_t < 1.0) {
        return Err(Error::param(format!("need 0 < beta_1 < beta_T < 1, got {beta_1}, {beta_t}")));
    }
    let span = (beta_t - beta_1) / (steps - 1) as f64;
    let mut betas: Vec<f64> = (0..steps).map(|i| beta_1 + i as f64 * span).collect();
    betas[steps - 1] = beta_t;
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    let beta_tildes = (0..steps)
        .map(|i| {
            let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
            (1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]
        })
        .collect();
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
        beta_tildes,
    })
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_noise(x0: ArrayView2<f64>, t: usize, eps: ArrayView2<f64>, schedule: &NoiseSchedule) -> Result<Array2<f64>> {
    schedule.check(t)?;
    if x0.dim() != eps.dim() {
        return Err(Error::Shape(format!("x0 {:?} vs noise {:?}", x0.dim(), eps.dim())));
    }
    let ab = schedule.alpha_bar(t);
    Ok(&x0 * ab.sqrt() + &eps * (1.0 - ab).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn endpoints_and_first_product() {
        let s = make_schedule(800, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(800), 0.02);
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
        // independent product over the closed-form betas
        let direct: f64 = (1..=800).map(|t| 1.0 - (1e-4 + (t - 1) as f64 * (0.02 - 1e-4) / 799.0)).product();
        assert!((s.alpha_bar(800) - direct).abs() < 1e-12);
    }

    #[test]
    fn monotone_and_bounded() {
        let s = make_schedule(800, 1e-4, 0.02).unwrap();
        for t in 2..=800 {
            assert!(s.beta(t) > s.beta(t - 1));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        for t in 1..=800 {
            assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) < 1.0);
            assert!(s.beta_tilde(t) >= 0.0 && s.beta_tilde(t) <= s.beta(t));
        }
        for t in 2..=800 {
            assert!(s.beta_tilde(t) > 0.0);
        }
    }

    #[test]
    fn invalid_bounds() {
        assert!(make_schedule(1, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.02, 1e-4).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn zero_noise_scales_x0() {
        let s = make_schedule(800, 1e-4, 0.02).unwrap();
        let x0 = arr2(&[[0.5, -0.25], [0.1, 0.9]]);
        let out = forward_noise(x0.view(), 300, Array2::zeros((2, 2)).view(), &s).unwrap();
        assert_eq!(out, &x0 * s.alpha_bar(300).sqrt());
        assert!(forward_noise(x0.view(), 0, x0.view(), &s).is_err());
        assert!(forward_noise(x0.view(), 801, x0.view(), &s).is_err());
    }

    #[test]
    fn final_step_is_mostly_noise() {
        let s = make_schedule(800, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bar(800).sqrt() < 0.02);
    }

    #[test]
    fn linear_in_x0_and_noise() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut draw = || Array2::from_shape_fn((4, 2), |_| StandardNormal.sample(&mut rng));
        let (a, b, e1, e2): (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>) = (draw(), draw(), draw(), draw());
        let sum = forward_noise((&a + &b).view(), 40, (&e1 + &e2).view(), &s).unwrap();
        let parts = forward_noise(a.view(), 40, e1.view(), &s).unwrap() + forward_noise(b.view(), 40, e2.view(), &s).unwrap();
        for (x, y) in sum.iter().zip(&parts) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
