//! Minimal dense-network toolkit with hand-written backward passes.
//!
//! Activations are row-major `(rows, features)` matrices; a batch of `B`
//! sequences of length `L` is stacked into `B * L` rows. Every layer exposes a
//! pure `forward` plus a cached variant whose cache feeds `backward`, which
//! accumulates parameter gradients and returns the input gradient.

mod attention;
mod layers;

pub use attention::{CrossAttention, CrossAttentionCache, SelfAttention, SelfAttentionCache};
pub use layers::{dropout_mask, gelu, gelu_backward, silu, silu_backward, LayerNorm, LayerNormCache, Linear};

use ndarray::{Array2, ScalarOperand};
use rand::Rng;

/// Element type of network parameters and activations.
pub trait Float:
    num_traits::Float + ndarray::LinalgScalar + ScalarOperand + std::fmt::Debug + Default + Send + Sync + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + 'static
{
}

impl Float for f32 {}
impl Float for f64 {}

#[inline]
pub fn lit<T: Float>(v: f64) -> T {
    T::from(v).expect("representable constant")
}

/// A trainable matrix with its gradient and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Array2<T>,
    pub grad: Array2<T>,
    m: Array2<T>,
    v: Array2<T>,
}

impl<T: Float> Param<T> {
    pub fn new(value: Array2<T>) -> Self {
        let dim = value.raw_dim();
        Self {
            value,
            grad: Array2::zeros(dim),
            m: Array2::zeros(dim),
            v: Array2::zeros(dim),
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Array2::zeros((rows, cols)))
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Self::new(Array2::from_elem((rows, cols), v))
    }

    /// Uniform in `[-bound, bound]`, drawn in f64 so f32 and f64 networks
    /// built from the same seed hold the same values up to rounding.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        Self::new(Array2::from_shape_fn((rows, cols), |_| lit(rng.random_range(-bound..=bound))))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn cast<U: Float>(&self) -> Param<U> {
        Param::new(self.value.mapv(|x| lit::<U>(x.to_f64().expect("finite"))))
    }
}

/// Anything that owns parameters in a fixed, documented order.
pub trait Module<T: Float> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<T: Float>(&mut self, params: Vec<&mut Param<T>>) {
        self.step_with_lr(params, self.cfg.lr);
    }

    pub fn step_with_lr<T: Float>(&mut self, params: Vec<&mut Param<T>>, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (lit::<T>(beta1), lit::<T>(beta2));
        let (one, eps) = (T::one(), lit::<T>(eps));
        let step_size = lit::<T>(lr / bc1);
        let inv_bc2 = lit::<T>(1.0 / bc2);
        for p in params {
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(&mut p.m)
                .and(&mut p.v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    *w -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
                });
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_grad_norm<T: Float>(params: Vec<&mut Param<T>>, max_norm: f64) -> f64 {
    let total: f64 = params
        .iter()
        .map(|p| p.grad.iter().map(|g| g.to_f64().unwrap().powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total.is_finite() {
        let s = lit::<T>(max_norm / total);
        for p in params {
            p.grad.mapv_inplace(|g| g * s);
        }
    }
    total
}

/// Fixed sinusoidal position table `(len, dim)`.
pub fn positional_encoding<T: Float>(len: usize, dim: usize) -> Array2<T> {
    Array2::from_shape_fn((len, dim), |(pos, i)| {
        let k = (i / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * k / dim as f64);
        let a = pos as f64 * freq;
        lit(if i % 2 == 0 { a.sin() } else { a.cos() })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Param::<f64>::new(ndarray::arr2(&[[1.0, -2.0]]));
        p.grad = ndarray::arr2(&[[0.5, -3.0]]);
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        opt.step(vec![&mut p]);
        // bias-corrected first step is lr * sign(g)
        assert!((p.value[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p.value[[0, 1]] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut p = Param::<f32>::zeros(1, 2);
        p.grad = ndarray::arr2(&[[3.0, 4.0]]);
        let n = clip_grad_norm(vec![&mut p], 1.0);
        assert!((n - 5.0).abs() < 1e-6);
        assert!((p.grad[[0, 0]] - 0.6).abs() < 1e-6);
    }

    #[test]
    fn positional_table_starts_at_sin0_cos0() {
        let pe = positional_encoding::<f64>(4, 6);
        assert_eq!(pe[[0, 0]], 0.0);
        assert_eq!(pe[[0, 1]], 1.0);
        assert!((pe[[1, 0]] - 1f64.sin()).abs() < 1e-15);
    }
}
