use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use super::{lit, Float, Module, Param};

/// `y = x W + b` with `W: (in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub w: Param<T>,
    pub b: Param<T>,
}

impl<T: Float> Linear<T> {
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            w: Param::uniform(fan_in, fan_out, bound, rng),
            b: Param::zeros(1, fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.value.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.value.ncols()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.w.value);
        y += &self.b.value.row(0);
        y
    }

    /// Accumulates parameter gradients for input `x` and returns `dL/dx`.
    pub fn backward(&mut self, x: ArrayView2<T>, dy: ArrayView2<T>) -> Array2<T> {
        self.backward_params(x, dy);
        dy.dot(&self.w.value.t())
    }

    /// Parameter gradients only, for layers fed by data.
    pub fn backward_params(&mut self, x: ArrayView2<T>, dy: ArrayView2<T>) {
        ndarray::linalg::general_mat_mul(T::one(), &x.t(), &dy, T::one(), &mut self.w.grad);
        let db = dy.sum_axis(Axis(0));
        let mut brow = self.b.grad.row_mut(0);
        brow += &db;
    }

    pub fn cast<U: Float>(&self) -> Linear<U> {
        Linear {
            w: self.w.cast(),
            b: self.b.cast(),
        }
    }
}

impl<T: Float> Module<T> for Linear<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.w, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.w, &mut self.b]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    eps: f64,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Array2<T>,
    inv_std: Vec<T>,
}

impl<T: Float> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::filled(1, dim, T::one()),
            beta: Param::zeros(1, dim),
            eps: 1e-5,
        }
    }

    fn normalize(&self, x: ArrayView2<T>) -> (Array2<T>, Vec<T>) {
        let d = lit::<T>(x.ncols() as f64);
        let eps = lit::<T>(self.eps);
        let mut xhat = x.to_owned();
        let mut inv = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / d;
            let s = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * s);
            inv.push(s);
        }
        (xhat, inv)
    }

    fn affine(&self, xhat: &Array2<T>) -> Array2<T> {
        let mut y = xhat * &self.gamma.value.row(0);
        y += &self.beta.value.row(0);
        y
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        self.affine(&self.normalize(x).0)
    }

    pub fn forward_cached(&self, x: ArrayView2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let (xhat, inv_std) = self.normalize(x);
        (self.affine(&xhat), LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<T>, dy: ArrayView2<T>) -> Array2<T> {
        let xhat = &cache.xhat;
        {
            let mut g = self.gamma.grad.row_mut(0);
            g += &(&dy * xhat).sum_axis(Axis(0));
            let mut b = self.beta.grad.row_mut(0);
            b += &dy.sum_axis(Axis(0));
        }
        let d = lit::<T>(xhat.ncols() as f64);
        let mut dx = &dy * &self.gamma.value.row(0);
        for ((mut row, xh), &s) in dx.rows_mut().into_iter().zip(xhat.rows()).zip(&cache.inv_std) {
            let sum = row.sum();
            let dot = row.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>();
            Zip::from(&mut row).and(&xh).for_each(|g, &h| {
                *g = s / d * (d * *g - sum - h * dot);
            });
        }
        dx
    }

    pub fn cast<U: Float>(&self) -> LayerNorm<U> {
        LayerNorm {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            eps: self.eps,
        }
    }
}

impl<T: Float> Module<T> for LayerNorm<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Float>(x: &Array2<T>) -> Array2<T> {
    let (c, a, half, one) = (lit::<T>(GELU_C), lit::<T>(GELU_A), lit::<T>(0.5), T::one());
    x.mapv(|v| half * v * (one + (c * (v + a * v * v * v)).tanh()))
}

/// `dy * gelu'(x)`.
pub fn gelu_backward<T: Float>(x: &Array2<T>, dy: ArrayView2<T>) -> Array2<T> {
    let (c, a, half, one, three) = (lit::<T>(GELU_C), lit::<T>(GELU_A), lit::<T>(0.5), T::one(), lit::<T>(3.0));
    let mut out = dy.to_owned();
    Zip::from(&mut out).and(x).for_each(|g, &v| {
        let th = (c * (v + a * v * v * v)).tanh();
        let d = half * (one + th) + half * v * (one - th * th) * c * (one + three * a * v * v);
        *g *= d;
    });
    out
}

pub fn silu<T: Float>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| v / (T::one() + (-v).exp()))
}

/// `dy * silu'(x)`.
pub fn silu_backward<T: Float>(x: &Array2<T>, dy: ArrayView2<T>) -> Array2<T> {
    let one = T::one();
    let mut out = dy.to_owned();
    Zip::from(&mut out).and(x).for_each(|g, &v| {
        let s = one / (one + (-v).exp());
        *g = *g * s * (one + v * (one - s));
    });
    out
}

/// Inverted-dropout mask: entries are 0 with probability `p`, else `1/(1-p)`.
pub fn dropout_mask<T: Float, R: Rng + ?Sized>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Array2<T> {
    let keep = lit::<T>(1.0 / (1.0 - p));
    Array2::from_shape_fn((rows, cols), |_| if rng.random::<f64>() < p { T::zero() } else { keep })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.5..1.5))
    }

    /// Central difference of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        Array2::from_shape_fn(x.raw_dim(), |(i, j)| {
            let mut a = x.clone();
            a[[i, j]] += h;
            let mut b = x.clone();
            b[[i, j]] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
    }

    fn close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn layer_norm_input_gradient() {
        let x = random(3, 5, 1);
        let w = random(3, 5, 2);
        let mut ln = LayerNorm::<f64>::new(5);
        ln.gamma.value = random(1, 5, 3);
        let loss = |x: &Array2<f64>| (ln.forward(x.view()) * &w).sum();
        let num = numeric_grad(&x, loss);
        let (_, cache) = ln.forward_cached(x.view());
        let mut ln2 = ln.clone();
        let dx = ln2.backward(&cache, w.view());
        close(&dx, &num, 1e-6);
    }

    #[test]
    fn activation_derivatives() {
        let x = random(4, 3, 4);
        let w = random(4, 3, 5);
        close(&gelu_backward(&x, w.view()), &numeric_grad(&x, |x| (gelu(x) * &w).sum()), 1e-6);
        close(&silu_backward(&x, w.view()), &numeric_grad(&x, |x| (silu(x) * &w).sum()), 1e-6);
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let lin = Linear::<f64>::new(4, 3, &mut rng);
        let x = random(5, 4, 7);
        let w = random(5, 3, 8);
        let num_x = numeric_grad(&x, |x| (lin.forward(x.view()) * &w).sum());
        let mut l2 = lin.clone();
        let dx = l2.backward(x.view(), w.view());
        close(&dx, &num_x, 1e-6);
        let num_w = numeric_grad(&lin.w.value, |wv| {
            let mut l = lin.clone();
            l.w.value = wv.clone();
            (l.forward(x.view()) * &w).sum()
        });
        close(&l2.w.grad, &num_w, 1e-6);
    }

    #[test]
    fn dropout_zero_rate_is_identity_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = dropout_mask::<f32, _>(3, 4, 0.0, &mut rng);
        assert!(m.iter().all(|&v| v == 1.0));
    }
}
