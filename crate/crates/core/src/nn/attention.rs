use ndarray::{s, Array2, ArrayView2, ArrayViewMut2};
use rand::Rng;

use super::{lit, Float, Linear, Module, Param};

fn softmax_rows<T: Float>(s: &mut Array2<T>) {
    for mut row in s.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

#[inline]
fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Gradient of the pre-softmax scores given probabilities `p` and `dL/dp`.
fn softmax_backward<T: Float>(p: &Array2<T>, dp: &Array2<T>) -> Array2<T> {
    let mut ds = dp.clone();
    for (mut g, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
        let dot = g.iter().zip(pr.iter()).map(|(&a, &b)| a * b).sum::<T>();
        for (v, &q) in g.iter_mut().zip(pr.iter()) {
            *v = q * (*v - dot);
        }
    }
    ds
}

/// Multi-head self-attention over `B` independent sequences stacked by rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention<T> {
    pub qkv: Linear<T>,
    pub out: Linear<T>,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct SelfAttentionCache<T> {
    x: Array2<T>,
    qkv: Array2<T>,
    probs: Vec<Array2<T>>,
    ctx: Array2<T>,
    batch: usize,
}

impl<T: Float> SelfAttention<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        Self {
            qkv: Linear::new(dim, 3 * dim, rng),
            out: Linear::new(dim, dim, rng),
            heads,
        }
    }

    fn dim(&self) -> usize {
        self.out.fan_in()
    }

    // Per-head loops run on raw slices: heads are tiny (L x d/h) and matrix
    // dispatch overhead would dominate.
    fn attend(&self, qkv: &Array2<T>, batch: usize, keep: bool) -> (Array2<T>, Vec<Array2<T>>) {
        let d = self.dim();
        let dh = d / self.heads;
        let len = qkv.nrows() / batch;
        let w = 3 * d;
        let scale = lit::<T>(1.0 / (dh as f64).sqrt());
        let src = qkv.as_slice().expect("standard layout");
        let mut ctx = Array2::zeros((qkv.nrows(), d));
        let out = ctx.as_slice_mut().expect("fresh array");
        let mut probs = Vec::with_capacity(if keep { batch * self.heads } else { 0 });
        let mut sc = Array2::zeros((len, len));
        for b in 0..batch {
            let r0 = b * len;
            for h in 0..self.heads {
                let (qc, kc, vc) = (h * dh, d + h * dh, 2 * d + h * dh);
                for i in 0..len {
                    let q = &src[(r0 + i) * w + qc..(r0 + i) * w + qc + dh];
                    for j in 0..len {
                        let k = &src[(r0 + j) * w + kc..(r0 + j) * w + kc + dh];
                        sc[[i, j]] = dot(q, k) * scale;
                    }
                }
                softmax_rows(&mut sc);
                for i in 0..len {
                    let o = &mut out[(r0 + i) * d + qc..(r0 + i) * d + qc + dh];
                    for j in 0..len {
                        let p = sc[[i, j]];
                        let v = &src[(r0 + j) * w + vc..(r0 + j) * w + vc + dh];
                        for (oc, &vv) in o.iter_mut().zip(v) {
                            *oc += p * vv;
                        }
                    }
                }
                if keep {
                    probs.push(sc.clone());
                }
            }
        }
        (ctx, probs)
    }

    /// `x` holds `batch` sequences of equal length stacked by rows.
    pub fn forward(&self, x: ArrayView2<T>, batch: usize) -> Array2<T> {
        let qkv = self.qkv.forward(x);
        let (ctx, _) = self.attend(&qkv, batch, false);
        self.out.forward(ctx.view())
    }

    pub fn forward_cached(&self, x: ArrayView2<T>, batch: usize) -> (Array2<T>, SelfAttentionCache<T>) {
        let qkv = self.qkv.forward(x);
        let (ctx, probs) = self.attend(&qkv, batch, true);
        let y = self.out.forward(ctx.view());
        (
            y,
            SelfAttentionCache {
                x: x.to_owned(),
                qkv,
                probs,
                ctx,
                batch,
            },
        )
    }

    pub fn backward(&mut self, cache: &SelfAttentionCache<T>, dy: ArrayView2<T>) -> Array2<T> {
        let d = self.dim();
        let dh = d / self.heads;
        let batch = cache.batch;
        let len = cache.qkv.nrows() / batch;
        let w = 3 * d;
        let scale = lit::<T>(1.0 / (dh as f64).sqrt());
        let dctx = self.out.backward(cache.ctx.view(), dy);
        let dc_all = dctx.as_slice().expect("standard layout");
        let src = cache.qkv.as_slice().expect("standard layout");
        let mut dqkv = Array2::zeros(cache.qkv.raw_dim());
        let dst = dqkv.as_slice_mut().expect("fresh array");
        let mut dp = Array2::zeros((len, len));
        for b in 0..batch {
            let r0 = b * len;
            for h in 0..self.heads {
                let p = &cache.probs[b * self.heads + h];
                let (qc, kc, vc) = (h * dh, d + h * dh, 2 * d + h * dh);
                for i in 0..len {
                    let dc = &dc_all[(r0 + i) * d + qc..(r0 + i) * d + qc + dh];
                    for j in 0..len {
                        let v = &src[(r0 + j) * w + vc..(r0 + j) * w + vc + dh];
                        dp[[i, j]] = dot(dc, v);
                        let pij = p[[i, j]];
                        let dv = &mut dst[(r0 + j) * w + vc..(r0 + j) * w + vc + dh];
                        for (g, &c) in dv.iter_mut().zip(dc) {
                            *g += pij * c;
                        }
                    }
                }
                let mut ds = softmax_backward(p, &dp);
                ds.mapv_inplace(|x| x * scale);
                for i in 0..len {
                    for j in 0..len {
                        let g = ds[[i, j]];
                        let k = &src[(r0 + j) * w + kc..(r0 + j) * w + kc + dh];
                        let dq = &mut dst[(r0 + i) * w + qc..(r0 + i) * w + qc + dh];
                        for (o, &kv) in dq.iter_mut().zip(k) {
                            *o += g * kv;
                        }
                        let q = &src[(r0 + i) * w + qc..(r0 + i) * w + qc + dh];
                        let dk = &mut dst[(r0 + j) * w + kc..(r0 + j) * w + kc + dh];
                        for (o, &qv) in dk.iter_mut().zip(q) {
                            *o += g * qv;
                        }
                    }
                }
            }
        }
        self.qkv.backward(cache.x.view(), dqkv.view())
    }

    pub fn cast<U: Float>(&self) -> SelfAttention<U> {
        SelfAttention {
            qkv: self.qkv.cast(),
            out: self.out.cast(),
            heads: self.heads,
        }
    }
}

impl<T: Float> Module<T> for SelfAttention<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.qkv.params();
        v.extend(self.out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.qkv.params_mut();
        v.extend(self.out.params_mut());
        v
    }
}

/// Single-head cross-attention with a residual on the query side:
/// `out = Q + softmax(Q K^T / sqrt(a)) V`, queries from `M` tokens per
/// sample, keys and values from that sample's `L` context rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention<T> {
    pub q: Linear<T>,
    pub kv: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct CrossAttentionCache<T> {
    tokens: Array2<T>,
    context: Array2<T>,
    q: Array2<T>,
    kv: Array2<T>,
    probs: Vec<Array2<T>>,
    batch: usize,
}

impl<T: Float> CrossAttention<T> {
    pub fn new<R: Rng + ?Sized>(token_dim: usize, context_dim: usize, attn_dim: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(token_dim, attn_dim, rng),
            kv: Linear::new(context_dim, 2 * attn_dim, rng),
        }
    }

    pub fn attn_dim(&self) -> usize {
        self.q.fan_out()
    }

    fn attend(&self, q: &Array2<T>, kv: &Array2<T>, batch: usize, keep: bool) -> (Array2<T>, Vec<Array2<T>>) {
        let a = self.attn_dim();
        let m = q.nrows() / batch;
        let len = kv.nrows() / batch;
        let scale = lit::<T>(1.0 / (a as f64).sqrt());
        let mut out = q.clone();
        let mut probs = Vec::new();
        for b in 0..batch {
            let qb = q.slice(s![b * m..(b + 1) * m, ..]);
            let k = kv.slice(s![b * len..(b + 1) * len, ..a]);
            let v = kv.slice(s![b * len..(b + 1) * len, a..]);
            let mut sc = qb.dot(&k.t());
            sc.mapv_inplace(|x| x * scale);
            softmax_rows(&mut sc);
            let mut ob: ArrayViewMut2<T> = out.slice_mut(s![b * m..(b + 1) * m, ..]);
            ob += &sc.dot(&v);
            if keep {
                probs.push(sc);
            }
        }
        (out, probs)
    }

    pub fn forward(&self, tokens: ArrayView2<T>, context: ArrayView2<T>, batch: usize) -> Array2<T> {
        let q = self.q.forward(tokens);
        let kv = self.kv.forward(context);
        self.attend(&q, &kv, batch, false).0
    }

    pub fn forward_cached(&self, tokens: ArrayView2<T>, context: ArrayView2<T>, batch: usize) -> (Array2<T>, CrossAttentionCache<T>) {
        let q = self.q.forward(tokens);
        let kv = self.kv.forward(context);
        let (out, probs) = self.attend(&q, &kv, batch, true);
        (
            out,
            CrossAttentionCache {
                tokens: tokens.to_owned(),
                context: context.to_owned(),
                q,
                kv,
                probs,
                batch,
            },
        )
    }

    /// Returns the gradients with respect to the tokens and the context.
    pub fn backward(&mut self, cache: &CrossAttentionCache<T>, dout: ArrayView2<T>) -> (Array2<T>, Array2<T>) {
        let a = self.attn_dim();
        let batch = cache.batch;
        let m = cache.q.nrows() / batch;
        let len = cache.kv.nrows() / batch;
        let scale = lit::<T>(1.0 / (a as f64).sqrt());
        let mut dq = dout.to_owned();
        let mut dkv = Array2::zeros(cache.kv.raw_dim());
        for b in 0..batch {
            let p = &cache.probs[b];
            let qb = cache.q.slice(s![b * m..(b + 1) * m, ..]);
            let k = cache.kv.slice(s![b * len..(b + 1) * len, ..a]);
            let v = cache.kv.slice(s![b * len..(b + 1) * len, a..]);
            let db = dout.slice(s![b * m..(b + 1) * m, ..]);
            let dp = db.dot(&v.t());
            dkv.slice_mut(s![b * len..(b + 1) * len, a..]).assign(&p.t().dot(&db));
            let mut ds = softmax_backward(p, &dp);
            ds.mapv_inplace(|x| x * scale);
            let mut dqb = dq.slice_mut(s![b * m..(b + 1) * m, ..]);
            dqb += &ds.dot(&k);
            dkv.slice_mut(s![b * len..(b + 1) * len, ..a]).assign(&ds.t().dot(&qb));
        }
        let dtokens = self.q.backward(cache.tokens.view(), dq.view());
        let dcontext = self.kv.backward(cache.context.view(), dkv.view());
        (dtokens, dcontext)
    }

    pub fn cast<U: Float>(&self) -> CrossAttention<U> {
        CrossAttention {
            q: self.q.cast(),
            kv: self.kv.cast(),
        }
    }
}

impl<T: Float> Module<T> for CrossAttention<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.q.params();
        v.extend(self.kv.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.q.params_mut();
        v.extend(self.kv.params_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

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

    fn close(a: &Array2<f64>, b: &Array2<f64>) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-6 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn self_attention_input_and_weight_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let att = SelfAttention::<f64>::new(8, 2, &mut rng);
        let x = random(2 * 5, 8, &mut rng);
        let w = random(2 * 5, 8, &mut rng);
        let num = numeric_grad(&x, |x| (att.forward(x.view(), 2) * &w).sum());
        let (y, cache) = att.forward_cached(x.view(), 2);
        assert_eq!(y, att.forward(x.view(), 2));
        let mut a2 = att.clone();
        let dx = a2.backward(&cache, w.view());
        close(&dx, &num);
        let num_w = numeric_grad(&att.qkv.w.value, |wv| {
            let mut a = att.clone();
            a.qkv.w.value = wv.clone();
            (a.forward(x.view(), 2) * &w).sum()
        });
        close(&a2.qkv.w.grad, &num_w);
    }

    #[test]
    fn sequences_do_not_interact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let att = SelfAttention::<f64>::new(8, 4, &mut rng);
        let x = random(3 * 4, 8, &mut rng);
        let full = att.forward(x.view(), 3);
        let second = att.forward(x.slice(s![4..8, ..]), 1);
        assert_eq!(full.slice(s![4..8, ..]), second);
    }

    #[test]
    fn cross_attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let att = CrossAttention::<f64>::new(3, 5, 6, &mut rng);
        let tokens = random(2 * 2, 3, &mut rng);
        let ctx = random(2 * 7, 5, &mut rng);
        let w = random(2 * 2, 6, &mut rng);
        let (_, cache) = att.forward_cached(tokens.view(), ctx.view(), 2);
        let mut a2 = att.clone();
        let (dt, dc) = a2.backward(&cache, w.view());
        close(&dt, &numeric_grad(&tokens, |t| (att.forward(t.view(), ctx.view(), 2) * &w).sum()));
        close(&dc, &numeric_grad(&ctx, |c| (att.forward(tokens.view(), c.view(), 2) * &w).sum()));
    }
}
