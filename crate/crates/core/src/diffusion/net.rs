//! Noise-prediction network: a transformer denoiser with long skips and the
//! subgoal cross-attention conditioner that builds its input.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::nn::{
    dropout_mask, gelu, gelu_backward, lit, positional_encoding, silu, silu_backward, CrossAttention, CrossAttentionCache, Float,
    LayerNorm, LayerNormCache, Linear, Module, Param, SelfAttention, SelfAttentionCache,
};

/// Width of the sinusoidal position features appended to the conditioner's
/// keys and values.
pub const CONTEXT_POS_DIM: usize = 8;

/// Shapes of a [`DiffusionNet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetDims {
    pub len: usize,
    pub latent: usize,
    /// Total transformer blocks; odd, split into down / mid / up.
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub time_channels: usize,
    pub subgoal_dim: usize,
    pub context_dim: usize,
    pub steps: usize,
}

/// Per-step training context for dropout.
pub struct Dropout<'a, R: Rng + ?Sized> {
    pub p: f64,
    pub rng: &'a mut R,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    ln1: LayerNorm<T>,
    attn: SelfAttention<T>,
    ln2: LayerNorm<T>,
    ff1: Linear<T>,
    ff2: Linear<T>,
}

struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    attn: SelfAttentionCache<T>,
    mask1: Option<Array2<T>>,
    ln2: LayerNormCache<T>,
    b: Array2<T>,
    z: Array2<T>,
    g: Array2<T>,
    mask2: Option<Array2<T>>,
}

impl<T: Float> Block<T> {
    fn new<R: Rng + ?Sized>(d: usize, heads: usize, ff_mult: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(d),
            attn: SelfAttention::new(d, heads, rng),
            ln2: LayerNorm::new(d),
            ff1: Linear::new(d, ff_mult * d, rng),
            ff2: Linear::new(ff_mult * d, d, rng),
        }
    }

    fn forward(&self, h: &Array2<T>, batch: usize) -> Array2<T> {
        let a = self.ln1.forward(h.view());
        let h1 = h + &self.attn.forward(a.view(), batch);
        let b = self.ln2.forward(h1.view());
        let g = gelu(&self.ff1.forward(b.view()));
        h1 + self.ff2.forward(g.view())
    }

    fn forward_cached<R: Rng + ?Sized>(&self, h: &Array2<T>, batch: usize, drop: &mut Option<Dropout<'_, R>>) -> (Array2<T>, BlockCache<T>) {
        let mut mask = |rows: usize, cols: usize| match drop {
            Some(Dropout { p, rng }) if *p > 0.0 => Some(dropout_mask::<T, R>(rows, cols, *p, rng)),
            _ => None,
        };
        let (a, ln1) = self.ln1.forward_cached(h.view());
        let (mut att, attn) = self.attn.forward_cached(a.view(), batch);
        let mask1 = mask(att.nrows(), att.ncols());
        if let Some(m) = &mask1 {
            att *= m;
        }
        let h1 = h + &att;
        let (b, ln2) = self.ln2.forward_cached(h1.view());
        let z = self.ff1.forward(b.view());
        let g = gelu(&z);
        let mut f = self.ff2.forward(g.view());
        let mask2 = mask(f.nrows(), f.ncols());
        if let Some(m) = &mask2 {
            f *= m;
        }
        (
            h1 + f,
            BlockCache {
                ln1,
                attn,
                mask1,
                ln2,
                b,
                z,
                g,
                mask2,
            },
        )
    }

    fn backward(&mut self, c: &BlockCache<T>, dout: &Array2<T>) -> Array2<T> {
        let mut df = dout.clone();
        if let Some(m) = &c.mask2 {
            df *= m;
        }
        let dg = self.ff2.backward(c.g.view(), df.view());
        let dz = gelu_backward(&c.z, dg.view());
        let db = self.ff1.backward(c.b.view(), dz.view());
        let dh1 = dout + &self.ln2.backward(&c.ln2, db.view());
        let mut datt = dh1.clone();
        if let Some(m) = &c.mask1 {
            datt *= m;
        }
        let da = self.attn.backward(&c.attn, datt.view());
        dh1 + self.ln1.backward(&c.ln1, da.view())
    }

    fn cast<U: Float>(&self) -> Block<U> {
        Block {
            ln1: self.ln1.cast(),
            attn: self.attn.cast(),
            ln2: self.ln2.cast(),
            ff1: self.ff1.cast(),
            ff2: self.ff2.cast(),
        }
    }
}

impl<T: Float> Module<T> for Block<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.ln1.params();
        v.extend(self.attn.params());
        v.extend(self.ln2.params());
        v.extend(self.ff1.params());
        v.extend(self.ff2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.ln1.params_mut();
        v.extend(self.attn.params_mut());
        v.extend(self.ln2.params_mut());
        v.extend(self.ff1.params_mut());
        v.extend(self.ff2.params_mut());
        v
    }
}

/// Sinusoidal time features at frequencies `pi / (2T) * 4^k`, so the slowest
/// channel sweeps a quarter period over the whole schedule and no two steps
/// alias.
pub fn time_features<T: Float>(ts: &[usize], channels: usize, steps: usize) -> Array2<T> {
    let base = std::f64::consts::PI / (2.0 * steps as f64);
    Array2::from_shape_fn((ts.len(), channels), |(b, c)| {
        let w = base * 4f64.powi((c / 2) as i32);
        let a = w * ts[b] as f64;
        lit(if c % 2 == 0 { a.sin() } else { a.cos() })
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<T> {
    dims: NetDims,
    inp: Linear<T>,
    t1: Linear<T>,
    t2: Linear<T>,
    down: Vec<Block<T>>,
    mid: Block<T>,
    skip: Vec<Linear<T>>,
    up: Vec<Block<T>>,
    ln_f: LayerNorm<T>,
    out: Linear<T>,
    pe: Array2<T>,
}

struct DenoiserCache<T> {
    c: Array2<T>,
    tf: Array2<T>,
    te: Array2<T>,
    te_act: Array2<T>,
    down: Vec<BlockCache<T>>,
    mid: BlockCache<T>,
    skip_in: Vec<Array2<T>>,
    up: Vec<BlockCache<T>>,
    ln_f: LayerNormCache<T>,
    hf: Array2<T>,
}

impl<T: Float> Denoiser<T> {
    fn new<R: Rng + ?Sized>(dims: NetDims, rng: &mut R) -> Self {
        let d = dims.latent;
        let n_down = dims.layers / 2;
        let mut block = || Block::new(d, dims.heads, dims.ff_mult, rng);
        let down = (0..n_down).map(|_| block()).collect();
        let mid = block();
        let up = (0..n_down).map(|_| block()).collect();
        Self {
            dims,
            inp: Linear::new(2, d, rng),
            t1: Linear::new(dims.time_channels, d, rng),
            t2: Linear::new(d, d, rng),
            down,
            mid,
            skip: (0..n_down).map(|_| Linear::new(2 * d, d, rng)).collect(),
            up,
            ln_f: LayerNorm::new(d),
            out: Linear::new(d, 2, rng),
            pe: positional_encoding(dims.len, d),
        }
    }

    fn embed(&self, c: &Array2<T>, tf: &Array2<T>, batch: usize) -> (Array2<T>, Array2<T>, Array2<T>) {
        let len = self.dims.len;
        let te = self.t1.forward(tf.view());
        let te_act = silu(&te);
        let temb = self.t2.forward(te_act.view());
        let mut h = self.inp.forward(c.view());
        for b in 0..batch {
            let mut blk = h.slice_mut(s![b * len..(b + 1) * len, ..]);
            blk += &self.pe;
            blk += &temb.row(b);
        }
        (h, te, te_act)
    }

    fn forward(&self, c: &Array2<T>, ts: &[usize]) -> Array2<T> {
        let batch = ts.len();
        let tf = time_features(ts, self.dims.time_channels, self.dims.steps);
        let (mut h, _, _) = self.embed(c, &tf, batch);
        let mut skips = Vec::with_capacity(self.down.len());
        for blk in &self.down {
            h = blk.forward(&h, batch);
            skips.push(h.clone());
        }
        h = self.mid.forward(&h, batch);
        for (lin, blk) in self.skip.iter().zip(&self.up) {
            let sk = skips.pop().expect("one skip per up block");
            let cat = concatenate(Axis(1), &[h.view(), sk.view()]).expect("equal rows");
            h = blk.forward(&lin.forward(cat.view()), batch);
        }
        self.out.forward(self.ln_f.forward(h.view()).view())
    }

    fn forward_cached<R: Rng + ?Sized>(&self, c: &Array2<T>, ts: &[usize], drop: &mut Option<Dropout<'_, R>>) -> (Array2<T>, DenoiserCache<T>) {
        let batch = ts.len();
        let tf = time_features(ts, self.dims.time_channels, self.dims.steps);
        let (mut h, te, te_act) = self.embed(c, &tf, batch);
        let mut skips = Vec::new();
        let mut down = Vec::new();
        for blk in &self.down {
            let (o, cache) = blk.forward_cached(&h, batch, drop);
            down.push(cache);
            skips.push(o.clone());
            h = o;
        }
        let (o, mid) = self.mid.forward_cached(&h, batch, drop);
        h = o;
        let mut skip_in = Vec::new();
        let mut up = Vec::new();
        for (lin, blk) in self.skip.iter().zip(&self.up) {
            let sk = skips.pop().expect("one skip per up block");
            let cat = concatenate(Axis(1), &[h.view(), sk.view()]).expect("equal rows");
            let (o, cache) = blk.forward_cached(&lin.forward(cat.view()), batch, drop);
            skip_in.push(cat);
            up.push(cache);
            h = o;
        }
        let (hf, ln_f) = self.ln_f.forward_cached(h.view());
        let y = self.out.forward(hf.view());
        (
            y,
            DenoiserCache {
                c: c.clone(),
                tf,
                te,
                te_act,
                down,
                mid,
                skip_in,
                up,
                ln_f,
                hf,
            },
        )
    }

    /// Returns the gradient with respect to the conditioned input `c`.
    fn backward(&mut self, cache: &DenoiserCache<T>, dy: &Array2<T>) -> Array2<T> {
        let d = self.dims.latent;
        let len = self.dims.len;
        let dhf = self.out.backward(cache.hf.view(), dy.view());
        let mut dh = self.ln_f.backward(&cache.ln_f, dhf.view());
        let n_down = self.down.len();
        let mut dskips: Vec<Array2<T>> = Vec::with_capacity(n_down);
        for j in (0..n_down).rev() {
            let dlin = self.up[j].backward(&cache.up[j], &dh);
            let dcat = self.skip[j].backward(cache.skip_in[j].view(), dlin.view());
            dh = dcat.slice(s![.., ..d]).to_owned();
            // up block j consumed the skip of down block n_down - 1 - j
            dskips.push(dcat.slice(s![.., d..]).to_owned());
        }
        dh = self.mid.backward(&cache.mid, &dh);
        for i in (0..n_down).rev() {
            dh += &dskips[n_down - 1 - i];
            dh = self.down[i].backward(&cache.down[i], &dh);
        }
        let batch = cache.tf.nrows();
        let mut dtemb = Array2::zeros((batch, d));
        for b in 0..batch {
            dtemb.row_mut(b).assign(&dh.slice(s![b * len..(b + 1) * len, ..]).sum_axis(Axis(0)));
        }
        let dte_act = self.t2.backward(cache.te_act.view(), dtemb.view());
        let dte = silu_backward(&cache.te, dte_act.view());
        self.t1.backward_params(cache.tf.view(), dte.view());
        self.inp.backward(cache.c.view(), dh.view())
    }

    fn cast<U: Float>(&self) -> Denoiser<U> {
        Denoiser {
            dims: self.dims,
            inp: self.inp.cast(),
            t1: self.t1.cast(),
            t2: self.t2.cast(),
            down: self.down.iter().map(Block::cast).collect(),
            mid: self.mid.cast(),
            skip: self.skip.iter().map(Linear::cast).collect(),
            up: self.up.iter().map(Block::cast).collect(),
            ln_f: self.ln_f.cast(),
            out: self.out.cast(),
            pe: positional_encoding(self.dims.len, self.dims.latent),
        }
    }
}

impl<T: Float> Module<T> for Denoiser<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.inp.params();
        v.extend(self.t1.params());
        v.extend(self.t2.params());
        for b in &self.down {
            v.extend(b.params());
        }
        v.extend(self.mid.params());
        for (l, b) in self.skip.iter().zip(&self.up) {
            v.extend(l.params());
            v.extend(b.params());
        }
        v.extend(self.ln_f.params());
        v.extend(self.out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.inp.params_mut();
        v.extend(self.t1.params_mut());
        v.extend(self.t2.params_mut());
        for b in &mut self.down {
            v.extend(b.params_mut());
        }
        v.extend(self.mid.params_mut());
        for (l, b) in self.skip.iter_mut().zip(&mut self.up) {
            v.extend(l.params_mut());
            v.extend(b.params_mut());
        }
        v.extend(self.ln_f.params_mut());
        v.extend(self.out.params_mut());
        v
    }
}

/// Subgoal cross-attention branch. Two subgoal tokens attend over the noisy
/// leg; the attended tokens are mean-pooled and projected to an `(L, 2)`
/// trajectory-shaped output.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioner<T> {
    dims: NetDims,
    enc: Linear<T>,
    attn: CrossAttention<T>,
    proj: Linear<T>,
    pos: Array2<T>,
}

struct ConditionerCache<T> {
    sub: Array2<T>,
    e: Array2<T>,
    attn: CrossAttentionCache<T>,
    pooled: Array2<T>,
}

impl<T: Float> Conditioner<T> {
    fn new<R: Rng + ?Sized>(dims: NetDims, rng: &mut R) -> Self {
        Self {
            dims,
            enc: Linear::new(4, 2 * dims.subgoal_dim, rng),
            attn: CrossAttention::new(dims.subgoal_dim, 2 + CONTEXT_POS_DIM, dims.context_dim, rng),
            proj: Linear::new(dims.context_dim, 2 * dims.len, rng),
            pos: positional_encoding(dims.len, CONTEXT_POS_DIM),
        }
    }

    fn context(&self, x: &Array2<T>, batch: usize) -> Array2<T> {
        let len = self.dims.len;
        let mut ctx = Array2::zeros((x.nrows(), 2 + CONTEXT_POS_DIM));
        ctx.slice_mut(s![.., ..2]).assign(x);
        for b in 0..batch {
            ctx.slice_mut(s![b * len..(b + 1) * len, 2..]).assign(&self.pos);
        }
        ctx
    }

    fn tokens(e: &Array2<T>, sd: usize) -> Array2<T> {
        let batch = e.nrows();
        silu(e).into_shape_with_order((2 * batch, sd)).expect("two tokens per sample")
    }

    fn pool(out: &Array2<T>) -> Array2<T> {
        let batch = out.nrows() / 2;
        let half = lit::<T>(0.5);
        Array2::from_shape_fn((batch, out.ncols()), |(b, j)| (out[[2 * b, j]] + out[[2 * b + 1, j]]) * half)
    }

    /// Attention branch output `A`, shaped like `x`.
    pub fn forward(&self, x: &Array2<T>, sub: &Array2<T>) -> Array2<T> {
        let batch = sub.nrows();
        let e = self.enc.forward(sub.view());
        let tok = Self::tokens(&e, self.dims.subgoal_dim);
        let out = self.attn.forward(tok.view(), self.context(x, batch).view(), batch);
        let a = self.proj.forward(Self::pool(&out).view());
        a.into_shape_with_order((batch * self.dims.len, 2)).expect("L x 2 per sample")
    }

    fn forward_cached(&self, x: &Array2<T>, sub: &Array2<T>) -> (Array2<T>, ConditionerCache<T>) {
        let batch = sub.nrows();
        let e = self.enc.forward(sub.view());
        let tok = Self::tokens(&e, self.dims.subgoal_dim);
        let (out, attn) = self.attn.forward_cached(tok.view(), self.context(x, batch).view(), batch);
        let pooled = Self::pool(&out);
        let a = self.proj.forward(pooled.view());
        (
            a.into_shape_with_order((batch * self.dims.len, 2)).expect("L x 2 per sample"),
            ConditionerCache {
                sub: sub.clone(),
                e,
                attn,
                pooled,
            },
        )
    }

    fn backward(&mut self, cache: &ConditionerCache<T>, da: &Array2<T>) {
        let batch = cache.sub.nrows();
        let sd = self.dims.subgoal_dim;
        let da = da.to_shape((batch, 2 * self.dims.len)).expect("L x 2 per sample").to_owned();
        let dpooled = self.proj.backward(cache.pooled.view(), da.view());
        let half = lit::<T>(0.5);
        let dout = Array2::from_shape_fn((2 * batch, dpooled.ncols()), |(r, j)| dpooled[[r / 2, j]] * half);
        let (dtok, _) = self.attn.backward(&cache.attn, dout.view());
        let dtok = dtok.into_shape_with_order((batch, 2 * sd)).expect("two tokens per sample");
        let de = silu_backward(&cache.e, dtok.view());
        self.enc.backward_params(cache.sub.view(), de.view());
    }

    fn cast<U: Float>(&self) -> Conditioner<U> {
        Conditioner {
            dims: self.dims,
            enc: self.enc.cast(),
            attn: self.attn.cast(),
            proj: self.proj.cast(),
            pos: positional_encoding(self.dims.len, CONTEXT_POS_DIM),
        }
    }
}

impl<T: Float> Module<T> for Conditioner<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.enc.params();
        v.extend(self.attn.params());
        v.extend(self.proj.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.enc.params_mut();
        v.extend(self.attn.params_mut());
        v.extend(self.proj.params_mut());
        v
    }
}

/// `c = rho * a + (1 - rho) * x`; `rho == 0` returns `x` unchanged.
pub fn blend<T: Float>(a: &Array2<T>, x: &Array2<T>, rho: f64) -> Array2<T> {
    if rho == 0.0 {
        return x.clone();
    }
    a * lit::<T>(rho) + x * lit::<T>(1.0 - rho)
}

/// Conditioner plus denoiser: `eps_hat = denoiser(blend(cond(x_t, g), x_t), t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionNet<T> {
    pub dims: NetDims,
    pub rho: f64,
    pub denoiser: Denoiser<T>,
    pub conditioner: Conditioner<T>,
}

pub struct NetCache<T> {
    den: DenoiserCache<T>,
    cond: Option<ConditionerCache<T>>,
}

impl<T: Float> DiffusionNet<T> {
    pub fn new<R: Rng + ?Sized>(dims: NetDims, rho: f64, rng: &mut R) -> Self {
        assert!(dims.layers % 2 == 1, "layer count must be odd");
        assert!(dims.latent.is_multiple_of(dims.heads), "latent must divide into heads");
        let conditioner = Conditioner::new(dims, rng);
        let denoiser = Denoiser::new(dims, rng);
        Self {
            dims,
            rho,
            denoiser,
            conditioner,
        }
    }

    /// Blended denoiser input for `x` stacked as `(B * L, 2)`.
    pub fn condition(&self, x: &Array2<T>, sub: &Array2<T>) -> Array2<T> {
        if self.rho == 0.0 {
            return x.clone();
        }
        blend(&self.conditioner.forward(x, sub), x, self.rho)
    }

    pub fn predict(&self, x: &Array2<T>, ts: &[usize], sub: &Array2<T>) -> Array2<T> {
        self.denoiser.forward(&self.condition(x, sub), ts)
    }

    pub fn predict_cached<R: Rng + ?Sized>(
        &self,
        x: &Array2<T>,
        ts: &[usize],
        sub: &Array2<T>,
        drop: &mut Option<Dropout<'_, R>>,
    ) -> (Array2<T>, NetCache<T>) {
        let (c, cond) = if self.rho == 0.0 {
            (x.clone(), None)
        } else {
            let (a, cache) = self.conditioner.forward_cached(x, sub);
            (blend(&a, x, self.rho), Some(cache))
        };
        let (y, den) = self.denoiser.forward_cached(&c, ts, drop);
        (y, NetCache { den, cond })
    }

    pub fn backward(&mut self, cache: &NetCache<T>, dy: &Array2<T>) {
        let dc = self.denoiser.backward(&cache.den, dy);
        if let Some(cc) = &cache.cond {
            let da = dc * lit::<T>(self.rho);
            self.conditioner.backward(cc, &da);
        }
    }

    pub fn cast<U: Float>(&self) -> DiffusionNet<U> {
        DiffusionNet {
            dims: self.dims,
            rho: self.rho,
            denoiser: self.denoiser.cast(),
            conditioner: self.conditioner.cast(),
        }
    }
}

impl<T: Float> Module<T> for DiffusionNet<T> {
    /// Conditioner parameters first, then the denoiser's.
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.conditioner.params();
        v.extend(self.denoiser.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.conditioner.params_mut();
        v.extend(self.denoiser.params_mut());
        v
    }
}

/// Mean squared error over every element, with its gradient.
pub fn mse_with_grad<T: Float>(pred: &Array2<T>, target: ArrayView2<T>) -> (f64, Array2<T>) {
    let n = pred.len() as f64;
    let diff = pred - &target;
    let loss = diff.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>() / n;
    (loss, diff * lit::<T>(2.0 / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> NetDims {
        NetDims {
            len: 6,
            latent: 8,
            layers: 1,
            heads: 2,
            ff_mult: 2,
            time_channels: 4,
            subgoal_dim: 5,
            context_dim: 6,
            steps: 50,
        }
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    fn loss(net: &DiffusionNet<f64>, x: &Array2<f64>, ts: &[usize], sub: &Array2<f64>, eps: &Array2<f64>) -> f64 {
        mse_with_grad(&net.predict(x, ts, sub), eps.view()).0
    }

    fn gradient_check(dims: NetDims, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = DiffusionNet::<f64>::new(dims, 0.4, &mut rng);
        let batch = 2;
        let x = random(batch * dims.len, 2, &mut rng);
        let sub = random(batch, 4, &mut rng);
        let eps = random(batch * dims.len, 2, &mut rng);
        let ts = [3, 41];

        let mut trained = net.clone();
        let (y, cache) = trained.predict_cached::<ChaCha8Rng>(&x, &ts, &sub, &mut None);
        let (_, dy) = mse_with_grad(&y, eps.view());
        trained.zero_grad();
        trained.backward(&cache, &dy);

        let h = 1e-6;
        let n_params = net.params().len();
        let mut checked = 0;
        for pi in 0..n_params {
            let shape = net.params()[pi].value.dim();
            for _ in 0..3 {
                let (i, j) = (rng.random_range(0..shape.0), rng.random_range(0..shape.1));
                let mut plus = net.clone();
                plus.params_mut()[pi].value[[i, j]] += h;
                let mut minus = net.clone();
                minus.params_mut()[pi].value[[i, j]] -= h;
                let num = (loss(&plus, &x, &ts, &sub, &eps) - loss(&minus, &x, &ts, &sub, &eps)) / (2.0 * h);
                let ana = trained.params()[pi].grad[[i, j]];
                let scale = ana.abs().max(num.abs());
                if scale < 1e-7 {
                    continue;
                }
                assert!((ana - num).abs() <= 1e-3 * scale, "param {pi} ({i},{j}): {ana} vs {num}");
                checked += 1;
            }
        }
        assert!(checked > n_params);
    }

    #[test]
    fn gradients_match_finite_differences_tiny() {
        gradient_check(tiny(), 1);
    }

    #[test]
    fn gradients_match_finite_differences_with_skips() {
        gradient_check(NetDims { layers: 3, ..tiny() }, 2);
    }

    #[test]
    fn output_shape_matches_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (len, latent) in [(4, 8), (9, 12), (16, 16)] {
            let dims = NetDims { len, latent, layers: 3, ..tiny() };
            let net = DiffusionNet::<f32>::new(dims, 0.8, &mut rng);
            let x = Array2::<f32>::zeros((3 * len, 2));
            let sub = Array2::<f32>::zeros((3, 4));
            assert_eq!(net.predict(&x, &[1, 2, 3], &sub).dim(), (3 * len, 2));
            assert_eq!(net.conditioner.forward(&x, &sub).dim(), (3 * len, 2));
        }
    }

    #[test]
    fn blend_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(5, 2, &mut rng);
        let x = random(5, 2, &mut rng);
        assert_eq!(blend(&a, &x, 0.0), x);
        let b = blend(&a, &x, 0.4);
        for ((o, &ai), &xi) in b.iter().zip(&a).zip(&x) {
            assert!((o - (0.4 * ai + 0.6 * xi)).abs() < 1e-15);
        }
        assert_eq!(blend(&a, &x, 1.0), a);
    }

    #[test]
    fn batched_prediction_equals_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = NetDims { layers: 3, latent: 16, heads: 4, len: 8, ..tiny() };
        let net = DiffusionNet::<f32>::new(dims, 0.4, &mut rng);
        let x = random(3 * 8, 2, &mut rng).mapv(|v| v as f32);
        let sub = random(3, 4, &mut rng).mapv(|v| v as f32);
        let all = net.predict(&x, &[5, 9, 30], &sub);
        let one = net.predict(&x.slice(s![8..16, ..]).to_owned(), &[9], &sub.slice(s![1..2, ..]).to_owned());
        assert_eq!(all.slice(s![8..16, ..]), one);
    }
}
