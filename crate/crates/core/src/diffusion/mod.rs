//! Low-level scorer: a subgoal-conditioned denoising diffusion model over
//! fixed-length legs in normalized coordinates. A leg is partially noised,
//! denoised back, and the mean squared displacement between the two is the
//! anomaly score.

mod net;
mod schedule;

pub use net::{blend, mse_with_grad, time_features, Conditioner, Denoiser, DiffusionNet, Dropout, NetDims, CONTEXT_POS_DIM};
pub use schedule::{forward_noise, make_schedule, NoiseSchedule};

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SubgoalGraph;
use crate::nn::{clip_grad_norm, Adam, AdamConfig, Module};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    /// Points per resampled leg.
    pub len: usize,
    pub latent: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub time_channels: usize,
    pub subgoal_dim: usize,
    pub context_dim: usize,
    pub steps: usize,
    pub beta_1: f64,
    pub beta_t: f64,
    pub rho: f64,
    /// Noise level reconstruction starts from.
    pub t_inf: usize,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps; 0 means no cap.
    pub max_steps: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self::synthetic()
    }
}

impl DiffusionConfig {
    /// Urban taxi profile.
    pub fn chengdu() -> Self {
        Self {
            len: 64,
            latent: 256,
            layers: 7,
            heads: 4,
            ff_mult: 2,
            time_channels: 4,
            subgoal_dim: 30,
            context_dim: 64,
            steps: 800,
            beta_1: 1e-4,
            beta_t: 0.02,
            rho: 0.4,
            t_inf: 200,
            dropout: 0.2,
            lr: 1e-4,
            batch_size: 128,
            epochs: 100,
            max_steps: 0,
            grad_clip: 1.0,
            seed: 0,
        }
    }

    /// Vessel profile.
    pub fn ais() -> Self {
        Self {
            latent: 128,
            rho: 0.8,
            t_inf: 600,
            ..Self::chengdu()
        }
    }

    /// Small network sized for the synthetic world on a single CPU core.
    pub fn synthetic() -> Self {
        Self {
            len: 16,
            latent: 32,
            layers: 3,
            heads: 4,
            t_inf: 25,
            dropout: 0.0,
            lr: 2e-3,
            epochs: 30,
            ..Self::chengdu()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.len < 2 {
            return Err(Error::param("len must be >= 2"));
        }
        if self.layers.is_multiple_of(2) {
            return Err(Error::param("layers must be odd (down, mid, up)"));
        }
        if self.heads == 0 || !self.latent.is_multiple_of(self.heads) {
            return Err(Error::param("latent must be a positive multiple of heads"));
        }
        if self.time_channels == 0 || !self.time_channels.is_multiple_of(2) {
            return Err(Error::param("time_channels must be a positive even number"));
        }
        if self.ff_mult == 0 || self.subgoal_dim == 0 || self.context_dim == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::param("widths, batch_size and epochs must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::param("rho must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::param("dropout must lie in [0, 1)"));
        }
        if self.t_inf > self.steps {
            return Err(Error::param(format!("t_inf {} exceeds T = {}", self.t_inf, self.steps)));
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::param("lr and grad_clip must be positive"));
        }
        make_schedule(self.steps, self.beta_1, self.beta_t).map(|_| ())
    }

    pub fn dims(&self) -> NetDims {
        NetDims {
            len: self.len,
            latent: self.latent,
            layers: self.layers,
            heads: self.heads,
            ff_mult: self.ff_mult,
            time_channels: self.time_channels,
            subgoal_dim: self.subgoal_dim,
            context_dim: self.context_dim,
            steps: self.steps,
        }
    }
}

/// Anything that predicts the injected noise for a stack of `B` legs
/// (`(B * L, 2)` rows, one step and one subgoal row of 4 per leg).
pub trait EpsilonModel {
    fn predict_eps(&self, x: &Array2<f64>, ts: &[usize], subgoals: &Array2<f64>) -> Array2<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel {
    pub cfg: DiffusionConfig,
    pub schedule: NoiseSchedule,
    pub net: DiffusionNet<f32>,
}

impl DiffusionModel {
    pub fn new(cfg: DiffusionConfig) -> Result<Self> {
        cfg.validate()?;
        let schedule = make_schedule(cfg.steps, cfg.beta_1, cfg.beta_t)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net = DiffusionNet::new(cfg.dims(), cfg.rho, &mut rng);
        Ok(Self { cfg, schedule, net })
    }

    pub fn n_params(&self) -> usize {
        self.net.n_params()
    }

    /// All parameters flattened in module order.
    pub fn param_vector(&self) -> Vec<f32> {
        self.net.params().iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    pub fn load_param_vector(&mut self, values: &[f32]) -> Result<()> {
        let n = self.n_params();
        if values.len() != n {
            return Err(Error::Checkpoint(format!("expected {n} parameters, found {}", values.len())));
        }
        let mut off = 0;
        for p in self.net.params_mut() {
            let k = p.len();
            for (dst, &src) in p.value.iter_mut().zip(&values[off..off + k]) {
                *dst = src;
            }
            off += k;
        }
        Ok(())
    }

    /// `c` for the given noisy stack, exposed for inspection.
    pub fn condition_blend(&self, x: &Array2<f64>, subgoals: &Array2<f64>) -> Array2<f64> {
        self.net.condition(&x.mapv(|v| v as f32), &subgoals.mapv(|v| v as f32)).mapv(f64::from)
    }
}

impl EpsilonModel for DiffusionModel {
    fn predict_eps(&self, x: &Array2<f64>, ts: &[usize], subgoals: &Array2<f64>) -> Array2<f64> {
        self.net.predict(&x.mapv(|v| v as f32), ts, &subgoals.mapv(|v| v as f32)).mapv(f64::from)
    }
}

/// Normalized centers of `(g_i, g_next)` as one row of 4.
pub fn subgoal_features(graph: &SubgoalGraph, g_i: usize, g_next: usize) -> Result<[f64; 4]> {
    let a = graph.node(g_i)?.center;
    let b = graph.node(g_next)?.center;
    Ok([a[0], a[1], b[0], b[1]])
}

/// One training or scoring example.
#[derive(Debug, Clone, PartialEq)]
pub struct LegSample {
    pub coords: Array2<f64>,
    pub subgoals: [f64; 4],
}

#[derive(Debug, Clone)]
pub struct DiffusionTraining {
    pub model: DiffusionModel,
    /// Mean loss of each epoch.
    pub loss_curve: Vec<f64>,
    pub steps: usize,
}

fn stack<'a>(legs: impl Iterator<Item = &'a Array2<f64>>) -> Array2<f64> {
    let views: Vec<ArrayView2<f64>> = legs.map(|l| l.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("legs share a width")
}

fn subgoal_rows<'a>(subs: impl Iterator<Item = &'a [f64; 4]>) -> Array2<f64> {
    let rows: Vec<[f64; 4]> = subs.copied().collect();
    Array2::from_shape_fn((rows.len(), 4), |(i, j)| rows[i][j])
}

/// Epochs of shuffled mini-batches; each sample gets its own uniform step
/// and fresh noise, the loss is the MSE between injected and predicted noise.
pub fn train_diffusion(legs: &[LegSample], cfg: &DiffusionConfig) -> Result<DiffusionTraining> {
    if legs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(bad) = legs.iter().find(|l| l.coords.dim() != (cfg.len, 2)) {
        return Err(Error::Shape(format!("leg {:?} does not match L = {}", bad.coords.dim(), cfg.len)));
    }
    let mut model = DiffusionModel::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() });
    let mut order: Vec<usize> = (0..legs.len()).collect();
    let mut curve = Vec::new();
    let mut steps = 0;
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        // tiny datasets still see a full batch per step
        let idx: Vec<usize> = if legs.len() < cfg.batch_size {
            (0..cfg.batch_size).map(|i| order[i % order.len()]).collect()
        } else {
            order.clone()
        };
        let (mut sum, mut count) = (0.0, 0);
        for chunk in idx.chunks(cfg.batch_size) {
            if cfg.max_steps > 0 && steps >= cfg.max_steps {
                break;
            }
            let loss = train_step(&mut model, legs, chunk, &mut opt, &mut rng)?;
            sum += loss;
            count += 1;
            steps += 1;
        }
        if count > 0 {
            curve.push(sum / count as f64);
        }
        if cfg.max_steps > 0 && steps >= cfg.max_steps {
            break 'epochs;
        }
    }
    log::info!("diffusion: {} params, {steps} steps, final epoch loss {:?}", model.n_params(), curve.last());
    Ok(DiffusionTraining { model, loss_curve: curve, steps })
}

fn train_step(model: &mut DiffusionModel, legs: &[LegSample], batch: &[usize], opt: &mut Adam, rng: &mut ChaCha8Rng) -> Result<f64> {
    let len = model.cfg.len;
    let ts: Vec<usize> = batch.iter().map(|_| rng.random_range(1..=model.cfg.steps)).collect();
    let x0 = stack(batch.iter().map(|&i| &legs[i].coords));
    let eps = Array2::from_shape_fn(x0.raw_dim(), |_| rng.sample::<f64, _>(StandardNormal));
    let mut xt = Array2::zeros(x0.raw_dim());
    for (b, &t) in ts.iter().enumerate() {
        let rows = s![b * len..(b + 1) * len, ..];
        xt.slice_mut(rows).assign(&forward_noise(x0.slice(rows), t, eps.slice(rows), &model.schedule)?);
    }
    let sub = subgoal_rows(batch.iter().map(|&i| &legs[i].subgoals)).mapv(|v| v as f32);
    let xt = xt.mapv(|v| v as f32);
    let eps = eps.mapv(|v| v as f32);
    let mut drop = (model.cfg.dropout > 0.0).then_some(Dropout { p: model.cfg.dropout, rng: &mut *rng });
    let (pred, cache) = model.net.predict_cached(&xt, &ts, &sub, &mut drop);
    let (loss, dy) = mse_with_grad(&pred, eps.view());
    model.net.zero_grad();
    model.net.backward(&cache, &dy);
    clip_grad_norm(model.net.params_mut(), model.cfg.grad_clip);
    opt.step(model.net.params_mut());
    if !loss.is_finite() {
        return Err(Error::param("diffusion loss diverged"));
    }
    Ok(loss)
}

/// Noises every leg to `t_inf` and runs the reverse chain back to step 0,
/// drawing all noise for leg `i` from `rngs[i]`. The result for each leg is
/// independent of which other legs share the batch.
pub fn reconstruct_batch<M: EpsilonModel, R: Rng>(
    model: &M,
    schedule: &NoiseSchedule,
    legs: &[&Array2<f64>],
    subgoals: &[[f64; 4]],
    t_inf: usize,
    rngs: &mut [R],
) -> Result<Vec<Array2<f64>>> {
    if legs.len() != subgoals.len() || legs.len() != rngs.len() {
        return Err(Error::Shape("legs, subgoals and rngs differ in count".into()));
    }
    if legs.is_empty() {
        return Ok(Vec::new());
    }
    let len = legs[0].nrows();
    if let Some(bad) = legs.iter().find(|l| l.dim() != (len, 2)) {
        return Err(Error::Shape(format!("leg {:?} does not match L = {len}", bad.dim())));
    }
    if t_inf == 0 {
        return Ok(legs.iter().map(|l| (*l).clone()).collect());
    }
    if t_inf > schedule.steps() {
        return Err(Error::param(format!("t_inf {t_inf} exceeds T = {}", schedule.steps())));
    }
    let normal = |rng: &mut R| Array2::from_shape_fn((len, 2), |_| rng.sample::<f64, _>(StandardNormal));
    let mut x = Array2::zeros((legs.len() * len, 2));
    for (b, (leg, rng)) in legs.iter().zip(rngs.iter_mut()).enumerate() {
        let eps = normal(rng);
        x.slice_mut(s![b * len..(b + 1) * len, ..]).assign(&forward_noise(leg.view(), t_inf, eps.view(), schedule)?);
    }
    let sub = subgoal_rows(subgoals.iter());
    for t in (1..=t_inf).rev() {
        let ts = vec![t; legs.len()];
        let eps_hat = model.predict_eps(&x, &ts, &sub);
        let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
        let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
        x = (&x - &(eps_hat * coef)) * inv_sqrt_alpha;
        if t > 1 {
            let sigma = schedule.beta_tilde(t).sqrt();
            for (b, rng) in rngs.iter_mut().enumerate() {
                let z = normal(rng);
                let mut rows = x.slice_mut(s![b * len..(b + 1) * len, ..]);
                rows.scaled_add(sigma, &z);
            }
        }
    }
    Ok((0..legs.len()).map(|b| x.slice(s![b * len..(b + 1) * len, ..]).to_owned()).collect())
}

/// Single-leg form of [`reconstruct_batch`].
pub fn reconstruct_with<M: EpsilonModel, R: Rng>(
    model: &M,
    schedule: &NoiseSchedule,
    leg: &Array2<f64>,
    subgoals: [f64; 4],
    t_inf: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let mut out = reconstruct_batch(model, schedule, &[leg], &[subgoals], t_inf, std::slice::from_mut(rng))?;
    Ok(out.pop().expect("one leg in, one out"))
}

pub fn reconstruct<R: Rng>(model: &DiffusionModel, leg: &Array2<f64>, subgoals: [f64; 4], t_inf: usize, rng: &mut R) -> Result<Array2<f64>> {
    if leg.nrows() != model.cfg.len {
        return Err(Error::Shape(format!("leg has {} points, model expects {}", leg.nrows(), model.cfg.len)));
    }
    reconstruct_with(model, &model.schedule, leg, subgoals, t_inf, rng)
}

/// Mean over positions of the squared Euclidean displacement.
pub fn recon_error(orig: ArrayView2<f64>, recon: ArrayView2<f64>) -> Result<f64> {
    if orig.dim() != recon.dim() || orig.nrows() == 0 {
        return Err(Error::Shape(format!("{:?} vs {:?}", orig.dim(), recon.dim())));
    }
    let sq: f64 = orig.iter().zip(recon.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / orig.nrows() as f64)
}
