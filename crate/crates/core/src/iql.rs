//! High-level scorer: a Q-function over (subgoal, next subgoal) pairs learned
//! from expert subgoal sequences by inverse soft-Q learning with a chi-squared
//! regularizer. Dynamics are deterministic (the next state is the chosen
//! subgoal) and the soft value ranges over every graph node.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SubgoalGraph;
use crate::nn::{silu, silu_backward, Adam, AdamConfig, Linear, Module, Param};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QRepresentation {
    Tabular,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IqlConfig {
    /// Discount of the subgoal MDP.
    pub gamma_d: f64,
    /// Weight of the chi-squared regularizer.
    pub alpha_reg: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub representation: QRepresentation,
    /// Node embedding width of the MLP backend.
    pub embed_dim: usize,
    pub hidden: usize,
    /// Stop once the epoch loss improved by less than `min_rel_improvement`
    /// (relative) over the last `patience` epochs.
    pub patience: usize,
    pub min_rel_improvement: f64,
}

impl Default for IqlConfig {
    fn default() -> Self {
        Self {
            gamma_d: 0.99,
            alpha_reg: 0.5,
            lr: 1e-2,
            epochs: 400,
            batch_size: 128,
            seed: 0,
            representation: QRepresentation::Tabular,
            embed_dim: 30,
            hidden: 64,
            patience: 10,
            min_rel_improvement: 1e-5,
        }
    }
}

impl IqlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma_d) {
            return Err(Error::param("gamma_d must lie in [0, 1)"));
        }
        if !(self.alpha_reg > 0.0) || !(self.lr > 0.0) {
            return Err(Error::param("alpha_reg and lr must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.embed_dim == 0 || self.hidden == 0 {
            return Err(Error::param("epochs, batch_size, embed_dim and hidden must be >= 1"));
        }
        Ok(())
    }
}

/// Expert transitions. `next_states[i] == actions[i]` for every row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransitionBatch {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub next_states: Vec<usize>,
    pub is_terminal: Vec<bool>,
    pub initial_states: Vec<usize>,
}

impl TransitionBatch {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn push(&mut self, s: usize, a: usize, terminal: bool) {
        self.states.push(s);
        self.actions.push(a);
        self.next_states.push(a);
        self.is_terminal.push(terminal);
    }

    /// All transitions of the given sequences; the last transition of each
    /// sequence is terminal and each sequence contributes its first subgoal
    /// as an initial state.
    pub fn from_sequences(seqs: &[Vec<usize>]) -> Self {
        let mut b = Self::default();
        for seq in seqs {
            if seq.len() < 2 {
                continue;
            }
            for (i, w) in seq.windows(2).enumerate() {
                b.push(w[0], w[1], i + 2 == seq.len());
            }
            b.initial_states.push(seq[0]);
        }
        b
    }
}

/// `log(sum(exp(row)))` shifted by the row maximum.
pub fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Chi-squared concave transform of the implicit reward.
#[inline]
pub fn chi2_phi(r: f64, alpha: f64) -> f64 {
    r - r * r / (4.0 * alpha)
}

/// Loss and its gradient with respect to the full `(V, V)` Q matrix.
pub fn iql_loss_and_grad(q: &Array2<f64>, batch: &TransitionBatch, cfg: &IqlConfig) -> Result<(f64, Array2<f64>)> {
    let n = q.nrows();
    if batch.is_empty() || batch.initial_states.is_empty() {
        return Err(Error::param("transition batch is empty"));
    }
    let check = |id: usize| if id < n { Ok(()) } else { Err(Error::UnknownNode(id)) };
    let rows: Vec<Vec<f64>> = q.rows().into_iter().map(|r| r.to_vec()).collect();
    let values: Vec<f64> = rows.iter().map(|r| logsumexp(r)).collect();
    let gamma = cfg.gamma_d;

    // dL/dV per state, then chain through the softmax of each row
    let mut dv = vec![0.0; n];
    let mut grad = Array2::zeros((n, n));
    let inv_n = 1.0 / batch.len() as f64;
    let mut expert = 0.0;
    for i in 0..batch.len() {
        let (s, a, s1) = (batch.states[i], batch.actions[i], batch.next_states[i]);
        check(s)?;
        check(a)?;
        check(s1)?;
        let v_next = if batch.is_terminal[i] { 0.0 } else { values[s1] };
        let r = q[[s, a]] - gamma * v_next;
        expert += chi2_phi(r, cfg.alpha_reg);
        let dphi = 1.0 - r / (2.0 * cfg.alpha_reg);
        grad[[s, a]] -= inv_n * dphi;
        if !batch.is_terminal[i] {
            dv[s1] += inv_n * gamma * dphi;
        }
    }
    let inv_m = 1.0 / batch.initial_states.len() as f64;
    let mut init = 0.0;
    for &s0 in &batch.initial_states {
        check(s0)?;
        init += values[s0];
        dv[s0] += (1.0 - gamma) * inv_m;
    }
    for (s, &g) in dv.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let v = values[s];
        for (a, &qv) in rows[s].iter().enumerate() {
            grad[[s, a]] += g * (qv - v).exp();
        }
    }
    let loss = -(expert * inv_n - (1.0 - gamma) * init * inv_m);
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
struct MlpQ {
    emb: Param<f64>,
    l1: Linear<f64>,
    l2: Linear<f64>,
    out: Linear<f64>,
}

struct MlpCache {
    input: Array2<f64>,
    z1: Array2<f64>,
    h1: Array2<f64>,
    z2: Array2<f64>,
    h2: Array2<f64>,
}

impl MlpQ {
    fn new(n: usize, embed: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            emb: Param::uniform(n, embed, 1.0, rng),
            l1: Linear::new(2 * embed, hidden, rng),
            l2: Linear::new(hidden, hidden, rng),
            out: Linear::new(hidden, 1, rng),
        }
    }

    fn pair_inputs(&self) -> Array2<f64> {
        let (n, e) = self.emb.value.dim();
        let mut x = Array2::zeros((n * n, 2 * e));
        for s in 0..n {
            for a in 0..n {
                let mut row = x.row_mut(s * n + a);
                row.slice_mut(ndarray::s![..e]).assign(&self.emb.value.row(s));
                row.slice_mut(ndarray::s![e..]).assign(&self.emb.value.row(a));
            }
        }
        x
    }

    fn forward(&self) -> (Array2<f64>, MlpCache) {
        let n = self.emb.value.nrows();
        let input = self.pair_inputs();
        let z1 = self.l1.forward(input.view());
        let h1 = silu(&z1);
        let z2 = self.l2.forward(h1.view());
        let h2 = silu(&z2);
        let y = self.out.forward(h2.view());
        let q = y.into_shape_with_order((n, n)).expect("n*n outputs");
        (q, MlpCache { input, z1, h1, z2, h2 })
    }

    fn backward(&mut self, cache: &MlpCache, dq: &Array2<f64>) {
        let n = self.emb.value.nrows();
        let e = self.emb.value.ncols();
        let dy = dq.to_shape((n * n, 1)).expect("square").to_owned();
        let dh2 = self.out.backward(cache.h2.view(), dy.view());
        let dz2 = silu_backward(&cache.z2, dh2.view());
        let dh1 = self.l2.backward(cache.h1.view(), dz2.view());
        let dz1 = silu_backward(&cache.z1, dh1.view());
        let dx = self.l1.backward(cache.input.view(), dz1.view());
        for s in 0..n {
            for a in 0..n {
                let row = dx.row(s * n + a);
                let mut gs = self.emb.grad.row_mut(s);
                gs += &row.slice(ndarray::s![..e]);
                let mut ga = self.emb.grad.row_mut(a);
                ga += &row.slice(ndarray::s![e..]);
            }
        }
    }
}

impl Module<f64> for MlpQ {
    fn params(&self) -> Vec<&Param<f64>> {
        let mut v = vec![&self.emb];
        v.extend(self.l1.params());
        v.extend(self.l2.params());
        v.extend(self.out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        let mut v = vec![&mut self.emb];
        v.extend(self.l1.params_mut());
        v.extend(self.l2.params_mut());
        v.extend(self.out.params_mut());
        v
    }
}

// one per model, so the inline MLP costs nothing worth boxing
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
enum Backend {
    Tabular(Param<f64>),
    Mlp(MlpQ),
}

/// Q over every ordered pair of graph nodes. The `(V, V)` table is kept in
/// sync with the parameters so scoring is a read.
#[derive(Debug, Clone, PartialEq)]
pub struct QFunction {
    backend: Backend,
    table: Array2<f64>,
}

impl QFunction {
    pub fn tabular(n_nodes: usize) -> Self {
        Self::from_table(Array2::zeros((n_nodes, n_nodes)))
    }

    pub fn from_table(table: Array2<f64>) -> Self {
        Self {
            backend: Backend::Tabular(Param::new(table.clone())),
            table,
        }
    }

    pub fn mlp(n_nodes: usize, embed_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = MlpQ::new(n_nodes, embed_dim, hidden, &mut rng);
        let table = net.forward().0;
        Self {
            backend: Backend::Mlp(net),
            table,
        }
    }

    pub fn new(n_nodes: usize, cfg: &IqlConfig) -> Self {
        match cfg.representation {
            QRepresentation::Tabular => Self::tabular(n_nodes),
            QRepresentation::Mlp => Self::mlp(n_nodes, cfg.embed_dim, cfg.hidden, cfg.seed),
        }
    }

    pub fn representation(&self) -> QRepresentation {
        match self.backend {
            Backend::Tabular(_) => QRepresentation::Tabular,
            Backend::Mlp(_) => QRepresentation::Mlp,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.table.nrows()
    }

    pub fn table(&self) -> &Array2<f64> {
        &self.table
    }

    /// `(embed_dim, hidden)` of the MLP backend.
    pub fn mlp_dims(&self) -> Option<(usize, usize)> {
        match &self.backend {
            Backend::Mlp(m) => Some((m.emb.value.ncols(), m.l1.fan_out())),
            Backend::Tabular(_) => None,
        }
    }

    pub fn q(&self, s: usize, a: usize) -> Result<f64> {
        let n = self.n_nodes();
        if s >= n {
            return Err(Error::UnknownNode(s));
        }
        if a >= n {
            return Err(Error::UnknownNode(a));
        }
        Ok(self.table[[s, a]])
    }

    /// Parameter blocks in checkpoint order.
    pub fn param_values(&self) -> Vec<&Array2<f64>> {
        match &self.backend {
            Backend::Tabular(p) => vec![&p.value],
            Backend::Mlp(m) => m.params().into_iter().map(|p| &p.value).collect(),
        }
    }

    pub fn param_values_mut(&mut self) -> Vec<&mut Array2<f64>> {
        match &mut self.backend {
            Backend::Tabular(p) => vec![&mut p.value],
            Backend::Mlp(m) => m.params_mut().into_iter().map(|p| &mut p.value).collect(),
        }
    }

    /// Recomputes the cached table after parameters changed.
    pub fn refresh(&mut self) {
        self.table = match &self.backend {
            Backend::Tabular(p) => p.value.clone(),
            Backend::Mlp(m) => m.forward().0,
        };
    }

    fn round_to_f32(&mut self) {
        for v in self.param_values_mut() {
            v.mapv_inplace(|x| x as f32 as f64);
        }
        self.refresh();
    }

    /// One Adam step on `batch`; returns the loss before the step.
    fn train_step(&mut self, batch: &TransitionBatch, cfg: &IqlConfig, opt: &mut Adam) -> Result<f64> {
        match &mut self.backend {
            Backend::Tabular(p) => {
                let (loss, grad) = iql_loss_and_grad(&p.value, batch, cfg)?;
                p.grad = grad;
                opt.step(vec![p]);
                self.table = p.value.clone();
                Ok(loss)
            }
            Backend::Mlp(m) => {
                let (q, cache) = m.forward();
                let (loss, grad) = iql_loss_and_grad(&q, batch, cfg)?;
                m.zero_grad();
                m.backward(&cache, &grad);
                opt.step(m.params_mut());
                self.table = m.forward().0;
                Ok(loss)
            }
        }
    }
}

/// Soft value over `action_set`.
pub fn soft_value(q: &QFunction, s: usize, action_set: &[usize]) -> Result<f64> {
    if action_set.is_empty() {
        return Err(Error::param("action set is empty"));
    }
    let row = action_set.iter().map(|&a| q.q(s, a)).collect::<Result<Vec<_>>>()?;
    Ok(logsumexp(&row))
}

pub fn iql_loss(q: &QFunction, batch: &TransitionBatch, cfg: &IqlConfig) -> Result<f64> {
    Ok(iql_loss_and_grad(q.table(), batch, cfg)?.0)
}

pub fn score_transition(q: &QFunction, g_i: usize, g_next: usize) -> Result<f64> {
    q.q(g_i, g_next)
}

#[derive(Debug, Clone)]
pub struct IqlTraining {
    pub q: QFunction,
    /// Full-data loss after every epoch.
    pub loss_curve: Vec<f64>,
}

/// Minimizes the inverse soft-Q objective on the expert sequences with Adam.
/// Every epoch shuffles the transitions into mini-batches; each mini-batch
/// takes the first subgoals of its rows' sequences as initial states.
pub fn train_iql(seqs: &[Vec<usize>], graph: &SubgoalGraph, cfg: &IqlConfig) -> Result<IqlTraining> {
    cfg.validate()?;
    let n = graph.n_nodes();
    let mut rows: Vec<(usize, usize, bool, usize)> = Vec::new();
    for seq in seqs {
        if seq.len() < 2 {
            return Err(Error::param("subgoal sequences need at least 2 subgoals"));
        }
        for (i, w) in seq.windows(2).enumerate() {
            if w[0] >= n || w[1] >= n {
                return Err(Error::UnknownNode(w[0].max(w[1])));
            }
            if !graph.has_edge(w[0], w[1]) {
                return Err(Error::OffGraphTransition { from: w[0], to: w[1] });
            }
            rows.push((w[0], w[1], i + 2 == seq.len(), seq[0]));
        }
    }
    if rows.is_empty() {
        return Err(Error::param("no expert transitions"));
    }
    let full = TransitionBatch::from_sequences(seqs);

    let mut q = QFunction::new(n, cfg);
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve: Vec<f64> = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = TransitionBatch::default();
            for &i in chunk {
                let (s, a, term, s0) = rows[i];
                batch.push(s, a, term);
                batch.initial_states.push(s0);
            }
            q.train_step(&batch, cfg, &mut opt)?;
        }
        let loss = iql_loss(&q, &full, cfg)?;
        if !loss.is_finite() {
            return Err(Error::param(format!("IQL loss diverged at epoch {epoch}")));
        }
        curve.push(loss);
        if curve.len() > cfg.patience {
            let then = curve[curve.len() - 1 - cfg.patience];
            if (then - loss) / then.abs().max(1e-12) < cfg.min_rel_improvement {
                log::debug!("IQL plateau after {} epochs", curve.len());
                break;
            }
        }
    }
    q.round_to_f32();
    Ok(IqlTraining { q, loss_curve: curve })
}

/// Greedy action per state, over all nodes.
pub fn greedy_actions(q: &QFunction) -> Array1<usize> {
    q.table()
        .map_axis(Axis(1), |row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
}
