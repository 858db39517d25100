//! Two-stage decision rule. Every leg is first checked against the Q
//! threshold; only legs that pass are reconstructed and checked against the
//! reconstruction-error threshold. A trajectory is anomalous if any leg is,
//! or if it cannot be decomposed into legs at all.

use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{reconstruct_batch, recon_error, subgoal_features, DiffusionModel};
use crate::error::{Error, Result};
use crate::graph::SubgoalGraph;
use crate::iql::QFunction;
use crate::segment::segment_by_graph;
use crate::traj::{Label, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// A leg with `Q <= gamma_q` is rejected at stage 1.
    pub gamma_q: f64,
    /// A leg with `E >= beta_e` is rejected at stage 2.
    pub beta_e: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { gamma_q: -1.0, beta_e: 0.13 }
    }
}

impl Thresholds {
    pub fn chengdu() -> Self {
        Self { gamma_q: -1.2, beta_e: 0.18 }
    }

    pub fn ais() -> Self {
        Self { gamma_q: -1.0, beta_e: 0.13 }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.gamma_q.is_finite() || !self.beta_e.is_finite() {
            return Err(Error::param("thresholds must be finite"));
        }
        Ok(())
    }
}

/// Which stages run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Full,
    /// Stage 1 only; legs passing the Q test are normal.
    HighOnly,
    /// Stage 2 only; the Q test is skipped.
    LowOnly,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "high_only" | "high" => Ok(Mode::HighOnly),
            "low_only" | "low" => Ok(Mode::LowOnly),
            _ => Err(Error::param(format!("unknown detector mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    HighLevelReject,
    LowLevelReject,
    OffGraphReject,
    Normal,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::HighLevelReject => "high_level_reject",
            Stage::LowLevelReject => "low_level_reject",
            Stage::OffGraphReject => "off_graph_reject",
            Stage::Normal => "normal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegVerdict {
    pub leg: usize,
    pub q_score: Option<f64>,
    /// Present only when the leg reached stage 2.
    pub e_delta: Option<f64>,
    pub stage: Stage,
    pub is_anomaly: bool,
}

impl LegVerdict {
    fn off_graph(leg: usize) -> Self {
        Self {
            leg,
            q_score: None,
            e_delta: None,
            stage: Stage::OffGraphReject,
            is_anomaly: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub id: String,
    /// Ground-truth label carried through from the input, if any.
    pub label: Label,
    pub subgoal_seq: Vec<usize>,
    pub legs: Vec<LegVerdict>,
    pub is_anomaly: bool,
    /// Stage of the first anomalous leg, or `normal`.
    pub stage: Stage,
    /// Scoring time, amortized over the batch the trajectory was scored in.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

impl TrajectoryReport {
    fn from_legs(id: String, label: Label, subgoal_seq: Vec<usize>, legs: Vec<LegVerdict>) -> Self {
        let first = legs.iter().find(|v| v.is_anomaly);
        Self {
            id,
            label,
            subgoal_seq,
            is_anomaly: first.is_some(),
            stage: first.map_or(Stage::Normal, |v| v.stage),
            legs,
            wall_ms: None,
        }
    }
}

/// Reconstruction rng of one leg, fixed by trajectory id, leg index and the
/// global seed so that scores do not depend on batching or thresholds.
pub fn leg_rng(traj_id: &str, leg: usize, seed: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(traj_id.as_bytes());
    h.update([0]);
    h.update((leg as u64).to_le_bytes());
    h.update(seed.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

fn needs_stage2(q: f64, th: &Thresholds, mode: Mode) -> bool {
    match mode {
        Mode::Full => q > th.gamma_q,
        Mode::HighOnly => false,
        Mode::LowOnly => true,
    }
}

/// Verdict for one leg from its scores. `e_delta` must be present whenever
/// the leg reaches stage 2.
pub fn leg_verdict(leg: usize, q: f64, e_delta: Option<f64>, th: &Thresholds, mode: Mode) -> Result<LegVerdict> {
    let q_score = (mode != Mode::LowOnly).then_some(q);
    if mode != Mode::LowOnly && q <= th.gamma_q {
        return Ok(LegVerdict {
            leg,
            q_score,
            e_delta: None,
            stage: Stage::HighLevelReject,
            is_anomaly: true,
        });
    }
    if mode == Mode::HighOnly {
        return Ok(LegVerdict {
            leg,
            q_score,
            e_delta: None,
            stage: Stage::Normal,
            is_anomaly: false,
        });
    }
    let e = e_delta.ok_or_else(|| Error::param(format!("leg {leg} reached stage 2 without a reconstruction error")))?;
    let anomalous = e >= th.beta_e;
    Ok(LegVerdict {
        leg,
        q_score,
        e_delta: Some(e),
        stage: if anomalous { Stage::LowLevelReject } else { Stage::Normal },
        is_anomaly: anomalous,
    })
}

/// Scores of one trajectory, independent of thresholds. `subgoal_seq` is
/// `None` when segmentation failed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryScores {
    pub id: String,
    pub label: Label,
    pub subgoal_seq: Option<Vec<usize>>,
    pub q: Vec<f64>,
    pub e_delta: Vec<Option<f64>>,
}

/// Applies the decision rule to precomputed scores.
pub fn decide(scores: &TrajectoryScores, th: &Thresholds, mode: Mode) -> Result<TrajectoryReport> {
    let Some(seq) = &scores.subgoal_seq else {
        return Ok(TrajectoryReport::from_legs(
            scores.id.clone(),
            scores.label,
            Vec::new(),
            vec![LegVerdict::off_graph(0)],
        ));
    };
    let legs = scores
        .q
        .iter()
        .zip(&scores.e_delta)
        .enumerate()
        .map(|(i, (&q, &e))| {
            let e = if needs_stage2(q, th, mode) { e } else { None };
            leg_verdict(i, q, e, th, mode)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryReport::from_legs(scores.id.clone(), scores.label, seq.clone(), legs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub thresholds: Thresholds,
    pub mode: Mode,
    /// Reconstruction noise level; 0 means the model's own `t_inf`.
    pub t_inf: usize,
    /// Reconstructions averaged per leg.
    pub samples: usize,
    pub seed: u64,
    /// Legs reconstructed together.
    pub batch: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            thresholds: Thresholds::default(),
            mode: Mode::Full,
            t_inf: 0,
            samples: 1,
            seed: 0,
            batch: 256,
        }
    }
}

/// A leg waiting for stage 2.
pub struct LegJob<'a> {
    pub traj_id: &'a str,
    pub leg: usize,
    pub coords: &'a Array2<f64>,
    pub subgoals: [f64; 4],
}

pub struct Detector<'a> {
    pub q: &'a QFunction,
    pub dm: &'a DiffusionModel,
    pub graph: &'a SubgoalGraph,
    pub cfg: DetectorConfig,
}

struct Prepared {
    seq: Vec<usize>,
    legs: Vec<Array2<f64>>,
    q: Vec<f64>,
}

impl<'a> Detector<'a> {
    pub fn new(q: &'a QFunction, dm: &'a DiffusionModel, graph: &'a SubgoalGraph, cfg: DetectorConfig) -> Result<Self> {
        cfg.thresholds.validate()?;
        if q.n_nodes() != graph.n_nodes() {
            return Err(Error::Shape(format!("Q covers {} nodes, graph has {}", q.n_nodes(), graph.n_nodes())));
        }
        if cfg.samples == 0 || cfg.batch == 0 {
            return Err(Error::param("samples and batch must be >= 1"));
        }
        if cfg.t_inf > dm.schedule.steps() {
            return Err(Error::param(format!("t_inf {} exceeds T = {}", cfg.t_inf, dm.schedule.steps())));
        }
        Ok(Self { q, dm, graph, cfg })
    }

    pub fn t_inf(&self) -> usize {
        if self.cfg.t_inf == 0 {
            self.dm.cfg.t_inf
        } else {
            self.cfg.t_inf
        }
    }

    fn prepare(&self, traj: &Trajectory) -> Result<Option<Prepared>> {
        let seg = match segment_by_graph(traj, self.graph, &self.graph.bbox, self.dm.cfg.len) {
            Ok(seg) => seg,
            Err(Error::Segmentation { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let q = seg
            .subgoal_seq
            .windows(2)
            .map(|w| self.q.q(w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(Prepared {
            q,
            legs: seg.legs.into_iter().map(|l| l.into_inner()).collect(),
            seq: seg.subgoal_seq,
        }))
    }

    /// Mean reconstruction error of every job, in order. Each job's value
    /// depends only on its own leg, subgoals and rng.
    pub fn reconstruction_errors(&self, jobs: &[LegJob<'_>]) -> Result<Vec<f64>> {
        let t_inf = self.t_inf();
        let mut out = Vec::with_capacity(jobs.len());
        for chunk in jobs.chunks(self.cfg.batch) {
            let legs: Vec<&Array2<f64>> = chunk.iter().map(|j| j.coords).collect();
            let subs: Vec<[f64; 4]> = chunk.iter().map(|j| j.subgoals).collect();
            let mut rngs: Vec<ChaCha8Rng> = chunk.iter().map(|j| leg_rng(j.traj_id, j.leg, self.cfg.seed)).collect();
            let mut sums = vec![0.0; chunk.len()];
            for _ in 0..self.cfg.samples {
                let recon = reconstruct_batch(self.dm, &self.dm.schedule, &legs, &subs, t_inf, &mut rngs)?;
                for ((s, r), l) in sums.iter_mut().zip(&recon).zip(&legs) {
                    *s += recon_error(l.view(), r.view())?;
                }
            }
            out.extend(sums.into_iter().map(|s| s / self.cfg.samples as f64));
        }
        Ok(out)
    }

    /// Scores of every trajectory. With `all_legs` each leg is reconstructed
    /// regardless of its Q score, so the result serves any threshold and mode.
    pub fn score(&self, trajs: &[Trajectory], all_legs: bool) -> Result<Vec<TrajectoryScores>> {
        let prepared = trajs.iter().map(|t| self.prepare(t)).collect::<Result<Vec<_>>>()?;
        let mut jobs = Vec::new();
        let mut slots = Vec::new();
        for (ti, (traj, p)) in trajs.iter().zip(&prepared).enumerate() {
            let Some(p) = p else { continue };
            for (li, leg) in p.legs.iter().enumerate() {
                if all_legs || needs_stage2(p.q[li], &self.cfg.thresholds, self.cfg.mode) {
                    jobs.push(LegJob {
                        traj_id: &traj.id,
                        leg: li,
                        coords: leg,
                        subgoals: subgoal_features(self.graph, p.seq[li], p.seq[li + 1])?,
                    });
                    slots.push((ti, li));
                }
            }
        }
        let errors = self.reconstruction_errors(&jobs)?;
        let mut scores: Vec<TrajectoryScores> = trajs
            .iter()
            .zip(&prepared)
            .map(|(t, p)| TrajectoryScores {
                id: t.id.clone(),
                label: t.label,
                subgoal_seq: p.as_ref().map(|p| p.seq.clone()),
                q: p.as_ref().map_or_else(Vec::new, |p| p.q.clone()),
                e_delta: p.as_ref().map_or_else(Vec::new, |p| vec![None; p.q.len()]),
            })
            .collect();
        for ((ti, li), e) in slots.into_iter().zip(errors) {
            scores[ti].e_delta[li] = Some(e);
        }
        Ok(scores)
    }

    /// Reports for all trajectories; stage 2 runs only where needed.
    pub fn detect(&self, trajs: &[Trajectory]) -> Result<Vec<TrajectoryReport>> {
        let mut reports = Vec::with_capacity(trajs.len());
        for chunk in trajs.chunks(self.cfg.batch.max(1)) {
            let start = Instant::now();
            let scores = self.score(chunk, false)?;
            let per = start.elapsed().as_secs_f64() * 1e3 / chunk.len() as f64;
            for s in &scores {
                let mut r = decide(s, &self.cfg.thresholds, self.cfg.mode)?;
                r.wall_ms = Some(per);
                reports.push(r);
            }
        }
        Ok(reports)
    }

    pub fn detect_trajectory(&self, traj: &Trajectory) -> Result<TrajectoryReport> {
        Ok(self.detect(std::slice::from_ref(traj))?.pop().expect("one report per trajectory"))
    }
}

/// Single-leg form of the decision rule. Unknown node ids yield an
/// off-graph verdict instead of an error.
#[allow(clippy::too_many_arguments)]
pub fn detect_leg(
    q: &QFunction,
    dm: &DiffusionModel,
    graph: &SubgoalGraph,
    leg: &Array2<f64>,
    g_i: usize,
    g_next: usize,
    th: &Thresholds,
    rng: &mut ChaCha8Rng,
) -> Result<LegVerdict> {
    if g_i >= graph.n_nodes() || g_next >= graph.n_nodes() || g_i >= q.n_nodes() || g_next >= q.n_nodes() {
        return Ok(LegVerdict::off_graph(0));
    }
    let score = q.q(g_i, g_next)?;
    if score <= th.gamma_q {
        return leg_verdict(0, score, None, th, Mode::Full);
    }
    let recon = crate::diffusion::reconstruct(dm, leg, subgoal_features(graph, g_i, g_next)?, dm.cfg.t_inf, rng)?;
    let e = recon_error(leg.view(), recon.view())?;
    leg_verdict(0, score, Some(e), th, Mode::Full)
}

pub fn write_reports<W: Write>(mut w: W, reports: &[TrajectoryReport]) -> Result<()> {
    for r in reports {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io("<report>", e))?;
    }
    Ok(())
}

pub fn save_reports(path: &Path, reports: &[TrajectoryReport]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_reports(&mut w, reports)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_reports<R: BufRead>(r: R) -> Result<Vec<TrajectoryReport>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<report>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i as u64 + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn load_reports(path: &Path) -> Result<Vec<TrajectoryReport>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_reports(std::io::BufReader::new(f))
}
