//! Repeated-trial experiments on a synthetic world. Scores are computed once
//! per trajectory (all legs, regardless of the Q test) and memoized, so
//! repeats, detector variants and threshold sweeps only re-run the decision
//! rule.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{mean_defined, metrics, ConfusionCounts, Metrics};
use super::world::{synth_world, SynthWorld, WorldSpec};
use crate::detector::{decide, Detector, DetectorConfig, Mode, Stage, Thresholds, TrajectoryScores};
use crate::diffusion::{subgoal_features, train_diffusion, DiffusionConfig, DiffusionModel, LegSample};
use crate::error::{Error, Result};
use crate::forge::{make_big_detour, make_route_switch, make_small_detour_on_graph, ForgeParams};
use crate::graph::{build_graph, GraphParams, SubgoalGraph};
use crate::iql::{train_iql, IqlConfig, QFunction};
use crate::segment::segment_by_graph;
use crate::traj::{Label, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WorldKind {
    #[default]
    Default,
    Y,
    Fig3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GraphSource {
    /// Built from the training trajectories.
    #[default]
    Built,
    /// The generator's ground-truth graph.
    Truth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub kind: WorldKind,
    pub n_train: usize,
    pub n_val: usize,
    pub n_pool: usize,
    pub seed: u64,
    /// Overrides of the preset's corridor noise and jitter, in cells.
    pub noise: Option<f64>,
    pub jitter: Option<f64>,
    pub graph_source: GraphSource,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            kind: WorldKind::Default,
            n_train: 600,
            n_val: 200,
            n_pool: 600,
            seed: 0,
            noise: None,
            jitter: None,
            graph_source: GraphSource::Built,
        }
    }
}

impl WorldConfig {
    pub fn spec(&self) -> WorldSpec {
        let n = self.n_train + self.n_val + self.n_pool;
        let mut spec = match self.kind {
            WorldKind::Default => WorldSpec::default_world(n, self.seed),
            WorldKind::Y => WorldSpec::y_world(n, self.seed),
            WorldKind::Fig3 => WorldSpec::fig3_world(n, self.seed),
        };
        if let Some(noise) = self.noise {
            for r in &mut spec.routes {
                r.noise = noise;
            }
        }
        if let Some(j) = self.jitter {
            spec.jitter = j;
        }
        spec
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Calibration {
    /// Maximize mean F1 over anomaly types on a forged validation mix.
    #[default]
    F1,
    /// Quantile of the validation normals' stage-2 scores.
    Quantile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdConfig {
    pub gamma_q: f64,
    /// Fixed stage-2 threshold; calibrated on validation data when absent.
    pub beta_e: Option<f64>,
    pub calibration: Calibration,
    pub quantile: f64,
    /// Forged validation anomalies per type.
    pub val_anomalies: usize,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            gamma_q: -1.0,
            beta_e: None,
            calibration: Calibration::F1,
            quantile: 0.95,
            val_anomalies: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunnerConfig {
    pub repeats: usize,
    pub test_size: usize,
    pub anomaly_fraction: f64,
    pub anomaly_types: Vec<Label>,
    pub seed: u64,
    /// Reconstructions averaged per leg.
    pub samples: usize,
    pub batch: usize,
    /// Reconstruction noise level; 0 uses the diffusion profile's value.
    pub t_inf: usize,
    /// Keep per-trajectory outcomes in the report.
    pub outcomes: bool,
}

impl Default for RunnerConfig {
    fn default() -> Self {
        Self {
            repeats: 5,
            test_size: 500,
            anomaly_fraction: 0.2,
            anomaly_types: Label::ANOMALIES.to_vec(),
            seed: 0,
            samples: 1,
            batch: 256,
            t_inf: 0,
            outcomes: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub graph: GraphParams,
    pub forge: ForgeParams,
    pub iql: IqlConfig,
    pub diffusion: DiffusionConfig,
    pub thresholds: ThresholdConfig,
    pub runner: RunnerConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.graph.validate()?;
        self.forge.validate()?;
        self.iql.validate()?;
        self.diffusion.validate()?;
        let r = &self.runner;
        if r.repeats == 0 || r.test_size == 0 || r.samples == 0 || r.batch == 0 {
            return Err(Error::param("repeats, test_size, samples and batch must be >= 1"));
        }
        if !(r.anomaly_fraction > 0.0 && r.anomaly_fraction < 1.0) {
            return Err(Error::param("anomaly_fraction must lie in (0, 1)"));
        }
        if r.anomaly_types.iter().any(|l| !l.is_anomaly()) {
            return Err(Error::param("anomaly_types may only list anomaly labels"));
        }
        if !(0.0..=1.0).contains(&self.thresholds.quantile) {
            return Err(Error::param("calibration quantile must lie in [0, 1]"));
        }
        if self.world.n_train == 0 || self.world.n_pool == 0 {
            return Err(Error::param("world needs training and pool trajectories"));
        }
        if self.thresholds.beta_e.is_none() && self.world.n_val == 0 {
            return Err(Error::param("calibrating beta_e needs validation trajectories"));
        }
        Ok(())
    }

    pub fn n_normals(&self) -> usize {
        ((1.0 - self.runner.anomaly_fraction) * self.runner.test_size as f64).round() as usize
    }

    pub fn n_anomalies(&self) -> usize {
        self.runner.test_size - self.n_normals()
    }
}

/// Sub-seed for a named stream of a master seed.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Generated world split into training, validation and test-pool normals.
#[derive(Debug, Clone)]
pub struct Bench {
    pub world: SynthWorld,
    pub graph: SubgoalGraph,
    pub train: Vec<Trajectory>,
    pub val: Vec<Trajectory>,
    pub pool: Vec<Trajectory>,
}

impl Bench {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let world = synth_world(&cfg.world.spec())?;
        let (n_tr, n_val) = (cfg.world.n_train, cfg.world.n_val);
        let train = world.trajectories[..n_tr].to_vec();
        let val = world.trajectories[n_tr..n_tr + n_val].to_vec();
        let pool = world.trajectories[n_tr + n_val..].to_vec();
        let graph = match cfg.world.graph_source {
            GraphSource::Built => build_graph(&train, &cfg.graph, &world.bbox)?,
            GraphSource::Truth => world.graph.clone(),
        };
        Ok(Self {
            world,
            graph,
            train,
            val,
            pool,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Models {
    pub q: QFunction,
    pub dm: DiffusionModel,
    pub iql_curve: Vec<f64>,
    pub diffusion_curve: Vec<f64>,
    pub diffusion_steps: usize,
    pub train_legs: usize,
    /// Training trajectories that could not be segmented.
    pub skipped: usize,
}

/// Subgoal sequences and diffusion samples of the segmentable trajectories.
pub fn training_data(trajs: &[Trajectory], graph: &SubgoalGraph, len: usize) -> Result<(Vec<Vec<usize>>, Vec<LegSample>, usize)> {
    let mut seqs = Vec::new();
    let mut legs = Vec::new();
    let mut skipped = 0;
    for t in trajs {
        let seg = match segment_by_graph(t, graph, &graph.bbox, len) {
            Ok(s) => s,
            Err(Error::Segmentation { .. }) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        for (i, leg) in seg.legs.iter().enumerate() {
            let (a, b) = seg.leg_subgoals(i);
            legs.push(LegSample {
                coords: leg.coords().clone(),
                subgoals: subgoal_features(graph, a, b)?,
            });
        }
        seqs.push(seg.subgoal_seq);
    }
    Ok((seqs, legs, skipped))
}

pub fn train_models(train: &[Trajectory], graph: &SubgoalGraph, iql: &IqlConfig, diffusion: &DiffusionConfig) -> Result<Models> {
    let (seqs, legs, skipped) = training_data(train, graph, diffusion.len)?;
    if seqs.is_empty() {
        return Err(Error::param("no training trajectory could be segmented"));
    }
    let high = train_iql(&seqs, graph, iql)?;
    let low = train_diffusion(&legs, diffusion)?;
    Ok(Models {
        q: high.q,
        dm: low.model,
        iql_curve: high.loss_curve,
        diffusion_curve: low.loss_curve,
        diffusion_steps: low.steps,
        train_legs: legs.len(),
        skipped,
    })
}

/// Normals and forged anomalies of one test repeat.
#[derive(Debug, Clone)]
pub struct TestSet {
    pub seed: u64,
    pub normals: Vec<Trajectory>,
    pub anomalies: BTreeMap<Label, Vec<Trajectory>>,
}

fn forge_set(
    sources: &[Trajectory],
    kind: Label,
    n: usize,
    graph: &SubgoalGraph,
    cfg: &ExperimentConfig,
    tag: &str,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Trajectory>> {
    let f = &cfg.forge;
    let mut out = Vec::with_capacity(n);
    let mut used = std::collections::BTreeSet::new();
    let max_attempts = 50 * n.max(1);
    for _ in 0..max_attempts {
        if out.len() == n {
            break;
        }
        let forged = match kind {
            Label::BigDetour => {
                let src = sources.choose(rng).expect("non-empty sources");
                Some(make_big_detour(src, f.d, f.omega, rng)?)
            }
            Label::SmallDetour => {
                let src = sources.choose(rng).expect("non-empty sources");
                match make_small_detour_on_graph(src, graph, cfg.diffusion.len, f.d, f.omega_star, rng) {
                    Ok(t) => Some(t),
                    Err(Error::Forge(_)) | Err(Error::Segmentation { .. }) => None,
                    Err(e) => return Err(e),
                }
            }
            Label::RouteSwitch => {
                let a = sources.choose(rng).expect("non-empty sources");
                let b = sources.choose(rng).expect("non-empty sources");
                make_route_switch(a, b, f.sigma)
            }
            _ => return Err(Error::param(format!("{kind} is not an anomaly type"))),
        };
        if let Some(mut t) = forged {
            if used.insert(t.id.clone()) {
                t.id = format!("{}-{tag}", t.id);
                out.push(t);
            }
        }
    }
    if out.len() < n {
        return Err(Error::Forge(format!("only {} of {n} {kind} anomalies could be forged", out.len())));
    }
    Ok(out)
}

pub fn make_test_sets(bench: &Bench, cfg: &ExperimentConfig) -> Result<Vec<TestSet>> {
    let n_norm = cfg.n_normals().min(bench.pool.len());
    let n_anom = cfg.n_anomalies();
    (0..cfg.runner.repeats)
        .map(|r| {
            let seed = derive_seed(cfg.runner.seed, "repeat", r as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx: Vec<usize> = (0..bench.pool.len()).collect();
            idx.shuffle(&mut rng);
            let normals = idx[..n_norm].iter().map(|&i| bench.pool[i].clone()).collect();
            let mut anomalies = BTreeMap::new();
            for &kind in &cfg.runner.anomaly_types {
                let set = forge_set(&bench.pool, kind, n_anom, &bench.graph, cfg, &format!("r{r}"), &mut rng)?;
                anomalies.insert(kind, set);
            }
            Ok(TestSet { seed, normals, anomalies })
        })
        .collect()
}

pub fn make_validation_set(bench: &Bench, cfg: &ExperimentConfig) -> Result<TestSet> {
    let seed = derive_seed(cfg.runner.seed, "validation", 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut anomalies = BTreeMap::new();
    if !bench.val.is_empty() {
        for &kind in &cfg.runner.anomaly_types {
            let set = forge_set(&bench.val, kind, cfg.thresholds.val_anomalies, &bench.graph, cfg, "v", &mut rng)?;
            anomalies.insert(kind, set);
        }
    }
    Ok(TestSet {
        seed,
        normals: bench.val.clone(),
        anomalies,
    })
}

/// Threshold-independent scores keyed by trajectory id.
#[derive(Debug, Default, Clone)]
pub struct ScoreCache {
    map: HashMap<String, TrajectoryScores>,
}

impl ScoreCache {
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&TrajectoryScores> {
        self.map.get(id)
    }

    /// Scores every trajectory not yet cached, reconstructing all legs.
    pub fn fill(&mut self, det: &Detector<'_>, trajs: &[Trajectory]) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        let missing: Vec<Trajectory> = trajs
            .iter()
            .filter(|t| !self.map.contains_key(&t.id) && seen.insert(t.id.clone()))
            .cloned()
            .collect();
        for s in det.score(&missing, true)? {
            self.map.insert(s.id.clone(), s);
        }
        Ok(())
    }

    fn decide(&self, id: &str, th: &Thresholds, mode: Mode) -> Result<(bool, Stage)> {
        let s = self.map.get(id).ok_or_else(|| Error::param(format!("trajectory {id} was never scored")))?;
        let r = decide(s, th, mode)?;
        Ok((r.is_anomaly, r.stage))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub id: String,
    pub label: Label,
    pub is_anomaly: bool,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeResult {
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatReport {
    pub index: usize,
    pub seed: u64,
    /// Normals of the repeat plus the anomalies of one type.
    pub per_type: BTreeMap<Label, TypeResult>,
    /// Trajectory count per ground-truth label and deciding stage.
    pub stage_histogram: BTreeMap<Label, BTreeMap<Stage, usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outcomes: Vec<Outcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeSummary {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub f1_per_repeat: Vec<Option<f64>>,
}

fn outcomes_of(set: &TestSet, cache: &ScoreCache, th: &Thresholds, mode: Mode) -> Result<Vec<Outcome>> {
    set.normals
        .iter()
        .chain(set.anomalies.values().flatten())
        .map(|t| {
            let (is_anomaly, stage) = cache.decide(&t.id, th, mode)?;
            Ok(Outcome {
                id: t.id.clone(),
                label: t.label,
                is_anomaly,
                stage,
            })
        })
        .collect()
}

/// Confusion counts of one anomaly type from emitted outcomes: the normals
/// plus the anomalies carrying that label.
pub fn type_counts(outcomes: &[Outcome], kind: Label) -> ConfusionCounts {
    ConfusionCounts::from_outcomes(
        outcomes
            .iter()
            .filter(|o| o.label == Label::Normal || o.label == kind)
            .map(|o| (o.label.is_anomaly(), o.is_anomaly)),
    )
}

pub fn repeat_report(index: usize, set: &TestSet, cache: &ScoreCache, th: &Thresholds, mode: Mode, keep: bool) -> Result<RepeatReport> {
    let outcomes = outcomes_of(set, cache, th, mode)?;
    let per_type = set
        .anomalies
        .keys()
        .map(|&kind| {
            let counts = type_counts(&outcomes, kind);
            (
                kind,
                TypeResult {
                    counts,
                    metrics: metrics(&counts),
                },
            )
        })
        .collect();
    let mut stage_histogram: BTreeMap<Label, BTreeMap<Stage, usize>> = BTreeMap::new();
    for o in &outcomes {
        *stage_histogram.entry(o.label).or_default().entry(o.stage).or_default() += 1;
    }
    Ok(RepeatReport {
        index,
        seed: set.seed,
        per_type,
        stage_histogram,
        outcomes: if keep { outcomes } else { Vec::new() },
    })
}

pub fn summarize(repeats: &[RepeatReport]) -> BTreeMap<Label, TypeSummary> {
    let mut kinds: Vec<Label> = repeats.iter().flat_map(|r| r.per_type.keys().copied()).collect();
    kinds.sort();
    kinds.dedup();
    kinds
        .into_iter()
        .map(|k| {
            let ms: Vec<Metrics> = repeats.iter().filter_map(|r| r.per_type.get(&k)).map(|t| t.metrics).collect();
            (
                k,
                TypeSummary {
                    precision: mean_defined(ms.iter().map(|m| m.precision)),
                    recall: mean_defined(ms.iter().map(|m| m.recall)),
                    f1: mean_defined(ms.iter().map(|m| m.f1)),
                    f1_per_repeat: ms.iter().map(|m| m.f1).collect(),
                },
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub method: Calibration,
    pub beta_e: f64,
    /// Mean validation F1 over anomaly types at the chosen threshold.
    pub val_mean_f1: Option<f64>,
}

/// Largest stage-2 score over the legs that pass the Q test; `None` when
/// stage 1 or segmentation already decides the trajectory.
fn stage2_max(s: &TrajectoryScores, gamma_q: f64) -> Option<f64> {
    s.subgoal_seq.as_ref()?;
    if s.q.iter().any(|&q| q <= gamma_q) {
        return None;
    }
    s.e_delta.iter().map(|e| e.expect("all legs scored")).reduce(f64::max)
}

/// Chooses `beta_e` on the validation set. F1 calibration scans every
/// observed stage-2 score as a cut and places the threshold midway into the
/// gap below the best cut.
pub fn calibrate_beta(val: &TestSet, cache: &ScoreCache, th: &ThresholdConfig) -> Result<CalibrationRecord> {
    let score_of = |t: &Trajectory| -> Result<Option<f64>> {
        let s = cache.get(&t.id).ok_or_else(|| Error::param(format!("trajectory {} was never scored", t.id)))?;
        Ok(stage2_max(s, th.gamma_q))
    };
    let normals: Vec<Option<f64>> = val.normals.iter().map(score_of).collect::<Result<_>>()?;
    let normal_scores: Vec<f64> = normals.iter().flatten().copied().collect();
    if normal_scores.is_empty() {
        return Err(Error::param("no validation normal reaches stage 2"));
    }
    let anomalies: Vec<(Label, Vec<Option<f64>>)> = val
        .anomalies
        .iter()
        .map(|(k, ts)| Ok((*k, ts.iter().map(score_of).collect::<Result<Vec<_>>>()?)))
        .collect::<Result<_>>()?;
    // None (decided before stage 2) counts as flagged
    let flagged = |s: &Option<f64>, beta: f64| s.is_none_or(|v| v >= beta);
    let mean_f1 = |beta: f64| {
        mean_defined(anomalies.iter().map(|(_, scores)| {
            let c = ConfusionCounts::from_outcomes(
                normals
                    .iter()
                    .map(|s| (false, flagged(s, beta)))
                    .chain(scores.iter().map(|s| (true, flagged(s, beta)))),
            );
            metrics(&c).f1
        }))
    };
    let mut cuts: Vec<f64> = normal_scores.clone();
    cuts.extend(anomalies.iter().flat_map(|(_, s)| s.iter().flatten().copied()));
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let beta = match th.calibration {
        Calibration::Quantile => {
            let mut s = normal_scores;
            s.sort_by(f64::total_cmp);
            let pos = th.quantile * (s.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
        }
        Calibration::F1 if anomalies.is_empty() => return Err(Error::param("F1 calibration needs validation anomalies")),
        Calibration::F1 => {
            let mut best = (f64::NEG_INFINITY, 0usize);
            for (i, &c) in cuts.iter().enumerate() {
                let f = mean_f1(c).unwrap_or(f64::NEG_INFINITY);
                if f > best.0 {
                    best = (f, i);
                }
            }
            let i = best.1;
            if i == 0 {
                cuts[0]
            } else {
                0.5 * (cuts[i - 1] + cuts[i])
            }
        }
    };
    Ok(CalibrationRecord {
        method: th.calibration,
        beta_e: beta,
        val_mean_f1: if anomalies.is_empty() { None } else { mean_f1(beta) },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub graph_nodes: usize,
    pub graph_edges: usize,
    pub train_legs: usize,
    pub skipped_trajectories: usize,
    pub iql_epochs: usize,
    pub iql_final_loss: Option<f64>,
    pub diffusion_steps: usize,
    pub diffusion_first_loss: Option<f64>,
    pub diffusion_final_loss: Option<f64>,
    pub diffusion_params: usize,
}

impl TrainingRecord {
    fn new(graph: &SubgoalGraph, m: &Models) -> Self {
        Self {
            graph_nodes: graph.n_nodes(),
            graph_edges: graph.edges().len(),
            train_legs: m.train_legs,
            skipped_trajectories: m.skipped,
            iql_epochs: m.iql_curve.len(),
            iql_final_loss: m.iql_curve.last().copied(),
            diffusion_steps: m.diffusion_steps,
            diffusion_first_loss: m.diffusion_curve.first().copied(),
            diffusion_final_loss: m.diffusion_curve.last().copied(),
            diffusion_params: m.dm.n_params(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub summary: BTreeMap<Label, TypeSummary>,
    pub repeats: Vec<RepeatReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub repeat_seeds: Vec<u64>,
    pub training: Option<TrainingRecord>,
    pub thresholds: Thresholds,
    pub calibration: Option<CalibrationRecord>,
    /// One entry per detector variant that was run.
    pub variants: BTreeMap<Mode, VariantReport>,
    /// Wall-clock seconds per phase; the only non-deterministic part.
    pub timing: BTreeMap<String, f64>,
}

impl ExperimentReport {
    pub fn full(&self) -> Option<&VariantReport> {
        self.variants.get(&Mode::Full)
    }

    /// Pretty JSON without the timing key, for byte comparisons.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(o) = v.as_object_mut() {
            o.remove("timing");
        }
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

/// Everything an experiment needs after training: data, models, test sets
/// and the score memo.
pub struct Session {
    pub cfg: ExperimentConfig,
    pub bench: Bench,
    pub models: Models,
    pub val: TestSet,
    pub tests: Vec<TestSet>,
    pub cache: ScoreCache,
    pub training: Option<TrainingRecord>,
    pub timing: BTreeMap<String, f64>,
}

impl Session {
    /// Generates the world, trains both models (unless supplied), forges the
    /// test sets and scores everything once.
    pub fn new(cfg: &ExperimentConfig, pretrained: Option<(SubgoalGraph, QFunction, DiffusionModel)>) -> Result<Self> {
        cfg.validate()?;
        let mut timing = BTreeMap::new();
        let clock = Instant::now();
        let mut bench = Bench::new(cfg)?;
        let (models, training) = match pretrained {
            Some((graph, q, dm)) => {
                if q.n_nodes() != graph.n_nodes() {
                    return Err(Error::Shape("pretrained Q does not match the graph".into()));
                }
                bench.graph = graph;
                let models = Models {
                    q,
                    dm,
                    iql_curve: Vec::new(),
                    diffusion_curve: Vec::new(),
                    diffusion_steps: 0,
                    train_legs: 0,
                    skipped: 0,
                };
                (models, None)
            }
            None => {
                let m = train_models(&bench.train, &bench.graph, &cfg.iql, &cfg.diffusion)?;
                let rec = TrainingRecord::new(&bench.graph, &m);
                (m, Some(rec))
            }
        };
        timing.insert("train_s".into(), clock.elapsed().as_secs_f64());
        let val = make_validation_set(&bench, cfg)?;
        let tests = make_test_sets(&bench, cfg)?;
        let mut s = Self {
            cfg: cfg.clone(),
            bench,
            models,
            val,
            tests,
            cache: ScoreCache::default(),
            training,
            timing,
        };
        let clock = Instant::now();
        s.cache = s.score_all(s.cfg.runner.t_inf)?;
        s.timing.insert("score_s".into(), clock.elapsed().as_secs_f64());
        Ok(s)
    }

    fn detector_config(&self, t_inf: usize) -> DetectorConfig {
        DetectorConfig {
            thresholds: Thresholds {
                gamma_q: self.cfg.thresholds.gamma_q,
                beta_e: 0.0,
            },
            mode: Mode::LowOnly,
            t_inf,
            samples: self.cfg.runner.samples,
            seed: self.cfg.runner.seed,
            batch: self.cfg.runner.batch,
        }
    }

    fn all_trajectories(&self) -> Vec<Trajectory> {
        let sets = std::iter::once(&self.val).chain(&self.tests);
        sets.flat_map(|s| s.normals.iter().chain(s.anomalies.values().flatten())).cloned().collect()
    }

    /// Scores all validation and test trajectories at `t_inf` with the
    /// session's models.
    pub fn score_all(&self, t_inf: usize) -> Result<ScoreCache> {
        self.score_with(&self.models.dm, t_inf)
    }

    pub fn score_with(&self, dm: &DiffusionModel, t_inf: usize) -> Result<ScoreCache> {
        let det = Detector::new(&self.models.q, dm, &self.bench.graph, self.detector_config(t_inf))?;
        let mut cache = ScoreCache::default();
        cache.fill(&det, &self.all_trajectories())?;
        Ok(cache)
    }

    /// Thresholds in force: configured `beta_e` or calibrated on `cache`.
    pub fn thresholds(&self, cache: &ScoreCache) -> Result<(Thresholds, Option<CalibrationRecord>)> {
        resolve_thresholds(&self.val, cache, &self.cfg.thresholds)
    }

    pub fn variant(&self, cache: &ScoreCache, th: &Thresholds, mode: Mode) -> Result<VariantReport> {
        let repeats = self
            .tests
            .iter()
            .enumerate()
            .map(|(i, set)| repeat_report(i, set, cache, th, mode, self.cfg.runner.outcomes))
            .collect::<Result<Vec<_>>>()?;
        Ok(VariantReport {
            summary: summarize(&repeats),
            repeats,
        })
    }

    pub fn report(&self, modes: &[Mode]) -> Result<ExperimentReport> {
        let (thresholds, calibration) = self.thresholds(&self.cache)?;
        let variants = modes
            .iter()
            .map(|&m| Ok((m, self.variant(&self.cache, &thresholds, m)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(ExperimentReport {
            config: self.cfg.clone(),
            repeat_seeds: self.tests.iter().map(|t| t.seed).collect(),
            training: self.training.clone(),
            thresholds,
            calibration,
            variants,
            timing: self.timing.clone(),
        })
    }
}

/// Configured `beta_e`, or one calibrated on `val`.
pub fn resolve_thresholds(val: &TestSet, cache: &ScoreCache, th: &ThresholdConfig) -> Result<(Thresholds, Option<CalibrationRecord>)> {
    let gamma_q = th.gamma_q;
    match th.beta_e {
        Some(beta_e) => Ok((Thresholds { gamma_q, beta_e }, None)),
        None => {
            let rec = calibrate_beta(val, cache, th)?;
            Ok((Thresholds { gamma_q, beta_e: rec.beta_e }, Some(rec)))
        }
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    Session::new(cfg, None)?.report(&[Mode::Full])
}

/// Stage-1-only, stage-2-only and full detector on identical data and seeds.
pub fn ablate(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    Session::new(cfg, None)?.report(&[Mode::HighOnly, Mode::LowOnly, Mode::Full])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Rho,
    TInf,
    GammaQ,
    BetaE,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rho" => Ok(Self::Rho),
            "t_inf" => Ok(Self::TInf),
            "gamma_q" => Ok(Self::GammaQ),
            "beta_e" => Ok(Self::BetaE),
            _ => Err(Error::param(format!("unknown sweep parameter {s:?} (rho, t_inf, gamma_q, beta_e)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub thresholds: Thresholds,
    pub summary: BTreeMap<Label, TypeSummary>,
    /// Parameter checksum of the diffusion model used at this point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub param: SweepParam,
    pub points: Vec<SweepPoint>,
    pub timing: BTreeMap<String, f64>,
}

fn model_digest(dm: &DiffusionModel) -> String {
    let mut h = Sha256::new();
    for v in dm.param_vector() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Threshold sweeps re-decide on the memoized scores; `t_inf` re-scores and
/// `rho` retrains the diffusion model. The other threshold stays as
/// configured or calibrated per point.
pub fn sweep(session: &Session, param: SweepParam, values: &[f64]) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::param("sweep needs at least one value"));
    }
    let mut timing = BTreeMap::new();
    let clock = Instant::now();
    let mut points = Vec::with_capacity(values.len());
    for &v in values {
        let (cache_owned, digest);
        let cache = match param {
            SweepParam::GammaQ | SweepParam::BetaE => {
                digest = None;
                &session.cache
            }
            SweepParam::TInf => {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::param(format!("t_inf must be a non-negative integer, got {v}")));
                }
                cache_owned = session.score_all(v as usize)?;
                digest = None;
                &cache_owned
            }
            SweepParam::Rho => {
                let dcfg = DiffusionConfig {
                    rho: v,
                    ..session.cfg.diffusion.clone()
                };
                let (_, legs, _) = training_data(&session.bench.train, &session.bench.graph, dcfg.len)?;
                let dm = train_diffusion(&legs, &dcfg)?.model;
                digest = Some(model_digest(&dm));
                cache_owned = session.score_with(&dm, session.cfg.runner.t_inf)?;
                &cache_owned
            }
        };
        let mut tcfg = session.cfg.thresholds.clone();
        match param {
            SweepParam::GammaQ => tcfg.gamma_q = v,
            SweepParam::BetaE => tcfg.beta_e = Some(v),
            _ => {}
        }
        let th = resolve_thresholds(&session.val, cache, &tcfg)?.0;
        let variant = session.variant(cache, &th, Mode::Full)?;
        points.push(SweepPoint {
            value: v,
            thresholds: th,
            summary: variant.summary,
            model_digest: digest,
        });
    }
    timing.insert("sweep_s".into(), clock.elapsed().as_secs_f64());
    Ok(SweepReport { param, points, timing })
}


#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(label: Label, is_anomaly: bool) -> Outcome {
        Outcome {
            id: String::new(),
            label,
            is_anomaly,
            stage: if is_anomaly { Stage::LowLevelReject } else { Stage::Normal },
        }
    }

    #[test]
    fn type_counts_use_normals_and_one_type() {
        let outs = vec![
            outcome(Label::Normal, false),
            outcome(Label::Normal, true),
            outcome(Label::BigDetour, true),
            outcome(Label::BigDetour, false),
            outcome(Label::SmallDetour, true),
        ];
        let c = type_counts(&outs, Label::BigDetour);
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, tn: 1, fn_: 1 });
        let c = type_counts(&outs, Label::SmallDetour);
        assert_eq!(c.total(), 3);
    }

    #[test]
    fn all_normal_set_with_silent_stub() {
        let mut cache = ScoreCache::default();
        let mut normals = Vec::new();
        for i in 0..20 {
            let id = format!("n{i}");
            let scores = TrajectoryScores {
                id: id.clone(),
                label: Label::Normal,
                subgoal_seq: Some(vec![0, 1]),
                q: vec![1.0],
                e_delta: vec![Some(0.0)],
            };
            cache.map.insert(id.clone(), scores);
            normals.push(Trajectory::new(id, vec![], Label::Normal));
        }
        let mut anomalies = BTreeMap::new();
        anomalies.insert(Label::BigDetour, Vec::new());
        let set = TestSet { seed: 0, normals, anomalies };
        let th = Thresholds { gamma_q: -1.0, beta_e: 1.0 };
        let r = repeat_report(0, &set, &cache, &th, Mode::Full, true).unwrap();
        let m = r.per_type[&Label::BigDetour].metrics;
        assert_eq!(m.precision, None);
        assert_eq!(m.recall, None);
        assert_eq!(m.specificity, Some(1.0));
        assert_eq!(r.stage_histogram[&Label::Normal][&Stage::Normal], 20);
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(1, "repeat", 0);
        assert_ne!(a, derive_seed(1, "repeat", 1));
        assert_ne!(a, derive_seed(2, "repeat", 0));
        assert_eq!(a, derive_seed(1, "repeat", 0));
    }

    #[test]
    fn config_sections_roundtrip() {
        let cfg = ExperimentConfig::default();
        let v = serde_json::to_value(&cfg).unwrap();
        for k in ["world", "graph", "forge", "iql", "diffusion", "thresholds", "runner"] {
            assert!(v.get(k).is_some(), "missing section {k}");
        }
        let back: ExperimentConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, cfg);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"runner": {"repeats": 2}}"#).unwrap();
        assert_eq!(partial.runner.repeats, 2);
        assert_eq!(partial.runner.test_size, 500);
        assert_eq!(cfg.n_normals(), 400);
        assert_eq!(cfg.n_anomalies(), 100);
    }

    #[test]
    fn sweep_param_names() {
        assert_eq!("rho".parse::<SweepParam>().unwrap(), SweepParam::Rho);
        assert!("lr".parse::<SweepParam>().is_err());
    }

    #[test]
    fn quantile_calibration_on_normals() {
        let mk = |id: &str, e: f64| TrajectoryScores {
            id: id.into(),
            label: Label::Normal,
            subgoal_seq: Some(vec![0, 1]),
            q: vec![0.0],
            e_delta: vec![Some(e)],
        };
        let mut cache = ScoreCache::default();
        let mut normals = Vec::new();
        for i in 0..11 {
            let id = format!("n{i}");
            cache.map.insert(id.clone(), mk(&id, i as f64 / 10.0));
            normals.push(Trajectory::new(id, vec![], Label::Normal));
        }
        let val = TestSet {
            seed: 0,
            normals,
            anomalies: BTreeMap::new(),
        };
        let th = ThresholdConfig {
            calibration: Calibration::Quantile,
            quantile: 0.9,
            ..Default::default()
        };
        let rec = calibrate_beta(&val, &cache, &th).unwrap();
        assert!((rec.beta_e - 0.9).abs() < 1e-12);
        let th = ThresholdConfig { calibration: Calibration::F1, ..th };
        assert!(calibrate_beta(&val, &cache, &th).is_err());
    }
}
