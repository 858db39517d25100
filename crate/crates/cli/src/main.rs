//! `ihid` command-line entry point. Every command prints one JSON line to
//! stdout; exit code 0 on success, 1 on usage errors, 2 on data errors.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ihid::checkpoint::{load_diffusion, load_q, save_diffusion, save_q};
use ihid::detector::{load_reports, save_reports, Detector, DetectorConfig, Mode, Thresholds};
use ihid::diffusion::train_diffusion;
use ihid::eval::{ablate, run_experiment, sweep, synth_world, training_data, ExperimentConfig, Session, SweepParam, WorldKind};
use ihid::export::to_geojson;
use ihid::forge::{make_big_detour, make_route_switch, make_small_detour_on_graph};
use ihid::graph::{build_graph, SubgoalGraph};
use ihid::iql::train_iql;
use ihid::traj::{parse_trajectories, write_trajectories, BoundingBox, Label, TrajFormat, Trajectory};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

#[derive(Debug, Parser)]
#[command(name = "ihid", version, about = "Two-stage trajectory anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
struct Common {
    /// Master seed; falls back to IHID_SEED, then to the config file.
    #[arg(long, env = "IHID_SEED", global = true)]
    seed: Option<u64>,
    /// Experiment config (JSON with world/graph/forge/iql/diffusion/thresholds/runner sections).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate and normalize a trajectory CSV.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Generate normal trajectories from a synthetic world.
    Synth {
        #[arg(long, value_enum)]
        world: Option<WorldArg>,
        /// Number of trajectories (defaults to the config's train + val + pool).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the generator's ground-truth graph.
        #[arg(long)]
        graph_out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Build the subgoal graph from normal trajectories.
    BuildGraph {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Bounding-box margin as a fraction of the data span.
        #[arg(long, default_value_t = 0.1)]
        margin: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Forge labeled anomalies from normal trajectories.
    Forge {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the transition scorer.
    TrainHigh {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the leg diffusion model.
    TrainLow {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score trajectories and write one JSON report per line.
    Detect {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        high: PathBuf,
        #[arg(long)]
        low: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        mode: ModeArg,
        #[arg(long, allow_hyphen_values = true)]
        gamma_q: Option<f64>,
        #[arg(long)]
        beta_e: Option<f64>,
        /// Reconstruction noise level; defaults to the checkpoint's value.
        #[arg(long)]
        t_inf: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the repeated-trial experiment and write a JSON report.
    Evaluate {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        models: Pretrained,
        #[command(flatten)]
        common: Common,
    },
    /// Run the stage-1-only, stage-2-only and full variants.
    Ablate {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Sweep one parameter and report F1 per anomaly type.
    Sweep {
        /// One of rho, t_inf, gamma_q, beta_e.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write trajectories, verdicts and subgoal nodes as GeoJSON.
    ExportGeojson {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args)]
struct Pretrained {
    /// Use these models instead of training (all three are required together).
    #[arg(long, requires_all = ["high", "low"])]
    graph: Option<PathBuf>,
    #[arg(long, requires_all = ["graph", "low"])]
    high: Option<PathBuf>,
    #[arg(long, requires_all = ["graph", "high"])]
    low: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum WorldArg {
    Default,
    Y,
    Fig3,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    BigDetour,
    SmallDetour,
    RouteSwitch,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    HighOnly,
    LowOnly,
}

/// Usage errors exit 1, everything else 2.
enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<ihid::Error> for Failure {
    fn from(e: ihid::Error) -> Self {
        match e {
            ihid::Error::InvalidParam(m) => Failure::Usage(m),
            e => Failure::Data(e.into()),
        }
    }
}

type CmdResult = Result<Value, Failure>;

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => {
            let s = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&s).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.world.seed = seed;
        cfg.runner.seed = seed;
        cfg.iql.seed = seed;
        cfg.diffusion.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_trajs(path: &Path) -> Result<Vec<Trajectory>, Failure> {
    Ok(parse_trajectories(path, TrajFormat::Csv)?.trajectories)
}

fn write_trajs(path: &Path, trajs: &[Trajectory], format: TrajFormat) -> Result<(), Failure> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    write_trajectories(&mut w, trajs, format)?;
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<(), Failure> {
    let s = serde_json::to_string_pretty(v).context("serializing output")?;
    std::fs::write(path, s + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn f1_summary(summary: &std::collections::BTreeMap<Label, ihid::eval::TypeSummary>) -> Value {
    summary.iter().map(|(k, v)| (k.as_str().to_string(), json!(v.f1))).collect()
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Ingest { input, out, .. } => {
            let parsed = parse_trajectories(&input, TrajFormat::Csv)?;
            let labeled = parsed.trajectories.iter().any(|t| t.label != Label::Unknown);
            let format = if labeled { TrajFormat::LabeledCsv } else { TrajFormat::Csv };
            write_trajs(&out, &parsed.trajectories, format)?;
            let points: usize = parsed.trajectories.iter().map(|t| t.points.len()).sum();
            Ok(json!({"command": "ingest", "trajectories": parsed.trajectories.len(), "points": points, "dropped": parsed.dropped, "out": path_str(&out)}))
        }
        Command::Synth { world, n, out, graph_out, common } => {
            let mut cfg = load_config(&common)?;
            if let Some(w) = world {
                cfg.world.kind = match w {
                    WorldArg::Default => WorldKind::Default,
                    WorldArg::Y => WorldKind::Y,
                    WorldArg::Fig3 => WorldKind::Fig3,
                };
            }
            let mut spec = cfg.world.spec();
            if let Some(n) = n {
                spec.n_trajectories = n;
            }
            let w = synth_world(&spec)?;
            write_trajs(&out, &w.trajectories, TrajFormat::LabeledCsv)?;
            if let Some(g) = &graph_out {
                w.graph.save(g)?;
            }
            Ok(json!({"command": "synth", "trajectories": w.trajectories.len(), "nodes": w.graph.n_nodes(), "seed": spec.seed, "out": path_str(&out)}))
        }
        Command::BuildGraph { input, out, margin, common } => {
            let cfg = load_config(&common)?;
            let trajs = read_trajs(&input)?;
            let bbox = BoundingBox::around(trajs.iter().flat_map(|t| &t.points), margin)?;
            let g = build_graph(&trajs, &cfg.graph, &bbox)?;
            g.save(&out)?;
            Ok(json!({"command": "build-graph", "nodes": g.n_nodes(), "edges": g.edges().len(), "out": path_str(&out)}))
        }
        Command::Forge { input, graph, kind, count, out, common } => {
            let cfg = load_config(&common)?;
            let g = SubgoalGraph::load(&graph)?;
            let trajs = read_trajs(&input)?;
            if trajs.is_empty() {
                return Err(Failure::Data(anyhow::anyhow!("no usable trajectories in {}", input.display())));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.runner.seed);
            let f = &cfg.forge;
            let mut forged = Vec::with_capacity(count);
            let mut attempts = 0;
            while forged.len() < count && attempts < 50 * count.max(1) {
                attempts += 1;
                let src = trajs.choose(&mut rng).expect("non-empty");
                let t = match kind {
                    KindArg::BigDetour => Some(make_big_detour(src, f.d, f.omega, &mut rng)?),
                    KindArg::SmallDetour => make_small_detour_on_graph(src, &g, cfg.diffusion.len, f.d, f.omega_star, &mut rng).ok(),
                    KindArg::RouteSwitch => make_route_switch(src, trajs.choose(&mut rng).expect("non-empty"), f.sigma),
                };
                if let Some(mut t) = t {
                    t.id = format!("{}-{}", t.id, forged.len());
                    forged.push(t);
                }
            }
            write_trajs(&out, &forged, TrajFormat::LabeledCsv)?;
            Ok(json!({"command": "forge", "requested": count, "forged": forged.len(), "attempts": attempts, "out": path_str(&out)}))
        }
        Command::TrainHigh { graph, input, out, common } => {
            let cfg = load_config(&common)?;
            let g = SubgoalGraph::load(&graph)?;
            let (seqs, _, skipped) = training_data(&read_trajs(&input)?, &g, cfg.diffusion.len)?;
            let t = train_iql(&seqs, &g, &cfg.iql)?;
            save_q(&t.q, &out)?;
            Ok(json!({"command": "train-high", "sequences": seqs.len(), "skipped": skipped, "epochs": t.loss_curve.len(), "final_loss": t.loss_curve.last(), "out": path_str(&out)}))
        }
        Command::TrainLow { graph, input, out, common } => {
            let cfg = load_config(&common)?;
            let g = SubgoalGraph::load(&graph)?;
            let (_, legs, skipped) = training_data(&read_trajs(&input)?, &g, cfg.diffusion.len)?;
            let t = train_diffusion(&legs, &cfg.diffusion)?;
            save_diffusion(&t.model, &out)?;
            Ok(json!({"command": "train-low", "legs": legs.len(), "skipped": skipped, "steps": t.steps, "final_loss": t.loss_curve.last(), "out": path_str(&out)}))
        }
        Command::Detect {
            graph,
            high,
            low,
            input,
            out,
            mode,
            gamma_q,
            beta_e,
            t_inf,
            common,
        } => {
            let cfg = load_config(&common)?;
            let g = SubgoalGraph::load(&graph)?;
            let q = load_q(&high)?;
            let dm = load_diffusion(&low)?;
            let thresholds = Thresholds {
                gamma_q: gamma_q.unwrap_or(cfg.thresholds.gamma_q),
                beta_e: beta_e.or(cfg.thresholds.beta_e).unwrap_or(Thresholds::default().beta_e),
            };
            let dc = DetectorConfig {
                thresholds,
                mode: match mode {
                    ModeArg::Full => Mode::Full,
                    ModeArg::HighOnly => Mode::HighOnly,
                    ModeArg::LowOnly => Mode::LowOnly,
                },
                t_inf: t_inf.unwrap_or(cfg.runner.t_inf),
                samples: cfg.runner.samples,
                seed: cfg.runner.seed,
                batch: cfg.runner.batch,
            };
            let det = Detector::new(&q, &dm, &g, dc)?;
            let reports = det.detect(&read_trajs(&input)?)?;
            save_reports(&out, &reports)?;
            let anomalous = reports.iter().filter(|r| r.is_anomaly).count();
            Ok(json!({"command": "detect", "trajectories": reports.len(), "anomalous": anomalous, "gamma_q": thresholds.gamma_q, "beta_e": thresholds.beta_e, "out": path_str(&out)}))
        }
        Command::Evaluate { out, models, common } => {
            let cfg = load_config(&common)?;
            let report = match (&models.graph, &models.high, &models.low) {
                (Some(g), Some(h), Some(l)) => {
                    let pre = (SubgoalGraph::load(g)?, load_q(h)?, load_diffusion(l)?);
                    Session::new(&cfg, Some(pre))?.report(&[Mode::Full])?
                }
                _ => run_experiment(&cfg)?,
            };
            write_json(&out, &report)?;
            let full = report.full().expect("full variant");
            Ok(json!({"command": "evaluate", "repeats": full.repeats.len(), "f1": f1_summary(&full.summary), "gamma_q": report.thresholds.gamma_q, "beta_e": report.thresholds.beta_e, "out": path_str(&out)}))
        }
        Command::Ablate { out, common } => {
            let cfg = load_config(&common)?;
            let report = ablate(&cfg)?;
            write_json(&out, &report)?;
            let f1: serde_json::Map<String, Value> = report.variants.iter().map(|(m, v)| (mode_name(*m).to_string(), f1_summary(&v.summary))).collect();
            Ok(json!({"command": "ablate", "f1": f1, "out": path_str(&out)}))
        }
        Command::Sweep { param, values, out, common } => {
            let param: SweepParam = param.parse()?;
            let cfg = load_config(&common)?;
            let session = Session::new(&cfg, None)?;
            let report = sweep(&session, param, &values)?;
            write_json(&out, &report)?;
            let points: Vec<Value> = report.points.iter().map(|p| json!({"value": p.value, "f1": f1_summary(&p.summary)})).collect();
            Ok(json!({"command": "sweep", "param": param, "points": points, "out": path_str(&out)}))
        }
        Command::ExportGeojson { input, report, graph, out, .. } => {
            let trajs = match &input {
                Some(p) => read_trajs(p)?,
                None => Vec::new(),
            };
            let reports = match &report {
                Some(p) => load_reports(p)?,
                None => Vec::new(),
            };
            let g = graph.as_deref().map(SubgoalGraph::load).transpose()?;
            let fc = to_geojson(&trajs, &reports, g.as_ref());
            let n = fc.features.len();
            std::fs::write(&out, fc.to_string() + "\n").with_context(|| format!("writing {}", out.display()))?;
            Ok(json!({"command": "export-geojson", "features": n, "out": path_str(&out)}))
        }
    }
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Full => "full",
        Mode::HighOnly => "high_only",
        Mode::LowOnly => "low_only",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
