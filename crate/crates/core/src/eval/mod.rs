//! Evaluation bench: metrics, synthetic worlds and the experiment runner.

mod experiment;
mod metrics;
mod world;

pub use experiment::*;
pub use metrics::{fmt_metric, mean_defined, metrics, ConfusionCounts, Metrics};
pub use world::{synth_world, SynthWorld, WorldNode, WorldRoute, WorldSpec};
