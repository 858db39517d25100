//! Two-stage trajectory anomaly detection. A subgoal graph turns each
//! trajectory into a sequence of subgoal transitions and fixed-length legs;
//! an inverse soft-Q scorer rejects unusual transitions and a
//! subgoal-conditioned diffusion model rejects legs it cannot reconstruct.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` deliberately rejects NaN

pub mod checkpoint;
pub mod detector;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod export;
pub mod forge;
pub mod geom;
pub mod graph;
pub mod iql;
pub mod nn;
pub mod segment;
pub mod traj;

pub use error::{Error, Result};
