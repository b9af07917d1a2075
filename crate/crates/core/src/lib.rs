//! Object-grounded evidence search and policy learning on synthetic video
//! episodes.

pub mod env;
pub mod error;
pub mod experiment;
pub mod infer;
pub mod io;
pub mod mcts;
pub mod pipeline;
pub mod policy;
pub mod seeds;
pub mod state;
pub mod train;

pub use env::{EnvConfig, ObjectRef, RewardConfig, VideoEpisode};
pub use error::{GlimpseError, Result};
pub use policy::{FeatureLayout, PolicyKind, PolicyParams};
pub use state::{Action, Limits, ReasoningState, Trajectory};
