//! The synthetic navigation world: graphs, panoramas, episodes, the
//! shortest-path expert and templated instructions.

pub mod dataset;
pub mod instruction;
pub mod observe;
pub mod path;
pub mod sim;
pub mod world;

pub use dataset::{generate_worlds, make_dataset, Dataset, DatasetConfig, Split};
pub use instruction::{generate_instruction, InstructionConfig, Token, Vocabulary};
pub use observe::{observe, raw_feature_dim, Action, ActionSet, NavigableView, Observation, View, N_VIEWS};
pub use path::{distances_from, geodesic, path_length, shortest_path};
pub use sim::{expert_trajectory, run_episode, EnvConfig, Episode, EpisodeSpec, Outcome, StepResult, Trajectory, TrajectoryStep, Transition};
pub use world::{generate_world, NavGraph, Viewpoint, ViewpointId, WorldConfig};
