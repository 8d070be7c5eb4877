//! Successor-feature deep Q-learning with generalized policy improvement on
//! planted synthetic MDPs.
//!
//! The crate generates finite MDPs whose successor feature is exactly
//! representable by a ReLU network, trains SF networks and a scalar DQN
//! baseline on them, measures transfer across tasks, and checks the
//! convergence and transfer bounds numerically.

pub mod dqn;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod mdp;
pub mod mlp;
pub mod policy;
pub mod replay;
pub mod rng;
pub mod table;
pub mod theory;
pub mod trainer;
pub mod transfer;

mod codec;

pub use error::{Error, Result};
pub use mdp::{EnvConfig, MdpParts, SfSolution, SyntheticMDP, Task, TaskOrigin, Transition};
pub use mlp::{init_near, param_distance, FeatureVector, NetShape, NetworkParams};
pub use policy::{ActionRule, PolicySpec};
pub use replay::ReplayBuffer;
pub use table::QTable;
pub use trainer::{TaskResult, TrainerConfig, TrainingLog};
