//! Kinematic-graph transformer policy with physically grounded attention
//! biases, a toy bimanual tracking environment and a PPO trainer.

pub mod biasgen;
pub mod config;
pub mod encoder;
pub mod kingraph;
pub mod nncore;
pub mod ppo;
pub mod toyenv;

pub use biasgen::{BiasConfig, BiasParams, GraphBiasCache, HeadAllocation};
pub use kingraph::{build_graph, detect_contacts, ContactSet, EdgeType, GraphSpec, Hand, KinematicGraph, NodeId};
pub use nncore::{NnError, ParamStore, Tape, Tensor, Var};
pub use encoder::{Arch, BaselineConfig, EncoderConfig, MlpBaseline, PhysGraphNet, PolicyModel, PolicySample, TokenMap};
pub use toyenv::{EnvConfig, EnvError, Scene, StepResult, Task, ToyEnv};
pub use config::{ConfigError, RunConfig};
pub use ppo::{PpoConfig, PpoError};
