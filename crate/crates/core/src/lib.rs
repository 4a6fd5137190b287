//! Reward-function generation, preference ranking, refinement and
//! relabeling for unlabeled offline imitation-learning datasets.

pub mod cli;
pub mod config;
pub mod llm;
pub mod noise;
pub mod optimizer;
pub mod prompts;
pub mod relabel;
pub mod reward;
pub mod rpr;
pub mod trajectory;
