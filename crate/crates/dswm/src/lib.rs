//! Dual-stream world model: a generative temporal model that factors
//! experience into a context stream (where am I) and a content stream (what
//! do I see), bridging them with an episodic key-value memory. Includes the
//! single-stream baseline, gridworld environments, rollout evaluation,
//! place-field analysis, and successor-similarity reinforcement learning.

pub mod dnd;
pub mod evaluation;
pub mod gridworld;
pub mod harness;
pub mod models;
pub mod numerics;
pub mod successor_rl;
