//! Prompt templates shipped with the engine.

pub const ROUTING: &str = include_str!("prompts/routing.txt");
pub const JUDGE: &str = include_str!("prompts/judge.txt");
pub const DECOMPOSE: &str = include_str!("prompts/decompose.txt");
pub const DECOMPOSE_RETRY: &str = include_str!("prompts/decompose_retry.txt");
pub const SYNTHESIS: &str = include_str!("prompts/synthesis.txt");
pub const FUSION: &str = include_str!("prompts/fusion.txt");
