//! Interleaved think/answer reasoning traces, rule-based outcome and process
//! rewards, and a two-phase GRPO curriculum over a synthetic diagnostic
//! environment.

pub mod cli;
pub mod curriculum;
pub mod eval;
pub mod grpo;
pub mod metrics;
pub mod policy;
pub mod rewards;
pub mod synthcxr;
pub mod trace;
