//! Frozen-embedding evaluation, collapse diagnostics and cost accounting.

pub mod cost;
pub mod diag;
pub mod probe;

pub use cost::{measure_peak_activation, predict_cost, CostModel, Method};
pub use diag::{attention_entropy, attention_entropy_at, embedding_spread, entropy_from_attention, mean_embedding_norm, Histogram};
pub use probe::{embed_frozen, linear_probe, random_init_baseline, ProbeConfig, ProbeMode, ProbeResult};
