//! Experiment harness: expert banks, runs, metrics and persisted records.

pub mod bank;
pub mod expert_setting;
pub mod metrics;
pub mod record;
pub mod replication;
pub mod run;

use serde::Serialize;
use sha2::{Digest, Sha256};

pub use bank::{
    auto_subsets, build_correction_bank, build_subset_bank, BankTemplate, Expert, ExpertBank, ExpertFeatureRow,
    FeatureMap,
};
pub use metrics::{best_convex, best_convex_oracle, estimate_sigma2, metrics, ConvexFit, MetricsReport, RegretReport};
pub use run::{
    aggregate_trace, run_experts, run_online, sliding_window_refit, ExpertTrace, RateSpec, Refit, RuleSpec, RunRecord,
};

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serialises to JSON");
    let digest = Sha256::digest(&json);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
