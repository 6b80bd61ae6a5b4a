//! Shared fixtures for the benchmarks.

use semfield_core::config::RunConfig;
use semfield_core::scene::{build_sequence, Sequence};

/// The reference scene and its configuration.
pub fn reference() -> (RunConfig, Sequence) {
    let cfg = RunConfig::reference();
    let seq = build_sequence(&cfg.dataset()).expect("reference scene builds");
    (cfg, seq)
}
