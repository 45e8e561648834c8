//! End-to-end driver behind the command-line tool: synthetic artifact
//! generation, plan execution with metrics, the identity-verification suite,
//! and solver benchmarks.

pub mod artifacts;
pub mod bench;
pub mod edit;
pub mod metrics;
pub mod verify;

pub use artifacts::{generate, BatchConfig, GenerateConfig, Generated, Manifest, ModelConfig, PreservationConfig};
pub use bench::{bench_json_lines, render_table, run_bench, BenchGrid, BenchRow, BenchSize};
pub use edit::{run_edit, LayerRecord, Metrics, RunReport};
pub use metrics::{
    efficacy, generalization, routing_similarity, routing_similarity_shifted, specificity, EfficacyStats,
    EFFICACY_THRESHOLD, GENERALIZATION_NOISE,
};
pub use verify::{run_verify, CheckResult, VerifyConfig, VerifyReport};

/// Reads a TOML configuration file.
pub fn load_toml<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> crate::Result<T> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| crate::Error::Config(format!("{}: {e}", path.display())))
}

/// Independent stream seed derived from a base seed (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Median of a non-empty sample.
pub(crate) fn median_u64(values: &mut [u64]) -> u64 {
    values.sort_unstable();
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2
    }
}
