//! Staged, resumable experiment runner driven by a TOML config.

mod config;
mod fixture;
mod manifest;
mod stages;

pub use config::{
    AttributionSection, CorpusSection, Diagnostic, DiscoverySection, DistillationSection, EndpointConfig,
    EvaluationSection, PipelineConfig, Seeds, SlicingSection, TokenizerSection,
};
pub use fixture::{fixture_config, write_fixture};
pub use manifest::{digest, inputs_hash, sha256_file, FileDigest, Manifest, RunLock};
pub use stages::{
    decode_prefixes, discovery_sample, parse_stages, run, DecodeRow, Layout, RunOptions, Stage, UnitReport, UnitStatus,
};
