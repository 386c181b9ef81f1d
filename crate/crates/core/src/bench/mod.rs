//! Benchmark manifests, metric providers, aggregation and trace export.

mod manifest;
mod metrics;
mod runner;
mod trace_csv;

pub use manifest::{
    load_manifest, load_mask_png, manifest_dir, parse_manifest_str, resolve, serialize_manifest, write_mask_png,
    BenchItem, ImageData, MASK_THRESHOLD,
};
pub use metrics::{
    aggregate, evaluate, AlignmentProvider, CaptionStub, EmbeddingStub, MetricRecord, ProviderRegistry, ScatterRow,
    SelfSimilarityStub, StructureProvider, Summary, TypeSummary,
};
pub use runner::{edit_item, run_bench, BenchOptions, ItemOutcome};
pub use trace_csv::{
    emit_trace, format_real, load_trace, parse_trace, quantize, trace_long_format, trace_to_csv, TRACE_DIGITS,
    TRACE_HEADER,
};
