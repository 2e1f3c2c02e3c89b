//! KV-cache eviction lab.
//!
//! A seeded toy decoder (`model`), a KV store with zero-copy selection views
//! (`kvcache`), the eviction policies including lookahead Q-cache
//! re-eviction (`policies`), recall and latency instrumentation (`metrics`),
//! the KVTR trace format (`trace`), constructed divergence traces (`synth`)
//! and the experiment harness (`pipeline`, `experiment`).

mod error;
pub mod experiment;
pub mod grid;
pub mod kvcache;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod policies;
pub mod synth;
pub mod tensor;
pub mod trace;

pub use error::{Error, Result};
pub use experiment::{
    run_ablation, run_experiment, run_latency, export_queries, AblationAxes, AblationReport, CellResult, CellStatus,
    ExperimentConfig, ExperimentMode, ResultRecord,
};
pub use grid::HeadGrid;
pub use kvcache::{KVCacheStore, KvSource, QCache, QuerySet, Selection, SelectionView, WindowSource, WindowSpec};
pub use metrics::{
    gold_selection, latency_breakdown, recall, window_recall_sweep, LatencyReport, RecallReport, Stage, SweepCurve,
};
pub use model::{init_model, ModelConfig, ModelState, StepOutput, TokenId};
pub use pipeline::{run_pipeline, PipelineOutput};
pub use policies::{select, PolicyConfig, PolicyId, PolicyInputs, ScoreMode, ScoredSelection};
pub use synth::{gen_synthetic_trace, SynthParams};
pub use tensor::{top_k_indices, Mat, ScoreVec};
pub use trace::{read_trace, write_trace, TraceBundle, TraceError, TraceMeta};
