//! Fixtures shared by the eviction benchmarks.

use laq_core::{gen_synthetic_trace, SynthParams, TraceBundle};

/// Constructed trace with `t_input` prefill positions over a 4×4 head grid.
pub fn trace_fixture(t_input: usize) -> TraceBundle {
    gen_synthetic_trace(&SynthParams {
        layers: 4,
        heads: 4,
        head_dim: 32,
        t_input,
        t_response: 32,
        seed: 42,
        ..Default::default()
    })
    .expect("fixture parameters are feasible")
}
