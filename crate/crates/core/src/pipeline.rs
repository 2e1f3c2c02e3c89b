//! End-to-end toy-model run: prefill → lookahead → re-evict → decode, with
//! each stage timed.

use crate::error::Result;
use crate::kvcache::QCache;
use crate::metrics::{latency_breakdown, LatencyReport, Stage, StageClock, StageEvent};
use crate::model::{ModelState, PrefillOutput, TokenId};
use crate::policies::{run_lookahead, select, Lookahead, PolicyConfig, PolicyId, PolicyInputs, ScoredSelection};

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub prefill: PrefillOutput,
    pub lookahead: Option<Lookahead>,
    pub selection: ScoredSelection,
    /// Tokens fed to the decoder, starting with the prefill prediction.
    pub transcript: Vec<TokenId>,
    pub events: Vec<StageEvent>,
    pub latency: LatencyReport,
}

impl PipelineOutput {
    pub fn qcache(&self) -> Option<&QCache> {
        self.lookahead.as_ref().map(|l| &l.qcache)
    }
}

/// Runs `policy` end to end. Only `laq`/`laq_pp` run a non-empty lookahead
/// stage; for the other policies it is recorded with zero work.
pub fn run_pipeline(
    model: &ModelState,
    prompt: &[TokenId],
    policy: PolicyId,
    cfg: &PolicyConfig,
    decode_steps: usize,
) -> Result<PipelineOutput> {
    let mut clock = StageClock::new();
    let prefill = clock.time(Stage::Prefill, || model.prefill(prompt))?;
    let lookahead = clock.time(Stage::Lookahead, || {
        if policy.needs_lookahead() {
            run_lookahead(model, &prefill, cfg).map(Some)
        } else {
            Ok(None)
        }
    })?;
    let (selection, mut cache) = clock.time(Stage::ReEvict, || -> Result<_> {
        let inputs = PolicyInputs {
            keys: prefill.cache.keys(),
            prefill_queries: &prefill.queries,
            qcache: lookahead.as_ref().map(|l| &l.qcache),
        };
        let sel = select(policy, inputs, cfg)?;
        let cache = prefill.cache.compact(&sel.selection)?;
        Ok((sel, cache))
    })?;
    let t = prompt.len();
    let transcript = clock.time(Stage::Decode, || -> Result<_> {
        let mut token = prefill.first_token;
        let mut out = Vec::with_capacity(decode_steps);
        for s in 0..decode_steps {
            let step = model.decode_step(&cache, token, t + s)?;
            cache.append_step(&step)?;
            out.push(token);
            token = step.next_token;
        }
        Ok(out)
    })?;
    let events = clock.events().to_vec();
    let latency = latency_breakdown(&events)?;
    Ok(PipelineOutput { prefill, lookahead, selection, transcript, events, latency })
}
