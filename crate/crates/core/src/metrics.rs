//! Recall instrumentation and stage latency accounting.
//!
//! `gold_selection` ranks prefill keys by the summed attention of every
//! recorded response query; a predicted selection is scored by the fraction
//! of gold indices it recovers. The window sweep slides a fixed-length window
//! across the concatenated input+response query record, with start 0 at the
//! first generated token.

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::grid::HeadGrid;
use crate::policies::{attn_score_sum, attn_score_sum_masked, ScoreMode};
use crate::tensor::{top_k_indices, Mat};
use crate::kvcache::Selection;
use crate::trace::TraceBundle;

/// Per head, top-`budget` of the response queries' summed attention.
pub fn gold_selection(
    response_queries: &HeadGrid<Mat>,
    keys: &HeadGrid<Mat>,
    budget: usize,
    mode: ScoreMode,
) -> Result<Selection> {
    if !response_queries.same_geometry(keys) {
        return Err(shape("response record geometry differs from keys"));
    }
    if response_queries.cells().iter().any(|q| q.rows() == 0) || response_queries.cells().is_empty() {
        return Err(invalid("gold selection needs a non-empty response record"));
    }
    let t = keys.cells()[0].rows();
    let indices = response_queries.try_map(|l, h, q| {
        let s = attn_score_sum(q, keys.get(l, h), mode)?;
        Ok::<_, crate::Error>(top_k_indices(&s, budget))
    })?;
    Selection::uniform(indices, budget, t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub per_head: HeadGrid<f64>,
    pub mean: f64,
    /// Set when some gold set was empty and its recall was defined as 1.0.
    pub degenerate: bool,
    pub budget: usize,
    pub window_len: Option<usize>,
    pub mode: Option<ScoreMode>,
}

impl RecallReport {
    pub fn with_echo(mut self, window_len: Option<usize>, mode: Option<ScoreMode>) -> Self {
        self.window_len = window_len;
        self.mode = mode;
        self
    }

    pub fn per_layer_mean(&self) -> Vec<f64> {
        (0..self.per_head.layers())
            .map(|l| {
                let heads = self.per_head.heads();
                (0..heads).map(|h| *self.per_head.get(l, h)).sum::<f64>() / heads as f64
            })
            .collect()
    }
}

fn intersection_len(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// `|pred ∩ gold| / |gold|` per head, averaged uniformly over layer × head.
pub fn recall(pred: &Selection, gold: &Selection) -> Result<RecallReport> {
    if !pred.indices().same_geometry(gold.indices()) {
        return Err(shape("predicted and gold selections have different geometry"));
    }
    if pred.candidates() != gold.candidates() {
        return Err(shape(format!(
            "selections over {} vs {} candidates",
            pred.candidates(),
            gold.candidates()
        )));
    }
    let mut degenerate = false;
    let per_head = gold.indices().map(|l, h, g| {
        if g.is_empty() {
            degenerate = true;
            1.0
        } else {
            intersection_len(pred.head(l, h), g) as f64 / g.len() as f64
        }
    });
    let cells = per_head.cells();
    let mean = cells.iter().sum::<f64>() / cells.len().max(1) as f64;
    Ok(RecallReport {
        per_head,
        mean,
        degenerate,
        budget: gold.budgets().iter().copied().max().unwrap_or(0),
        window_len: None,
        mode: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// Window start relative to the first generated token.
    pub start: i64,
    pub mean_recall: f64,
    pub per_layer: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub window_len: usize,
    pub budget: usize,
    pub mode: ScoreMode,
    pub points: Vec<SweepPoint>,
}

impl SweepCurve {
    pub fn at(&self, start: i64) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.start == start)
    }

    /// Plot-ready CSV: `start,mean_recall,layer_0,..`.
    pub fn to_csv(&self) -> Result<String> {
        let layers = self.points.first().map_or(0, |p| p.per_layer.len());
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["start".to_string(), "mean_recall".to_string()];
        header.extend((0..layers).map(|l| format!("layer_{l}")));
        w.write_record(&header).map_err(csv_err)?;
        for p in &self.points {
            let mut rec = vec![p.start.to_string(), p.mean_recall.to_string()];
            rec.extend(p.per_layer.iter().map(f64::to_string));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| invalid(e.to_string()))
    }
}

pub(crate) fn csv_err(e: csv::Error) -> crate::Error {
    invalid(format!("csv: {e}"))
}

/// Input queries followed by response queries, per head.
fn combined_record(trace: &TraceBundle) -> Result<HeadGrid<Mat>> {
    trace
        .input_queries
        .try_map(|l, h, q| q.vstack(trace.response_queries.get(l, h)))
}

/// Selection from a window over the combined record (no pooling, no forcing).
pub fn window_selection(
    record: &HeadGrid<Mat>,
    keys: &HeadGrid<Mat>,
    start: usize,
    window_len: usize,
    budget: usize,
    mode: ScoreMode,
) -> Result<Selection> {
    let t = keys.cells()[0].rows();
    let positions: Vec<usize> = (start..start + window_len).collect();
    let indices = record.try_map(|l, h, r| {
        let w = r.slice_rows(start, window_len)?;
        let s = attn_score_sum_masked(&w, &positions, keys.get(l, h), mode)?;
        Ok::<_, crate::Error>(top_k_indices(&s, budget))
    })?;
    Selection::uniform(indices, budget, t)
}

/// Recall of every admissible fixed-length window position against gold.
pub fn window_recall_sweep(trace: &TraceBundle, window_len: usize, budget: usize, mode: ScoreMode) -> Result<SweepCurve> {
    let t_in = trace.meta.t_input;
    let t_resp = trace.meta.t_response;
    if t_in == 0 || t_resp == 0 {
        return Err(invalid("sweep needs both input and response queries"));
    }
    let total = t_in + t_resp;
    if window_len == 0 || window_len > total {
        return Err(invalid(format!("window {window_len} does not fit a record of {total}")));
    }
    let gold = gold_selection(&trace.response_queries, &trace.keys, budget, mode)?;
    let record = combined_record(trace)?;
    let points = (0..=total - window_len)
        .into_par_iter()
        .map(|start| {
            let pred = window_selection(&record, &trace.keys, start, window_len, budget, mode)?;
            let r = recall(&pred, &gold)?;
            Ok(SweepPoint {
                start: start as i64 - t_in as i64,
                mean_recall: r.mean,
                per_layer: r.per_layer_mean(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepCurve { window_len, budget, mode, points })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prefill,
    Lookahead,
    ReEvict,
    Decode,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Prefill, Stage::Lookahead, Stage::ReEvict, Stage::Decode];
}

/// One timed stage, in seconds since a shared epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageEvent {
    pub stage: Stage,
    pub start: f64,
    pub end: f64,
}

/// Records stage events against a single epoch.
#[derive(Debug)]
pub struct StageClock {
    epoch: Instant,
    events: Vec<StageEvent>,
}

impl Default for StageClock {
    fn default() -> Self {
        Self::new()
    }
}

impl StageClock {
    pub fn new() -> Self {
        Self { epoch: Instant::now(), events: Vec::new() }
    }

    pub fn time<T>(&mut self, stage: Stage, f: impl FnOnce() -> T) -> T {
        let start = self.epoch.elapsed().as_secs_f64();
        let out = f();
        let end = self.epoch.elapsed().as_secs_f64();
        self.events.push(StageEvent { stage, start, end });
        out
    }

    pub fn events(&self) -> &[StageEvent] {
        &self.events
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageShare {
    pub seconds: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub prefill: StageShare,
    pub lookahead: StageShare,
    pub re_evict: StageShare,
    pub decode: StageShare,
    pub total_seconds: f64,
    /// Same as `lookahead.fraction`, surfaced for quick comparison.
    pub lookahead_fraction: f64,
}

impl LatencyReport {
    pub fn fractions(&self) -> [f64; 4] {
        [self.prefill.fraction, self.lookahead.fraction, self.re_evict.fraction, self.decode.fraction]
    }
}

/// Per-stage durations and their shares of the total.
pub fn latency_breakdown(events: &[StageEvent]) -> Result<LatencyReport> {
    let mut last_end = f64::NEG_INFINITY;
    let mut sums: HashMap<Stage, f64> = HashMap::new();
    for e in events {
        if !(e.start.is_finite() && e.end.is_finite()) || e.end < e.start || e.start < last_end {
            return Err(invalid(format!("non-monotone stage event {e:?}")));
        }
        last_end = e.end;
        *sums.entry(e.stage).or_default() += e.end - e.start;
    }
    if let Some(missing) = Stage::ALL.iter().find(|s| !sums.contains_key(s)) {
        return Err(invalid(format!("missing stage {missing:?}")));
    }
    let total: f64 = Stage::ALL.iter().map(|s| sums[s]).sum();
    if total <= 0.0 {
        return Err(invalid("stage timeline has zero total duration"));
    }
    let share = |s: Stage| StageShare { seconds: sums[&s], fraction: sums[&s] / total };
    let lookahead = share(Stage::Lookahead);
    Ok(LatencyReport {
        prefill: share(Stage::Prefill),
        lookahead_fraction: lookahead.fraction,
        lookahead,
        re_evict: share(Stage::ReEvict),
        decode: share(Stage::Decode),
        total_seconds: total,
    })
}
