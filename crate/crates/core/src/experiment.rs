//! Policy × budget × subject sweeps, the lookahead ablations, latency runs
//! and query export.
//!
//! A subject is either a toy-model run (prompt drawn from `seed`, golden
//! response from unrestricted decoding) or a replayed trace. Each cell is
//! evaluated independently; a failing cell is recorded with its reason and
//! the sweep continues.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, invalid, Result};
use crate::grid::HeadGrid;
use crate::kvcache::QCache;
use crate::metrics::{csv_err, gold_selection, recall, LatencyReport, RecallReport};
use crate::model::{init_model, ModelConfig, ModelState, TokenId};
use crate::pipeline::run_pipeline;
use crate::policies::{prefill_window, run_lookahead, select, PolicyConfig, PolicyId, PolicyInputs};
use crate::synth::{gen_synthetic_trace, SynthParams};
use crate::tensor::Mat;
use crate::trace::{read_trace, record_model_trace, TraceBundle};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentMode {
    ToyModel,
    TraceReplay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub mode: ExperimentMode,
    pub policies: Vec<PolicyId>,
    pub budgets: Vec<usize>,
    pub policy: PolicyConfig,
    /// Toy mode: prompt seed. Trace mode: synthetic trace `i` uses `seed + i`.
    pub seed: u64,
    pub model: ModelConfig,
    pub prompt_len: usize,
    /// Toy mode: golden response length and decode length of every cell.
    pub response_len: usize,
    pub traces: Vec<PathBuf>,
    pub synthetic: SynthParams,
    /// Synthetic traces generated in trace mode, in addition to `traces`.
    pub synthetic_count: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: ExperimentMode::TraceReplay,
            policies: PolicyId::ALL.to_vec(),
            budgets: vec![8, 16, 32, 64],
            policy: PolicyConfig::default(),
            seed: 0,
            model: ModelConfig::default(),
            prompt_len: 512,
            response_len: 32,
            traces: Vec::new(),
            synthetic: SynthParams::default(),
            synthetic_count: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.policies.is_empty() {
            return Err(config("no policies requested"));
        }
        if self.budgets.is_empty() || self.budgets.contains(&0) {
            return Err(config("budgets must be a non-empty list of positive integers"));
        }
        match self.mode {
            ExperimentMode::ToyModel => {
                self.model.validate()?;
                if self.prompt_len == 0 || self.response_len == 0 {
                    return Err(config("prompt_len and response_len must be >= 1"));
                }
                if self.prompt_len + self.response_len.max(self.policy.lookahead_steps) > self.model.max_pos {
                    return Err(config(format!(
                        "prompt_len + decode length exceeds max_pos {}",
                        self.model.max_pos
                    )));
                }
            }
            ExperimentMode::TraceReplay => {
                if self.traces.is_empty() && self.synthetic_count == 0 {
                    return Err(config("trace mode needs trace files or synthetic_count >= 1"));
                }
                if let Some(p) = self.traces.iter().find(|p| !p.is_file()) {
                    return Err(config(format!("trace file {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub subject: String,
    pub policy: PolicyId,
    pub budget: usize,
    pub status: CellStatus,
    pub recall: Option<RecallReport>,
    pub latency: Option<LatencyReport>,
    pub transcript: Option<Vec<TokenId>>,
    /// Fraction of decoded tokens equal to the golden response.
    pub token_agreement: Option<f64>,
}

impl CellResult {
    fn failed(subject: &str, policy: PolicyId, budget: usize, reason: String) -> Self {
        Self {
            subject: subject.to_string(),
            policy,
            budget,
            status: CellStatus::Failed { reason },
            recall: None,
            latency: None,
            transcript: None,
            token_agreement: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == CellStatus::Ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub cells: Vec<CellResult>,
}

impl ResultRecord {
    pub fn all_ok(&self) -> bool {
        self.cells.iter().all(CellResult::is_ok)
    }

    /// Copy with every wall-clock field cleared.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for c in &mut r.cells {
            c.latency = None;
        }
        r
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| invalid(format!("json: {e}")))
    }

    /// One row per cell.
    pub fn cells_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "subject",
            "policy",
            "budget",
            "status",
            "reason",
            "recall_mean",
            "lookahead_fraction",
            "total_seconds",
            "token_agreement",
        ])
        .map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        for c in &self.cells {
            let reason = match &c.status {
                CellStatus::Ok => String::new(),
                CellStatus::Failed { reason } => reason.clone(),
            };
            w.write_record([
                c.subject.clone(),
                c.policy.to_string(),
                c.budget.to_string(),
                if c.is_ok() { "ok".into() } else { "failed".into() },
                reason,
                opt(c.recall.as_ref().map(|r| r.mean)),
                opt(c.latency.as_ref().map(|l| l.lookahead_fraction)),
                opt(c.latency.as_ref().map(|l| l.total_seconds)),
                opt(c.token_agreement),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| invalid(e.to_string()))
    }

    /// Writes `results.json` and `cells.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("results.json"), self.to_json()?)?;
        fs::write(dir.join("cells.csv"), self.cells_csv()?)?;
        Ok(())
    }
}

enum Subjects {
    Toy { model: Box<ModelState>, prompt: Vec<TokenId>, golden: Box<TraceBundle> },
    Traces(Vec<(String, TraceBundle)>),
}

/// Prompt of `len` tokens drawn uniformly from the vocabulary.
pub fn toy_prompt(vocab: usize, len: usize, seed: u64) -> Vec<TokenId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(0..vocab as TokenId)).collect()
}

/// Traces named in `cfg.traces` followed by `synthetic_count` generated ones.
pub fn load_traces(cfg: &ExperimentConfig) -> Result<Vec<(String, TraceBundle)>> {
    let mut out = Vec::new();
    for p in &cfg.traces {
        out.push((p.display().to_string(), read_trace(p)?));
    }
    for i in 0..cfg.synthetic_count {
        let seed = cfg.seed.wrapping_add(i as u64);
        let params = SynthParams { seed, ..cfg.synthetic.clone() };
        out.push((format!("synthetic:{seed}"), gen_synthetic_trace(&params)?));
    }
    Ok(out)
}

fn build_subjects(cfg: &ExperimentConfig) -> Result<Subjects> {
    match cfg.mode {
        ExperimentMode::ToyModel => {
            let model = init_model(&cfg.model)?;
            let prompt = toy_prompt(cfg.model.vocab, cfg.prompt_len, cfg.seed);
            let golden = record_model_trace(&model, &prompt, cfg.response_len)?;
            Ok(Subjects::Toy { model: Box::new(model), prompt, golden: Box::new(golden) })
        }
        ExperimentMode::TraceReplay => Ok(Subjects::Traces(load_traces(cfg)?)),
    }
}

/// Policy selection on a recorded trace, scored against its gold set. The
/// Q-cache is the first `lookahead_steps` recorded response queries.
pub fn replay_cell(trace: &TraceBundle, policy: PolicyId, pc: &PolicyConfig) -> Result<RecallReport> {
    pc.validate(policy)?;
    let qcache: Option<QCache> =
        if policy.needs_lookahead() { Some(trace.response_qcache(pc.lookahead_steps)?) } else { None };
    let inputs = PolicyInputs { keys: &trace.keys, prefill_queries: &trace.input_queries, qcache: qcache.as_ref() };
    let pred = select(policy, inputs, pc)?;
    let gold = gold_selection(&trace.response_queries, &trace.keys, pc.budget, pc.score_mode)?;
    recall(&pred.selection, &gold)
}

fn toy_cell(
    model: &ModelState,
    prompt: &[TokenId],
    golden: &TraceBundle,
    policy: PolicyId,
    pc: &PolicyConfig,
    decode_steps: usize,
) -> Result<(RecallReport, LatencyReport, Vec<TokenId>, f64)> {
    pc.validate(policy)?;
    let out = run_pipeline(model, prompt, policy, pc, decode_steps)?;
    let gold = gold_selection(&golden.response_queries, &golden.keys, pc.budget, pc.score_mode)?;
    let report = recall(&out.selection.selection, &gold)?;
    let n = out.transcript.len().min(golden.response_tokens.len());
    let agree = out.transcript.iter().zip(&golden.response_tokens).filter(|(a, b)| a == b).count();
    let agreement = if n == 0 { 1.0 } else { agree as f64 / n as f64 };
    Ok((report, out.latency, out.transcript, agreement))
}

/// Runs every (subject, policy, budget) cell.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultRecord> {
    cfg.validate()?;
    let subjects = build_subjects(cfg)?;
    let cells = match &subjects {
        Subjects::Toy { model, prompt, golden } => {
            // Sequential so stage timings are not skewed by sibling cells.
            let label = format!("toy:{}", cfg.seed);
            let mut cells = Vec::new();
            for &policy in &cfg.policies {
                for &b in &cfg.budgets {
                    let pc = cfg.policy.with_budget(b);
                    cells.push(match toy_cell(model, prompt, golden, policy, &pc, cfg.response_len) {
                        Ok((r, lat, transcript, agree)) => CellResult {
                            subject: label.clone(),
                            policy,
                            budget: b,
                            status: CellStatus::Ok,
                            recall: Some(r),
                            latency: Some(lat),
                            transcript: Some(transcript),
                            token_agreement: Some(agree),
                        },
                        Err(e) => {
                            log::warn!("cell {label}/{policy}/{b} failed: {e}");
                            CellResult::failed(&label, policy, b, e.to_string())
                        }
                    });
                }
            }
            cells
        }
        Subjects::Traces(traces) => {
            let grid: Vec<(usize, PolicyId, usize)> = (0..traces.len())
                .flat_map(|t| cfg.policies.iter().flat_map(move |&p| cfg.budgets.iter().map(move |&b| (t, p, b))))
                .collect();
            grid.par_iter()
                .map(|&(t, policy, b)| {
                    let (label, trace) = &traces[t];
                    match replay_cell(trace, policy, &cfg.policy.with_budget(b)) {
                        Ok(r) => CellResult {
                            subject: label.clone(),
                            policy,
                            budget: b,
                            status: CellStatus::Ok,
                            recall: Some(r),
                            latency: None,
                            transcript: None,
                            token_agreement: None,
                        },
                        Err(e) => {
                            log::warn!("cell {label}/{policy}/{b} failed: {e}");
                            CellResult::failed(label, policy, b, e.to_string())
                        }
                    }
                })
                .collect()
        }
    };
    Ok(ResultRecord { schema_version: SCHEMA_VERSION, config: cfg.clone(), cells })
}

/// Axes for the Q-cache quality and length ablations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationAxes {
    pub steps: Vec<usize>,
    /// Toy mode only: policy producing the low-budget lookahead view.
    pub lookahead_policies: Vec<PolicyId>,
    /// Toy mode only: budget of the lookahead view.
    pub lookahead_budgets: Vec<usize>,
}

impl Default for AblationAxes {
    fn default() -> Self {
        Self {
            steps: vec![1, 2, 4, 8],
            lookahead_policies: vec![PolicyId::SnapKv],
            lookahead_budgets: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub steps: usize,
    pub lookahead_policy: Option<PolicyId>,
    pub lookahead_budget: Option<usize>,
    pub cell: CellResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub axes: AblationAxes,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn all_ok(&self) -> bool {
        self.rows.iter().all(|r| r.cell.is_ok())
    }

    /// Mean recall of ok rows for `(policy, budget, steps)`, averaged over
    /// subjects and lookahead settings.
    pub fn mean_recall(&self, policy: PolicyId, budget: usize, steps: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.cell.policy == policy && r.cell.budget == budget && r.steps == steps)
            .filter_map(|r| r.cell.recall.as_ref().map(|x| x.mean))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["subject", "policy", "budget", "steps", "lookahead_policy", "lookahead_budget", "status", "recall_mean"])
            .map_err(csv_err)?;
        for r in &self.rows {
            let c = &r.cell;
            w.write_record([
                c.subject.clone(),
                c.policy.to_string(),
                c.budget.to_string(),
                r.steps.to_string(),
                r.lookahead_policy.map_or_else(String::new, |p| p.to_string()),
                r.lookahead_budget.map_or_else(String::new, |b| b.to_string()),
                if c.is_ok() { "ok".into() } else { "failed".into() },
                c.recall.as_ref().map_or_else(String::new, |x| x.mean.to_string()),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| invalid(e.to_string()))
    }
}

/// Sweeps the lookahead axes for the lookahead policies in `cfg.policies`.
/// Trace mode varies only `steps`: its Q-cache is the recorded response.
pub fn run_ablation(cfg: &ExperimentConfig, axes: &AblationAxes) -> Result<AblationReport> {
    let policies: Vec<PolicyId> = cfg.policies.iter().copied().filter(|p| p.needs_lookahead()).collect();
    if policies.is_empty() {
        return Err(config("ablation needs laq or laq_pp among the policies"));
    }
    if axes.steps.is_empty() {
        return Err(config("ablation needs at least one steps value"));
    }
    let toy = cfg.mode == ExperimentMode::ToyModel;
    let la_policies: Vec<Option<PolicyId>> = if toy {
        axes.lookahead_policies.iter().map(|&p| Some(p)).collect()
    } else {
        vec![None]
    };
    let la_budgets: Vec<Option<usize>> = if toy && !axes.lookahead_budgets.is_empty() {
        axes.lookahead_budgets.iter().map(|&b| Some(b)).collect()
    } else {
        vec![None]
    };
    let mut rows = Vec::new();
    for &steps in &axes.steps {
        for &lp in &la_policies {
            for &lb in &la_budgets {
                let mut sub = cfg.clone();
                sub.policies = policies.clone();
                sub.policy.lookahead_steps = steps;
                if let Some(p) = lp {
                    sub.policy.lookahead_policy = p;
                }
                sub.policy.lookahead_budget = lb.or(cfg.policy.lookahead_budget);
                let rec = run_experiment(&sub)?;
                rows.extend(rec.cells.into_iter().map(|cell| AblationRow {
                    steps,
                    lookahead_policy: lp,
                    lookahead_budget: lb,
                    cell,
                }));
            }
        }
    }
    Ok(AblationReport { schema_version: SCHEMA_VERSION, config: cfg.clone(), axes: axes.clone(), rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub policy: PolicyId,
    pub budget: usize,
    pub lookahead_steps: usize,
    pub decode_steps: usize,
    pub report: LatencyReport,
}

/// Toy-model stage timings over lookahead lengths and decode lengths.
pub fn run_latency(
    cfg: &ExperimentConfig,
    steps: &[usize],
    decode_lengths: &[usize],
) -> Result<Vec<LatencyRow>> {
    cfg.model.validate()?;
    let model = init_model(&cfg.model)?;
    let prompt = toy_prompt(cfg.model.vocab, cfg.prompt_len, cfg.seed);
    let mut rows = Vec::new();
    for &policy in &cfg.policies {
        for &budget in &cfg.budgets {
            for &s in steps {
                for &d in decode_lengths {
                    let mut pc = cfg.policy.with_budget(budget);
                    pc.lookahead_steps = s;
                    pc.validate(policy)?;
                    let out = run_pipeline(&model, &prompt, policy, &pc, d)?;
                    rows.push(LatencyRow { policy, budget, lookahead_steps: s, decode_steps: d, report: out.latency });
                }
            }
        }
    }
    Ok(rows)
}

pub fn latency_csv(rows: &[LatencyRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "policy",
        "budget",
        "lookahead_steps",
        "decode_steps",
        "prefill_s",
        "lookahead_s",
        "re_evict_s",
        "decode_s",
        "total_s",
        "lookahead_fraction",
    ])
    .map_err(csv_err)?;
    for r in rows {
        let l = &r.report;
        w.write_record([
            r.policy.to_string(),
            r.budget.to_string(),
            r.lookahead_steps.to_string(),
            r.decode_steps.to_string(),
            l.prefill.seconds.to_string(),
            l.lookahead.seconds.to_string(),
            l.re_evict.seconds.to_string(),
            l.decode.seconds.to_string(),
            l.total_seconds.to_string(),
            l.lookahead_fraction.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| invalid(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| invalid(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    /// Last `window_len` prefill queries.
    Window,
    /// Lookahead pseudo-queries (recorded response queries in trace mode).
    QCache,
    /// Golden response queries.
    Response,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub layer: usize,
    pub head: usize,
    pub kind: QueryKind,
    pub index: usize,
    pub position: usize,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryExport {
    pub schema_version: u32,
    pub subject: String,
    pub head_dim: usize,
    pub rows: Vec<QueryRow>,
}

impl QueryExport {
    fn push(&mut self, kind: QueryKind, grid: &HeadGrid<Mat>, positions: &[usize]) {
        for (l, h, m) in grid.iter() {
            for (i, row) in m.row_iter().enumerate() {
                self.rows.push(QueryRow {
                    layer: l,
                    head: h,
                    kind,
                    index: i,
                    position: positions[i],
                    values: row.to_vec(),
                });
            }
        }
    }

    /// Columns `layer,head,kind,index,position,v0..`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = ["layer", "head", "kind", "index", "position"].map(String::from).to_vec();
        header.extend((0..self.head_dim).map(|i| format!("v{i}")));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let kind = match r.kind {
                QueryKind::Window => "window",
                QueryKind::QCache => "qcache",
                QueryKind::Response => "response",
            };
            let mut rec = vec![r.layer.to_string(), r.head.to_string(), kind.to_string(), r.index.to_string(), r.position.to_string()];
            rec.extend(r.values.iter().map(f32::to_string));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| invalid(e.to_string()))
    }
}

/// Observation-window, Q-cache and response queries of the first subject.
pub fn export_queries(cfg: &ExperimentConfig) -> Result<QueryExport> {
    cfg.validate()?;
    let pc = &cfg.policy;
    let (subject, trace, qcache) = match build_subjects(cfg)? {
        Subjects::Toy { model, prompt, golden } => {
            let pre = model.prefill(&prompt)?;
            let la = run_lookahead(&model, &pre, pc)?;
            (format!("toy:{}", cfg.seed), *golden, la.qcache)
        }
        Subjects::Traces(mut traces) => {
            let (label, trace) = traces.swap_remove(0);
            let q = trace.response_qcache(pc.lookahead_steps)?;
            (label, trace, q)
        }
    };
    let t = trace.meta.t_input;
    let window = prefill_window(&trace.input_queries, pc.window_len.min(t))?;
    let mut out = QueryExport { schema_version: SCHEMA_VERSION, subject, head_dim: trace.meta.head_dim, rows: Vec::new() };
    out.push(QueryKind::Window, &window.queries, &window.positions);
    out.push(QueryKind::QCache, qcache.queries(), qcache.step_positions());
    let resp: Vec<usize> = (t..t + trace.meta.t_response).collect();
    out.push(QueryKind::Response, &trace.response_queries, &resp);
    Ok(out)
}
