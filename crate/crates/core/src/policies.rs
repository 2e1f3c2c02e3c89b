//! Eviction policies behind one interface.
//!
//! Every scoring policy reduces to the same primitive: sum the attention of a
//! set of observation queries over the prefill keys, optionally pool, then
//! keep the top-B positions (ties toward the lower index). Policies differ
//! only in which queries observe and which positions are force-kept:
//!
//! | policy      | observation queries                 | pooled | forced           |
//! |-------------|-------------------------------------|--------|------------------|
//! | `h2o`       | every prefill query (causal)        | no     | last `w`         |
//! | `snapkv`    | last `w` prefill queries            | yes    | last `w`         |
//! | `pyramidkv` | as `snapkv`, per-layer budgets      | yes    | last `min(w, b)` |
//! | `streaming` | none                                | -      | sinks + recent   |
//! | `laq`       | lookahead Q-cache                   | yes    | last `w`         |
//! | `laq_pp`    | last `w` prefill queries ∪ Q-cache  | yes    | last `w`         |
//!
//! Forcing applies only when `keep_window` is set.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config, invalid, shape, Error, Result};
use crate::grid::HeadGrid;
use crate::kvcache::{union_windows, Extended, KVCacheStore, QCache, QuerySet, Selection};
use crate::model::{ModelState, PrefillOutput, TokenId};
use crate::tensor::{dot, pool_avg_1d, softmax_in_place, top_k_indices, Mat, ScoreVec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Column sums of scaled logits.
    Raw,
    /// Column sums of per-query softmax rows.
    Softmax,
}

impl FromStr for ScoreMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "softmax" => Ok(Self::Softmax),
            other => Err(invalid(format!("unknown score mode {other:?} (raw|softmax)"))),
        }
    }
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Raw => "raw",
            Self::Softmax => "softmax",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyId {
    #[serde(rename = "h2o")]
    H2o,
    #[serde(rename = "snapkv")]
    SnapKv,
    #[serde(rename = "pyramidkv")]
    PyramidKv,
    #[serde(rename = "streaming")]
    Streaming,
    #[serde(rename = "laq")]
    Laq,
    #[serde(rename = "laq_pp")]
    LaqPp,
    #[serde(rename = "full")]
    Full,
}

impl PolicyId {
    pub const ALL: [PolicyId; 7] = [
        Self::H2o,
        Self::SnapKv,
        Self::PyramidKv,
        Self::Streaming,
        Self::Laq,
        Self::LaqPp,
        Self::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::H2o => "h2o",
            Self::SnapKv => "snapkv",
            Self::PyramidKv => "pyramidkv",
            Self::Streaming => "streaming",
            Self::Laq => "laq",
            Self::LaqPp => "laq_pp",
            Self::Full => "full",
        }
    }

    /// Policies that observe a lookahead Q-cache.
    pub fn needs_lookahead(self) -> bool {
        matches!(self, Self::Laq | Self::LaqPp)
    }

    fn forces_window(self) -> bool {
        matches!(self, Self::H2o | Self::SnapKv | Self::Laq | Self::LaqPp)
    }
}

impl FromStr for PolicyId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown policy {s:?}")))
    }
}

impl fmt::Display for PolicyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaqVariant {
    /// Observe the Q-cache only.
    Laq,
    /// Observe the prefill window and the Q-cache together.
    LaqPp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub budget: usize,
    pub window_len: usize,
    pub lookahead_steps: usize,
    pub sink_count: usize,
    pub pool_kernel: usize,
    pub score_mode: ScoreMode,
    pub keep_window: bool,
    /// Smallest per-layer pyramid budget; `None` means `budget / 2`.
    pub pyramid_floor: Option<usize>,
    pub lookahead_policy: PolicyId,
    /// Budget of the first-round eviction; `None` means `budget`.
    pub lookahead_budget: Option<usize>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            budget: 32,
            window_len: 8,
            lookahead_steps: 8,
            sink_count: 4,
            pool_kernel: 7,
            score_mode: ScoreMode::Softmax,
            keep_window: true,
            pyramid_floor: None,
            lookahead_policy: PolicyId::SnapKv,
            lookahead_budget: None,
        }
    }
}

impl PolicyConfig {
    pub fn with_budget(&self, budget: usize) -> Self {
        Self { budget, ..self.clone() }
    }

    pub fn floor(&self) -> usize {
        self.pyramid_floor.unwrap_or(self.budget / 2)
    }

    pub fn effective_lookahead_budget(&self) -> usize {
        self.lookahead_budget.unwrap_or(self.budget)
    }

    pub fn validate(&self, policy: PolicyId) -> Result<()> {
        if self.pool_kernel == 0 || self.pool_kernel.is_multiple_of(2) {
            return Err(config(format!("pool_kernel must be odd, got {}", self.pool_kernel)));
        }
        if self.keep_window && policy.forces_window() && self.budget < self.window_len {
            return Err(config(format!(
                "budget {} below window {} with keep_window",
                self.budget, self.window_len
            )));
        }
        if policy == PolicyId::PyramidKv && self.floor() > self.budget {
            return Err(config(format!("pyramid floor {} above budget {}", self.floor(), self.budget)));
        }
        Ok(())
    }
}

/// A selection together with the per-head scores it was ranked by
/// (post-pooling). Streaming and full selections carry no scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSelection {
    pub selection: Selection,
    pub scores: Option<HeadGrid<ScoreVec>>,
}

fn score_core(
    queries: &Mat,
    query_positions: Option<&[usize]>,
    keys: &Mat,
    mode: ScoreMode,
    scale: f32,
) -> Result<ScoreVec> {
    if queries.rows() == 0 {
        return Err(invalid("empty observation query set"));
    }
    if queries.cols() != keys.cols() {
        return Err(shape(format!("query width {} vs key width {}", queries.cols(), keys.cols())));
    }
    if let Some(p) = query_positions {
        if p.len() != queries.rows() {
            return Err(shape("one position per query row required"));
        }
    }
    let t = keys.rows();
    let mut scores = vec![0.0f32; t];
    let mut row = Vec::with_capacity(t);
    for (i, q) in queries.row_iter().enumerate() {
        let visible = query_positions.map_or(t, |p| (p[i] + 1).min(t));
        row.clear();
        row.extend((0..visible).map(|j| dot(q, keys.row(j)) * scale));
        if mode == ScoreMode::Softmax {
            softmax_in_place(&mut row);
        }
        for (s, &v) in scores.iter_mut().zip(&row) {
            *s += v;
        }
    }
    Ok(scores)
}

/// `Σ_i q_i Kᵀ / √d` over every key (no causal mask).
pub fn attn_score_sum(queries: &Mat, keys: &Mat, mode: ScoreMode) -> Result<ScoreVec> {
    score_core(queries, None, keys, mode, 1.0 / (keys.cols() as f32).sqrt())
}

/// As [`attn_score_sum`] with an explicit logit scale.
pub fn attn_score_sum_scaled(queries: &Mat, keys: &Mat, mode: ScoreMode, scale: f32) -> Result<ScoreVec> {
    score_core(queries, None, keys, mode, scale)
}

/// Causally masked sum: key `j` (at position `j`) is visible to a query at
/// position `p` iff `j <= p`. Queries at or beyond `keys.rows()` see every key.
pub fn attn_score_sum_masked(
    queries: &Mat,
    query_positions: &[usize],
    keys: &Mat,
    mode: ScoreMode,
) -> Result<ScoreVec> {
    score_core(queries, Some(query_positions), keys, mode, 1.0 / (keys.cols() as f32).sqrt())
}

/// Keeps the last `forced` positions plus the best `budget - forced` of the rest.
pub fn retain(scores: &[f32], budget: usize, forced: usize) -> Vec<usize> {
    let t = scores.len();
    if budget >= t {
        return (0..t).collect();
    }
    let forced = forced.min(budget);
    let split = t - forced;
    let mut keep = top_k_indices(&scores[..split], budget - forced);
    keep.extend(split..t);
    keep
}

/// The last `window_len` prefill queries with their positions.
pub fn prefill_window(prefill_queries: &HeadGrid<Mat>, window_len: usize) -> Result<QuerySet> {
    let t = prefill_len(prefill_queries);
    if window_len > t {
        return Err(invalid(format!("window {window_len} longer than prefill {t}")));
    }
    let queries = prefill_queries.try_map(|_, _, q| q.slice_rows(t - window_len, window_len))?;
    QuerySet::new(queries, (t - window_len..t).collect())
}

fn prefill_len(grid: &HeadGrid<Mat>) -> usize {
    grid.cells().first().map_or(0, Mat::rows)
}

fn check_keys(keys: &HeadGrid<Mat>) -> Result<usize> {
    let t = prefill_len(keys);
    if keys.cells().iter().any(|k| k.rows() != t) {
        return Err(shape("heads disagree on prefill length"));
    }
    Ok(t)
}

fn check_geometry<T>(a: &HeadGrid<T>, keys: &HeadGrid<Mat>, what: &str) -> Result<()> {
    if !a.same_geometry(keys) {
        return Err(shape(format!("{what} geometry differs from keys")));
    }
    Ok(())
}

/// Scores each head with `observe`, pools, and retains per-layer budgets.
fn scored_select(
    observe: &QuerySet,
    keys: &HeadGrid<Mat>,
    mode: ScoreMode,
    kernel: usize,
    budgets: Vec<usize>,
    forced: impl Fn(usize) -> usize,
) -> Result<ScoredSelection> {
    check_geometry(&observe.queries, keys, "observation window")?;
    let t = check_keys(keys)?;
    let scores = observe.queries.try_map(|l, h, q| {
        let raw = attn_score_sum_masked(q, &observe.positions, keys.get(l, h), mode)?;
        pool_avg_1d(&raw, kernel)
    })?;
    let indices = scores.map(|l, _, s| retain(s, budgets[l], forced(budgets[l])));
    Ok(ScoredSelection { selection: Selection::new(indices, budgets, t)?, scores: Some(scores) })
}

fn window_forced(cfg: &PolicyConfig, t: usize) -> usize {
    if cfg.keep_window {
        cfg.window_len.min(t)
    } else {
        0
    }
}

/// Cumulative attention of every prefill query (causally masked).
pub fn select_h2o(prefill_queries: &HeadGrid<Mat>, keys: &HeadGrid<Mat>, cfg: &PolicyConfig) -> Result<ScoredSelection> {
    cfg.validate(PolicyId::H2o)?;
    let t = check_keys(keys)?;
    check_geometry(prefill_queries, keys, "prefill queries")?;
    if prefill_len(prefill_queries) != t {
        return Err(shape("prefill query count differs from key count"));
    }
    let all = QuerySet::new(prefill_queries.clone(), (0..t).collect())?;
    let forced = window_forced(cfg, t);
    scored_select(&all, keys, cfg.score_mode, 1, vec![cfg.budget; keys.layers()], |_| forced)
}

/// Observation-window scoring with average pooling.
pub fn select_snapkv(window: &QuerySet, keys: &HeadGrid<Mat>, cfg: &PolicyConfig) -> Result<ScoredSelection> {
    cfg.validate(PolicyId::SnapKv)?;
    let t = check_keys(keys)?;
    if window.len() > t {
        return Err(invalid(format!("window {} longer than prefill {t}", window.len())));
    }
    let forced = window_forced(cfg, t);
    scored_select(window, keys, cfg.score_mode, cfg.pool_kernel, vec![cfg.budget; keys.layers()], |_| forced)
}

/// Attention sinks plus the most recent entries; no scoring.
pub fn select_streaming(t: usize, layers: usize, heads: usize, cfg: &PolicyConfig) -> Result<Selection> {
    let b = cfg.budget;
    if b >= t {
        return Selection::uniform(HeadGrid::from_fn(layers, heads, |_, _| (0..t).collect()), b, t);
    }
    if cfg.sink_count + 1 > b {
        return Err(config(format!("budget {b} leaves no room beyond {} sinks", cfg.sink_count)));
    }
    let keep: Vec<usize> = (0..cfg.sink_count).chain(t - (b - cfg.sink_count)..t).collect();
    Selection::uniform(HeadGrid::from_fn(layers, heads, |_, _| keep.clone()), b, t)
}

/// Linear per-layer schedule from `2B - m` (layer 0) down to `m`, rounded by
/// largest remainder so the budgets sum to `L·B`.
pub fn pyramid_budgets(layers: usize, budget: usize, floor: usize) -> Result<Vec<usize>> {
    if floor > budget {
        return Err(config(format!("pyramid floor {floor} above budget {budget}")));
    }
    if layers == 0 {
        return Err(config("pyramid needs at least one layer"));
    }
    if layers == 1 {
        return Ok(vec![budget]);
    }
    let span = 2 * (budget - floor);
    let denom = layers - 1;
    let mut out = Vec::with_capacity(layers);
    let mut rems = Vec::with_capacity(layers);
    for l in 0..layers {
        let num = span * (layers - 1 - l);
        out.push(floor + num / denom);
        rems.push((num % denom, l));
    }
    let deficit = layers * budget - out.iter().sum::<usize>();
    // larger remainder first, then shallower layer
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, l) in rems.iter().take(deficit) {
        out[l] += 1;
    }
    Ok(out)
}

/// SnapKV scoring with a pyramid of per-layer budgets.
pub fn select_pyramidkv(window: &QuerySet, keys: &HeadGrid<Mat>, cfg: &PolicyConfig) -> Result<ScoredSelection> {
    cfg.validate(PolicyId::PyramidKv)?;
    let t = check_keys(keys)?;
    if window.len() > t {
        return Err(invalid(format!("window {} longer than prefill {t}", window.len())));
    }
    // B >= T keeps everything on every layer, like every other policy.
    let budgets = if cfg.budget >= t {
        vec![cfg.budget; keys.layers()]
    } else {
        pyramid_budgets(keys.layers(), cfg.budget, cfg.floor())?
    };
    let w = window_forced(cfg, t);
    scored_select(window, keys, cfg.score_mode, cfg.pool_kernel, budgets, |b| w.min(b))
}

/// Second-round eviction from the lookahead Q-cache (`laq`) or the prefill
/// window joined with it (`laq_pp`).
pub fn select_laq(
    qcache: &QCache,
    window: &QuerySet,
    keys: &HeadGrid<Mat>,
    cfg: &PolicyConfig,
    variant: LaqVariant,
) -> Result<ScoredSelection> {
    let policy = match variant {
        LaqVariant::Laq => PolicyId::Laq,
        LaqVariant::LaqPp => PolicyId::LaqPp,
    };
    cfg.validate(policy)?;
    let t = check_keys(keys)?;
    check_geometry(qcache.queries(), keys, "q-cache")?;
    if qcache.step_positions().first().is_some_and(|&p| p < t) {
        return Err(invalid("q-cache positions overlap the prefill"));
    }
    let observe = match variant {
        LaqVariant::Laq => {
            if qcache.is_empty() {
                return Err(invalid("laq needs a non-empty q-cache"));
            }
            qcache.as_query_set()
        }
        LaqVariant::LaqPp => {
            if qcache.is_empty() {
                log::info!("laq_pp with an empty q-cache degrades to snapkv");
            }
            union_windows(window, qcache)?
        }
    };
    let forced = window_forced(cfg, t);
    scored_select(&observe, keys, cfg.score_mode, cfg.pool_kernel, vec![cfg.budget; keys.layers()], |_| forced)
}

/// Everything a policy may observe.
#[derive(Debug, Clone, Copy)]
pub struct PolicyInputs<'a> {
    pub keys: &'a HeadGrid<Mat>,
    pub prefill_queries: &'a HeadGrid<Mat>,
    pub qcache: Option<&'a QCache>,
}

/// Dispatches to the policy named by `policy`.
pub fn select(policy: PolicyId, inputs: PolicyInputs<'_>, cfg: &PolicyConfig) -> Result<ScoredSelection> {
    let keys = inputs.keys;
    let t = check_keys(keys)?;
    let window = || prefill_window(inputs.prefill_queries, cfg.window_len.min(t));
    match policy {
        PolicyId::Full => Ok(ScoredSelection {
            selection: Selection::full(keys.layers(), keys.heads(), t),
            scores: None,
        }),
        PolicyId::Streaming => Ok(ScoredSelection {
            selection: select_streaming(t, keys.layers(), keys.heads(), cfg)?,
            scores: None,
        }),
        PolicyId::H2o => select_h2o(inputs.prefill_queries, keys, cfg),
        PolicyId::SnapKv => select_snapkv(&window()?, keys, cfg),
        PolicyId::PyramidKv => select_pyramidkv(&window()?, keys, cfg),
        PolicyId::Laq | PolicyId::LaqPp => {
            let variant = if policy == PolicyId::Laq { LaqVariant::Laq } else { LaqVariant::LaqPp };
            let head_dim = keys.cells().first().map_or(0, Mat::cols);
            let empty;
            let q = match inputs.qcache {
                Some(q) => q,
                None => {
                    empty = QCache::empty(keys.layers(), keys.heads(), head_dim);
                    &empty
                }
            };
            select_laq(q, &window()?, keys, cfg, variant)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lookahead {
    pub qcache: QCache,
    /// Tokens whose queries were captured, in order.
    pub pseudo_tokens: Vec<TokenId>,
    /// The first-round (low-budget) selection the lookahead decoded against.
    pub selection: Selection,
}

/// Greedily decodes `lookahead_steps` tokens against a low-budget view of the
/// prefill cache and captures each step's queries. The prefill cache is only
/// read; lookahead keys/values go to a scratch store that is dropped here.
pub fn run_lookahead(model: &ModelState, prefill: &PrefillOutput, cfg: &PolicyConfig) -> Result<Lookahead> {
    let policy = cfg.lookahead_policy;
    if policy.needs_lookahead() {
        return Err(config(format!("{policy} cannot drive the lookahead stage")));
    }
    let keys = prefill.cache.keys();
    let t = check_keys(keys)?;
    let la_cfg = cfg.with_budget(cfg.effective_lookahead_budget());
    let first = select(
        policy,
        PolicyInputs { keys, prefill_queries: &prefill.queries, qcache: None },
        &la_cfg,
    )?
    .selection;

    let mc = model.config();
    let view = prefill.cache.apply_selection(&first)?;
    let mut scratch = KVCacheStore::empty(mc.layers, mc.heads, mc.head_dim);
    let steps = cfg.lookahead_steps;
    let mut rows: Vec<Vec<f32>> = vec![Vec::with_capacity(steps * mc.head_dim); mc.layers * mc.heads];
    let mut token = prefill.first_token;
    let mut pseudo_tokens = Vec::with_capacity(steps);
    for s in 0..steps {
        let src = Extended::new(&view, &scratch)?;
        let out = model.decode_step(&src, token, t + s)?;
        for (i, q) in out.queries.cells().iter().enumerate() {
            rows[i].extend_from_slice(q);
        }
        scratch.append_step(&out)?;
        pseudo_tokens.push(token);
        token = out.next_token;
    }
    let queries = HeadGrid::from_cells(
        mc.layers,
        mc.heads,
        rows.into_iter()
            .map(|r| Mat::new(steps, mc.head_dim, r))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let qcache = QCache::new(queries, (t..t + steps).collect(), t)?;
    Ok(Lookahead { qcache, pseudo_tokens, selection: first })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one(m: Mat) -> HeadGrid<Mat> {
        HeadGrid::from_fn(1, 1, move |_, _| m.clone())
    }

    fn hand_keys() -> Mat {
        Mat::from_rows(&[[2.0f32, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap()
    }

    fn hand_queries() -> Mat {
        Mat::from_rows(&[[1.0f32, 0.0], [0.0, 1.0]]).unwrap()
    }

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn plain(budget: usize) -> PolicyConfig {
        PolicyConfig { budget, keep_window: false, pool_kernel: 1, ..Default::default() }
    }

    #[test]
    fn score_sum_hand_case() {
        let s = attn_score_sum_scaled(&hand_queries(), &hand_keys(), ScoreMode::Raw, 1.0).unwrap();
        assert_eq!(s, vec![2.0, 1.0, 2.0]);
    }

    #[test]
    fn score_sum_single_softmax_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_mat(&mut rng, 1, 4);
        let s = attn_score_sum(&q, &random_mat(&mut rng, 9, 4), ScoreMode::Softmax).unwrap();
        assert!((s.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn score_sum_duplicate_doubles() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = random_mat(&mut rng, 1, 4);
        let k = random_mat(&mut rng, 7, 4);
        let s1 = attn_score_sum(&q, &k, ScoreMode::Raw).unwrap();
        let s2 = attn_score_sum(&q.vstack(&q).unwrap(), &k, ScoreMode::Raw).unwrap();
        for (a, b) in s1.iter().zip(&s2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn score_sum_rejects_empty_and_mismatch() {
        assert!(attn_score_sum(&Mat::zeros(0, 2), &hand_keys(), ScoreMode::Raw).is_err());
        assert!(attn_score_sum(&Mat::zeros(1, 3), &hand_keys(), ScoreMode::Raw).is_err());
    }

    #[test]
    fn masked_sum_hides_future_keys() {
        let q = Mat::from_rows(&[[1.0f32, 1.0]]).unwrap();
        let s = attn_score_sum_masked(&q, &[1], &hand_keys(), ScoreMode::Softmax).unwrap();
        assert_eq!(s[2], 0.0);
        assert!((s[0] + s[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn h2o_cases() {
        // queries at positions 3,4 so the 3-key hand case is unmasked
        let keys = one(hand_keys());
        let q = hand_queries();
        let scores = attn_score_sum_masked(&q, &[3, 4], keys.get(0, 0), ScoreMode::Raw).unwrap();
        assert_eq!(retain(&scores, 2, 0), vec![0, 2]);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pq = one(random_mat(&mut rng, 12, 4));
        let k = one(random_mat(&mut rng, 12, 4));
        let all = select_h2o(&pq, &k, &plain(12)).unwrap();
        assert_eq!(all.selection.head(0, 0), (0..12).collect::<Vec<_>>().as_slice());

        // uniform keys: every column ties, lower indices win
        let uk = one(Mat::new(12, 4, vec![0.5; 48]).unwrap());
        let sel = select_h2o(&pq, &uk, &PolicyConfig { budget: 6, window_len: 2, ..plain(6) }).unwrap();
        let cfg = PolicyConfig { keep_window: true, window_len: 2, ..plain(6) };
        let forced = select_h2o(&pq, &uk, &cfg).unwrap();
        // under causal masking early keys are seen by more queries and score higher
        assert_eq!(sel.selection.head(0, 0), &[0, 1, 2, 3, 4, 5]);
        assert_eq!(forced.selection.head(0, 0), &[0, 1, 2, 3, 10, 11]);
    }

    #[test]
    fn h2o_rejects_budget_below_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pq = one(random_mat(&mut rng, 12, 4));
        let cfg = PolicyConfig { budget: 4, window_len: 8, keep_window: true, ..Default::default() };
        assert!(matches!(select_h2o(&pq, &pq, &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn snapkv_whole_window_is_pooled_h2o() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pq = one(random_mat(&mut rng, 16, 4));
        let k = one(random_mat(&mut rng, 16, 4));
        let cfg = PolicyConfig { budget: 5, window_len: 16, pool_kernel: 3, keep_window: false, ..Default::default() };
        let snap = select_snapkv(&prefill_window(&pq, 16).unwrap(), &k, &cfg).unwrap();
        let h2o = select_h2o(&pq, &k, &PolicyConfig { pool_kernel: 1, ..cfg.clone() }).unwrap();
        let pooled = pool_avg_1d(&h2o.scores.unwrap().get(0, 0).clone(), 3).unwrap();
        assert_eq!(snap.selection.head(0, 0), top_k_indices(&pooled, 5).as_slice());
    }

    #[test]
    fn snapkv_single_window_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pq = one(random_mat(&mut rng, 10, 4));
        let k = one(random_mat(&mut rng, 10, 4));
        let cfg = PolicyConfig { budget: 4, window_len: 1, pool_kernel: 1, ..Default::default() };
        let snap = select_snapkv(&prefill_window(&pq, 1).unwrap(), &k, &cfg).unwrap();
        let row = attn_score_sum(&pq.get(0, 0).slice_rows(9, 1).unwrap(), k.get(0, 0), ScoreMode::Softmax).unwrap();
        let mut want = top_k_indices(&row[..9], 3);
        want.push(9);
        assert_eq!(snap.selection.head(0, 0), want.as_slice());
    }

    #[test]
    fn streaming_cases() {
        let cfg = |b, s| PolicyConfig { budget: b, sink_count: s, ..Default::default() };
        assert_eq!(select_streaming(10, 1, 1, &cfg(4, 2)).unwrap().head(0, 0), &[0, 1, 8, 9]);
        assert_eq!(select_streaming(10, 1, 1, &cfg(12, 4)).unwrap().head(0, 0), (0..10).collect::<Vec<_>>().as_slice());
        assert_eq!(select_streaming(9, 1, 1, &cfg(3, 0)).unwrap().head(0, 0), &[6, 7, 8]);
        assert!(select_streaming(9, 1, 1, &cfg(4, 4)).is_err());
    }

    #[test]
    fn pyramid_cases() {
        assert_eq!(pyramid_budgets(4, 4, 2).unwrap(), vec![6, 5, 3, 2]);
        assert_eq!(pyramid_budgets(1, 9, 3).unwrap(), vec![9]);
        assert_eq!(pyramid_budgets(5, 7, 7).unwrap(), vec![7; 5]);
        assert!(pyramid_budgets(3, 4, 5).is_err());
    }

    #[test]
    fn pyramid_layer_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = |rng: &mut ChaCha8Rng| HeadGrid::from_fn(4, 2, |_, _| random_mat(rng, 32, 4));
        let pq = g(&mut rng);
        let k = g(&mut rng);
        let cfg = PolicyConfig { budget: 4, pyramid_floor: Some(2), window_len: 2, ..Default::default() };
        let sel = select_pyramidkv(&prefill_window(&pq, 2).unwrap(), &k, &cfg).unwrap();
        for (l, want) in [6, 5, 3, 2].into_iter().enumerate() {
            for h in 0..2 {
                assert_eq!(sel.selection.head(l, h).len(), want);
                assert!(sel.selection.head(l, h).ends_with(&[30, 31]));
            }
        }
        let flat = PolicyConfig { pyramid_floor: Some(4), ..cfg.clone() };
        let w = prefill_window(&pq, 2).unwrap();
        assert_eq!(
            select_pyramidkv(&w, &k, &flat).unwrap(),
            select_snapkv(&w, &k, &flat).unwrap()
        );
    }

    #[test]
    fn laq_hand_case() {
        let keys = one(Mat::from_rows(&[[1.0f32, 0.0], [0.0, 1.0]]).unwrap());
        let q = QCache::new(one(Mat::from_rows(&[[1.0f32, 0.0]]).unwrap()), vec![2], 2).unwrap();
        let w = prefill_window(&keys, 0).unwrap();
        let sel = select_laq(&q, &w, &keys, &plain(1), LaqVariant::Laq).unwrap();
        assert_eq!(sel.selection.head(0, 0), &[0]);
    }

    #[test]
    fn laq_rejects_empty_qcache_but_laq_pp_degrades() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pq = one(random_mat(&mut rng, 16, 4));
        let k = one(random_mat(&mut rng, 16, 4));
        let cfg = PolicyConfig { budget: 10, window_len: 4, ..Default::default() };
        let w = prefill_window(&pq, 4).unwrap();
        let empty = QCache::empty(1, 1, 4);
        assert!(select_laq(&empty, &w, &k, &cfg, LaqVariant::Laq).is_err());
        assert_eq!(
            select_laq(&empty, &w, &k, &cfg, LaqVariant::LaqPp).unwrap(),
            select_snapkv(&w, &k, &cfg).unwrap()
        );
    }

    #[test]
    fn dispatcher_saturates() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let pq = HeadGrid::from_fn(2, 2, |_, _| random_mat(&mut rng, 12, 4));
        let k = pq.map(|_, _, m| m.scale(0.5));
        let q = QCache::new(HeadGrid::from_fn(2, 2, |_, _| Mat::zeros(2, 4)), vec![12, 13], 12).unwrap();
        let inputs = PolicyInputs { keys: &k, prefill_queries: &pq, qcache: Some(&q) };
        for p in PolicyId::ALL {
            let sel = select(p, inputs, &PolicyConfig { budget: 12, ..Default::default() }).unwrap();
            for (_, _, idx) in sel.selection.indices().iter() {
                assert_eq!(idx, &(0..12).collect::<Vec<_>>(), "{p}");
            }
        }
    }

    #[test]
    fn policy_ids_round_trip() {
        for p in PolicyId::ALL {
            assert_eq!(p.as_str().parse::<PolicyId>().unwrap(), p);
            assert_eq!(serde_json::to_string(&p).unwrap(), format!("\"{p}\""));
        }
        assert!("bogus".parse::<PolicyId>().is_err());
        assert_eq!("raw".parse::<ScoreMode>().unwrap(), ScoreMode::Raw);
    }

    fn toy() -> (ModelState, PrefillOutput) {
        let cfg = ModelConfig { vocab: 64, layers: 2, heads: 2, head_dim: 8, mlp_mult: 2, max_pos: 256, seed: 3, rope_enabled: true };
        let m = init_model(&cfg).unwrap();
        let prompt: Vec<u32> = (0..48u32).map(|i| (i * 13 + 5) % 64).collect();
        let pre = m.prefill(&prompt).unwrap();
        (m, pre)
    }

    #[test]
    fn lookahead_shapes_and_full_identity() {
        let (m, pre) = toy();
        let cfg = PolicyConfig { budget: 16, lookahead_steps: 8, ..Default::default() };
        let la = run_lookahead(&m, &pre, &cfg).unwrap();
        assert_eq!(la.qcache.steps(), 8);
        assert_eq!(la.qcache.step_positions(), (48..56).collect::<Vec<_>>().as_slice());
        assert!(la.qcache.queries().cells().iter().all(|q| q.rows() == 8));
        assert_eq!(run_lookahead(&m, &pre, &cfg).unwrap(), la);

        let full_cfg = PolicyConfig { lookahead_policy: PolicyId::Full, lookahead_budget: Some(48), ..cfg };
        let la_full = run_lookahead(&m, &pre, &full_cfg).unwrap();
        let (greedy, outs) = m.generate_full(&pre, 8).unwrap();
        assert_eq!(la_full.pseudo_tokens, greedy);
        for (s, o) in outs.iter().enumerate() {
            for (l, h, q) in o.queries.iter() {
                assert_eq!(la_full.qcache.queries().get(l, h).row(s), q.as_slice());
            }
        }
    }

    #[test]
    fn lookahead_rejects_laq_driver() {
        let (m, pre) = toy();
        let cfg = PolicyConfig { lookahead_policy: PolicyId::Laq, ..Default::default() };
        assert!(run_lookahead(&m, &pre, &cfg).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn raw_selection_scale_equivariant(seed in any::<u64>(), c in 0.1f32..10.0, b in 1usize..20) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let pq = one(random_mat(&mut rng, 20, 4));
                let k = one(random_mat(&mut rng, 20, 4));
                let cfg = PolicyConfig { budget: b, score_mode: ScoreMode::Raw, ..plain(b) };
                // powers of two keep every product exact
                let c = 2f32.powi(c.log2().round() as i32);
                let a = select_h2o(&pq, &k, &cfg).unwrap();
                let scaled = pq.map(|_, _, m| m.scale(c));
                let b2 = select_h2o(&scaled, &k, &cfg).unwrap();
                prop_assert_eq!(a.selection, b2.selection);
            }

            #[test]
            fn budget_exact_and_window_kept(seed in any::<u64>(), b in 8usize..40, t in 9usize..40) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let pq = HeadGrid::from_fn(3, 2, |_, _| random_mat(&mut rng, t, 4));
                let k = HeadGrid::from_fn(3, 2, |_, _| random_mat(&mut rng, t, 4));
                let cfg = PolicyConfig { budget: b, window_len: 8, pool_kernel: 5, keep_window: true, pyramid_floor: Some(8), ..Default::default() };
                let w = prefill_window(&pq, 8).unwrap();
                for sel in [select_snapkv(&w, &k, &cfg).unwrap(), select_pyramidkv(&w, &k, &cfg).unwrap()] {
                    for (l, _, idx) in sel.selection.indices().iter() {
                        prop_assert_eq!(idx.len(), sel.selection.budgets()[l].min(t));
                        let tail: Vec<usize> = (t - 8..t).collect();
                        prop_assert!(tail.iter().all(|i| idx.contains(i)));
                    }
                }
            }

            #[test]
            fn retain_nested(s in prop::collection::vec(-3i32..3, 1..30), b in 0usize..30, f in 0usize..5) {
                let s: Vec<f32> = s.into_iter().map(|v| v as f32).collect();
                let small = retain(&s, b, f);
                let big = retain(&s, b + 1, f);
                prop_assert!(small.iter().all(|i| big.contains(i)));
            }
        }
    }
}
