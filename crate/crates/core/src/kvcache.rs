//! Key/value stores, lookahead query cache and budgeted selection views.
//!
//! Eviction is realized as an index-list view over the full prefill store so
//! the full cache outlives the first (low-budget) eviction and can be
//! re-evicted after lookahead. [`KVCacheStore::compact`] is the destructive
//! path used once the final selection is known.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::grid::HeadGrid;
use crate::model::StepOutput;
use crate::tensor::Mat;

thread_local! {
    static COPIED_ELEMENTS: Cell<u64> = const { Cell::new(0) };
}

fn count_copies(n: usize) {
    COPIED_ELEMENTS.with(|c| c.set(c.get() + n as u64));
}

/// Key/value f32 elements copied by store clones and compactions on the
/// current thread.
pub fn copied_elements() -> u64 {
    COPIED_ELEMENTS.with(Cell::get)
}

/// Read access to per-(layer, head) cache entries, in ascending position order.
pub trait KvSource {
    fn layers(&self) -> usize;
    fn heads(&self) -> usize;
    fn head_dim(&self) -> usize;
    fn len(&self, layer: usize, head: usize) -> usize;
    fn key(&self, layer: usize, head: usize, i: usize) -> &[f32];
    fn value(&self, layer: usize, head: usize, i: usize) -> &[f32];
    fn position(&self, layer: usize, head: usize, i: usize) -> usize;

    fn is_empty(&self, layer: usize, head: usize) -> bool {
        self.len(layer, head) == 0
    }

    fn positions(&self, layer: usize, head: usize) -> Vec<usize> {
        (0..self.len(layer, head)).map(|i| self.position(layer, head, i)).collect()
    }
}

/// Full keys/values with absolute positions for every layer and head.
#[derive(Debug, PartialEq)]
pub struct KVCacheStore {
    head_dim: usize,
    keys: HeadGrid<Mat>,
    values: HeadGrid<Mat>,
    positions: HeadGrid<Vec<usize>>,
}

impl Clone for KVCacheStore {
    fn clone(&self) -> Self {
        count_copies(self.keys.cells().iter().map(|m| m.data().len() * 2).sum());
        Self {
            head_dim: self.head_dim,
            keys: self.keys.clone(),
            values: self.values.clone(),
            positions: self.positions.clone(),
        }
    }
}

fn strictly_increasing(p: &[usize]) -> bool {
    p.windows(2).all(|w| w[0] < w[1])
}

impl KVCacheStore {
    pub fn new(
        keys: HeadGrid<Mat>,
        values: HeadGrid<Mat>,
        positions: HeadGrid<Vec<usize>>,
    ) -> Result<Self> {
        if !keys.same_geometry(&values) || !keys.same_geometry(&positions) {
            return Err(shape("keys/values/positions grids differ"));
        }
        let head_dim = keys.cells().first().map_or(0, Mat::cols);
        for (l, h, k) in keys.iter() {
            let v = values.get(l, h);
            let p = positions.get(l, h);
            if k.cols() != head_dim || v.cols() != head_dim {
                return Err(shape(format!("head ({l},{h}) width differs from {head_dim}")));
            }
            if k.rows() != v.rows() || k.rows() != p.len() {
                return Err(shape(format!(
                    "head ({l},{h}): {} keys, {} values, {} positions",
                    k.rows(),
                    v.rows(),
                    p.len()
                )));
            }
            if !strictly_increasing(p) {
                return Err(invalid(format!("head ({l},{h}) positions not strictly increasing")));
            }
        }
        Ok(Self { head_dim, keys, values, positions })
    }

    /// Store whose entries occupy positions `0..T`.
    pub fn from_prefill(keys: HeadGrid<Mat>, values: HeadGrid<Mat>) -> Result<Self> {
        let positions = keys.map(|_, _, k| (0..k.rows()).collect());
        Self::new(keys, values, positions)
    }

    pub fn empty(layers: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            head_dim,
            keys: HeadGrid::from_fn(layers, heads, |_, _| Mat::zeros(0, head_dim)),
            values: HeadGrid::from_fn(layers, heads, |_, _| Mat::zeros(0, head_dim)),
            positions: HeadGrid::from_fn(layers, heads, |_, _| Vec::new()),
        }
    }

    pub fn keys(&self) -> &HeadGrid<Mat> {
        &self.keys
    }

    pub fn values(&self) -> &HeadGrid<Mat> {
        &self.values
    }

    /// Appends one decode step's key/value to every head.
    pub fn append_step(&mut self, step: &StepOutput) -> Result<()> {
        if !step.new_kv.same_geometry(&self.keys) {
            return Err(shape("step geometry differs from cache"));
        }
        // validate everything before mutating so a failure leaves the store intact
        for (l, h, p) in self.positions.iter() {
            if p.last().is_some_and(|&last| step.position <= last) {
                return Err(invalid(format!(
                    "append at position {} after {} on head ({l},{h})",
                    step.position,
                    p.last().copied().unwrap_or_default()
                )));
            }
            let (k, v) = step.new_kv.get(l, h);
            if k.len() != self.head_dim || v.len() != self.head_dim {
                return Err(shape("step key/value width differs from head_dim"));
            }
            if k.iter().chain(v).any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("step key/value"));
            }
        }
        for (l, h, (k, v)) in step.new_kv.iter() {
            self.keys.get_mut(l, h).push_row(k)?;
            self.values.get_mut(l, h).push_row(v)?;
            self.positions.get_mut(l, h).push(step.position);
        }
        Ok(())
    }

    /// Index-list view realizing `sel`; no key/value data is copied.
    pub fn apply_selection<'a>(&'a self, sel: &Selection) -> Result<SelectionView<'a>> {
        SelectionView::new(self, sel)
    }

    /// Materializes the selected entries into a new owned store.
    pub fn compact(&self, sel: &Selection) -> Result<KVCacheStore> {
        let view = self.apply_selection(sel)?;
        let keys = view.indices.try_map(|l, h, idx| self.keys.get(l, h).gather_rows(idx))?;
        let values = view.indices.try_map(|l, h, idx| self.values.get(l, h).gather_rows(idx))?;
        let positions = view
            .indices
            .map(|l, h, idx| idx.iter().map(|&i| self.positions.get(l, h)[i]).collect());
        count_copies(keys.cells().iter().map(|m| m.data().len() * 2).sum());
        Ok(Self { head_dim: self.head_dim, keys, values, positions })
    }
}

impl KvSource for KVCacheStore {
    fn layers(&self) -> usize {
        self.keys.layers()
    }
    fn heads(&self) -> usize {
        self.keys.heads()
    }
    fn head_dim(&self) -> usize {
        self.head_dim
    }
    fn len(&self, layer: usize, head: usize) -> usize {
        self.positions.get(layer, head).len()
    }
    fn key(&self, layer: usize, head: usize, i: usize) -> &[f32] {
        self.keys.get(layer, head).row(i)
    }
    fn value(&self, layer: usize, head: usize, i: usize) -> &[f32] {
        self.values.get(layer, head).row(i)
    }
    fn position(&self, layer: usize, head: usize, i: usize) -> usize {
        self.positions.get(layer, head)[i]
    }
}

/// Retained index sets per (layer, head), each ascending into a cache of
/// `candidates` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    candidates: usize,
    budgets: Vec<usize>,
    indices: HeadGrid<Vec<usize>>,
}

impl Selection {
    /// `budgets` holds one budget per layer; each head must retain exactly
    /// `min(budget, candidates)` unique ascending indices.
    pub fn new(indices: HeadGrid<Vec<usize>>, budgets: Vec<usize>, candidates: usize) -> Result<Self> {
        if budgets.len() != indices.layers() {
            return Err(shape(format!(
                "{} layer budgets for {} layers",
                budgets.len(),
                indices.layers()
            )));
        }
        for (l, h, idx) in indices.iter() {
            if !strictly_increasing(idx) {
                return Err(invalid(format!("head ({l},{h}) indices not unique ascending")));
            }
            if idx.last().is_some_and(|&i| i >= candidates) {
                return Err(invalid(format!("head ({l},{h}) index out of range {candidates}")));
            }
            let want = budgets[l].min(candidates);
            if idx.len() != want {
                return Err(invalid(format!(
                    "head ({l},{h}) keeps {} entries, budget allows {want}",
                    idx.len()
                )));
            }
        }
        Ok(Self { candidates, budgets, indices })
    }

    pub fn uniform(indices: HeadGrid<Vec<usize>>, budget: usize, candidates: usize) -> Result<Self> {
        let budgets = vec![budget; indices.layers()];
        Self::new(indices, budgets, candidates)
    }

    /// Every index `0..candidates` on every head.
    pub fn full(layers: usize, heads: usize, candidates: usize) -> Self {
        Self {
            candidates,
            budgets: vec![candidates; layers],
            indices: HeadGrid::from_fn(layers, heads, |_, _| (0..candidates).collect()),
        }
    }

    pub fn candidates(&self) -> usize {
        self.candidates
    }

    pub fn budgets(&self) -> &[usize] {
        &self.budgets
    }

    pub fn head(&self, layer: usize, head: usize) -> &[usize] {
        self.indices.get(layer, head)
    }

    pub fn indices(&self) -> &HeadGrid<Vec<usize>> {
        &self.indices
    }
}

/// Borrowed view of a store restricted to selected entries.
#[derive(Debug, Clone)]
pub struct SelectionView<'a> {
    store: &'a KVCacheStore,
    indices: HeadGrid<Vec<usize>>,
}

fn check_against(len: impl Fn(usize, usize) -> usize, sel: &Selection, layers: usize, heads: usize) -> Result<()> {
    if sel.indices.layers() != layers || sel.indices.heads() != heads {
        return Err(shape("selection geometry differs from cache"));
    }
    for (l, h, idx) in sel.indices.iter() {
        let n = len(l, h);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(invalid(format!("index {bad} out of range for {n} entries on ({l},{h})")));
        }
    }
    Ok(())
}

impl<'a> SelectionView<'a> {
    pub fn new(store: &'a KVCacheStore, sel: &Selection) -> Result<Self> {
        check_against(|l, h| store.len(l, h), sel, store.layers(), store.heads())?;
        Ok(Self { store, indices: sel.indices.clone() })
    }

    /// Narrows this view further; `sel` indexes into the view, not the store.
    pub fn select(&self, sel: &Selection) -> Result<SelectionView<'a>> {
        check_against(|l, h| self.len(l, h), sel, self.layers(), self.heads())?;
        let indices = sel
            .indices
            .map(|l, h, inner| inner.iter().map(|&i| self.indices.get(l, h)[i]).collect());
        Ok(Self { store: self.store, indices })
    }

    pub fn store(&self) -> &'a KVCacheStore {
        self.store
    }

    /// Store indices retained on one head.
    pub fn store_indices(&self, layer: usize, head: usize) -> &[usize] {
        self.indices.get(layer, head)
    }
}

impl KvSource for SelectionView<'_> {
    fn layers(&self) -> usize {
        self.store.layers()
    }
    fn heads(&self) -> usize {
        self.store.heads()
    }
    fn head_dim(&self) -> usize {
        self.store.head_dim
    }
    fn len(&self, layer: usize, head: usize) -> usize {
        self.indices.get(layer, head).len()
    }
    fn key(&self, layer: usize, head: usize, i: usize) -> &[f32] {
        self.store.key(layer, head, self.indices.get(layer, head)[i])
    }
    fn value(&self, layer: usize, head: usize, i: usize) -> &[f32] {
        self.store.value(layer, head, self.indices.get(layer, head)[i])
    }
    fn position(&self, layer: usize, head: usize, i: usize) -> usize {
        self.store.position(layer, head, self.indices.get(layer, head)[i])
    }
}

/// A base source followed by a scratch store of later positions.
pub struct Extended<'a, S: KvSource> {
    base: &'a S,
    ext: &'a KVCacheStore,
}

impl<'a, S: KvSource> Extended<'a, S> {
    pub fn new(base: &'a S, ext: &'a KVCacheStore) -> Result<Self> {
        if base.layers() != ext.layers() || base.heads() != ext.heads() {
            return Err(shape("extension geometry differs from base"));
        }
        for l in 0..base.layers() {
            for h in 0..base.heads() {
                let (nb, ne) = (base.len(l, h), ext.len(l, h));
                if nb > 0 && ne > 0 && ext.position(l, h, 0) <= base.position(l, h, nb - 1) {
                    return Err(invalid("extension positions must follow base positions"));
                }
            }
        }
        Ok(Self { base, ext })
    }
}

impl<S: KvSource> KvSource for Extended<'_, S> {
    fn layers(&self) -> usize {
        self.base.layers()
    }
    fn heads(&self) -> usize {
        self.base.heads()
    }
    fn head_dim(&self) -> usize {
        self.base.head_dim()
    }
    fn len(&self, layer: usize, head: usize) -> usize {
        self.base.len(layer, head) + self.ext.len(layer, head)
    }
    fn key(&self, layer: usize, head: usize, i: usize) -> &[f32] {
        let nb = self.base.len(layer, head);
        if i < nb {
            self.base.key(layer, head, i)
        } else {
            self.ext.key(layer, head, i - nb)
        }
    }
    fn value(&self, layer: usize, head: usize, i: usize) -> &[f32] {
        let nb = self.base.len(layer, head);
        if i < nb {
            self.base.value(layer, head, i)
        } else {
            self.ext.value(layer, head, i - nb)
        }
    }
    fn position(&self, layer: usize, head: usize, i: usize) -> usize {
        let nb = self.base.len(layer, head);
        if i < nb {
            self.base.position(layer, head, i)
        } else {
            self.ext.position(layer, head, i - nb)
        }
    }
}

/// Query rows with their absolute token positions, shared by every head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySet {
    pub queries: HeadGrid<Mat>,
    pub positions: Vec<usize>,
}

impl QuerySet {
    pub fn new(queries: HeadGrid<Mat>, positions: Vec<usize>) -> Result<Self> {
        for (l, h, q) in queries.iter() {
            if q.rows() != positions.len() {
                return Err(shape(format!(
                    "head ({l},{h}) has {} query rows for {} positions",
                    q.rows(),
                    positions.len()
                )));
            }
        }
        Ok(Self { queries, positions })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Query vectors captured during the lookahead steps (post-projection,
/// post-rotary), one row per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QCache {
    queries: HeadGrid<Mat>,
    step_positions: Vec<usize>,
}

impl QCache {
    /// Positions must be strictly increasing and at or beyond `prefill_len`.
    pub fn new(queries: HeadGrid<Mat>, step_positions: Vec<usize>, prefill_len: usize) -> Result<Self> {
        if !strictly_increasing(&step_positions) {
            return Err(invalid("q-cache positions not strictly increasing"));
        }
        if step_positions.first().is_some_and(|&p| p < prefill_len) {
            return Err(invalid("q-cache position inside the prefill range"));
        }
        let set = QuerySet::new(queries, step_positions)?;
        Ok(Self { queries: set.queries, step_positions: set.positions })
    }

    pub fn empty(layers: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            queries: HeadGrid::from_fn(layers, heads, |_, _| Mat::zeros(0, head_dim)),
            step_positions: Vec::new(),
        }
    }

    pub fn steps(&self) -> usize {
        self.step_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.step_positions.is_empty()
    }

    pub fn queries(&self) -> &HeadGrid<Mat> {
        &self.queries
    }

    pub fn step_positions(&self) -> &[usize] {
        &self.step_positions
    }

    /// First `steps` rows of this cache.
    pub fn truncated(&self, steps: usize) -> Result<Self> {
        let steps = steps.min(self.steps());
        Ok(Self {
            queries: self.queries.try_map(|_, _, q| q.slice_rows(0, steps))?,
            step_positions: self.step_positions[..steps].to_vec(),
        })
    }

    pub fn as_query_set(&self) -> QuerySet {
        QuerySet { queries: self.queries.clone(), positions: self.step_positions.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowSource {
    Input,
    Response,
}

/// A contiguous run of recorded queries, used as an observation window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub start: usize,
    pub len: usize,
    pub source: WindowSource,
}

impl WindowSpec {
    /// Cuts the window out of an input record (positions `0..T_in`) or a
    /// response record (positions `T_in..`).
    pub fn extract(&self, input: &HeadGrid<Mat>, response: &HeadGrid<Mat>) -> Result<QuerySet> {
        let t_input = input.cells().first().map_or(0, Mat::rows);
        let (record, base) = match self.source {
            WindowSource::Input => (input, 0),
            WindowSource::Response => (response, t_input),
        };
        let available = record.cells().first().map_or(0, Mat::rows);
        if self.start + self.len > available {
            return Err(invalid(format!(
                "window [{}, {}) exceeds {available} recorded queries",
                self.start,
                self.start + self.len
            )));
        }
        let queries = record.try_map(|_, _, q| q.slice_rows(self.start, self.len))?;
        let positions = (base + self.start..base + self.start + self.len).collect();
        QuerySet::new(queries, positions)
    }
}

/// `W ∪ Q`: window rows first, then lookahead rows.
pub fn union_windows(window: &QuerySet, qcache: &QCache) -> Result<QuerySet> {
    if !window.queries.same_geometry(&qcache.queries) {
        return Err(shape("window and q-cache have different layer/head geometry"));
    }
    let wd = window.queries.cells().first().map(Mat::cols);
    let qd = qcache.queries.cells().first().map(Mat::cols);
    if !window.is_empty() && !qcache.is_empty() && wd != qd {
        return Err(shape("window and q-cache have different head_dim"));
    }
    if window.positions.iter().any(|p| qcache.step_positions.binary_search(p).is_ok()) {
        return Err(invalid("window and q-cache share a position"));
    }
    let queries = window
        .queries
        .try_map(|l, h, w| w.vstack(qcache.queries.get(l, h)))?;
    let mut positions = window.positions.clone();
    positions.extend_from_slice(&qcache.step_positions);
    QuerySet::new(queries, positions)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(layers: usize, heads: usize, t: usize, d: usize) -> KVCacheStore {
        let keys = HeadGrid::from_fn(layers, heads, |l, h| {
            Mat::new(t, d, (0..t * d).map(|i| (i + 10 * l + 100 * h) as f32).collect()).unwrap()
        });
        let values = keys.map(|_, _, k| k.scale(-1.0));
        KVCacheStore::from_prefill(keys, values).unwrap()
    }

    fn step(layers: usize, heads: usize, d: usize, position: usize, fill: f32) -> StepOutput {
        StepOutput {
            next_token: 0,
            position,
            queries: HeadGrid::from_fn(layers, heads, |_, _| vec![fill; d]),
            new_kv: HeadGrid::from_fn(layers, heads, |_, _| (vec![fill; d], vec![-fill; d])),
        }
    }

    fn sel1(idx: Vec<usize>, t: usize) -> Selection {
        let b = idx.len();
        Selection::uniform(HeadGrid::from_fn(1, 1, |_, _| idx.clone()), b, t).unwrap()
    }

    #[test]
    fn apply_selection_basic() {
        let s = store(1, 1, 5, 2);
        let v = s.apply_selection(&sel1(vec![0, 2, 4], 5)).unwrap();
        assert_eq!(v.len(0, 0), 3);
        assert_eq!(v.positions(0, 0), vec![0, 2, 4]);
        assert_eq!(v.key(0, 0, 1), s.key(0, 0, 2));

        let all = s.apply_selection(&Selection::full(1, 1, 5)).unwrap();
        for i in 0..5 {
            assert_eq!(all.key(0, 0, i), s.key(0, 0, i));
            assert_eq!(all.value(0, 0, i), s.value(0, 0, i));
            assert_eq!(all.position(0, 0, i), i);
        }
    }

    #[test]
    fn apply_selection_rejects_out_of_range() {
        let s = store(1, 1, 3, 2);
        let sel = sel1(vec![0, 4], 5);
        assert!(s.apply_selection(&sel).is_err());
    }

    #[test]
    fn nested_selection_composes() {
        let s = store(1, 1, 8, 2);
        let outer = s.apply_selection(&sel1(vec![1, 3, 4, 6, 7], 8)).unwrap();
        let inner = outer.select(&sel1(vec![0, 2, 4], 5)).unwrap();
        // [1,3,4,6,7][[0,2,4]] = [1,4,7]
        let direct = s.apply_selection(&sel1(vec![1, 4, 7], 8)).unwrap();
        assert_eq!(inner.positions(0, 0), direct.positions(0, 0));
        assert_eq!(inner.store_indices(0, 0), &[1, 4, 7]);
    }

    #[test]
    fn selection_validation() {
        let g = |v: Vec<usize>| HeadGrid::from_fn(1, 1, move |_, _| v.clone());
        assert!(Selection::uniform(g(vec![2, 1]), 2, 5).is_err());
        assert!(Selection::uniform(g(vec![1, 1]), 2, 5).is_err());
        assert!(Selection::uniform(g(vec![1, 5]), 2, 5).is_err());
        assert!(Selection::uniform(g(vec![1]), 2, 5).is_err());
        assert!(Selection::uniform(g(vec![0, 1, 2]), 8, 3).is_ok());
    }

    #[test]
    fn append_grows_every_head() {
        let mut s = store(2, 2, 16, 4);
        s.append_step(&step(2, 2, 4, 16, 0.25)).unwrap();
        for l in 0..2 {
            for h in 0..2 {
                assert_eq!(s.len(l, h), 17);
                assert_eq!(s.key(l, h, 16), &[0.25; 4]);
                assert_eq!(s.value(l, h, 16), &[-0.25; 4]);
            }
        }
        for p in 17..24 {
            s.append_step(&step(2, 2, 4, p, 1.0)).unwrap();
        }
        assert_eq!(&s.positions(1, 1)[16..], &(16..24).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn append_rejects_non_monotone() {
        let mut s = store(1, 2, 4, 2);
        assert!(s.append_step(&step(1, 2, 2, 3, 0.0)).is_err());
        assert_eq!(s.len(0, 0), 4);
        assert!(s.append_step(&step(1, 2, 3, 9, 0.0)).is_err());
    }

    #[test]
    fn view_creation_copies_nothing() {
        for d in [8, 64] {
            let s = store(2, 2, 32, d);
            let before = copied_elements();
            let sel = Selection::uniform(
                HeadGrid::from_fn(2, 2, |_, _| (0..32).step_by(2).collect()),
                16,
                32,
            )
            .unwrap();
            let v = s.apply_selection(&sel).unwrap();
            let _ = v.select(&Selection::full(2, 2, 16)).unwrap();
            assert_eq!(copied_elements(), before);
            let _ = s.compact(&sel).unwrap();
            assert_eq!(copied_elements(), before + (2 * 2 * 16 * d * 2) as u64);
        }
    }

    #[test]
    fn compact_keeps_original_positions() {
        let s = store(1, 1, 6, 3);
        let c = s.compact(&sel1(vec![1, 5], 6)).unwrap();
        assert_eq!(c.positions(0, 0), vec![1, 5]);
        assert_eq!(c.key(0, 0, 1), s.key(0, 0, 5));
    }

    #[test]
    fn extended_source_concatenates() {
        let s = store(1, 1, 4, 2);
        let mut ext = KVCacheStore::empty(1, 1, 2);
        ext.append_step(&step(1, 1, 2, 4, 9.0)).unwrap();
        let view = s.apply_selection(&sel1(vec![0, 3], 4)).unwrap();
        let e = Extended::new(&view, &ext).unwrap();
        assert_eq!(e.positions(0, 0), vec![0, 3, 4]);
        assert_eq!(e.key(0, 0, 2), &[9.0, 9.0]);

        let mut bad = KVCacheStore::empty(1, 1, 2);
        bad.append_step(&step(1, 1, 2, 2, 9.0)).unwrap();
        assert!(Extended::new(&s, &bad).is_err());
    }

    fn qset(rows: usize, d: usize, positions: Vec<usize>) -> QuerySet {
        QuerySet::new(HeadGrid::from_fn(2, 2, |_, _| Mat::zeros(rows, d)), positions).unwrap()
    }

    #[test]
    fn union_windows_sizes() {
        let w = qset(8, 4, (24..32).collect());
        let q = QCache::new(HeadGrid::from_fn(2, 2, |_, _| Mat::zeros(8, 4)), (32..40).collect(), 32)
            .unwrap();
        let u = union_windows(&w, &q).unwrap();
        assert_eq!(u.queries.get(1, 1).rows(), 16);
        assert_eq!(u.positions, (24..40).collect::<Vec<_>>());

        let empty_q = QCache::empty(2, 2, 4);
        assert_eq!(union_windows(&w, &empty_q).unwrap(), w);

        let empty_w = qset(0, 4, vec![]);
        let u = union_windows(&empty_w, &q).unwrap();
        assert_eq!(u.queries, *q.queries());
        assert_eq!(u.positions, q.step_positions());
    }

    #[test]
    fn union_windows_rejects_mismatch() {
        let w = qset(2, 4, vec![0, 1]);
        let q = QCache::new(HeadGrid::from_fn(1, 2, |_, _| Mat::zeros(1, 4)), vec![5], 5).unwrap();
        assert!(union_windows(&w, &q).is_err());
        let q = QCache::new(HeadGrid::from_fn(2, 2, |_, _| Mat::zeros(1, 3)), vec![5], 5).unwrap();
        assert!(union_windows(&w, &q).is_err());
    }

    #[test]
    fn qcache_validation() {
        let g = HeadGrid::from_fn(1, 1, |_, _| Mat::zeros(2, 2));
        assert!(QCache::new(g.clone(), vec![4, 5], 5).is_err());
        assert!(QCache::new(g.clone(), vec![6, 5], 5).is_err());
        assert!(QCache::new(g, vec![5, 6], 5).is_ok());
    }

    #[test]
    fn window_extract_positions() {
        let input = HeadGrid::from_fn(1, 1, |_, _| Mat::zeros(10, 2));
        let resp = HeadGrid::from_fn(1, 1, |_, _| Mat::zeros(4, 2));
        let w = WindowSpec { start: 1, len: 3, source: WindowSource::Response };
        assert_eq!(w.extract(&input, &resp).unwrap().positions, vec![11, 12, 13]);
        let w = WindowSpec { start: 2, len: 3, source: WindowSource::Response };
        assert!(w.extract(&input, &resp).is_err());
    }
}
