//! Constructed traces where input-side and response-side queries attend to
//! disjoint key sets.
//!
//! Each head reserves the leading coordinates of its `head_dim`:
//!
//! * dim 0: a bias direction. Every query carries `BIAS`, background keys
//!   carry `BIAS`, needle and distractor keys carry 0.
//! * dim 1: the distractor direction, carried by input queries and
//!   distractor keys.
//! * dims 2..6: four needle groups. Needle `i` belongs to group `i % 4`.
//!   Response query `r` points at one group: `r = 0` → 0, `r = 1` → 1,
//!   `r ∈ [2, 4)` → 2, `r ∈ [4, 8)` → 3, and `r mod 4` afterwards, so the
//!   first `S` response queries cover `min(4, ⌊log2 S⌋ + 1)` groups.
//!
//! The remaining coordinates hold small uniform noise. The
//! dominant dot product is `divergence + 1`, so dominant scores exceed the
//! bias-only background by at least `divergence`. Needles and distractors
//! sit at positions `>= 2·needle_count`, which keeps early (causally
//! masked) input windows from ever ranking a needle.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::grid::HeadGrid;
use crate::model::TokenId;
use crate::tensor::Mat;
use crate::trace::{TraceBundle, TraceMeta};

pub const NEEDLE_GROUPS: usize = 4;
const RESERVED_DIMS: usize = 2 + NEEDLE_GROUPS;
const BIAS: f32 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub t_input: usize,
    pub t_response: usize,
    pub vocab: usize,
    pub needle_count: usize,
    pub divergence: f32,
    /// Half-width of the uniform noise on unreserved coordinates.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            head_dim: 16,
            t_input: 512,
            t_response: 32,
            vocab: 256,
            needle_count: 8,
            divergence: 16.0,
            noise: 0.05,
            seed: 0,
        }
    }
}

/// Positions of the planted key sets for one head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedSets {
    pub needles: Vec<usize>,
    pub distractors: Vec<usize>,
}

/// Group the `r`-th response query points at.
pub fn response_group(r: usize) -> usize {
    if r < 1 << (NEEDLE_GROUPS - 1) {
        (usize::BITS - r.leading_zeros()) as usize
    } else {
        r % NEEDLE_GROUPS
    }
}

fn validate(p: &SynthParams) -> Result<()> {
    if p.layers == 0 || p.heads == 0 || p.vocab == 0 {
        return Err(config("layers, heads and vocab must be >= 1"));
    }
    if p.head_dim < RESERVED_DIMS + 2 {
        return Err(config(format!("head_dim must be >= {}", RESERVED_DIMS + 2)));
    }
    if p.needle_count == 0 {
        return Err(config("needle_count must be >= 1"));
    }
    if p.t_input < 4 * p.needle_count {
        return Err(config(format!(
            "needles + distractors need t_input >= 4·needle_count = {}, got {}",
            4 * p.needle_count,
            p.t_input
        )));
    }
    if p.t_response == 0 {
        return Err(config("t_response must be >= 1"));
    }
    if !(p.divergence > 0.0 && p.divergence.is_finite()) || !(p.noise >= 0.0 && p.noise.is_finite()) {
        return Err(config("divergence must be positive and noise non-negative"));
    }
    Ok(())
}

/// Builds the trace together with the planted sets of every head.
pub fn gen_synthetic_trace_with_sets(p: &SynthParams) -> Result<(TraceBundle, HeadGrid<PlantedSets>)> {
    validate(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let d = p.head_dim;
    let strength = (p.divergence + 1.0).sqrt();
    let g = p.needle_count;

    let noise_row = |rng: &mut ChaCha8Rng| -> Vec<f32> {
        let mut v = vec![0.0f32; d];
        if p.noise > 0.0 {
            for x in &mut v[RESERVED_DIMS..] {
                *x = rng.gen_range(-p.noise..p.noise);
            }
        }
        v
    };

    let mut sets = Vec::with_capacity(p.layers * p.heads);
    let mut inputs = Vec::with_capacity(p.layers * p.heads);
    let mut responses = Vec::with_capacity(p.layers * p.heads);
    let mut keys = Vec::with_capacity(p.layers * p.heads);
    let mut values = Vec::with_capacity(p.layers * p.heads);

    for _ in 0..p.layers * p.heads {
        let mut slots: Vec<usize> = (2 * g..p.t_input).collect();
        slots.shuffle(&mut rng);
        let mut needles = slots[..g].to_vec();
        let mut distractors = slots[g..2 * g].to_vec();

        let mut kdata = Vec::with_capacity(p.t_input * d);
        for pos in 0..p.t_input {
            let mut k = noise_row(&mut rng);
            if let Some(i) = needles.iter().position(|&n| n == pos) {
                k[2 + i % NEEDLE_GROUPS] = strength;
            } else if distractors.contains(&pos) {
                k[1] = strength;
            } else {
                k[0] = BIAS;
            }
            kdata.extend(k);
        }
        let mut qin = Vec::with_capacity(p.t_input * d);
        for _ in 0..p.t_input {
            let mut q = noise_row(&mut rng);
            q[0] = BIAS;
            q[1] = strength;
            qin.extend(q);
        }
        let mut qresp = Vec::with_capacity(p.t_response * d);
        for r in 0..p.t_response {
            let mut q = noise_row(&mut rng);
            q[0] = BIAS;
            q[2 + response_group(r)] = strength;
            qresp.extend(q);
        }
        let vdata: Vec<f32> = (0..p.t_input * d).map(|_| rng.gen_range(-1.0..1.0)).collect();

        keys.push(Mat::new(p.t_input, d, kdata)?);
        inputs.push(Mat::new(p.t_input, d, qin)?);
        responses.push(Mat::new(p.t_response, d, qresp)?);
        values.push(Mat::new(p.t_input, d, vdata)?);
        needles.sort_unstable();
        distractors.sort_unstable();
        sets.push(PlantedSets { needles, distractors });
    }

    let vocab = p.vocab as TokenId;
    let input_tokens = (0..p.t_input).map(|_| rng.gen_range(0..vocab)).collect();
    let response_tokens = (0..p.t_response).map(|_| rng.gen_range(0..vocab)).collect();
    let bundle = TraceBundle {
        meta: TraceMeta {
            layers: p.layers,
            heads: p.heads,
            head_dim: d,
            t_input: p.t_input,
            t_response: p.t_response,
            vocab: p.vocab,
            provenance: format!(
                "synthetic seed={} needles={} divergence={} noise={}",
                p.seed, p.needle_count, p.divergence, p.noise
            ),
        },
        input_queries: HeadGrid::from_cells(p.layers, p.heads, inputs)?,
        response_queries: HeadGrid::from_cells(p.layers, p.heads, responses)?,
        keys: HeadGrid::from_cells(p.layers, p.heads, keys)?,
        values: HeadGrid::from_cells(p.layers, p.heads, values)?,
        input_tokens,
        response_tokens,
    };
    Ok((bundle, HeadGrid::from_cells(p.layers, p.heads, sets)?))
}

pub fn gen_synthetic_trace(p: &SynthParams) -> Result<TraceBundle> {
    gen_synthetic_trace_with_sets(p).map(|(t, _)| t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvcache::{WindowSource, WindowSpec};
    use crate::metrics::{gold_selection, recall, window_selection};
    use crate::policies::ScoreMode;

    #[test]
    fn group_schedule() {
        let g: Vec<usize> = (0..12).map(response_group).collect();
        assert_eq!(g, vec![0, 1, 2, 2, 3, 3, 3, 3, 0, 1, 2, 3]);
    }

    #[test]
    fn deterministic() {
        let p = SynthParams { t_input: 64, ..Default::default() };
        assert_eq!(gen_synthetic_trace(&p).unwrap(), gen_synthetic_trace(&p).unwrap());
        let other = gen_synthetic_trace(&SynthParams { seed: 1, ..p }).unwrap();
        assert_ne!(other.keys, gen_synthetic_trace(&SynthParams { t_input: 64, ..Default::default() }).unwrap().keys);
    }

    #[test]
    fn rejects_infeasible() {
        let p = SynthParams { t_input: 31, needle_count: 8, ..Default::default() };
        assert!(gen_synthetic_trace(&p).is_err());
        assert!(gen_synthetic_trace(&SynthParams { head_dim: 6, ..Default::default() }).is_err());
        assert!(gen_synthetic_trace(&SynthParams { divergence: 0.0, ..Default::default() }).is_err());
    }

    #[test]
    fn planted_sets_are_disjoint_and_late() {
        let p = SynthParams { t_input: 32, needle_count: 8, ..Default::default() };
        let (_, sets) = gen_synthetic_trace_with_sets(&p).unwrap();
        for (_, _, s) in sets.iter() {
            assert!(s.needles.iter().all(|n| !s.distractors.contains(n)));
            assert!(s.needles.iter().chain(&s.distractors).all(|&i| i >= 16));
        }
    }

    #[test]
    fn input_window_misses_every_needle() {
        let p = SynthParams { t_input: 128, t_response: 16, ..Default::default() };
        let (t, sets) = gen_synthetic_trace_with_sets(&p).unwrap();
        let gold = gold_selection(&t.response_queries, &t.keys, 8, ScoreMode::Softmax).unwrap();
        for (l, h, s) in sets.iter() {
            assert_eq!(gold.head(l, h), s.needles.as_slice());
        }
        let record = t.input_queries.try_map(|l, h, q| q.vstack(t.response_queries.get(l, h))).unwrap();
        let pred = window_selection(&record, &t.keys, 120, 8, 8, ScoreMode::Softmax).unwrap();
        assert_eq!(recall(&pred, &gold).unwrap().mean, 0.0);
        let pred = window_selection(&record, &t.keys, 128, 16, 8, ScoreMode::Softmax).unwrap();
        assert_eq!(recall(&pred, &gold).unwrap().mean, 1.0);
        let w = WindowSpec { start: 0, len: 16, source: WindowSource::Response };
        assert_eq!(w.extract(&t.input_queries, &t.response_queries).unwrap().queries, t.response_queries);
    }
}
