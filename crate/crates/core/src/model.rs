//! Deterministic toy decoder-only transformer.
//!
//! Pre-norm blocks (parameter-free RMS norm), multi-head attention with
//! optional rotary embedding, ReLU MLP, untied output head. Weights are drawn
//! from `ChaCha8Rng::seed_from_u64(seed)` (rand_chacha 0.3) as
//! `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))` in the order of the layout table
//! below, row-major, so a `(config, seed)` pair gives bit-identical weights on
//! every platform.
//!
//! | tensor            | shape                          |
//! |-------------------|--------------------------------|
//! | `embed`           | `vocab × model_dim`            |
//! | `layer.{l}.wq`    | `model_dim × model_dim`        |
//! | `layer.{l}.wk`    | `model_dim × model_dim`        |
//! | `layer.{l}.wv`    | `model_dim × model_dim`        |
//! | `layer.{l}.wo`    | `model_dim × model_dim`        |
//! | `layer.{l}.w_up`  | `model_dim × model_dim·mlp_mult` |
//! | `layer.{l}.w_down`| `model_dim·mlp_mult × model_dim` |
//! | `lm_head`         | `model_dim × vocab`            |
//!
//! The embedding uses `uniform(-1, 1)`. Head `h` owns columns
//! `h·head_dim .. (h+1)·head_dim` of the projected query/key/value rows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, invalid, shape, Result};
use crate::grid::HeadGrid;
use crate::kvcache::{KVCacheStore, KvSource};
use crate::tensor::{dot, matmul, softmax_in_place, Mat};

pub type TokenId = u32;

const ROPE_BASE: f32 = 10_000.0;
const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_mult: usize,
    pub max_pos: usize,
    pub seed: u64,
    pub rope_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            layers: 2,
            heads: 2,
            head_dim: 16,
            mlp_mult: 4,
            max_pos: 1024,
            seed: 0,
            rope_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab", self.vocab),
            ("layers", self.layers),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("mlp_mult", self.mlp_mult),
            ("max_pos", self.max_pos),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(config(format!("{name} must be >= 1")));
        }
        if self.rope_enabled && !self.head_dim.is_multiple_of(2) {
            return Err(config("rotary embedding needs an even head_dim"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub w_up: Mat,
    pub w_down: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub embed: Mat,
    pub layers: Vec<LayerWeights>,
    pub lm_head: Mat,
}

/// Result of one decode step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub next_token: TokenId,
    /// Absolute position of the token fed into this step.
    pub position: usize,
    /// Post-rotary query vector per (layer, head).
    pub queries: HeadGrid<Vec<f32>>,
    /// Post-rotary key and value per (layer, head).
    pub new_kv: HeadGrid<(Vec<f32>, Vec<f32>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefillOutput {
    pub cache: KVCacheStore,
    /// Post-rotary query rows for every prompt position, per (layer, head).
    pub queries: HeadGrid<Mat>,
    pub last_hidden: Vec<f32>,
    /// Greedy prediction from the last prompt position.
    pub first_token: TokenId,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f32) -> Mat {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Mat::new(rows, cols, data).expect("finite uniform draw")
}

/// Draws weights for `config`.
pub fn init_model(config: &ModelConfig) -> Result<ModelState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dm = config.model_dim();
    let hidden = dm * config.mlp_mult;
    let fan = |n: usize| 1.0 / (n as f32).sqrt();
    let embed = uniform(&mut rng, config.vocab, dm, 1.0);
    let layers = (0..config.layers)
        .map(|_| LayerWeights {
            wq: uniform(&mut rng, dm, dm, fan(dm)),
            wk: uniform(&mut rng, dm, dm, fan(dm)),
            wv: uniform(&mut rng, dm, dm, fan(dm)),
            wo: uniform(&mut rng, dm, dm, fan(dm)),
            w_up: uniform(&mut rng, dm, hidden, fan(dm)),
            w_down: uniform(&mut rng, hidden, dm, fan(hidden)),
        })
        .collect();
    let lm_head = uniform(&mut rng, dm, config.vocab, fan(dm));
    Ok(ModelState { config: config.clone(), embed, layers, lm_head })
}

fn rms_norm(m: &Mat) -> Mat {
    let cols = m.cols();
    let mut data = Vec::with_capacity(m.data().len());
    for row in m.row_iter() {
        let ms = row.iter().map(|v| v * v).sum::<f32>() / cols as f32;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        data.extend(row.iter().map(|v| v * inv));
    }
    Mat::new(m.rows(), cols, data).expect("finite norm")
}

/// Rotates consecutive pairs `(2i, 2i+1)` by `position · base^(-2i/d)`.
pub fn apply_rope(v: &mut [f32], position: usize) {
    let d = v.len();
    for i in 0..d / 2 {
        let theta = (position as f32) * ROPE_BASE.powf(-2.0 * i as f32 / d as f32);
        let (sin, cos) = theta.sin_cos();
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * cos - b * sin;
        v[2 * i + 1] = a * sin + b * cos;
    }
}

fn add_in_place(x: &mut Mat, y: &Mat) {
    let data: Vec<f32> = x.data().iter().zip(y.data()).map(|(a, b)| a + b).collect();
    *x = Mat::new(x.rows(), x.cols(), data).expect("finite residual");
}

fn mlp(w: &LayerWeights, x: &Mat) -> Result<Mat> {
    let up = matmul(&rms_norm(x), &w.w_up)?;
    let act = Mat::new(up.rows(), up.cols(), up.data().iter().map(|v| v.max(0.0)).collect())?;
    matmul(&act, &w.w_down)
}

fn argmax(logits: &[f32]) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Splits projected rows into per-head rows, rotating them in place.
fn split_heads(proj: &Mat, heads: usize, head_dim: usize, positions: &[usize], rope: bool) -> Vec<Mat> {
    (0..heads)
        .map(|h| {
            let mut data = Vec::with_capacity(proj.rows() * head_dim);
            for (r, &p) in positions.iter().enumerate() {
                let start = data.len();
                data.extend_from_slice(&proj.row(r)[h * head_dim..(h + 1) * head_dim]);
                if rope {
                    apply_rope(&mut data[start..], p);
                }
            }
            Mat::new(proj.rows(), head_dim, data).expect("finite head split")
        })
        .collect()
}

/// Scaled attention logits of `query` against every entry of one head.
pub fn attention_logits<S: KvSource + ?Sized>(query: &[f32], source: &S, layer: usize, head: usize) -> Vec<f32> {
    let scale = 1.0 / (query.len() as f32).sqrt();
    (0..source.len(layer, head))
        .map(|i| dot(query, source.key(layer, head, i)) * scale)
        .collect()
}

impl ModelState {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn embed_tokens(&self, tokens: &[TokenId]) -> Result<Mat> {
        let rows: Vec<usize> = tokens
            .iter()
            .map(|&t| {
                if (t as usize) < self.config.vocab {
                    Ok(t as usize)
                } else {
                    Err(invalid(format!("token {t} outside vocab {}", self.config.vocab)))
                }
            })
            .collect::<Result<_>>()?;
        self.embed.gather_rows(&rows)
    }

    fn logits(&self, hidden: &[f32]) -> Result<Vec<f32>> {
        let x = Mat::new(1, hidden.len(), hidden.to_vec())?;
        Ok(matmul(&rms_norm(&x), &self.lm_head)?.data().to_vec())
    }

    /// Single forward pass over the prompt with causal attention.
    pub fn prefill(&self, tokens: &[TokenId]) -> Result<PrefillOutput> {
        self.prefill_inner(tokens, false).map(|(out, _)| out)
    }

    /// Like [`prefill`](Self::prefill) but also returns the attention
    /// probability matrix `T × T` per (layer, head).
    pub fn prefill_traced(&self, tokens: &[TokenId]) -> Result<(PrefillOutput, HeadGrid<Mat>)> {
        let (out, attn) = self.prefill_inner(tokens, true)?;
        Ok((out, attn.expect("attention captured")))
    }

    fn prefill_inner(&self, tokens: &[TokenId], capture: bool) -> Result<(PrefillOutput, Option<HeadGrid<Mat>>)> {
        let cfg = &self.config;
        let t = tokens.len();
        if t == 0 || t > cfg.max_pos {
            return Err(invalid(format!("prompt length {t} outside [1, {}]", cfg.max_pos)));
        }
        let (heads, d) = (cfg.heads, cfg.head_dim);
        let positions: Vec<usize> = (0..t).collect();
        let scale = 1.0 / (d as f32).sqrt();
        let mut x = self.embed_tokens(tokens)?;
        let mut keys = Vec::with_capacity(cfg.layers * heads);
        let mut values = Vec::with_capacity(cfg.layers * heads);
        let mut queries = Vec::with_capacity(cfg.layers * heads);
        let mut attn_maps = Vec::new();

        for w in &self.layers {
            let h_in = rms_norm(&x);
            let qh = split_heads(&matmul(&h_in, &w.wq)?, heads, d, &positions, cfg.rope_enabled);
            let kh = split_heads(&matmul(&h_in, &w.wk)?, heads, d, &positions, cfg.rope_enabled);
            let vh = split_heads(&matmul(&h_in, &w.wv)?, heads, d, &positions, false);

            let mut concat = vec![0.0f32; t * heads * d];
            for h in 0..heads {
                let mut probs = if capture { vec![0.0f32; t * t] } else { Vec::new() };
                for i in 0..t {
                    let q = qh[h].row(i);
                    let mut row: Vec<f32> = (0..=i).map(|j| dot(q, kh[h].row(j)) * scale).collect();
                    softmax_in_place(&mut row);
                    let out = &mut concat[i * heads * d + h * d..i * heads * d + (h + 1) * d];
                    for (j, &p) in row.iter().enumerate() {
                        for (o, &v) in out.iter_mut().zip(vh[h].row(j)) {
                            *o += p * v;
                        }
                    }
                    if capture {
                        probs[i * t..i * t + i + 1].copy_from_slice(&row);
                    }
                }
                if capture {
                    attn_maps.push(Mat::new(t, t, probs)?);
                }
            }
            let attn_out = matmul(&Mat::new(t, heads * d, concat)?, &w.wo)?;
            add_in_place(&mut x, &attn_out);
            let m = mlp(w, &x)?;
            add_in_place(&mut x, &m);

            queries.extend(qh);
            keys.extend(kh);
            values.extend(vh);
        }

        let last_hidden = x.row(t - 1).to_vec();
        let first_token = argmax(&self.logits(&last_hidden)?);
        let cache = KVCacheStore::from_prefill(
            HeadGrid::from_cells(cfg.layers, heads, keys)?,
            HeadGrid::from_cells(cfg.layers, heads, values)?,
        )?;
        let attention = if capture {
            Some(HeadGrid::from_cells(cfg.layers, heads, attn_maps)?)
        } else {
            None
        };
        Ok((
            PrefillOutput {
                cache,
                queries: HeadGrid::from_cells(cfg.layers, heads, queries)?,
                last_hidden,
                first_token,
            },
            attention,
        ))
    }

    /// Feeds `token` at absolute `position`, attending over `cache` (plus the
    /// token's own key/value) using each entry's stored position.
    pub fn decode_step<S: KvSource + ?Sized>(&self, cache: &S, token: TokenId, position: usize) -> Result<StepOutput> {
        let cfg = &self.config;
        if position >= cfg.max_pos {
            return Err(invalid(format!("position {position} >= max_pos {}", cfg.max_pos)));
        }
        if cache.layers() != cfg.layers || cache.heads() != cfg.heads || cache.head_dim() != cfg.head_dim {
            return Err(shape("cache geometry differs from model"));
        }
        for l in 0..cfg.layers {
            for h in 0..cfg.heads {
                if cache.is_empty(l, h) {
                    return Err(invalid(format!("empty cache view on head ({l},{h})")));
                }
            }
        }
        let (heads, d) = (cfg.heads, cfg.head_dim);
        let mut x = self.embed_tokens(&[token])?;
        let mut queries = Vec::with_capacity(cfg.layers * heads);
        let mut new_kv = Vec::with_capacity(cfg.layers * heads);

        for (l, w) in self.layers.iter().enumerate() {
            let h_in = rms_norm(&x);
            let pos = [position];
            let qh = split_heads(&matmul(&h_in, &w.wq)?, heads, d, &pos, cfg.rope_enabled);
            let kh = split_heads(&matmul(&h_in, &w.wk)?, heads, d, &pos, cfg.rope_enabled);
            let vh = split_heads(&matmul(&h_in, &w.wv)?, heads, d, &pos, false);

            let mut concat = vec![0.0f32; heads * d];
            for h in 0..heads {
                let (q, k, v) = (qh[h].row(0), kh[h].row(0), vh[h].row(0));
                let mut logits = attention_logits(q, cache, l, h);
                logits.push(dot(q, k) / (d as f32).sqrt());
                softmax_in_place(&mut logits);
                let out = &mut concat[h * d..(h + 1) * d];
                let n = cache.len(l, h);
                for (i, &p) in logits.iter().enumerate() {
                    let val = if i < n { cache.value(l, h, i) } else { v };
                    for (o, &vv) in out.iter_mut().zip(val) {
                        *o += p * vv;
                    }
                }
                queries.push(q.to_vec());
                new_kv.push((k.to_vec(), v.to_vec()));
            }
            let attn_out = matmul(&Mat::new(1, heads * d, concat)?, &w.wo)?;
            add_in_place(&mut x, &attn_out);
            let m = mlp(w, &x)?;
            add_in_place(&mut x, &m);
        }

        Ok(StepOutput {
            next_token: argmax(&self.logits(x.row(0))?),
            position,
            queries: HeadGrid::from_cells(cfg.layers, heads, queries)?,
            new_kv: HeadGrid::from_cells(cfg.layers, heads, new_kv)?,
        })
    }

    /// Named weight tensors in layout-table order.
    pub fn named_tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (l, w) in self.layers.iter().enumerate() {
            out.push((format!("layer.{l}.wq"), &w.wq));
            out.push((format!("layer.{l}.wk"), &w.wk));
            out.push((format!("layer.{l}.wv"), &w.wv));
            out.push((format!("layer.{l}.wo"), &w.wo));
            out.push((format!("layer.{l}.w_up"), &w.w_up));
            out.push((format!("layer.{l}.w_down"), &w.w_down));
        }
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    /// Expected `(rows, cols)` for every named tensor of `config`.
    pub fn layout(config: &ModelConfig) -> Vec<(String, (usize, usize))> {
        let dm = config.model_dim();
        let hidden = dm * config.mlp_mult;
        let mut out = vec![("embed".to_string(), (config.vocab, dm))];
        for l in 0..config.layers {
            for name in ["wq", "wk", "wv", "wo"] {
                out.push((format!("layer.{l}.{name}"), (dm, dm)));
            }
            out.push((format!("layer.{l}.w_up"), (dm, hidden)));
            out.push((format!("layer.{l}.w_down"), (hidden, dm)));
        }
        out.push(("lm_head".to_string(), (dm, config.vocab)));
        out
    }

    /// Rebuilds a model from named tensors, checking every shape against the layout.
    pub fn from_named_tensors(config: ModelConfig, mut tensors: Vec<(String, Mat)>) -> Result<Self> {
        config.validate()?;
        let layout = Self::layout(&config);
        let mut take = |name: &str, dims: (usize, usize)| -> Result<Mat> {
            let pos = tensors
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| invalid(format!("missing weight tensor {name}")))?;
            let (_, m) = tensors.swap_remove(pos);
            if (m.rows(), m.cols()) != dims {
                return Err(shape(format!(
                    "{name}: expected {}x{}, found {}x{}",
                    dims.0,
                    dims.1,
                    m.rows(),
                    m.cols()
                )));
            }
            Ok(m)
        };
        let mut it = layout.into_iter();
        let (n, s) = it.next().expect("embed");
        let embed = take(&n, s)?;
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let mut next = || {
                let (n, s) = it.next().expect("layer tensor");
                take(&n, s)
            };
            layers.push(LayerWeights {
                wq: next()?,
                wk: next()?,
                wv: next()?,
                wo: next()?,
                w_up: next()?,
                w_down: next()?,
            });
        }
        let (n, s) = it.next().expect("lm_head");
        let lm_head = take(&n, s)?;
        Ok(Self { config, embed, layers, lm_head })
    }

    /// Greedy continuation of `steps` tokens over the full, growing cache.
    /// Returns the generated tokens and the per-step outputs.
    pub fn generate_full(&self, prefill: &PrefillOutput, steps: usize) -> Result<(Vec<TokenId>, Vec<StepOutput>)> {
        let mut cache = prefill.cache.clone();
        let t = prefill.queries.cells().first().map_or(0, Mat::rows);
        let mut token = prefill.first_token;
        let mut tokens = Vec::with_capacity(steps);
        let mut outs = Vec::with_capacity(steps);
        for s in 0..steps {
            let out = self.decode_step(&cache, token, t + s)?;
            cache.append_step(&out)?;
            tokens.push(token);
            token = out.next_token;
            outs.push(out);
        }
        Ok((tokens, outs))
    }
}
