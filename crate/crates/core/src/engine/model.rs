//! Pre-norm decoder with rotary positions, evaluated in f64.
//!
//! Weights are drawn as f32 from a seeded ChaCha stream, so the serialized
//! f32 file reproduces the in-memory model exactly.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{HeadView, KvCacheState};
use crate::engine::EngineError;
use crate::scoring::AttentionRow;

const NORM_EPS: f64 = 1e-5;
const ROPE_BASE: f64 = 10_000.0;
const QK_GAIN: f64 = 1.5;
const RESIDUAL_GAIN: f64 = 0.5;
const MLP_MULT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyModelConfig {
    pub vocab_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub max_seq_len: usize,
    pub rng_seed: u64,
}

impl TinyModelConfig {
    /// Two layers, two heads, width 32.
    pub fn small(vocab_size: usize, rng_seed: u64) -> Self {
        Self {
            vocab_size,
            num_layers: 2,
            num_heads: 2,
            model_dim: 32,
            head_dim: 16,
            max_seq_len: 1024,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let dims = [
            self.vocab_size,
            self.num_layers,
            self.num_heads,
            self.model_dim,
            self.head_dim,
            self.max_seq_len,
        ];
        if dims.contains(&0) {
            return Err(EngineError::InvalidConfig("all model dimensions must be at least 1".into()));
        }
        if self.model_dim != self.num_heads * self.head_dim {
            return Err(EngineError::InvalidConfig(format!(
                "model_dim {} != num_heads {} x head_dim {}",
                self.model_dim, self.num_heads, self.head_dim
            )));
        }
        Ok(())
    }

    pub fn mlp_dim(&self) -> usize {
        self.model_dim * MLP_MULT
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    fn random(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| f64::from((rng.gen::<f32>() * 2.0 - 1.0) * bound as f32))
            .collect();
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_norm: Vec<f64>,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyModel {
    pub config: TinyModelConfig,
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    pub lm_head: Matrix,
}

/// Logits of one position plus, if requested, its attention rows.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    pub rows: Vec<AttentionRow>,
}

pub(crate) fn rms_norm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Rotate consecutive pairs by position-dependent angles; an odd trailing dim is left as is.
pub(crate) fn rope(x: &mut [f64], position: usize) {
    let d = x.len();
    for i in 0..d / 2 {
        let theta = position as f64 / ROPE_BASE.powf(2.0 * i as f64 / d as f64);
        let (sin, cos) = theta.sin_cos();
        let (a, b) = (x[2 * i], x[2 * i + 1]);
        x[2 * i] = a * cos - b * sin;
        x[2 * i + 1] = a * sin + b * cos;
    }
}

/// Softmax attention of `query` over every entry of `head`.
///
/// Returns the head output and the weights, aligned with `head.tokens`.
pub fn attend(query: &[f64], head: HeadView<'_>) -> (Vec<f64>, Vec<f64>) {
    let d = head.head_dim;
    let scale = 1.0 / (d as f64).sqrt();
    let logits: Vec<f64> = (0..head.len())
        .map(|i| head.key(i).iter().zip(query).map(|(k, q)| k * q).sum::<f64>() * scale)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let mut out = vec![0.0; d];
    for (i, w) in weights.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(head.value(i)) {
            *o += w * v;
        }
    }
    (out, weights)
}

impl TinyModel {
    pub fn new(config: TinyModelConfig) -> Result<Self, EngineError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let d = config.model_dim;
        let m = config.mlp_dim();
        let bound = |fan_in: usize, gain: f64| gain * (3.0 / fan_in as f64).sqrt();
        let embed = Matrix::random(config.vocab_size, d, 1.0, &mut rng);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                attn_norm: vec![1.0; d],
                wq: Matrix::random(d, d, bound(d, QK_GAIN), &mut rng),
                wk: Matrix::random(d, d, bound(d, QK_GAIN), &mut rng),
                wv: Matrix::random(d, d, bound(d, 1.0), &mut rng),
                wo: Matrix::random(d, d, bound(d, RESIDUAL_GAIN), &mut rng),
                mlp_norm: vec![1.0; d],
                w_up: Matrix::random(m, d, bound(d, 1.0), &mut rng),
                w_down: Matrix::random(d, m, bound(m, RESIDUAL_GAIN), &mut rng),
            })
            .collect();
        let final_norm = vec![1.0; d];
        let lm_head = Matrix::random(config.vocab_size, d, bound(d, 2.0), &mut rng);
        Ok(Self {
            config,
            embed,
            layers,
            final_norm,
            lm_head,
        })
    }

    fn mlp(&self, layer: &LayerWeights, x: &mut [f64]) {
        let h = rms_norm(x, &layer.mlp_norm);
        let up: Vec<f64> = layer.w_up.matvec(&h).into_iter().map(silu).collect();
        for (xi, di) in x.iter_mut().zip(layer.w_down.matvec(&up)) {
            *xi += di;
        }
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.lm_head.matvec(&rms_norm(x, &self.final_norm))
    }

    /// Run one token at the cache's next position, appending its keys and values.
    ///
    /// Attention at each (layer, head) covers exactly the entries live there.
    pub fn forward_token(
        &self,
        cache: &mut KvCacheState,
        token_id: u32,
        capture: bool,
    ) -> Result<StepOutput, EngineError> {
        let cfg = &self.config;
        let pos = cache.next_position();
        if pos >= cfg.max_seq_len {
            return Err(EngineError::SequenceTooLong {
                position: pos,
                max_seq_len: cfg.max_seq_len,
            });
        }
        if token_id as usize >= cfg.vocab_size {
            return Err(EngineError::InvalidConfig(format!("token id {token_id} outside vocabulary")));
        }
        let hd = cfg.head_dim;
        let mut x = self.embed.row(token_id as usize).to_vec();
        let mut rows = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let h = rms_norm(&x, &layer.attn_norm);
            let q = layer.wq.matvec(&h);
            let k = layer.wk.matvec(&h);
            let v = layer.wv.matvec(&h);
            let mut concat = Vec::with_capacity(cfg.model_dim);
            for head in 0..cfg.num_heads {
                let span = head * hd..(head + 1) * hd;
                let mut qh = q[span.clone()].to_vec();
                let mut kh = k[span.clone()].to_vec();
                rope(&mut qh, pos);
                rope(&mut kh, pos);
                cache.push(l, head, pos, &kh, &v[span])?;
                let view = cache.head(l, head);
                let (out, weights) = attend(&qh, view);
                if capture {
                    rows.push(AttentionRow {
                        layer: l,
                        head,
                        weights: view.tokens.iter().copied().zip(weights).collect(),
                    });
                }
                concat.extend(out);
            }
            for (xi, oi) in x.iter_mut().zip(layer.wo.matvec(&concat)) {
                *xi += oi;
            }
            self.mlp(layer, &mut x);
        }
        cache.commit(pos);
        Ok(StepOutput {
            logits: self.logits(&x),
            rows,
        })
    }

    /// Whole-sequence forward pass, layer by layer, honoring a per-(layer, head) key mask.
    ///
    /// Returns the logits of every position.
    pub fn reference_forward(&self, tokens: &[u32], mask: &AttentionMask) -> Vec<Vec<f64>> {
        let cfg = &self.config;
        let (hd, n) = (cfg.head_dim, tokens.len());
        let mut xs: Vec<Vec<f64>> = tokens.iter().map(|&t| self.embed.row(t as usize).to_vec()).collect();
        for (l, layer) in self.layers.iter().enumerate() {
            let normed: Vec<Vec<f64>> = xs.iter().map(|x| rms_norm(x, &layer.attn_norm)).collect();
            let mut qs: Vec<Vec<f64>> = normed.iter().map(|h| layer.wq.matvec(h)).collect();
            let mut ks: Vec<Vec<f64>> = normed.iter().map(|h| layer.wk.matvec(h)).collect();
            let vs: Vec<Vec<f64>> = normed.iter().map(|h| layer.wv.matvec(h)).collect();
            for i in 0..n {
                for head in 0..cfg.num_heads {
                    rope(&mut qs[i][head * hd..(head + 1) * hd], i);
                    rope(&mut ks[i][head * hd..(head + 1) * hd], i);
                }
            }
            let scale = 1.0 / (hd as f64).sqrt();
            let mut attn_out = vec![vec![0.0; cfg.model_dim]; n];
            for head in 0..cfg.num_heads {
                let span = head * hd..(head + 1) * hd;
                for i in 0..n {
                    let visible: Vec<usize> = (0..=i).filter(|&j| mask.visible(l, head, j, i)).collect();
                    let logits: Vec<f64> = visible
                        .iter()
                        .map(|&j| {
                            qs[i][span.clone()]
                                .iter()
                                .zip(&ks[j][span.clone()])
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                                * scale
                        })
                        .collect();
                    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
                    let total: f64 = exps.iter().sum();
                    for (&j, e) in visible.iter().zip(&exps) {
                        let w = e / total;
                        for (o, v) in attn_out[i][span.clone()].iter_mut().zip(&vs[j][span.clone()]) {
                            *o += w * v;
                        }
                    }
                }
            }
            for (x, a) in xs.iter_mut().zip(&attn_out) {
                for (xi, oi) in x.iter_mut().zip(layer.wo.matvec(a)) {
                    *xi += oi;
                }
                self.mlp(layer, x);
            }
        }
        xs.iter().map(|x| self.logits(x)).collect()
    }
}

/// Key visibility per (layer, head): a hidden key is invisible to every
/// query at or after the position it was hidden from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AttentionMask {
    num_heads: usize,
    hidden: BTreeMap<(usize, usize), BTreeMap<usize, usize>>,
}

impl AttentionMask {
    pub fn new(num_heads: usize) -> Self {
        Self {
            num_heads,
            hidden: BTreeMap::new(),
        }
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    /// Hide `key` at `(layer, head)` from queries at positions `>= from_query`.
    pub fn hide(&mut self, layer: usize, head: usize, key: usize, from_query: usize) {
        let e = self.hidden.entry((layer, head)).or_default().entry(key).or_insert(from_query);
        *e = (*e).min(from_query);
    }

    pub fn visible(&self, layer: usize, head: usize, key: usize, query: usize) -> bool {
        key <= query
            && self
                .hidden
                .get(&(layer, head))
                .and_then(|m| m.get(&key))
                .is_none_or(|&from| query < from)
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }
}
