use std::hash::{Hash, Hasher};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RcuError, Result};
use crate::lora::{LayerId, Projection};
use crate::matrix::{Archive, Matrix};
use crate::rotmath::gen::gaussian;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyModelShape {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    /// Number of task labels; one extra REFUSE class is appended.
    pub num_labels: usize,
}

impl ToyModelShape {
    pub fn num_classes(&self) -> usize {
        self.num_labels + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim < 2 || self.num_blocks == 0 || self.num_labels < 2 {
            return Err(RcuError::Config(format!("invalid model shape {self:?}")));
        }
        Ok(())
    }
}

/// Frozen square projections of one attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

/// Per-block `[W_Q, W_K, W_V]` actually used in a forward pass.
pub type EffectiveWeights = Vec<[Matrix; 3]>;

/// Single-head attention classifier over token sequences.
///
/// Each block maps `X -> softmax(X W_Q (X W_K)^T / sqrt(d)) X W_V`; the last
/// block's output is mean-pooled and fed to a linear head. The final class is
/// REFUSE.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyAttentionModel {
    pub shape: ToyModelShape,
    pub embed: Matrix,
    pub blocks: Vec<AttentionBlock>,
    pub head_w: Matrix,
    pub head_b: Matrix,
}

struct BlockCache {
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attn: Matrix,
}

pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    pooled: Matrix,
    pub logits: Matrix,
}

/// Gradients of one backward pass.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    /// W.r.t. the effective projection weights.
    pub weights: EffectiveWeights,
    pub embed: Matrix,
    pub head_w: Matrix,
    pub head_b: Matrix,
}

impl ModelGrads {
    pub fn zeros(model: &ToyAttentionModel) -> Self {
        let d = model.shape.embed_dim;
        let z = || Matrix::zeros(d, d);
        ModelGrads {
            weights: (0..model.blocks.len()).map(|_| [z(), z(), z()]).collect(),
            embed: Matrix::zeros(model.embed.nrows(), d),
            head_w: Matrix::zeros(d, model.head_w.ncols()),
            head_b: Matrix::zeros(1, model.head_b.ncols()),
        }
    }
}

pub(crate) fn softmax_rows(s: &Matrix) -> Matrix {
    let mut out = s.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(z: &Matrix) -> Matrix {
    let mut out = z.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.apply(|v| *v -= lse);
    }
    out
}

impl ToyAttentionModel {
    pub fn init<R: Rng + ?Sized>(shape: ToyModelShape, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let d = shape.embed_dim;
        let ws = 1.0 / (d as f64).sqrt();
        let blocks = (0..shape.num_blocks)
            .map(|_| AttentionBlock {
                wq: gaussian(d, d, ws, rng),
                wk: gaussian(d, d, ws, rng),
                wv: gaussian(d, d, ws, rng),
            })
            .collect();
        Ok(ToyAttentionModel {
            shape,
            embed: gaussian(shape.vocab_size, d, 1.0, rng),
            blocks,
            head_w: gaussian(d, shape.num_classes(), ws, rng),
            head_b: Matrix::zeros(1, shape.num_classes()),
        })
    }

    pub fn refuse_class(&self) -> usize {
        self.shape.num_labels
    }

    pub fn num_classes(&self) -> usize {
        self.shape.num_classes()
    }

    pub fn dim(&self) -> usize {
        self.shape.embed_dim
    }

    /// Adapted weights in canonical order: block-major, then Q, K, V.
    pub fn layer_ids(&self) -> Vec<LayerId> {
        (0..self.blocks.len())
            .flat_map(|block| Projection::ALL.into_iter().map(move |proj| LayerId { block, proj }))
            .collect()
    }

    pub fn base_weights(&self) -> EffectiveWeights {
        self.blocks.iter().map(|b| [b.wq.clone(), b.wk.clone(), b.wv.clone()]).collect()
    }

    pub fn base_weight(&self, id: LayerId) -> Result<&Matrix> {
        let b = self
            .blocks
            .get(id.block)
            .ok_or_else(|| RcuError::Config(format!("adapter targets missing layer {id}")))?;
        Ok(match id.proj {
            Projection::Query => &b.wq,
            Projection::Key => &b.wk,
            Projection::Value => &b.wv,
        })
    }

    fn embed_tokens(&self, tokens: &[usize]) -> Result<Matrix> {
        if tokens.is_empty() {
            return Err(RcuError::domain("forward", "empty token sequence"));
        }
        let d = self.dim();
        let mut x = Matrix::zeros(tokens.len(), d);
        for (i, &t) in tokens.iter().enumerate() {
            if t >= self.embed.nrows() {
                return Err(RcuError::domain("forward", format!("token {t} outside vocabulary")));
            }
            x.row_mut(i).copy_from(&self.embed.row(t));
        }
        Ok(x)
    }

    /// Logits (1 x C) for one sequence together with the activations needed by [`Self::backward`].
    pub fn forward_cached(&self, ws: &EffectiveWeights, tokens: &[usize]) -> Result<ForwardCache> {
        if ws.len() != self.blocks.len() {
            return Err(RcuError::Config(format!("{} weight sets for {} blocks", ws.len(), self.blocks.len())));
        }
        let scale = 1.0 / (self.dim() as f64).sqrt();
        let mut x = self.embed_tokens(tokens)?;
        let mut caches = Vec::with_capacity(ws.len());
        for [wq, wk, wv] in ws {
            let q = &x * wq;
            let k = &x * wk;
            let v = &x * wv;
            let attn = softmax_rows(&((&q * k.transpose()) * scale));
            let y = &attn * &v;
            caches.push(BlockCache { x, q, k, v, attn });
            x = y;
        }
        let pooled = Matrix::from_fn(1, x.ncols(), |_, j| x.column(j).mean());
        let logits = &pooled * &self.head_w + &self.head_b;
        Ok(ForwardCache { blocks: caches, pooled, logits })
    }

    pub fn logits(&self, ws: &EffectiveWeights, tokens: &[usize]) -> Result<Matrix> {
        Ok(self.forward_cached(ws, tokens)?.logits)
    }

    /// Accumulates gradients of a scalar loss given `dL/dlogits` (1 x C) into `grads`.
    pub fn backward(
        &self,
        ws: &EffectiveWeights,
        tokens: &[usize],
        cache: &ForwardCache,
        g_logits: &Matrix,
        grads: &mut ModelGrads,
        with_base_params: bool,
    ) {
        let scale = 1.0 / (self.dim() as f64).sqrt();
        if with_base_params {
            grads.head_w += cache.pooled.transpose() * g_logits;
            grads.head_b += g_logits;
        }
        let g_pooled = g_logits * self.head_w.transpose();
        let len = tokens.len();
        let mut g_y = Matrix::from_fn(len, self.dim(), |_, j| g_pooled[(0, j)] / len as f64);
        for (bi, c) in cache.blocks.iter().enumerate().rev() {
            let [wq, wk, wv] = &ws[bi];
            let g_attn = &g_y * c.v.transpose();
            let g_v = c.attn.transpose() * &g_y;
            let mut g_s = c.attn.component_mul(&g_attn);
            for (mut row, arow) in g_s.row_iter_mut().zip(c.attn.row_iter()) {
                let dot = row.sum();
                for (g, a) in row.iter_mut().zip(arow.iter()) {
                    *g -= a * dot;
                }
            }
            // row.sum() above is sum(a * g_a); subtracting a * dot gives a (g_a - <a, g_a>)
            let g_q = (&g_s * &c.k) * scale;
            let g_k = (g_s.transpose() * &c.q) * scale;
            let xt = c.x.transpose();
            let gw = &mut grads.weights[bi];
            gw[0] += &xt * &g_q;
            gw[1] += &xt * &g_k;
            gw[2] += &xt * &g_v;
            if bi > 0 || with_base_params {
                g_y = g_q * wq.transpose() + g_k * wk.transpose() + g_v * wv.transpose();
            }
        }
        if with_base_params {
            for (i, &t) in tokens.iter().enumerate() {
                let mut row = grads.embed.row_mut(t);
                row += g_y.row(i);
            }
        }
    }

    /// Trainable base parameters in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![&mut self.embed];
        for b in &mut self.blocks {
            out.push(&mut b.wq);
            out.push(&mut b.wk);
            out.push(&mut b.wv);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// Same order as [`Self::params_mut`].
    pub fn grads_in_param_order(grads: ModelGrads) -> Vec<Matrix> {
        let mut out = vec![grads.embed];
        for [q, k, v] in grads.weights {
            out.extend([q, k, v]);
        }
        out.push(grads.head_w);
        out.push(grads.head_b);
        out
    }

    /// Hash over the bit patterns of every base parameter.
    pub fn checksum(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        let mut feed = |m: &Matrix| {
            m.shape().hash(&mut h);
            for v in m.iter() {
                v.to_bits().hash(&mut h);
            }
        };
        feed(&self.embed);
        for b in &self.blocks {
            feed(&b.wq);
            feed(&b.wk);
            feed(&b.wv);
        }
        feed(&self.head_w);
        feed(&self.head_b);
        h.finish()
    }

    pub fn to_archive(&self) -> Archive {
        let mut ar = Archive::new(serde_json::json!({ "kind": "toy_model", "shape": self.shape }));
        ar.push("embed", self.embed.clone());
        for (i, b) in self.blocks.iter().enumerate() {
            ar.push(format!("block{i}.wq"), b.wq.clone());
            ar.push(format!("block{i}.wk"), b.wk.clone());
            ar.push(format!("block{i}.wv"), b.wv.clone());
        }
        ar.push("head_w", self.head_w.clone());
        ar.push("head_b", self.head_b.clone());
        ar
    }

    pub fn from_archive(ar: &Archive) -> Result<Self> {
        if ar.meta.get("kind").and_then(|k| k.as_str()) != Some("toy_model") {
            return Err(RcuError::Format("not a toy model archive".into()));
        }
        let shape: ToyModelShape = serde_json::from_value(ar.meta["shape"].clone())?;
        shape.validate()?;
        let blocks = (0..shape.num_blocks)
            .map(|i| {
                Ok(AttentionBlock {
                    wq: ar.get(&format!("block{i}.wq"))?.clone(),
                    wk: ar.get(&format!("block{i}.wk"))?.clone(),
                    wv: ar.get(&format!("block{i}.wv"))?.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ToyAttentionModel {
            shape,
            embed: ar.get("embed")?.clone(),
            blocks,
            head_w: ar.get("head_w")?.clone(),
            head_b: ar.get("head_b")?.clone(),
        })
    }
}
