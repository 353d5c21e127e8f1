use rand::Rng;

use crate::error::{RcuError, Result};
use crate::matrix::Matrix;
use crate::rotmath::gen::gaussian;

/// Token encoder with `L` mean-mixing tanh layers and a token-prediction head.
///
/// Layer `l` computes `H_l = tanh((H_{l-1} + 1 mean(H_{l-1})) W_l + b_l)`; its
/// feature is the row mean of `H_l`. Token id `vocab_size` is the MASK token.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub embed: Matrix,
    pub layers: Vec<(Matrix, Matrix)>,
    pub head_w: Matrix,
    pub head_b: Matrix,
}

pub struct EncoderCache {
    /// `H_0 .. H_L`.
    hs: Vec<Matrix>,
    zs: Vec<Matrix>,
    pub features: Vec<Matrix>,
}

impl EncoderCache {
    pub fn last_hidden(&self) -> &Matrix {
        self.hs.last().expect("encoder has layers")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub embed: Matrix,
    pub layers: Vec<(Matrix, Matrix)>,
    pub head_w: Matrix,
    pub head_b: Matrix,
}

fn row_mean(m: &Matrix) -> Matrix {
    Matrix::from_fn(1, m.ncols(), |_, j| m.column(j).mean())
}

fn broadcast_add(m: &Matrix, row: &Matrix) -> Matrix {
    let mut out = m.clone();
    for mut r in out.row_iter_mut() {
        r += row;
    }
    out
}

impl Encoder {
    pub fn init<R: Rng + ?Sized>(vocab_size: usize, dim: usize, num_layers: usize, rng: &mut R) -> Result<Self> {
        if vocab_size == 0 || dim == 0 || num_layers == 0 {
            return Err(RcuError::Config("encoder sizes must be positive".into()));
        }
        let ws = 1.0 / (dim as f64).sqrt();
        Ok(Encoder {
            embed: gaussian(vocab_size + 1, dim, 1.0, rng),
            layers: (0..num_layers).map(|_| (gaussian(dim, dim, ws, rng), Matrix::zeros(1, dim))).collect(),
            head_w: gaussian(dim, vocab_size, ws, rng),
            head_b: Matrix::zeros(1, vocab_size),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.head_w.ncols()
    }

    pub fn mask_token(&self) -> usize {
        self.vocab_size()
    }

    pub fn dim(&self) -> usize {
        self.embed.ncols()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<EncoderCache> {
        if tokens.is_empty() {
            return Err(RcuError::domain("encoder", "empty token sequence"));
        }
        let mut h = Matrix::zeros(tokens.len(), self.dim());
        for (i, &t) in tokens.iter().enumerate() {
            if t >= self.embed.nrows() {
                return Err(RcuError::domain("encoder", format!("token {t} outside vocabulary")));
            }
            h.row_mut(i).copy_from(&self.embed.row(t));
        }
        let mut hs = vec![h];
        let mut zs = Vec::with_capacity(self.layers.len());
        let mut features = Vec::with_capacity(self.layers.len());
        for (w, b) in &self.layers {
            let prev = hs.last().expect("nonempty");
            let z = broadcast_add(prev, &row_mean(prev));
            let next = broadcast_add(&(&z * w), b).map(f64::tanh);
            features.push(row_mean(&next));
            zs.push(z);
            hs.push(next);
        }
        Ok(EncoderCache { hs, zs, features })
    }

    /// Per-layer features only.
    pub fn features(&self, tokens: &[usize]) -> Result<Vec<Matrix>> {
        Ok(self.forward(tokens)?.features)
    }

    pub fn token_logits(&self, cache: &EncoderCache) -> Matrix {
        broadcast_add(&(cache.last_hidden() * &self.head_w), &self.head_b)
    }

    pub fn zero_grads(&self) -> EncoderGrads {
        let z = |m: &Matrix| Matrix::zeros(m.nrows(), m.ncols());
        EncoderGrads {
            embed: z(&self.embed),
            layers: self.layers.iter().map(|(w, b)| (z(w), z(b))).collect(),
            head_w: z(&self.head_w),
            head_b: z(&self.head_b),
        }
    }

    /// Accumulates gradients given `dL/df_l` (each 1 x d) and optionally
    /// `dL/d(token logits)`.
    pub fn backward(
        &self,
        tokens: &[usize],
        cache: &EncoderCache,
        g_features: &[Matrix],
        g_token_logits: Option<&Matrix>,
        grads: &mut EncoderGrads,
    ) {
        let n = tokens.len() as f64;
        let last = self.layers.len();
        let mut g_h = Matrix::zeros(tokens.len(), self.dim());
        if let Some(gl) = g_token_logits {
            grads.head_w += cache.last_hidden().transpose() * gl;
            for r in gl.row_iter() {
                grads.head_b += r;
            }
            g_h += gl * self.head_w.transpose();
        }
        for l in (0..last).rev() {
            if let Some(gf) = g_features.get(l) {
                let share = gf / n;
                for mut r in g_h.row_iter_mut() {
                    r += &share;
                }
            }
            let h = &cache.hs[l + 1];
            let g_pre = g_h.zip_map(h, |g, y| g * (1.0 - y * y));
            let (w, _) = &self.layers[l];
            grads.layers[l].0 += cache.zs[l].transpose() * &g_pre;
            for r in g_pre.row_iter() {
                grads.layers[l].1 += r;
            }
            let g_z = g_pre * w.transpose();
            let col = row_mean(&g_z);
            g_h = broadcast_add(&g_z, &col);
        }
        for (i, &t) in tokens.iter().enumerate() {
            let mut row = grads.embed.row_mut(t);
            row += g_h.row(i);
        }
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.embed];
        for (w, b) in &self.layers {
            out.push(w);
            out.push(b);
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embed];
        for (w, b) in &mut self.layers {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn grads_in_param_order(g: EncoderGrads) -> Vec<Matrix> {
        let mut out = vec![g.embed];
        for (w, b) in g.layers {
            out.push(w);
            out.push(b);
        }
        out.push(g.head_w);
        out.push(g.head_b);
        out
    }

    /// `self = momentum * self + (1 - momentum) * online`.
    pub fn ema_from(&mut self, online: &Encoder, momentum: f64) {
        for (k, o) in self.params_mut().into_iter().zip(online.params()) {
            k.zip_apply(o, |ki, oi| *ki = momentum * *ki + (1.0 - momentum) * oi);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::gradcheck::{flatten, grad_check, unflatten, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::init(7, 5, 3, &mut rng).unwrap();
        let tokens = vec![0, 3, 7, 2, 2];
        let wf: Vec<Matrix> = (0..3).map(|_| gaussian(1, 5, 1.0, &mut rng)).collect();
        let wt = gaussian(5, 7, 1.0, &mut rng);
        let loss = |e: &Encoder| {
            let c = e.forward(&tokens).unwrap();
            let f: f64 = c.features.iter().zip(&wf).map(|(a, b)| a.dot(b)).sum();
            f + e.token_logits(&c).dot(&wt)
        };
        let cache = enc.forward(&tokens).unwrap();
        let mut g = enc.zero_grads();
        enc.backward(&tokens, &cache, &wf, Some(&wt), &mut g);
        let analytic = flatten(&Encoder::grads_in_param_order(g).iter().collect::<Vec<_>>());
        let like: Vec<Matrix> = enc.params().into_iter().cloned().collect();
        let like_refs: Vec<&Matrix> = like.iter().collect();
        let mut probe = enc.clone();
        let f = |x: &[f64]| {
            for (p, v) in probe.params_mut().into_iter().zip(unflatten(x, &like_refs)) {
                *p = v;
            }
            loss(&probe)
        };
        let r = grad_check(f, &flatten(&like_refs), &analytic, GradCheckConfig { coords: 500, ..Default::default() }).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn features_are_bounded_and_ema_interpolates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Encoder::init(5, 4, 2, &mut rng).unwrap();
        let b = Encoder::init(5, 4, 2, &mut rng).unwrap();
        let f = a.features(&[0, 1, 5]).unwrap();
        assert_eq!(f.len(), 2);
        assert!(f.iter().all(|x| x.iter().all(|v| v.abs() < 1.0)));
        let mut k = a.clone();
        k.ema_from(&b, 0.99);
        let expect = &a.embed * 0.99 + &b.embed * 0.01;
        assert!((k.embed - expect).abs().max() < 1e-15);
        assert!(a.forward(&[9]).is_err());
    }
}
