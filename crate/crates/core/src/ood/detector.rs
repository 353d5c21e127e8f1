use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::Encoder;
use super::losses::{cel_loss, mlm_loss, ua_loss};
use super::mixture::Mixture;
use super::stats::{Hypersphere, LayerStats, SphereFit};
use crate::data::Sample;
use crate::error::{RcuError, Result};
use crate::matrix::{Archive, Matrix};
use crate::toymodel::{Optimizer, OptimizerKind};

/// Per-layer scores `s(x)_l`.
pub type ScoreVector = Vec<f64>;

pub const DETECTOR_FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub feature_dim: usize,
    pub layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub mask_fraction: f64,
    pub key_momentum: f64,
    /// Weight of the negative max-cosine term in the layer score.
    pub gamma_w: f64,
    /// Fraction of the unlearn split used to fit the encoder, statistics and
    /// hypersphere; the remainder calibrates the mixture.
    pub split_alpha: f64,
    pub sphere: SphereFit,
    pub cov_eps_rel: f64,
    /// Include the alignment loss during encoder training.
    pub use_ua: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            feature_dim: 32,
            layers: 4,
            epochs: 8,
            batch_size: 32,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            mask_fraction: 0.15,
            key_momentum: 0.99,
            gamma_w: 1000.0,
            split_alpha: 0.5,
            sphere: SphereFit::Quantile { q: 0.95 },
            cov_eps_rel: 1e-4,
            use_ua: true,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(RcuError::Config(format!("detector: {m}")));
        if self.feature_dim == 0 || self.layers == 0 {
            return bad("feature_dim and layers must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return bad("mask_fraction must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.key_momentum) {
            return bad("key_momentum must lie in [0, 1)");
        }
        if !(self.gamma_w >= 0.0 && self.gamma_w.is_finite()) {
            return bad("gamma_w must be finite and nonnegative");
        }
        if !(self.split_alpha > 0.0 && self.split_alpha < 1.0) {
            return bad("split_alpha must lie in (0, 1)");
        }
        if !(self.cov_eps_rel > 0.0) {
            return bad("cov_eps_rel must be positive");
        }
        self.optimizer.validate()
    }
}

/// Scoring, boundary and calibration stages on precomputed per-layer features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDetector {
    pub stats: Vec<LayerStats>,
    /// Stored ID features per layer (one row per sample).
    pub reference: Vec<Matrix>,
    ref_unit: Vec<Matrix>,
    pub gamma_w: f64,
    pub sphere: Hypersphere,
    pub mixture: Mixture,
    /// Reference boundary distance `d0_H`.
    pub d0: f64,
}

fn unit_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for mut r in out.row_iter_mut() {
        let n = r.norm();
        if n > 0.0 {
            r /= n;
        }
    }
    out
}

fn check_layers(feats: &[Matrix], what: &'static str) -> Result<(usize, usize)> {
    let first = feats.first().ok_or_else(|| RcuError::shape(what, "no layers"))?;
    let (n, d) = first.shape();
    if feats.iter().any(|f| f.shape() != (n, d)) {
        return Err(RcuError::shape(what, "layers disagree in shape"));
    }
    Ok((n, d))
}

fn layer_row(feats: &[Matrix], i: usize) -> Vec<DVector<f64>> {
    feats.iter().map(|f| f.row(i).transpose()).collect()
}

impl FeatureDetector {
    /// `fit_feats[l]` holds the fitting split's layer-`l` features (rows are
    /// samples); `calib_feats` the held-out split used for the mixture and `d0`.
    pub fn fit(fit_feats: &[Matrix], calib_feats: &[Matrix], gamma_w: f64, sphere: SphereFit, cov_eps_rel: f64) -> Result<Self> {
        let (n, d) = check_layers(fit_feats, "fit_detector")?;
        let (_, dc) = check_layers(calib_feats, "fit_detector")?;
        if calib_feats.len() != fit_feats.len() || dc != d {
            return Err(RcuError::shape("fit_detector", "calibration features differ from fitting features"));
        }
        let stats = fit_feats.iter().map(|f| LayerStats::fit(f, cov_eps_rel)).collect::<Result<Vec<_>>>()?;
        let ref_unit = fit_feats.iter().map(unit_rows).collect();
        let mut det = FeatureDetector {
            stats,
            reference: fit_feats.to_vec(),
            ref_unit,
            gamma_w,
            sphere: Hypersphere { center: vec![], radius: 0.0 },
            mixture: Mixture { weights: [0.5, 0.5], means: [0.0, 0.0], stds: [1.0, 1.0] },
            d0: 0.0,
        };
        let scores = (0..n).map(|i| det.score_vector(&layer_row(fit_feats, i))).collect::<Result<Vec<_>>>()?;
        det.sphere = Hypersphere::fit(&scores, sphere)?;
        let nc = calib_feats[0].nrows();
        let dists = (0..nc).map(|i| det.boundary_distance(&layer_row(calib_feats, i))).collect::<Result<Vec<_>>>()?;
        det.mixture = Mixture::fit(&dists)?;
        det.d0 = dists.iter().sum::<f64>() / dists.len() as f64;
        Ok(det)
    }

    pub fn num_layers(&self) -> usize {
        self.stats.len()
    }

    pub fn score_vector(&self, feats: &[DVector<f64>]) -> Result<ScoreVector> {
        self.score_vector_with(feats, self.gamma_w)
    }

    /// `s_l = (f - mu_l)^T Sigma_l^{-1} (f - mu_l) - gamma_w * max_j cos(f, ref_j)`.
    pub fn score_vector_with(&self, feats: &[DVector<f64>], gamma_w: f64) -> Result<ScoreVector> {
        if feats.len() != self.stats.len() {
            return Err(RcuError::shape("score_vector", format!("{} layers, detector has {}", feats.len(), self.stats.len())));
        }
        let mut out = Vec::with_capacity(feats.len());
        for ((f, st), refs) in feats.iter().zip(&self.stats).zip(&self.ref_unit) {
            if refs.nrows() == 0 {
                return Err(RcuError::pre("score_vector", "empty cosine reference set"));
            }
            let maha = st.mahalanobis(f);
            let norm = f.norm();
            let max_cos = if norm == 0.0 {
                0.0
            } else {
                (refs * f).iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) / norm
            };
            let s = maha - gamma_w * max_cos;
            if !s.is_finite() {
                return Err(RcuError::Numeric { op: "score_vector", detail: "non-finite layer score".into() });
            }
            out.push(s);
        }
        Ok(out)
    }

    pub fn boundary_distance(&self, feats: &[DVector<f64>]) -> Result<f64> {
        Ok(self.sphere.boundary_distance(&self.score_vector(feats)?))
    }

    /// `1 - max(p, p') + min(p, p')` clamped to `[0, 1]`, with `p = P(d)` and
    /// `p' = P(2 d0 - d)`. The upper tail is taken through the survival function
    /// so that far-out distances keep their magnitude instead of rounding to 0.
    pub fn gamma_from_distance(&self, d: f64) -> f64 {
        let a = (d - self.d0).abs();
        let g = self.mixture.sf(self.d0 + a) + self.mixture.cdf(self.d0 - a);
        g.clamp(0.0, 1.0)
    }

    pub fn combined_score(&self, feats: &[DVector<f64>]) -> Result<f64> {
        Ok(self.gamma_from_distance(self.boundary_distance(feats)?))
    }

    fn rebuild(stats: Vec<LayerStats>, reference: Vec<Matrix>, gamma_w: f64, sphere: Hypersphere, mixture: Mixture, d0: f64) -> Self {
        let ref_unit = reference.iter().map(unit_rows).collect();
        FeatureDetector { stats, reference, ref_unit, gamma_w, sphere, mixture, d0 }
    }
}

/// Trained encoder pair with the fitted scoring stages.
#[derive(Debug, Clone, PartialEq)]
pub struct OodModel {
    pub encoder: Encoder,
    pub key_encoder: Encoder,
    pub detector: FeatureDetector,
}

/// Masks `max(1, round(p L))` distinct positions with the MASK token.
fn mask_view(tokens: &[usize], p: f64, mask: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<(usize, usize)>) {
    let k = ((p * tokens.len() as f64).round() as usize).clamp(1, tokens.len());
    let mut pos: Vec<usize> = rand::seq::index::sample(rng, tokens.len(), k).into_vec();
    pos.sort_unstable();
    let mut view = tokens.to_vec();
    let masked = pos
        .into_iter()
        .map(|i| {
            view[i] = mask;
            (i, tokens[i])
        })
        .collect();
    (view, masked)
}

fn stack_rows(rows: &[Vec<Matrix>], layer: usize) -> Matrix {
    let d = rows[0][layer].ncols();
    Matrix::from_fn(rows.len(), d, |i, j| rows[i][layer][(0, j)])
}

/// Trains the detector on one request's unlearn split and fits its scoring stages.
///
/// The split is shuffled with `seed`; the first `round(alpha n)` samples train
/// the encoder and fit statistics and hypersphere, the rest calibrate the mixture.
pub fn train_detector(samples: &[Sample], vocab_size: usize, cfg: &DetectorConfig, seed: u64) -> Result<OodModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_fit = (cfg.split_alpha * samples.len() as f64).round() as usize;
    let (fit_idx, calib_idx) = order.split_at(n_fit.min(samples.len()));
    if fit_idx.len() < 2 || calib_idx.is_empty() {
        return Err(RcuError::degenerate("train_detector", format!("{} samples cannot be split", samples.len())));
    }
    let mut encoder = Encoder::init(vocab_size, cfg.feature_dim, cfg.layers, &mut rng)?;
    let mut key = encoder.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &encoder.params())?;
    let mask = encoder.mask_token();
    let mut train: Vec<usize> = fit_idx.to_vec();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        train.shuffle(&mut rng);
        for batch in train.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let views: Vec<_> = batch.iter().map(|&i| mask_view(&samples[i].tokens, cfg.mask_fraction, mask, &mut rng)).collect();
            let caches = views.iter().map(|(v, _)| encoder.forward(v)).collect::<Result<Vec<_>>>()?;
            let key_feats = batch.iter().map(|&i| key.features(&samples[i].tokens)).collect::<Result<Vec<_>>>()?;
            let anchor_rows: Vec<Vec<Matrix>> = caches.iter().map(|c| c.features.clone()).collect();
            let anchors: Vec<Matrix> = (0..cfg.layers).map(|l| stack_rows(&anchor_rows, l)).collect();
            let keys: Vec<Matrix> = (0..cfg.layers).map(|l| stack_rows(&key_feats, l)).collect();
            let logits: Vec<Matrix> = caches.iter().map(|c| encoder.token_logits(c)).collect();
            let masks: Vec<_> = views.iter().map(|(_, m)| m.clone()).collect();

            let (l_cel, mut g_feat) = cel_loss(&anchors, &keys)?;
            let (l_mlm, g_logits) = mlm_loss(&logits, &masks)?;
            let mut total = l_cel + l_mlm;
            if cfg.use_ua {
                let (l_ua, g_ua) = ua_loss(&anchors)?;
                total += l_ua;
                for (g, u) in g_feat.iter_mut().zip(g_ua) {
                    *g += u;
                }
            }
            if !total.is_finite() {
                return Err(RcuError::Divergence { stage: "train_detector", step });
            }
            let mut grads = encoder.zero_grads();
            for (s, ((v, _), cache)) in views.iter().zip(&caches).enumerate() {
                let gf: Vec<Matrix> = g_feat.iter().map(|g| g.rows(s, 1).into_owned()).collect();
                encoder.backward(v, cache, &gf, Some(&g_logits[s]), &mut grads);
            }
            let grads = Encoder::grads_in_param_order(grads);
            opt.step(&mut encoder.params_mut(), &grads);
            key.ema_from(&encoder, cfg.key_momentum);
            step += 1;
        }
    }
    let feats_of = |idx: &[usize]| -> Result<Vec<Matrix>> {
        let rows = idx.iter().map(|&i| encoder.features(&samples[i].tokens)).collect::<Result<Vec<_>>>()?;
        Ok((0..cfg.layers).map(|l| stack_rows(&rows, l)).collect())
    };
    let detector = FeatureDetector::fit(&feats_of(fit_idx)?, &feats_of(calib_idx)?, cfg.gamma_w, cfg.sphere, cfg.cov_eps_rel)?;
    Ok(OodModel { encoder, key_encoder: key, detector })
}

fn encoder_to_archive(ar: &mut Archive, prefix: &str, e: &Encoder) {
    ar.push(format!("{prefix}.embed"), e.embed.clone());
    for (l, (w, b)) in e.layers.iter().enumerate() {
        ar.push(format!("{prefix}.layer{l}.w"), w.clone());
        ar.push(format!("{prefix}.layer{l}.b"), b.clone());
    }
    ar.push(format!("{prefix}.head_w"), e.head_w.clone());
    ar.push(format!("{prefix}.head_b"), e.head_b.clone());
}

fn encoder_from_archive(ar: &Archive, prefix: &str, layers: usize) -> Result<Encoder> {
    let layers = (0..layers)
        .map(|l| Ok((ar.get(&format!("{prefix}.layer{l}.w"))?.clone(), ar.get(&format!("{prefix}.layer{l}.b"))?.clone())))
        .collect::<Result<Vec<_>>>()?;
    Ok(Encoder {
        embed: ar.get(&format!("{prefix}.embed"))?.clone(),
        layers,
        head_w: ar.get(&format!("{prefix}.head_w"))?.clone(),
        head_b: ar.get(&format!("{prefix}.head_b"))?.clone(),
    })
}

impl OodModel {
    pub fn num_layers(&self) -> usize {
        self.detector.num_layers()
    }

    pub fn layer_features(&self, tokens: &[usize]) -> Result<Vec<DVector<f64>>> {
        Ok(self.encoder.features(tokens)?.into_iter().map(|f| DVector::from_iterator(f.len(), f.iter().copied())).collect())
    }

    pub fn score_vector(&self, tokens: &[usize]) -> Result<ScoreVector> {
        self.detector.score_vector(&self.layer_features(tokens)?)
    }

    pub fn score_vector_with(&self, tokens: &[usize], gamma_w: f64) -> Result<ScoreVector> {
        self.detector.score_vector_with(&self.layer_features(tokens)?, gamma_w)
    }

    pub fn boundary_distance(&self, tokens: &[usize]) -> Result<f64> {
        self.detector.boundary_distance(&self.layer_features(tokens)?)
    }

    /// `gamma` in `[0, 1]`; larger for inputs resembling the unlearn split.
    pub fn combined_score(&self, tokens: &[usize]) -> Result<f64> {
        self.detector.combined_score(&self.layer_features(tokens)?)
    }

    /// Scalars and parameters live in matrices so they round-trip bit-exactly.
    pub fn to_archive(&self) -> Archive {
        let det = &self.detector;
        let mut ar = Archive::new(serde_json::json!({
            "kind": "ood_model",
            "version": DETECTOR_FORMAT_VERSION,
            "layers": det.num_layers(),
        }));
        encoder_to_archive(&mut ar, "encoder", &self.encoder);
        encoder_to_archive(&mut ar, "key_encoder", &self.key_encoder);
        for (l, (st, r)) in det.stats.iter().zip(&det.reference).enumerate() {
            ar.push(format!("stats{l}.mean"), Matrix::from_column_slice(st.mean.len(), 1, st.mean.as_slice()));
            ar.push(format!("stats{l}.cov"), st.cov.clone());
            ar.push(format!("reference{l}"), r.clone());
        }
        ar.push("sphere.center", Matrix::from_row_slice(1, det.sphere.center.len(), &det.sphere.center));
        ar.push("scalars", Matrix::from_row_slice(1, 3, &[det.sphere.radius, det.d0, det.gamma_w]));
        let m = &det.mixture;
        ar.push("mixture", Matrix::from_row_slice(3, 2, &[m.weights[0], m.weights[1], m.means[0], m.means[1], m.stds[0], m.stds[1]]));
        ar
    }

    pub fn from_archive(ar: &Archive) -> Result<Self> {
        if ar.meta.get("kind").and_then(|k| k.as_str()) != Some("ood_model") {
            return Err(RcuError::Format("not a detector archive".into()));
        }
        let version = ar.meta.get("version").and_then(|v| v.as_u64());
        if version != Some(DETECTOR_FORMAT_VERSION) {
            return Err(RcuError::Format(format!("unsupported detector version {version:?}")));
        }
        let layers = ar.meta.get("layers").and_then(|v| v.as_u64()).ok_or_else(|| RcuError::Format("missing layer count".into()))? as usize;
        let mut stats = Vec::with_capacity(layers);
        let mut reference = Vec::with_capacity(layers);
        for l in 0..layers {
            let mean = ar.get(&format!("stats{l}.mean"))?;
            stats.push(LayerStats::from_parts(DVector::from_column_slice(mean.as_slice()), ar.get(&format!("stats{l}.cov"))?.clone())?);
            reference.push(ar.get(&format!("reference{l}"))?.clone());
        }
        let center = ar.get("sphere.center")?.iter().copied().collect();
        let sc = ar.get("scalars")?;
        let mx = ar.get("mixture")?;
        if sc.shape() != (1, 3) || mx.shape() != (3, 2) {
            return Err(RcuError::Format("bad detector scalar blocks".into()));
        }
        let mixture = Mixture { weights: [mx[(0, 0)], mx[(0, 1)]], means: [mx[(1, 0)], mx[(1, 1)]], stds: [mx[(2, 0)], mx[(2, 1)]] };
        let detector = FeatureDetector::rebuild(stats, reference, sc[(0, 2)], Hypersphere { center, radius: sc[(0, 0)] }, mixture, sc[(0, 1)]);
        Ok(OodModel {
            encoder: encoder_from_archive(ar, "encoder", layers)?,
            key_encoder: encoder_from_archive(ar, "key_encoder", layers)?,
            detector,
        })
    }
}
