use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adapters::{compose_layer, AdapterStack, Composition, RequestAdapters, UpdateKind};
use super::eval::evaluate_weights;
use super::loss::{ce_unlearn_loss, overall_loss, OverallLoss, TargetPolicy, UnlearnBatch};
use super::model::{log_softmax_rows, EffectiveWeights, ModelGrads, ToyAttentionModel};
use super::optim::{Optimizer, OptimizerKind};
use crate::data::Dataset;
use crate::error::{RcuError, Result};
use crate::lora::{compose, FrozenComposite, Lambdas, LoraPair, LossGrad, SkewMode};
use crate::matrix::Matrix;
use crate::par::{self, Exec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lambdas: Lambdas,
    pub rank: usize,
    /// Standard deviation of the Gaussian initialization of `A`.
    pub a_init_std: f64,
    pub skew_mode: SkewMode,
    pub target_policy: TargetPolicy,
    /// Salience weight at which the new adapters are applied while training.
    pub train_beta: f64,
    /// Salience weight at which earlier requests' adapters are applied while
    /// training a new one.
    pub prior_beta: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.lambdas.validate()?;
        self.optimizer.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.rank == 0 {
            return Err(RcuError::Config("epochs, batch_size and rank must be positive".into()));
        }
        if !(self.a_init_std > 0.0 && self.train_beta > 0.0 && self.prior_beta >= 0.0 && self.lr > 0.0) {
            return Err(RcuError::Config("a_init_std, train_beta and lr must be positive, prior_beta >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    #[serde(rename = "L_Sk")]
    pub l_sk: f64,
    #[serde(rename = "L_o")]
    pub l_o: f64,
    #[serde(rename = "L_CE")]
    pub l_ce: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
}

impl TrainingLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn sum_grads(model: &ToyAttentionModel, parts: Vec<ModelGrads>) -> ModelGrads {
    let mut total = ModelGrads::zeros(model);
    for g in parts {
        for (t, p) in total.weights.iter_mut().zip(g.weights) {
            for k in 0..3 {
                t[k] += &p[k];
            }
        }
        total.embed += g.embed;
        total.head_w += g.head_w;
        total.head_b += g.head_b;
    }
    total
}

/// Mean cross-entropy of `targets` and its gradients. `with_base_params`
/// also fills the embedding and head gradients.
fn ce_grads(
    model: &ToyAttentionModel,
    ws: &EffectiveWeights,
    inputs: &[&[usize]],
    targets: &[usize],
    with_base_params: bool,
    exec: Exec,
) -> Result<(Matrix, f64, ModelGrads)> {
    let caches = par::try_map_range(exec, inputs.len(), |i| model.forward_cached(ws, inputs[i]))?;
    let mut logprobs = Matrix::zeros(inputs.len(), model.num_classes());
    for (i, c) in caches.iter().enumerate() {
        logprobs.row_mut(i).copy_from(&log_softmax_rows(&c.logits).row(0));
    }
    let (loss, g_logits) = ce_unlearn_loss(&logprobs, targets)?;
    let parts = par::map_range(exec, inputs.len(), |i| {
        let mut g = ModelGrads::zeros(model);
        let gl = g_logits.rows(i, 1).into_owned();
        model.backward(ws, inputs[i], &caches[i], &gl, &mut g, with_base_params);
        g
    });
    Ok((logprobs, loss, sum_grads(model, parts)))
}

/// Fits every base parameter to the labels of `data`; returns the final training accuracy.
pub fn pretrain(model: &mut ToyAttentionModel, data: &Dataset, cfg: &PretrainConfig, seed: u64, exec: Exec) -> Result<f64> {
    if data.is_empty() {
        return Err(RcuError::domain("pretrain", "empty pretraining set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = {
        let params = model.params_mut();
        let refs: Vec<&Matrix> = params.iter().map(|p| &**p).collect();
        Optimizer::new(cfg.optimizer, cfg.lr, &refs)?
    };
    let mut step = 0;
    for _ in 0..cfg.epochs {
        for b in batches(data.len(), cfg.batch_size, &mut rng) {
            let inputs: Vec<&[usize]> = b.iter().map(|&i| data.samples[i].tokens.as_slice()).collect();
            let targets: Vec<usize> = b.iter().map(|&i| data.samples[i].label).collect();
            let ws = model.base_weights();
            let (_, loss, grads) = ce_grads(model, &ws, &inputs, &targets, true, exec)?;
            if !loss.is_finite() {
                return Err(RcuError::Divergence { stage: "pretrain", step });
            }
            let gs = ToyAttentionModel::grads_in_param_order(grads);
            opt.step(&mut model.params_mut(), &gs);
            step += 1;
        }
    }
    evaluate_weights(model, &model.base_weights(), data, exec)
}

/// Everything about a request's objective that stays fixed while its adapters train.
#[derive(Debug, Clone)]
pub struct RequestObjective {
    pub lambdas: Lambdas,
    pub mode: SkewMode,
    pub update: UpdateKind,
    pub frozen_prev: Option<Vec<FrozenComposite>>,
    pub train_beta: f64,
    /// Per adapted weight: the weight before the new adapter is applied.
    w_prior: Vec<Matrix>,
    /// Per adapted weight: `X` in `W' = W_prior + M X` (absent for the additive update).
    right: Vec<Option<Matrix>>,
}

impl RequestObjective {
    pub fn new(
        model: &ToyAttentionModel,
        prior: &AdapterStack,
        prior_beta: f64,
        train_beta: f64,
        frozen_prev: Option<Vec<FrozenComposite>>,
        lambdas: Lambdas,
        mode: SkewMode,
    ) -> Result<Self> {
        let betas = vec![prior_beta; prior.len()];
        let mut w_prior = Vec::new();
        let mut right = Vec::new();
        for (li, id) in model.layer_ids().into_iter().enumerate() {
            let w = model.base_weight(id)?;
            let wp = compose_layer(
                prior.composition,
                prior.update,
                w,
                (0..prior.len()).map(|r| &prior.composites(r)[li]),
                &betas,
            )?;
            right.push(match (prior.update, prior.composition) {
                (UpdateKind::Additive, _) => None,
                (UpdateKind::Multiplicative, Composition::Stacked) => Some(wp.clone()),
                (UpdateKind::Multiplicative, Composition::FromBase) => Some(w.clone()),
            });
            w_prior.push(wp);
        }
        Ok(RequestObjective { lambdas, mode, update: prior.update, frozen_prev, train_beta, w_prior, right })
    }

    /// Effective weights with the trainable pairs applied at `train_beta`.
    pub fn weights(&self, model: &ToyAttentionModel, pairs: &[LoraPair]) -> Result<EffectiveWeights> {
        let mut ws = model.base_weights();
        for (li, (id, pair)) in model.layer_ids().into_iter().zip(pairs).enumerate() {
            let m = self.mode.composite(compose(pair)?) * self.train_beta;
            ws[id.block][id.proj.index()] = match &self.right[li] {
                Some(x) => &self.w_prior[li] + m * x,
                None => &self.w_prior[li] + m,
            };
        }
        Ok(ws)
    }

    /// Loss and full gradients w.r.t. every `B` and `A`.
    pub fn evaluate(
        &self,
        model: &ToyAttentionModel,
        pairs: &[LoraPair],
        batch: &UnlearnBatch,
        exec: Exec,
    ) -> Result<(OverallLoss, Vec<LossGrad>)> {
        let ws = self.weights(model, pairs)?;
        let inputs: Vec<&[usize]> = batch.inputs.iter().map(Vec::as_slice).collect();
        let (logprobs, _, ce) = ce_grads(model, &ws, &inputs, &batch.y_prime, false, exec)?;
        let loss = overall_loss(pairs, self.frozen_prev.as_deref(), &logprobs, batch, self.lambdas, self.mode)?;
        let mut out = Vec::with_capacity(pairs.len());
        for (li, (id, pair)) in model.layer_ids().into_iter().zip(pairs).enumerate() {
            let gw = &ce.weights[id.block][id.proj.index()] * (self.lambdas.ce * self.train_beta);
            let gm = match &self.right[li] {
                Some(x) => gw * x.transpose(),
                None => gw,
            };
            let g = LossGrad::from_product_grad(0.0, pair, &self.mode.pull_back(gm));
            let reg = &loss.pair_grads[li];
            out.push(LossGrad { value: 0.0, grad_b: g.grad_b + &reg.grad_b, grad_a: g.grad_a + &reg.grad_a });
        }
        Ok((loss, out))
    }
}

/// Trains one request's adapters against the frozen base model.
pub fn train_request(
    model: &ToyAttentionModel,
    prior: &AdapterStack,
    frozen_prev: Option<Vec<FrozenComposite>>,
    data: &UnlearnBatch,
    cfg: &TrainConfig,
    seed: u64,
    exec: Exec,
) -> Result<(RequestAdapters, TrainingLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(RcuError::domain("train_request", "empty unlearning set"));
    }
    let objective = RequestObjective::new(model, prior, cfg.prior_beta, cfg.train_beta, frozen_prev, cfg.lambdas, cfg.skew_mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs: Vec<LoraPair> = model
        .layer_ids()
        .into_iter()
        .map(|id| LoraPair::init(model.dim(), cfg.rank, cfg.a_init_std, id, &mut rng))
        .collect();
    let mut opt = {
        let refs: Vec<&Matrix> = pairs.iter().flat_map(|p| [&p.b, &p.a]).collect();
        Optimizer::new(cfg.optimizer, cfg.lr, &refs)?
    };
    let mut log = TrainingLog::default();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        for b in batches(data.len(), cfg.batch_size, &mut rng) {
            let mb = UnlearnBatch {
                inputs: b.iter().map(|&i| data.inputs[i].clone()).collect(),
                y_prime: b.iter().map(|&i| data.y_prime[i]).collect(),
                request_index: data.request_index,
            };
            let (loss, grads) = objective.evaluate(model, &pairs, &mb, exec)?;
            if !loss.total.is_finite() {
                return Err(RcuError::Divergence { stage: "train_request", step });
            }
            log.entries.push(LogEntry { step, l_sk: loss.l_sk, l_o: loss.l_o, l_ce: loss.l_ce, total: loss.total });
            let gs: Vec<Matrix> = grads.into_iter().flat_map(|g| [g.grad_b, g.grad_a]).collect();
            let mut params: Vec<&mut Matrix> = pairs.iter_mut().flat_map(|p| [&mut p.b, &mut p.a]).collect();
            opt.step(&mut params, &gs);
            step += 1;
        }
    }
    Ok((RequestAdapters { request_index: data.request_index, pairs, mode: cfg.skew_mode }, log))
}
