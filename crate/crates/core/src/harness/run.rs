use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{BetaMode, ExperimentConfig};
use super::tasks::{gen_tasks, TaskSuite};
use crate::compensator::{salience_weight_clamped, CompensatorConfig};
use crate::data::Dataset;
use crate::error::{RcuError, Result};
use crate::lora::{relative_rotation, skew_ratio};
use crate::matrix::frobenius_sq;
use crate::ood::{train_detector, OodModel};
use crate::par::{self, Exec};
use crate::toymodel::{
    evaluate_per_input, evaluate_weights, pretrain, train_request, AdapterStack, RequestAdapters, ToyAttentionModel,
    TrainingLog, UnlearnBatch,
};

/// Independent stream seeds derived from the experiment seed.
pub fn sub_seed(seed: u64, stage: u64, index: u64) -> u64 {
    let mut z = seed ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STAGE_TASKS: u64 = 1;
const STAGE_INIT: u64 = 2;
const STAGE_PRETRAIN: u64 = 3;
const STAGE_DETECTOR: u64 = 4;
const STAGE_TARGETS: u64 = 5;
const STAGE_ADAPTERS: u64 = 6;

/// Accuracies in `[0, 1]`. `su` and `du` average over every request seen so far.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub su: f64,
    pub du: f64,
    pub rd: f64,
    pub utility_1: f64,
    pub utility_2: f64,
}

impl Metrics {
    pub fn as_array(&self) -> [f64; 5] {
        [self.su, self.du, self.rd, self.utility_1, self.utility_2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeSummary {
    pub max_abs: f64,
    /// Per adapted weight.
    pub skew_ratio: Vec<f64>,
    pub frobenius: Vec<f64>,
}

/// Salience weights applied to one evaluation set, one entry per request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaTrace {
    pub dataset: String,
    pub mean: Vec<f64>,
    /// Fraction of inputs with a nonzero weight.
    pub active: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub request_index: usize,
    pub ablation: String,
    pub detector_snapshot: String,
    pub metrics: Metrics,
    /// Accuracy on each earlier request's train and test unlearn sets after this request.
    pub su_per_request: Vec<f64>,
    pub du_per_request: Vec<f64>,
    /// R.D. with every salience weight forced to zero.
    pub rd_beta0: f64,
    pub composite: CompositeSummary,
    /// `||dR BA_{t-1}||_F` at initialization and after training (zero for the first request).
    pub isolation_init: f64,
    pub isolation_final: f64,
    pub beta_trace: Vec<BetaTrace>,
}

/// Append-only record list; written records cannot be changed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecordLog {
    records: Vec<RequestRecord>,
}

impl RecordLog {
    pub fn push(&mut self, record: RequestRecord) -> Result<()> {
        if record.request_index != self.records.len() + 1 {
            return Err(RcuError::RecordImmutable(record.request_index));
        }
        if record.metrics.as_array().iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(RcuError::domain("record", "metrics must lie in [0, 1]"));
        }
        self.records.push(record);
        Ok(())
    }

    /// Always rejected once `request_index` has been written.
    pub fn replace(&mut self, record: RequestRecord) -> Result<()> {
        if record.request_index <= self.records.len() {
            return Err(RcuError::RecordImmutable(record.request_index));
        }
        self.push(record)
    }

    pub fn records(&self) -> &[RequestRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Base-model accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseMetrics {
    pub su: Vec<f64>,
    pub du: Vec<f64>,
    pub rd: f64,
    pub utility_1: f64,
    pub utility_2: f64,
}

pub struct RunOutput {
    pub suite: TaskSuite,
    pub model: ToyAttentionModel,
    pub base: BaseMetrics,
    pub stack: AdapterStack,
    pub detectors: Vec<OodModel>,
    pub logs: Vec<TrainingLog>,
    pub records: RecordLog,
}

pub fn make_suite(cfg: &ExperimentConfig) -> Result<TaskSuite> {
    gen_tasks(sub_seed(cfg.seed, STAGE_TASKS, 0), &cfg.tasks, cfg.model.vocab_size, cfg.model.num_labels)
}

/// Initializes and pretrains the base classifier on the suite's pretraining set.
pub fn pretrain_base(cfg: &ExperimentConfig, suite: &TaskSuite, exec: Exec) -> Result<(ToyAttentionModel, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, STAGE_INIT, 0));
    let mut model = ToyAttentionModel::init(cfg.model.shape(), &mut rng)?;
    let acc = pretrain(&mut model, &suite.pretrain, &cfg.model.pretrain, sub_seed(cfg.seed, STAGE_PRETRAIN, 0), exec)?;
    Ok((model, acc))
}

/// Generates tasks, pretrains, then runs every request.
pub fn run_continual(cfg: &ExperimentConfig, exec: Exec) -> Result<RunOutput> {
    let suite = make_suite(cfg)?;
    let (model, _) = pretrain_base(cfg, &suite, exec)?;
    run_continual_with(cfg, suite, model, exec)
}

fn eval_sets(suite: &TaskSuite) -> Vec<&Dataset> {
    let mut v: Vec<&Dataset> = Vec::new();
    v.extend(suite.unlearn_train.iter());
    v.extend(suite.unlearn_test.iter());
    v.push(&suite.retained);
    v.push(&suite.utility[0]);
    v.push(&suite.utility[1]);
    v
}

fn snapshot_id(t: usize, det: &OodModel) -> String {
    let mut h = DefaultHasher::new();
    det.to_archive().to_bytes().hash(&mut h);
    format!("det{}-{:016x}", t + 1, h.finish())
}

fn isolation(stack_prev: Option<&RequestAdapters>, adapters: &RequestAdapters) -> Result<f64> {
    let Some(prev) = stack_prev else { return Ok(0.0) };
    let mut total = 0.0;
    for (cur, old) in adapters.composites()?.iter().zip(prev.composites()?) {
        let rel = relative_rotation(cur, &old)?;
        total += frobenius_sq(&(rel.approx * &old));
    }
    Ok(total.sqrt())
}

/// Runs every request on a pretrained base model.
pub fn run_continual_with(cfg: &ExperimentConfig, suite: TaskSuite, model: ToyAttentionModel, exec: Exec) -> Result<RunOutput> {
    cfg.validate()?;
    let comp = cfg.compensator.resolve()?;
    let training = cfg.effective_training();
    let det_cfg = cfg.effective_detector();
    let t_total = cfg.tasks.num_requests;
    let sets = eval_sets(&suite);
    let base_ws = model.base_weights();
    let base_acc = sets.iter().map(|ds| evaluate_weights(&model, &base_ws, ds, exec)).collect::<Result<Vec<_>>>()?;
    let base = BaseMetrics {
        su: base_acc[..t_total].to_vec(),
        du: base_acc[t_total..2 * t_total].to_vec(),
        rd: base_acc[2 * t_total],
        utility_1: base_acc[2 * t_total + 1],
        utility_2: base_acc[2 * t_total + 2],
    };

    let mut stack = AdapterStack::new(cfg.composition, cfg.update_kind());
    let mut detectors: Vec<OodModel> = Vec::new();
    let mut logs = Vec::new();
    let mut records = RecordLog::default();
    // gammas[set][request][sample], filled as detectors arrive
    let mut gammas: Vec<Vec<Vec<f64>>> = vec![Vec::new(); sets.len()];

    for t in 0..t_total {
        let at = |stage: &'static str| move |e: RcuError| e.at_stage(t + 1, stage);
        let train_set = &suite.unlearn_train[t];
        let det = train_detector(&train_set.samples, cfg.model.vocab_size, &det_cfg, sub_seed(cfg.seed, STAGE_DETECTOR, t as u64))
            .map_err(at("detector"))?;
        for (si, ds) in sets.iter().enumerate() {
            let g = par::try_map_range(exec, ds.len(), |i| det.combined_score(&ds.samples[i].tokens)).map_err(at("scoring"))?;
            gammas[si].push(g);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, STAGE_TARGETS, t as u64));
        let batch = UnlearnBatch::from_dataset(train_set, training.target_policy, cfg.model.num_labels, t + 1, &mut rng);
        let frozen_prev = match stack.requests().last() {
            Some(prev) => Some(prev.freeze().map_err(at("freeze"))?),
            None => None,
        };
        let (adapters, log) = train_request(&model, &stack, frozen_prev, &batch, &training, sub_seed(cfg.seed, STAGE_ADAPTERS, t as u64), exec)
            .map_err(at("adapters"))?;

        let isolation_init = if stack.is_empty() { 0.0 } else { log.entries.first().map_or(0.0, |e| e.l_o.sqrt()) };
        let isolation_final = isolation(stack.requests().last(), &adapters).map_err(at("isolation"))?;
        let composites = adapters.composites().map_err(at("freeze"))?;
        let composite = CompositeSummary {
            max_abs: composites.iter().map(|c| c.abs().max()).fold(0.0, f64::max),
            skew_ratio: composites.iter().map(skew_ratio).collect(),
            frobenius: composites.iter().map(|c| c.norm()).collect(),
        };
        stack.push(&model, adapters).map_err(at("freeze"))?;
        let snapshot = snapshot_id(t, &det);
        detectors.push(det);
        logs.push(log);

        let mut acc = Vec::with_capacity(sets.len());
        let mut trace = Vec::with_capacity(sets.len());
        for (si, ds) in sets.iter().enumerate() {
            let betas = resolve_betas(&gammas[si], cfg.beta_mode, &comp).map_err(at("compensator"))?;
            acc.push(evaluate_per_input(&model, &stack, &betas, ds, exec).map_err(at("evaluate"))?);
            let n = betas.len() as f64;
            trace.push(BetaTrace {
                dataset: ds.name.clone(),
                mean: (0..=t).map(|r| betas.iter().map(|b| b[r]).sum::<f64>() / n).collect(),
                active: (0..=t).map(|r| betas.iter().filter(|b| b[r] > 0.0).count() as f64 / n).collect(),
            });
        }
        let zeros = vec![vec![0.0; t + 1]; suite.retained.len()];
        let rd_beta0 = evaluate_per_input(&model, &stack, &zeros, &suite.retained, exec).map_err(at("evaluate"))?;
        let su_per_request = acc[..=t].to_vec();
        let du_per_request = acc[t_total..=t_total + t].to_vec();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let record = RequestRecord {
            request_index: t + 1,
            ablation: cfg.ablations.label(),
            detector_snapshot: snapshot,
            metrics: Metrics {
                su: mean(&su_per_request),
                du: mean(&du_per_request),
                rd: acc[2 * t_total],
                utility_1: acc[2 * t_total + 1],
                utility_2: acc[2 * t_total + 2],
            },
            su_per_request,
            du_per_request,
            rd_beta0,
            composite,
            isolation_init,
            isolation_final,
            beta_trace: trace,
        };
        records.push(record).map_err(at("record"))?;
    }
    Ok(RunOutput { suite, model, base, stack, detectors, logs, records })
}

/// Per-sample salience weights for every stored request.
pub fn resolve_betas(gammas: &[Vec<f64>], mode: BetaMode, comp: &CompensatorConfig) -> Result<Vec<Vec<f64>>> {
    let n = gammas.first().map_or(0, Vec::len);
    match mode {
        BetaMode::PerInput => (0..n)
            .map(|i| gammas.iter().map(|g| salience_weight_clamped(g[i], comp)).collect())
            .collect(),
        BetaMode::DatasetMean => {
            let per_req = gammas
                .iter()
                .map(|g| salience_weight_clamped(g.iter().sum::<f64>() / g.len().max(1) as f64, comp))
                .collect::<Result<Vec<_>>>()?;
            Ok(vec![per_req; n])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub beta: f64,
    pub accuracy: Vec<f64>,
}

/// Accuracy-vs-beta series for one request, one column per dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub request_index: usize,
    pub datasets: Vec<String>,
    pub points: Vec<SweepPoint>,
}

/// Applies request `request` (0-based) alone at each grid weight; other requests stay at zero.
pub fn beta_sweep(
    model: &ToyAttentionModel,
    stack: &AdapterStack,
    request: usize,
    datasets: &[&Dataset],
    grid: &[f64],
    exec: Exec,
) -> Result<SweepCurve> {
    if request >= stack.len() {
        return Err(RcuError::pre("beta_sweep", format!("request {} not trained", request + 1)));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &beta in grid {
        let mut betas = vec![0.0; stack.len()];
        betas[request] = beta;
        let ws = stack.effective_weights(model, &betas)?;
        let accuracy = datasets.iter().map(|ds| evaluate_weights(model, &ws, ds, exec)).collect::<Result<Vec<_>>>()?;
        points.push(SweepPoint { beta, accuracy });
    }
    Ok(SweepCurve { request_index: request + 1, datasets: datasets.iter().map(|d| d.name.clone()).collect(), points })
}

/// Shape summary of one accuracy-vs-beta series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepShape {
    /// Largest increase between any grid point and a later one.
    pub max_rise: f64,
    /// Last grid weight whose accuracy is within `tol` of the first point.
    pub flat_until: f64,
    /// First grid weight from which accuracy stays within `tol` of the final point.
    pub plateau_from: f64,
    /// Accuracy range over the top 20% of the grid.
    pub tail_range: f64,
    pub total_drop: f64,
}

impl SweepShape {
    pub fn analyze(betas: &[f64], acc: &[f64], tol: f64) -> Result<Self> {
        if betas.len() != acc.len() || betas.len() < 3 {
            return Err(RcuError::shape("sweep_shape", "need at least three matching points"));
        }
        let mut max_rise: f64 = 0.0;
        let mut best_so_far = f64::INFINITY;
        for &a in acc {
            best_so_far = best_so_far.min(a);
            max_rise = max_rise.max(a - best_so_far);
        }
        let first = acc[0];
        let last = *acc.last().expect("nonempty");
        let flat = acc.iter().take_while(|&&a| (a - first).abs() <= tol).count();
        let plateau = acc.iter().rposition(|&a| (a - last).abs() > tol).map_or(0, |i| i + 1);
        let tail = &acc[acc.len() - (acc.len() as f64 * 0.2).ceil() as usize..];
        let tail_range = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - tail.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(SweepShape { max_rise, flat_until: betas[flat - 1], plateau_from: betas[plateau], tail_range, total_drop: first - last })
    }

    /// Non-increasing within `tol`, flat start, falling middle and plateaued tail.
    pub fn is_flat_fall_plateau(&self, tol: f64, plateau_tol: f64) -> bool {
        self.max_rise <= tol
            && self.flat_until > 0.0
            && self.total_drop > 2.0 * tol
            && self.plateau_from > self.flat_until
            && self.tail_range < plateau_tol
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sub_seeds_differ() {
        let a = sub_seed(1, STAGE_DETECTOR, 0);
        assert_ne!(a, sub_seed(1, STAGE_DETECTOR, 1));
        assert_ne!(a, sub_seed(1, STAGE_ADAPTERS, 0));
        assert_ne!(a, sub_seed(2, STAGE_DETECTOR, 0));
        assert_eq!(a, sub_seed(1, STAGE_DETECTOR, 0));
    }

    fn record(t: usize) -> RequestRecord {
        RequestRecord {
            request_index: t,
            ablation: "full".into(),
            detector_snapshot: "x".into(),
            metrics: Metrics { su: 0.1, du: 0.1, rd: 0.9, utility_1: 0.9, utility_2: 0.9 },
            su_per_request: vec![0.1],
            du_per_request: vec![0.1],
            rd_beta0: 0.9,
            composite: CompositeSummary { max_abs: 0.0, skew_ratio: vec![], frobenius: vec![] },
            isolation_init: 0.0,
            isolation_final: 0.0,
            beta_trace: vec![],
        }
    }

    #[test]
    fn record_log_is_append_only() {
        let mut log = RecordLog::default();
        log.push(record(1)).unwrap();
        log.push(record(2)).unwrap();
        assert!(matches!(log.replace(record(1)), Err(RcuError::RecordImmutable(1))));
        assert!(matches!(log.push(record(2)), Err(RcuError::RecordImmutable(2))));
        assert!(log.push(record(5)).is_err());
        let mut bad = record(3);
        bad.metrics.rd = 1.5;
        assert!(log.push(bad).is_err());
        assert_eq!(log.len(), 2);
    }

    #[test]
    fn sweep_shape_classification() {
        let betas: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).collect();
        let good: Vec<f64> = betas.iter().map(|&b| if b < 0.15 { 0.98 } else if b < 0.4 { 0.98 - (b - 0.1) * 3.0 } else { 0.02 }).collect();
        let s = SweepShape::analyze(&betas, &good, 0.02).unwrap();
        assert!(s.is_flat_fall_plateau(0.02, 0.01), "{s:?}");
        let bumpy: Vec<f64> = good.iter().enumerate().map(|(i, a)| if i == 10 { a + 0.3 } else { *a }).collect();
        assert!(!SweepShape::analyze(&betas, &bumpy, 0.02).unwrap().is_flat_fall_plateau(0.02, 0.01));
        let flat = vec![0.9; 21];
        assert!(!SweepShape::analyze(&betas, &flat, 0.02).unwrap().is_flat_fall_plateau(0.02, 0.01));
    }

    #[test]
    fn dataset_mean_betas_are_shared() {
        let comp = CompensatorConfig::qa_preset();
        let gammas = vec![vec![1.0, 0.0, 0.5], vec![0.0, 0.0, 0.0]];
        let per = resolve_betas(&gammas, BetaMode::PerInput, &comp).unwrap();
        assert_eq!(per[0], vec![0.45, 0.0]);
        assert_eq!(per[1], vec![0.0, 0.0]);
        let mean = resolve_betas(&gammas, BetaMode::DatasetMean, &comp).unwrap();
        assert!(mean.iter().all(|b| b == &vec![0.45, 0.0]));
    }
}
