use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rcu::harness::{make_suite, ExperimentConfig, DESK_CONFIG};
use rcu::lora::{Lambdas, LoraPair, SkewMode};
use rcu::ood::train_detector;
use rcu::par::{self, Exec};
use rcu::rotmath::gen::gaussian;
use rcu::toymodel::{evaluate_weights, AdapterStack, Composition, RequestObjective, TargetPolicy, ToyAttentionModel, UnlearnBatch, UpdateKind};

const STRATEGIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn benches(c: &mut Criterion) {
    let cfg = ExperimentConfig::from_toml(DESK_CONFIG).unwrap();
    let suite = make_suite(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = ToyAttentionModel::init(cfg.model.shape(), &mut rng).unwrap();
    let ws = model.base_weights();

    let mut g = c.benchmark_group("evaluate_retained");
    for (name, exec) in STRATEGIES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate_weights(&model, &ws, &suite.retained, exec).unwrap())
        });
    }
    g.finish();

    let rank = cfg.training.rank;
    let pairs: Vec<LoraPair> = model
        .layer_ids()
        .into_iter()
        .map(|id| LoraPair::new(gaussian(model.dim(), rank, 0.1, &mut rng), gaussian(rank, model.dim(), 0.1, &mut rng), id).unwrap())
        .collect();
    let batch = UnlearnBatch::from_dataset(&suite.unlearn_train[0], TargetPolicy::Refuse, cfg.model.num_labels, 1, &mut rng);
    let stack = AdapterStack::new(Composition::Stacked, UpdateKind::Multiplicative);
    let obj = RequestObjective::new(&model, &stack, 0.0, 0.45, None, Lambdas { skew: 0.1, ortho: 0.01, ce: 1.0 }, SkewMode::Soft).unwrap();
    let mut g = c.benchmark_group("adapter_gradients");
    for (name, exec) in STRATEGIES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| obj.evaluate(&model, &pairs, &batch, exec).unwrap()));
    }
    g.finish();

    let mut det_cfg = cfg.detector;
    det_cfg.epochs = 1;
    let det = train_detector(&suite.unlearn_train[0].samples, cfg.model.vocab_size, &det_cfg, 3).unwrap();
    let ds = &suite.utility[0];
    let mut g = c.benchmark_group("detector_scoring");
    for (name, exec) in STRATEGIES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::try_map_range(exec, ds.len(), |i| det.combined_score(&ds.samples[i].tokens)).unwrap())
        });
    }
    g.finish();
}

criterion_group! {
    name = parallel_vs_sequential;
    config = Criterion::default().sample_size(20);
    targets = benches
}
criterion_main!(parallel_vs_sequential);
