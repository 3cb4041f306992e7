use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use noisyfl::channel::{derive_rng, transmit, FlipMode, StreamTag};
use noisyfl::codec::QuantSpec;
use noisyfl::data::{partition_iid, synth_dataset, SynthSpec};
use noisyfl::nn::{init_model, local_train, Activation, MlpSpec, OptimState};
use noisyfl::par;

fn client_rounds(c: &mut Criterion) {
    let data = synth_dataset(&SynthSpec {
        num_classes: 10,
        dim: 64,
        per_class: 200,
        separation: 3.0,
        seed: 1,
    })
    .unwrap();
    let spec = MlpSpec::new(vec![64, 128, 64, 10], Activation::Relu).unwrap();
    let plan = partition_iid(data.len(), 8, 2).unwrap();
    let shards: Vec<_> = plan.assignment.iter().map(|idx| data.subset(idx)).collect();
    let w = init_model(&spec, 3);
    let client = |i: usize| {
        let mut optim = OptimState::new(0.01, 0.5, w.len()).unwrap();
        let mut rng = derive_rng(0, 0, i as u64, StreamTag::Sampling);
        let local = local_train(&w, &spec, &shards[i], 20, 32, &mut optim, &mut rng).unwrap();
        let mut up = derive_rng(0, 0, i as u64, noisyfl::channel::Link::Uplink);
        transmit(&local.update, QuantSpec::default(), 1e-2, FlipMode::Iid, &mut up).unwrap()
    };

    let mut group = c.benchmark_group("client_round");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("sequential", 8), |b| {
        b.iter(|| par::sequential::map_indexed(8, client))
    });
    group.bench_function(BenchmarkId::new("parallel", 8), |b| {
        b.iter(|| par::parallel::map_indexed(8, client))
    });
    group.finish();
}

fn lemma3_trials(c: &mut Criterion) {
    let quant = QuantSpec::new(16).unwrap();
    let trial = |t: usize| {
        let mut rng = derive_rng(7, 0, t as u64, StreamTag::Trial);
        let v: Vec<f64> = (0..1024).map(|j| (j as f64 / 512.0) - 1.0).collect();
        let out = transmit(&v, quant, 1e-3, FlipMode::Iid, &mut rng).unwrap();
        out.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    };

    let mut group = c.benchmark_group("lemma3_trials");
    group.bench_function(BenchmarkId::new("sequential", 500), |b| {
        b.iter(|| par::sequential::map_indexed(500, trial).iter().sum::<f64>())
    });
    group.bench_function(BenchmarkId::new("parallel", 500), |b| {
        b.iter(|| par::parallel::map_indexed(500, trial).iter().sum::<f64>())
    });
    group.finish();
}

criterion_group!(benches, client_rounds, lemma3_trials);
criterion_main!(benches);
