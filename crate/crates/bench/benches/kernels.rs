use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use linear_moe::attention::softmax_attention_parallel;
use linear_moe::lsm::{lsm_forward_chunked, lsm_forward_sequential, LsmInputs};
use linear_moe::model::{model_forward, pack_sequences};
use linear_moe::moe::{moe_forward, MoeConfig, MoeLayer};
use linear_moe::{build_model, Instance, LsmSpec, ModelConfig, Rng, Tensor};

fn lsm_forms(c: &mut Criterion) {
    let mut g = c.benchmark_group("lsm");
    let mut rng = Rng::seed(0);
    for inst in [Instance::Bla, Instance::Gla, Instance::Mamba2, Instance::DeltaNet] {
        let spec = LsmSpec::new(inst, 16, 16);
        let x = LsmInputs::random(&spec, 256, &mut rng);
        g.throughput(Throughput::Elements(256));
        g.bench_with_input(BenchmarkId::new("chunked", inst), &x, |b, x| b.iter(|| lsm_forward_chunked(x, &spec, 64)));
        g.bench_with_input(BenchmarkId::new("sequential", inst), &x, |b, x| b.iter(|| lsm_forward_sequential(x, &spec)));
    }
    g.finish();
}

fn length_scaling(c: &mut Criterion) {
    let mut g = c.benchmark_group("length");
    let mut rng = Rng::seed(1);
    let spec = LsmSpec::new(Instance::Gla, 16, 16);
    for n in [256, 512, 1024] {
        let x = LsmInputs::random(&spec, n, &mut rng);
        let qkv = [0, 1, 2].map(|_| Tensor::randn(&[n, 16], 1.0, &mut rng));
        g.throughput(Throughput::Elements(n as u64));
        g.bench_with_input(BenchmarkId::new("gla", n), &x, |b, x| b.iter(|| lsm_forward_chunked(x, &spec, 64)));
        g.bench_with_input(BenchmarkId::new("attention", n), &qkv, |b, [q, k, v]| {
            b.iter(|| softmax_attention_parallel(q, k, v, true))
        });
    }
    g.finish();
}

fn moe_layer(c: &mut Criterion) {
    let mut rng = Rng::seed(2);
    let cfg = MoeConfig { num_experts: 8, top_k: 2, hidden: 32, ffn_dim: 32, aux_loss_weight: 0.01 };
    let layer = MoeLayer::init(&cfg, &mut rng).unwrap();
    let x = Tensor::uniform(&[128, 32], -1.0, 1.0, &mut rng);
    c.bench_function("moe/top2_of_8", |b| b.iter(|| moe_forward(&x, &layer, &cfg)));
}

fn model(c: &mut Criterion) {
    let mut rng = Rng::seed(3);
    let cfg = ModelConfig::preset("tiny", Instance::Gla).unwrap().with_pattern("LN".parse().unwrap());
    let m = build_model(&cfg, &mut rng).unwrap();
    let batch = pack_sequences(&[(0..64).map(|_| rng.below(cfg.vocab_size)).collect()]).unwrap();
    c.bench_function("model/tiny_ln_64", |b| b.iter(|| model_forward(&m, &cfg, &batch)));
}

criterion_group!(benches, lsm_forms, length_scaling, moe_layer, model);
criterion_main!(benches);
