use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use leaf_core::eaf::BankConfig;
use leaf_core::experiment::prepare_split;
use leaf_core::partition::partition_rows;
use leaf_core::tape::softmax_in_place;
use leaf_core::{
    ambiguous_consistency_loss, train, ExpertBank, ExpertKind, LeafModel, ModelSpec, ParamStore,
    RunConfig, Tape, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

fn softmax(mut t: Tensor) -> Tensor {
    for r in 0..t.rows() {
        softmax_in_place(t.row_mut(r));
    }
    t
}

fn tape_ops(c: &mut Criterion) {
    let a = random(32, 64, 1);
    let b = random(64, 64, 2);
    c.bench_function("tape/matmul_relu_backward_32x64x64", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let x = tape.var(a.clone());
            let w = tape.var(b.clone());
            let h = tape.matmul(x, w).unwrap();
            let h = tape.relu(h).unwrap();
            let l = tape.mean_all(h).unwrap();
            black_box(tape.backward(l).unwrap());
        })
    });
}

fn gating(c: &mut Criterion) {
    let mut group = c.benchmark_group("eaf");
    for kind in ExpertKind::ALL {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = BankConfig {
            width: 32,
            num_experts: 4,
            top_k: 2,
            kind,
            bottleneck_ratio: 4,
        };
        let bank = ExpertBank::new(&mut store, "b", cfg, &mut rng).unwrap();
        let x = random(32, 32, 4);
        group.bench_function(format!("gate_fuse_{kind}_n4_k2"), |bench| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let p = store.bind_frozen(&mut tape);
                let xv = tape.constant(x.clone());
                black_box(bank.fuse(&mut tape, &p, xv).unwrap());
            })
        });
    }
    group.finish();
}

fn partition_and_loss(c: &mut Criterion) {
    let probs = softmax(random(32, 7, 5).map(|v| v * 3.0));
    c.bench_function("partition/rows_32x7", |bench| {
        bench.iter(|| black_box(partition_rows(&probs, 0.9).unwrap()))
    });
    let parts = partition_rows(&probs, 0.9).unwrap();
    let scores = random(32, 7, 6);
    c.bench_function("partition/consistency_loss_backward_32x7", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let y = tape.var(scores.clone());
            let p = tape.softmax_rows(y).unwrap();
            let l = ambiguous_consistency_loss(&mut tape, p, &parts, 0.0).unwrap();
            black_box(tape.backward(l).unwrap());
        })
    });
}

fn model_forward(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = LeafModel::new(&ModelSpec::from_config(&cfg), &mut store, &mut rng).unwrap();
    let x = random(32, cfg.input_dim, 8);
    c.bench_function("model/forward_backward_batch32", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let out = model.forward(&mut tape, &p, xv).unwrap();
            let l = tape.mean_all(out.fused_logits).unwrap();
            black_box(tape.backward(l).unwrap());
        })
    });
}

fn training_epoch(c: &mut Criterion) {
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    let cfg = RunConfig {
        epochs: 1,
        largest_class: 400,
        ..RunConfig::default()
    };
    let split = prepare_split(&cfg).unwrap();
    for method in ["supervised_only", "fixed_threshold", "leaf"] {
        let cfg = RunConfig {
            method: method.parse().unwrap(),
            ..cfg.clone()
        };
        group.bench_function(format!("one_epoch_{method}"), |bench| {
            bench.iter_batched(|| cfg.clone(), |cfg| black_box(train(&cfg, &split).unwrap()), BatchSize::LargeInput)
        });
    }
    group.finish();
}

criterion_group!(benches, tape_ops, gating, partition_and_loss, model_forward, training_epoch);
criterion_main!(benches);
