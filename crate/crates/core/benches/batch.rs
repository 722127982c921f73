use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use parley_core::corpus::{copy_pairs, make_batches, Vocabulary};
use parley_core::inference::evaluate;
use parley_core::seq2seq::{forward_backward_with, Hyper, ModelParams};
use parley_core::trainer::prepare_examples;
use parley_core::Execution;

fn modes() -> Vec<(&'static str, Execution)> {
    let mut modes = vec![("sequential", Execution::Sequential)];
    if Execution::default() != Execution::Sequential {
        modes.push(("parallel", Execution::default()));
    }
    modes
}

fn forward_backward_batch(c: &mut Criterion) {
    let pairs = copy_pairs(100, 16, 1, 8, 3);
    let vocab = Vocabulary::build(&pairs, 1, 100).unwrap();
    let (examples, _) = prepare_examples(&pairs, &vocab, 8);
    let batch = make_batches(&examples, 100, None).unwrap().remove(0);
    let mut group = c.benchmark_group("forward_backward");
    group.sample_size(20);
    for hidden in [32, 128] {
        let params = ModelParams::<f32>::init(Hyper::new(vocab.len(), hidden, hidden, 2), 1, None).unwrap();
        for (name, exec) in modes() {
            group.bench_with_input(BenchmarkId::new(name, hidden), &params, |b, p| {
                b.iter(|| forward_backward_with(&batch, p, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn greedy_evaluation(c: &mut Criterion) {
    let pairs = copy_pairs(200, 16, 1, 8, 4);
    let vocab = Vocabulary::build(&pairs, 1, 100).unwrap();
    let (examples, _) = prepare_examples(&pairs, &vocab, 8);
    let params = ModelParams::<f32>::init(Hyper::new(vocab.len(), 64, 64, 2), 1, None).unwrap();
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_function(name, |b| b.iter(|| evaluate(&params, &examples, 100, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, forward_backward_batch, greedy_evaluation);
criterion_main!(benches);
