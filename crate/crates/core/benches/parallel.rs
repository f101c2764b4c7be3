use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use textnorm::alphabet::Alphabet;
use textnorm::data;
use textnorm::encoders::EncoderKind;
use textnorm::eval::{self, Metric, PredictionRecord, PredictionSet};
use textnorm::model::{Model, ModelConfig};
use textnorm::par::Execution;
use textnorm::toy::{self, ToyTask};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn batch_gradients(c: &mut Criterion) {
    let a = Alphabet::default();
    let pairs = toy::generate(ToyTask::DigitsToWords, 32, 0);
    let batch = data::make_batches(&pairs, 32, &a).unwrap().remove(0);
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for kind in [EncoderKind::Cfe, EncoderKind::Lstm] {
        let model = Model::<f32>::new(ModelConfig::for_kind(kind), 0).unwrap();
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(kind.as_str(), name), &exec, |b, &exec| {
                b.iter(|| black_box(model.batch_gradients(&batch, exec).unwrap()))
            });
        }
    }
    group.finish();
}

fn randomization(c: &mut Criterion) {
    let records = |correct_every: usize| {
        (0..2000)
            .map(|i| PredictionRecord {
                input: i.to_string(),
                reference: "one two three".into(),
                prediction: if i % correct_every == 0 {
                    "one two three"
                } else {
                    "one too three"
                }
                .into(),
                hit_cap: false,
            })
            .collect()
    };
    let (x, y) = (PredictionSet::new(records(2)), PredictionSet::new(records(3)));
    let mut group = c.benchmark_group("approx_randomization");
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| black_box(eval::approx_randomization(&x, &y, Metric::Cer, 1000, 0, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, batch_gradients, randomization);
criterion_main!(benches);
