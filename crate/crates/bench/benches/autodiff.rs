use criterion::{criterion_group, criterion_main, Criterion};
use gta_core::data_io::{make_windows, stack_windows, NormalizerStats, SyntheticSpec, Window, WindowConfig};
use gta_core::detector::mse_loss;
use gta_core::forecaster::Dropout;
use gta_core::graph_policy::AdjacencySample;
use gta_core::ipconv::{ip_conv, MessageMlp};
use gta_core::model::{GtaModel, ModelConfig};
use gta_core::numerics::{generator, ParamStore, Tape};
use gta_core::Tensor;

fn pattern(shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| (i as f64 * 0.61).cos()).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let (a, b) = (pattern(&[128, 128]), pattern(&[128, 128]));
    c.bench_function("matmul_128_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let x = tape.leaf(a.clone().with_grad());
            let w = tape.leaf(b.clone().with_grad());
            let y = tape.matmul(x, w).unwrap();
            let s = tape.sum(y);
            tape.backward(s).unwrap();
        })
    });
}

fn graph_conv(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let mlp = MessageMlp::new(&mut store, "ip", 32, &mut generator(1));
    let nodes = pattern(&[32, 10, 32]);
    let adj = AdjacencySample::complete(10).weights;
    c.bench_function("ip_conv_b32_m10_t32_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut tape = Tape::with_params(&store);
            let x = tape.leaf(nodes.clone().with_grad());
            let a = tape.leaf(adj.clone().with_grad());
            let y = ip_conv(&mut tape, x, a, &mlp).unwrap();
            let s = tape.sum(y);
            tape.backward(s).unwrap();
        })
    });
}

fn training_step(c: &mut Criterion) {
    let data = gta_core::data_io::generate_synthetic(&SyntheticSpec::default(), &mut generator(7)).unwrap();
    let norm = NormalizerStats::fit(&data.train).unwrap();
    let x = norm.normalize(&data.train).unwrap();
    let mut cfg = ModelConfig::sized(10, 60, 30, 24, 2);
    cfg.forecaster.ff_width = 48;
    let model = GtaModel::new(&cfg, &mut generator(0)).unwrap();
    let wcfg = WindowConfig {
        window: 60,
        label_len: 30,
        stride: 1,
    };
    let windows = make_windows(&x, &wcfg).unwrap();
    let picked: Vec<&Window> = windows.iter().take(32).collect();
    let batch = stack_windows(&picked, 10, &wcfg).unwrap();
    let complete = AdjacencySample::complete(10).weights;
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("batch32_d24_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut tape = Tape::with_params(model.store());
            let adj = tape.constant(complete.clone());
            let pred = model.predict(&mut tape, &batch, adj, &mut Dropout::off()).unwrap();
            let target = tape.constant(batch.target.clone());
            let loss = mse_loss(&mut tape, pred, target).unwrap();
            tape.backward(loss).unwrap();
        })
    });
    group.finish();
}

criterion_group!(benches, matmul, graph_conv, training_step);
criterion_main!(benches);
