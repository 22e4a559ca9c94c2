//! Same workloads under the rayon path and the sequential fallback.
//!
//! Without the `parallel` feature both variants run sequentially.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use spikerecon::numerics::{Graph, Tensor};
use spikerecon::par::{set_exec, Exec};
use spikerecon::spike_sim::{simulate, synthetic_scene, SceneKind, SensorParams};
use spikerecon::swinsf::{ModelConfig, SwinSf};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn filled(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |k| ((k * 7919) % 1000) as f64 / 1000.0 - 0.5)
}

fn bench_simulate(c: &mut Criterion) {
    let lum = synthetic_scene(SceneKind::MovingBar, 128, 128, 64, 1.0);
    let p = SensorParams::default();
    let mut group = c.benchmark_group("simulate_128x128x64");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            set_exec(exec);
            b.iter(|| simulate(black_box(&lum), &p).unwrap())
        });
    }
    group.finish();
}

fn bench_kernels(c: &mut Criterion) {
    let (a, m) = (filled(&[256, 256]), filled(&[256, 256]));
    let (x, w, bias) = (filled(&[16, 64, 64]), filled(&[16, 16, 3, 3]), filled(&[16]));
    let mut group = c.benchmark_group("kernels");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::new("matmul_256", name), |b| {
            set_exec(exec);
            b.iter(|| {
                let mut g = Graph::new();
                let (a, m) = (g.constant(a.clone()), g.constant(m.clone()));
                g.matmul(a, m).unwrap()
            })
        });
        group.bench_function(BenchmarkId::new("conv3x3_16x64x64_fwd_bwd", name), |b| {
            set_exec(exec);
            b.iter(|| {
                let mut g = Graph::new();
                let x = g.param(x.clone());
                let (w, bias) = (g.param(w.clone()), g.param(bias.clone()));
                let y = g.conv2d(x, w, bias, 1, 1).unwrap();
                let s = g.sum(y);
                g.backward(s).unwrap();
            })
        });
    }
    group.finish();
}

fn bench_model(c: &mut Criterion) {
    let model = SwinSf::new(ModelConfig::default()).unwrap();
    let cfg = model.config().clone();
    let lum = synthetic_scene(SceneKind::MovingBar, 32, 32, cfg.windows.total(), 1.0);
    let stream = simulate(&lum, &SensorParams::default()).unwrap();
    let mut group = c.benchmark_group("desk_model_forward_32x32");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            set_exec(exec);
            b.iter(|| model.infer(black_box(&stream)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_simulate, bench_kernels, bench_model);
criterion_main!(benches);
