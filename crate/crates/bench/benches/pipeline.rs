use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use styletrans_bench::{bench_config, bench_task};
use styletrans_core::meta::{inner_update, InnerOptimizer, Optimizer, ALL_GROUPS};
use styletrans_core::styletrans::LayerCount;
use styletrans_core::tensor::{no_grad, Tensor};
use styletrans_core::Rng;

fn tensor_ops(c: &mut Criterion) {
    let mut rng = Rng::new(3);
    let a = Tensor::uniform(&[64, 64], -1.0, 1.0, &mut rng);
    let b = Tensor::uniform(&[64, 64], -1.0, 1.0, &mut rng);
    c.bench_function("matmul_64", |bench| {
        let _g = no_grad();
        bench.iter(|| black_box(a.matmul(&b).unwrap()))
    });

    let img = Tensor::uniform(&[16, 32, 32], -1.0, 1.0, &mut rng);
    let w = Tensor::uniform(&[16, 16, 3, 3], -0.3, 0.3, &mut rng);
    let bias = Tensor::uniform(&[16], -0.1, 0.1, &mut rng);
    c.bench_function("conv3x3_16ch_32px", |bench| {
        let _g = no_grad();
        bench.iter(|| black_box(img.conv3x3(&w, &bias).unwrap()))
    });

    let x = Tensor::uniform(&[64, 16], -2.0, 2.0, &mut rng);
    c.bench_function("softmax_rows_64x16", |bench| {
        let _g = no_grad();
        bench.iter(|| black_box(x.softmax_rows().unwrap()))
    });
}

fn stylize_forward(c: &mut Criterion) {
    let task = bench_task();
    let content = task.contents[0].clone();
    let style = task.styles[0].clone();
    for layers in [1usize, 4] {
        c.bench_function(&format!("stylize_64px_L{layers}"), |bench| {
            let _g = no_grad();
            bench.iter(|| {
                black_box(
                    task.model
                        .stylize(&content, &style, LayerCount(layers))
                        .unwrap(),
                )
            })
        });
    }
}

fn training_step(c: &mut Criterion) {
    let cfg = bench_config();
    let task = bench_task();
    let style_target = {
        let _g = no_grad();
        styletrans_core::backbone::loss_features(&task.styles[0], &task.loss_net).unwrap()
    };
    let content_targets: Vec<_> = {
        let _g = no_grad();
        task.contents
            .iter()
            .map(|i| styletrans_core::backbone::loss_features(i, &task.loss_net).unwrap())
            .collect()
    };
    c.bench_function("inner_update_64px", |bench| {
        let mut opt = InnerOptimizer::new(Optimizer::Sgd);
        bench.iter(|| {
            inner_update(
                &task.model,
                &task.store,
                &task.loss_net,
                &task.contents,
                &content_targets,
                &task.styles[0],
                &style_target,
                &[0],
                2,
                cfg.inner_lr,
                &ALL_GROUPS,
                &mut opt,
                task.weights,
            )
            .unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = tensor_ops, stylize_forward, training_step
}
criterion_main!(benches);
