use std::time::Instant;
use styletrans_core::config::ExperimentConfig;
use styletrans_core::meta::StyleTask;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let optimizer = args.get(2).cloned().unwrap_or_else(|| "sgd".into());
    let iters: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(300);
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1);
    let lambda: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(10.0);
    let adapt_lr: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(lr);

    let mut cfg = ExperimentConfig::default();
    cfg.d_model = 16;
    cfg.heads = 4;
    cfg.window_size = 2;
    cfg.shift_size = 1;
    cfg.image_size = 64;
    cfg.batch_size = 1;
    cfg.content_count = 16;
    cfg.style_count = 16;
    cfg.max_layers = 4;
    cfg.inner_steps = 2;
    cfg.outer_iters = iters;
    cfg.seed = seed;
    cfg.inner_lr = lr;
    cfg.outer_lr = std::env::var("PROBE_ETA").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0);
    cfg.adapt_lr = adapt_lr;
    cfg.style_weight = lambda;
    cfg.optimizer = optimizer.clone();

    let t0 = Instant::now();
    let mut task = StyleTask::new(&cfg).unwrap();
    let log = task.meta_train().unwrap();
    let dt = t0.elapsed();

    // Per-outer-iteration mean totals, then window-50 smoothing.
    let per_iter: Vec<f64> = (0..iters)
        .map(|i| {
            let rows: Vec<&_> = log.iter().filter(|r| r.iter == i).collect();
            rows.iter().map(|r| r.loss_total).sum::<f64>() / rows.len() as f64
        })
        .collect();
    let smooth = |i: usize| -> f64 {
        let lo = i + 1 - 50.min(i + 1);
        per_iter[lo..=i].iter().sum::<f64>() / (i - lo + 1) as f64
    };
    println!(
        "opt {optimizer} lr {lr} lam {lambda} seed {seed}: {:.1}s  s(49) {:.3}  s(end) {:.3}  improved {}",
        dt.as_secs_f64(),
        smooth(49),
        smooth(iters - 1),
        smooth(iters - 1) < smooth(49)
    );

    // Fast adaptation on a held-out style: style loss step 0 vs step 50.
    let style = task.holdout_styles(1).unwrap().remove(0);
    let mut acfg = cfg.adapt();
    acfg.steps = 51;
    acfg.batch_size = 4;
    let (_, alog) = task.fast_adapt(&style, &acfg).unwrap();
    println!(
        "  adapt: style step0 {:.4} step50 {:.4} improved {}",
        alog[0].loss_style,
        alog[50].loss_style,
        alog[50].loss_style < alog[0].loss_style
    );
}
