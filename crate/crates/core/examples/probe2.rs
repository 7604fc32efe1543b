use std::time::Instant;
use styletrans_core::config::ExperimentConfig;
use styletrans_core::data::{gen_synthetic, ImageKind};
use styletrans_core::meta::{k_sweep, StyleTask};

fn toy_cfg(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.d_model = 16;
    cfg.heads = 4;
    cfg.window_size = 2;
    cfg.shift_size = 1;
    cfg.image_size = 64;
    cfg.batch_size = 1;
    cfg.content_count = 16;
    cfg.style_count = std::env::args().nth(8).and_then(|s| s.parse().ok()).unwrap_or(16);
    cfg.max_layers = 4;
    cfg.inner_steps = 2;
    cfg.outer_iters = 300;
    cfg.seed = seed;
    cfg.inner_lr = 1e-3;
    cfg.outer_lr = std::env::var("PROBE_ETA").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0);
    cfg.adapt_lr = 2e-4;
    cfg.style_weight = std::env::var("PROBE_LAMBDA").ok().and_then(|v| v.parse().ok()).unwrap_or(1000.0);
    cfg.optimizer = "adam".into();
    cfg
}

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "layers".into());
    let seed: u64 = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);

    match mode.as_str() {
        "layers" => {
            // Criterion-9 style check: median style loss, L=4 vs L=1.
            let t0 = Instant::now();
            let mut task = StyleTask::new(&toy_cfg(seed)).unwrap();
            task.meta_train().unwrap();
            let styles = task.holdout_styles(4).unwrap();
            let contents = if std::env::var("PROBE_EVAL_TRAIN_CONTENT").is_ok() {
                task.contents[..5].to_vec()
            } else {
                gen_synthetic(ImageKind::Content, 5, 64, seed ^ 0xC0DE).unwrap()
            };
            let mut l1 = Vec::new();
            let mut l4 = Vec::new();
            for s in &styles {
                for c in &contents {
                    l1.push(task.eval_style_loss(&task.model, c, s, 1).unwrap());
                    l4.push(task.eval_style_loss(&task.model, c, s, 4).unwrap());
                }
            }
            let med = |v: &mut Vec<f64>| {
                v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                (v[9] + v[10]) / 2.0
            };
            let (m1, m4) = (med(&mut l1), med(&mut l4));
            println!(
                "seed {seed}: median L1 {m1:.4} L4 {m4:.4}  L4<=L1 {}  ({:.0}s)",
                m4 <= m1,
                t0.elapsed().as_secs_f64()
            );
        }
        "kscan" => {
            // One sweep, adapted style loss read at several eval steps.
            let t0 = Instant::now();
            let mut cfg = toy_cfg(seed);
            cfg.outer_lr = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(1.0);
            cfg.inner_lr = std::env::args().nth(6).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
            cfg.optimizer = std::env::args().nth(7).unwrap_or_else(|| "adam".into());
            let mut acfg = cfg.adapt();
            acfg.batch_size = 4;
            acfg.steps = 51;
            acfg.lr = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
            let n_eval: usize = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(4);
            let mut per_step: Vec<Vec<f64>> = vec![Vec::new(); 3];
            for k in [1usize, 2, 3, 4] {
                let mut c = cfg.clone();
                c.inner_steps = k;
                let mut task = StyleTask::new(&c).unwrap();
                task.meta_train().unwrap();
                let holdout = task.holdout_styles(n_eval).unwrap();
                let mut acc = [0.0f64; 3];
                for st in &holdout {
                    let (_, log) = task.fast_adapt(st, &acfg).unwrap();
                    for (i, step) in [10usize, 20, 50].iter().enumerate() {
                        acc[i] += log[*step].loss_style;
                    }
                }
                for i in 0..3 {
                    per_step[i].push(acc[i] / n_eval as f64);
                }
            }
            for (i, step) in [10, 20, 50].iter().enumerate() {
                println!(
                    "seed {seed} step{step}: {:?}",
                    per_step[i].iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
                );
            }
            println!("  ({:.0}s)", t0.elapsed().as_secs_f64());
        }
        "ksweep" => {
            let t0 = Instant::now();
            let mut cfg = toy_cfg(seed);
            cfg.outer_lr = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(1.0);
            cfg.inner_lr = std::env::args().nth(6).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
            let mut acfg = cfg.adapt();
            acfg.batch_size = 4;
            acfg.lr = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
            if std::env::args().nth(7).as_deref() == Some("sgd") {
                acfg.optimizer = styletrans_core::meta::Optimizer::Sgd;
            }
            let n_eval = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(4);
            let table = k_sweep(&cfg, &[1, 2, 3, 4], n_eval, 10, &acfg).unwrap();
            println!(
                "seed {seed}: {:?}  ({:.0}s)",
                table
                    .iter()
                    .map(|(k, v)| format!("k{k}={v:.4}"))
                    .collect::<Vec<_>>(),
                t0.elapsed().as_secs_f64()
            );
        }
        "curve" => {
            let mut task = StyleTask::new(&toy_cfg(seed)).unwrap();
            task.meta_train().unwrap();
            let holdout = task.holdout_styles(3).unwrap();
            let contents = gen_synthetic(ImageKind::Content, 3, 64, seed ^ 0xC0DE).unwrap();
            for (label, styles) in [("train", &task.styles[..3]), ("holdout", &holdout[..])] {
                for (si, st) in styles.iter().enumerate() {
                    let mut row = format!("{label} style{si}:");
                    for l in [0usize, 1, 2, 3, 4, 6] {
                        let mut acc = 0.0;
                        for c in &contents {
                            acc += task.eval_style_loss(&task.model, c, st, l).unwrap();
                        }
                        row.push_str(&format!("  L{l} {:.3}", acc / contents.len() as f64));
                    }
                    println!("{row}");
                }
            }
        }
        "perl" => {
            let mut task = StyleTask::new(&toy_cfg(seed)).unwrap();
            let log = task.meta_train().unwrap();
            let tail = &log[log.len() - 200..];
            for l in 1..=4usize {
                let rows: Vec<&_> = tail.iter().filter(|r| r.layers == l).collect();
                let mc: f64 = rows.iter().map(|r| r.loss_content).sum::<f64>() / rows.len() as f64;
                let ms: f64 = rows.iter().map(|r| r.loss_style).sum::<f64>() / rows.len() as f64;
                println!("  L={l}: n={} content {mc:.3} style {ms:.4}", rows.len());
            }
        }
        other => panic!("unknown mode {other}"),
    }
}
