//! Experiment runner for the style-transfer workspace.
//!
//! Every run that produces artifacts also writes its fully resolved
//! configuration, and all randomness flows from the config seed (or the
//! `MASTER_SEED` environment override), so reruns are byte-identical.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use styletrans_core::config::ExperimentConfig;
use styletrans_core::data::{gen_synthetic, ImageKind};
use styletrans_core::gradcheck::run_full_suite;
use styletrans_core::meta::{k_sweep, k_sweep_to_csv, log_to_csv, StyleTask};
use styletrans_core::model::Model;
use styletrans_core::objectives::distortion_demo;
use styletrans_core::ppm::{read_ppm, write_ppm};
use styletrans_core::snapshot::{read_snapshot, write_snapshot};
use styletrans_core::styletrans::{interpolate_outputs, merge_styles, LayerCount};
use styletrans_core::tensor::{no_grad, ParamStore};

#[derive(Parser)]
#[command(
    name = "styletrans",
    about = "Meta-trained style transformer on synthetic images",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run meta training; writes params.snap, train_log.csv, config.resolved.
    TrainMeta {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fast-adapt a trained snapshot to one style; writes adapted.snap and
    /// adapt_log.csv.
    Adapt {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// One stylization forward pass; --layers controls the degree.
    Stylize {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        layers: usize,
        #[arg(long)]
        out: PathBuf,
        /// Config the snapshot was trained with; defaults to config.resolved
        /// next to the snapshot, then to built-in defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Stylize with several styles merged into one token set.
    StylizeMulti {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        content: PathBuf,
        /// Two or more style images.
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        styles: Vec<PathBuf>,
        #[arg(long)]
        layers: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Blend two stylizations in feature space before decoding.
    Interpolate {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        style_a: PathBuf,
        #[arg(long)]
        style_b: PathBuf,
        /// Weight of style A, in [0, 1].
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        layers: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite; nonzero exit on failure.
    Gradcheck,
    /// Print the 2-D residual-distortion example.
    DemoDistortion,
    /// Meta-train once per k and tabulate adapted style loss.
    KSweep {
        #[arg(long, value_delimiter = ',')]
        ks: Vec<usize>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Held-out styles to adapt on per k.
        #[arg(long, default_value_t = 2)]
        eval_styles: usize,
        /// Adaptation iteration at which the style loss is read.
        #[arg(long, default_value_t = 10)]
        eval_step: usize,
    },
    /// Generate synthetic images as PPM files.
    GenData {
        #[arg(long)]
        kind: String,
        #[arg(short, long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)
        .with_context(|| format!("loading config {}", path.display()))?;
    cfg.apply_env_override()?;
    Ok(cfg)
}

/// Config for inference subcommands: explicit flag, else the resolved config
/// sitting next to the snapshot, else defaults.
fn config_near_snapshot(explicit: Option<&Path>, snapshot: &Path) -> Result<ExperimentConfig> {
    if let Some(p) = explicit {
        return load_config(p);
    }
    let sibling = snapshot.with_file_name("config.resolved");
    if sibling.exists() {
        return load_config(&sibling);
    }
    let mut cfg = ExperimentConfig::default();
    cfg.apply_env_override()?;
    Ok(cfg)
}

fn bind_model(params: &Path, cfg: &ExperimentConfig) -> Result<(ParamStore, Model)> {
    let snap = read_snapshot(params)
        .with_context(|| format!("reading snapshot {}", params.display()))?;
    let store = ParamStore::from_snapshot(&snap)?;
    let model = Model::bind(cfg.model(), &store).context(
        "snapshot does not match the model architecture in the config \
         (check d_model/heads against the training config)",
    )?;
    Ok((store, model))
}

fn write_outputs(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.resolved"), cfg.to_text())?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainMeta { config, out } => {
            let cfg = load_config(&config)?;
            write_outputs(&out, &cfg)?;
            let mut task = StyleTask::new(&cfg)?;
            let log = task.meta_train()?;
            std::fs::write(out.join("train_log.csv"), log_to_csv(&log))?;
            write_snapshot(&task.store.snapshot(), &out.join("params.snap"))?;
            let last = log.last().expect("nonempty log");
            println!(
                "meta training done: {} inner steps, final total loss {:.6}",
                log.len(),
                last.loss_total
            );
            println!("wrote {}", out.display());
        }

        Command::Adapt {
            params,
            style,
            config,
            out,
        } => {
            let cfg = load_config(&config)?;
            write_outputs(&out, &cfg)?;
            let style_img = read_ppm(&style)?;
            let snap = read_snapshot(&params)?;
            let base = StyleTask::new(&cfg)?;
            base.store
                .restore(&snap)
                .context("snapshot does not match the config's architecture")?;
            let (adapted, log) = base.fast_adapt(&style_img, &cfg.adapt())?;
            std::fs::write(out.join("adapt_log.csv"), log_to_csv(&log))?;
            write_snapshot(&adapted.snapshot(), &out.join("adapted.snap"))?;
            if let (Some(first), Some(last)) = (log.first(), log.last()) {
                println!(
                    "adaptation done: style loss {:.6} -> {:.6} over {} steps",
                    first.loss_style,
                    last.loss_style,
                    log.len()
                );
            }
            println!("wrote {}", out.display());
        }

        Command::Stylize {
            params,
            content,
            style,
            layers,
            out,
            config,
        } => {
            let cfg = config_near_snapshot(config.as_deref(), &params)?;
            let (_store, model) = bind_model(&params, &cfg)?;
            let content_img = read_ppm(&content)?;
            let style_img = read_ppm(&style)?;
            let _g = no_grad();
            let stylized = model.stylize(&content_img, &style_img, LayerCount(layers))?;
            write_ppm(&stylized, &out)?;
            println!("wrote {}", out.display());
        }

        Command::StylizeMulti {
            params,
            content,
            styles,
            layers,
            out,
            config,
        } => {
            if styles.is_empty() {
                bail!("stylize-multi: need at least one --styles image");
            }
            let cfg = config_near_snapshot(config.as_deref(), &params)?;
            let (_store, model) = bind_model(&params, &cfg)?;
            let content_img = read_ppm(&content)?;
            let _g = no_grad();
            let features = styles
                .iter()
                .map(|p| Ok(model.encode(&read_ppm(p)?)?))
                .collect::<Result<Vec<_>>>()?;
            let merged = merge_styles(&features)?;
            let stylized_features =
                model.stylize_features(&merged, &content_img, LayerCount(layers))?;
            let image = model.decode(&stylized_features)?;
            write_ppm(&image, &out)?;
            println!("wrote {} ({} styles merged)", out.display(), styles.len());
        }

        Command::Interpolate {
            params,
            content,
            style_a,
            style_b,
            alpha,
            layers,
            out,
            config,
        } => {
            let cfg = config_near_snapshot(config.as_deref(), &params)?;
            let (_store, model) = bind_model(&params, &cfg)?;
            let content_img = read_ppm(&content)?;
            let _g = no_grad();
            let fa = model.encode(&read_ppm(&style_a)?)?;
            let fb = model.encode(&read_ppm(&style_b)?)?;
            let out_a = model.stylize_features(&fa, &content_img, LayerCount(layers))?;
            let out_b = model.stylize_features(&fb, &content_img, LayerCount(layers))?;
            let blended = interpolate_outputs(&out_a, &out_b, alpha)?;
            let image = model.decode(&blended)?;
            write_ppm(&image, &out)?;
            println!("wrote {} (alpha {alpha})", out.display());
        }

        Command::Gradcheck => {
            let started = std::time::Instant::now();
            let results = run_full_suite()?;
            let mut failed = 0usize;
            for r in &results {
                println!(
                    "{:<24} rel err {:>12.3e}  (tol {:.0e})  {}",
                    r.name,
                    r.max_rel_err,
                    r.tolerance,
                    if r.passed() { "ok" } else { "FAIL" }
                );
                if !r.passed() {
                    failed += 1;
                }
            }
            println!(
                "{} checks in {:.1} s",
                results.len(),
                started.elapsed().as_secs_f64()
            );
            if failed > 0 {
                bail!("{failed} gradient checks failed");
            }
        }

        Command::DemoDistortion => {
            let r = distortion_demo();
            println!("content pair cosine before fusion: {:.4}", r.cos_before);
            println!(
                "after residual fusion:             {:.4}  (residual outputs {:?} and {:?})",
                r.cos_after_residual, r.residual[0], r.residual[1]
            );
            println!("content scaled by gamma before adding the attended style:");
            for (gamma, cos) in &r.cos_after_scaled {
                println!("  gamma {gamma:>5}: cosine {cos:.4}");
            }
        }

        Command::KSweep {
            ks,
            config,
            out,
            eval_styles,
            eval_step,
        } => {
            if ks.is_empty() {
                bail!("k-sweep: pass at least one k via --ks");
            }
            let cfg = load_config(&config)?;
            write_outputs(&out, &cfg)?;
            let table = k_sweep(&cfg, &ks, eval_styles, eval_step, &cfg.adapt())?;
            let csv = k_sweep_to_csv(&table);
            std::fs::write(out.join("k_sweep.csv"), &csv)?;
            print!("{csv}");
            println!("wrote {}", out.display());
        }

        Command::GenData {
            kind,
            n,
            size,
            seed,
            out,
        } => {
            let kind: ImageKind = kind.parse()?;
            std::fs::create_dir_all(&out)?;
            let images = gen_synthetic(kind, n, size, seed)?;
            for (i, img) in images.iter().enumerate() {
                write_ppm(img, &out.join(format!("{i:04}.ppm")))?;
            }
            println!("wrote {n} images to {}", out.display());
        }
    }
    Ok(())
}
