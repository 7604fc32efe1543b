//! Meta training and fast adaptation.
//!
//! One outer iteration treats a single style as a task: copy the slow weights
//! θ, take k inner gradient steps on fresh content batches (sampling a new
//! stacked-layer count each step), and move θ a fraction η toward the
//! adapted fast weights ω. With k = 1 the whole scheme degenerates to plain
//! SGD at rate η·δ, which is the zero-shot training regime.
//!
//! Fast adaptation replays the inner loop on one style, starting from a
//! cloned parameter set and updating only the `style_encoder` group.

use crate::backbone::{loss_features, FeaturePyramid, Image, LossNetwork};
use crate::config::ExperimentConfig;
use crate::data::{gen_synthetic, ImageKind};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::{content_loss, style_loss, total_loss, LossWeights};
use crate::rng::Rng;
use crate::styletrans::LayerCount;
use crate::tensor::{no_grad, ParamGroup, ParamStore, Tensor};
use std::collections::HashMap;

pub const ALL_GROUPS: [ParamGroup; 2] = [ParamGroup::StyleEncoder, ParamGroup::Other];

/// Label mixed into the run seed for held-out evaluation styles.
const HOLDOUT_LABEL: u64 = 0x484f_4c44;
/// Label mixed into the run seed for the adaptation sampler, so `adapt` runs
/// are reproducible regardless of how much training preceded them.
const ADAPT_LABEL: u64 = 0xada7;

// ── Configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct MetaConfig {
    /// Inner learning rate (delta).
    pub inner_lr: f64,
    /// Outer blend rate (eta).
    pub outer_lr: f64,
    /// Inner updates per task (k).
    pub inner_steps: usize,
    /// Maximum stacked layers during training (T); each inner step samples
    /// uniformly from 1..=T.
    pub max_layers: usize,
    pub outer_iters: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
}

#[derive(Debug, Clone, Copy)]
pub struct AdaptConfig {
    pub steps: usize,
    pub lr: f64,
    /// Fixed layer count for adaptation-time forwards.
    pub layers: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
}

/// Inner-loop optimizer. SGD keeps the Reptile reductions exact; Adam is the
/// conventional choice for real training runs, without exactness guarantees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Optimizer {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-run optimizer state (first/second moment buffers for Adam).
pub struct InnerOptimizer {
    kind: Optimizer,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
    t: u32,
}

impl InnerOptimizer {
    pub fn new(kind: Optimizer) -> InnerOptimizer {
        InnerOptimizer {
            kind,
            moments: HashMap::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &ParamStore, lr: f64, groups: &[ParamGroup]) -> Result<()> {
        match self.kind {
            Optimizer::Sgd => store.sgd_step(lr, groups),
            Optimizer::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for (name, tensor, group) in store.iter() {
                    if !groups.contains(&group) {
                        continue;
                    }
                    let grad = tensor.grad().ok_or_else(|| Error::MissingGrad {
                        name: name.to_string(),
                    })?;
                    let (m, v) = self
                        .moments
                        .entry(name.to_string())
                        .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
                    let mut data = tensor.to_vec();
                    for i in 0..grad.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                        data[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                    }
                    tensor.set_data(&data);
                }
                Ok(())
            }
        }
    }
}

// ── Logging ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Meta,
    Adapt,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Meta => write!(f, "meta"),
            Phase::Adapt => write!(f, "adapt"),
        }
    }
}

/// One inner step of training: losses are the values *before* the update.
#[derive(Debug, Clone)]
pub struct LogRow {
    pub iter: usize,
    pub phase: Phase,
    pub layers: usize,
    pub loss_content: f64,
    pub loss_style: f64,
    pub loss_total: f64,
}

pub const LOG_HEADER: &str = "iter,phase,L,loss_content,loss_style,loss_total";

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::with_capacity(32 * (rows.len() + 1));
    out.push_str(LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iter, r.phase, r.layers, r.loss_content, r.loss_style, r.loss_total
        ));
    }
    out
}

// ── Reptile primitives ───────────────────────────────────────────────

/// One Reptile outer iteration over an arbitrary inner objective: snapshot,
/// k gradient steps on the selected groups, blend back toward the start.
/// Returns the inner loss values (before each step).
pub fn reptile_outer_iteration<F>(
    store: &ParamStore,
    inner_steps: usize,
    inner_lr: f64,
    outer_lr: f64,
    groups: &[ParamGroup],
    mut inner_loss: F,
) -> Result<Vec<f64>>
where
    F: FnMut(usize) -> Result<Tensor>,
{
    let theta = store.snapshot();
    let mut losses = Vec::with_capacity(inner_steps);
    for step in 0..inner_steps {
        store.zero_grads();
        let loss = inner_loss(step)?;
        losses.push(loss.value());
        loss.backward()?;
        store.sgd_step(inner_lr, groups)?;
    }
    store.blend_from(&theta, outer_lr)?;
    Ok(losses)
}

// ── The style-transfer training task ─────────────────────────────────

/// Everything one training run owns: parameters, model, frozen loss network,
/// synthetic datasets, and cached target pyramids.
pub struct StyleTask {
    pub cfg: ExperimentConfig,
    pub store: ParamStore,
    pub model: Model,
    pub loss_net: LossNetwork,
    pub contents: Vec<Image>,
    pub styles: Vec<Image>,
    content_targets: Vec<FeaturePyramid>,
    style_targets: Vec<FeaturePyramid>,
    pub weights: LossWeights,
    rng: Rng,
}

impl StyleTask {
    pub fn new(cfg: &ExperimentConfig) -> Result<StyleTask> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed);
        let mut store = ParamStore::new();
        let model = Model::init(cfg.model(), &mut store, &mut rng)?;
        let loss_net = LossNetwork::new(cfg.loss_net_seed);
        let contents = gen_synthetic(ImageKind::Content, cfg.content_count, cfg.image_size, cfg.seed)?;
        let styles = gen_synthetic(ImageKind::Style, cfg.style_count, cfg.image_size, cfg.seed)?;

        // Loss targets never need gradients; compute them once.
        let _g = no_grad();
        let content_targets = contents
            .iter()
            .map(|img| loss_features(img, &loss_net))
            .collect::<Result<Vec<_>>>()?;
        let style_targets = styles
            .iter()
            .map(|img| loss_features(img, &loss_net))
            .collect::<Result<Vec<_>>>()?;
        drop(_g);

        Ok(StyleTask {
            weights: cfg.loss_weights()?,
            cfg: cfg.clone(),
            store,
            model,
            loss_net,
            contents,
            styles,
            content_targets,
            style_targets,
            rng,
        })
    }

    /// Held-out styles for adaptation experiments, disjoint from the
    /// training styles by construction.
    pub fn holdout_styles(&self, n: usize) -> Result<Vec<Image>> {
        gen_synthetic(
            ImageKind::Style,
            n,
            self.cfg.image_size,
            self.cfg.seed ^ HOLDOUT_LABEL,
        )
    }

    /// Run Algorithm-style meta training on this task's datasets; returns one
    /// log row per inner step.
    ///
    /// The inner optimizer's state (Adam moments) persists across outer
    /// iterations even though the parameters are re-based on θ each task;
    /// resetting it every task would leave the moments permanently
    /// uncalibrated at small k.
    pub fn meta_train(&mut self) -> Result<Vec<LogRow>> {
        let m = self.cfg.meta();
        let mut log = Vec::with_capacity(m.outer_iters * m.inner_steps);
        let mut opt = InnerOptimizer::new(m.optimizer);
        for iter in 0..m.outer_iters {
            let style_idx = self.rng.below(self.styles.len());
            let theta = self.store.snapshot();
            for _ in 0..m.inner_steps {
                let batch: Vec<usize> = (0..m.batch_size)
                    .map(|_| self.rng.below(self.contents.len()))
                    .collect();
                let layers = self.rng.range_inclusive(1, m.max_layers);
                let (lc, ls, lt) = inner_update(
                    &self.model,
                    &self.store,
                    &self.loss_net,
                    &self.contents,
                    &self.content_targets,
                    &self.styles[style_idx],
                    &self.style_targets[style_idx],
                    &batch,
                    layers,
                    m.inner_lr,
                    &ALL_GROUPS,
                    &mut opt,
                    self.weights,
                )?;
                log.push(LogRow {
                    iter,
                    phase: Phase::Meta,
                    layers,
                    loss_content: lc,
                    loss_style: ls,
                    loss_total: lt,
                });
            }
            self.store.blend_from(&theta, m.outer_lr)?;
        }
        Ok(log)
    }

    /// Adapt a clone of the current parameters to one style, updating only
    /// the style-encoder group. The task's own parameters are untouched.
    pub fn fast_adapt(&self, style: &Image, acfg: &AdaptConfig) -> Result<(ParamStore, Vec<LogRow>)> {
        let snap = self.store.snapshot();
        let store = ParamStore::from_snapshot(&snap)?;
        let model = Model::bind(self.model.cfg, &store)?;
        let style_target = {
            let _g = no_grad();
            loss_features(style, &self.loss_net)?
        };
        let mut rng = Rng::new(self.cfg.seed).derive(ADAPT_LABEL);
        let mut opt = InnerOptimizer::new(acfg.optimizer);
        let mut log = Vec::with_capacity(acfg.steps);
        for step in 0..acfg.steps {
            let batch: Vec<usize> = (0..acfg.batch_size)
                .map(|_| rng.below(self.contents.len()))
                .collect();
            let (lc, ls, lt) = inner_update(
                &model,
                &store,
                &self.loss_net,
                &self.contents,
                &self.content_targets,
                style,
                &style_target,
                &batch,
                acfg.layers,
                acfg.lr,
                &[ParamGroup::StyleEncoder],
                &mut opt,
                self.weights,
            )?;
            log.push(LogRow {
                iter: step,
                phase: Phase::Adapt,
                layers: acfg.layers,
                loss_content: lc,
                loss_style: ls,
                loss_total: lt,
            });
        }
        Ok((store, log))
    }

    /// Inference-mode style loss of one stylization, for trend evaluations.
    pub fn eval_style_loss(
        &self,
        model: &Model,
        content: &Image,
        style: &Image,
        layers: usize,
    ) -> Result<f64> {
        let _g = no_grad();
        let stylized = model.stylize(content, style, LayerCount(layers))?;
        let pyr = loss_features(&stylized, &self.loss_net)?;
        let target = loss_features(style, &self.loss_net)?;
        Ok(style_loss(&target, &pyr)?.value())
    }
}

/// One full training step: forward over a content batch (encode both images,
/// run the stack, decode, pyramid), mean batch loss, backward, and an
/// optimizer step on the selected groups. Returns (content, style, total)
/// loss values from before the update.
#[allow(clippy::too_many_arguments)]
pub fn inner_update(
    model: &Model,
    store: &ParamStore,
    loss_net: &LossNetwork,
    contents: &[Image],
    content_targets: &[FeaturePyramid],
    style: &Image,
    style_target: &FeaturePyramid,
    batch: &[usize],
    layers: usize,
    lr: f64,
    groups: &[ParamGroup],
    opt: &mut InnerOptimizer,
    weights: LossWeights,
) -> Result<(f64, f64, f64)> {
    if batch.is_empty() {
        return Err(Error::invalid("inner_update: empty batch"));
    }
    store.zero_grads();
    let style_features = model.encode(style)?;
    let mut lc = Tensor::scalar(0.0);
    let mut ls = Tensor::scalar(0.0);
    for &i in batch {
        let stylized_features =
            model.stylize_features(&style_features, &contents[i], LayerCount(layers))?;
        let stylized = model.decode(&stylized_features)?;
        let pyr = loss_features(&stylized, loss_net)?;
        lc = lc.add(&content_loss(&content_targets[i], &pyr)?)?;
        ls = ls.add(&style_loss(style_target, &pyr)?)?;
    }
    let inv = 1.0 / batch.len() as f64;
    let lc = lc.scale(inv);
    let ls = ls.scale(inv);
    let total = total_loss(&lc, &ls, weights)?;
    let values = (lc.value(), ls.value(), total.value());
    if !values.2.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    total.backward()?;
    opt.step(store, lr, groups)?;
    Ok(values)
}

// ── k sweep ──────────────────────────────────────────────────────────

/// Meta-train once per k (same seed, same outer-iteration budget), fast-adapt
/// each result on held-out styles, and report the mean style loss at
/// `eval_step` of adaptation.
pub fn k_sweep(
    base_cfg: &ExperimentConfig,
    ks: &[usize],
    eval_styles: usize,
    eval_step: usize,
    adapt: &AdaptConfig,
) -> Result<Vec<(usize, f64)>> {
    if ks.is_empty() {
        return Err(Error::invalid("k_sweep: no k values"));
    }
    let acfg = AdaptConfig {
        steps: eval_step + 1,
        ..*adapt
    };
    let mut table = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut cfg = base_cfg.clone();
        cfg.inner_steps = k;
        let mut task = StyleTask::new(&cfg)?;
        task.meta_train()?;
        let holdout = task.holdout_styles(eval_styles)?;
        let mut acc = 0.0;
        for style in &holdout {
            let (_, log) = task.fast_adapt(style, &acfg)?;
            acc += log[eval_step].loss_style;
        }
        table.push((k, acc / eval_styles as f64));
    }
    Ok(table)
}

pub fn k_sweep_to_csv(table: &[(usize, f64)]) -> String {
    let mut out = String::from("k,mean_style_loss\n");
    for (k, v) in table {
        out.push_str(&format!("{k},{v}\n"));
    }
    out
}
