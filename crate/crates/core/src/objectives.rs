//! Training losses and evaluation metrics over loss-network pyramids, plus
//! the 2-D residual-distortion demonstration.

use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::feature::{channel_stats, instance_norm};
use crate::styletrans::IN_EPS;
use crate::tensor::Tensor;

/// Guard added to cosine and normalization denominators.
pub const DENOM_EPS: f64 = 1e-8;

/// Balance between the content and style terms.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: 10.0 }
    }
}

impl LossWeights {
    pub fn new(lambda: f64) -> Result<LossWeights> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be nonnegative, got {lambda}")));
        }
        Ok(LossWeights { lambda })
    }
}

/// Normalized perceptual distance: the Euclidean norm of the difference of
/// instance-normalized features, summed over the four pyramid levels.
pub fn content_loss(content: &FeaturePyramid, stylized: &FeaturePyramid) -> Result<Tensor> {
    let mut total = Tensor::scalar(0.0);
    for (fc, fcs) in content.levels.iter().zip(&stylized.levels) {
        if fc.tensor().shape() != fcs.tensor().shape() {
            return Err(Error::shape(
                "content_loss",
                format!("{:?}", fc.tensor().shape()),
                format!("{:?}", fcs.tensor().shape()),
            ));
        }
        let a = instance_norm(fc, IN_EPS)?;
        let b = instance_norm(fcs, IN_EPS)?;
        let level = a
            .tensor()
            .sub(b.tensor())?
            .square()?
            .sum()
            .sqrt_elem()?;
        total = total.add(&level)?;
    }
    Ok(total)
}

/// Mean–standard-deviation style distance: per level, Euclidean distance of
/// channel means plus Euclidean distance of channel stds, summed over levels.
/// Token counts per level may differ; channel counts must match.
pub fn style_loss(style: &FeaturePyramid, stylized: &FeaturePyramid) -> Result<Tensor> {
    let mut total = Tensor::scalar(0.0);
    for (fs, fcs) in style.levels.iter().zip(&stylized.levels) {
        if fs.channels() != fcs.channels() {
            return Err(Error::shape(
                "style_loss",
                format!("{} channels", fs.channels()),
                format!("{}", fcs.channels()),
            ));
        }
        let (mu_s, std_s) = channel_stats(fs)?;
        let (mu_cs, std_cs) = channel_stats(fcs)?;
        let mean_term = mu_s.sub(&mu_cs)?.square()?.sum().sqrt_elem()?;
        let std_term = std_s.sub(&std_cs)?.square()?.sum().sqrt_elem()?;
        total = total.add(&mean_term)?.add(&std_term)?;
    }
    Ok(total)
}

/// `content + lambda * style`.
pub fn total_loss(content: &Tensor, style: &Tensor, w: LossWeights) -> Result<Tensor> {
    content.add(&style.scale(w.lambda))
}

/// Column-normalized pairwise cosine-distance matrix of one feature map:
/// `N_ij = D_ij / sum_k D_kj` with `D_ij = 1 - cos(F_i, F_j)`.
fn self_similarity(f: &Tensor) -> Result<Tensor> {
    let gram = f.matmul_nt(f)?;
    let norms = f.square()?.row_sums()?.sqrt_elem()?;
    let denom = norms.matmul_nt(&norms)?.affine(1.0, DENOM_EPS);
    let dist = gram.div(&denom)?.affine(-1.0, 1.0);
    let colsum = dist.col_sums()?.affine(1.0, DENOM_EPS);
    dist.div_row(&colsum)
}

/// Self-similarity preservation metric over pyramid levels x = 3..4: the mean
/// absolute difference between the column-normalized cosine-distance
/// distributions of the content and stylized features.
pub fn similarity_metric(content: &FeaturePyramid, stylized: &FeaturePyramid) -> Result<Tensor> {
    let mut total = Tensor::scalar(0.0);
    for x in 3..=4 {
        let fc = content.level(x);
        let fcs = stylized.level(x);
        if fc.tokens() == 0 {
            return Err(Error::invalid("similarity_metric: empty level"));
        }
        if fc.tokens() != fcs.tokens() {
            return Err(Error::shape(
                "similarity_metric",
                format!("{} tokens at level {x}", fc.tokens()),
                format!("{}", fcs.tokens()),
            ));
        }
        let n = fc.tokens() as f64;
        let nc = self_similarity(fc.tensor())?;
        let ncs = self_similarity(fcs.tensor())?;
        let level = nc.sub(&ncs)?.abs_elem()?.sum().affine(1.0 / (n * n), 0.0);
        total = total.add(&level)?;
    }
    Ok(total)
}

// ── 2-D content-distortion demonstration ─────────────────────────────

/// Outcome of the 2-D residual-distortion example.
#[derive(Debug, Clone)]
pub struct DistortionReport {
    /// Cosine similarity of the two content vectors.
    pub cos_before: f64,
    /// Cosine similarity after residual fusion with the attended style.
    pub cos_after_residual: f64,
    /// The residually fused vectors.
    pub residual: [[f64; 2]; 2],
    /// (gamma, cosine) for content scaled by gamma before adding the style.
    pub cos_after_scaled: Vec<(f64, f64)>,
}

fn cos2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dot = a[0] * b[0] + a[1] * b[1];
    let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
    let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
    dot / (na * nb + DENOM_EPS)
}

/// Attend two content vectors over two style vectors and fuse.
///
/// With these constants the softmax mass lands almost entirely on the first
/// style vector, so residual fusion drags both outputs toward it and the
/// pairwise cosine collapses to ~1. Scaling the content by a factor gamma
/// before the addition restores the original similarity as gamma grows.
pub fn distortion_demo() -> DistortionReport {
    let contents = [[0.5, 1.0], [4.0, 1.5]];
    let styles = [[3.5, 0.0], [-5.0, -5.0]];

    let attended = |c: [f64; 2]| -> [f64; 2] {
        let logits = [
            c[0] * styles[0][0] + c[1] * styles[0][1],
            c[0] * styles[1][0] + c[1] * styles[1][1],
        ];
        let m = logits[0].max(logits[1]);
        let e = [(logits[0] - m).exp(), (logits[1] - m).exp()];
        let z = e[0] + e[1];
        [
            (e[0] * styles[0][0] + e[1] * styles[1][0]) / z,
            (e[0] * styles[0][1] + e[1] * styles[1][1]) / z,
        ]
    };

    let fuse = |gamma: f64| -> [[f64; 2]; 2] {
        let mut out = [[0.0; 2]; 2];
        for (i, c) in contents.iter().enumerate() {
            let s = attended(*c);
            out[i] = [gamma * c[0] + s[0], gamma * c[1] + s[1]];
        }
        out
    };

    let residual = fuse(1.0);
    let cos_after_scaled = [1.0, 4.0, 10.0, 100.0]
        .iter()
        .map(|&g| {
            let o = fuse(g);
            (g, cos2(o[0], o[1]))
        })
        .collect();

    DistortionReport {
        cos_before: cos2(contents[0], contents[1]),
        cos_after_residual: cos2(residual[0], residual[1]),
        residual,
        cos_after_scaled,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{loss_features, Image, LossNetwork};
    use crate::feature::FeatureMap;
    use crate::gradcheck::{finite_diff_grad, max_rel_err};
    use crate::rng::Rng;

    fn random_pyramid(token_counts: &[usize], channels: &[usize], rng: &mut Rng) -> FeaturePyramid {
        FeaturePyramid {
            levels: token_counts
                .iter()
                .zip(channels)
                .map(|(&n, &c)| {
                    FeatureMap::flat(Tensor::uniform(&[n, c], -2.0, 2.0, rng)).unwrap()
                })
                .collect(),
        }
    }

    #[test]
    fn losses_vanish_on_identical_inputs() {
        let mut rng = Rng::new(1);
        let p = random_pyramid(&[8, 6, 4, 2], &[3, 4, 5, 6], &mut rng);
        let q = FeaturePyramid {
            levels: p.levels.clone(),
        };
        assert_eq!(content_loss(&p, &q).unwrap().value(), 0.0);
        assert_eq!(style_loss(&p, &q).unwrap().value(), 0.0);
        assert_eq!(similarity_metric(&p, &q).unwrap().value(), 0.0);
    }

    #[test]
    fn content_loss_invariant_to_per_channel_affine() {
        // Instance norm strips per-channel scale and shift, so transforming
        // one pyramid that way leaves the loss unchanged.
        let mut rng = Rng::new(2);
        let p = random_pyramid(&[8, 6], &[3, 4], &mut rng);
        let q = random_pyramid(&[8, 6], &[3, 4], &mut rng);
        let base = content_loss(&p, &q).unwrap().value();

        let scaled_levels: Vec<FeatureMap> = q
            .levels
            .iter()
            .map(|f| {
                let c = f.channels();
                let scales: Vec<f64> = (0..c).map(|_| rng.uniform(0.5, 3.0)).collect();
                let shifts: Vec<f64> = (0..c).map(|_| rng.uniform(-2.0, 2.0)).collect();
                let d: Vec<f64> = f
                    .tensor()
                    .to_vec()
                    .chunks_exact(c)
                    .flat_map(|row| {
                        row.iter()
                            .enumerate()
                            .map(|(j, v)| v * scales[j] + shifts[j])
                            .collect::<Vec<_>>()
                    })
                    .collect();
                f.with_tensor(Tensor::from_vec(d, &f.tensor().shape()).unwrap())
                    .unwrap()
            })
            .collect();
        let q_affine = FeaturePyramid {
            levels: scaled_levels,
        };
        let transformed = content_loss(&p, &q_affine).unwrap().value();
        // Exact only as the instance-norm eps goes to zero.
        assert!(
            (base - transformed).abs() / base < 1e-4,
            "{base} vs {transformed}"
        );
    }

    #[test]
    fn content_loss_degenerate_level_contributes_zero() {
        // One token, one channel: both sides normalize to zero.
        let a = FeaturePyramid {
            levels: vec![FeatureMap::flat(Tensor::from_vec(vec![3.0], &[1, 1]).unwrap()).unwrap()],
        };
        let b = FeaturePyramid {
            levels: vec![FeatureMap::flat(Tensor::from_vec(vec![-7.0], &[1, 1]).unwrap()).unwrap()],
        };
        assert_eq!(content_loss(&a, &b).unwrap().value(), 0.0);
    }

    #[test]
    fn style_loss_hand_case() {
        // One level, one channel: means 0 vs 1, stds 1 vs 1 -> loss 1.
        let a = FeaturePyramid {
            levels: vec![
                FeatureMap::flat(Tensor::from_vec(vec![-1.0, 1.0], &[2, 1]).unwrap()).unwrap(),
            ],
        };
        let b = FeaturePyramid {
            levels: vec![
                FeatureMap::flat(Tensor::from_vec(vec![0.0, 2.0], &[2, 1]).unwrap()).unwrap(),
            ],
        };
        let loss = style_loss(&a, &b).unwrap().value();
        assert!((loss - 1.0).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn style_loss_ignores_token_arrangement() {
        let mut rng = Rng::new(3);
        let p = random_pyramid(&[8], &[4], &mut rng);
        let shuffled = {
            let f = &p.levels[0];
            let mut rows: Vec<Vec<f64>> = f
                .tensor()
                .to_vec()
                .chunks_exact(4)
                .map(|r| r.to_vec())
                .collect();
            rows.reverse();
            rows.swap(0, 3);
            FeaturePyramid {
                levels: vec![FeatureMap::flat(
                    Tensor::from_vec(rows.concat(), &[8, 4]).unwrap(),
                )
                .unwrap()],
            }
        };
        let q = random_pyramid(&[5], &[4], &mut rng);
        let a = style_loss(&p, &q).unwrap().value();
        let b = style_loss(&shuffled, &q).unwrap().value();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn constant_images_have_zero_style_distance() {
        // Equal-size crops taken anywhere in a constant image are identical,
        // so their pyramid statistics coincide exactly.
        let net = LossNetwork::new(7);
        let crop = |_: (usize, usize)| {
            Image::from_unit_pixels(16, 16, vec![0.4; 3 * 16 * 16]).unwrap()
        };
        let a = loss_features(&crop((0, 0)), &net).unwrap();
        let b = loss_features(&crop((9, 5)), &net).unwrap();
        let loss = style_loss(&a, &b).unwrap().value();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn total_loss_weighting() {
        let c = Tensor::scalar(2.0);
        let s = Tensor::scalar(0.5);
        assert_eq!(
            total_loss(&c, &s, LossWeights::new(0.0).unwrap()).unwrap().value(),
            2.0
        );
        assert_eq!(
            total_loss(&c, &s, LossWeights::default()).unwrap().value(),
            7.0
        );
        let zero_style = Tensor::scalar(0.0);
        assert_eq!(
            total_loss(&c, &zero_style, LossWeights::new(1.0).unwrap()).unwrap().value(),
            2.0
        );
        assert!(LossWeights::new(-1.0).is_err());
    }

    /// Direct double-loop transcription of the similarity metric.
    fn brute_force_similarity(content: &FeaturePyramid, stylized: &FeaturePyramid) -> f64 {
        let mut total = 0.0;
        for x in 3..=4 {
            let fc = content.level(x).tensor().to_vec();
            let fcs = stylized.level(x).tensor().to_vec();
            let n = content.level(x).tokens();
            let c = content.level(x).channels();
            let dist = |f: &[f64], i: usize, j: usize| -> f64 {
                let (mut dot, mut ni, mut nj) = (0.0, 0.0, 0.0);
                for k in 0..c {
                    dot += f[i * c + k] * f[j * c + k];
                    ni += f[i * c + k] * f[i * c + k];
                    nj += f[j * c + k] * f[j * c + k];
                }
                1.0 - dot / (ni.sqrt() * nj.sqrt() + DENOM_EPS)
            };
            let mut level = 0.0;
            for j in 0..n {
                let mut sc = 0.0;
                let mut scs = 0.0;
                for k in 0..n {
                    sc += dist(&fc, k, j);
                    scs += dist(&fcs, k, j);
                }
                for i in 0..n {
                    level +=
                        (dist(&fc, i, j) / (sc + DENOM_EPS) - dist(&fcs, i, j) / (scs + DENOM_EPS)).abs();
                }
            }
            total += level / (n * n) as f64;
        }
        total
    }

    #[test]
    fn similarity_matches_brute_force_on_small_instances() {
        let mut rng = Rng::new(4);
        for trial in 0..50 {
            let n = rng.range_inclusive(2, 4);
            let c = rng.range_inclusive(1, 3);
            let p = random_pyramid(&[n, n, n, n], &[c, c, c, c], &mut rng);
            let q = random_pyramid(&[n, n, n, n], &[c, c, c, c], &mut rng);
            let fast = similarity_metric(&p, &q).unwrap().value();
            let brute = brute_force_similarity(&p, &q);
            assert!(
                (fast - brute).abs() < 1e-10,
                "trial {trial}: {fast} vs {brute}"
            );
        }
    }

    #[test]
    fn similarity_two_token_orthogonal_vs_parallel() {
        // Orthogonal content rows vs parallel stylized rows; the oracle is
        // the same double loop as above.
        let mk = |rows: Vec<f64>| {
            FeaturePyramid {
                levels: (0..4)
                    .map(|_| {
                        FeatureMap::flat(Tensor::from_vec(rows.clone(), &[2, 2]).unwrap()).unwrap()
                    })
                    .collect(),
            }
        };
        let content = mk(vec![1.0, 0.0, 0.0, 1.0]);
        let stylized = mk(vec![2.0, 0.0, 4.0, 0.0]);
        let got = similarity_metric(&content, &stylized).unwrap().value();
        let brute = brute_force_similarity(&content, &stylized);
        assert!((got - brute).abs() < 1e-12, "{got} vs {brute}");
        assert!(got > 0.0);
    }

    #[test]
    fn similarity_invariant_under_joint_token_permutation() {
        let mut rng = Rng::new(5);
        let n = 4;
        let p = random_pyramid(&[n, n, n, n], &[3, 3, 3, 3], &mut rng);
        let q = random_pyramid(&[n, n, n, n], &[3, 3, 3, 3], &mut rng);
        let base = similarity_metric(&p, &q).unwrap().value();

        let perm = [2usize, 0, 3, 1];
        let permute = |pyr: &FeaturePyramid| FeaturePyramid {
            levels: pyr
                .levels
                .iter()
                .map(|f| {
                    let c = f.channels();
                    let d = f.tensor().to_vec();
                    let mut out = Vec::with_capacity(d.len());
                    for &r in &perm {
                        out.extend_from_slice(&d[r * c..(r + 1) * c]);
                    }
                    FeatureMap::flat(Tensor::from_vec(out, &[n, c]).unwrap()).unwrap()
                })
                .collect(),
        };
        let permuted = similarity_metric(&permute(&p), &permute(&q)).unwrap().value();
        assert!((base - permuted).abs() < 1e-12, "{base} vs {permuted}");
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = Rng::new(6);
        let leaf = Tensor::uniform(&[4, 3], -2.0, 2.0, &mut rng);
        leaf.set_requires_grad(true);
        let fixed: Vec<FeatureMap> = (0..4)
            .map(|_| FeatureMap::flat(Tensor::uniform(&[4, 3], -2.0, 2.0, &mut rng)).unwrap())
            .collect();
        let build = |t: &Tensor| FeaturePyramid {
            levels: (0..4)
                .map(|_| FeatureMap::flat(t.clone()).unwrap())
                .collect(),
        };
        let fixed_pyr = || FeaturePyramid {
            levels: fixed.clone(),
        };

        type LossFn = fn(&FeaturePyramid, &FeaturePyramid) -> Result<Tensor>;
        let cases: [(&str, LossFn); 3] = [
            ("content", content_loss as LossFn),
            ("style", style_loss as LossFn),
            ("similarity", similarity_metric as LossFn),
        ];
        for (name, lf) in cases {
            leaf.clear_grad();
            let f = || lf(&fixed_pyr(), &build(&leaf)).unwrap();
            f().backward().unwrap();
            let fd = finite_diff_grad(&|_| f().value(), &leaf, 1e-5);
            let err = max_rel_err(&leaf.grad().unwrap(), &fd);
            assert!(err < 1e-4, "{name}: rel err {err}");
        }
    }

    #[test]
    fn distortion_demo_matches_published_example() {
        let r = distortion_demo();
        assert!((r.cos_before - 0.733).abs() < 1e-3, "{}", r.cos_before);
        assert!(r.cos_after_residual >= 0.998, "{}", r.cos_after_residual);
        // Residual outputs sit essentially on content + dominant style.
        assert!((r.residual[0][0] - 4.0).abs() < 0.01);
        assert!((r.residual[0][1] - 1.0).abs() < 0.01);
        assert!((r.residual[1][0] - 7.5).abs() < 0.01);
        assert!((r.residual[1][1] - 1.5).abs() < 0.01);
    }

    #[test]
    fn scaled_contents_restore_similarity_monotonically() {
        let r = distortion_demo();
        let cs: Vec<f64> = r.cos_after_scaled.iter().map(|(_, c)| *c).collect();
        assert_eq!(cs.len(), 4);
        for w in cs.windows(2) {
            assert!(w[0] > w[1], "expected strictly decreasing: {cs:?}");
        }
        assert!(*cs.last().unwrap() > r.cos_before);
        assert!(cs.last().unwrap() - r.cos_before < 0.02);
    }
}
