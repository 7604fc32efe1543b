//! Image-side networks: the patch-embedding encoder (a small stand-in for a
//! hierarchical window-attention backbone), the upsampling decoder, and the
//! fixed random feature pyramid that the losses are computed on.
//!
//! The loss network is deliberately frozen: its weights are drawn once from
//! their own seed, never live in a parameter store, and only its *input*
//! receives gradients.

use crate::attention::{init_bias, init_linear, multi_head_attention, AttentionWeights, Mlp, WindowPlan};
use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::rng::Rng;
use crate::tensor::ops::GATHER_PAD;
use crate::tensor::{ParamGroup, ParamStore, Tensor};
use std::rc::Rc;

// ── Image ────────────────────────────────────────────────────────────

/// A 3-channel image, stored `[3, height, width]`. Pixel data loaded from
/// files or synthesized lives in [0, 1]; decoder outputs are raw and only get
/// clamped at serialization time.
#[derive(Clone)]
pub struct Image {
    tensor: Tensor,
}

impl Image {
    /// Wrap a raw `[3, h, w]` tensor (no range check).
    pub fn from_tensor(tensor: Tensor) -> Result<Image> {
        let s = tensor.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape("Image", "[3, h, w]", format!("{s:?}")));
        }
        if !tensor.all_finite() {
            return Err(Error::NonFinite("image"));
        }
        Ok(Image { tensor })
    }

    /// Build from unit-range pixel data, channel-major. Errors outside [0, 1].
    pub fn from_unit_pixels(height: usize, width: usize, data: Vec<f64>) -> Result<Image> {
        if data.len() != 3 * height * width {
            return Err(Error::shape(
                "Image",
                format!("{} pixel values", 3 * height * width),
                format!("{}", data.len()),
            ));
        }
        if !data.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::invalid("Image: pixel values outside [0, 1]"));
        }
        Ok(Image {
            tensor: Tensor::from_vec(data, &[3, height, width])?,
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }
}

// ── Patch-embedding encoder ──────────────────────────────────────────

/// 4x4 patch embedding, a window-attention block, one 2x patch merge, and a
/// second (shifted) window-attention block: overall spatial reduction 8x.
pub struct PatchEmbedParams {
    embed_w: Tensor,
    embed_b: Tensor,
    block1: WindowBlock,
    merge_w: Tensor,
    merge_b: Tensor,
    block2: WindowBlock,
    pub d_model: usize,
    pub window: usize,
    pub shift: usize,
}

struct WindowBlock {
    attn: AttentionWeights,
    mlp: Mlp,
}

impl WindowBlock {
    fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<WindowBlock> {
        Ok(WindowBlock {
            attn: AttentionWeights::init(store, &format!("{prefix}.attn"), d_model, heads, ParamGroup::Other, rng)?,
            mlp: Mlp::init(store, &format!("{prefix}.mlp"), d_model, 2 * d_model, d_model, ParamGroup::Other, rng)?,
        })
    }

    fn bind(store: &ParamStore, prefix: &str, d_model: usize, heads: usize) -> Result<WindowBlock> {
        Ok(WindowBlock {
            attn: AttentionWeights::bind(store, &format!("{prefix}.attn"), d_model, heads)?,
            mlp: Mlp::bind(store, &format!("{prefix}.mlp"))?,
        })
    }

    fn forward(&self, f: &FeatureMap, plan: &WindowPlan) -> Result<FeatureMap> {
        let (att, _) = multi_head_attention(f, f, f, &self.attn, plan, None)?;
        let x = f.with_tensor(f.tensor().add(att.tensor())?)?;
        x.with_tensor(x.tensor().add(&self.mlp.forward(x.tensor())?)?)
    }
}

impl PatchEmbedParams {
    pub fn init(
        store: &mut ParamStore,
        d_model: usize,
        heads: usize,
        window: usize,
        shift: usize,
        rng: &mut Rng,
    ) -> Result<PatchEmbedParams> {
        Ok(PatchEmbedParams {
            embed_w: store.register("backbone.embed.w", init_linear(48, d_model, rng), ParamGroup::Other)?,
            embed_b: store.register("backbone.embed.b", init_bias(48, d_model, rng), ParamGroup::Other)?,
            block1: WindowBlock::init(store, "backbone.block1", d_model, heads, rng)?,
            merge_w: store.register(
                "backbone.merge.w",
                init_linear(4 * d_model, d_model, rng),
                ParamGroup::Other,
            )?,
            merge_b: store.register(
                "backbone.merge.b",
                init_bias(4 * d_model, d_model, rng),
                ParamGroup::Other,
            )?,
            block2: WindowBlock::init(store, "backbone.block2", d_model, heads, rng)?,
            d_model,
            window,
            shift,
        })
    }

    pub fn bind(
        store: &ParamStore,
        d_model: usize,
        heads: usize,
        window: usize,
        shift: usize,
    ) -> Result<PatchEmbedParams> {
        Ok(PatchEmbedParams {
            embed_w: store.get("backbone.embed.w")?,
            embed_b: store.get("backbone.embed.b")?,
            block1: WindowBlock::bind(store, "backbone.block1", d_model, heads)?,
            merge_w: store.get("backbone.merge.w")?,
            merge_b: store.get("backbone.merge.b")?,
            block2: WindowBlock::bind(store, "backbone.block2", d_model, heads)?,
            d_model,
            window,
            shift,
        })
    }
}

/// Image -> token grid at 1/8 the spatial resolution, width `d_model`.
/// Dimensions must be divisible by 8; there is no silent resizing.
pub fn encode_image(image: &Image, p: &PatchEmbedParams) -> Result<FeatureMap> {
    let (h, w) = (image.height(), image.width());
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::invalid(format!(
            "encode_image: dimensions {h}x{w} not divisible by 8"
        )));
    }

    // 4x4 patches, channel-major within each patch row.
    let (ph, pw) = (h / 4, w / 4);
    let mut idx = Vec::with_capacity(ph * pw * 48);
    for py in 0..ph {
        for px in 0..pw {
            for c in 0..3 {
                for dy in 0..4 {
                    for dx in 0..4 {
                        idx.push(c * h * w + (4 * py + dy) * w + (4 * px + dx));
                    }
                }
            }
        }
    }
    let idx: Rc<[usize]> = idx.into();
    let patches = image.tensor().gather_elems(idx, &[ph * pw, 48])?;
    let embedded = patches.matmul(&p.embed_w)?.add_row(&p.embed_b)?;
    let f = FeatureMap::new(embedded, ph, pw)?;

    let plan1 = WindowPlan::new(ph, pw, p.window, 0)?;
    let f = p.block1.forward(&f, &plan1)?;

    // 2x patch merge: concatenate each 2x2 token group, project back to d.
    let d = p.d_model;
    let (mh, mw) = (ph / 2, pw / 2);
    let mut idx = Vec::with_capacity(mh * mw * 4 * d);
    for y in 0..mh {
        for x in 0..mw {
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let t = (2 * y + dy) * pw + 2 * x + dx;
                idx.extend((0..d).map(|c| t * d + c));
            }
        }
    }
    let idx: Rc<[usize]> = idx.into();
    let merged = f
        .tensor()
        .gather_elems(idx, &[mh * mw, 4 * d])?
        .matmul(&p.merge_w)?
        .add_row(&p.merge_b)?;
    let f = FeatureMap::new(merged, mh, mw)?;

    let plan2 = WindowPlan::new(mh, mw, p.window, p.shift)?;
    p.block2.forward(&f, &plan2)
}

// ── Upsampling decoder ───────────────────────────────────────────────

/// Three (2x nearest upsample, 3x3 conv, ReLU) blocks and a final 3x3 conv to
/// RGB: overall spatial expansion 8x.
pub struct DecoderParams {
    convs: Vec<(Tensor, Tensor)>,
    out_w: Tensor,
    out_b: Tensor,
    widths: Vec<usize>,
}

/// Decoder channel plan for a given feature width.
pub fn decoder_widths(d_model: usize) -> Vec<usize> {
    let half = (d_model / 2).max(4);
    vec![d_model, half, half]
}

impl DecoderParams {
    pub fn init(store: &mut ParamStore, d_model: usize, rng: &mut Rng) -> Result<DecoderParams> {
        let widths = decoder_widths(d_model);
        let mut convs = Vec::new();
        let mut c_in = d_model;
        for (i, &c_out) in widths.iter().enumerate() {
            let w = store.register(
                &format!("decoder.conv{i}.w"),
                init_conv(c_out, c_in, rng),
                ParamGroup::Other,
            )?;
            let b = store.register(
                &format!("decoder.conv{i}.b"),
                init_conv_bias(c_in, c_out, rng),
                ParamGroup::Other,
            )?;
            convs.push((w, b));
            c_in = c_out;
        }
        let out_w = store.register("decoder.out.w", init_conv(3, c_in, rng), ParamGroup::Other)?;
        let out_b = store.register("decoder.out.b", init_conv_bias(c_in, 3, rng), ParamGroup::Other)?;
        Ok(DecoderParams {
            convs,
            out_w,
            out_b,
            widths,
        })
    }

    pub fn bind(store: &ParamStore, d_model: usize) -> Result<DecoderParams> {
        let widths = decoder_widths(d_model);
        let mut convs = Vec::new();
        for i in 0..widths.len() {
            convs.push((
                store.get(&format!("decoder.conv{i}.w"))?,
                store.get(&format!("decoder.conv{i}.b"))?,
            ));
        }
        Ok(DecoderParams {
            convs,
            out_w: store.get("decoder.out.w")?,
            out_b: store.get("decoder.out.b")?,
            widths,
        })
    }
}

fn init_conv(c_out: usize, c_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / ((c_in * 9) as f64).sqrt();
    Tensor::uniform(&[c_out, c_in, 3, 3], -bound, bound, rng)
}

fn init_conv_bias(c_in: usize, c_out: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / ((c_in * 9) as f64).sqrt();
    Tensor::uniform(&[c_out], -bound, bound, rng)
}

/// Token grid -> `[channels, grid_h, grid_w]` image-layout tensor.
fn tokens_to_planes(f: &FeatureMap) -> Result<Tensor> {
    let (h, w) = f.grid();
    let c = f.channels();
    let mut idx = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                idx.push((y * w + x) * c + ch);
            }
        }
    }
    let idx: Rc<[usize]> = idx.into();
    f.tensor().gather_elems(idx, &[c, h, w])
}

/// `[c, h, w]` -> `[2h x 2w]` nearest-neighbor upsample.
fn upsample2(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut idx = Vec::with_capacity(c * 4 * h * w);
    for ch in 0..c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                idx.push(ch * h * w + (y / 2) * w + xx / 2);
            }
        }
    }
    let idx: Rc<[usize]> = idx.into();
    x.gather_elems(idx, &[c, 2 * h, 2 * w])
}

/// Feature grid -> image at 8x the grid resolution. Raw values; clamping to
/// [0, 1] happens only when the image is serialized.
pub fn decode_features(f: &FeatureMap, p: &DecoderParams) -> Result<Image> {
    if f.channels() != p.widths[0] {
        return Err(Error::shape(
            "decode_features",
            format!("{} channels", p.widths[0]),
            format!("{}", f.channels()),
        ));
    }
    let mut x = tokens_to_planes(f)?;
    for (w, b) in &p.convs {
        x = upsample2(&x)?.conv3x3(w, b)?.relu()?;
    }
    let out = x.conv3x3(&p.out_w, &p.out_b)?;
    Image::from_tensor(out)
}

// ── Fixed loss network ───────────────────────────────────────────────

/// Channel widths of the four pyramid stages (levels x = 2..5).
pub const LOSS_NET_CHANNELS: [usize; 4] = [16, 32, 64, 128];

/// Four frozen conv stages (3x3 conv + ReLU + 2x average pool) producing
/// feature maps at 1/2, 1/4, 1/8, and 1/16 resolution. Weights are drawn
/// once from the given seed and never updated; the network stays
/// differentiable with respect to its input.
pub struct LossNetwork {
    stages: Vec<(Tensor, Tensor)>,
    pub seed: u64,
}

impl LossNetwork {
    pub fn new(seed: u64) -> LossNetwork {
        let mut rng = Rng::new(seed);
        let mut stages = Vec::with_capacity(4);
        let mut c_in = 3;
        for &c_out in &LOSS_NET_CHANNELS {
            let w = init_conv(c_out, c_in, &mut rng);
            let b = init_conv_bias(c_in, c_out, &mut rng);
            stages.push((w, b));
            c_in = c_out;
        }
        LossNetwork { stages, seed }
    }

    /// Raw stage weights, exposed for reproducibility checks.
    pub fn stage_weights(&self) -> impl Iterator<Item = (&Tensor, &Tensor)> {
        self.stages.iter().map(|(w, b)| (w, b))
    }
}

/// Feature pyramid for the losses: `levels[i]` is level `x = i + 2`.
pub struct FeaturePyramid {
    pub levels: Vec<FeatureMap>,
}

impl FeaturePyramid {
    pub fn level(&self, x: usize) -> &FeatureMap {
        assert!((2..=5).contains(&x), "pyramid levels are x = 2..5");
        &self.levels[x - 2]
    }
}

/// Run the frozen pyramid on an image. Errors below 16x16, where the deepest
/// stage would collapse to nothing.
pub fn loss_features(image: &Image, net: &LossNetwork) -> Result<FeaturePyramid> {
    let (h, w) = (image.height(), image.width());
    if h < 16 || w < 16 {
        return Err(Error::invalid(format!(
            "loss_features: image {h}x{w} smaller than 16x16"
        )));
    }
    let mut x = image.tensor().clone();
    let mut levels = Vec::with_capacity(4);
    for (wt, b) in &net.stages {
        x = x.conv3x3(wt, b)?.relu()?.avg_pool2()?;
        levels.push(planes_to_tokens(&x)?);
    }
    Ok(FeaturePyramid { levels })
}

/// `[c, h, w]` -> token view `(h*w) x c`, preserving the spatial grid.
fn planes_to_tokens(x: &Tensor) -> Result<FeatureMap> {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut idx = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for xx in 0..w {
            idx.extend((0..c).map(|ch| ch * h * w + y * w + xx));
        }
    }
    let idx: Rc<[usize]> = idx.into();
    FeatureMap::new(x.gather_elems(idx, &[h * w, c])?, h, w)
}

// Keep the sentinel import alive for doc references in this module.
#[allow(unused)]
const _: usize = GATHER_PAD;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, finite_diff_grad_at, max_rel_err};

    fn test_backbone(d_model: usize, seed: u64) -> (ParamStore, PatchEmbedParams, DecoderParams) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let embed = PatchEmbedParams::init(&mut store, d_model, 2, 2, 1, &mut rng).unwrap();
        let dec = DecoderParams::init(&mut store, d_model, &mut rng).unwrap();
        (store, embed, dec)
    }

    fn random_image(h: usize, w: usize, rng: &mut Rng) -> Image {
        let data = (0..3 * h * w).map(|_| rng.next_f64()).collect();
        Image::from_unit_pixels(h, w, data).unwrap()
    }

    #[test]
    fn encode_token_counts() {
        let (_s, embed, _d) = test_backbone(8, 1);
        let mut rng = Rng::new(2);
        // 64x64 -> 8x8 grid = 64 tokens; 32x32 -> 16 tokens.
        let f = encode_image(&random_image(64, 64, &mut rng), &embed).unwrap();
        assert_eq!(f.tokens(), 64);
        assert_eq!(f.grid(), (8, 8));
        let f = encode_image(&random_image(32, 32, &mut rng), &embed).unwrap();
        assert_eq!(f.tokens(), 16);
        assert_eq!(f.channels(), 8);
    }

    #[test]
    fn encode_rejects_non_divisible_dims() {
        let (_s, embed, _d) = test_backbone(8, 3);
        let mut rng = Rng::new(4);
        let img = random_image(20, 64, &mut rng);
        assert!(encode_image(&img, &embed).is_err());
    }

    #[test]
    fn decode_expands_8x_and_roundtrips_shape() {
        let (_s, embed, dec) = test_backbone(8, 5);
        let mut rng = Rng::new(6);
        for (h, w) in [(16, 16), (32, 16), (64, 64)] {
            let img = random_image(h, w, &mut rng);
            let f = encode_image(&img, &embed).unwrap();
            let out = decode_features(&f, &dec).unwrap();
            assert_eq!((out.height(), out.width()), (h, w));
        }
    }

    #[test]
    fn decode_zero_features_zero_biases_gives_zero_image() {
        let (store, _embed, dec) = test_backbone(8, 7);
        for name in ["decoder.conv0.b", "decoder.conv1.b", "decoder.conv2.b", "decoder.out.b"] {
            let b = store.get(name).unwrap();
            b.set_data(&vec![0.0; b.numel()]);
        }
        let f = FeatureMap::new(Tensor::zeros(&[4, 8]), 2, 2).unwrap();
        let out = decode_features(&f, &dec).unwrap();
        assert!(out.tensor().to_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn loss_network_is_deterministic_and_frozen() {
        let a = LossNetwork::new(7);
        let b = LossNetwork::new(7);
        for ((w1, b1), (w2, b2)) in a.stage_weights().zip(b.stage_weights()) {
            let (w1, w2) = (w1.to_vec(), w2.to_vec());
            for (x, y) in w1.iter().zip(&w2) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            assert_eq!(b1.to_vec(), b2.to_vec());
            assert!(!w2.is_empty());
        }
        for (w, bias) in a.stage_weights() {
            assert!(!w.requires_grad());
            assert!(!bias.requires_grad());
        }
    }

    #[test]
    fn pyramid_shapes_and_determinism() {
        let net = LossNetwork::new(7);
        let mut rng = Rng::new(8);
        let img = random_image(32, 32, &mut rng);
        let p1 = loss_features(&img, &net).unwrap();
        let p2 = loss_features(&img, &net).unwrap();
        assert_eq!(p1.levels.len(), 4);
        for (x, expect_c) in (2..=5).zip(LOSS_NET_CHANNELS) {
            let f = p1.level(x);
            assert_eq!(f.channels(), expect_c);
            let scale = 1 << (x - 1);
            assert_eq!(f.grid(), (32 / scale, 32 / scale));
            let (a, b) = (f.tensor().to_vec(), p2.level(x).tensor().to_vec());
            for (u, v) in a.iter().zip(&b) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
        assert!(loss_features(&random_image(8, 8, &mut rng), &net).is_err());
    }

    #[test]
    fn encode_gradient_wrt_pixels_matches_finite_differences() {
        let (store, embed, _d) = test_backbone(8, 9);
        let mut rng = Rng::new(10);
        // An 8x8 image reduces to a single token of width d_model.
        let img = random_image(8, 8, &mut rng);
        img.tensor().set_requires_grad(true);
        let proj = Tensor::uniform(&[1, 8], -1.0, 1.0, &mut rng);
        let f = || {
            let feat = encode_image(&img, &embed).unwrap();
            feat.tensor().mul(&proj).unwrap().sum()
        };
        store.zero_grads();
        f().backward().unwrap();
        let fd = finite_diff_grad(&|_| f().value(), img.tensor(), 1e-5);
        let err = max_rel_err(&img.tensor().grad().unwrap(), &fd);
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn pyramid_gradient_wrt_pixels_matches_finite_differences() {
        let net = LossNetwork::new(11);
        let mut rng = Rng::new(12);
        let img = random_image(16, 16, &mut rng);
        img.tensor().set_requires_grad(true);
        let f = || {
            let pyr = loss_features(&img, &net).unwrap();
            pyr.level(5).tensor().sum()
        };
        f().backward().unwrap();
        // A full sweep over 768 pixels is slow; spot-check a spread of them.
        let indices: Vec<usize> = (0..img.tensor().numel()).step_by(53).collect();
        let fd = finite_diff_grad_at(&|_| f().value(), img.tensor(), &indices, 1e-5);
        let ad = img.tensor().grad().unwrap();
        let ad_at: Vec<f64> = indices.iter().map(|&i| ad[i]).collect();
        let err = max_rel_err(&ad_at, &fd);
        assert!(err < 1e-4, "rel err {err}");
    }
}
