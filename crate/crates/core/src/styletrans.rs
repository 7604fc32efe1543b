//! The style transformer: one shared parameter set executed as alternating
//! encoder and decoder layers.
//!
//! The encoder layer refines the style code — cross-attention keys plus
//! scaling and shifting value tokens — using a single self-attention map for
//! all three streams and no normalization anywhere (second-order feature
//! statistics carry style information, so they must survive the encoder).
//! The decoder layer lets content tokens attend over the style code and then
//! fuses with `scale ⊙ content + shift` instead of a residual connection,
//! which is what keeps pairwise content similarity intact.
//!
//! Because every stacked layer reuses the same parameters, the depth of the
//! stack is a free knob at inference time and the parameter count does not
//! depend on it.

use crate::attention::{multi_head_attention, AttentionWeights, Mlp, WindowPlan};
use crate::error::{Error, Result};
use crate::feature::{instance_norm, FeatureMap};
use crate::rng::Rng;
use crate::tensor::{ParamGroup, ParamStore, Tensor};

/// Epsilon used by every instance normalization in the model.
pub const IN_EPS: f64 = 1e-5;

/// Number of stacked layers for one forward pass. Zero is a valid identity
/// stack; training samples from `1..=max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerCount(pub usize);

/// The style code threaded through encoder layers: cross-attention keys,
/// scaling tokens, and shifting tokens. All three start as the style feature.
#[derive(Clone)]
pub struct StyleCode {
    pub keys: FeatureMap,
    pub scale: FeatureMap,
    pub shift: FeatureMap,
}

impl StyleCode {
    pub fn init(style_features: &FeatureMap) -> StyleCode {
        StyleCode {
            keys: style_features.clone(),
            scale: style_features.clone(),
            shift: style_features.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        let (n, c) = (self.keys.tokens(), self.keys.channels());
        for (name, f) in [("scale", &self.scale), ("shift", &self.shift)] {
            if f.tokens() != n || f.channels() != c {
                return Err(Error::shape(
                    "StyleCode",
                    format!("{n} x {c} tokens like the keys"),
                    format!("{} x {} in {name}", f.tokens(), f.channels()),
                ));
            }
        }
        Ok(())
    }
}

/// One value stream of the encoder layer: its own value/output projections
/// and its own MLP, with the Q/K projections shared across streams.
pub struct EncoderStream {
    pub attn: AttentionWeights,
    pub mlp: Mlp,
}

/// The single shared parameter set. Encoder-layer parameters carry the
/// `style_encoder` group tag (the set updated by fast adaptation); the
/// decoder-layer set is tagged `other`.
pub struct StyleTransformerParams {
    pub enc_keys: EncoderStream,
    pub enc_scale: EncoderStream,
    pub enc_shift: EncoderStream,
    pub dec_self: AttentionWeights,
    pub dec_cross_scale: AttentionWeights,
    pub dec_cross_shift: AttentionWeights,
    pub dec_mlp: Mlp,
    pub d_model: usize,
    pub heads: usize,
    pub window: usize,
    pub shift: usize,
}

impl StyleTransformerParams {
    pub fn init(
        store: &mut ParamStore,
        d_model: usize,
        heads: usize,
        window: usize,
        shift: usize,
        rng: &mut Rng,
    ) -> Result<StyleTransformerParams> {
        let hidden = 2 * d_model;
        let enc = ParamGroup::StyleEncoder;
        let dec = ParamGroup::Other;

        // One Q/K set shared by the three encoder streams.
        let (wq, wk) = AttentionWeights::init_qk(store, "st.enc.attn", d_model, heads, enc, rng)?;
        let stream = |store: &mut ParamStore, name: &str, rng: &mut Rng| -> Result<EncoderStream> {
            Ok(EncoderStream {
                attn: AttentionWeights::init_vo(
                    store,
                    &format!("st.enc.{name}"),
                    wq.clone(),
                    wk.clone(),
                    d_model,
                    heads,
                    enc,
                    rng,
                )?,
                mlp: Mlp::init(store, &format!("st.enc.{name}.mlp"), d_model, hidden, d_model, enc, rng)?,
            })
        };
        let enc_keys = stream(store, "keys", rng)?;
        let enc_scale = stream(store, "scale", rng)?;
        let enc_shift = stream(store, "shift", rng)?;

        let dec_self = AttentionWeights::init(store, "st.dec.self", d_model, heads, dec, rng)?;
        let (cwq, cwk) = AttentionWeights::init_qk(store, "st.dec.cross", d_model, heads, dec, rng)?;
        let dec_cross_scale = AttentionWeights::init_vo(
            store,
            "st.dec.cross.scale",
            cwq.clone(),
            cwk.clone(),
            d_model,
            heads,
            dec,
            rng,
        )?;
        let dec_cross_shift =
            AttentionWeights::init_vo(store, "st.dec.cross.shift", cwq, cwk, d_model, heads, dec, rng)?;
        let dec_mlp = Mlp::init(store, "st.dec.mlp", d_model, hidden, d_model, dec, rng)?;

        Ok(StyleTransformerParams {
            enc_keys,
            enc_scale,
            enc_shift,
            dec_self,
            dec_cross_scale,
            dec_cross_shift,
            dec_mlp,
            d_model,
            heads,
            window,
            shift,
        })
    }

    /// Re-create the handles from an existing store (e.g. after restoring a
    /// snapshot into a fresh store).
    pub fn bind(
        store: &ParamStore,
        d_model: usize,
        heads: usize,
        window: usize,
        shift: usize,
    ) -> Result<StyleTransformerParams> {
        let stream = |name: &str| -> Result<EncoderStream> {
            Ok(EncoderStream {
                attn: AttentionWeights::bind_shared_qk(
                    store,
                    "st.enc.attn",
                    &format!("st.enc.{name}"),
                    d_model,
                    heads,
                )?,
                mlp: Mlp::bind(store, &format!("st.enc.{name}.mlp"))?,
            })
        };
        Ok(StyleTransformerParams {
            enc_keys: stream("keys")?,
            enc_scale: stream("scale")?,
            enc_shift: stream("shift")?,
            dec_self: AttentionWeights::bind(store, "st.dec.self", d_model, heads)?,
            dec_cross_scale: AttentionWeights::bind_shared_qk(
                store,
                "st.dec.cross",
                "st.dec.cross.scale",
                d_model,
                heads,
            )?,
            dec_cross_shift: AttentionWeights::bind_shared_qk(
                store,
                "st.dec.cross",
                "st.dec.cross.shift",
                d_model,
                heads,
            )?,
            dec_mlp: Mlp::bind(store, "st.dec.mlp")?,
            d_model,
            heads,
            window,
            shift,
        })
    }

    fn plan_for(&self, f: &FeatureMap) -> Result<WindowPlan> {
        let (h, w) = f.grid();
        WindowPlan::new(h, w, self.window, self.shift)
    }
}

/// How the decoder combines content with the attended scale/shift tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    /// `scale ⊙ content + shift` — the model's replacement for the residual.
    ScaleShift,
    /// Pass the content through unchanged; diagnostic mode for verifying that
    /// the rest of the layer is a pure residual structure.
    Identity,
}

/// One encoder layer: six residual updates — self-attention plus MLP for each
/// of the key, scale, and shift streams — where the self-attention map is
/// computed once from the incoming keys and reused for all three streams.
/// Also returns the shared map so tests can inspect it.
pub fn encoder_layer(
    code: &StyleCode,
    p: &StyleTransformerParams,
) -> Result<(StyleCode, crate::attention::AttentionMap)> {
    code.validate()?;
    if code.keys.channels() != p.d_model {
        return Err(Error::shape(
            "encoder_layer",
            format!("channel width {}", p.d_model),
            format!("{}", code.keys.channels()),
        ));
    }
    let plan = p.plan_for(&code.keys)?;

    let (k_att, map) = multi_head_attention(&code.keys, &code.keys, &code.keys, &p.enc_keys.attn, &plan, None)?;
    let k1 = code.keys.with_tensor(code.keys.tensor().add(k_att.tensor())?)?;
    let k2 = k1.with_tensor(k1.tensor().add(&p.enc_keys.mlp.forward(k1.tensor())?)?)?;

    let (s_att, _) =
        multi_head_attention(&code.keys, &code.keys, &code.scale, &p.enc_scale.attn, &plan, Some(&map))?;
    let s1 = code.scale.with_tensor(code.scale.tensor().add(s_att.tensor())?)?;
    let s2 = s1.with_tensor(s1.tensor().add(&p.enc_scale.mlp.forward(s1.tensor())?)?)?;

    let (m_att, _) =
        multi_head_attention(&code.keys, &code.keys, &code.shift, &p.enc_shift.attn, &plan, Some(&map))?;
    let m1 = code.shift.with_tensor(code.shift.tensor().add(m_att.tensor())?)?;
    let m2 = m1.with_tensor(m1.tensor().add(&p.enc_shift.mlp.forward(m1.tensor())?)?)?;

    Ok((
        StyleCode {
            keys: k2,
            scale: s2,
            shift: m2,
        },
        map,
    ))
}

/// One decoder layer. Self-attention residual; instance-normalized
/// cross-attention (queries from content, keys from the style code) whose map
/// is shared between the scale and shift streams; `scale ⊙ content + shift`
/// fusion; residual MLP. Returns the fused map plus both cross-attention maps
/// for inspection.
pub fn decoder_layer_with_fusion(
    content: &FeatureMap,
    code: &StyleCode,
    p: &StyleTransformerParams,
    fusion: Fusion,
) -> Result<(FeatureMap, crate::attention::AttentionMap, crate::attention::AttentionMap)> {
    if content.channels() != p.d_model {
        return Err(Error::shape(
            "decoder_layer",
            format!("channel width {}", p.d_model),
            format!("{}", content.channels()),
        ));
    }
    code.validate()?;
    let plan = p.plan_for(content)?;

    let (self_att, _) = multi_head_attention(content, content, content, &p.dec_self, &plan, None)?;
    let f1 = content.with_tensor(content.tensor().add(self_att.tensor())?)?;

    let qn = instance_norm(&f1, IN_EPS)?;
    let kn = instance_norm(&code.keys, IN_EPS)?;
    let (sigma, cross_map) =
        multi_head_attention(&qn, &kn, &code.scale, &p.dec_cross_scale, &plan, None)?;
    let (mu, cross_map_shift) =
        multi_head_attention(&qn, &kn, &code.shift, &p.dec_cross_shift, &plan, Some(&cross_map))?;

    let fused = match fusion {
        Fusion::ScaleShift => sigma.tensor().mul(f1.tensor())?.add(mu.tensor())?,
        Fusion::Identity => f1.tensor().clone(),
    };
    let out = f1.with_tensor(fused.add(&p.dec_mlp.forward(&fused)?)?)?;
    Ok((out, cross_map, cross_map_shift))
}

pub fn decoder_layer(
    content: &FeatureMap,
    code: &StyleCode,
    p: &StyleTransformerParams,
) -> Result<FeatureMap> {
    decoder_layer_with_fusion(content, code, p, Fusion::ScaleShift).map(|(f, _, _)| f)
}

/// The full stack: initialize the style code from the style features and the
/// working map from the content features, then run `layers` rounds of
/// encoder-then-decoder, each feeding the next. Zero layers returns the
/// content features untouched.
pub fn style_trans_forward(
    style_features: &FeatureMap,
    content_features: &FeatureMap,
    p: &StyleTransformerParams,
    layers: LayerCount,
) -> Result<FeatureMap> {
    style_trans_forward_with_fusion(style_features, content_features, p, layers, Fusion::ScaleShift)
}

pub fn style_trans_forward_with_fusion(
    style_features: &FeatureMap,
    content_features: &FeatureMap,
    p: &StyleTransformerParams,
    layers: LayerCount,
    fusion: Fusion,
) -> Result<FeatureMap> {
    let mut code = StyleCode::init(style_features);
    let mut out = content_features.clone();
    for _ in 0..layers.0 {
        let (next, _) = encoder_layer(&code, p)?;
        code = next;
        let (fused, _, _) = decoder_layer_with_fusion(&out, &code, p, fusion)?;
        out = fused;
    }
    Ok(out)
}

/// Linear interpolation between two stylized feature maps.
pub fn interpolate_outputs(a: &FeatureMap, b: &FeatureMap, alpha: f64) -> Result<FeatureMap> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!(
            "interpolate_outputs: alpha {alpha} outside [0, 1]"
        )));
    }
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::shape(
            "interpolate_outputs",
            format!("{:?}", a.tensor().shape()),
            format!("{:?}", b.tensor().shape()),
        ));
    }
    if alpha == 1.0 {
        return Ok(a.clone());
    }
    if alpha == 0.0 {
        return Ok(b.clone());
    }
    a.with_tensor(a.tensor().scale(alpha).add(&b.tensor().scale(1.0 - alpha))?)
}

/// Concatenate several style token sets into one (multi-style transfer).
/// A single input is passed through unchanged; merged sets lose their 2-D
/// grid and carry a flat `n x 1` layout.
pub fn merge_styles(styles: &[FeatureMap]) -> Result<FeatureMap> {
    if styles.is_empty() {
        return Err(Error::invalid("merge_styles: empty style list"));
    }
    if styles.len() == 1 {
        return Ok(styles[0].clone());
    }
    let c = styles[0].channels();
    for s in styles {
        if s.channels() != c {
            return Err(Error::shape(
                "merge_styles",
                format!("{c} channels"),
                format!("{}", s.channels()),
            ));
        }
    }
    let tensors: Vec<Tensor> = styles.iter().map(|s| s.tensor().clone()).collect();
    FeatureMap::flat(Tensor::concat_rows(&tensors)?)
}
