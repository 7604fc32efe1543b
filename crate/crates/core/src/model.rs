//! The full image-to-image model: encoder, style transformer, decoder, bound
//! to one parameter store.

use crate::backbone::{decode_features, encode_image, DecoderParams, Image, PatchEmbedParams};
use crate::error::Result;
use crate::feature::FeatureMap;
use crate::rng::Rng;
use crate::styletrans::{style_trans_forward, LayerCount, StyleTransformerParams};
use crate::tensor::ParamStore;

/// Architecture hyperparameters shared by every component.
#[derive(Debug, Clone, Copy)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub window: usize,
    pub shift: usize,
}

pub struct Model {
    pub embed: PatchEmbedParams,
    pub transformer: StyleTransformerParams,
    pub decoder: DecoderParams,
    pub cfg: ModelConfig,
}

impl Model {
    /// Register fresh parameters into `store` and bind a model to them.
    pub fn init(cfg: ModelConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Model> {
        Ok(Model {
            embed: PatchEmbedParams::init(store, cfg.d_model, cfg.heads, cfg.window, cfg.shift, rng)?,
            transformer: StyleTransformerParams::init(
                store, cfg.d_model, cfg.heads, cfg.window, cfg.shift, rng,
            )?,
            decoder: DecoderParams::init(store, cfg.d_model, rng)?,
            cfg,
        })
    }

    /// Bind to parameters that already exist in `store` (e.g. restored from a
    /// snapshot file).
    pub fn bind(cfg: ModelConfig, store: &ParamStore) -> Result<Model> {
        Ok(Model {
            embed: PatchEmbedParams::bind(store, cfg.d_model, cfg.heads, cfg.window, cfg.shift)?,
            transformer: StyleTransformerParams::bind(
                store, cfg.d_model, cfg.heads, cfg.window, cfg.shift,
            )?,
            decoder: DecoderParams::bind(store, cfg.d_model)?,
            cfg,
        })
    }

    pub fn encode(&self, image: &Image) -> Result<FeatureMap> {
        encode_image(image, &self.embed)
    }

    pub fn decode(&self, features: &FeatureMap) -> Result<Image> {
        decode_features(features, &self.decoder)
    }

    /// Stylized features from already-encoded style tokens; the entry point
    /// for multi-style and interpolation variants.
    pub fn stylize_features(
        &self,
        style_features: &FeatureMap,
        content: &Image,
        layers: LayerCount,
    ) -> Result<FeatureMap> {
        let content_features = self.encode(content)?;
        style_trans_forward(style_features, &content_features, &self.transformer, layers)
    }

    /// Full pipeline: encode both images, run the stack, decode.
    pub fn stylize(&self, content: &Image, style: &Image, layers: LayerCount) -> Result<Image> {
        let style_features = self.encode(style)?;
        let features = self.stylize_features(&style_features, content, layers)?;
        self.decode(&features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::no_grad;

    fn toy_model() -> (ParamStore, Model) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(40);
        let cfg = ModelConfig {
            d_model: 8,
            heads: 2,
            window: 2,
            shift: 1,
        };
        let model = Model::init(cfg, &mut store, &mut rng).unwrap();
        (store, model)
    }

    fn random_image(size: usize, seed: u64) -> Image {
        let mut rng = Rng::new(seed);
        let data = (0..3 * size * size).map(|_| rng.next_f64()).collect();
        Image::from_unit_pixels(size, size, data).unwrap()
    }

    #[test]
    fn zero_layer_stylize_equals_encode_decode() {
        let (_store, model) = toy_model();
        let content = random_image(16, 1);
        let style = random_image(16, 2);
        let _g = no_grad();
        let stylized = model.stylize(&content, &style, LayerCount(0)).unwrap();
        let roundtrip = model.decode(&model.encode(&content).unwrap()).unwrap();
        let a = stylized.tensor().to_vec();
        let b = roundtrip.tensor().to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn stylize_output_has_content_dimensions() {
        let (_store, model) = toy_model();
        let content = random_image(24, 3);
        let style = random_image(16, 4);
        let _g = no_grad();
        let out = model.stylize(&content, &style, LayerCount(2)).unwrap();
        assert_eq!((out.height(), out.width()), (24, 24));
    }

    #[test]
    fn bind_reconstructs_identical_model() {
        let (store, model) = toy_model();
        let content = random_image(16, 5);
        let style = random_image(16, 6);
        let _g = no_grad();
        let a = model.stylize(&content, &style, LayerCount(2)).unwrap();

        let snap = store.snapshot();
        let store2 = ParamStore::from_snapshot(&snap).unwrap();
        let model2 = Model::bind(model.cfg, &store2).unwrap();
        let b = model2.stylize(&content, &style, LayerCount(2)).unwrap();
        for (x, y) in a.tensor().to_vec().iter().zip(b.tensor().to_vec()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
