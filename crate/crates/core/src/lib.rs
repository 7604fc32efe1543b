//! Style transfer with a shared-parameter style transformer, trained by a
//! first-order (Reptile-style) meta-learning loop, on top of a small f64
//! reverse-mode autodiff core. Built to be verifiable end to end on
//! synthetic images: every differentiable piece is checked against a central
//! finite-difference oracle and every run is reproducible from its seed.

pub mod error;
pub mod gradcheck;
pub mod rng;
pub mod tensor;

pub mod feature;

pub use error::{Error, Result};
pub use feature::FeatureMap;
pub use rng::Rng;
pub use tensor::{no_grad, ParamGroup, ParamStore, Snapshot, Tensor};

pub mod attention;
pub mod styletrans;
pub mod backbone;
pub mod objectives;
pub mod config;
pub mod data;
pub mod meta;
pub mod model;
pub mod ppm;
pub mod snapshot;
