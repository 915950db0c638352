//! Label-aware rationales, rationale-conditioned explanations and
//! explanation-selecting NLI classifiers on a small autograd engine.

pub mod autograd;
pub mod backends;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod explainer;
pub mod inference;
pub mod io;
pub mod label;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod rationalizer;
pub mod scalar;
pub mod selector;
pub mod text;
pub mod training;

pub use error::{Error, Result};
pub use label::{Label, PerLabel};

pub type LabelDistribution = label::LabelDistribution<f32>;
pub type Rationalizer = rationalizer::RationalizerModel<f32>;
pub type Generator = backends::TinyGenerator<f32>;
pub type Classifier = selector::NliClassifier<f32>;
pub type InferenceItem = inference::InferenceItem<f32>;
